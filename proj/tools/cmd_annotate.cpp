#include <csignal>
#include <iostream>
#include <memory>
#include <thread>

#include "cli_common.hpp"
#include "secagent/annotation_server.hpp"
#include "secagent/prompt.hpp"

namespace secagent::cli {

namespace {

struct ServeArgs {
  std::string data_dir;
  std::vector<std::string> imports;
  ServerConfig server;
  std::string ui_dir;
  int lease_ttl = 900;
};

int run_serve(const ServeArgs& a) {
  ServerConfig cfg = a.server;
  if (a.lease_ttl <= 0) throw ConfigError("--lease-ttl must be positive");
  cfg.lease_ttl = std::chrono::seconds(a.lease_ttl);
  if (!a.ui_dir.empty()) cfg.ui_dir = a.ui_dir;

  // Shutdown signals are blocked in every thread and consumed by the waiter below.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);
  std::signal(SIGPIPE, SIG_IGN);

  AnnotationStore store(a.data_dir);
  for (const auto& file : a.imports) {
    const std::size_t n = store.import_file(file);
    std::cerr << "imported " << n << " episodes from " << file << "\n";
  }
  AnnotationServer server(store, cfg);
  const int port = server.bind();
  std::cout << "listening on http://" << cfg.host << ":" << port << std::endl;

  std::thread waiter([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    server.stop();
  });
  server.serve();
  // serve() also returns on bind loss; wake the waiter so it can exit.
  pthread_kill(waiter.native_handle(), SIGTERM);
  waiter.join();
  std::cerr << "stopped after " << store.event_count() << " events\n";
  return kExitOk;
}

int run_import(const std::string& data_dir, const std::vector<std::string>& files) {
  AnnotationStore store(data_dir);
  for (const auto& file : files) {
    std::cout << "imported " << store.import_file(file) << " episodes from " << file << "\n";
  }
  return kExitOk;
}

int run_export(const std::string& data_dir, const std::string& out,
               const std::vector<std::string>& statuses, bool include_flagged) {
  AnnotationStore store(data_dir);
  ExportOptions opts;
  if (!statuses.empty()) {
    opts.statuses.clear();
    for (const auto& s : statuses) {
      auto status = annotation_status_from_string(s);
      if (!status) throw ConfigError("unknown status '" + s + "'");
      opts.statuses.insert(*status);
    }
  }
  opts.exclude_flagged = !include_flagged;
  const std::size_t n = store.write_export(out, opts);
  std::cout << "exported " << n << " episodes to " << out << "\n";
  return kExitOk;
}

int run_snapshot(const std::string& data_dir) {
  AnnotationStore store(data_dir);
  std::cout << store.snapshot().dump(2) << "\n";
  return kExitOk;
}

}  // namespace

void register_serve(CLI::App& app, Runner& runner) {
  auto args = std::make_shared<ServeArgs>();
  auto* cmd = app.add_subcommand("serve", "Run the annotation service (HTTP API + UI files).");
  cmd->add_option("--data-dir", args->data_dir, "Annotation data directory")->required();
  cmd->add_option("--import", args->imports, "Episode JSONL to import before serving");
  cmd->add_option("--host", args->server.host, "Bind address")->capture_default_str();
  cmd->add_option("--port", args->server.port, "Port (0 picks a free one)")
      ->capture_default_str();
  cmd->add_option("--ui-dir", args->ui_dir, "Static files served at /");
  cmd->add_option("--lease-ttl", args->lease_ttl, "Episode claim lifetime in seconds")
      ->capture_default_str();
  cmd->add_option("--token", args->server.bearer_token, "Bearer token required on /api")
      ->envname("SECAGENT_ANNOTATION_TOKEN");
  cmd->callback([args, &runner] { runner = [args] { return run_serve(*args); }; });
}

void register_annotate(CLI::App& app, Runner& runner) {
  auto* cmd = app.add_subcommand("annotate", "Offline access to an annotation data directory.");
  cmd->require_subcommand(1);
  auto data_dir = std::make_shared<std::string>();

  auto files = std::make_shared<std::vector<std::string>>();
  auto* imp = cmd->add_subcommand(
      "import", "Import raw episodes: JSONL of {id, app, instruction, source, parent_id?,\n"
                "steps:[{screenshot, proposed_action, context?, thought?}]}.");
  imp->add_option("--data-dir", *data_dir, "Annotation data directory")->required();
  imp->add_option("--input", *files, "Episode JSONL files")->required();
  imp->callback([data_dir, files, &runner] {
    runner = [data_dir, files] { return run_import(*data_dir, *files); };
  });

  auto out = std::make_shared<std::string>();
  auto statuses = std::make_shared<std::vector<std::string>>();
  auto include_flagged = std::make_shared<bool>(false);
  auto* exp = cmd->add_subcommand("export", "Write verified episodes as an evaluation dataset.");
  exp->add_option("--data-dir", *data_dir, "Annotation data directory")->required();
  exp->add_option("--out", *out, "Output dataset directory")->required();
  exp->add_option("--status", *statuses,
                  "Statuses to export: complete, truncated, in_progress "
                  "(default: complete truncated)");
  exp->add_flag("--include-flagged", *include_flagged,
                "Also export episodes with unresolved review disagreements");
  exp->callback([data_dir, out, statuses, include_flagged, &runner] {
    runner = [data_dir, out, statuses, include_flagged] {
      return run_export(*data_dir, *out, *statuses, *include_flagged);
    };
  });

  auto* snap = cmd->add_subcommand("snapshot", "Print the folded annotation state as JSON.");
  snap->add_option("--data-dir", *data_dir, "Annotation data directory")->required();
  snap->callback([data_dir, &runner] { runner = [data_dir] { return run_snapshot(*data_dir); }; });
}

}  // namespace secagent::cli
