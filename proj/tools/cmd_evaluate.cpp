#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <thread>

#include "cli_common.hpp"
#include "secagent/eval.hpp"

namespace secagent::cli {

namespace {

struct EvaluateArgs {
  std::string dataset;
  std::string backend = "http";
  std::string script;
  std::string mode = "semantic_context";
  int n = -1;
  bool wide_context = false;
  bool no_thought = false;
  std::string context_source = "self";
  int parallelism = 0;
  std::string out = "eval-out";
  std::string prompt_template;
  bool case_insensitive = false;
  int max_retries = kDefaultParseRetries;
  HttpBackendConfig http;
  std::int64_t seed = -1;
};

// Lets every episode share one rate-limited HTTP client.
class SharedBackend : public ModelBackend {
 public:
  explicit SharedBackend(ModelBackend& inner) : inner_(inner) {}
  Completion complete(const PromptBundle& bundle) override { return inner_.complete(bundle); }

 private:
  ModelBackend& inner_;
};

HistoryConfig history_from(const EvaluateArgs& a) {
  const auto mode = history_mode_from_string(a.mode);
  if (!mode) throw ConfigError("unknown history mode '" + a.mode + "'");
  HistoryConfig cfg;
  switch (*mode) {
    case HistoryMode::kNone:
      if (a.n > 0) throw ConfigError("mode none takes no history window");
      cfg = HistoryConfig::none();
      break;
    case HistoryMode::kRawHistory:
      cfg = HistoryConfig::raw_history(a.n < 0 ? 1 : a.n);
      break;
    case HistoryMode::kSemanticContext:
      cfg = HistoryConfig::semantic_context(a.n < 0 ? 1 : a.n);
      break;
  }
  cfg.allow_wide_context_window = a.wide_context;
  cfg.include_thought = !a.no_thought;
  validate_history_config(cfg);
  return cfg;
}

// A JSON array is replayed for every episode; an object maps episode ids to
// their own response lists.
BackendFactory scripted_factory(const std::string& path) {
  if (path.empty()) throw ConfigError("--backend scripted requires --script");
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open script " + path);
  Json script;
  try {
    script = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw DatasetError(path, std::string("malformed script: ") + e.what());
  }
  auto to_list = [&](const Json& arr) {
    if (!arr.is_array()) throw DatasetError(path, "script responses must be an array of strings");
    std::vector<std::string> out;
    for (const auto& s : arr) {
      if (!s.is_string()) throw DatasetError(path, "script responses must be strings");
      out.push_back(s.get<std::string>());
    }
    return out;
  };
  if (script.is_array()) {
    auto shared = to_list(script);
    return [shared](const Episode&) { return std::make_unique<ScriptedBackend>(shared); };
  }
  if (!script.is_object()) throw DatasetError(path, "script must be an array or an object");
  auto per_episode = std::make_shared<std::map<std::string, std::vector<std::string>>>();
  for (auto it = script.begin(); it != script.end(); ++it) {
    (*per_episode)[it.key()] = to_list(it.value());
  }
  return [per_episode](const Episode& e) {
    auto it = per_episode->find(e.id);
    return std::make_unique<ScriptedBackend>(it == per_episode->end()
                                                 ? std::vector<std::string>{}
                                                 : it->second);
  };
}

Json telemetry_json(const EvalReport& r) {
  Json j = Json::object();
  j["efficiency"] = {{"calls", r.efficiency.calls},
                     {"mean_itc", r.efficiency.mean_itc},
                     {"mean_completion_tokens", r.efficiency.mean_completion_tokens},
                     {"mean_ttft_seconds", r.efficiency.mean_ttft},
                     {"mean_tps", r.efficiency.mean_tps}};
  Json eps = Json::array();
  for (const auto& e : r.episodes) {
    Json steps = Json::array();
    for (const auto& s : e.steps) {
      Json calls = Json::array();
      for (const auto& c : s.telemetry.calls) {
        calls.push_back({{"prompt_text_tokens", c.usage.prompt_text_tokens},
                         {"prompt_vision_tokens", c.usage.prompt_vision_tokens},
                         {"completion_tokens", c.usage.completion_tokens},
                         {"usage_source", c.usage.source == UsageSource::kServerReported
                                              ? "server"
                                              : "estimated"},
                         {"ttft_seconds", c.timing.ttft},
                         {"total_seconds", c.timing.total},
                         {"tps", c.timing.tps}});
      }
      steps.push_back(
          {{"step", s.index}, {"retries", s.telemetry.retry_count}, {"calls", std::move(calls)}});
    }
    eps.push_back({{"id", e.episode_id}, {"steps", std::move(steps)}});
  }
  j["episodes"] = std::move(eps);
  return j;
}

int run_evaluate(const EvaluateArgs& a) {
  EvalOptions opts;
  opts.history = history_from(a);
  const auto source = context_source_from_string(a.context_source);
  if (!source) throw ConfigError("unknown context source '" + a.context_source + "'");
  opts.context_source = *source;
  opts.match.case_sensitive = !a.case_insensitive;
  if (a.max_retries < 0) throw ConfigError("--max-retries must be non-negative");
  opts.max_retries = a.max_retries;
  PromptTemplate custom;
  if (!a.prompt_template.empty()) {
    custom = PromptTemplate::load(a.prompt_template);
    opts.prompt_template = &custom;
  }
  const int parallelism =
      a.parallelism > 0 ? a.parallelism
                        : std::max(1, static_cast<int>(std::thread::hardware_concurrency()));

  const Dataset dataset = load_dataset(a.dataset, LoadOptions{true, kMaxAgentEpisodeSteps});

  std::unique_ptr<HttpBackend> http;
  BackendFactory factory;
  if (a.backend == "replay") {
    factory = [](const Episode& e) { return std::make_unique<ReplayBackend>(e); };
  } else if (a.backend == "scripted") {
    factory = scripted_factory(a.script);
  } else if (a.backend == "http") {
    HttpBackendConfig cfg = a.http;
    if (a.seed >= 0) cfg.seed = a.seed;
    if (cfg.max_in_flight < 1) throw ConfigError("--max-in-flight must be at least 1");
    if (!(cfg.timeout_seconds > 0)) throw ConfigError("--timeout must be positive");
    http = std::make_unique<HttpBackend>(cfg);
    ModelBackend* shared = http.get();
    factory = [shared](const Episode&) { return std::make_unique<SharedBackend>(*shared); };
  } else {
    throw ConfigError("unknown backend '" + a.backend + "'");
  }

  const auto results = evaluate_dataset(dataset, factory, opts, parallelism);
  const EvalReport report = aggregate(results);

  const std::filesystem::path out = a.out;
  Json deterministic = report_to_json(report, false);
  Json config = Json::object();
  config["dataset"] = a.dataset;
  config["backend"] = a.backend;
  config["mode"] = std::string(to_string(opts.history.mode));
  config["n"] = opts.history.mode == HistoryMode::kNone ? 0 : opts.history.window;
  config["context_source"] = std::string(to_string(opts.context_source));
  config["case_sensitive"] = opts.match.case_sensitive;
  config["max_retries"] = opts.max_retries;
  config["prompt_template"] = opts.prompt_template->version;
  Json doc = Json::object();
  doc["config"] = std::move(config);
  for (auto it = deterministic.begin(); it != deterministic.end(); ++it) doc[it.key()] = it.value();
  write_json(out / "report.json", doc);
  write_json(out / "report.telemetry.json", telemetry_json(report));
  const std::string table = report_table(report);
  write_text(out / "report.txt", table);
  std::cout << table;
  return kExitOk;
}

}  // namespace

void register_evaluate(CLI::App& app, Runner& runner) {
  auto args = std::make_shared<EvaluateArgs>();
  auto* cmd = app.add_subcommand(
      "evaluate",
      "Run the agent over a dataset and report step/task accuracy and efficiency.\n"
      "Writes <out>/report.json (deterministic), <out>/report.telemetry.json\n"
      "(per-call tokens and timings) and <out>/report.txt.");
  cmd->set_config("--config", "", "TOML/INI file with option defaults");
  cmd->add_option("--dataset", args->dataset, "Dataset manifest or directory")->required();
  cmd->add_option("--backend", args->backend, "http | replay | scripted")
      ->check(CLI::IsMember({"http", "replay", "scripted"}))
      ->capture_default_str();
  cmd->add_option("--script", args->script,
                  "Scripted responses: JSON array, or object keyed by episode id");
  cmd->add_option("--mode", args->mode, "none | raw_history | semantic_context")
      ->capture_default_str();
  cmd->add_option("--n", args->n, "History window N (default 1; 0 for mode none)");
  cmd->add_flag("--wide-context", args->wide_context,
                "Allow N > 1 with semantic_context");
  cmd->add_flag("--no-thought", args->no_thought, "Ask for an empty thought field");
  cmd->add_option("--context-source", args->context_source, "self | annotated")
      ->capture_default_str();
  cmd->add_option("--parallelism", args->parallelism,
                  "Episodes evaluated concurrently (default: logical cores)");
  cmd->add_option("--out", args->out, "Output directory")->capture_default_str();
  cmd->add_option("--prompt-template", args->prompt_template, "Prompt template JSON file");
  cmd->add_flag("--case-insensitive", args->case_insensitive,
                "Compare typed text case-insensitively");
  cmd->add_option("--max-retries", args->max_retries, "Re-asks after unparseable output")
      ->capture_default_str();
  cmd->add_option("--seed", args->seed, "Sampling seed forwarded to the HTTP backend");
  cmd->add_option("--endpoint", args->http.endpoint, "Chat-completions URL")
      ->envname("SECAGENT_ENDPOINT")
      ->capture_default_str();
  cmd->add_option("--model", args->http.model, "Model name sent to the endpoint")
      ->envname("SECAGENT_MODEL")
      ->capture_default_str();
  cmd->add_option("--api-key", args->http.api_key, "Bearer token for the endpoint")
      ->envname("SECAGENT_API_KEY");
  cmd->add_option("--timeout", args->http.timeout_seconds, "Per-request timeout in seconds")
      ->envname("SECAGENT_TIMEOUT")
      ->capture_default_str();
  cmd->add_option("--max-in-flight", args->http.max_in_flight, "Concurrent HTTP requests")
      ->envname("SECAGENT_MAX_IN_FLIGHT")
      ->capture_default_str();
  cmd->add_option("--max-tokens", args->http.max_tokens, "Completion token limit")
      ->capture_default_str();
  cmd->callback([args, &runner] { runner = [args] { return run_evaluate(*args); }; });
}

}  // namespace secagent::cli
