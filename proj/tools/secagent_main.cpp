#include <cstdio>
#include <fstream>
#include <iostream>

#include "cli_common.hpp"
#include "secagent/action.hpp"
#include "secagent/annotation.hpp"
#include "secagent/eval.hpp"
#include "secagent/image.hpp"
#include "secagent/pipeline.hpp"
#include "secagent/rewards.hpp"

namespace secagent::cli {

std::vector<JsonlRecord> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError(path.string(), "cannot open file");
  std::vector<JsonlRecord> out;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::parse_error& e) {
      throw DatasetError(location(path, n), std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw DatasetError(location(path, n), "record must be a JSON object");
    out.push_back({n, std::move(j)});
  }
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

void write_json(const std::filesystem::path& path, const Json& j) {
  write_text(path, j.dump(2) + "\n");
}

std::string location(const std::filesystem::path& file, int line) {
  return file.filename().string() + ":" + std::to_string(line);
}

std::string relative_to(const std::filesystem::path& target,
                        const std::filesystem::path& from_dir) {
  const auto abs_target = std::filesystem::absolute(target).lexically_normal();
  const auto abs_from = std::filesystem::absolute(from_dir).lexically_normal();
  auto rel = abs_target.lexically_relative(abs_from);
  return rel.empty() ? abs_target.string() : rel.string();
}

namespace {

int run_guarded(const Runner& runner) {
  try {
    return runner();
  } catch (const BackendError& e) {
    std::cerr << "backend error: " << e.what() << "\n";
    return kExitBackend;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DatasetError& e) {
    std::cerr << "dataset error: " << e.what() << "\n";
    return kExitDataset;
  } catch (const EmptyDatasetError& e) {
    std::cerr << "dataset error: " << e.what() << "\n";
    return kExitDataset;
  } catch (const AnnotationError& e) {
    std::cerr << "annotation error (" << to_string(e.kind()) << "): " << e.what() << "\n";
    return kExitDataset;
  } catch (const ActionError& e) {
    std::cerr << "schema error: " << e.what() << "\n";
    return kExitDataset;
  } catch (const ImageError& e) {
    std::cerr << "image error: " << e.what() << "\n";
    return kExitDataset;
  } catch (const Json::exception& e) {
    std::cerr << "schema error: " << e.what() << "\n";
    return kExitDataset;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace

}  // namespace secagent::cli

int main(int argc, char** argv) {
  using namespace secagent::cli;
  CLI::App app{"secagent: evaluation, data pipeline, rewards and annotation tooling for GUI agents"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "secagent 0.1.0");

  Runner runner;
  register_evaluate(app, runner);
  register_pipeline(app, runner);
  register_reward(app, runner);
  register_serve(app, runner);
  register_annotate(app, runner);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }
  if (!runner) return kExitConfig;
  return run_guarded(runner);
}
