#pragma once

#include <CLI11.hpp>

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "secagent/json.hpp"

namespace secagent::cli {

enum ExitCode {
  kExitOk = 0,
  kExitFailure = 1,
  kExitDataset = 2,
  kExitBackend = 3,
  kExitConfig = 4,
};

// Work to run once the command line has been parsed.
using Runner = std::function<int()>;

// Each registers one subcommand and sets `runner` when it is selected.
void register_evaluate(CLI::App& app, Runner& runner);
void register_pipeline(CLI::App& app, Runner& runner);
void register_reward(CLI::App& app, Runner& runner);
void register_serve(CLI::App& app, Runner& runner);
void register_annotate(CLI::App& app, Runner& runner);

struct JsonlRecord {
  int line = 0;
  Json value;
};

// Reads non-blank lines as JSON objects. Parse errors name "<file>:<line>".
std::vector<JsonlRecord> read_jsonl(const std::filesystem::path& path);

void write_text(const std::filesystem::path& path, const std::string& text);
void write_json(const std::filesystem::path& path, const Json& j);

// "<file>:<line>" for diagnostics.
std::string location(const std::filesystem::path& file, int line);

// Path of `target` as seen from `from_dir`, for image roots in manifests.
std::string relative_to(const std::filesystem::path& target, const std::filesystem::path& from_dir);

}  // namespace secagent::cli
