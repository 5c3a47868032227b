#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "secagent/action.hpp"
#include "secagent/image.hpp"

namespace secagent {

// A screenshot handed to the model. `size` is filled lazily from the file
// header when a backend needs it.
struct ImageRef {
  std::filesystem::path path;
  std::optional<ImageSize> size;
  friend bool operator==(const ImageRef&, const ImageRef&) = default;
};

enum class HistoryMode { kNone, kRawHistory, kSemanticContext };

std::string_view to_string(HistoryMode m);
std::optional<HistoryMode> history_mode_from_string(std::string_view s);

struct HistoryConfig {
  HistoryMode mode = HistoryMode::kSemanticContext;
  // Number of prior (screenshot, action) pairs shown to the model.
  int window = 1;
  bool include_thought = true;
  // Semantic-context mode is limited to a single prior pair unless set.
  bool allow_wide_context_window = false;

  static HistoryConfig none() { return {HistoryMode::kNone, 0, true, false}; }
  static HistoryConfig raw_history(int n) { return {HistoryMode::kRawHistory, n, true, false}; }
  static HistoryConfig semantic_context(int n = 1) {
    return {HistoryMode::kSemanticContext, n, true, false};
  }
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Throws ConfigError when the mode and window disagree.
void validate_history_config(const HistoryConfig& cfg);

// Context carried into the first step.
inline constexpr std::string_view kStartOfTaskContext = "(start of task)";

struct HistoryEntry {
  ImageRef screenshot;
  Action action;
};

struct AgentTurnInput {
  int step = 1;  // 1-based index t of the current step
  std::string instruction;
  ImageRef current_screenshot;
  std::string prev_context{kStartOfTaskContext};
  // Newest first; at most cfg.window entries.
  std::vector<HistoryEntry> history;
};

struct PromptBundle {
  std::string system_text;
  std::string user_text;
  // History screenshots oldest to newest, then the current screenshot.
  std::vector<ImageRef> images;
  friend bool operator==(const PromptBundle&, const PromptBundle&) = default;
};

// Placeholder-bearing text for each prompt section. Placeholders are written
// {{name}}; rendering fails on unknown names.
struct PromptTemplate {
  std::string version;
  std::string system;           // {{action_space}}, {{output_contract}}
  std::string action_space;
  std::string output_contract;  // {{thought_field}}
  std::string thought_enabled;
  std::string thought_disabled;
  std::string instruction;      // {{instruction}}
  std::string context;          // {{context}}
  std::string history_header;
  std::string history_entry;    // {{step}}, {{action}}
  std::string current;          // {{step}}

  static const PromptTemplate& builtin();
  // JSON object with the same keys; missing keys fall back to builtin().
  static PromptTemplate load(const std::filesystem::path& path);
};

// Marker that stands for an attached image inside prompt text.
inline constexpr std::string_view kImageMarker = "<image>";

std::string render_placeholders(std::string_view tmpl,
                                const std::vector<std::pair<std::string, std::string>>& vars);

// Pure function of its arguments. Throws ConfigError when the input carries
// more history than the configuration allows.
PromptBundle build_prompt(const AgentTurnInput& input, const HistoryConfig& cfg,
                          const PromptTemplate& tmpl = PromptTemplate::builtin());

}  // namespace secagent
