#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "secagent/action.hpp"
#include "secagent/json.hpp"

namespace secagent {

// One acceptable answer for a step. A step is answered correctly when the
// predicted action matches any of its choices.
struct ClickTarget {
  BBox bbox;
  friend bool operator==(const ClickTarget&, const ClickTarget&) = default;
};
struct TypeTarget {
  std::string text;
  friend bool operator==(const TypeTarget&, const TypeTarget&) = default;
};
struct SwipeTarget {
  SwipeDirection direction = SwipeDirection::kUp;
  friend bool operator==(const SwipeTarget&, const SwipeTarget&) = default;
};
struct TerminateTarget {
  TerminateStatus status = TerminateStatus::kSuccess;
  friend bool operator==(const TerminateTarget&, const TerminateTarget&) = default;
};
// Full structural equality; used for system_button and wait steps.
struct ExactTarget {
  Action action;
  friend bool operator==(const ExactTarget&, const ExactTarget&) = default;
};

using GoldChoice =
    std::variant<ClickTarget, TypeTarget, SwipeTarget, TerminateTarget, ExactTarget>;

Json gold_choice_to_json(const GoldChoice& c);
GoldChoice gold_choice_from_json(const Json& j);

// The choice an annotator implicitly confirms when accepting `a`: clicks need
// the box, every other family derives its target from the action itself.
GoldChoice choice_for_action(const Action& a, const std::optional<BBox>& bbox);

struct StepRecord {
  int index = 1;            // 1-based
  std::string screenshot;   // path as written in the dataset
  std::vector<GoldChoice> gold_choices;
  std::optional<std::string> annotated_context;
  std::optional<std::string> annotated_thought;
  Action primary_action;
};

struct Episode {
  std::string id;
  std::string app;
  std::string instruction;
  // "human", "agent", "gr2nav", ... Agent-driven episodes are capped in length.
  std::string source;
  std::optional<std::string> parent_id;
  std::vector<StepRecord> steps;
};

class DatasetError : public std::runtime_error {
 public:
  DatasetError(std::string where, const std::string& what);
  // Location of the violation, e.g. "episodes.jsonl:12 episode e7 step 3".
  const std::string& where() const { return where_; }

 private:
  std::string where_;
};

constexpr int kMaxAgentEpisodeSteps = 30;

struct Dataset {
  std::filesystem::path image_root;
  std::vector<Episode> episodes;

  std::filesystem::path resolve(const std::string& screenshot) const {
    return image_root / screenshot;
  }
};

struct LoadOptions {
  bool check_images = false;
  int max_agent_steps = kMaxAgentEpisodeSteps;
};

// Throws DatasetError naming the first violated invariant.
void validate_episode(const Episode& e, int max_agent_steps = kMaxAgentEpisodeSteps);

Json step_to_json(const StepRecord& s);
StepRecord step_from_json(const Json& j);
Json episode_to_json(const Episode& e);
Episode episode_from_json(const Json& j);

// `path` is either a manifest file or a directory containing manifest.json.
Dataset load_dataset(const std::filesystem::path& path, const LoadOptions& opts = {});

// Writes <dir>/manifest.json and <dir>/episodes.jsonl. `image_root` is
// recorded as given (relative paths are resolved against `dir` on load).
void write_dataset(const std::filesystem::path& dir, const std::vector<Episode>& episodes,
                   const std::string& image_root = ".", const Json& extra_manifest = {});

}  // namespace secagent
