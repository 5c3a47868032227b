#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "secagent/agent.hpp"
#include "secagent/dataset.hpp"
#include "secagent/matching.hpp"
#include "secagent/model_client.hpp"

namespace secagent {

// Where the previous step's semantic context comes from during offline evaluation.
enum class ContextSource { kSelf, kAnnotated };

std::string_view to_string(ContextSource s);
std::optional<ContextSource> context_source_from_string(std::string_view s);

struct EvalOptions {
  HistoryConfig history = HistoryConfig::semantic_context(1);
  ContextSource context_source = ContextSource::kSelf;
  MatchOptions match;
  int max_retries = kDefaultParseRetries;
  bool check_images = true;
  const PromptTemplate* prompt_template = &PromptTemplate::builtin();
};

struct StepVerdict {
  int index = 0;
  bool correct = false;
  bool parse_failure = false;
  ActionKind gold_kind = ActionKind::kClick;
  std::optional<Action> predicted;
  TurnTelemetry telemetry;
};

struct EpisodeResult {
  std::string episode_id;
  std::string app;
  std::vector<StepVerdict> steps;

  bool all_correct() const;
};

// Steps run in order with gold history: the prior screenshots and actions
// shown to the model are always the gold ones, so one wrong step does not
// change later inputs. Unparseable output scores the step as incorrect.
// Throws DatasetError for unresolvable screenshots or annotated context
// missing when context_source is kAnnotated.
EpisodeResult evaluate_episode(const Episode& episode, const Dataset& dataset,
                               ModelBackend& backend, const EvalOptions& opts);

struct Fraction {
  std::int64_t numerator = 0;
  std::int64_t denominator = 0;
  double value() const {
    return denominator == 0 ? 0.0 : static_cast<double>(numerator) / denominator;
  }
};

struct EfficiencyStats {
  std::int64_t calls = 0;
  double mean_itc = 0;
  double mean_ttft = 0;
  double mean_tps = 0;
  double mean_completion_tokens = 0;
};

struct GroupBreakdown {
  Fraction steps;
  Fraction episodes;
};

struct EvalReport {
  Fraction step_accuracy;
  Fraction task_accuracy;
  // Keyed by gold primary action type: click, type, swipe, terminate.
  std::map<std::string, Fraction> per_action;
  Fraction parse_failures;
  EfficiencyStats efficiency;
  std::map<std::string, GroupBreakdown> per_app;
  std::vector<EpisodeResult> episodes;
};

class EmptyDatasetError : public std::runtime_error {
 public:
  EmptyDatasetError() : std::runtime_error("no evaluated episodes to aggregate") {}
};

// Deterministic reduction; independent of the order episodes finished in
// when `results` is in dataset order.
EvalReport aggregate(const std::vector<EpisodeResult>& results);

using BackendFactory = std::function<std::unique_ptr<ModelBackend>(const Episode&)>;

// Evaluates every episode, up to `parallelism` at once. Results keep
// dataset order. The first DatasetError or BackendError is rethrown.
std::vector<EpisodeResult> evaluate_dataset(const Dataset& dataset, const BackendFactory& factory,
                                            const EvalOptions& opts, int parallelism = 1);

// Without timing the output depends only on the verdicts and token counts,
// so it is byte-identical across runs with a deterministic backend.
Json report_to_json(const EvalReport& r, bool include_timing);
std::string report_table(const EvalReport& r);

}  // namespace secagent
