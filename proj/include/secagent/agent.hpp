#pragma once

#include <deque>
#include <stdexcept>
#include <string>
#include <vector>

#include "secagent/model_client.hpp"
#include "secagent/prompt.hpp"

namespace secagent {

struct AgentTurnOutput {
  std::string semantic_context;
  std::string thought;
  Action action;
};

// Raised when the model's completion is not a (semantic_context, thought,
// action) triplet. This is exactly the condition for a zero format reward.
class TripletFormatError : public std::runtime_error {
 public:
  TripletFormatError(std::string field, const std::string& what)
      : std::runtime_error(what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

// Accepts {"semantic_context": s, "thought": s, "action": <tool call>}
// anywhere in the text; surrounding prose and code fences are ignored. The
// first balanced top-level object that parses as JSON is used.
AgentTurnOutput parse_turn_output(std::string_view raw);

struct CallRecord {
  TokenUsage usage;
  Timing timing;
};

struct TurnTelemetry {
  std::vector<CallRecord> calls;
  int retry_count = 0;
};

struct TurnResult {
  AgentTurnOutput output;
  TurnTelemetry telemetry;
  std::string raw_text;
};

// The model produced no parseable triplet within the retry budget.
class StepFailure : public std::runtime_error {
 public:
  StepFailure(std::string raw_text, TurnTelemetry telemetry, const std::string& reason)
      : std::runtime_error(reason),
        raw_text_(std::move(raw_text)),
        telemetry_(std::move(telemetry)) {}
  const std::string& raw_text() const { return raw_text_; }
  const TurnTelemetry& telemetry() const { return telemetry_; }

 private:
  std::string raw_text_;
  TurnTelemetry telemetry_;
};

inline constexpr int kDefaultParseRetries = 2;

// Builds the prompt, calls the backend and parses the triplet, re-invoking the
// backend up to `max_retries` times on unparseable output. Backend errors
// propagate unchanged.
TurnResult run_turn(ModelBackend& backend, const AgentTurnInput& input, const HistoryConfig& cfg,
                    int max_retries = kDefaultParseRetries,
                    const PromptTemplate& tmpl = PromptTemplate::builtin());

// Sequential agent loop for one episode: threads the semantic context from
// turn to turn and keeps the last `window` (screenshot, action) pairs.
class AgentSession {
 public:
  AgentSession(std::string instruction, HistoryConfig cfg,
               int max_retries = kDefaultParseRetries,
               const PromptTemplate& tmpl = PromptTemplate::builtin());

  TurnResult step(ModelBackend& backend, const ImageRef& screenshot);

  int next_step() const { return step_; }
  const std::string& context() const { return context_; }
  const std::deque<HistoryEntry>& history() const { return history_; }
  // Input the next call to step() would build, for inspection.
  AgentTurnInput peek_input(const ImageRef& screenshot) const;

 private:
  std::string instruction_;
  HistoryConfig cfg_;
  int max_retries_;
  const PromptTemplate* tmpl_;
  int step_ = 1;
  std::string context_;
  std::deque<HistoryEntry> history_;  // newest first
};

}  // namespace secagent
