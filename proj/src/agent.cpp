#include "secagent/agent.hpp"

#include <optional>

namespace secagent {

namespace {

// End offset (exclusive) of the balanced object starting at `open`, or npos.
std::size_t balanced_object_end(std::string_view s, std::size_t open) {
  int depth = 0;
  bool in_string = false;
  bool escaped = false;
  for (std::size_t i = open; i < s.size(); ++i) {
    const char c = s[i];
    if (in_string) {
      if (escaped) {
        escaped = false;
      } else if (c == '\\') {
        escaped = true;
      } else if (c == '"') {
        in_string = false;
      }
      continue;
    }
    if (c == '"') {
      in_string = true;
    } else if (c == '{') {
      ++depth;
    } else if (c == '}') {
      if (--depth == 0) return i + 1;
    }
  }
  return std::string_view::npos;
}

std::optional<Json> first_json_object(std::string_view s) {
  for (std::size_t open = s.find('{'); open != std::string_view::npos;
       open = s.find('{', open + 1)) {
    const std::size_t end = balanced_object_end(s, open);
    if (end == std::string_view::npos) continue;
    try {
      Json j = Json::parse(s.substr(open, end - open));
      if (j.is_object()) return j;
    } catch (const Json::parse_error&) {
    }
  }
  return std::nullopt;
}

const std::string& require_string(const Json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) {
    throw TripletFormatError(key, std::string("triplet is missing \"") + key + "\"");
  }
  if (!it->is_string()) {
    throw TripletFormatError(key, std::string("triplet field \"") + key + "\" is not a string");
  }
  return it->get_ref<const std::string&>();
}

}  // namespace

AgentTurnOutput parse_turn_output(std::string_view raw) {
  auto doc = first_json_object(raw);
  if (!doc) throw TripletFormatError("", "no JSON object in model output");
  AgentTurnOutput out;
  out.semantic_context = require_string(*doc, "semantic_context");
  out.thought = require_string(*doc, "thought");
  auto it = doc->find("action");
  if (it == doc->end()) throw TripletFormatError("action", "triplet is missing \"action\"");
  try {
    out.action = it->is_string() ? parse_action(it->get_ref<const std::string&>())
                                 : action_from_json(*it);
  } catch (const ActionError& e) {
    throw TripletFormatError("action", std::string("triplet action invalid: ") + e.what());
  }
  return out;
}

TurnResult run_turn(ModelBackend& backend, const AgentTurnInput& input, const HistoryConfig& cfg,
                    int max_retries, const PromptTemplate& tmpl) {
  const PromptBundle bundle = build_prompt(input, cfg, tmpl);
  TurnTelemetry telemetry;
  std::string last_raw;
  std::string last_error;
  for (int attempt = 0; attempt <= max_retries; ++attempt) {
    Completion c = backend.complete(bundle);
    telemetry.calls.push_back({c.usage, c.timing});
    telemetry.retry_count = attempt;
    try {
      AgentTurnOutput out = parse_turn_output(c.text);
      return {std::move(out), std::move(telemetry), std::move(c.text)};
    } catch (const TripletFormatError& e) {
      last_error = e.what();
      last_raw = std::move(c.text);
    }
  }
  throw StepFailure(std::move(last_raw), std::move(telemetry),
                    "step " + std::to_string(input.step) + ": no valid triplet after " +
                        std::to_string(max_retries + 1) + " attempts (" + last_error + ")");
}

AgentSession::AgentSession(std::string instruction, HistoryConfig cfg, int max_retries,
                           const PromptTemplate& tmpl)
    : instruction_(std::move(instruction)),
      cfg_(cfg),
      max_retries_(max_retries),
      tmpl_(&tmpl),
      context_(kStartOfTaskContext) {
  validate_history_config(cfg_);
}

AgentTurnInput AgentSession::peek_input(const ImageRef& screenshot) const {
  AgentTurnInput in;
  in.step = step_;
  in.instruction = instruction_;
  in.current_screenshot = screenshot;
  in.prev_context = context_;
  in.history.assign(history_.begin(), history_.end());
  return in;
}

TurnResult AgentSession::step(ModelBackend& backend, const ImageRef& screenshot) {
  TurnResult r = run_turn(backend, peek_input(screenshot), cfg_, max_retries_, *tmpl_);
  context_ = r.output.semantic_context;
  if (cfg_.window > 0) {
    history_.push_front({screenshot, r.output.action});
    while (static_cast<int>(history_.size()) > cfg_.window) history_.pop_back();
  }
  ++step_;
  return r;
}

}  // namespace secagent
