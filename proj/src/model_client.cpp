#include "secagent/model_client.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>

namespace secagent {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Completion local_completion(std::string text, const PromptBundle& bundle,
                            Clock::time_point t0) {
  Completion c;
  c.usage = estimate_prompt_usage(bundle);
  c.usage.completion_tokens = estimate_text_tokens(text);
  c.text = std::move(text);
  const double elapsed = seconds_since(t0);
  c.timing = make_timing(elapsed, elapsed, c.usage.completion_tokens);
  return c;
}

}  // namespace

Timing make_timing(double ttft, double total, std::int64_t completion_tokens) {
  Timing t;
  t.total = std::max(total, 0.0);
  t.ttft = std::clamp(ttft, 0.0, t.total);
  t.tps = static_cast<double>(completion_tokens) / std::max(t.total - t.ttft, kTimingEpsilon);
  return t;
}

std::int64_t estimate_vision_tokens(int width, int height, std::int64_t min_pixels,
                                    std::int64_t max_pixels) {
  if (width <= 0 || height <= 0) return 0;
  const double g = kPatchGrid;
  const double w = width;
  const double h = height;
  auto round_to_grid = [&](double v) {
    return std::max<std::int64_t>(kPatchGrid, std::llround(v / g) * kPatchGrid);
  };
  std::int64_t w_bar = round_to_grid(w);
  std::int64_t h_bar = round_to_grid(h);
  if (w_bar * h_bar > max_pixels) {
    const double beta = std::sqrt(w * h / static_cast<double>(max_pixels));
    w_bar = std::max<std::int64_t>(kPatchGrid,
                                   static_cast<std::int64_t>(std::floor(w / beta / g)) * kPatchGrid);
    h_bar = std::max<std::int64_t>(kPatchGrid,
                                   static_cast<std::int64_t>(std::floor(h / beta / g)) * kPatchGrid);
  } else if (w_bar * h_bar < min_pixels) {
    const double beta = std::sqrt(static_cast<double>(min_pixels) / (w * h));
    w_bar = static_cast<std::int64_t>(std::ceil(w * beta / g)) * kPatchGrid;
    h_bar = static_cast<std::int64_t>(std::ceil(h * beta / g)) * kPatchGrid;
  }
  const std::int64_t tokens = (w_bar / kPatchGrid) * (h_bar / kPatchGrid);
  // Clamped to the pixel budget; extreme aspect ratios overshoot it on the grid.
  const std::int64_t cell = std::int64_t{kPatchGrid} * kPatchGrid;
  const std::int64_t lo = (min_pixels + cell - 1) / cell;
  const std::int64_t hi = max_pixels / cell;
  return std::clamp(tokens, lo, std::max(lo, hi));
}

std::int64_t estimate_text_tokens(std::string_view text) {
  return static_cast<std::int64_t>((text.size() + 3) / 4);
}

TokenUsage estimate_prompt_usage(const PromptBundle& bundle) {
  TokenUsage u;
  u.source = UsageSource::kEstimated;
  u.prompt_text_tokens = estimate_text_tokens(bundle.system_text) +
                         estimate_text_tokens(bundle.user_text);
  for (const auto& img : bundle.images) {
    const ImageSize size = img.size ? *img.size : read_image_size(img.path);
    u.prompt_vision_tokens += estimate_vision_tokens(size.width, size.height);
  }
  return u;
}

void apply_env_overrides(HttpBackendConfig& cfg) {
  if (const char* v = std::getenv("SECAGENT_ENDPOINT"); v && *v) cfg.endpoint = v;
  if (const char* v = std::getenv("SECAGENT_API_KEY"); v && *v) cfg.api_key = v;
  if (const char* v = std::getenv("SECAGENT_MODEL"); v && *v) cfg.model = v;
  if (const char* v = std::getenv("SECAGENT_TIMEOUT"); v && *v) cfg.timeout_seconds = std::atof(v);
  if (const char* v = std::getenv("SECAGENT_MAX_IN_FLIGHT"); v && *v) {
    cfg.max_in_flight = std::max(1, std::atoi(v));
  }
}

std::string make_triplet_text(const std::string& semantic_context, const std::string& thought,
                              const Action& action) {
  Json j = Json::object();
  j["semantic_context"] = semantic_context;
  j["thought"] = thought;
  j["action"] = action_to_json(action);
  return j.dump();
}

ReplayBackend::ReplayBackend(Episode episode) : episode_(std::move(episode)) {}

Completion ReplayBackend::complete(const PromptBundle& bundle) {
  const auto t0 = Clock::now();
  if (next_ >= episode_.steps.size()) {
    throw BackendError(BackendError::Kind::kExhausted,
                       "replay of episode " + episode_.id + " exhausted after " +
                           std::to_string(episode_.steps.size()) + " steps");
  }
  const StepRecord& step = episode_.steps[next_++];
  std::string context = step.annotated_context.value_or(
      "Step " + std::to_string(step.index) + " done: " + serialize_action(step.primary_action));
  std::string thought = step.annotated_thought.value_or(
      "Follow the demonstrated step " + std::to_string(step.index) + ".");
  return local_completion(make_triplet_text(context, thought, step.primary_action), bundle, t0);
}

ScriptedBackend::ScriptedBackend(std::vector<std::string> responses)
    : responses_(std::move(responses)) {}

Completion ScriptedBackend::complete(const PromptBundle& bundle) {
  const auto t0 = Clock::now();
  if (next_ >= responses_.size()) {
    throw BackendError(BackendError::Kind::kExhausted,
                       "scripted backend has no response left after " +
                           std::to_string(responses_.size()) + " calls");
  }
  return local_completion(responses_[next_++], bundle, t0);
}

}  // namespace secagent
