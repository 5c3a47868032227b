#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "secagent/dataset.hpp"
#include "secagent/prompt.hpp"

namespace secagent {

enum class UsageSource { kServerReported, kEstimated };

struct TokenUsage {
  std::int64_t prompt_text_tokens = 0;
  std::int64_t prompt_vision_tokens = 0;
  std::int64_t completion_tokens = 0;
  UsageSource source = UsageSource::kEstimated;

  // Input token count: text plus vision.
  std::int64_t itc() const { return prompt_text_tokens + prompt_vision_tokens; }
};

struct Timing {
  double ttft = 0;   // seconds until the first completion content
  double total = 0;  // seconds until the response finished
  double tps = 0;    // completion tokens per second after the first token
};

inline constexpr double kTimingEpsilon = 1e-3;

Timing make_timing(double ttft, double total, std::int64_t completion_tokens);

struct Completion {
  std::string text;
  TokenUsage usage;
  Timing timing;
};

class BackendError : public std::runtime_error {
 public:
  enum class Kind { kTimeout, kHttpError, kStreamInterrupted, kExhausted };

  BackendError(Kind kind, const std::string& what, int http_status = 0)
      : std::runtime_error(what), kind_(kind), http_status_(http_status) {}
  Kind kind() const { return kind_; }
  int http_status() const { return http_status_; }

 private:
  Kind kind_;
  int http_status_;
};

class ModelBackend {
 public:
  virtual ~ModelBackend() = default;
  virtual Completion complete(const PromptBundle& bundle) = 0;
};

// Pixel budget of the vision encoder and its 28-pixel patch grid.
inline constexpr std::int64_t kDefaultMinPixels = 200704;
inline constexpr std::int64_t kDefaultMaxPixels = 501760;
inline constexpr int kPatchGrid = 28;

// Tokens the vision encoder spends on a width x height image after the
// aspect-preserving resize into [min_pixels, max_pixels] on a 28-px grid.
std::int64_t estimate_vision_tokens(int width, int height,
                                    std::int64_t min_pixels = kDefaultMinPixels,
                                    std::int64_t max_pixels = kDefaultMaxPixels);

// Tokenizer-free estimate: ceil(bytes / 4).
std::int64_t estimate_text_tokens(std::string_view text);

// Estimated prompt usage for a bundle; image sizes are read from file headers
// when not already known.
TokenUsage estimate_prompt_usage(const PromptBundle& bundle);

struct HttpBackendConfig {
  std::string endpoint = "http://127.0.0.1:8000/v1/chat/completions";
  std::string model = "secagent";
  std::string api_key;
  double timeout_seconds = 120;
  int max_in_flight = 4;
  double temperature = 0;
  int max_tokens = 1024;
  std::optional<std::int64_t> seed;
};

// Overrides fields from SECAGENT_ENDPOINT, SECAGENT_API_KEY, SECAGENT_MODEL,
// SECAGENT_TIMEOUT and SECAGENT_MAX_IN_FLIGHT when those are set.
void apply_env_overrides(HttpBackendConfig& cfg);

// Builds the chat-completions request body: a system message and one user
// message holding the text part followed by the images in bundle order.
Json build_chat_request(const PromptBundle& bundle, const HttpBackendConfig& cfg);

// Streams a chat completion over HTTP and measures TTFT on the first content
// delta. Safe to share across threads; concurrent calls beyond max_in_flight
// block.
class HttpBackend : public ModelBackend {
 public:
  explicit HttpBackend(HttpBackendConfig cfg);
  Completion complete(const PromptBundle& bundle) override;

  const HttpBackendConfig& config() const { return cfg_; }

 private:
  HttpBackendConfig cfg_;
  std::string scheme_host_port_;
  std::string path_;
  std::mutex mu_;
  std::condition_variable cv_;
  int in_flight_ = 0;
};

// Returns the k-th gold primary action of an episode on call k, wrapped in a
// well-formed triplet.
class ReplayBackend : public ModelBackend {
 public:
  explicit ReplayBackend(Episode episode);
  Completion complete(const PromptBundle& bundle) override;
  std::size_t calls() const { return next_; }

 private:
  Episode episode_;
  std::size_t next_ = 0;
};

// Returns canned responses in order.
class ScriptedBackend : public ModelBackend {
 public:
  explicit ScriptedBackend(std::vector<std::string> responses);
  Completion complete(const PromptBundle& bundle) override;
  std::size_t calls() const { return next_; }

 private:
  std::vector<std::string> responses_;
  std::size_t next_ = 0;
};

// Triplet text in the format the agent parser accepts.
std::string make_triplet_text(const std::string& semantic_context, const std::string& thought,
                              const Action& action);

}  // namespace secagent
