#pragma once

#include <chrono>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "secagent/annotation.hpp"

namespace secagent {

struct ServerConfig {
  std::string host = "127.0.0.1";
  int port = 0;  // 0 picks a free port
  std::optional<std::filesystem::path> ui_dir;
  std::chrono::seconds lease_ttl{900};
  // When non-empty, every /api route except /api/health requires
  // "Authorization: Bearer <token>".
  std::string bearer_token;
};

// JSON-over-HTTP front end for an AnnotationStore.
//
//   GET  /api/health
//   GET  /api/episodes                          summaries with state
//   GET  /api/episodes/:id                      full record
//   POST /api/episodes/:id/claim                {"annotator"}
//   POST /api/episodes/:id/release              {"annotator"}
//   GET  /api/episodes/:id/steps/:t             step payload (?view=review hides the first pass)
//   GET  /api/episodes/:id/steps/:t/screenshot  image bytes
//   POST /api/episodes/:id/verdicts             Verdict; lease required
//   POST /api/episodes/:id/steps/:t/alternatives {"annotator","choice"}; lease required
//   POST /api/episodes/:id/reviews              Verdict from a second annotator
//   GET  /api/flags                             unresolved review disagreements
//   POST /api/episodes/:id/steps/:t/resolve     {"annotator"}
//   POST /api/export                            {"statuses","name","include_flagged","inline"}
//
// Errors are {"error": <kind>, "message": ...} with a 4xx status.
class AnnotationServer {
 public:
  AnnotationServer(AnnotationStore& store, ServerConfig config);
  ~AnnotationServer();
  AnnotationServer(const AnnotationServer&) = delete;
  AnnotationServer& operator=(const AnnotationServer&) = delete;

  // Binds the socket and returns the bound port. Throws on failure.
  int bind();
  // Serves until stop() is called. bind() must have succeeded.
  void serve();
  void stop();
  void wait_until_ready() const;
  int port() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace secagent
