#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "secagent/dataset.hpp"
#include "secagent/json.hpp"

namespace secagent {

enum class Judgment { kCorrect, kIncorrect };
enum class AnnotationStatus { kInProgress, kComplete, kTruncated };

std::string_view to_string(Judgment j);
std::string_view to_string(AnnotationStatus s);
std::optional<AnnotationStatus> annotation_status_from_string(std::string_view s);

struct Verdict {
  int step = 1;  // 1-based
  Judgment judgment = Judgment::kCorrect;
  std::optional<BBox> bbox;
  std::optional<Action> corrected_action;
  std::vector<GoldChoice> alternatives;
  std::string annotator;
  std::string timestamp;  // ISO-8601 UTC; filled by the store when empty
};

Json verdict_to_json(const Verdict& v);
Verdict verdict_from_json(const Json& j);

// A collected trajectory awaiting human verification.
struct RawStep {
  std::string screenshot;  // relative to the data directory once imported
  Action proposed_action;
  std::optional<std::string> context;
  std::optional<std::string> thought;
};

struct RawEpisode {
  std::string id;
  std::string app;
  std::string instruction;
  std::string source;
  // Episode this one re-executes after a failed agent run.
  std::optional<std::string> parent_id;
  std::vector<RawStep> steps;
};

Json raw_episode_to_json(const RawEpisode& e);
RawEpisode raw_episode_from_json(const Json& j);

struct EpisodeAnnotationState {
  std::string episode_id;
  int cursor = 1;  // next step awaiting a verdict
  std::optional<int> truncated_at;
  AnnotationStatus status = AnnotationStatus::kInProgress;
};

Json state_to_json(const EpisodeAnnotationState& s);

class AnnotationError : public std::runtime_error {
 public:
  enum class Kind {
    kUnknownEpisode,
    kUnknownStep,
    kDuplicateEpisode,
    kOutOfOrder,
    kAlreadyTruncated,
    kAlreadyComplete,
    kMissingBBox,
    kMissingCorrection,
    kBBoxMismatch,
    kInvalidVerdict,
    kDuplicateChoice,
    kStepNotVerified,
    kAlreadyReviewed,
    kNotFlagged,
    kNothingToExport,
    kLeaseConflict,
    kCorruptLog,
  };
  AnnotationError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

std::string_view to_string(AnnotationError::Kind k);

struct ReviewRecord {
  Verdict review;
  bool disagrees = false;
  bool resolved = false;
  std::string resolved_by;
};

struct Lease {
  std::string annotator;
  std::chrono::steady_clock::time_point expires;
};

struct ExportOptions {
  std::set<AnnotationStatus> statuses{AnnotationStatus::kComplete, AnnotationStatus::kTruncated};
  // Skip episodes with second-pass disagreements awaiting adjudication.
  bool exclude_flagged = true;
};

// Event-sourced store: every mutation is appended to <data_dir>/events.jsonl
// (fsync'd) before it is applied, and the in-memory state is a fold over
// that log. Re-opening a directory replays the log; a torn final line from a
// crash is dropped.
//
// Thread safety: mutations of different episodes run concurrently; a single
// episode is serialized by its own mutex. Exports and snapshots take the
// store-wide lock exclusively and see a consistent state.
class AnnotationStore {
 public:
  explicit AnnotationStore(std::filesystem::path data_dir);
  ~AnnotationStore();
  AnnotationStore(const AnnotationStore&) = delete;
  AnnotationStore& operator=(const AnnotationStore&) = delete;

  const std::filesystem::path& data_dir() const { return data_dir_; }

  // Copies screenshots (resolved against source_dir) into the data directory.
  void import_episode(const RawEpisode& episode, const std::filesystem::path& source_dir);
  // Imports every record of a JSONL file; already-known ids are skipped.
  // Returns the number imported.
  std::size_t import_file(const std::filesystem::path& jsonl);

  EpisodeAnnotationState submit_verdict(const std::string& episode_id, Verdict v);
  StepRecord add_alternative(const std::string& episode_id, int step, const GoldChoice& choice);
  // Second-pass verdict on an already verified step. Returns true when it
  // disagrees with the first pass (the step is then flagged).
  bool submit_review(const std::string& episode_id, Verdict review);
  void resolve_flag(const std::string& episode_id, int step, const std::string& annotator);

  std::vector<std::string> episode_ids() const;
  EpisodeAnnotationState state(const std::string& episode_id) const;
  RawEpisode raw_episode(const std::string& episode_id) const;
  std::vector<Verdict> verdicts(const std::string& episode_id) const;
  // Current export view of a verified step.
  StepRecord step_record(const std::string& episode_id, int step) const;
  std::filesystem::path screenshot_path(const std::string& episode_id, int step) const;

  // Deterministic JSON of the whole annotation state (no leases).
  Json snapshot() const;
  Json episode_json(const std::string& episode_id) const;
  Json flags_json() const;

  std::vector<Episode> export_episodes(const ExportOptions& opts = {}) const;
  // Writes an eval-harness dataset whose image_root points at data_dir.
  std::size_t write_export(const std::filesystem::path& out_dir,
                           const ExportOptions& opts = {}) const;

  // Time-limited single-writer claim. Re-claiming by the holder renews it.
  Lease claim(const std::string& episode_id, const std::string& annotator,
              std::chrono::seconds ttl,
              std::chrono::steady_clock::time_point now = std::chrono::steady_clock::now());
  void release(const std::string& episode_id, const std::string& annotator);
  // True when `annotator` holds an unexpired lease on the episode.
  bool holds_lease(const std::string& episode_id, const std::string& annotator,
                   std::chrono::steady_clock::time_point now =
                       std::chrono::steady_clock::now()) const;
  std::optional<Lease> lease(const std::string& episode_id,
                             std::chrono::steady_clock::time_point now =
                                 std::chrono::steady_clock::now()) const;

  std::size_t event_count() const;

 private:
  struct EpisodeRecord {
    RawEpisode raw;
    EpisodeAnnotationState state;
    std::vector<Verdict> verdicts;                      // index k holds step k+1
    std::map<int, std::vector<GoldChoice>> added;       // add_alternative calls
    std::map<int, ReviewRecord> reviews;
  };
  struct Slot {
    mutable std::mutex mu;
    EpisodeRecord rec;
    std::optional<Lease> lease;
  };

  void replay();
  void apply(const Json& event);
  void append(Json event);
  Slot& slot(const std::string& id);
  const Slot& slot(const std::string& id) const;

  static void check_verdict(const EpisodeRecord& rec, const Verdict& v);
  static void apply_verdict(EpisodeRecord& rec, const Verdict& v);
  static std::vector<GoldChoice> gold_choices(const EpisodeRecord& rec, int step);
  static bool disagree(const Verdict& a, const Verdict& b);
  static Json record_json(const EpisodeRecord& rec);
  std::optional<Episode> export_one(const EpisodeRecord& rec, const ExportOptions& opts) const;

  std::filesystem::path data_dir_;
  int log_fd_ = -1;
  mutable std::mutex log_mu_;
  std::int64_t seq_ = 0;

  mutable std::shared_mutex map_mu_;
  std::vector<std::string> order_;
  std::map<std::string, std::unique_ptr<Slot>> slots_;
};

}  // namespace secagent
