#include "secagent/annotation.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <ctime>
#include <fstream>

#include "secagent/matching.hpp"
#include "secagent/pipeline.hpp"

namespace secagent {

namespace fs = std::filesystem;

namespace {

using Kind = AnnotationError::Kind;

std::string utc_now_iso8601() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

Json bbox_json(const BBox& b) { return Json::array({b.x_min, b.y_min, b.x_max, b.y_max}); }

BBox bbox_from(const Json& j) {
  if (!j.is_array() || j.size() != 4) {
    throw std::invalid_argument("bbox must be [x_min, y_min, x_max, y_max]");
  }
  for (const auto& v : j) {
    if (!v.is_number_integer()) throw std::invalid_argument("bbox values must be integers");
  }
  BBox b{j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
  if (!b.valid()) throw std::invalid_argument("bbox is empty or negative");
  return b;
}

double iou(const BBox& a, const BBox& b) {
  const std::int64_t ix = std::max<std::int64_t>(
      0, std::int64_t{std::min(a.x_max, b.x_max)} - std::max(a.x_min, b.x_min));
  const std::int64_t iy = std::max<std::int64_t>(
      0, std::int64_t{std::min(a.y_max, b.y_max)} - std::max(a.y_min, b.y_min));
  const double inter = static_cast<double>(ix * iy);
  const double uni = static_cast<double>(a.area() + b.area()) - inter;
  return uni <= 0 ? 0.0 : inter / uni;
}

constexpr double kReviewIouThreshold = 0.5;

void write_all(int fd, const std::string& data) {
  std::size_t off = 0;
  while (off < data.size()) {
    const ssize_t n = ::write(fd, data.data() + off, data.size() - off);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw std::runtime_error(std::string("event log write failed: ") + std::strerror(errno));
    }
    off += static_cast<std::size_t>(n);
  }
}

// Base choice confirmed by a verdict on a step whose demonstrated action is
// `proposed`.
GoldChoice base_choice(const Action& proposed, const Verdict& v) {
  const Action& a = v.judgment == Judgment::kCorrect ? proposed : *v.corrected_action;
  return choice_for_action(a, v.bbox);
}

void check_choices_distinct(std::vector<GoldChoice> existing,
                            const std::vector<GoldChoice>& additions) {
  for (const auto& c : additions) {
    if (std::find(existing.begin(), existing.end(), c) != existing.end()) {
      throw AnnotationError(Kind::kDuplicateChoice, "alternative duplicates an existing choice");
    }
    existing.push_back(c);
  }
}

void check_choice_valid(const GoldChoice& c) {
  // Round-trip through the dataset parser, which enforces choice invariants.
  try {
    (void)gold_choice_from_json(gold_choice_to_json(c));
  } catch (const std::exception& e) {
    throw AnnotationError(Kind::kInvalidVerdict, std::string("invalid choice: ") + e.what());
  }
}

// Shape rules shared by first-pass verdicts and second-pass reviews.
void check_verdict_shape(const Action& proposed, const Verdict& v) {
  if (v.annotator.empty()) throw AnnotationError(Kind::kInvalidVerdict, "annotator is required");
  const Action* target = &proposed;
  if (v.judgment == Judgment::kCorrect) {
    if (v.corrected_action) {
      throw AnnotationError(Kind::kInvalidVerdict,
                            "a correct verdict cannot carry a corrected action");
    }
  } else {
    if (!v.corrected_action) {
      throw AnnotationError(Kind::kMissingCorrection,
                            "an incorrect verdict requires the corrected action");
    }
    try {
      validate_action(*v.corrected_action);
    } catch (const ActionError& e) {
      throw AnnotationError(Kind::kInvalidVerdict, std::string("corrected action: ") + e.what());
    }
    target = &*v.corrected_action;
  }
  if (v.bbox && !v.bbox->valid()) throw AnnotationError(Kind::kInvalidVerdict, "bbox is invalid");
  if (const auto* click = std::get_if<Click>(target)) {
    if (!v.bbox) {
      throw AnnotationError(Kind::kMissingBBox, "click step " + std::to_string(v.step) +
                                                    " requires a bounding box");
    }
    if (!v.bbox->contains(click->coordinate)) {
      throw AnnotationError(Kind::kBBoxMismatch,
                            "bounding box does not contain the click coordinate");
    }
  }
  for (const auto& c : v.alternatives) check_choice_valid(c);
  std::vector<GoldChoice> base{choice_for_action(*target, v.bbox)};
  check_choices_distinct(base, v.alternatives);
}

}  // namespace

std::string_view to_string(Judgment j) {
  return j == Judgment::kCorrect ? "correct" : "incorrect";
}

std::string_view to_string(AnnotationStatus s) {
  switch (s) {
    case AnnotationStatus::kInProgress: return "in_progress";
    case AnnotationStatus::kComplete: return "complete";
    case AnnotationStatus::kTruncated: return "truncated";
  }
  return "?";
}

std::optional<AnnotationStatus> annotation_status_from_string(std::string_view s) {
  if (s == "in_progress") return AnnotationStatus::kInProgress;
  if (s == "complete") return AnnotationStatus::kComplete;
  if (s == "truncated") return AnnotationStatus::kTruncated;
  return std::nullopt;
}

std::string_view to_string(AnnotationError::Kind k) {
  switch (k) {
    case Kind::kUnknownEpisode: return "UnknownEpisode";
    case Kind::kUnknownStep: return "UnknownStep";
    case Kind::kDuplicateEpisode: return "DuplicateEpisode";
    case Kind::kOutOfOrder: return "OutOfOrder";
    case Kind::kAlreadyTruncated: return "AlreadyTruncated";
    case Kind::kAlreadyComplete: return "AlreadyComplete";
    case Kind::kMissingBBox: return "MissingBBox";
    case Kind::kMissingCorrection: return "MissingCorrection";
    case Kind::kBBoxMismatch: return "BBoxMismatch";
    case Kind::kInvalidVerdict: return "InvalidVerdict";
    case Kind::kDuplicateChoice: return "DuplicateChoice";
    case Kind::kStepNotVerified: return "StepNotVerified";
    case Kind::kAlreadyReviewed: return "AlreadyReviewed";
    case Kind::kNotFlagged: return "NotFlagged";
    case Kind::kNothingToExport: return "NothingToExport";
    case Kind::kLeaseConflict: return "LeaseConflict";
    case Kind::kCorruptLog: return "CorruptLog";
  }
  return "?";
}

Json verdict_to_json(const Verdict& v) {
  Json j = Json::object();
  j["step"] = v.step;
  j["judgment"] = std::string(to_string(v.judgment));
  if (v.bbox) j["bbox"] = bbox_json(*v.bbox);
  if (v.corrected_action) j["corrected_action"] = action_to_json(*v.corrected_action);
  Json alts = Json::array();
  for (const auto& c : v.alternatives) alts.push_back(gold_choice_to_json(c));
  j["alternatives"] = std::move(alts);
  j["annotator"] = v.annotator;
  j["timestamp"] = v.timestamp;
  return j;
}

Verdict verdict_from_json(const Json& j) {
  if (!j.is_object()) throw std::invalid_argument("verdict must be a JSON object");
  Verdict v;
  v.step = j.at("step").get<int>();
  const auto judgment = j.at("judgment").get<std::string>();
  if (judgment == "correct") {
    v.judgment = Judgment::kCorrect;
  } else if (judgment == "incorrect") {
    v.judgment = Judgment::kIncorrect;
  } else {
    throw std::invalid_argument("judgment must be \"correct\" or \"incorrect\"");
  }
  if (auto b = j.find("bbox"); b != j.end() && !b->is_null()) v.bbox = bbox_from(*b);
  if (auto a = j.find("corrected_action"); a != j.end() && !a->is_null()) {
    v.corrected_action = a->is_string() ? parse_action(a->get_ref<const std::string&>())
                                        : action_from_json(*a);
  }
  if (auto alts = j.find("alternatives"); alts != j.end() && !alts->is_null()) {
    for (const auto& c : *alts) v.alternatives.push_back(gold_choice_from_json(c));
  }
  v.annotator = j.value("annotator", "");
  v.timestamp = j.value("timestamp", "");
  return v;
}

Json raw_episode_to_json(const RawEpisode& e) {
  Json j = Json::object();
  j["id"] = e.id;
  j["app"] = e.app;
  j["instruction"] = e.instruction;
  j["source"] = e.source;
  if (e.parent_id) j["parent_id"] = *e.parent_id;
  Json steps = Json::array();
  for (const auto& s : e.steps) {
    Json sj = Json::object();
    sj["screenshot"] = s.screenshot;
    sj["proposed_action"] = action_to_json(s.proposed_action);
    if (s.context) sj["context"] = *s.context;
    if (s.thought) sj["thought"] = *s.thought;
    steps.push_back(std::move(sj));
  }
  j["steps"] = std::move(steps);
  return j;
}

RawEpisode raw_episode_from_json(const Json& j) {
  RawEpisode e;
  e.id = j.at("id").get<std::string>();
  e.app = j.value("app", "");
  e.instruction = j.at("instruction").get<std::string>();
  e.source = j.value("source", "");
  if (auto p = j.find("parent_id"); p != j.end() && p->is_string()) e.parent_id = *p;
  for (const auto& sj : j.at("steps")) {
    RawStep s;
    s.screenshot = sj.at("screenshot").get<std::string>();
    s.proposed_action = action_from_json(sj.at("proposed_action"));
    if (auto c = sj.find("context"); c != sj.end() && c->is_string()) s.context = *c;
    if (auto t = sj.find("thought"); t != sj.end() && t->is_string()) s.thought = *t;
    e.steps.push_back(std::move(s));
  }
  if (e.id.empty()) throw std::invalid_argument("episode id is empty");
  if (e.steps.empty()) throw std::invalid_argument("episode " + e.id + " has no steps");
  return e;
}

Json state_to_json(const EpisodeAnnotationState& s) {
  Json j = Json::object();
  j["episode_id"] = s.episode_id;
  j["cursor"] = s.cursor;
  j["truncated_at"] = s.truncated_at ? Json(*s.truncated_at) : Json(nullptr);
  j["status"] = std::string(to_string(s.status));
  return j;
}

// ---------------------------------------------------------------------------

AnnotationStore::AnnotationStore(fs::path data_dir) : data_dir_(std::move(data_dir)) {
  fs::create_directories(data_dir_);
  data_dir_ = fs::canonical(data_dir_);
  replay();
  log_fd_ = ::open((data_dir_ / "events.jsonl").c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  if (log_fd_ < 0) {
    throw std::runtime_error("cannot open event log in " + data_dir_.string() + ": " +
                             std::strerror(errno));
  }
}

AnnotationStore::~AnnotationStore() {
  if (log_fd_ >= 0) {
    ::fsync(log_fd_);
    ::close(log_fd_);
  }
}

void AnnotationStore::replay() {
  const fs::path log_path = data_dir_ / "events.jsonl";
  if (!fs::exists(log_path)) return;
  std::ifstream in(log_path, std::ios::binary);
  const std::string content{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  in.close();
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < content.size()) {
    const std::size_t eol = content.find('\n', pos);
    const bool complete_line = eol != std::string::npos;
    const std::string line =
        content.substr(pos, complete_line ? eol - pos : std::string::npos);
    ++line_no;
    Json event;
    bool parsed = true;
    try {
      event = Json::parse(line);
    } catch (const Json::parse_error&) {
      parsed = false;
    }
    if (!complete_line || !parsed) {
      const bool is_tail = !complete_line || eol + 1 == content.size();
      if (!is_tail) {
        throw AnnotationError(Kind::kCorruptLog,
                              "event log line " + std::to_string(line_no) + " is unreadable");
      }
      // Torn write from a crash: drop it so the next append starts clean.
      fs::resize_file(log_path, pos);
      break;
    }
    try {
      apply(event);
    } catch (const AnnotationError& e) {
      throw AnnotationError(Kind::kCorruptLog, "event log line " + std::to_string(line_no) +
                                                   " does not apply: " + e.what());
    }
    seq_ = std::max<std::int64_t>(seq_, event.value("seq", seq_ + 1));
    pos = eol + 1;
  }
}

void AnnotationStore::append(Json event) {
  std::lock_guard lock(log_mu_);
  Json ordered = Json::object();
  ordered["seq"] = ++seq_;
  for (auto it = event.begin(); it != event.end(); ++it) ordered[it.key()] = it.value();
  write_all(log_fd_, ordered.dump() + "\n");
  if (::fsync(log_fd_) != 0) {
    throw std::runtime_error(std::string("event log fsync failed: ") + std::strerror(errno));
  }
}

AnnotationStore::Slot& AnnotationStore::slot(const std::string& id) {
  auto it = slots_.find(id);
  if (it == slots_.end()) throw AnnotationError(Kind::kUnknownEpisode, "unknown episode " + id);
  return *it->second;
}

const AnnotationStore::Slot& AnnotationStore::slot(const std::string& id) const {
  auto it = slots_.find(id);
  if (it == slots_.end()) throw AnnotationError(Kind::kUnknownEpisode, "unknown episode " + id);
  return *it->second;
}

void AnnotationStore::check_verdict(const EpisodeRecord& rec, const Verdict& v) {
  if (rec.state.status == AnnotationStatus::kTruncated) {
    throw AnnotationError(Kind::kAlreadyTruncated,
                          "episode " + rec.raw.id + " was truncated at step " +
                              std::to_string(*rec.state.truncated_at));
  }
  if (rec.state.status == AnnotationStatus::kComplete) {
    throw AnnotationError(Kind::kAlreadyComplete, "episode " + rec.raw.id + " is complete");
  }
  if (v.step != rec.state.cursor) {
    throw AnnotationError(Kind::kOutOfOrder, "verdict for step " + std::to_string(v.step) +
                                                 " but the next unverified step is " +
                                                 std::to_string(rec.state.cursor));
  }
  check_verdict_shape(rec.raw.steps[static_cast<std::size_t>(v.step - 1)].proposed_action, v);
}

void AnnotationStore::apply_verdict(EpisodeRecord& rec, const Verdict& v) {
  rec.verdicts.push_back(v);
  if (v.judgment == Judgment::kIncorrect) {
    rec.state.truncated_at = v.step;
    rec.state.status = AnnotationStatus::kTruncated;
  } else if (v.step == static_cast<int>(rec.raw.steps.size())) {
    rec.state.status = AnnotationStatus::kComplete;
  }
  rec.state.cursor = v.step + 1;
}

std::vector<GoldChoice> AnnotationStore::gold_choices(const EpisodeRecord& rec, int step) {
  const Verdict& v = rec.verdicts.at(static_cast<std::size_t>(step - 1));
  std::vector<GoldChoice> out{
      base_choice(rec.raw.steps[static_cast<std::size_t>(step - 1)].proposed_action, v)};
  out.insert(out.end(), v.alternatives.begin(), v.alternatives.end());
  if (auto it = rec.added.find(step); it != rec.added.end()) {
    out.insert(out.end(), it->second.begin(), it->second.end());
  }
  return out;
}

bool AnnotationStore::disagree(const Verdict& a, const Verdict& b) {
  if (a.judgment != b.judgment) return true;
  if (a.judgment == Judgment::kIncorrect) {
    const GoldChoice ca = choice_for_action(*a.corrected_action, a.bbox);
    const GoldChoice cb = choice_for_action(*b.corrected_action, b.bbox);
    const auto* ka = std::get_if<ClickTarget>(&ca);
    const auto* kb = std::get_if<ClickTarget>(&cb);
    if (ka && kb) return iou(ka->bbox, kb->bbox) < kReviewIouThreshold;
    return !(ca == cb);
  }
  if (a.bbox && b.bbox) return iou(*a.bbox, *b.bbox) < kReviewIouThreshold;
  return false;
}

void AnnotationStore::apply(const Json& event) {
  const auto type = event.at("type").get<std::string>();
  try {
    if (type == "import") {
      RawEpisode raw = raw_episode_from_json(event.at("episode"));
      if (slots_.count(raw.id)) {
        throw AnnotationError(Kind::kDuplicateEpisode, "episode " + raw.id + " already imported");
      }
      auto s = std::make_unique<Slot>();
      s->rec.state.episode_id = raw.id;
      s->rec.raw = std::move(raw);
      order_.push_back(s->rec.raw.id);
      slots_.emplace(order_.back(), std::move(s));
      return;
    }
    Slot& s = slot(event.at("episode").get<std::string>());
    EpisodeRecord& rec = s.rec;
    if (type == "verdict") {
      Verdict v = verdict_from_json(event.at("verdict"));
      check_verdict(rec, v);
      apply_verdict(rec, v);
    } else if (type == "alternative") {
      const int step = event.at("step").get<int>();
      GoldChoice c = gold_choice_from_json(event.at("choice"));
      if (step < 1 || step >= rec.state.cursor) {
        throw AnnotationError(Kind::kStepNotVerified, "step " + std::to_string(step) +
                                                          " has not been verified");
      }
      check_choices_distinct(gold_choices(rec, step), {c});
      rec.added[step].push_back(std::move(c));
    } else if (type == "review") {
      Verdict v = verdict_from_json(event.at("verdict"));
      if (v.step < 1 || v.step >= rec.state.cursor) {
        throw AnnotationError(Kind::kStepNotVerified, "step " + std::to_string(v.step) +
                                                          " has not been verified");
      }
      if (rec.reviews.count(v.step)) {
        throw AnnotationError(Kind::kAlreadyReviewed,
                              "step " + std::to_string(v.step) + " already has a review");
      }
      check_verdict_shape(rec.raw.steps[static_cast<std::size_t>(v.step - 1)].proposed_action, v);
      ReviewRecord r;
      r.disagrees = disagree(rec.verdicts[static_cast<std::size_t>(v.step - 1)], v);
      r.review = std::move(v);
      rec.reviews[r.review.step] = std::move(r);
    } else if (type == "resolve") {
      const int step = event.at("step").get<int>();
      auto it = rec.reviews.find(step);
      if (it == rec.reviews.end() || !it->second.disagrees || it->second.resolved) {
        throw AnnotationError(Kind::kNotFlagged,
                              "step " + std::to_string(step) + " is not awaiting adjudication");
      }
      it->second.resolved = true;
      it->second.resolved_by = event.value("annotator", "");
    } else {
      throw AnnotationError(Kind::kCorruptLog, "unknown event type " + type);
    }
  } catch (const AnnotationError&) {
    throw;
  } catch (const std::exception& e) {
    throw AnnotationError(Kind::kInvalidVerdict, e.what());
  }
}

void AnnotationStore::import_episode(const RawEpisode& episode, const fs::path& source_dir) {
  std::unique_lock lock(map_mu_);
  if (slots_.count(episode.id)) {
    throw AnnotationError(Kind::kDuplicateEpisode, "episode " + episode.id + " already imported");
  }
  RawEpisode stored = episode;
  const std::string dir = "images/e" + std::to_string(order_.size() + 1);
  fs::create_directories(data_dir_ / dir);
  for (std::size_t k = 0; k < stored.steps.size(); ++k) {
    fs::path src = stored.steps[k].screenshot;
    if (src.is_relative()) src = source_dir / src;
    if (!fs::exists(src)) {
      throw DatasetError("episode " + episode.id + " step " + std::to_string(k + 1),
                         "missing screenshot " + src.string());
    }
    const std::string rel = dir + "/" + std::to_string(k + 1) + src.extension().string();
    fs::copy_file(src, data_dir_ / rel, fs::copy_options::overwrite_existing);
    stored.steps[k].screenshot = rel;
  }
  Json event = {{"type", "import"}, {"episode", raw_episode_to_json(stored)}};
  append(event);
  apply(event);
}

std::size_t AnnotationStore::import_file(const fs::path& jsonl) {
  std::ifstream in(jsonl);
  if (!in) throw DatasetError(jsonl.string(), "cannot open import file");
  std::size_t imported = 0;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    RawEpisode raw;
    try {
      raw = raw_episode_from_json(Json::parse(line));
    } catch (const std::exception& e) {
      throw DatasetError(jsonl.filename().string() + ":" + std::to_string(line_no), e.what());
    }
    {
      std::shared_lock lock(map_mu_);
      if (slots_.count(raw.id)) continue;
    }
    import_episode(raw, jsonl.parent_path());
    ++imported;
  }
  return imported;
}

EpisodeAnnotationState AnnotationStore::submit_verdict(const std::string& episode_id, Verdict v) {
  std::shared_lock map_lock(map_mu_);
  Slot& s = slot(episode_id);
  std::lock_guard lock(s.mu);
  check_verdict(s.rec, v);
  if (v.timestamp.empty()) v.timestamp = utc_now_iso8601();
  append({{"type", "verdict"}, {"episode", episode_id}, {"verdict", verdict_to_json(v)}});
  apply_verdict(s.rec, v);
  return s.rec.state;
}

StepRecord AnnotationStore::add_alternative(const std::string& episode_id, int step,
                                            const GoldChoice& choice) {
  std::shared_lock map_lock(map_mu_);
  Slot& s = slot(episode_id);
  std::lock_guard lock(s.mu);
  if (step < 1 || step > static_cast<int>(s.rec.raw.steps.size())) {
    throw AnnotationError(Kind::kUnknownStep, "episode " + episode_id + " has no step " +
                                                  std::to_string(step));
  }
  Json event = {{"type", "alternative"},
                {"episode", episode_id},
                {"step", step},
                {"choice", gold_choice_to_json(choice)}};
  if (step >= s.rec.state.cursor) {
    throw AnnotationError(Kind::kStepNotVerified,
                          "step " + std::to_string(step) + " has not been verified");
  }
  check_choice_valid(choice);
  check_choices_distinct(gold_choices(s.rec, step), {choice});
  append(event);
  s.rec.added[step].push_back(choice);
  StepRecord r;
  r.index = step;
  r.screenshot = s.rec.raw.steps[static_cast<std::size_t>(step - 1)].screenshot;
  r.gold_choices = gold_choices(s.rec, step);
  const Verdict& v = s.rec.verdicts[static_cast<std::size_t>(step - 1)];
  r.primary_action = v.judgment == Judgment::kCorrect
                         ? s.rec.raw.steps[static_cast<std::size_t>(step - 1)].proposed_action
                         : *v.corrected_action;
  return r;
}

bool AnnotationStore::submit_review(const std::string& episode_id, Verdict review) {
  std::shared_lock map_lock(map_mu_);
  Slot& s = slot(episode_id);
  std::lock_guard lock(s.mu);
  if (review.timestamp.empty()) review.timestamp = utc_now_iso8601();
  Json event = {{"type", "review"}, {"episode", episode_id}, {"verdict", verdict_to_json(review)}};
  // Rolled back if the event cannot be persisted.
  EpisodeRecord original = s.rec;
  apply(event);
  try {
    append(event);
  } catch (...) {
    s.rec = std::move(original);
    throw;
  }
  return s.rec.reviews.at(review.step).disagrees;
}

void AnnotationStore::resolve_flag(const std::string& episode_id, int step,
                                   const std::string& annotator) {
  std::shared_lock map_lock(map_mu_);
  Slot& s = slot(episode_id);
  std::lock_guard lock(s.mu);
  auto it = s.rec.reviews.find(step);
  if (it == s.rec.reviews.end() || !it->second.disagrees || it->second.resolved) {
    throw AnnotationError(Kind::kNotFlagged,
                          "step " + std::to_string(step) + " is not awaiting adjudication");
  }
  append({{"type", "resolve"}, {"episode", episode_id}, {"step", step}, {"annotator", annotator}});
  it->second.resolved = true;
  it->second.resolved_by = annotator;
}

std::vector<std::string> AnnotationStore::episode_ids() const {
  std::shared_lock lock(map_mu_);
  return order_;
}

EpisodeAnnotationState AnnotationStore::state(const std::string& episode_id) const {
  std::shared_lock map_lock(map_mu_);
  const Slot& s = slot(episode_id);
  std::lock_guard lock(s.mu);
  return s.rec.state;
}

RawEpisode AnnotationStore::raw_episode(const std::string& episode_id) const {
  std::shared_lock map_lock(map_mu_);
  const Slot& s = slot(episode_id);
  std::lock_guard lock(s.mu);
  return s.rec.raw;
}

std::vector<Verdict> AnnotationStore::verdicts(const std::string& episode_id) const {
  std::shared_lock map_lock(map_mu_);
  const Slot& s = slot(episode_id);
  std::lock_guard lock(s.mu);
  return s.rec.verdicts;
}

StepRecord AnnotationStore::step_record(const std::string& episode_id, int step) const {
  std::shared_lock map_lock(map_mu_);
  const Slot& s = slot(episode_id);
  std::lock_guard lock(s.mu);
  if (step < 1 || step >= s.rec.state.cursor) {
    throw AnnotationError(Kind::kStepNotVerified,
                          "step " + std::to_string(step) + " has not been verified");
  }
  const auto& raw_step = s.rec.raw.steps[static_cast<std::size_t>(step - 1)];
  const Verdict& v = s.rec.verdicts[static_cast<std::size_t>(step - 1)];
  StepRecord r;
  r.index = step;
  r.screenshot = raw_step.screenshot;
  r.gold_choices = gold_choices(s.rec, step);
  r.primary_action =
      v.judgment == Judgment::kCorrect ? raw_step.proposed_action : *v.corrected_action;
  return r;
}

fs::path AnnotationStore::screenshot_path(const std::string& episode_id, int step) const {
  std::shared_lock map_lock(map_mu_);
  const Slot& s = slot(episode_id);
  std::lock_guard lock(s.mu);
  if (step < 1 || step > static_cast<int>(s.rec.raw.steps.size())) {
    throw AnnotationError(Kind::kUnknownStep,
                          "episode " + episode_id + " has no step " + std::to_string(step));
  }
  return data_dir_ / s.rec.raw.steps[static_cast<std::size_t>(step - 1)].screenshot;
}

Json AnnotationStore::record_json(const EpisodeRecord& rec) {
  Json j = Json::object();
  j["id"] = rec.raw.id;
  j["app"] = rec.raw.app;
  j["instruction"] = rec.raw.instruction;
  j["source"] = rec.raw.source;
  if (rec.raw.parent_id) j["parent_id"] = *rec.raw.parent_id;
  j["steps"] = rec.raw.steps.size();
  j["state"] = state_to_json(rec.state);
  Json verdicts = Json::array();
  for (const auto& v : rec.verdicts) verdicts.push_back(verdict_to_json(v));
  j["verdicts"] = std::move(verdicts);
  Json added = Json::object();
  for (const auto& [step, choices] : rec.added) {
    Json arr = Json::array();
    for (const auto& c : choices) arr.push_back(gold_choice_to_json(c));
    added[std::to_string(step)] = std::move(arr);
  }
  j["added_alternatives"] = std::move(added);
  Json reviews = Json::array();
  for (const auto& [step, r] : rec.reviews) {
    reviews.push_back({{"step", step},
                       {"review", verdict_to_json(r.review)},
                       {"disagrees", r.disagrees},
                       {"resolved", r.resolved},
                       {"resolved_by", r.resolved_by}});
  }
  j["reviews"] = std::move(reviews);
  return j;
}

Json AnnotationStore::snapshot() const {
  std::unique_lock lock(map_mu_);
  Json arr = Json::array();
  for (const auto& id : order_) arr.push_back(record_json(slots_.at(id)->rec));
  return arr;
}

Json AnnotationStore::episode_json(const std::string& episode_id) const {
  std::shared_lock map_lock(map_mu_);
  const Slot& s = slot(episode_id);
  std::lock_guard lock(s.mu);
  return record_json(s.rec);
}

Json AnnotationStore::flags_json() const {
  std::unique_lock lock(map_mu_);
  Json arr = Json::array();
  for (const auto& id : order_) {
    const auto& rec = slots_.at(id)->rec;
    for (const auto& [step, r] : rec.reviews) {
      if (!r.disagrees || r.resolved) continue;
      arr.push_back({{"episode", id},
                     {"step", step},
                     {"first_pass", verdict_to_json(rec.verdicts[static_cast<std::size_t>(step - 1)])},
                     {"second_pass", verdict_to_json(r.review)}});
    }
  }
  return arr;
}

std::optional<Episode> AnnotationStore::export_one(const EpisodeRecord& rec,
                                                   const ExportOptions& opts) const {
  if (!opts.statuses.count(rec.state.status)) return std::nullopt;
  if (opts.exclude_flagged) {
    for (const auto& [step, r] : rec.reviews) {
      if (r.disagrees && !r.resolved) return std::nullopt;
    }
  }
  if (rec.verdicts.empty()) return std::nullopt;

  AnnotatedEpisode annotated;
  annotated.header.id = rec.raw.id;
  annotated.header.app = rec.raw.app;
  annotated.header.instruction = rec.raw.instruction;
  annotated.header.source = rec.raw.source;
  annotated.header.parent_id = rec.raw.parent_id;
  for (std::size_t k = 0; k < rec.verdicts.size(); ++k) {
    const Verdict& v = rec.verdicts[k];
    const RawStep& raw = rec.raw.steps[k];
    AnnotatedStep a;
    a.step.index = static_cast<int>(k) + 1;
    a.step.screenshot = raw.screenshot;
    a.step.primary_action = raw.proposed_action;
    a.step.annotated_context = raw.context;
    a.step.annotated_thought = raw.thought;
    a.correct = v.judgment == Judgment::kCorrect;
    if (a.correct) {
      a.step.gold_choices = gold_choices(rec, v.step);
    } else {
      a.correction = Correction{*v.corrected_action, v.bbox};
    }
    annotated.steps.push_back(std::move(a));
  }
  Episode e = truncate_after_first_error(annotated);
  if (rec.state.status == AnnotationStatus::kTruncated) {
    StepRecord& last = e.steps.back();
    last.gold_choices = gold_choices(rec, *rec.state.truncated_at);
    // The annotations described the rejected action.
    last.annotated_context.reset();
    last.annotated_thought.reset();
  }
  validate_episode(e);
  return e;
}

std::vector<Episode> AnnotationStore::export_episodes(const ExportOptions& opts) const {
  std::unique_lock lock(map_mu_);
  std::vector<Episode> out;
  for (const auto& id : order_) {
    if (auto e = export_one(slots_.at(id)->rec, opts)) out.push_back(std::move(*e));
  }
  if (out.empty()) {
    throw AnnotationError(Kind::kNothingToExport, "no episode matches the requested statuses");
  }
  return out;
}

std::size_t AnnotationStore::write_export(const fs::path& out_dir,
                                          const ExportOptions& opts) const {
  const auto episodes = export_episodes(opts);
  Json statuses = Json::array();
  for (auto s : opts.statuses) statuses.push_back(std::string(to_string(s)));
  write_dataset(out_dir, episodes, data_dir_.string(),
                {{"exported_from", "annotation-store"}, {"statuses", statuses}});
  return episodes.size();
}

Lease AnnotationStore::claim(const std::string& episode_id, const std::string& annotator,
                             std::chrono::seconds ttl, std::chrono::steady_clock::time_point now) {
  if (annotator.empty()) throw AnnotationError(Kind::kInvalidVerdict, "annotator is required");
  std::shared_lock map_lock(map_mu_);
  Slot& s = slot(episode_id);
  std::lock_guard lock(s.mu);
  if (s.lease && s.lease->expires > now && s.lease->annotator != annotator) {
    throw AnnotationError(Kind::kLeaseConflict,
                          "episode " + episode_id + " is claimed by " + s.lease->annotator);
  }
  s.lease = Lease{annotator, now + ttl};
  return *s.lease;
}

void AnnotationStore::release(const std::string& episode_id, const std::string& annotator) {
  std::shared_lock map_lock(map_mu_);
  Slot& s = slot(episode_id);
  std::lock_guard lock(s.mu);
  if (s.lease && s.lease->annotator == annotator) s.lease.reset();
}

bool AnnotationStore::holds_lease(const std::string& episode_id, const std::string& annotator,
                                  std::chrono::steady_clock::time_point now) const {
  auto l = lease(episode_id, now);
  return l && l->annotator == annotator;
}

std::optional<Lease> AnnotationStore::lease(const std::string& episode_id,
                                            std::chrono::steady_clock::time_point now) const {
  std::shared_lock map_lock(map_mu_);
  const Slot& s = slot(episode_id);
  std::lock_guard lock(s.mu);
  if (s.lease && s.lease->expires > now) return s.lease;
  return std::nullopt;
}

std::size_t AnnotationStore::event_count() const {
  std::lock_guard lock(log_mu_);
  return static_cast<std::size_t>(seq_);
}

}  // namespace secagent
