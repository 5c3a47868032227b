#include "secagent/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "secagent/matching.hpp"
#include "secagent/text.hpp"

namespace secagent {

namespace {

constexpr int kSignatureGrid = 32;

void fnv_mix(std::uint64_t& h, std::string_view bytes) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
}

int floor_div(int v, int d) { return v >= 0 ? v / d : -((-v + d - 1) / d); }

void collect_leaves(const UiElement& e, std::vector<const UiElement*>& out) {
  if (e.is_leaf()) {
    out.push_back(&e);
    return;
  }
  for (const auto& c : e.children) collect_leaves(c, out);
}

BBox raw_bbox_from_json(const Json& j) {
  if (!j.is_array() || j.size() != 4) {
    throw std::invalid_argument("bbox must be [x_min, y_min, x_max, y_max]");
  }
  return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

}  // namespace

UiElement ui_element_from_json(const Json& j) {
  UiElement e;
  e.bbox = raw_bbox_from_json(j.at("bbox"));
  if (auto a = j.find("attributes"); a != j.end() && a->is_object()) {
    e.resource_id = a->value("resource_id", "");
    e.text = a->value("text", "");
    e.class_name = a->value("class", "");
    e.clickable = a->value("clickable", false);
  }
  if (auto c = j.find("children"); c != j.end()) {
    for (const auto& child : *c) e.children.push_back(ui_element_from_json(child));
  }
  return e;
}

Json ui_element_to_json(const UiElement& e) {
  Json j = Json::object();
  j["bbox"] = {e.bbox.x_min, e.bbox.y_min, e.bbox.x_max, e.bbox.y_max};
  j["attributes"] = {{"resource_id", e.resource_id},
                     {"text", e.text},
                     {"class", e.class_name},
                     {"clickable", e.clickable}};
  Json children = Json::array();
  for (const auto& c : e.children) children.push_back(ui_element_to_json(c));
  j["children"] = std::move(children);
  return j;
}

void validate_filter_config(const FilterConfig& cfg) {
  if (!(cfg.min_area > 0) || !(cfg.max_aspect > 0) || !(cfg.max_screen_frac > 0) ||
      !(cfg.uniform_color_var > 0)) {
    throw std::invalid_argument("filter thresholds must be positive");
  }
  if (!(cfg.seen_keep_prob >= 0 && cfg.seen_keep_prob <= 1)) {
    throw std::invalid_argument("seen_keep_prob must lie in [0, 1]");
  }
}

std::uint64_t element_signature(const UiElement& e) {
  std::uint64_t h = 14695981039346656037ULL;
  fnv_mix(h, e.resource_id);
  fnv_mix(h, std::string_view("\0", 1));
  fnv_mix(h, e.text);
  fnv_mix(h, std::string_view("\0", 1));
  for (int v : {e.bbox.x_min, e.bbox.y_min, e.bbox.x_max, e.bbox.y_max}) {
    fnv_mix(h, std::to_string(floor_div(v, kSignatureGrid)));
    fnv_mix(h, ",");
  }
  return h;
}

std::string_view to_string(RejectReason r) {
  switch (r) {
    case RejectReason::kArea: return "area";
    case RejectReason::kAspect: return "aspect_ratio";
    case RejectReason::kScreenCoverage: return "screen_coverage";
    case RejectReason::kUniformColor: return "uniform_color";
    case RejectReason::kSeenDownsampled: return "seen_downsampled";
  }
  return "?";
}

Json FilterStats::to_json() const {
  Json j = Json::object();
  j["leaves"] = leaves;
  j["kept"] = kept;
  Json r = Json::object();
  for (auto reason : {RejectReason::kArea, RejectReason::kAspect, RejectReason::kScreenCoverage,
                      RejectReason::kUniformColor, RejectReason::kSeenDownsampled}) {
    const std::string key(secagent::to_string(reason));
    auto it = rejected.find(key);
    r[key] = it == rejected.end() ? 0 : it->second;
  }
  j["rejected"] = std::move(r);
  return j;
}

void FilterStats::merge(const FilterStats& other) {
  leaves += other.leaves;
  kept += other.kept;
  for (const auto& [k, v] : other.rejected) rejected[k] += v;
}

std::array<double, 3> channel_variance(const RgbImage& image, const BBox& box) {
  std::array<double, 3> sum{}, sum_sq{};
  const double n = static_cast<double>(box.area());
  for (int y = box.y_min; y < box.y_max; ++y) {
    for (int x = box.x_min; x < box.x_max; ++x) {
      const std::uint8_t* p = image.at(x, y);
      for (int c = 0; c < 3; ++c) {
        sum[c] += p[c];
        sum_sq[c] += static_cast<double>(p[c]) * p[c];
      }
    }
  }
  std::array<double, 3> var{};
  for (int c = 0; c < 3; ++c) {
    const double mean = sum[c] / n;
    var[c] = std::max(0.0, sum_sq[c] / n - mean * mean);
  }
  return var;
}

std::optional<RejectReason> static_reject_reason(const UiElement& leaf, ScreenSize screen,
                                                 const RgbImage& screenshot,
                                                 const FilterConfig& cfg) {
  const BBox& b = leaf.bbox;
  const double w = static_cast<double>(b.width());
  const double h = static_cast<double>(b.height());
  const double area = (w > 0 && h > 0) ? w * h : 0.0;
  if (area < cfg.min_area) return RejectReason::kArea;
  if (std::max(w / h, h / w) > cfg.max_aspect) return RejectReason::kAspect;
  const double screen_area = static_cast<double>(screen.width) * screen.height;
  if (area > cfg.max_screen_frac * screen_area) return RejectReason::kScreenCoverage;
  if (b.x_min < 0 || b.y_min < 0 || b.x_max > screenshot.width || b.y_max > screenshot.height) {
    throw CropOutOfBounds("element bbox [" + std::to_string(b.x_min) + "," +
                          std::to_string(b.y_min) + "," + std::to_string(b.x_max) + "," +
                          std::to_string(b.y_max) + "] exceeds the " +
                          std::to_string(screenshot.width) + "x" +
                          std::to_string(screenshot.height) + " screenshot");
  }
  const auto var = channel_variance(screenshot, b);
  if (std::all_of(var.begin(), var.end(), [&](double v) { return v < cfg.uniform_color_var; })) {
    return RejectReason::kUniformColor;
  }
  return std::nullopt;
}

std::vector<UiElement> filter_elements(const UiElement& root, ScreenSize screen,
                                       const RgbImage& screenshot, const FilterConfig& cfg,
                                       std::unordered_set<std::uint64_t>& seen, PipelineRng& rng,
                                       FilterStats* stats) {
  validate_filter_config(cfg);
  if (screen.width <= 0 || screen.height <= 0) {
    throw std::invalid_argument("screen dimensions must be positive");
  }
  if (screenshot.width != screen.width || screenshot.height != screen.height) {
    throw std::invalid_argument("screenshot is " + std::to_string(screenshot.width) + "x" +
                                std::to_string(screenshot.height) + " but the screen is " +
                                std::to_string(screen.width) + "x" +
                                std::to_string(screen.height));
  }
  FilterStats local;
  std::vector<const UiElement*> leaves;
  collect_leaves(root, leaves);
  std::vector<UiElement> kept;
  for (const UiElement* leaf : leaves) {
    ++local.leaves;
    if (auto reason = static_reject_reason(*leaf, screen, screenshot, cfg)) {
      ++local.rejected[std::string(to_string(*reason))];
      continue;
    }
    const std::uint64_t sig = element_signature(*leaf);
    if (seen.count(sig) != 0 && !rng.bernoulli(cfg.seen_keep_prob)) {
      ++local.rejected[std::string(to_string(RejectReason::kSeenDownsampled))];
      continue;
    }
    seen.insert(sig);
    ++local.kept;
    UiElement copy = *leaf;
    kept.push_back(std::move(copy));
  }
  if (stats) stats->merge(local);
  return kept;
}

GroundingSample grounding_sample_from_json(const Json& j) {
  GroundingSample g;
  g.id = j.value("id", "");
  g.app = j.value("app", "");
  g.instruction = j.at("instruction").get<std::string>();
  g.rationale = j.value("rationale", "");
  g.screenshot = j.at("screenshot").get<std::string>();
  const Json& b = j.at("bbox");
  if (!b.is_array() || b.size() != 4) throw std::invalid_argument("bbox must have four values");
  g.target = {b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()};
  if (!g.target.valid()) throw std::invalid_argument("grounding target bbox is invalid");
  return g;
}

Json grounding_sample_to_json(const GroundingSample& g) {
  Json j = Json::object();
  j["id"] = g.id;
  j["app"] = g.app;
  j["instruction"] = g.instruction;
  j["rationale"] = g.rationale;
  j["screenshot"] = g.screenshot;
  j["bbox"] = {g.target.x_min, g.target.y_min, g.target.x_max, g.target.y_max};
  return j;
}

bool qc_instruction(std::string_view instruction, std::string_view rationale) {
  return word_count(instruction) >= kMinInstructionWords &&
         word_count(rationale) >= kMinRationaleWords;
}

Episode gr2nav(const GroundingSample& g) {
  Episode e;
  e.id = g.id;
  e.app = g.app;
  e.instruction = g.instruction;
  e.source = "gr2nav";
  StepRecord s;
  s.index = 1;
  s.screenshot = g.screenshot;
  s.primary_action = Click{g.target.center()};
  s.gold_choices = {ClickTarget{g.target}};
  if (!g.rationale.empty()) s.annotated_thought = g.rationale;
  e.steps.push_back(std::move(s));
  return e;
}

AnnotatedEpisode annotated_episode_from_json(const Json& j) {
  AnnotatedEpisode a;
  a.header.id = j.at("id").get<std::string>();
  a.header.app = j.value("app", "");
  a.header.instruction = j.at("instruction").get<std::string>();
  a.header.source = j.value("source", "");
  if (auto p = j.find("parent_id"); p != j.end() && p->is_string()) a.header.parent_id = *p;
  for (const auto& sj : j.at("steps")) {
    AnnotatedStep s;
    Json copy = sj;
    if (!copy.contains("gold_choices")) copy["gold_choices"] = Json::array();
    s.step = step_from_json(copy);
    s.correct = sj.value("correct", true);
    if (auto c = sj.find("correction"); c != sj.end() && c->is_object()) {
      Correction corr;
      corr.action = action_from_json(c->at("action"));
      if (auto b = c->find("bbox"); b != c->end() && !b->is_null()) {
        BBox box{(*b)[0].get<int>(), (*b)[1].get<int>(), (*b)[2].get<int>(), (*b)[3].get<int>()};
        if (!box.valid()) throw std::invalid_argument("correction bbox is invalid");
        corr.bbox = box;
      }
      s.correction = std::move(corr);
    }
    a.steps.push_back(std::move(s));
  }
  return a;
}

Episode truncate_after_first_error(const AnnotatedEpisode& episode) {
  Episode out = episode.header;
  out.steps.clear();
  for (const auto& s : episode.steps) {
    if (s.correct) {
      out.steps.push_back(s.step);
      continue;
    }
    if (s.correction) {
      StepRecord fixed = s.step;
      fixed.primary_action = s.correction->action;
      fixed.gold_choices = {choice_for_action(s.correction->action, s.correction->bbox)};
      if (!match_action(fixed.primary_action, fixed.gold_choices)) {
        throw std::invalid_argument("corrected click lies outside its bounding box");
      }
      out.steps.push_back(std::move(fixed));
    }
    break;
  }
  if (out.steps.empty()) {
    throw EmptyResult("episode " + episode.header.id +
                      ": first step is incorrect and carries no correction");
  }
  for (std::size_t k = 0; k < out.steps.size(); ++k) out.steps[k].index = static_cast<int>(k) + 1;
  return out;
}

std::size_t levenshtein(std::string_view a, std::string_view b) {
  const auto x = utf8_codepoints(a);
  const auto y = utf8_codepoints(b);
  std::vector<std::size_t> row(y.size() + 1);
  for (std::size_t j = 0; j <= y.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= x.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= y.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (x[i - 1] == y[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[y.size()];
}

std::vector<std::size_t> dedup_instructions(const std::vector<std::string>& instructions,
                                            std::size_t min_distance) {
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < instructions.size(); ++i) {
    bool far = true;
    for (std::size_t k : kept) {
      if (levenshtein(instructions[i], instructions[k]) < min_distance) {
        far = false;
        break;
      }
    }
    if (far) kept.push_back(i);
  }
  return kept;
}

}  // namespace secagent
