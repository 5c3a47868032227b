#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "secagent/dataset.hpp"
#include "secagent/image.hpp"

namespace secagent {

// ---------------------------------------------------------------------------
// Page hierarchy and grounding candidates

struct UiElement {
  BBox bbox;
  std::string resource_id;
  std::string text;
  std::string class_name;
  bool clickable = false;
  std::vector<UiElement> children;

  bool is_leaf() const { return children.empty(); }
};

// {"bbox":[x1,y1,x2,y2], "attributes":{"resource_id","text","class","clickable"},
//  "children":[...]}. Bboxes in real hierarchies can be empty or inverted;
// they are kept as-is here and rejected by the geometric filters.
UiElement ui_element_from_json(const Json& j);
Json ui_element_to_json(const UiElement& e);

struct FilterConfig {
  double min_area = 6000;          // reject area < min_area
  double max_aspect = 13.5;        // reject max(w/h, h/w) > max_aspect
  double max_screen_frac = 0.15;   // reject area > frac * screen area
  double uniform_color_var = 25.0; // reject when every channel's variance is below
  double seen_keep_prob = 0.05;    // keep probability for repeated signatures
  std::uint64_t rng_seed = 0;
};

void validate_filter_config(const FilterConfig& cfg);

// FNV-1a over (resource id, text, bbox quantized to a 32-px grid).
std::uint64_t element_signature(const UiElement& e);

enum class RejectReason { kArea, kAspect, kScreenCoverage, kUniformColor, kSeenDownsampled };
std::string_view to_string(RejectReason r);

struct FilterStats {
  std::int64_t leaves = 0;
  std::int64_t kept = 0;
  std::map<std::string, std::int64_t> rejected;  // by to_string(RejectReason)
  Json to_json() const;
  void merge(const FilterStats& other);
};

// Single RNG whose draws do not depend on the standard library's distribution
// implementations.
class PipelineRng {
 public:
  explicit PipelineRng(std::uint64_t seed) : engine_(seed) {}
  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 engine_;
};

class CropOutOfBounds : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Outcome of one leaf's geometric and colour checks, without the seen-set
// step.
std::optional<RejectReason> static_reject_reason(const UiElement& leaf, ScreenSize screen,
                                                 const RgbImage& screenshot,
                                                 const FilterConfig& cfg);

// Per-channel population variance of the pixels inside `box` (inclusive of
// x_min/y_min, exclusive of x_max/y_max).
std::array<double, 3> channel_variance(const RgbImage& image, const BBox& box);

// Leaves surviving every filter, in document order. Repeated signatures are
// kept with probability seen_keep_prob; survivors join `seen`.
std::vector<UiElement> filter_elements(const UiElement& root, ScreenSize screen,
                                       const RgbImage& screenshot, const FilterConfig& cfg,
                                       std::unordered_set<std::uint64_t>& seen, PipelineRng& rng,
                                       FilterStats* stats = nullptr);

// ---------------------------------------------------------------------------
// Grounding samples

struct GroundingSample {
  std::string id;
  std::string app;
  std::string instruction;
  std::string rationale;
  std::string screenshot;
  BBox target;
};

GroundingSample grounding_sample_from_json(const Json& j);
Json grounding_sample_to_json(const GroundingSample& g);

inline constexpr std::size_t kMinInstructionWords = 4;
inline constexpr std::size_t kMinRationaleWords = 10;

bool qc_instruction(std::string_view instruction, std::string_view rationale);

// Single-step navigation episode clicking the floor-midpoint of the target.
Episode gr2nav(const GroundingSample& g);

// ---------------------------------------------------------------------------
// Episode operations

struct Correction {
  Action action;
  std::optional<BBox> bbox;  // required when the corrected action is a click
};

struct AnnotatedStep {
  StepRecord step;
  bool correct = true;
  std::optional<Correction> correction;
};

struct AnnotatedEpisode {
  Episode header;  // steps ignored
  std::vector<AnnotatedStep> steps;
};

AnnotatedEpisode annotated_episode_from_json(const Json& j);

class EmptyResult : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Keeps the steps before the first incorrect one. The incorrect step itself is
// kept only when it carries a correction, with the corrected action as primary
// and a gold choice derived from the correction.
Episode truncate_after_first_error(const AnnotatedEpisode& episode);

// Levenshtein distance over Unicode code points.
std::size_t levenshtein(std::string_view a, std::string_view b);

// Greedy first-wins scan: an instruction is kept iff its distance to every
// kept instruction is at least min_distance. Returns indices into the input.
std::vector<std::size_t> dedup_instructions(const std::vector<std::string>& instructions,
                                            std::size_t min_distance = 6);

}  // namespace secagent
