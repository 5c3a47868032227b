#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "secagent/dataset.hpp"
#include "secagent/matching.hpp"

namespace secagent {

inline constexpr double kFormatReward = 0.5;
inline constexpr double kActionReward = 1.0;

struct RewardBreakdown {
  double format_reward = 0;
  double action_reward = 0;
  double total() const { return format_reward + action_reward; }
};

// Rule-based reward of one completion: the format part is granted when the
// text parses as a triplet, the action part when that triplet's action also
// matches a gold choice.
RewardBreakdown compute_reward(std::string_view raw_output, std::span<const GoldChoice> gold,
                               const MatchOptions& match = {});

struct GrpoConfig {
  double eps_low = 0.2;
  double eps_high = 0.28;
  double beta = 0.04;  // KL penalty weight
  int group_size = 16;
  double std_epsilon = 1e-6;
};

void validate_grpo_config(const GrpoConfig& cfg);

class GroupTooSmall : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ShapeMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// (R_i - mean) / std with the population standard deviation. Groups whose
// spread is below std_epsilon get all-zero advantages.
std::vector<double> group_advantages(std::span<const double> rewards, double std_epsilon = 1e-6);

struct GroupSample {
  double reward = 0;
  // Probability ratio pi_theta / pi_theta_old per output token.
  std::vector<double> ratios;
};

// Token-level clipped objective with a KL penalty, averaged over every token
// in the group:
//   (1 / sum|o_i|) * sum_i sum_t [ min(r A, clip(r, 1-eps_low, 1+eps_high) A)
//                                  - beta * kl_it ]
// The sequence-level advantage A_i applies to every token of response i.
// kl_terms[i][t] is a precomputed per-token divergence estimate.
double grpo_objective(std::span<const GroupSample> samples, std::span<const double> advantages,
                      const std::vector<std::vector<double>>& kl_terms, const GrpoConfig& cfg);

// Contribution of one token before the KL term.
double clipped_surrogate(double ratio, double advantage, double eps_low, double eps_high);

}  // namespace secagent
