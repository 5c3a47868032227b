#include "secagent/rewards.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "secagent/agent.hpp"

namespace secagent {

RewardBreakdown compute_reward(std::string_view raw_output, std::span<const GoldChoice> gold,
                               const MatchOptions& match) {
  if (gold.empty()) throw std::invalid_argument("compute_reward needs at least one gold choice");
  RewardBreakdown r;
  AgentTurnOutput out;
  try {
    out = parse_turn_output(raw_output);
  } catch (const TripletFormatError&) {
    return r;
  }
  r.format_reward = kFormatReward;
  if (match_action(out.action, gold, match)) r.action_reward = kActionReward;
  return r;
}

void validate_grpo_config(const GrpoConfig& cfg) {
  if (!(cfg.eps_low > 0) || !(cfg.eps_low <= cfg.eps_high)) {
    throw std::invalid_argument("clip range must satisfy 0 < eps_low <= eps_high");
  }
  if (!(cfg.beta >= 0)) throw std::invalid_argument("KL weight must be non-negative");
  if (cfg.group_size < 2) throw std::invalid_argument("group size must be at least 2");
  if (!(cfg.std_epsilon > 0)) throw std::invalid_argument("std_epsilon must be positive");
}

std::vector<double> group_advantages(std::span<const double> rewards, double std_epsilon) {
  if (rewards.size() < 2) {
    throw GroupTooSmall("advantage normalization needs at least 2 rewards, got " +
                        std::to_string(rewards.size()));
  }
  const double n = static_cast<double>(rewards.size());
  double mean = 0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> adv(rewards.size(), 0.0);
  if (!(sd >= std_epsilon)) return adv;
  for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / sd;
  return adv;
}

double clipped_surrogate(double ratio, double advantage, double eps_low, double eps_high) {
  const double clipped = std::clamp(ratio, 1.0 - eps_low, 1.0 + eps_high);
  return std::min(ratio * advantage, clipped * advantage);
}

double grpo_objective(std::span<const GroupSample> samples, std::span<const double> advantages,
                      const std::vector<std::vector<double>>& kl_terms, const GrpoConfig& cfg) {
  if (!(cfg.eps_low > 0) || !(cfg.eps_low <= cfg.eps_high) || !(cfg.beta >= 0)) {
    throw std::invalid_argument("invalid clip range or KL weight");
  }
  if (samples.empty()) throw ShapeMismatch("objective needs at least one sample");
  if (advantages.size() != samples.size() || kl_terms.size() != samples.size()) {
    throw ShapeMismatch("samples, advantages and KL terms differ in length");
  }
  double sum = 0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& ratios = samples[i].ratios;
    if (ratios.empty()) throw ShapeMismatch("sample " + std::to_string(i) + " has no tokens");
    if (kl_terms[i].size() != ratios.size()) {
      throw ShapeMismatch("sample " + std::to_string(i) + " has " +
                          std::to_string(ratios.size()) + " ratios but " +
                          std::to_string(kl_terms[i].size()) + " KL terms");
    }
    for (std::size_t t = 0; t < ratios.size(); ++t) {
      const double r = ratios[t];
      if (!std::isfinite(r) || r <= 0) {
        throw std::invalid_argument("probability ratios must be finite and positive");
      }
      if (!(kl_terms[i][t] >= 0)) throw std::invalid_argument("KL terms must be non-negative");
      sum += clipped_surrogate(r, advantages[i], cfg.eps_low, cfg.eps_high) -
             cfg.beta * kl_terms[i][t];
    }
    tokens += ratios.size();
  }
  return sum / static_cast<double>(tokens);
}

}  // namespace secagent
