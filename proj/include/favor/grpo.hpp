#pragma once

// Group Relative Policy Optimization on top of the toy policy.
//
// For one question the sampler draws P responses, each is scored by the
// verifier, and the rewards are standardized within the group. The loss for a
// group is
//
//   L = -(1/P) sum_i A_i log pi(O_i)  +  alpha (1/P) sum_i KL_t(pi || pi_ref)(O_i)
//
// with the KL summed exactly over the positions each response visits. With a
// clip ratio set, the first term becomes the clipped importance-ratio surrogate
// against the sampling-time log-probabilities.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "favor/error.hpp"
#include "favor/instance.hpp"
#include "favor/policy.hpp"
#include "favor/reward.hpp"
#include "favor/vocabulary.hpp"

namespace favor {

struct GrpoConfig {
  std::size_t group_size = 16;
  double kl_coefficient = 0.04;
  double learning_rate = 5e-5;
  std::size_t batch_size = 8;
  std::size_t gradient_accumulation_steps = 2;
  std::size_t training_steps = 20;
  double temperature = 1.0;
  std::size_t max_response_length = 24;
  double std_guard = 1e-8;
  std::optional<double> clip_ratio;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;

  void validate() const {
    require(group_size >= 2, "GrpoConfig: group_size must be at least 2");
    require(kl_coefficient >= 0.0 && std::isfinite(kl_coefficient), "GrpoConfig: kl_coefficient must be >= 0");
    require(learning_rate >= 0.0 && std::isfinite(learning_rate), "GrpoConfig: learning_rate must be >= 0");
    require(batch_size > 0 && gradient_accumulation_steps > 0 && training_steps > 0,
            "GrpoConfig: batch_size, gradient_accumulation_steps and training_steps must be positive");
    require(temperature > 0.0, "GrpoConfig: temperature must be positive");
    require(max_response_length >= 4, "GrpoConfig: max_response_length must be at least 4");
    require(std_guard >= 0.0, "GrpoConfig: std_guard must be >= 0");
    require(!clip_ratio || (*clip_ratio > 0.0 && *clip_ratio < 1.0), "GrpoConfig: clip_ratio must be in (0, 1)");
    require(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0 && adam_epsilon > 0.0,
            "GrpoConfig: invalid optimizer settings");
  }

  Decoding decoding() const { return Decoding{temperature, max_response_length, DecodeMode::Sample}; }
};

struct ResponseGroup {
  std::string question_id;
  int ground_truth = 0;
  std::vector<double> context;
  std::vector<TokenSequence> responses;
  std::vector<std::string> texts;
  std::vector<RewardBreakdown> breakdowns;
  std::vector<double> rewards;
  std::vector<double> advantages;
  std::vector<double> sampling_log_probs;

  std::size_t size() const { return responses.size(); }
};

/// Standardizes rewards with the population standard deviation. Groups whose
/// std falls below `std_guard` get all-zero advantages.
inline std::vector<double> normalize_advantages(std::span<const double> rewards, double std_guard) {
  require(rewards.size() >= 2, "normalize_advantages: need at least two rewards");
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> out(rewards.size(), 0.0);
  if (!(sd >= std_guard) || sd == 0.0) return out;
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / sd;
  return out;
}

/// Draws P responses for one question from `params` and scores them.
/// Advantages are left empty.
inline ResponseGroup sample_group(const PolicyParams& params, const LabeledInstance& instance, const Vocabulary& vocab,
                                  const GrpoConfig& config, std::uint64_t seed) {
  config.validate();
  const Decoding decoding = config.decoding();
  std::mt19937_64 rng(seed);
  ResponseGroup group;
  group.question_id = instance.id;
  group.ground_truth = instance.class_index;
  group.context = instance.features;
  for (std::size_t i = 0; i < config.group_size; ++i) {
    auto seq = sample(params, instance.features, decoding, vocab.eos(), rng);
    auto text = render(seq, vocab);
    const auto reward = classification_reward(text, instance.class_index);
    group.sampling_log_probs.push_back(log_prob(params, instance.features, seq));
    group.rewards.push_back(static_cast<double>(reward.r_total));
    group.breakdowns.push_back(reward);
    group.texts.push_back(std::move(text));
    group.responses.push_back(std::move(seq));
  }
  return group;
}

inline void compute_advantages(ResponseGroup& group, const GrpoConfig& config) {
  group.advantages = normalize_advantages(group.rewards, config.std_guard);
}

struct GrpoLoss {
  double loss = 0.0;
  PolicyParams grad;
  double kl_estimate = 0.0;  ///< mean per-response KL to the reference
};

inline GrpoLoss grpo_loss_and_grad(const PolicyParams& live, const PolicyParams& ref, const ResponseGroup& group,
                                   const GrpoConfig& config) {
  require(live.shape() == ref.shape(), "grpo_loss_and_grad: live/ref shape mismatch");
  require(group.size() >= 2, "grpo_loss_and_grad: group needs at least two responses");
  require(group.advantages.size() == group.size(), "grpo_loss_and_grad: advantages not computed");
  const double inv_p = 1.0 / static_cast<double>(group.size());
  GrpoLoss out{0.0, PolicyParams(live.shape()), 0.0};

  for (std::size_t i = 0; i < group.size(); ++i) {
    const auto& seq = group.responses[i];
    const double adv = group.advantages[i];
    if (!config.clip_ratio) {
      const double logp = accumulate_log_prob_grad(live, group.context, seq, -adv * inv_p, out.grad);
      out.loss -= adv * logp * inv_p;
    } else {
      require(group.sampling_log_probs.size() == group.size(), "grpo_loss_and_grad: sampling log-probs missing");
      const double eps = *config.clip_ratio;
      const double logp = log_prob(live, group.context, seq);
      const double ratio = std::exp(logp - group.sampling_log_probs[i]);
      const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps);
      const double unclipped_term = ratio * adv;
      const double clipped_term = clipped * adv;
      if (unclipped_term <= clipped_term) {
        out.loss -= unclipped_term * inv_p;
        // d(ratio)/dtheta = ratio * dlogp/dtheta
        if (adv != 0.0) accumulate_log_prob_grad(live, group.context, seq, -adv * ratio * inv_p, out.grad);
      } else {
        out.loss -= clipped_term * inv_p;
      }
    }
    const double kl = config.kl_coefficient != 0.0
                          ? accumulate_kl_grad(live, ref, group.context, seq, config.kl_coefficient * inv_p, out.grad)
                          : per_position_kl(live, ref, group.context, seq);
    out.kl_estimate += kl * inv_p;
    out.loss += config.kl_coefficient * kl * inv_p;
  }
  return out;
}

/// Per-entry freeze flags consulted by apply_update.
class UpdateFilter {
public:
  UpdateFilter() = default;
  explicit UpdateFilter(std::size_t size) : frozen_(size, 0) {}

  void freeze(std::size_t offset, std::size_t count) {
    require(offset + count <= frozen_.size(), "UpdateFilter::freeze: range out of bounds");
    std::fill_n(frozen_.begin() + static_cast<std::ptrdiff_t>(offset), count, 1);
  }
  bool frozen(std::size_t i) const { return !frozen_.empty() && frozen_[i] != 0; }
  std::size_t size() const { return frozen_.size(); }
  std::size_t frozen_count() const { return static_cast<std::size_t>(std::count(frozen_.begin(), frozen_.end(), 1)); }

private:
  std::vector<char> frozen_;
};

struct OptimizerState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::vector<double> pending;  ///< gradient sum of the current accumulation window
  std::size_t pending_micro_batches = 0;
  std::uint64_t step = 0;

  static OptimizerState for_params(const PolicyParams& params) {
    OptimizerState s;
    s.first_moment.assign(params.size(), 0.0);
    s.second_moment.assign(params.size(), 0.0);
    s.pending.assign(params.size(), 0.0);
    return s;
  }
};

struct AdamSettings {
  double learning_rate = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected adaptive-moment step; `step` is the 1-based step index.
inline void adam_step(std::span<double> params, std::span<const double> grad, std::span<double> m,
                      std::span<double> v, std::uint64_t step, const AdamSettings& s,
                      const UpdateFilter* filter = nullptr) {
  require(params.size() == grad.size() && m.size() == grad.size() && v.size() == grad.size(),
          "adam_step: size mismatch");
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (filter && filter->frozen(i)) continue;
    m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * grad[i];
    v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * grad[i] * grad[i];
    params[i] -= s.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + s.epsilon);
  }
}

/// Adds one micro-batch gradient; after gradient_accumulation_steps of them,
/// steps on their mean and returns true. Non-finite gradients throw before
/// anything is touched.
inline bool apply_update(PolicyParams& live, const PolicyParams& grad, OptimizerState& state,
                         const GrpoConfig& config, const UpdateFilter* filter = nullptr) {
  require(grad.shape() == live.shape(), "apply_update: gradient shape mismatch");
  require(state.first_moment.size() == live.size() && state.second_moment.size() == live.size() &&
              state.pending.size() == live.size(),
          "apply_update: optimizer state shape mismatch");
  require(!filter || filter->size() == live.size(), "apply_update: filter shape mismatch");
  if (!grad.all_finite()) throw NumericError("apply_update: non-finite gradient entry");

  const auto g = grad.values();
  for (std::size_t i = 0; i < g.size(); ++i) state.pending[i] += g[i];
  if (++state.pending_micro_batches < config.gradient_accumulation_steps) return false;

  const double scale = 1.0 / static_cast<double>(state.pending_micro_batches);
  for (double& x : state.pending) x *= scale;
  ++state.step;
  adam_step(live.values(), state.pending, state.first_moment, state.second_moment, state.step,
            AdamSettings{config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_epsilon}, filter);
  std::fill(state.pending.begin(), state.pending.end(), 0.0);
  state.pending_micro_batches = 0;
  return true;
}

}  // namespace favor
