#pragma once

// One-hidden-layer recurrent categorical policy over token sequences.
//
//   pre_t  = E[s_{t-1}] + Wc^T x + Wh^T h_{t-1} + b_h      (E term absent at t = 0, h_{-1} = 0)
//   h_t    = tanh(pre_t)
//   z_t    = Wo^T h_t + b_o                                  (next-token logits)
//
// All parameters live in one flat vector so optimizers, masks and checkpoints
// can treat them uniformly; blocks are addressed by ParamBlock.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "favor/error.hpp"
#include "favor/vocabulary.hpp"

namespace favor {

struct PolicyShape {
  std::size_t vocab_size = 0;
  std::size_t feature_dim = 0;
  std::size_t hidden_dim = 16;

  std::size_t parameter_count() const {
    const std::size_t v = vocab_size, f = feature_dim, d = hidden_dim;
    return v * d + f * d + d * d + d * v + d + v;
  }

  friend bool operator==(const PolicyShape&, const PolicyShape&) = default;
};

enum class ParamBlock { Embedding, ContextProjection, Hidden, OutputProjection, HiddenBias, OutputBias };

inline constexpr std::array<ParamBlock, 6> kAllParamBlocks = {
    ParamBlock::Embedding,        ParamBlock::ContextProjection, ParamBlock::Hidden,
    ParamBlock::OutputProjection, ParamBlock::HiddenBias,        ParamBlock::OutputBias};

inline std::string_view block_name(ParamBlock block) {
  switch (block) {
    case ParamBlock::Embedding: return "embedding";
    case ParamBlock::ContextProjection: return "context_projection";
    case ParamBlock::Hidden: return "hidden";
    case ParamBlock::OutputProjection: return "output_projection";
    case ParamBlock::HiddenBias: return "hidden_bias";
    case ParamBlock::OutputBias: return "output_bias";
  }
  return "";
}

inline std::optional<ParamBlock> parse_block(std::string_view name) {
  for (ParamBlock b : kAllParamBlocks)
    if (block_name(b) == name) return b;
  return std::nullopt;
}

class PolicyParams {
public:
  PolicyParams() = default;

  /// Zero-initialized parameters of the given shape.
  explicit PolicyParams(const PolicyShape& shape) : shape_(shape), values_(shape.parameter_count(), 0.0) {
    require(shape.vocab_size > 0 && shape.feature_dim > 0 && shape.hidden_dim > 0,
            "PolicyParams: all dimensions must be positive");
  }

  PolicyParams(const PolicyShape& shape, std::vector<double> values) : shape_(shape), values_(std::move(values)) {
    require(values_.size() == shape.parameter_count(), "PolicyParams: value count does not match shape");
  }

  const PolicyShape& shape() const { return shape_; }
  std::size_t size() const { return values_.size(); }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  std::size_t block_offset(ParamBlock block) const {
    const std::size_t v = shape_.vocab_size, f = shape_.feature_dim, d = shape_.hidden_dim;
    switch (block) {
      case ParamBlock::Embedding: return 0;
      case ParamBlock::ContextProjection: return v * d;
      case ParamBlock::Hidden: return v * d + f * d;
      case ParamBlock::OutputProjection: return v * d + f * d + d * d;
      case ParamBlock::HiddenBias: return v * d + f * d + d * d + d * v;
      case ParamBlock::OutputBias: return v * d + f * d + d * d + d * v + d;
    }
    return 0;
  }

  std::size_t block_size(ParamBlock block) const {
    const std::size_t v = shape_.vocab_size, f = shape_.feature_dim, d = shape_.hidden_dim;
    switch (block) {
      case ParamBlock::Embedding: return v * d;
      case ParamBlock::ContextProjection: return f * d;
      case ParamBlock::Hidden: return d * d;
      case ParamBlock::OutputProjection: return d * v;
      case ParamBlock::HiddenBias: return d;
      case ParamBlock::OutputBias: return v;
    }
    return 0;
  }

  std::span<double> block(ParamBlock b) { return values().subspan(block_offset(b), block_size(b)); }
  std::span<const double> block(ParamBlock b) const { return values().subspan(block_offset(b), block_size(b)); }

  // Row-major element access; indices follow the formulas at the top of this file.
  double& embedding(TokenId token, std::size_t j) { return values_[token * shape_.hidden_dim + j]; }
  double embedding(TokenId token, std::size_t j) const { return values_[token * shape_.hidden_dim + j]; }
  double& context(std::size_t f, std::size_t j) {
    return values_[block_offset(ParamBlock::ContextProjection) + f * shape_.hidden_dim + j];
  }
  double context(std::size_t f, std::size_t j) const {
    return values_[block_offset(ParamBlock::ContextProjection) + f * shape_.hidden_dim + j];
  }
  double& hidden(std::size_t i, std::size_t j) {
    return values_[block_offset(ParamBlock::Hidden) + i * shape_.hidden_dim + j];
  }
  double hidden(std::size_t i, std::size_t j) const {
    return values_[block_offset(ParamBlock::Hidden) + i * shape_.hidden_dim + j];
  }
  double& output(std::size_t j, TokenId token) {
    return values_[block_offset(ParamBlock::OutputProjection) + j * shape_.vocab_size + token];
  }
  double output(std::size_t j, TokenId token) const {
    return values_[block_offset(ParamBlock::OutputProjection) + j * shape_.vocab_size + token];
  }
  double& hidden_bias(std::size_t j) { return values_[block_offset(ParamBlock::HiddenBias) + j]; }
  double hidden_bias(std::size_t j) const { return values_[block_offset(ParamBlock::HiddenBias) + j]; }
  double& output_bias(TokenId token) { return values_[block_offset(ParamBlock::OutputBias) + token]; }
  double output_bias(TokenId token) const { return values_[block_offset(ParamBlock::OutputBias) + token]; }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double x) { return std::isfinite(x); });
  }

  void fill(double value) { std::fill(values_.begin(), values_.end(), value); }

  /// this += scale * other
  void add_scaled(const PolicyParams& other, double scale) {
    require(other.shape_ == shape_, "PolicyParams::add_scaled: shape mismatch");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += scale * other.values_[i];
  }

  friend bool operator==(const PolicyParams&, const PolicyParams&) = default;

private:
  PolicyShape shape_{};
  std::vector<double> values_;
};

/// Immutable, shared copy of a parameter set (reference / sampling policy).
class FrozenParams {
public:
  explicit FrozenParams(const PolicyParams& params) : params_(std::make_shared<const PolicyParams>(params)) {}

  const PolicyParams& get() const { return *params_; }
  operator const PolicyParams&() const { return *params_; }  // NOLINT(google-explicit-constructor)

private:
  std::shared_ptr<const PolicyParams> params_;
};

inline FrozenParams snapshot(const PolicyParams& params) { return FrozenParams(params); }

struct TokenSequence {
  std::vector<TokenId> ids;
  bool terminated = false;  ///< true iff the final id is EOS

  std::size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

enum class DecodeMode { Sample, Greedy };

struct Decoding {
  double temperature = 1.0;
  std::size_t max_response_length = 24;
  DecodeMode mode = DecodeMode::Sample;

  void validate() const {
    require(temperature > 0.0 && std::isfinite(temperature), "Decoding: temperature must be positive");
    require(max_response_length >= 4, "Decoding: max_response_length must be at least 4");
  }

  static Decoding greedy(std::size_t max_len = 24) { return Decoding{1.0, max_len, DecodeMode::Greedy}; }
};

namespace detail {

inline void check_context(const PolicyParams& params, std::span<const double> context) {
  if (context.size() != params.shape().feature_dim)
    throw ContractViolation("policy: context dimension " + std::to_string(context.size()) +
                            " != feature_dim " + std::to_string(params.shape().feature_dim));
}

inline void check_tokens(const PolicyParams& params, std::span<const TokenId> ids) {
  for (TokenId id : ids)
    if (id >= params.shape().vocab_size) throw ContractViolation("policy: unknown token id " + std::to_string(id));
}

/// Wc^T x + b_h; constant across positions.
inline std::vector<double> context_drive(const PolicyParams& params, std::span<const double> context) {
  const std::size_t d = params.shape().hidden_dim;
  std::vector<double> drive(d);
  for (std::size_t j = 0; j < d; ++j) drive[j] = params.hidden_bias(j);
  for (std::size_t f = 0; f < context.size(); ++f) {
    const double xf = context[f];
    if (xf == 0.0) continue;
    for (std::size_t j = 0; j < d; ++j) drive[j] += xf * params.context(f, j);
  }
  return drive;
}

/// Computes h_t from the drive, the previous token (if any) and h_{t-1} (empty at t = 0).
inline void step_hidden(const PolicyParams& params, std::span<const double> drive, std::optional<TokenId> prev,
                        std::span<const double> h_prev, std::span<double> h_out) {
  const std::size_t d = params.shape().hidden_dim;
  for (std::size_t j = 0; j < d; ++j) h_out[j] = drive[j];
  if (prev)
    for (std::size_t j = 0; j < d; ++j) h_out[j] += params.embedding(*prev, j);
  if (!h_prev.empty()) {
    for (std::size_t i = 0; i < d; ++i) {
      const double hi = h_prev[i];
      if (hi == 0.0) continue;
      for (std::size_t j = 0; j < d; ++j) h_out[j] += hi * params.hidden(i, j);
    }
  }
  for (std::size_t j = 0; j < d; ++j) h_out[j] = std::tanh(h_out[j]);
}

inline void output_logits(const PolicyParams& params, std::span<const double> h, std::span<double> z) {
  const std::size_t d = params.shape().hidden_dim, v = params.shape().vocab_size;
  for (std::size_t k = 0; k < v; ++k) z[k] = params.output_bias(static_cast<TokenId>(k));
  for (std::size_t j = 0; j < d; ++j) {
    const double hj = h[j];
    if (hj == 0.0) continue;
    for (std::size_t k = 0; k < v; ++k) z[k] += hj * params.output(j, static_cast<TokenId>(k));
  }
}

/// Numerically stable log-softmax of z / temperature.
inline void log_softmax(std::span<const double> z, double temperature, std::span<double> out) {
  double peak = -std::numeric_limits<double>::infinity();
  for (double zi : z) peak = std::max(peak, zi / temperature);
  double total = 0.0;
  for (double zi : z) total += std::exp(zi / temperature - peak);
  const double log_norm = peak + std::log(total);
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] / temperature - log_norm;
}

/// Hidden states and logits at every position of a teacher-forced sequence.
/// Position t holds the distribution that generated ids[t].
struct ForwardTrace {
  std::size_t positions = 0;
  std::vector<double> hidden;  // positions x d
  std::vector<double> logits;  // positions x V

  std::span<const double> h(std::size_t t, std::size_t d) const { return {hidden.data() + t * d, d}; }
  std::span<const double> z(std::size_t t, std::size_t v) const { return {logits.data() + t * v, v}; }
};

inline ForwardTrace forward(const PolicyParams& params, std::span<const double> context, std::span<const TokenId> ids,
                            std::size_t positions) {
  const std::size_t d = params.shape().hidden_dim, v = params.shape().vocab_size;
  ForwardTrace trace;
  trace.positions = positions;
  trace.hidden.assign(positions * d, 0.0);
  trace.logits.assign(positions * v, 0.0);
  const auto drive = context_drive(params, context);
  for (std::size_t t = 0; t < positions; ++t) {
    std::span<double> h{trace.hidden.data() + t * d, d};
    std::optional<TokenId> prev;
    std::span<const double> h_prev;
    if (t > 0) {
      prev = ids[t - 1];
      h_prev = {trace.hidden.data() + (t - 1) * d, d};
    }
    step_hidden(params, drive, prev, h_prev, h);
    output_logits(params, h, {trace.logits.data() + t * v, v});
  }
  return trace;
}

/// Back-propagates per-position logit gradients (positions x V) through the
/// recurrence and accumulates parameter gradients into `grad`.
inline void backward(const PolicyParams& params, std::span<const double> context, std::span<const TokenId> ids,
                     const ForwardTrace& trace, std::span<const double> dlogits, PolicyParams& grad) {
  const std::size_t d = params.shape().hidden_dim, v = params.shape().vocab_size;
  std::vector<double> dh(d, 0.0), dpre(d, 0.0), dh_carry(d, 0.0);
  for (std::size_t t = trace.positions; t-- > 0;) {
    const auto h = trace.h(t, d);
    const double* dz = dlogits.data() + t * v;
    for (std::size_t k = 0; k < v; ++k) grad.output_bias(static_cast<TokenId>(k)) += dz[k];
    for (std::size_t j = 0; j < d; ++j) {
      double acc = dh_carry[j];
      for (std::size_t k = 0; k < v; ++k) {
        grad.output(j, static_cast<TokenId>(k)) += h[j] * dz[k];
        acc += params.output(j, static_cast<TokenId>(k)) * dz[k];
      }
      dh[j] = acc;
    }
    for (std::size_t j = 0; j < d; ++j) dpre[j] = dh[j] * (1.0 - h[j] * h[j]);
    for (std::size_t j = 0; j < d; ++j) grad.hidden_bias(j) += dpre[j];
    for (std::size_t f = 0; f < context.size(); ++f) {
      const double xf = context[f];
      if (xf == 0.0) continue;
      for (std::size_t j = 0; j < d; ++j) grad.context(f, j) += xf * dpre[j];
    }
    std::fill(dh_carry.begin(), dh_carry.end(), 0.0);
    if (t > 0) {
      const TokenId prev = ids[t - 1];
      for (std::size_t j = 0; j < d; ++j) grad.embedding(prev, j) += dpre[j];
      const auto h_prev = trace.h(t - 1, d);
      for (std::size_t i = 0; i < d; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          grad.hidden(i, j) += h_prev[i] * dpre[j];
          acc += params.hidden(i, j) * dpre[j];
        }
        dh_carry[i] = acc;
      }
    }
  }
}

inline double categorical_kl(std::span<const double> log_p, std::span<const double> log_q) {
  double kl = 0.0;
  for (std::size_t k = 0; k < log_p.size(); ++k) {
    const double p = std::exp(log_p[k]);
    if (p > 0.0) kl += p * (log_p[k] - log_q[k]);
  }
  return std::max(kl, 0.0);
}

}  // namespace detail

/// Unnormalized next-token scores after `prefix`.
inline std::vector<double> logits(const PolicyParams& params, std::span<const double> context,
                                  std::span<const TokenId> prefix) {
  detail::check_context(params, context);
  detail::check_tokens(params, prefix);
  const auto trace = detail::forward(params, context, prefix, prefix.size() + 1);
  const std::size_t v = params.shape().vocab_size;
  const auto z = trace.z(prefix.size(), v);
  return {z.begin(), z.end()};
}

/// Next-token probabilities at temperature 1.
inline std::vector<double> next_token_probs(const PolicyParams& params, std::span<const double> context,
                                            std::span<const TokenId> prefix, double temperature = 1.0) {
  auto z = logits(params, context, prefix);
  std::vector<double> out(z.size());
  detail::log_softmax(z, temperature, out);
  for (double& x : out) x = std::exp(x);
  return out;
}

/// Ancestral sampling from softmax(z / temperature), or repeated argmax in greedy
/// mode (ties go to the lowest id). Stops after EOS or at max_response_length.
inline TokenSequence sample(const PolicyParams& params, std::span<const double> context, const Decoding& decoding,
                            TokenId eos, std::mt19937_64& rng) {
  decoding.validate();
  detail::check_context(params, context);
  const std::size_t d = params.shape().hidden_dim, v = params.shape().vocab_size;
  require(eos < v, "sample: eos id outside vocabulary");

  const auto drive = detail::context_drive(params, context);
  std::vector<double> h_prev(d), h(d), z(v), logp(v);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  TokenSequence seq;
  seq.ids.reserve(decoding.max_response_length);
  while (seq.ids.size() < decoding.max_response_length) {
    std::optional<TokenId> prev;
    std::span<const double> hp;
    if (!seq.ids.empty()) {
      prev = seq.ids.back();
      hp = h_prev;
    }
    detail::step_hidden(params, drive, prev, hp, h);
    detail::output_logits(params, h, z);

    TokenId next = 0;
    if (decoding.mode == DecodeMode::Greedy) {
      next = static_cast<TokenId>(std::max_element(z.begin(), z.end()) - z.begin());
    } else {
      detail::log_softmax(z, decoding.temperature, logp);
      const double u = unit(rng);
      double cumulative = 0.0;
      next = static_cast<TokenId>(v - 1);
      for (std::size_t k = 0; k < v; ++k) {
        cumulative += std::exp(logp[k]);
        if (u < cumulative) {
          next = static_cast<TokenId>(k);
          break;
        }
      }
    }
    seq.ids.push_back(next);
    std::swap(h, h_prev);
    if (next == eos) {
      seq.terminated = true;
      break;
    }
  }
  return seq;
}

inline TokenSequence sample(const PolicyParams& params, std::span<const double> context, const Decoding& decoding,
                            TokenId eos, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample(params, context, decoding, eos, rng);
}

/// log pi(seq | context) at temperature 1.
inline double log_prob(const PolicyParams& params, std::span<const double> context, const TokenSequence& seq) {
  detail::check_context(params, context);
  detail::check_tokens(params, seq.ids);
  const std::size_t v = params.shape().vocab_size;
  const auto trace = detail::forward(params, context, seq.ids, seq.size());
  std::vector<double> logp(v);
  double total = 0.0;
  for (std::size_t t = 0; t < seq.size(); ++t) {
    detail::log_softmax(trace.z(t, v), 1.0, logp);
    total += logp[seq.ids[t]];
  }
  return total;
}

/// Adds weight * d/dtheta log pi(seq | context) into `grad`; returns log pi(seq | context).
inline double accumulate_log_prob_grad(const PolicyParams& params, std::span<const double> context,
                                       const TokenSequence& seq, double weight, PolicyParams& grad) {
  detail::check_context(params, context);
  detail::check_tokens(params, seq.ids);
  require(grad.shape() == params.shape(), "accumulate_log_prob_grad: gradient shape mismatch");
  const std::size_t v = params.shape().vocab_size, T = seq.size();
  const auto trace = detail::forward(params, context, seq.ids, T);
  std::vector<double> dlogits(T * v), logp(v);
  double total = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    detail::log_softmax(trace.z(t, v), 1.0, logp);
    total += logp[seq.ids[t]];
    for (std::size_t k = 0; k < v; ++k) dlogits[t * v + k] = -weight * std::exp(logp[k]);
    dlogits[t * v + seq.ids[t]] += weight;
  }
  if (weight != 0.0) detail::backward(params, context, seq.ids, trace, dlogits, grad);
  return total;
}

inline PolicyParams grad_weighted_log_prob(const PolicyParams& params, std::span<const double> context,
                                           const TokenSequence& seq, double weight) {
  PolicyParams grad(params.shape());
  accumulate_log_prob_grad(params, context, seq, weight, grad);
  return grad;
}

/// Sum over the states visited by `seq` of KL(softmax(z_p) || softmax(z_q)).
inline double per_position_kl(const PolicyParams& params_p, const PolicyParams& params_q,
                              std::span<const double> context, const TokenSequence& seq) {
  require(params_p.shape() == params_q.shape(), "per_position_kl: parameter shape mismatch");
  detail::check_context(params_p, context);
  detail::check_tokens(params_p, seq.ids);
  const std::size_t v = params_p.shape().vocab_size, T = seq.size();
  const auto tp = detail::forward(params_p, context, seq.ids, T);
  const auto tq = detail::forward(params_q, context, seq.ids, T);
  std::vector<double> lp(v), lq(v);
  double total = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    detail::log_softmax(tp.z(t, v), 1.0, lp);
    detail::log_softmax(tq.z(t, v), 1.0, lq);
    total += detail::categorical_kl(lp, lq);
  }
  return total;
}

/// Adds weight * d/dtheta_p per_position_kl(p, q) into `grad`; returns the KL.
/// Uses dKL/dz_p[k] = p_k (log p_k - log q_k - KL).
inline double accumulate_kl_grad(const PolicyParams& params_p, const PolicyParams& params_q,
                                 std::span<const double> context, const TokenSequence& seq, double weight,
                                 PolicyParams& grad) {
  require(params_p.shape() == params_q.shape(), "accumulate_kl_grad: parameter shape mismatch");
  require(grad.shape() == params_p.shape(), "accumulate_kl_grad: gradient shape mismatch");
  detail::check_context(params_p, context);
  detail::check_tokens(params_p, seq.ids);
  const std::size_t v = params_p.shape().vocab_size, T = seq.size();
  const auto tp = detail::forward(params_p, context, seq.ids, T);
  const auto tq = detail::forward(params_q, context, seq.ids, T);
  std::vector<double> dlogits(T * v), lp(v), lq(v);
  double total = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    detail::log_softmax(tp.z(t, v), 1.0, lp);
    detail::log_softmax(tq.z(t, v), 1.0, lq);
    double kl = 0.0;
    for (std::size_t k = 0; k < v; ++k) kl += std::exp(lp[k]) * (lp[k] - lq[k]);
    total += std::max(kl, 0.0);
    for (std::size_t k = 0; k < v; ++k) dlogits[t * v + k] = weight * std::exp(lp[k]) * (lp[k] - lq[k] - kl);
  }
  if (weight != 0.0) detail::backward(params_p, context, seq.ids, tp, dlogits, grad);
  return total;
}

}  // namespace favor
