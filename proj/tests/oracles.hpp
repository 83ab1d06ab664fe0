#pragma once

// Independent reference computations for the tests. Nothing here calls the
// library's forward/backward code: the recurrence is re-derived from the
// parameter accessors so the two implementations can disagree.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "favor/base_policy.hpp"
#include "favor/fewshot.hpp"
#include "favor/policy.hpp"
#include "favor/vocabulary.hpp"

namespace oracle {

using favor::PolicyParams;
using favor::PolicyShape;
using favor::TokenId;
using favor::TokenSequence;

/// Per-position logits computed with plain loops over the accessors.
inline std::vector<std::vector<double>> naive_logits(const PolicyParams& p, const std::vector<double>& x,
                                                     const std::vector<TokenId>& ids) {
  const auto s = p.shape();
  std::vector<std::vector<double>> out;
  std::vector<double> h(s.hidden_dim, 0.0);
  for (std::size_t t = 0; t <= ids.size(); ++t) {
    std::vector<double> pre(s.hidden_dim);
    for (std::size_t j = 0; j < s.hidden_dim; ++j) {
      double a = p.hidden_bias(j);
      for (std::size_t f = 0; f < s.feature_dim; ++f) a += p.context(f, j) * x[f];
      if (t > 0) {
        a += p.embedding(ids[t - 1], j);
        for (std::size_t i = 0; i < s.hidden_dim; ++i) a += p.hidden(i, j) * h[i];
      }
      pre[j] = a;
    }
    for (std::size_t j = 0; j < s.hidden_dim; ++j) h[j] = std::tanh(pre[j]);
    std::vector<double> z(s.vocab_size);
    for (std::size_t k = 0; k < s.vocab_size; ++k) {
      double a = p.output_bias(static_cast<TokenId>(k));
      for (std::size_t j = 0; j < s.hidden_dim; ++j) a += p.output(j, static_cast<TokenId>(k)) * h[j];
      z[k] = a;
    }
    out.push_back(std::move(z));
  }
  return out;
}

inline double log_sum_exp(const std::vector<double>& z) {
  double m = z[0];
  for (double v : z) m = std::max(m, v);
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s);
}

inline double naive_log_prob(const PolicyParams& p, const std::vector<double>& x, const TokenSequence& seq) {
  const auto z = naive_logits(p, x, seq.ids);
  double total = 0.0;
  for (std::size_t t = 0; t < seq.ids.size(); ++t) total += z[t][seq.ids[t]] - log_sum_exp(z[t]);
  return total;
}

/// KL(softmax(a) || softmax(b)) straight from the definition.
inline double naive_kl(const std::vector<double>& za, const std::vector<double>& zb) {
  const double la = log_sum_exp(za), lb = log_sum_exp(zb);
  double kl = 0.0;
  for (std::size_t k = 0; k < za.size(); ++k) {
    const double lpa = za[k] - la, lpb = zb[k] - lb;
    kl += std::exp(lpa) * (lpa - lpb);
  }
  return kl;
}

inline double naive_kl_sum(const PolicyParams& p, const PolicyParams& q, const std::vector<double>& x,
                           const TokenSequence& seq) {
  const auto zp = naive_logits(p, x, seq.ids);
  const auto zq = naive_logits(q, x, seq.ids);
  double total = 0.0;
  for (std::size_t t = 0; t < seq.ids.size(); ++t) total += naive_kl(zp[t], zq[t]);
  return total;
}

/// Central difference of f at coordinate i.
inline double central_difference(const std::function<double(const PolicyParams&)>& f, PolicyParams theta,
                                 std::size_t i, double step = 1e-5) {
  const double orig = theta.values()[i];
  theta.values()[i] = orig + step;
  const double up = f(theta);
  theta.values()[i] = orig - step;
  const double down = f(theta);
  return (up - down) / (2.0 * step);
}

/// ||a - b|| / max(||a||, ||b||, floor): relative error of two gradient vectors.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-8) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

inline PolicyParams random_params(const PolicyShape& shape, std::mt19937_64& rng, double scale = 0.5) {
  PolicyParams p(shape);
  std::normal_distribution<double> n(0.0, scale);
  for (double& v : p.values()) v = n(rng);
  return p;
}

inline std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> out(n);
  for (double& v : out) v = d(rng);
  return out;
}

inline TokenSequence random_sequence(std::size_t vocab, std::size_t max_len, std::mt19937_64& rng, TokenId eos) {
  std::uniform_int_distribution<std::size_t> len(1, max_len);
  std::uniform_int_distribution<TokenId> tok(0, static_cast<TokenId>(vocab - 1));
  TokenSequence s;
  const std::size_t n = len(rng);
  for (std::size_t i = 0; i < n; ++i) {
    TokenId t = tok(rng);
    if (t == eos && i + 1 < n) t = (eos + 1) % static_cast<TokenId>(vocab);
    s.ids.push_back(t);
  }
  s.terminated = s.ids.back() == eos;
  return s;
}

/// Every sequence the sampler can emit with max length `max_len`: all
/// EOS-terminated sequences of length <= max_len plus every EOS-free sequence
/// of length exactly max_len.
inline std::vector<TokenSequence> enumerate_outcomes(std::size_t vocab, TokenId eos, std::size_t max_len) {
  std::vector<TokenSequence> out;
  std::vector<TokenId> cur;
  std::function<void()> rec = [&] {
    if (cur.size() == max_len) {
      out.push_back(TokenSequence{cur, cur.back() == eos});
      return;
    }
    for (TokenId t = 0; t < vocab; ++t) {
      cur.push_back(t);
      if (t == eos) out.push_back(TokenSequence{cur, true});
      else rec();
      cur.pop_back();
    }
  };
  rec();
  return out;
}

/// True when an observed count lies within z standard deviations of n*p.
inline bool within_binomial_band(std::size_t hits, std::size_t n, double p, double z = 3.0) {
  const double mean = static_cast<double>(n) * p;
  const double sd = std::sqrt(static_cast<double>(n) * p * (1.0 - p));
  return std::abs(static_cast<double>(hits) - mean) <= z * sd;
}

/// Task whose features are the one-hot class indicator.
inline favor::TaskDefinition one_hot_task(std::size_t classes, std::size_t per_class) {
  favor::TaskDefinition task;
  task.feature_dim = classes;
  for (std::size_t c = 0; c < classes; ++c) task.class_names.push_back("class_" + std::to_string(c));
  for (std::size_t c = 0; c < classes; ++c)
    for (std::size_t i = 0; i < per_class; ++i) {
      favor::LabeledInstance inst;
      inst.id = "c" + std::to_string(c) + "_" + std::to_string(i);
      inst.class_index = static_cast<int>(c);
      inst.features.assign(classes, 0.0);
      inst.features[c] = 1.0;
      task.instances.push_back(std::move(inst));
    }
  return task;
}

/// Hand-built policy for one_hot_task(): the grammar-following base policy
/// plus one gate unit per class that fires only right after <answer> and only
/// for its own class, pushing that class digit far above the others. Greedy
/// decoding then emits "<think>a</think><answer>c</answer>".
inline PolicyParams perfect_policy(const favor::Vocabulary& vocab, std::size_t classes) {
  const std::size_t d = favor::kBaseStateUnits + classes + 1;
  PolicyParams p = favor::make_base_policy(vocab, classes, classes, d, 0);
  for (std::size_t j = favor::kBaseStateUnits; j < d; ++j) {
    p.hidden_bias(j) = 0.0;
    for (std::size_t f = 0; f < classes; ++f) p.context(f, j) = 0.0;
    for (std::size_t i = 0; i < d; ++i) p.hidden(i, j) = p.hidden(j, i) = 0.0;
    for (TokenId t = 0; t < vocab.size(); ++t) {
      p.embedding(t, j) = 0.0;
      p.output(j, t) = 0.0;
    }
  }
  const double a = 10.0, w = 15.0;
  for (std::size_t c = 0; c < classes; ++c) {
    const std::size_t j = favor::kBaseStateUnits + c;
    // pre = a*x_c + a*[prev == <answer>] - 1.5a: +0.5a only when both hold.
    p.context(c, j) = a;
    p.embedding(favor::Vocabulary::kAnswerOpen, j) = a;
    p.hidden_bias(j) = -1.5 * a;
    // h in {-1, +1}: readout w*h + w on the class digit gives 0 or 2w.
    p.output(j, vocab.digit(static_cast<unsigned>(c))) = w;
    p.output_bias(vocab.digit(static_cast<unsigned>(c))) += w;
  }
  return p;
}

}  // namespace oracle
