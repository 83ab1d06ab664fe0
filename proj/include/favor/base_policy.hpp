#pragma once

// Hand-built starting policy that already speaks the response grammar
//
//   <think> filler+ </think> <answer> digit </answer> EOS
//
// and picks the class digit uniformly among the task's classes, independent of
// the context features. It plays the role of the untrained base model: format
// is mostly right, accuracy sits at chance (1/C).
//
// Hidden units 0..6 are one-hot state detectors keyed on the previous token;
// the remaining units come in mirrored pairs (j, j') with opposite random context
// projections and identical random readouts into the class digits. Their
// contributions cancel exactly, so the base distribution is context-independent,
// yet the gradient reaches the context path through readout weights of useful
// size. An unpaired leftover unit gets a context projection and no readout.

#include <cstdint>
#include <cmath>
#include <random>
#include <vector>

#include "favor/policy.hpp"
#include "favor/vocabulary.hpp"

namespace favor {

struct BasePolicyOptions {
  double state_gain = 3.0;        ///< pre-activation of an active state unit
  double logit_margin = 12.0;     ///< logit of the grammatical next token(s)
  double filler_continue = 3.0;   ///< a filler after a filler sits this far below </think>
  double context_scale = 0.5;     ///< std-dev of the random context projection
  double readout_scale = 4.0;     ///< std-dev of the mirrored spare-unit readout into class digits
};

inline constexpr std::size_t kBaseStateUnits = 7;

inline PolicyParams make_base_policy(const Vocabulary& vocab, std::size_t num_classes, std::size_t feature_dim,
                                     std::size_t hidden_dim, std::uint64_t seed,
                                     const BasePolicyOptions& options = {}) {
  require(num_classes >= 2 && num_classes <= 10, "make_base_policy: num_classes must be in [2, 10]");
  require(hidden_dim > kBaseStateUnits, "make_base_policy: hidden_dim must exceed 7");
  PolicyParams params(PolicyShape{vocab.size(), feature_dim, hidden_dim});

  enum Unit : std::size_t { Start, AfterThinkOpen, AfterFiller, AfterThinkClose, AfterAnswerOpen, AfterDigit, AfterAnswerClose };

  const double g = options.state_gain;
  // Start fires only when there is no previous token.
  params.hidden_bias(Start) = g;
  for (TokenId t = 0; t < vocab.size(); ++t) params.embedding(t, Start) = -g;

  params.embedding(Vocabulary::kThinkOpen, AfterThinkOpen) = g;
  for (std::size_t i = 0; i < vocab.filler_count(); ++i) params.embedding(vocab.filler(i), AfterFiller) = g;
  params.embedding(Vocabulary::kThinkClose, AfterThinkClose) = g;
  params.embedding(Vocabulary::kAnswerOpen, AfterAnswerOpen) = g;
  for (unsigned dgt = 0; dgt < 10; ++dgt) params.embedding(vocab.digit(dgt), AfterDigit) = g;
  params.embedding(Vocabulary::kAnswerClose, AfterAnswerClose) = g;

  const double m = options.logit_margin;
  params.output(Start, Vocabulary::kThinkOpen) = m;
  for (std::size_t i = 0; i < vocab.filler_count(); ++i) {
    params.output(AfterThinkOpen, vocab.filler(i)) = m;
    params.output(AfterFiller, vocab.filler(i)) = m - options.filler_continue;
  }
  params.output(AfterFiller, Vocabulary::kThinkClose) = m;
  params.output(AfterThinkClose, Vocabulary::kAnswerOpen) = m;
  for (unsigned c = 0; c < num_classes; ++c) params.output(AfterAnswerOpen, vocab.digit(c)) = m;
  params.output(AfterDigit, Vocabulary::kAnswerClose) = m;
  params.output(AfterAnswerClose, Vocabulary::kEos) = m;

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  const std::size_t pairs = (hidden_dim - kBaseStateUnits) / 2;
  std::size_t j = kBaseStateUnits;
  for (std::size_t p = 0; p < pairs; ++p, j += 2) {
    for (std::size_t f = 0; f < feature_dim; ++f) {
      const double w = options.context_scale * unit(rng);
      params.context(f, j) = w;
      params.context(f, j + 1) = -w;
    }
  }
  // Equal-norm readout vectors are in convex position, so every class digit
  // can become the argmax for some hidden direction.
  if (pairs > 0) {
    for (unsigned c = 0; c < num_classes; ++c) {
      std::vector<double> r(pairs);
      double norm = 0.0;
      for (auto& x : r) {
        x = unit(rng);
        norm += x * x;
      }
      norm = std::sqrt(norm);
      const double scale = norm > 0.0 ? options.readout_scale * std::sqrt(static_cast<double>(pairs)) / norm : 0.0;
      for (std::size_t p = 0; p < pairs; ++p) {
        params.output(kBaseStateUnits + 2 * p, vocab.digit(c)) = scale * r[p];
        params.output(kBaseStateUnits + 2 * p + 1, vocab.digit(c)) = scale * r[p];
      }
    }
  }
  if (j < hidden_dim)
    for (std::size_t f = 0; f < feature_dim; ++f) params.context(f, j) = options.context_scale * unit(rng);
  return params;
}

}  // namespace favor
