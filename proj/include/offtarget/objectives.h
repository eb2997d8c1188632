#pragma once

// Likelihood and unlikelihood objectives and their alpha-weighted mix.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "offtarget/autodiff.h"
#include "offtarget/model.h"
#include "offtarget/synthdata.h"

namespace offtarget::objectives {

enum class ULMode { kSequence, kToken };

std::string to_string(ULMode mode);
ULMode ul_mode_from_string(const std::string& s);

// Upper bound on a sequence log-probability before log(1 - exp(s)).
inline constexpr double kSequenceLogProbCap = -1e-6;
// Upper bound on a token probability before log(1 - p).
inline constexpr double kTokenProbCap = 1.0 - 1e-6;

struct LossBreakdown {
  double mle = 0;
  double ul = 0;
  double total = 0;
  double alpha = 0;
  std::size_t mle_count = 0;  // target positions in the likelihood term
  std::size_t ul_count = 0;   // conflicting samples in the unlikelihood term
};

// Mean over masked rows of -log softmax(logits)[target]. logits is [..., V]
// with one row per entry of targets/mask.
template <typename T>
ad::Tensor<T> mle_loss(const ad::Tensor<T>& logits, const data::Tokens& targets, const std::vector<std::uint8_t>& mask);

// -log(1 - exp(min(s, cap))) for a scalar sequence log-probability s.
template <typename T>
ad::Tensor<T> ul_sequence_term(const ad::Tensor<T>& sequence_log_prob);

// Mean over positions of -log(1 - min(p_t, cap)) given per-token log-probs.
template <typename T>
ad::Tensor<T> ul_token_term(const ad::Tensor<T>& token_log_probs);

// Summed negative log-likelihood of one formatted sample's target tokens.
template <typename T>
ad::Tensor<T> sample_nll_sum(ad::Graph<T>& graph, const model::BoundParams<T>& params, const data::FormattedSample& f);

// Unlikelihood contribution of one conflicting sample: the model is scored
// on the unchanged (x, y) under the wrong instruction.
template <typename T>
ad::Tensor<T> ul_sample_loss(ad::Graph<T>& graph, const model::BoundParams<T>& params, const data::ConflictingSample& c,
                             ULMode mode, data::Template tmpl = data::Template::kPreIns);

// Batch mean of ul_sample_loss.
template <typename T>
ad::Tensor<T> ul_loss(ad::Graph<T>& graph, const model::BoundParams<T>& params,
                      std::span<const data::ConflictingSample> batch, ULMode mode,
                      data::Template tmpl = data::Template::kPreIns);

// total = mle + alpha * ul.
LossBreakdown mixed_loss(double mle, double ul, double alpha);

}  // namespace offtarget::objectives
