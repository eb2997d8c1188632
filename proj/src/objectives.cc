#include "offtarget/objectives.h"

#include <cmath>
#include <stdexcept>

namespace offtarget::objectives {

std::string to_string(ULMode mode) {
  return mode == ULMode::kSequence ? "sequence" : "token";
}

ULMode ul_mode_from_string(const std::string& s) {
  if (s == "sequence") return ULMode::kSequence;
  if (s == "token") return ULMode::kToken;
  throw std::invalid_argument("unknown unlikelihood mode '" + s + "' (expected sequence|token)");
}

template <typename T>
ad::Tensor<T> mle_loss(const ad::Tensor<T>& logits, const data::Tokens& targets, const std::vector<std::uint8_t>& mask) {
  const std::size_t vocab = logits.shape().back();
  const std::size_t rows = logits.values().size() / vocab;
  if (targets.size() != rows || mask.size() != rows)
    throw ad::ShapeError("mle_loss: " + std::to_string(rows) + " logit rows but " + std::to_string(targets.size()) +
                         " targets and " + std::to_string(mask.size()) + " mask entries");
  std::size_t count = 0;
  std::vector<T> weights(rows);
  for (std::size_t i = 0; i < rows; ++i)
    if (mask[i]) {
      weights[i] = T(1);
      ++count;
    }
  if (count == 0) throw std::invalid_argument("mle_loss: mask selects no positions");

  auto& g = logits.graph();
  auto flat = ad::reshape(logits, {rows, vocab});
  auto picked = ad::gather(ad::log_softmax(flat), std::vector<std::int64_t>(targets.begin(), targets.end()));
  auto masked = ad::mul(picked, g.leaf({rows}, std::move(weights)));
  return ad::scale(ad::sum(masked), -1.0 / static_cast<double>(count));
}

template <typename T>
ad::Tensor<T> ul_sequence_term(const ad::Tensor<T>& s) {
  return ad::scale(ad::log1mexp(ad::clamp_max(s, kSequenceLogProbCap)), -1.0);
}

template <typename T>
ad::Tensor<T> ul_token_term(const ad::Tensor<T>& token_log_probs) {
  static const double cap = std::log1p(-1e-6);  // log(kTokenProbCap)
  return ad::scale(ad::mean(ad::log1mexp(ad::clamp_max(token_log_probs, cap))), -1.0);
}

template <typename T>
ad::Tensor<T> sample_nll_sum(ad::Graph<T>& graph, const model::BoundParams<T>& params, const data::FormattedSample& f) {
  return ad::scale(model::sequence_log_prob(graph, params, f.prompt, f.target), -1.0);
}

template <typename T>
ad::Tensor<T> ul_sample_loss(ad::Graph<T>& graph, const model::BoundParams<T>& params, const data::ConflictingSample& c,
                             ULMode mode, data::Template tmpl) {
  const auto f = data::format_with_instruction(c.conflicting_ins, c.base.x, c.base.y, tmpl, {},
                                               static_cast<std::size_t>(params.config->max_context));
  auto token_lp = model::target_log_probs(graph, params, f.prompt, f.target);
  return mode == ULMode::kSequence ? ul_sequence_term(ad::sum(token_lp)) : ul_token_term(token_lp);
}

template <typename T>
ad::Tensor<T> ul_loss(ad::Graph<T>& graph, const model::BoundParams<T>& params,
                      std::span<const data::ConflictingSample> batch, ULMode mode, data::Template tmpl) {
  if (batch.empty()) throw std::invalid_argument("ul_loss: empty batch");
  std::vector<ad::Tensor<T>> terms;
  for (const auto& c : batch) terms.push_back(ul_sample_loss(graph, params, c, mode, tmpl));
  auto stacked = terms.size() == 1 ? terms.front() : ad::concat_last<T>(terms);
  return ad::mean(stacked);
}

LossBreakdown mixed_loss(double mle, double ul, double alpha) {
  if (!(alpha >= 0)) throw std::invalid_argument("mixed_loss: alpha must be non-negative");
  LossBreakdown b;
  b.mle = mle;
  b.ul = ul;
  b.alpha = alpha;
  b.total = mle + alpha * ul;
  return b;
}

#define OFFTARGET_INSTANTIATE(T)                                                                                     \
  template ad::Tensor<T> mle_loss(const ad::Tensor<T>&, const data::Tokens&, const std::vector<std::uint8_t>&);     \
  template ad::Tensor<T> ul_sequence_term(const ad::Tensor<T>&);                                                     \
  template ad::Tensor<T> ul_token_term(const ad::Tensor<T>&);                                                        \
  template ad::Tensor<T> sample_nll_sum(ad::Graph<T>&, const model::BoundParams<T>&, const data::FormattedSample&);  \
  template ad::Tensor<T> ul_sample_loss(ad::Graph<T>&, const model::BoundParams<T>&, const data::ConflictingSample&, \
                                        ULMode, data::Template);                                                     \
  template ad::Tensor<T> ul_loss(ad::Graph<T>&, const model::BoundParams<T>&, std::span<const data::ConflictingSample>, \
                                 ULMode, data::Template);

OFFTARGET_INSTANTIATE(float)
OFFTARGET_INSTANTIATE(double)
#undef OFFTARGET_INSTANTIATE

}  // namespace offtarget::objectives
