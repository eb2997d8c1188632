#pragma once

// Greedy, beam and language-contrastive decoding. The search routines are
// templates over a session type with the InferenceSession interface
// (copyable, feed(span<const Token>) -> logits), so they can be exercised on
// hand-built distributions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "offtarget/model.h"
#include "offtarget/synthdata.h"

namespace offtarget::decode {

using data::Token;
using data::Tokens;

enum class Strategy { kGreedy, kBeam, kContrastive };

std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);  // throws std::invalid_argument

struct DecodeConfig {
  Strategy strategy = Strategy::kGreedy;
  int beam_size = 4;
  int max_new_tokens = 0;  // 0 -> 2 * len(x) + 4
  int k_shot = 0;          // in-context demonstrations of the same direction
  double lambda_lang = 0.5;
  int contrast_target = -1;  // language of the contrast instruction; -1 -> the source language
  data::Template tmpl = data::Template::kPreIns;
  std::uint64_t seed = 0;  // demo selection

  void validate() const;  // throws std::invalid_argument
  int max_new_for(std::size_t source_length) const {
    return max_new_tokens > 0 ? max_new_tokens : 2 * static_cast<int>(source_length) + 4;
  }
};

nlohmann::json to_json(const DecodeConfig& c);
DecodeConfig decode_config_from_json(const nlohmann::json& j);
std::string config_hash(const DecodeConfig& c);

namespace detail {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// log-softmax in double with PAD and BOS excluded.
inline std::vector<double> next_log_probs(std::span<const float> logits) {
  std::vector<double> lp(logits.begin(), logits.end());
  lp[data::Vocabulary::kPad] = kNegInf;
  lp[data::Vocabulary::kBos] = kNegInf;
  double mx = kNegInf;
  for (double v : lp) mx = std::max(mx, v);
  double z = 0;
  for (double v : lp)
    if (v != kNegInf) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  for (double& v : lp)
    if (v != kNegInf) v -= lse;
  return lp;
}

inline Token argmax(const std::vector<double>& scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;  // strict: lowest id wins ties
  return static_cast<Token>(best);
}

}  // namespace detail

struct Hypothesis {
  Tokens tokens;  // without EOS
  double log_prob = 0;
  int length = 0;  // generated tokens including EOS when finished
  bool finished = false;
  double normalized() const { return length > 0 ? log_prob / length : 0.0; }
};

template <typename Session>
Hypothesis greedy_search(Session session, std::span<const Token> prompt, int max_new_tokens) {
  Hypothesis h;
  auto logits = session.feed(prompt);
  for (int step = 0; step < max_new_tokens; ++step) {
    const auto lp = detail::next_log_probs(logits);
    const Token t = detail::argmax(lp);
    h.log_prob += lp[t];
    ++h.length;
    if (t == data::Vocabulary::kEos) {
      h.finished = true;
      break;
    }
    h.tokens.push_back(t);
    if (step + 1 < max_new_tokens) logits = session.feed(std::span<const Token>(&h.tokens.back(), 1));
  }
  return h;
}

// Beam search over summed token log-probs. Stops once beam_size hypotheses
// have finished (or at max_new_tokens) and returns the best by mean token
// log-prob. Ties go to the lexicographically smallest token sequence. The
// greedy path competes too: pruning can drop it, and the mean-log-prob
// criterion should never lose to plain greedy.
template <typename Session>
Hypothesis beam_search(const Session& root, std::span<const Token> prompt, int beam_size, int max_new_tokens) {
  if (beam_size < 1) throw std::invalid_argument("beam_search: beam_size must be >= 1");
  struct Live {
    Hypothesis h;
    Session session;
    std::vector<double> next;
  };
  auto better = [](double sa, const Tokens& a, double sb, const Tokens& b) {
    if (sa != sb) return sa > sb;
    return a < b;
  };

  std::vector<Live> live;
  {
    Session s = root;
    auto logits = s.feed(prompt);
    live.push_back({{}, std::move(s), detail::next_log_probs(logits)});
  }
  std::vector<Hypothesis> finished;
  for (int step = 0; step < max_new_tokens && !live.empty() && static_cast<int>(finished.size()) < beam_size; ++step) {
    struct Cand {
      double score;
      std::size_t parent;
      Token token;
      Tokens seq;
    };
    std::vector<Cand> cands;
    for (std::size_t p = 0; p < live.size(); ++p)
      for (std::size_t t = 0; t < live[p].next.size(); ++t) {
        if (live[p].next[t] == detail::kNegInf) continue;
        Tokens seq = live[p].h.tokens;
        seq.push_back(static_cast<Token>(t));
        cands.push_back({live[p].h.log_prob + live[p].next[t], p, static_cast<Token>(t), std::move(seq)});
      }
    const std::size_t keep = std::min<std::size_t>(cands.size(), beam_size);
    std::partial_sort(cands.begin(), cands.begin() + keep, cands.end(),
                      [&](const Cand& a, const Cand& b) { return better(a.score, a.seq, b.score, b.seq); });

    std::vector<Live> next_live;
    const bool last = step + 1 == max_new_tokens;
    for (std::size_t i = 0; i < keep; ++i) {
      const auto& c = cands[i];
      Hypothesis h{live[c.parent].h.tokens, c.score, live[c.parent].h.length + 1, false};
      if (c.token == data::Vocabulary::kEos) {
        h.finished = true;
        finished.push_back(std::move(h));
        continue;
      }
      h.tokens.push_back(c.token);
      if (last) {
        finished.push_back(std::move(h));
        continue;
      }
      Session s = live[c.parent].session;
      auto logits = s.feed(std::span<const Token>(&c.token, 1));
      next_live.push_back({std::move(h), std::move(s), detail::next_log_probs(logits)});
    }
    live = std::move(next_live);
  }
  for (auto& l : live) finished.push_back(std::move(l.h));
  if (beam_size > 1) finished.push_back(greedy_search(root, prompt, max_new_tokens));
  if (finished.empty()) return {};
  return *std::min_element(finished.begin(), finished.end(), [&](const Hypothesis& a, const Hypothesis& b) {
    return better(a.normalized(), a.tokens, b.normalized(), b.tokens);
  });
}

// Greedy over log p(v | prompt, y) - lambda * log p(v | contrast_prompt, y).
template <typename Session>
Hypothesis contrastive_search(const Session& root, std::span<const Token> prompt, std::span<const Token> contrast_prompt,
                              double lambda, int max_new_tokens) {
  if (!(lambda >= 0)) throw std::invalid_argument("contrastive_search: lambda must be non-negative");
  Session main = root, contrast = root;
  auto main_logits = main.feed(prompt);
  auto contrast_logits = contrast.feed(contrast_prompt);
  Hypothesis h;
  for (int step = 0; step < max_new_tokens; ++step) {
    const auto lp = detail::next_log_probs(main_logits);
    auto score = lp;
    if (lambda != 0) {
      const auto lc = detail::next_log_probs(contrast_logits);
      for (std::size_t v = 0; v < score.size(); ++v)
        if (score[v] != detail::kNegInf) score[v] -= lambda * lc[v];
    }
    const Token t = detail::argmax(score);
    h.log_prob += lp[t];
    ++h.length;
    if (t == data::Vocabulary::kEos) {
      h.finished = true;
      break;
    }
    h.tokens.push_back(t);
    if (step + 1 < max_new_tokens) {
      main_logits = main.feed(std::span<const Token>(&h.tokens.back(), 1));
      contrast_logits = contrast.feed(std::span<const Token>(&h.tokens.back(), 1));
    }
  }
  return h;
}

// Model-level entry points; outputs exclude EOS.
Tokens greedy_decode(const model::ModelParams& params, const Tokens& prompt, int max_new_tokens);
Tokens beam_decode(const model::ModelParams& params, const Tokens& prompt, int beam_size, int max_new_tokens);
Tokens contrastive_decode(const model::ModelParams& params, const Tokens& prompt, const Tokens& contrast_prompt,
                          double lambda, int max_new_tokens);

// Demonstrations for one sample: k distinct pool entries of the same
// direction, drawn with a generator seeded from (config.seed, index).
std::vector<data::InstructionSample> pick_demos(const data::InstructionSample& sample,
                                                const std::vector<data::InstructionSample>& pool, int k,
                                                std::uint64_t seed, std::size_t index);

// Decodes one test sample under a config: builds the prompt (with demos),
// and for contrastive decoding the contrast prompt.
Tokens decode_sample(const model::ModelParams& params, const data::InstructionSample& sample,
                     const data::Vocabulary& vocab, const DecodeConfig& config,
                     const std::vector<data::InstructionSample>& demos);

struct DecodedSample {
  data::InstructionSample sample;
  Tokens hypothesis;
};

// Decodes every sample (concurrently, results in input order).
std::vector<DecodedSample> decode_all(const model::ModelParams& params, const std::vector<data::InstructionSample>& samples,
                                      const data::Vocabulary& vocab, const DecodeConfig& config,
                                      const std::vector<data::InstructionSample>& demo_pool);

void write_decodes(const std::filesystem::path& path, const std::vector<DecodedSample>& decoded,
                   const DecodeConfig& config);

}  // namespace offtarget::decode
