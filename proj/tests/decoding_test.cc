#include <doctest.h>

#include <cmath>
#include <functional>
#include <map>
#include <random>

#include "offtarget/decoding.h"
#include "support/model_gradcheck.h"

using namespace offtarget;
using decode::Token;
using decode::Tokens;

namespace {

constexpr int kToyVocab = 8;

// Session over a hand-written next-token table keyed by the generated suffix.
struct ToySession {
  std::function<std::vector<float>(const Tokens& prompt, const Tokens& generated)> table;
  std::size_t prompt_len = 0;
  Tokens seen;
  std::vector<float> out;

  std::span<const float> feed(std::span<const Token> tokens) {
    if (seen.empty()) prompt_len = tokens.size();
    seen.insert(seen.end(), tokens.begin(), tokens.end());
    out = table(Tokens(seen.begin(), seen.begin() + prompt_len), Tokens(seen.begin() + prompt_len, seen.end()));
    return out;
  }
};

std::vector<float> logits_from_probs(const std::map<Token, double>& probs) {
  std::vector<float> l(kToyVocab, -1e4f);
  for (auto [t, p] : probs) l[t] = static_cast<float>(std::log(p));
  return l;
}

// Three-step toy: greedy takes 5 (0.6) but the best sequence starts with 6.
std::vector<float> toy_table(const Tokens& g) {
  if (g.empty()) return logits_from_probs({{5, 0.6}, {6, 0.4}});
  if (g.size() == 1 && g[0] == 5) return logits_from_probs({{5, 0.5}, {6, 0.5}});
  if (g.size() == 1 && g[0] == 6) return logits_from_probs({{6, 0.9}, {5, 0.1}});
  return logits_from_probs({{data::Vocabulary::kEos, 1.0}});
}

double toy_log_prob(const Tokens& seq) {
  Tokens g;
  double lp = 0;
  for (std::size_t i = 0; i <= seq.size(); ++i) {
    const Token next = i < seq.size() ? seq[i] : data::Vocabulary::kEos;
    auto l = toy_table(g);
    double z = 0;
    for (std::size_t v = 2; v < l.size(); ++v) z += std::exp(l[v]);
    lp += l[next] - std::log(z);
    g.push_back(next);
  }
  return lp;
}

model::ModelParams random_model(std::uint64_t seed, int context = 48) {
  auto cfg = testing::tiny_config();
  cfg.max_context = context;
  return testing::perturbed_params(cfg, seed).cast<float>();
}

Tokens random_prompt(std::mt19937_64& rng) {
  const data::Vocabulary vocab(4, 16);
  const int src = rng() % 4, tgt = (src + 1 + rng() % 3) % 4;
  Tokens x;
  const int n = 3 + rng() % 6;
  for (int i = 0; i < n; ++i) x.push_back(vocab.content_offset(src) + rng() % 16);
  return data::format_with_instruction(vocab.instruction({src, tgt}), x, {}, data::Template::kPreIns, {}, 48).prompt;
}

}  // namespace

TEST_CASE("greedy follows a forced distribution") {
  ToySession s{[](const Tokens&, const Tokens& g) {
    std::vector<float> l(kToyVocab, 0.0f);
    l[g.empty() ? 7 : data::Vocabulary::kEos] = 10.0f;
    return l;
  }};
  const Tokens prompt{1, 3};
  auto h = decode::greedy_search(s, prompt, 10);
  CHECK(h.tokens == Tokens{7});
  CHECK(h.finished);
  CHECK(h.length == 2);
}

TEST_CASE("decoders never emit PAD or BOS and respect the length cap") {
  ToySession s{[](const Tokens&, const Tokens&) {
    std::vector<float> l(kToyVocab, 0.0f);
    l[data::Vocabulary::kPad] = 50.0f;
    l[data::Vocabulary::kBos] = 40.0f;
    l[6] = 1.0f;
    return l;
  }};
  const Tokens prompt{1};
  auto g = decode::greedy_search(s, prompt, 5);
  CHECK(g.tokens == Tokens(5, 6));
  CHECK_FALSE(g.finished);
  auto b = decode::beam_search(s, prompt, 3, 5);
  CHECK(b.tokens.size() <= 5);
  for (auto t : b.tokens) CHECK(t > data::Vocabulary::kBos);
  auto c = decode::contrastive_search(s, prompt, prompt, 0.5, 4);
  CHECK(c.tokens.size() == 4);
}

TEST_CASE("greedy breaks ties toward the lowest token id") {
  ToySession s{[](const Tokens&, const Tokens& g) {
    std::vector<float> l(kToyVocab, 0.0f);
    if (g.empty()) l[4] = l[6] = 3.0f;
    else l[data::Vocabulary::kEos] = 3.0f;
    return l;
  }};
  const Tokens prompt{1};
  CHECK(decode::greedy_search(s, prompt, 4).tokens == Tokens{4});
  CHECK(decode::beam_search(s, prompt, 2, 4).tokens == Tokens{4});
}

TEST_CASE("beam search finds the best sequence where greedy does not") {
  ToySession s{[](const Tokens&, const Tokens& g) { return toy_table(g); }};
  const Tokens prompt{1};
  auto greedy = decode::greedy_search(s, prompt, 3);
  CHECK(greedy.tokens.front() == 5);

  // Exhaustive enumeration over tokens {5, 6} up to length 2 (EOS forced after).
  Tokens best;
  double best_lp = -1e300;
  for (Token a : {5, 6})
    for (Token b : {5, 6}) {
      const Tokens seq{a, b};
      if (toy_log_prob(seq) > best_lp) {
        best_lp = toy_log_prob(seq);
        best = seq;
      }
    }
  auto beam = decode::beam_search(s, prompt, 2, 3);
  CHECK(beam.tokens == best);
  CHECK(beam.tokens == Tokens{6, 6});
  CHECK(beam.log_prob == doctest::Approx(std::log(0.36)).epsilon(1e-5));
}

TEST_CASE("beam size 1 is greedy; wider beams score at least as well") {
  auto params = random_model(7);
  std::mt19937_64 rng(3);
  int not_worse = 0;
  for (int i = 0; i < 50; ++i) {
    const auto prompt = random_prompt(rng);
    const model::InferenceSession root(params);
    auto g = decode::greedy_search(root, prompt, 12);
    auto b1 = decode::beam_search(root, prompt, 1, 12);
    CHECK(b1.tokens == g.tokens);
    CHECK(b1.log_prob == doctest::Approx(g.log_prob));
    auto b4 = decode::beam_search(root, prompt, 4, 12);
    not_worse += b4.normalized() >= g.normalized() - 1e-9;
  }
  CHECK(not_worse == 50);
}

TEST_CASE("contrastive decoding reduces to greedy in degenerate cases") {
  auto params = random_model(9);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 20; ++i) {
    const auto prompt = random_prompt(rng);
    const auto other = random_prompt(rng);
    const auto greedy = decode::greedy_decode(params, prompt, 10);
    CHECK(decode::contrastive_decode(params, prompt, other, 0.0, 10) == greedy);
    CHECK(decode::contrastive_decode(params, prompt, prompt, 0.5, 10) == greedy);
    CHECK(decode::contrastive_decode(params, prompt, prompt, 0.9, 10) == greedy);
  }
  CHECK_THROWS_AS(decode::contrastive_decode(params, {1}, {1}, -0.5, 3), std::invalid_argument);
}

TEST_CASE("contrastive decoding penalizes what the contrast prompt favours") {
  // Token 5 is likely under both prompts, token 6 only under the main one.
  ToySession s{[](const Tokens& prompt, const Tokens& g) {
    if (!g.empty()) return logits_from_probs({{data::Vocabulary::kEos, 1.0}});
    return prompt.back() == 9 ? logits_from_probs({{5, 0.9}, {6, 0.1}}) : logits_from_probs({{5, 0.6}, {6, 0.4}});
  }};
  const Tokens prompt{1, 7}, contrast{1, 9};
  CHECK(decode::greedy_search(s, prompt, 3).tokens == Tokens{5});
  CHECK(decode::contrastive_search(s, prompt, contrast, 0.5, 3).tokens == Tokens{6});
  // A small lambda keeps the main prompt's choice.
  CHECK(decode::contrastive_search(s, prompt, contrast, 0.1, 3).tokens == Tokens{5});
}

TEST_CASE("decoding is deterministic and bounded on a real model") {
  auto params = random_model(11);
  std::mt19937_64 rng(8);
  for (int i = 0; i < 10; ++i) {
    const auto prompt = random_prompt(rng);
    for (int cap : {1, 4, 9}) {
      auto a = decode::beam_decode(params, prompt, 3, cap);
      CHECK(a == decode::beam_decode(params, prompt, 3, cap));
      CHECK(static_cast<int>(a.size()) <= cap);
      CHECK(static_cast<int>(decode::greedy_decode(params, prompt, cap).size()) <= cap);
    }
  }
}

TEST_CASE("decode config validation and json") {
  decode::DecodeConfig c;
  c.strategy = decode::Strategy::kContrastive;
  c.k_shot = 5;
  auto j = decode::to_json(c);
  CHECK(j.at("lambda_lang") == 0.5);
  CHECK(j.at("contrast_target") == "src");
  auto back = decode::decode_config_from_json(j);
  CHECK(back.strategy == decode::Strategy::kContrastive);
  CHECK(back.k_shot == 5);
  CHECK(decode::config_hash(back) == decode::config_hash(c));
  c.strategy = decode::Strategy::kBeam;
  CHECK(decode::to_json(c).at("beam_size") == 4);
  CHECK(decode::config_hash(back) != decode::config_hash(c));
  CHECK_THROWS_AS(decode::strategy_from_string("nucleus"), std::invalid_argument);
  c.beam_size = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK(decode::DecodeConfig{}.max_new_for(5) == 14);
}

TEST_CASE("demonstrations come from the same direction and are reproducible") {
  data::CorpusConfig cc;
  cc.pairs_per_supervised_direction = 10;
  cc.test_pairs_per_direction = 3;
  cc.demo_pairs_per_direction = 6;
  const auto corpus = data::make_corpus(cc);
  const auto& s = corpus.test_zero_shot[0];
  auto d = decode::pick_demos(s, corpus.demos, 5, 0, 0);
  REQUIRE(d.size() == 5);
  for (std::size_t i = 0; i < d.size(); ++i) {
    CHECK(d[i].direction == s.direction);
    for (std::size_t k = i + 1; k < d.size(); ++k) CHECK(d[i].x != d[k].x);
  }
  CHECK(decode::pick_demos(s, corpus.demos, 5, 0, 0)[2].x == d[2].x);
  CHECK(decode::pick_demos(s, corpus.demos, 0, 0, 0).empty());
  CHECK_THROWS_AS(decode::pick_demos(s, corpus.demos, 7, 0, 0), std::invalid_argument);

  // k-shot prompts are longer by the demo blocks.
  const data::Vocabulary vocab(4, 16);
  auto params = random_model(1, 192);
  decode::DecodeConfig dc;
  dc.k_shot = 5;
  auto out = decode::decode_all(params, {s}, vocab, dc, corpus.demos);
  CHECK(out.size() == 1);
}
