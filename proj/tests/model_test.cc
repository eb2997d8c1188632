#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "offtarget/model.h"
#include "support/model_gradcheck.h"

using namespace offtarget;
using model::Token;
using model::Tokens;

namespace {

model::ModelConfig small() {
  model::ModelConfig c;
  c.d_model = 16;
  c.d_ffn = 32;
  c.max_context = 32;
  return c;
}

Tokens random_tokens(std::mt19937_64& rng, std::size_t n, int vocab) {
  Tokens t(n);
  for (auto& v : t) v = std::uniform_int_distribution<int>(1, vocab - 1)(rng);
  return t;
}

model::ModelParams widened(const model::ModelConfig& c, std::uint64_t seed) {
  auto p = model::init_params(c, seed);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd(0, 0.3f);
  for (auto& t : p.tensors)
    for (auto& v : t.values) v += nd(rng);
  return p;
}

}  // namespace

TEST_CASE("init is deterministic and shaped by the config") {
  model::ModelConfig c;
  c.max_context = 64;
  c.init_std = 0.02;
  auto a = model::init_params(c, 7);
  auto b = model::init_params(c, 7);
  REQUIRE(a.tensors.size() == b.tensors.size());
  for (std::size_t i = 0; i < a.tensors.size(); ++i) CHECK(a.tensors[i].values == b.tensors[i].values);
  CHECK(model::init_params(c, 8).tensors[0].values != a.tensors[0].values);

  // tok 77*64 + pos 64*64 + 2 layers * (2*64 + 4*64*64 + 2*64 + 64*256 + 256 + 256*64 + 64) + 2*64
  CHECK(model::parameter_count(c) == 108608);
  CHECK(a.count() == 108608);
  for (float g : a.get("layer1.ln2.gain").values) CHECK(g == 1.0f);
  for (float g : a.get("ln_f.bias").values) CHECK(g == 0.0f);

  double sq = 0;
  const auto& w = a.get("layer0.ffn.w1").values;
  for (float v : w) sq += double(v) * v;
  CHECK(std::sqrt(sq / w.size()) == doctest::Approx(0.02).epsilon(0.05));

  c.init_std = 0.1;
  const auto pe = model::init_params(c, 7).get("pos_emb").values;
  CHECK(pe[0] == 0.0f);
  CHECK(pe[1] == doctest::Approx(0.1));
  CHECK(pe[3 * 64] == doctest::Approx(0.1 * std::sin(3.0)));
  CHECK(pe[3 * 64 + 3] == doctest::Approx(0.1 * std::cos(3.0 / std::pow(1000.0, 2.0 / 64))));
  const auto w2 = model::init_params(c, 7).get("layer0.ffn.w1").values;
  sq = 0;
  for (float v : w2) sq += double(v) * v;
  CHECK(std::sqrt(sq / w2.size()) == doctest::Approx(0.1).epsilon(0.05));

  model::ModelConfig bad = c;
  bad.n_heads = 3;
  CHECK_THROWS_AS(model::init_params(bad, 0), std::invalid_argument);
  bad = c;
  bad.init_std = 0;
  CHECK_THROWS_AS(model::init_params(bad, 0), std::invalid_argument);
}

TEST_CASE("forward produces normalized, causal, batch-independent logits") {
  auto c = small();
  auto p = widened(c, 1);
  std::mt19937_64 rng(2);
  const Tokens a = random_tokens(rng, 10, c.vocab_size);
  const Tokens b = random_tokens(rng, 10, c.vocab_size);
  const std::size_t v = c.vocab_size;

  auto ab = model::forward_logits(p, {a, b}, 0);
  auto ba = model::forward_logits(p, {b, a}, 0);
  for (std::size_t i = 0; i < 10 * v; ++i) {
    CHECK(std::abs(ab[i] - ba[10 * v + i]) < 1e-5);
    CHECK(std::abs(ab[10 * v + i] - ba[i]) < 1e-5);
  }

  for (std::size_t t = 0; t < 10; ++t) {
    double mx = -1e30, z = 0;
    for (std::size_t j = 0; j < v; ++j) mx = std::max<double>(mx, ab[t * v + j]);
    for (std::size_t j = 0; j < v; ++j) z += std::exp(ab[t * v + j] - mx);
    double total = 0;
    for (std::size_t j = 0; j < v; ++j) total += std::exp(ab[t * v + j] - mx) / z;
    CHECK(std::abs(total - 1.0) < 1e-5);
  }

  Tokens longer = a;
  for (Token extra : random_tokens(rng, 6, c.vocab_size)) longer.push_back(extra);
  auto lg = model::forward_logits(p, {longer}, 0);
  for (std::size_t i = 0; i < 10 * v; ++i) CHECK(std::abs(lg[i] - ab[i]) < 1e-5);
}

TEST_CASE("padded keys are excluded from attention") {
  auto c = small();
  auto p = widened(c, 3);
  const std::size_t v = c.vocab_size;
  auto x = model::forward_logits(p, {{20, 30, 40, 50}}, 20);
  auto y = model::forward_logits(p, {{21, 30, 40, 50}}, 21);
  for (std::size_t i = v; i < 4 * v; ++i) CHECK(std::abs(x[i] - y[i]) < 1e-5);
  auto z = model::forward_logits(p, {{21, 30, 40, 50}}, 0);
  bool differs = false;
  for (std::size_t i = v; i < 4 * v; ++i) differs = differs || std::abs(z[i] - x[i]) > 1e-4;
  CHECK(differs);
}

TEST_CASE("forward rejects overlong or out-of-vocabulary input") {
  auto c = small();
  auto p = model::init_params(c, 0);
  try {
    model::forward_logits(p, {Tokens(33, 5)}, 0);
    FAIL("expected length_error");
  } catch (const std::length_error& e) {
    CHECK(std::string(e.what()).find("32") != std::string::npos);
  }
  CHECK_THROWS_AS(model::forward_logits(p, {Tokens{1, 77}}, 0), std::out_of_range);
}

TEST_CASE("uniform model assigns log(1/V) per target token") {
  model::ModelConfig c = small();
  c.vocab_size = 4;
  auto p = model::init_params(c, 0);
  for (auto& t : p.tensors)
    if (!t.name.ends_with(".gain")) std::fill(t.values.begin(), t.values.end(), 0.0f);
  ad::Graph<float> g;
  auto bound = model::bind(g, p, false);
  CHECK(model::sequence_log_prob(g, bound, {1, 2}, {3}).item() == doctest::Approx(-1.386294).epsilon(1e-6));
  CHECK_THROWS_AS(model::sequence_log_prob(g, bound, {1, 2}, {}), std::invalid_argument);
}

TEST_CASE("sequence log-prob matches step-by-step incremental decoding") {
  auto c = small();
  auto p = widened(c, 5);
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    const Tokens prompt = random_tokens(rng, 6, c.vocab_size);
    const Tokens target = random_tokens(rng, 3, c.vocab_size);
    ad::Graph<float> g;
    auto bound = model::bind(g, p, false);
    const double s = model::sequence_log_prob(g, bound, prompt, target).item();

    model::InferenceSession session(p);
    double oracle = 0;
    auto logits = session.feed(prompt);
    for (Token t : target) {
      double mx = -1e30, z = 0;
      for (float l : logits) mx = std::max<double>(mx, l);
      for (float l : logits) z += std::exp(l - mx);
      oracle += logits[t] - mx - std::log(z);
      logits = session.feed(t);
    }
    CHECK(std::abs(s - oracle) < 1e-5 * std::max(1.0, std::abs(oracle)));
    CHECK(std::exp(s) > 0.0);
    CHECK(std::exp(s) <= 1.0);
  }
}

TEST_CASE("incremental session reproduces full forward logits") {
  auto c = small();
  auto p = widened(c, 8);
  std::mt19937_64 rng(9);
  const Tokens seq = random_tokens(rng, 12, c.vocab_size);
  auto full = model::forward_logits(p, {seq}, 0);
  model::InferenceSession s(p);
  for (std::size_t t = 0; t < seq.size(); ++t) {
    auto l = s.feed(seq[t]);
    for (int j = 0; j < c.vocab_size; ++j) CHECK(std::abs(l[j] - full[t * c.vocab_size + j]) < 1e-4);
  }
  CHECK(s.position() == 12);
  model::InferenceSession fork = s;
  CHECK(fork.position() == 12);
}

TEST_CASE("sequence log-prob gradient matches finite differences") {
  auto cfg = testing::tiny_config();
  const Tokens prompt{1, 4, 6, 11, 3, 29, 33, 3};
  const Tokens target{46, 45, 2};
  for (std::uint64_t seed : {1u, 2u}) {
    auto params = testing::perturbed_params(cfg, seed);
    auto r = testing::model_grad_check(
        params, [&](auto& g, const auto& b) { return model::sequence_log_prob(g, b, prompt, target); }, 200, seed);
    CHECK(r.coords >= 200);
    CHECK(r.max_rel_error < 1e-4);
  }
}

TEST_CASE("checkpoint round trip") {
  auto c = small();
  model::Checkpoint ck{widened(c, 4), {{"stage", 1}}};
  auto dir = std::filesystem::temp_directory_path() / "offtarget_model_test";
  std::filesystem::create_directories(dir);
  model::save_checkpoint(dir / "a.bin", ck);
  CHECK_FALSE(std::filesystem::exists(dir / "a.bin.tmp"));
  auto back = model::load_checkpoint(dir / "a.bin");
  CHECK(back.params.config == c);
  CHECK(back.metadata.at("stage") == 1);
  for (std::size_t i = 0; i < ck.params.tensors.size(); ++i) CHECK(back.params.tensors[i].values == ck.params.tensors[i].values);
  model::save_checkpoint(dir / "b.bin", back);
  CHECK(model::file_fingerprint(dir / "a.bin") == model::file_fingerprint(dir / "b.bin"));
  CHECK_THROWS(model::load_checkpoint(dir / "missing.bin"));
  std::filesystem::remove_all(dir);
}
