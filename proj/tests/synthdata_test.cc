#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <set>

#include "offtarget/synthdata.h"

using namespace offtarget::data;

namespace {

const Vocabulary kVocab(4, 16);

CorpusConfig small_config() {
  CorpusConfig c;
  c.pairs_per_supervised_direction = 50;
  c.test_pairs_per_direction = 10;
  c.demo_pairs_per_direction = 3;
  c.seed = 9;
  return c;
}

}  // namespace

TEST_CASE("vocabulary layout") {
  CHECK(kVocab.size() == 77);
  CHECK(kVocab.from_token(0) == 5);
  CHECK(kVocab.from_token(3) == 8);
  CHECK(kVocab.to_token(0) == 9);
  CHECK(kVocab.to_token(3) == 12);
  CHECK(kVocab.content_offset(0) == 13);
  CHECK(kVocab.content_offset(1) == 29);
  CHECK(kVocab.content_offset(2) == 45);
  CHECK(kVocab.content_offset(3) == 61);
  CHECK_FALSE(kVocab.language_of(12).has_value());
  CHECK(kVocab.language_of(13) == 0);
  CHECK(kVocab.language_of(76) == 3);
  CHECK_FALSE(kVocab.language_of(77).has_value());
}

TEST_CASE("render applies order, permutation and offset") {
  auto langs = default_languages(kVocab);
  CHECK(render(langs[0], {0, 1, 2}) == Tokens{13, 14, 15});
  CHECK(render(langs[2], {0, 1, 2}) == Tokens{47, 46, 45});
  CHECK(render(langs[3], {0, 11, 15}) == Tokens{61 + 5, 61 + 0, 61 + 4});
  CHECK_THROWS_AS(render(langs[0], {16}), std::out_of_range);
}

TEST_CASE("render is invertible") {
  auto langs = default_languages(kVocab);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 100; ++i) {
    std::vector<int> c(std::uniform_int_distribution<int>(1, 12)(rng));
    for (auto& v : c) v = std::uniform_int_distribution<int>(0, 15)(rng);
    const auto& l = langs[i % 4];
    CHECK(invert(l, render(l, c)) == c);
  }
}

TEST_CASE("translation oracle") {
  auto langs = default_languages(kVocab);
  CHECK(translate_oracle(langs[0], langs[1], {13, 14, 15}) == Tokens{29, 30, 31});
  CHECK(translate_oracle(langs[0], langs[0], {20, 13, 27}) == Tokens{20, 13, 27});
  CHECK_THROWS_AS(translate_oracle(langs[0], langs[1], {29}), std::out_of_range);

  std::mt19937_64 rng(2);
  for (int i = 0; i < 100; ++i) {
    std::vector<int> c(std::uniform_int_distribution<int>(1, 12)(rng));
    for (auto& v : c) v = std::uniform_int_distribution<int>(0, 15)(rng);
    const Tokens s = render(langs[0], c);
    CHECK(translate_oracle(langs[1], langs[2], translate_oracle(langs[0], langs[1], s)) ==
          translate_oracle(langs[0], langs[2], s));
    // every output token lies in the target language's range
    for (int t = 0; t < 4; ++t)
      for (Token tok : translate_oracle(langs[0], langs[t], s)) CHECK(kVocab.language_of(tok) == t);
  }
}

TEST_CASE("default corpus sizes and split structure") {
  CorpusConfig c;
  c.demo_pairs_per_direction = 0;
  c.test_pairs_per_direction = 5;
  auto corpus = make_corpus(c);
  CHECK(corpus.train.size() == 12000);
  CHECK(corpus.config.supervised.size() == 6);
  CHECK(corpus.config.zero_shot.size() == 6);
  std::map<Direction, int> per_dir;
  for (const auto& s : corpus.train) {
    CHECK((s.direction.src == 0 || s.direction.tgt == 0));
    ++per_dir[s.direction];
  }
  for (const auto& [d, n] : per_dir) CHECK(n == 2000);
  for (const auto& s : corpus.test_zero_shot) CHECK((s.direction.src != 0 && s.direction.tgt != 0));
}

TEST_CASE("corpus invariants") {
  auto corpus = make_corpus(small_config());
  std::set<std::vector<int>> train_concepts;
  for (const auto& s : corpus.train) {
    CHECK(s.y == translate_oracle(corpus.languages[s.direction.src], corpus.languages[s.direction.tgt], s.x));
    CHECK(s.ins == kVocab.instruction(s.direction));
    CHECK(s.x.size() >= 3);
    CHECK(s.x.size() <= 12);
    train_concepts.insert(invert(corpus.languages[s.direction.src], s.x));
  }
  for (const auto* split : {&corpus.test_supervised, &corpus.test_zero_shot, &corpus.demos})
    for (const auto& s : *split) {
      CHECK(s.y == translate_oracle(corpus.languages[s.direction.src], corpus.languages[s.direction.tgt], s.x));
      CHECK(train_concepts.count(invert(corpus.languages[s.direction.src], s.x)) == 0);
    }
}

TEST_CASE("corpus generation is reproducible") {
  auto a = make_corpus(small_config());
  auto b = make_corpus(small_config());
  REQUIRE(a.train.size() == b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) CHECK(to_json(a.train[i]) == to_json(b.train[i]));
  auto other = small_config();
  other.seed = 10;
  CHECK(to_json(make_corpus(other).train[0]) != to_json(a.train[0]));
}

TEST_CASE("corpus config validation") {
  auto c = small_config();
  c.zero_shot = {{0, 1}};
  CHECK_THROWS_AS(make_corpus(c), ConfigError);
  c = small_config();
  c.symbols_per_language = 2;
  c.max_length = 3;
  CHECK_THROWS_AS(make_corpus(c), ConfigError);  // space of 14 sequences
  c = small_config();
  c.supervised = {{1, 1}};
  CHECK_THROWS_AS(make_corpus(c), ConfigError);
}

TEST_CASE("pre-ins and post-ins formatting") {
  InstructionSample s{{0, 1}, kVocab.instruction({0, 1}), {13}, {29}, "train"};
  auto pre = format_sample(s, Template::kPreIns, {}, 64);
  CHECK(pre.prompt == Tokens{1, 4, 5, 10, 3, 13, 3});
  CHECK(pre.target == Tokens{29, 2});
  CHECK(pre.loss_mask == std::vector<std::uint8_t>{0, 0, 0, 0, 0, 0, 0, 1, 1});
  auto post = format_sample(s, Template::kPostIns, {}, 64);
  CHECK(post.prompt == Tokens{1, 13, 3, 4, 5, 10, 3});
  CHECK(post.target == Tokens{29, 2});
}

TEST_CASE("demonstrations are prefixed as full blocks") {
  InstructionSample q{{1, 2}, kVocab.instruction({1, 2}), {29, 30}, {46, 45}, "test"};
  InstructionSample d{{1, 2}, kVocab.instruction({1, 2}), {31}, {47}, "demo"};
  auto f = format_sample(q, Template::kPreIns, {d}, 64);
  CHECK(f.prompt == Tokens{1, 4, 6, 11, 3, 31, 3, 47, 2, 4, 6, 11, 3, 29, 30, 3});
  CHECK(format_sample(q, Template::kPreIns, {}, 64).prompt == Tokens{1, 4, 6, 11, 3, 29, 30, 3});
  CHECK_THROWS_AS(format_sample(q, Template::kPreIns, {d, d, d}, 20), std::length_error);
}

TEST_CASE("conflicting samples exclude the original direction") {
  auto corpus = make_corpus(small_config());
  const auto& sample = corpus.train.front();
  std::mt19937_64 rng(4);
  for (int i = 0; i < 200; ++i) {
    auto c = make_conflicting(sample, corpus.config.supervised, kVocab, rng);
    CHECK(c.conflicting_direction != sample.direction);
    CHECK(c.base.x == sample.x);
    CHECK(c.base.y == sample.y);
    CHECK(c.conflicting_ins == kVocab.instruction(c.conflicting_direction));
  }
  std::mt19937_64 r1(17), r2(17);
  CHECK(make_conflicting(sample, corpus.config.supervised, kVocab, r1).conflicting_direction ==
        make_conflicting(sample, corpus.config.supervised, kVocab, r2).conflicting_direction);

  auto target_only = conflicting_candidates({1, 0}, corpus.config.supervised, 4, ConflictPool::kSupervisedAndReverses,
                                            ConflictKind::kTargetOnly);
  CHECK(target_only.size() == 3);
  for (const auto& d : target_only) CHECK(d.src == 1);
  CHECK(conflicting_candidates({1, 0}, {}, 4, ConflictPool::kAllDirections, ConflictKind::kFullDirection).size() == 11);
}

TEST_CASE("conflicting directions are drawn uniformly") {
  auto corpus = make_corpus(small_config());
  const auto& sample = corpus.train.front();  // L0->L1
  const auto cands = conflicting_candidates(sample.direction, corpus.config.supervised, 4,
                                            ConflictPool::kSupervisedAndReverses, ConflictKind::kFullDirection);
  REQUIRE(cands.size() == 5);
  std::map<Direction, int> counts;
  std::mt19937_64 rng(123);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) ++counts[make_conflicting(sample, corpus.config.supervised, kVocab, rng).conflicting_direction];
  const double p = 1.0 / cands.size();
  const double sigma = std::sqrt(draws * p * (1 - p));
  for (const auto& d : cands) CHECK(std::abs(counts[d] - draws * p) <= 3 * sigma);
  CHECK(counts.size() == cands.size());
}

TEST_CASE("jsonl and manifest round trip") {
  auto corpus = make_corpus(small_config());
  auto dir = std::filesystem::temp_directory_path() / "offtarget_synth_test";
  std::filesystem::create_directories(dir);
  write_jsonl(dir / "t.jsonl", corpus.test_zero_shot);
  auto back = read_jsonl(dir / "t.jsonl");
  REQUIRE(back.size() == corpus.test_zero_shot.size());
  CHECK(to_json(back[3]) == to_json(corpus.test_zero_shot[3]));
  auto [vocab, langs] = manifest_from_json(manifest_json(kVocab, corpus.languages));
  CHECK(vocab.size() == 77);
  CHECK(langs[3].permutation == corpus.languages[3].permutation);
  CHECK(langs[2].order == OrderRule::kReversed);
  std::filesystem::remove_all(dir);
}
