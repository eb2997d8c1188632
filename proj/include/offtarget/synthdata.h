#pragma once

// Synthetic languages with an exact translation oracle, corpus generation,
// instruction formatting and instruction-conflicting negatives.
//
// A sentence is a sequence of abstract concepts 0..S-1. Language i renders a
// concept sequence by (optionally) reversing it, permuting each symbol and
// shifting it into its own disjoint content-token range, so the language of
// any content token is known exactly.

#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace offtarget::data {

using Token = std::int32_t;
using Tokens = std::vector<Token>;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class OrderRule { kForward, kReversed };

struct LanguageSpec {
  int id = 0;
  Token token_offset = 0;
  std::vector<int> permutation;  // symbol -> rendered symbol
  OrderRule order = OrderRule::kForward;
};

struct Direction {
  int src = 0;
  int tgt = 0;
  auto operator<=>(const Direction&) const = default;
};

std::string to_string(const Direction& d);  // "L1->L2"

// Token layout: PAD BOS EOS SEP TRANSLATE, then FROM_L0..FROM_L{K-1},
// TO_L0..TO_L{K-1}, then K blocks of S content tokens.
class Vocabulary {
 public:
  static constexpr Token kPad = 0;
  static constexpr Token kBos = 1;
  static constexpr Token kEos = 2;
  static constexpr Token kSep = 3;
  static constexpr Token kTranslate = 4;

  Vocabulary(int num_languages, int symbols_per_language);

  int num_languages() const { return num_languages_; }
  int symbols_per_language() const { return symbols_; }
  Token from_token(int lang) const { return 5 + lang; }
  Token to_token(int lang) const { return 5 + num_languages_ + lang; }
  Token content_offset(int lang) const { return 5 + 2 * num_languages_ + lang * symbols_; }
  int size() const { return 5 + 2 * num_languages_ + num_languages_ * symbols_; }

  // Language owning a content token; nullopt for special/meta tokens.
  std::optional<int> language_of(Token t) const;

  Tokens instruction(const Direction& d) const { return {kTranslate, from_token(d.src), to_token(d.tgt)}; }

 private:
  int num_languages_;
  int symbols_;
};

enum class ConflictPool {
  kSupervisedAndReverses,  // training directions and their reverses
  kAllDirections,          // every ordered pair of distinct languages
};

enum class ConflictKind {
  kFullDirection,  // replace both FROM and TO markers
  kTargetOnly,     // keep FROM, replace only TO
};

struct CorpusConfig {
  int num_languages = 4;
  int symbols_per_language = 16;
  int pivot = 0;
  std::vector<Direction> supervised;  // empty -> every pair touching the pivot
  std::vector<Direction> zero_shot;   // empty -> every pair not touching the pivot
  int pairs_per_supervised_direction = 2000;
  int test_pairs_per_direction = 200;
  int demo_pairs_per_direction = 20;  // in-context demonstration pool
  int min_length = 3;
  int max_length = 12;
  std::uint64_t seed = 0;

  // Fills in default direction sets and validates; throws ConfigError.
  CorpusConfig resolved() const;
};

struct InstructionSample {
  Direction direction;
  Tokens ins;
  Tokens x;
  Tokens y;
  std::string split;
};

struct ConflictingSample {
  InstructionSample base;
  Direction conflicting_direction;
  Tokens conflicting_ins;
};

enum class Template { kPreIns, kPostIns };

struct FormattedSample {
  Tokens prompt;
  Tokens target;                       // y followed by EOS
  std::vector<std::uint8_t> loss_mask;  // over prompt+target; 1 exactly on target positions
  Tokens full() const;
};

struct Corpus {
  CorpusConfig config;  // resolved
  std::vector<LanguageSpec> languages;
  std::vector<InstructionSample> train;
  std::vector<InstructionSample> test_supervised;
  std::vector<InstructionSample> test_zero_shot;
  std::vector<InstructionSample> demos;
};

// Default language family: L0 identity, L1 identity, L2 reversed order,
// L3 symbols rotated by 5; further languages alternate the same rules.
std::vector<LanguageSpec> default_languages(const Vocabulary& vocab);

Tokens render(const LanguageSpec& lang, const std::vector<int>& concepts);
std::vector<int> invert(const LanguageSpec& lang, const Tokens& tokens);
Tokens translate_oracle(const LanguageSpec& src, const LanguageSpec& tgt, const Tokens& src_tokens);

Corpus make_corpus(const CorpusConfig& config);

FormattedSample format_sample(const InstructionSample& sample, Template tmpl,
                              const std::vector<InstructionSample>& demos, std::size_t max_context);
// Formats with an explicit instruction in place of the sample's own.
FormattedSample format_with_instruction(const Tokens& ins, const Tokens& x, const Tokens& y, Template tmpl,
                                        const std::vector<InstructionSample>& demos, std::size_t max_context);

// Directions eligible as a wrong instruction for `original`.
std::vector<Direction> conflicting_candidates(const Direction& original, const std::vector<Direction>& training_directions,
                                              int num_languages, ConflictPool pool, ConflictKind kind);

ConflictingSample make_conflicting(const InstructionSample& sample, const std::vector<Direction>& training_directions,
                                   const Vocabulary& vocab, std::mt19937_64& rng,
                                   ConflictPool pool = ConflictPool::kSupervisedAndReverses,
                                   ConflictKind kind = ConflictKind::kFullDirection);

std::string to_string(Template t);  // "pre-ins" | "post-ins"
Template template_from_string(const std::string& s);
std::string to_string(ConflictPool p);  // "supervised+reverses" | "all"
ConflictPool conflict_pool_from_string(const std::string& s);
std::string to_string(ConflictKind k);  // "full" | "target-only"
ConflictKind conflict_kind_from_string(const std::string& s);

// Serialization.
nlohmann::json to_json(const InstructionSample& s);
InstructionSample sample_from_json(const nlohmann::json& j);
void write_jsonl(const std::filesystem::path& path, const std::vector<InstructionSample>& samples);
std::vector<InstructionSample> read_jsonl(const std::filesystem::path& path);

nlohmann::json manifest_json(const Vocabulary& vocab, const std::vector<LanguageSpec>& languages);
// Returns the vocabulary and languages stored in a manifest.
std::pair<Vocabulary, std::vector<LanguageSpec>> manifest_from_json(const nlohmann::json& j);

nlohmann::json to_json(const CorpusConfig& c);
CorpusConfig corpus_config_from_json(const nlohmann::json& j);

}  // namespace offtarget::data
