#include "offtarget/synthdata.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace offtarget::data {

using nlohmann::json;

std::string to_string(const Direction& d) {
  return "L" + std::to_string(d.src) + "->L" + std::to_string(d.tgt);
}

Vocabulary::Vocabulary(int num_languages, int symbols_per_language)
    : num_languages_(num_languages), symbols_(symbols_per_language) {
  if (num_languages < 2) throw ConfigError("vocabulary needs at least 2 languages");
  if (symbols_per_language < 1) throw ConfigError("vocabulary needs at least 1 symbol per language");
}

std::optional<int> Vocabulary::language_of(Token t) const {
  const Token base = content_offset(0);
  if (t < base || t >= size()) return std::nullopt;
  return (t - base) / symbols_;
}

Tokens FormattedSample::full() const {
  Tokens out = prompt;
  out.insert(out.end(), target.begin(), target.end());
  return out;
}

std::vector<LanguageSpec> default_languages(const Vocabulary& vocab) {
  const int s = vocab.symbols_per_language();
  std::vector<LanguageSpec> langs;
  for (int i = 0; i < vocab.num_languages(); ++i) {
    LanguageSpec l;
    l.id = i;
    l.token_offset = vocab.content_offset(i);
    l.permutation.resize(s);
    std::iota(l.permutation.begin(), l.permutation.end(), 0);
    switch (i % 4) {
      case 2:
        l.order = OrderRule::kReversed;
        break;
      case 3:
        for (int k = 0; k < s; ++k) l.permutation[k] = (k + 5) % s;
        break;
      default:
        break;
    }
    langs.push_back(std::move(l));
  }
  return langs;
}

Tokens render(const LanguageSpec& lang, const std::vector<int>& concepts) {
  const int s = static_cast<int>(lang.permutation.size());
  Tokens out;
  out.reserve(concepts.size());
  for (int c : concepts) {
    if (c < 0 || c >= s)
      throw std::out_of_range("render: symbol " + std::to_string(c) + " outside 0.." + std::to_string(s - 1));
    out.push_back(lang.token_offset + lang.permutation[c]);
  }
  if (lang.order == OrderRule::kReversed) std::reverse(out.begin(), out.end());
  return out;
}

std::vector<int> invert(const LanguageSpec& lang, const Tokens& tokens) {
  const int s = static_cast<int>(lang.permutation.size());
  std::vector<int> inverse(s);
  for (int k = 0; k < s; ++k) inverse[lang.permutation[k]] = k;
  std::vector<int> concepts;
  concepts.reserve(tokens.size());
  for (Token t : tokens) {
    const int local = t - lang.token_offset;
    if (local < 0 || local >= s)
      throw std::out_of_range("token " + std::to_string(t) + " is not in the content range of L" +
                              std::to_string(lang.id));
    concepts.push_back(inverse[local]);
  }
  if (lang.order == OrderRule::kReversed) std::reverse(concepts.begin(), concepts.end());
  return concepts;
}

Tokens translate_oracle(const LanguageSpec& src, const LanguageSpec& tgt, const Tokens& src_tokens) {
  return render(tgt, invert(src, src_tokens));
}

CorpusConfig CorpusConfig::resolved() const {
  CorpusConfig c = *this;
  const int k = c.num_languages;
  if (k < 2) throw ConfigError("num_languages must be at least 2");
  if (c.symbols_per_language < 1) throw ConfigError("symbols_per_language must be positive");
  if (c.pivot < 0 || c.pivot >= k) throw ConfigError("pivot language out of range");
  if (c.min_length < 1 || c.max_length < c.min_length) throw ConfigError("invalid concept length range");
  if (c.pairs_per_supervised_direction < 1 || c.test_pairs_per_direction < 1 || c.demo_pairs_per_direction < 0)
    throw ConfigError("pair counts must be positive");

  if (c.supervised.empty())
    for (int i = 0; i < k; ++i)
      if (i != c.pivot) {
        c.supervised.push_back({c.pivot, i});
        c.supervised.push_back({i, c.pivot});
      }
  if (c.zero_shot.empty())
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j)
        if (i != j && i != c.pivot && j != c.pivot) c.zero_shot.push_back({i, j});

  auto check_dirs = [&](const std::vector<Direction>& dirs, const char* what) {
    std::set<Direction> seen;
    for (const auto& d : dirs) {
      if (d.src < 0 || d.src >= k || d.tgt < 0 || d.tgt >= k)
        throw ConfigError(std::string(what) + " direction " + to_string(d) + " names an unknown language");
      if (d.src == d.tgt) throw ConfigError(std::string(what) + " direction " + to_string(d) + " is not a translation");
      if (!seen.insert(d).second) throw ConfigError(std::string(what) + " direction " + to_string(d) + " listed twice");
    }
  };
  check_dirs(c.supervised, "supervised");
  check_dirs(c.zero_shot, "zero-shot");
  for (const auto& d : c.zero_shot)
    if (std::find(c.supervised.begin(), c.supervised.end(), d) != c.supervised.end())
      throw ConfigError("direction " + to_string(d) + " is both supervised and zero-shot");
  return c;
}

namespace {

// Number of distinct concept sequences with lengths in [lo, hi], saturating.
double concept_space(int symbols, int lo, int hi) {
  double total = 0;
  for (int l = lo; l <= hi; ++l) total += std::pow(static_cast<double>(symbols), l);
  return total;
}

InstructionSample make_sample(const Vocabulary& vocab, const std::vector<LanguageSpec>& langs, const Direction& d,
                              const std::vector<int>& concepts, const std::string& split) {
  InstructionSample s;
  s.direction = d;
  s.ins = vocab.instruction(d);
  s.x = render(langs[d.src], concepts);
  s.y = render(langs[d.tgt], concepts);
  s.split = split;
  return s;
}

}  // namespace

Corpus make_corpus(const CorpusConfig& config) {
  Corpus corpus;
  corpus.config = config.resolved();
  const CorpusConfig& c = corpus.config;
  const Vocabulary vocab(c.num_languages, c.symbols_per_language);
  corpus.languages = default_languages(vocab);

  const double needed =
      static_cast<double>(c.supervised.size()) * (c.pairs_per_supervised_direction + c.test_pairs_per_direction) +
      static_cast<double>(c.zero_shot.size()) * c.test_pairs_per_direction +
      static_cast<double>(c.supervised.size() + c.zero_shot.size()) * c.demo_pairs_per_direction;
  const double space = concept_space(c.symbols_per_language, c.min_length, c.max_length);
  if (needed > space)
    throw ConfigError("corpus needs " + std::to_string(static_cast<long long>(needed)) +
                      " distinct concept sequences but only " + std::to_string(static_cast<long long>(space)) +
                      " exist");
  // Rejection sampling slows down badly near saturation.
  if (needed > 0.5 * space) throw ConfigError("corpus would use more than half of the concept space");

  std::mt19937_64 rng(c.seed);
  std::uniform_int_distribution<int> len_dist(c.min_length, c.max_length);
  std::uniform_int_distribution<int> sym_dist(0, c.symbols_per_language - 1);
  std::set<std::vector<int>> used;
  auto fresh = [&] {
    for (;;) {
      std::vector<int> seq(len_dist(rng));
      for (auto& v : seq) v = sym_dist(rng);
      if (used.insert(seq).second) return seq;
    }
  };

  for (const auto& d : c.supervised)
    for (int i = 0; i < c.pairs_per_supervised_direction; ++i)
      corpus.train.push_back(make_sample(vocab, corpus.languages, d, fresh(), "train"));
  for (const auto& d : c.supervised)
    for (int i = 0; i < c.test_pairs_per_direction; ++i)
      corpus.test_supervised.push_back(make_sample(vocab, corpus.languages, d, fresh(), "test_supervised"));
  for (const auto& d : c.zero_shot)
    for (int i = 0; i < c.test_pairs_per_direction; ++i)
      corpus.test_zero_shot.push_back(make_sample(vocab, corpus.languages, d, fresh(), "test_zero_shot"));
  std::vector<Direction> all = c.supervised;
  all.insert(all.end(), c.zero_shot.begin(), c.zero_shot.end());
  for (const auto& d : all)
    for (int i = 0; i < c.demo_pairs_per_direction; ++i)
      corpus.demos.push_back(make_sample(vocab, corpus.languages, d, fresh(), "demo"));
  return corpus;
}

FormattedSample format_with_instruction(const Tokens& ins, const Tokens& x, const Tokens& y, Template tmpl,
                                        const std::vector<InstructionSample>& demos, std::size_t max_context) {
  auto block = [&](Tokens& out, const Tokens& bins, const Tokens& bx) {
    const Tokens& first = tmpl == Template::kPreIns ? bins : bx;
    const Tokens& second = tmpl == Template::kPreIns ? bx : bins;
    out.insert(out.end(), first.begin(), first.end());
    out.push_back(Vocabulary::kSep);
    out.insert(out.end(), second.begin(), second.end());
    out.push_back(Vocabulary::kSep);
  };

  FormattedSample f;
  f.prompt.push_back(Vocabulary::kBos);
  for (const auto& demo : demos) {
    block(f.prompt, demo.ins, demo.x);
    f.prompt.insert(f.prompt.end(), demo.y.begin(), demo.y.end());
    f.prompt.push_back(Vocabulary::kEos);
  }
  block(f.prompt, ins, x);
  f.target = y;
  f.target.push_back(Vocabulary::kEos);

  const std::size_t total = f.prompt.size() + f.target.size();
  if (total > max_context) {
    std::ostringstream os;
    os << "formatted sample does not fit the context: prompt " << f.prompt.size() << " + target " << f.target.size()
       << " = " << total << " > " << max_context << " (" << demos.size() << " demos)";
    throw std::length_error(os.str());
  }
  f.loss_mask.assign(f.prompt.size(), 0);
  f.loss_mask.resize(total, 1);
  return f;
}

FormattedSample format_sample(const InstructionSample& sample, Template tmpl,
                              const std::vector<InstructionSample>& demos, std::size_t max_context) {
  return format_with_instruction(sample.ins, sample.x, sample.y, tmpl, demos, max_context);
}

std::vector<Direction> conflicting_candidates(const Direction& original, const std::vector<Direction>& training_directions,
                                              int num_languages, ConflictPool pool, ConflictKind kind) {
  std::set<Direction> cands;
  if (kind == ConflictKind::kTargetOnly) {
    for (int t = 0; t < num_languages; ++t) cands.insert({original.src, t});
  } else if (pool == ConflictPool::kAllDirections) {
    for (int i = 0; i < num_languages; ++i)
      for (int j = 0; j < num_languages; ++j)
        if (i != j) cands.insert({i, j});
  } else {
    for (const auto& d : training_directions) {
      cands.insert(d);
      cands.insert({d.tgt, d.src});
    }
  }
  cands.erase(original);
  return {cands.begin(), cands.end()};
}

ConflictingSample make_conflicting(const InstructionSample& sample, const std::vector<Direction>& training_directions,
                                   const Vocabulary& vocab, std::mt19937_64& rng, ConflictPool pool, ConflictKind kind) {
  const auto cands = conflicting_candidates(sample.direction, training_directions, vocab.num_languages(), pool, kind);
  if (cands.empty()) throw ConfigError("no conflicting direction available for " + to_string(sample.direction));
  std::uniform_int_distribution<std::size_t> pick(0, cands.size() - 1);
  ConflictingSample c;
  c.base = sample;
  c.conflicting_direction = cands[pick(rng)];
  c.conflicting_ins = vocab.instruction(c.conflicting_direction);
  return c;
}

json to_json(const InstructionSample& s) {
  return json{{"direction", {s.direction.src, s.direction.tgt}}, {"ins", s.ins}, {"x", s.x}, {"y", s.y}, {"split", s.split}};
}

InstructionSample sample_from_json(const json& j) {
  InstructionSample s;
  s.direction = {j.at("direction").at(0).get<int>(), j.at("direction").at(1).get<int>()};
  s.ins = j.at("ins").get<Tokens>();
  s.x = j.at("x").get<Tokens>();
  s.y = j.at("y").get<Tokens>();
  s.split = j.value("split", "");
  return s;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<InstructionSample>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& s : samples) out << to_json(s).dump() << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<InstructionSample> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<InstructionSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(sample_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

json manifest_json(const Vocabulary& vocab, const std::vector<LanguageSpec>& languages) {
  json langs = json::array();
  for (const auto& l : languages)
    langs.push_back({{"id", l.id},
                     {"token_offset", l.token_offset},
                     {"permutation", l.permutation},
                     {"order", l.order == OrderRule::kForward ? "forward" : "reversed"},
                     {"content_range", {l.token_offset, l.token_offset + vocab.symbols_per_language() - 1}},
                     {"from_token", vocab.from_token(l.id)},
                     {"to_token", vocab.to_token(l.id)}});
  return json{{"vocab_size", vocab.size()},
              {"num_languages", vocab.num_languages()},
              {"symbols_per_language", vocab.symbols_per_language()},
              {"special_tokens", {{"PAD", Vocabulary::kPad}, {"BOS", Vocabulary::kBos}, {"EOS", Vocabulary::kEos},
                                  {"SEP", Vocabulary::kSep}, {"TRANSLATE", Vocabulary::kTranslate}}},
              {"languages", langs}};
}

std::pair<Vocabulary, std::vector<LanguageSpec>> manifest_from_json(const json& j) {
  Vocabulary vocab(j.at("num_languages").get<int>(), j.at("symbols_per_language").get<int>());
  std::vector<LanguageSpec> langs;
  for (const auto& l : j.at("languages")) {
    LanguageSpec s;
    s.id = l.at("id").get<int>();
    s.token_offset = l.at("token_offset").get<Token>();
    s.permutation = l.at("permutation").get<std::vector<int>>();
    s.order = l.at("order").get<std::string>() == "reversed" ? OrderRule::kReversed : OrderRule::kForward;
    langs.push_back(std::move(s));
  }
  return {vocab, langs};
}

namespace {

json dirs_json(const std::vector<Direction>& dirs) {
  json a = json::array();
  for (const auto& d : dirs) a.push_back({d.src, d.tgt});
  return a;
}

std::vector<Direction> dirs_from_json(const json& a) {
  std::vector<Direction> out;
  for (const auto& d : a) out.push_back({d.at(0).get<int>(), d.at(1).get<int>()});
  return out;
}

}  // namespace

json to_json(const CorpusConfig& c) {
  return json{{"num_languages", c.num_languages},
              {"symbols_per_language", c.symbols_per_language},
              {"pivot", c.pivot},
              {"supervised", dirs_json(c.supervised)},
              {"zero_shot", dirs_json(c.zero_shot)},
              {"pairs_per_supervised_direction", c.pairs_per_supervised_direction},
              {"test_pairs_per_direction", c.test_pairs_per_direction},
              {"demo_pairs_per_direction", c.demo_pairs_per_direction},
              {"min_length", c.min_length},
              {"max_length", c.max_length},
              {"seed", c.seed}};
}

CorpusConfig corpus_config_from_json(const json& j) {
  CorpusConfig c;
  c.num_languages = j.value("num_languages", c.num_languages);
  c.symbols_per_language = j.value("symbols_per_language", c.symbols_per_language);
  c.pivot = j.value("pivot", c.pivot);
  if (j.contains("supervised")) c.supervised = dirs_from_json(j.at("supervised"));
  if (j.contains("zero_shot")) c.zero_shot = dirs_from_json(j.at("zero_shot"));
  c.pairs_per_supervised_direction = j.value("pairs_per_supervised_direction", c.pairs_per_supervised_direction);
  c.test_pairs_per_direction = j.value("test_pairs_per_direction", c.test_pairs_per_direction);
  c.demo_pairs_per_direction = j.value("demo_pairs_per_direction", c.demo_pairs_per_direction);
  c.min_length = j.value("min_length", c.min_length);
  c.max_length = j.value("max_length", c.max_length);
  c.seed = j.value("seed", c.seed);
  return c;
}

std::string to_string(Template t) { return t == Template::kPreIns ? "pre-ins" : "post-ins"; }

Template template_from_string(const std::string& s) {
  if (s == "pre-ins") return Template::kPreIns;
  if (s == "post-ins") return Template::kPostIns;
  throw ConfigError("unknown template '" + s + "' (expected pre-ins|post-ins)");
}

std::string to_string(ConflictPool p) {
  return p == ConflictPool::kSupervisedAndReverses ? "supervised+reverses" : "all";
}

ConflictPool conflict_pool_from_string(const std::string& s) {
  if (s == "supervised+reverses") return ConflictPool::kSupervisedAndReverses;
  if (s == "all") return ConflictPool::kAllDirections;
  throw ConfigError("unknown conflict pool '" + s + "' (expected supervised+reverses|all)");
}

std::string to_string(ConflictKind k) { return k == ConflictKind::kFullDirection ? "full" : "target-only"; }

ConflictKind conflict_kind_from_string(const std::string& s) {
  if (s == "full") return ConflictKind::kFullDirection;
  if (s == "target-only") return ConflictKind::kTargetOnly;
  throw ConfigError("unknown conflict kind '" + s + "' (expected full|target-only)");
}

}  // namespace offtarget::data
