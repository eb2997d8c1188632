#include "offtarget/eval.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>

namespace offtarget::eval {

using nlohmann::json;

std::optional<int> detect_language(const Tokens& tokens, const data::Vocabulary& vocab) {
  std::vector<int> counts(vocab.num_languages(), 0);
  int total = 0;
  for (auto t : tokens)
    if (auto lang = vocab.language_of(t)) {
      ++counts[*lang];
      ++total;
    }
  for (int l = 0; l < vocab.num_languages(); ++l)
    if (2 * counts[l] > total) return l;
  return std::nullopt;
}

double otr(const std::vector<Tokens>& hypotheses, int target_lang, const data::Vocabulary& vocab) {
  if (hypotheses.empty()) throw std::invalid_argument("otr: no hypotheses");
  std::size_t off = 0;
  for (const auto& h : hypotheses) {
    const auto lang = detect_language(h, vocab);
    if (!lang || *lang != target_lang) ++off;
  }
  return static_cast<double>(off) / static_cast<double>(hypotheses.size());
}

double bleu(const std::vector<Tokens>& hypotheses, const std::vector<Tokens>& references, int max_n) {
  if (hypotheses.size() != references.size())
    throw std::invalid_argument("bleu: " + std::to_string(hypotheses.size()) + " hypotheses but " +
                                std::to_string(references.size()) + " references");
  if (references.empty()) throw std::invalid_argument("bleu: no references");
  if (max_n < 1) throw std::invalid_argument("bleu: max_n must be >= 1");

  std::vector<std::size_t> matched(max_n, 0), total(max_n, 0);
  std::size_t hyp_len = 0, ref_len = 0;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto& h = hypotheses[s];
    const auto& r = references[s];
    hyp_len += h.size();
    ref_len += r.size();
    for (int n = 1; n <= max_n; ++n) {
      if (h.size() < static_cast<std::size_t>(n)) continue;
      std::map<Tokens, std::size_t> ref_counts;
      for (std::size_t i = 0; i + n <= r.size(); ++i) ++ref_counts[Tokens(r.begin() + i, r.begin() + i + n)];
      std::map<Tokens, std::size_t> hyp_counts;
      for (std::size_t i = 0; i + n <= h.size(); ++i) ++hyp_counts[Tokens(h.begin() + i, h.begin() + i + n)];
      for (const auto& [gram, c] : hyp_counts) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) matched[n - 1] += std::min(c, it->second);
      }
      total[n - 1] += h.size() - n + 1;
    }
  }
  double log_precision = 0;
  for (int n = 0; n < max_n; ++n) {
    if (matched[n] == 0 || total[n] == 0) return 0.0;
    log_precision += std::log(static_cast<double>(matched[n]) / static_cast<double>(total[n]));
  }
  log_precision /= max_n;
  const double bp = hyp_len < ref_len ? std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len)) : 1.0;
  return 100.0 * bp * std::exp(log_precision);
}

double token_accuracy(const std::vector<Tokens>& hypotheses, const std::vector<Tokens>& references) {
  if (hypotheses.size() != references.size())
    throw std::invalid_argument("token_accuracy: " + std::to_string(hypotheses.size()) + " hypotheses but " +
                                std::to_string(references.size()) + " references");
  if (hypotheses.empty()) throw std::invalid_argument("token_accuracy: no pairs");
  double sum = 0;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto& h = hypotheses[s];
    const auto& r = references[s];
    const std::size_t denom = std::max(h.size(), r.size());
    if (denom == 0) {
      sum += 1.0;
      continue;
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < std::min(h.size(), r.size()); ++i) hits += h[i] == r[i];
    sum += static_cast<double>(hits) / static_cast<double>(denom);
  }
  return sum / static_cast<double>(hypotheses.size());
}

Aggregate aggregate(const std::vector<DirectionRow>& rows, bool zero_shot) {
  Aggregate a;
  for (const auto& r : rows) {
    if (r.zero_shot != zero_shot) continue;
    ++a.directions;
    a.otr += r.otr;
    a.bleu += r.bleu;
    a.token_accuracy += r.token_accuracy;
  }
  if (a.directions > 0) {
    const auto n = static_cast<double>(a.directions);
    a.otr /= n;
    a.bleu /= n;
    a.token_accuracy /= n;
  }
  return a;
}

namespace {

void score_group(const std::vector<decode::DecodedSample>& decoded, bool zero_shot, const data::Vocabulary& vocab,
                 std::vector<DirectionRow>& rows) {
  std::map<data::Direction, std::pair<std::vector<Tokens>, std::vector<Tokens>>> by_dir;
  for (const auto& d : decoded) {
    auto& [hyps, refs] = by_dir[d.sample.direction];
    hyps.push_back(d.hypothesis);
    refs.push_back(d.sample.y);
  }
  for (const auto& [dir, hr] : by_dir) {
    const auto& [hyps, refs] = hr;
    rows.push_back({dir, zero_shot, hyps.size(), otr(hyps, dir.tgt, vocab), bleu(hyps, refs), token_accuracy(hyps, refs)});
  }
}

json aggregate_json(const Aggregate& a) {
  if (a.directions == 0) return nullptr;
  return {{"directions", a.directions}, {"otr", a.otr}, {"bleu", a.bleu}, {"token_accuracy", a.token_accuracy}};
}

}  // namespace

EvalReport score(const std::vector<decode::DecodedSample>& supervised,
                 const std::vector<decode::DecodedSample>& zero_shot, const data::Vocabulary& vocab) {
  EvalReport r;
  score_group(supervised, false, vocab, r.rows);
  score_group(zero_shot, true, vocab, r.rows);
  r.supervised = aggregate(r.rows, false);
  r.zero_shot = aggregate(r.rows, true);
  return r;
}

Evaluation evaluate(const model::ModelParams& params, const EvalInputs& inputs, const data::Vocabulary& vocab,
                    const decode::DecodeConfig& config, json metadata) {
  static const std::vector<data::InstructionSample> kNone;
  const auto& sup = inputs.test_supervised ? *inputs.test_supervised : kNone;
  const auto& zs = inputs.test_zero_shot ? *inputs.test_zero_shot : kNone;
  const auto& demos = inputs.demos ? *inputs.demos : kNone;
  if (sup.empty() && zs.empty()) throw std::invalid_argument("evaluate: no test samples");

  auto dec_sup = decode::decode_all(params, sup, vocab, config, demos);
  auto dec_zs = decode::decode_all(params, zs, vocab, config, demos);
  Evaluation e;
  e.report = score(dec_sup, dec_zs, vocab);
  metadata["decode"] = decode::to_json(config);
  metadata["decode_config_hash"] = decode::config_hash(config);
  metadata["label"] = config.k_shot > 0 ? std::to_string(config.k_shot) + "-shot" : "zero-shot prompting";
  e.report.metadata = std::move(metadata);
  e.decoded = std::move(dec_sup);
  e.decoded.insert(e.decoded.end(), dec_zs.begin(), dec_zs.end());
  return e;
}

json to_json(const EvalReport& r) {
  json rows = json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"direction", data::to_string(row.direction)},
                    {"group", row.zero_shot ? "zero_shot" : "supervised"},
                    {"n", row.n},
                    {"otr", row.otr},
                    {"bleu", row.bleu},
                    {"token_accuracy", row.token_accuracy}});
  return {{"rows", rows},
          {"aggregates", {{"supervised", aggregate_json(r.supervised)}, {"zero_shot", aggregate_json(r.zero_shot)}}},
          {"metadata", r.metadata}};
}

std::string to_csv(const EvalReport& r) {
  std::string out = "direction,group,n,otr,bleu,token_accuracy\n";
  char buf[160];
  for (const auto& row : r.rows) {
    std::snprintf(buf, sizeof buf, "%s,%s,%zu,%.6f,%.4f,%.6f\n", data::to_string(row.direction).c_str(),
                  row.zero_shot ? "zero_shot" : "supervised", row.n, row.otr, row.bleu, row.token_accuracy);
    out += buf;
  }
  return out;
}

void write_report(const std::filesystem::path& dir, const Evaluation& e, const decode::DecodeConfig& config) {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "report.json", std::ios::trunc) << to_json(e.report).dump(2) << "\n";
  std::ofstream(dir / "report.csv", std::ios::trunc) << to_csv(e.report);
  decode::write_decodes(dir / "decodes.jsonl", e.decoded, config);
}

}  // namespace offtarget::eval
