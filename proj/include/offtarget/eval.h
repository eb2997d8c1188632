#pragma once

// Exact language identification, off-target ratio, corpus BLEU over token
// ids, token accuracy, and per-direction reports.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "offtarget/decoding.h"
#include "offtarget/model.h"
#include "offtarget/synthdata.h"

namespace offtarget::eval {

using data::Tokens;

// Strict-majority language over content tokens; nullopt on ties or when
// there are no content tokens.
std::optional<int> detect_language(const Tokens& tokens, const data::Vocabulary& vocab);

// Fraction of hypotheses not detected as target_lang (unknown counts as off-target).
double otr(const std::vector<Tokens>& hypotheses, int target_lang, const data::Vocabulary& vocab);

// Corpus BLEU in [0, 100]; no smoothing.
double bleu(const std::vector<Tokens>& hypotheses, const std::vector<Tokens>& references, int max_n = 4);

// Mean over pairs of positional matches / max(len(hyp), len(ref)).
double token_accuracy(const std::vector<Tokens>& hypotheses, const std::vector<Tokens>& references);

struct DirectionRow {
  data::Direction direction;
  bool zero_shot = false;
  std::size_t n = 0;
  double otr = 0;
  double bleu = 0;
  double token_accuracy = 0;
};

struct Aggregate {
  std::size_t directions = 0;
  double otr = 0;
  double bleu = 0;
  double token_accuracy = 0;
};

struct EvalReport {
  std::vector<DirectionRow> rows;  // supervised directions first, each group sorted
  Aggregate supervised;
  Aggregate zero_shot;
  nlohmann::json metadata = nlohmann::json::object();
};

// Unweighted mean over the rows of one group.
Aggregate aggregate(const std::vector<DirectionRow>& rows, bool zero_shot);

// Scores decoded samples grouped by direction.
EvalReport score(const std::vector<decode::DecodedSample>& supervised,
                 const std::vector<decode::DecodedSample>& zero_shot, const data::Vocabulary& vocab);

struct EvalInputs {
  const std::vector<data::InstructionSample>* test_supervised = nullptr;
  const std::vector<data::InstructionSample>* test_zero_shot = nullptr;
  const std::vector<data::InstructionSample>* demos = nullptr;  // may be null when k_shot == 0
};

struct Evaluation {
  EvalReport report;
  std::vector<decode::DecodedSample> decoded;  // supervised then zero-shot
};

// Decodes both test sets and scores them. metadata is copied into the
// report alongside the decode config.
Evaluation evaluate(const model::ModelParams& params, const EvalInputs& inputs, const data::Vocabulary& vocab,
                    const decode::DecodeConfig& config, nlohmann::json metadata = nlohmann::json::object());

nlohmann::json to_json(const EvalReport& r);
std::string to_csv(const EvalReport& r);

// report.json, report.csv and (when given) decodes.jsonl.
void write_report(const std::filesystem::path& dir, const Evaluation& e, const decode::DecodeConfig& config);

}  // namespace offtarget::eval
