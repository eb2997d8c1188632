#pragma once

// Experiment plumbing behind the command-line tool: one composite config,
// dataset directories, and the gen-data / train / eval / ablate / repro
// pipelines.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "offtarget/decoding.h"
#include "offtarget/eval.h"
#include "offtarget/model.h"
#include "offtarget/synthdata.h"
#include "offtarget/trainer.h"

namespace offtarget::exp {

namespace fs = std::filesystem;

// Bad flags, bad config values, missing inputs: exit code 2.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ExperimentConfig {
  data::CorpusConfig corpus;
  model::ModelConfig model;
  train::TrainConfig stage1 = train::TrainConfig::stage1();
  train::TrainConfig stage2 = train::TrainConfig::stage2();
  decode::DecodeConfig decode;
  std::vector<double> alpha_grid{0, 0.01, 0.02, 0.04, 0.05, 0.1, 0.3};
  bool post_ins_baseline = true;  // repro trains a second stage-1 model on post-ins prompts
  std::string out_dir = "runs/repro";
  std::uint64_t seed = 0;
};

// Missing keys take defaults; sub-config seeds default to the master seed and
// the model vocabulary defaults to the corpus vocabulary. Throws UsageError.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& c);
// Defaults when path is empty.
ExperimentConfig load_experiment_config(const fs::path& path);

struct Dataset {
  data::CorpusConfig config;
  data::Vocabulary vocab{4, 16};
  std::vector<data::LanguageSpec> languages;
  std::vector<data::InstructionSample> train;
  std::vector<data::InstructionSample> test_supervised;
  std::vector<data::InstructionSample> test_zero_shot;
  std::vector<data::InstructionSample> demos;
};

Dataset dataset_from_corpus(const data::Corpus& corpus);
// train.jsonl, test_supervised.jsonl, test_zeroshot.jsonl, demos.jsonl,
// vocab.json, corpus_config.json.
void write_dataset(const fs::path& dir, const Dataset& d);
Dataset read_dataset(const fs::path& dir);

// Progress messages (never part of primary outputs).
using Logger = std::function<void(const std::string&)>;

// Exclusive ownership of a run directory through <dir>/.lock.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

Dataset cmd_gen_data(const ExperimentConfig& cfg, const fs::path& out, const Logger& log = {});

train::TrainResult cmd_train(int stage, const ExperimentConfig& cfg, const fs::path& data_dir,
                             const std::optional<fs::path>& from, const fs::path& out, const Logger& log = {});

eval::Evaluation cmd_eval(const fs::path& ckpt, const fs::path& data_dir, const decode::DecodeConfig& dc,
                          const fs::path& out, const Logger& log = {});

struct AblationRow {
  double x = 0;
  double zero_shot_otr = 0;
  double zero_shot_bleu = 0;
  double supervised_bleu = 0;
  double supervised_otr = 0;
};

std::string ablation_csv(const std::vector<AblationRow>& rows, const std::string& x_name);

// alpha: stage 2 per grid value from the stage-1 checkpoint, each evaluated.
// steps: one stage-2 run whose intermediate checkpoints are evaluated.
std::vector<AblationRow> cmd_ablate(const std::string& what, const ExperimentConfig& cfg, const fs::path& data_dir,
                                    const fs::path& stage1_ckpt, const fs::path& out, const Logger& log = {});

// gen-data -> stage 1 -> stage 2 -> evaluations and baselines -> ablations;
// writes a summary report.json / report.csv into out.
nlohmann::json cmd_repro(const ExperimentConfig& cfg, const fs::path& out, const Logger& log = {});

}  // namespace offtarget::exp
