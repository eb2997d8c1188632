#pragma once

// Adam with warmup/decay schedule and the two fine-tuning stages: plain
// likelihood training on supervised directions, then likelihood plus
// unlikelihood on instruction-conflicting twins.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "offtarget/model.h"
#include "offtarget/objectives.h"
#include "offtarget/synthdata.h"

namespace offtarget::train {

struct TrainConfig {
  int stage = 1;
  double base_lr = 2e-3;
  double warmup_ratio = 0.03;
  int batch_size = 8;
  int epochs = 3;    // stage 1
  int steps = 100;   // stage 2
  double alpha = 0.05;
  objectives::ULMode ul_mode = objectives::ULMode::kSequence;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0;
  data::Template tmpl = data::Template::kPreIns;
  data::ConflictPool conflict_pool = data::ConflictPool::kSupervisedAndReverses;
  data::ConflictKind conflict_kind = data::ConflictKind::kFullDirection;
  int checkpoint_every = 10;  // stage 2; 0 disables intermediate checkpoints
  int chunk_size = 8;         // samples per gradient task

  static TrainConfig stage1();
  static TrainConfig stage2();
  void validate() const;  // throws std::invalid_argument
};

nlohmann::json to_json(const TrainConfig& c);
// Missing keys take the defaults of the stage named in j (or `stage`).
TrainConfig train_config_from_json(const nlohmann::json& j, int stage);

struct OptimizerState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  std::int64_t step = 0;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 1.0;  // global gradient norm; <= 0 disables
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Linear warmup over round(warmup_ratio * total) steps, then linear decay to 0.
double lr_schedule(std::int64_t step, std::int64_t total_steps, double warmup_ratio, double base_lr);

// One clipped Adam update in place. Returns the gradient norm before clipping.
double adam_step(std::vector<model::ParamTensor<float>>& params, const std::vector<std::vector<float>>& grads,
                 OptimizerState& state, double lr, const AdamConfig& cfg);

struct BatchResult {
  objectives::LossBreakdown loss;
  std::vector<std::vector<float>> grads;  // layout order
};

// Gradient of mle(positives) + alpha * ul(negatives). mle is averaged over
// all target tokens in the batch, ul over negatives. Work is split into
// fixed chunks and reduced in chunk order, so the result is independent of
// the thread count.
BatchResult batch_gradients(const model::ModelParams& params, std::span<const data::FormattedSample> positives,
                            std::span<const data::ConflictingSample> negatives, double alpha, objectives::ULMode mode,
                            data::Template tmpl, int chunk_size);

struct LogRow {
  std::int64_t step = 0;
  double lr = 0;
  objectives::LossBreakdown loss;
  double grad_norm = 0;
};

using StepCallback = std::function<void(const LogRow&)>;

struct TrainResult {
  model::Checkpoint checkpoint;
  std::vector<LogRow> log;
};

std::int64_t stage1_total_steps(const TrainConfig& config, std::size_t num_samples);

// Writes config.json, log.csv and final.bin into run_dir when it is non-empty.
TrainResult train_stage1(const TrainConfig& config, std::span<const data::InstructionSample> train,
                         const model::ModelConfig& model_config, const std::filesystem::path& run_dir = {},
                         const StepCallback& on_step = {});

// Also writes ckpt_stepNNNN.bin every checkpoint_every steps.
TrainResult train_stage2(const TrainConfig& config, const model::Checkpoint& stage1,
                         std::span<const data::InstructionSample> train, const data::Vocabulary& vocab,
                         const std::filesystem::path& run_dir = {}, const StepCallback& on_step = {});

std::filesystem::path step_checkpoint_name(std::int64_t step);  // ckpt_step0010.bin

}  // namespace offtarget::train
