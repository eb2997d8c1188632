#include "offtarget/trainer.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "offtarget/parallel.h"

namespace offtarget::train {

using nlohmann::json;

TrainConfig TrainConfig::stage1() { return {}; }

TrainConfig TrainConfig::stage2() {
  TrainConfig c;
  c.stage = 2;
  c.base_lr = 2e-4;
  return c;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (stage != 1 && stage != 2) fail("stage must be 1 or 2");
  if (!(base_lr > 0) || !std::isfinite(base_lr)) fail("base_lr must be positive");
  if (!(warmup_ratio >= 0 && warmup_ratio < 1)) fail("warmup_ratio must lie in [0, 1)");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (stage == 1 && epochs < 1) fail("epochs must be >= 1");
  if (stage == 2 && steps < 1) fail("steps must be >= 1");
  if (!(alpha >= 0) || !std::isfinite(alpha)) fail("alpha must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail("adam betas must lie in [0, 1)");
  if (!(eps > 0)) fail("eps must be positive");
  if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
  if (chunk_size < 1) fail("chunk_size must be >= 1");
}

json to_json(const TrainConfig& c) {
  return {{"stage", c.stage},
          {"base_lr", c.base_lr},
          {"warmup_ratio", c.warmup_ratio},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"steps", c.steps},
          {"alpha", c.alpha},
          {"ul_mode", objectives::to_string(c.ul_mode)},
          {"seed", c.seed},
          {"adam_betas", {c.beta1, c.beta2}},
          {"adam_eps", c.eps},
          {"grad_clip", c.grad_clip},
          {"template", data::to_string(c.tmpl)},
          {"conflict_pool", data::to_string(c.conflict_pool)},
          {"conflict_kind", data::to_string(c.conflict_kind)},
          {"checkpoint_every", c.checkpoint_every},
          {"chunk_size", c.chunk_size}};
}

TrainConfig train_config_from_json(const json& j, int stage) {
  stage = j.value("stage", stage);
  TrainConfig c = stage == 2 ? TrainConfig::stage2() : TrainConfig::stage1();
  c.stage = stage;
  c.base_lr = j.value("base_lr", c.base_lr);
  c.warmup_ratio = j.value("warmup_ratio", c.warmup_ratio);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.steps = j.value("steps", c.steps);
  c.alpha = j.value("alpha", c.alpha);
  if (j.contains("ul_mode")) c.ul_mode = objectives::ul_mode_from_string(j.at("ul_mode").get<std::string>());
  c.seed = j.value("seed", c.seed);
  if (j.contains("adam_betas")) {
    c.beta1 = j.at("adam_betas").at(0).get<double>();
    c.beta2 = j.at("adam_betas").at(1).get<double>();
  }
  c.eps = j.value("adam_eps", c.eps);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  if (j.contains("template")) c.tmpl = data::template_from_string(j.at("template").get<std::string>());
  if (j.contains("conflict_pool"))
    c.conflict_pool = data::conflict_pool_from_string(j.at("conflict_pool").get<std::string>());
  if (j.contains("conflict_kind"))
    c.conflict_kind = data::conflict_kind_from_string(j.at("conflict_kind").get<std::string>());
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.chunk_size = j.value("chunk_size", c.chunk_size);
  c.validate();
  return c;
}

double lr_schedule(std::int64_t step, std::int64_t total_steps, double warmup_ratio, double base_lr) {
  if (total_steps <= 0) throw std::invalid_argument("lr_schedule: total_steps must be positive");
  if (step < 0 || step > total_steps)
    throw std::out_of_range("lr_schedule: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(total_steps) + "]");
  const auto warmup = static_cast<std::int64_t>(std::llround(warmup_ratio * static_cast<double>(total_steps)));
  if (step < warmup) return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (warmup == total_steps) return base_lr;
  return base_lr * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warmup);
}

double adam_step(std::vector<model::ParamTensor<float>>& params, const std::vector<std::vector<float>>& grads,
                 OptimizerState& state, double lr, const AdamConfig& cfg) {
  if (grads.size() != params.size())
    throw std::invalid_argument("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                                std::to_string(params.size()) + " tensors");
  double sq = 0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    if (grads[t].size() != params[t].values.size())
      throw std::invalid_argument("adam_step: gradient size mismatch for " + params[t].name);
    for (float g : grads[t]) {
      if (!std::isfinite(g)) throw NonFiniteError("non-finite gradient in tensor " + params[t].name);
      sq += static_cast<double>(g) * g;
    }
  }
  const double norm = std::sqrt(sq);
  const double scale = cfg.clip > 0 && norm > cfg.clip ? cfg.clip / norm : 1.0;

  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.values.size(), 0.0f);
      state.v.emplace_back(p.values.size(), 0.0f);
    }
  }
  ++state.step;
  const double c1 = 1 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto& w = params[t].values;
    auto& m = state.m[t];
    auto& v = state.v[t];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = grads[t][i] * scale;
      const double mi = cfg.beta1 * m[i] + (1 - cfg.beta1) * g;
      const double vi = cfg.beta2 * v[i] + (1 - cfg.beta2) * g * g;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      w[i] = static_cast<float>(w[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps));
    }
  }
  return norm;
}

BatchResult batch_gradients(const model::ModelParams& params, std::span<const data::FormattedSample> positives,
                            std::span<const data::ConflictingSample> negatives, double alpha, objectives::ULMode mode,
                            data::Template tmpl, int chunk_size) {
  if (positives.empty()) throw std::invalid_argument("batch_gradients: no positive samples");
  std::size_t token_count = 0;
  for (const auto& f : positives) token_count += f.target.size();
  const bool use_ul = alpha > 0 && !negatives.empty();

  struct Task {
    bool negative;
    std::size_t begin, end;
  };
  std::vector<Task> tasks;
  const auto cs = static_cast<std::size_t>(chunk_size);
  for (std::size_t i = 0; i < positives.size(); i += cs) tasks.push_back({false, i, std::min(i + cs, positives.size())});
  if (use_ul)
    for (std::size_t i = 0; i < negatives.size(); i += cs) tasks.push_back({true, i, std::min(i + cs, negatives.size())});

  struct Out {
    double raw = 0;  // nll sum or ul sum
    std::vector<std::vector<float>> grads;
  };
  std::vector<Out> outs(tasks.size());
  parallel_for(tasks.size(), [&](std::size_t k) {
    const auto& task = tasks[k];
    ad::Graph<float> g;
    auto b = model::bind(g, params, true);
    std::vector<ad::Tensor<float>> terms;
    for (std::size_t i = task.begin; i < task.end; ++i)
      terms.push_back(task.negative ? objectives::ul_sample_loss(g, b, negatives[i], mode, tmpl)
                                    : objectives::sample_nll_sum(g, b, positives[i]));
    auto raw = ad::sum(terms.size() == 1 ? terms.front() : ad::concat_last<float>(terms));
    const double weight = task.negative ? alpha / static_cast<double>(negatives.size())
                                        : 1.0 / static_cast<double>(token_count);
    auto grads = g.backward(ad::scale(raw, weight));
    outs[k].raw = raw.item();
    for (const auto& leaf : b.leaves) {
      auto gs = grads.at(leaf);
      outs[k].grads.emplace_back(gs.begin(), gs.end());
    }
  });

  BatchResult r;
  double nll = 0, ul = 0;
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    (tasks[k].negative ? ul : nll) += outs[k].raw;
    if (k == 0) {
      r.grads = std::move(outs[k].grads);
      continue;
    }
    for (std::size_t t = 0; t < r.grads.size(); ++t)
      for (std::size_t i = 0; i < r.grads[t].size(); ++i) r.grads[t][i] += outs[k].grads[t][i];
  }
  const double mle = nll / static_cast<double>(token_count);
  const double ul_mean = use_ul ? ul / static_cast<double>(negatives.size()) : 0.0;
  r.loss = objectives::mixed_loss(mle, ul_mean, alpha);
  r.loss.mle_count = token_count;
  r.loss.ul_count = use_ul ? negatives.size() : 0;
  return r;
}

std::filesystem::path step_checkpoint_name(std::int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_step%04lld.bin", static_cast<long long>(step));
  return buf;
}

namespace {

class RunWriter {
 public:
  RunWriter(const std::filesystem::path& dir, const TrainConfig& config, const model::ModelConfig& mc) : dir_(dir) {
    if (dir_.empty()) return;
    std::filesystem::create_directories(dir_);
    std::ofstream(dir_ / "config.json") << json{{"train", to_json(config)}, {"model", model::to_json(mc)}}.dump(2)
                                        << "\n";
    log_.open(dir_ / "log.csv", std::ios::trunc);
    if (!log_) throw std::runtime_error("cannot write " + (dir_ / "log.csv").string());
    log_ << "step,lr,mle,ul,total,alpha,grad_norm\n";
  }

  void row(const LogRow& r) {
    if (dir_.empty()) return;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", static_cast<long long>(r.step), r.lr,
                  r.loss.mle, r.loss.ul, r.loss.total, r.loss.alpha, r.grad_norm);
    log_ << buf;
    log_.flush();
  }

  void save(const std::filesystem::path& name, const model::Checkpoint& ckpt) {
    if (!dir_.empty()) model::save_checkpoint(dir_ / name, ckpt);
  }

 private:
  std::filesystem::path dir_;
  std::ofstream log_;
};

json checkpoint_metadata(const TrainConfig& config, std::int64_t step) {
  return {{"stage", config.stage}, {"step", step}, {"train_config", to_json(config)}};
}

// Runs one optimizer step; on a non-finite loss or gradient, stores the
// parameters from before the step as last_good.bin and rethrows.
LogRow guarded_step(model::ModelParams& params, OptimizerState& opt, const BatchResult& batch, double lr,
                    const TrainConfig& config, std::int64_t step, RunWriter& writer) {
  const AdamConfig adam{config.beta1, config.beta2, config.eps, config.grad_clip};
  auto before = params;
  try {
    if (!std::isfinite(batch.loss.total))
      throw NonFiniteError("non-finite loss " + std::to_string(batch.loss.total));
    LogRow row{step, lr, batch.loss, 0.0};
    row.grad_norm = adam_step(params.tensors, batch.grads, opt, lr, adam);
    return row;
  } catch (const NonFiniteError& e) {
    writer.save("last_good.bin", {before, checkpoint_metadata(config, step - 1)});
    throw NonFiniteError("training diverged at step " + std::to_string(step) + ": " + e.what());
  }
}

std::vector<data::Direction> directions_of(std::span<const data::InstructionSample> samples) {
  std::set<data::Direction> s;
  for (const auto& x : samples) s.insert(x.direction);
  return {s.begin(), s.end()};
}

}  // namespace

std::int64_t stage1_total_steps(const TrainConfig& config, std::size_t num_samples) {
  const auto per_epoch = (num_samples + config.batch_size - 1) / config.batch_size;
  return static_cast<std::int64_t>(per_epoch) * config.epochs;
}

TrainResult train_stage1(const TrainConfig& config, std::span<const data::InstructionSample> train,
                         const model::ModelConfig& model_config, const std::filesystem::path& run_dir,
                         const StepCallback& on_step) {
  config.validate();
  if (config.stage != 1) throw std::invalid_argument("train_stage1: config is for stage " + std::to_string(config.stage));
  if (train.empty()) throw std::invalid_argument("train_stage1: empty training set");
  model_config.validate();

  std::vector<data::FormattedSample> formatted;
  formatted.reserve(train.size());
  for (const auto& s : train)
    formatted.push_back(data::format_sample(s, config.tmpl, {}, static_cast<std::size_t>(model_config.max_context)));

  RunWriter writer(run_dir, config, model_config);
  TrainResult result;
  model::ModelParams params = model::init_params(model_config, model_config.seed);
  OptimizerState opt;
  const auto total = stage1_total_steps(config, train.size());
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(train.size());
  std::int64_t step = 0;
  std::vector<data::FormattedSample> batch;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i)
        batch.push_back(formatted[order[i]]);
      ++step;
      const double lr = lr_schedule(step, total, config.warmup_ratio, config.base_lr);
      auto grads = batch_gradients(params, batch, {}, 0.0, config.ul_mode, config.tmpl, config.chunk_size);
      auto row = guarded_step(params, opt, grads, lr, config, step, writer);
      writer.row(row);
      if (on_step) on_step(row);
      result.log.push_back(row);
    }
  }
  result.checkpoint = {params, checkpoint_metadata(config, step)};
  writer.save("final.bin", result.checkpoint);
  return result;
}

TrainResult train_stage2(const TrainConfig& config, const model::Checkpoint& stage1,
                         std::span<const data::InstructionSample> train, const data::Vocabulary& vocab,
                         const std::filesystem::path& run_dir, const StepCallback& on_step) {
  config.validate();
  if (config.stage != 2) throw std::invalid_argument("train_stage2: config is for stage " + std::to_string(config.stage));
  if (train.empty()) throw std::invalid_argument("train_stage2: empty training set");
  const auto& mc = stage1.params.config;
  if (mc.vocab_size != vocab.size())
    throw std::invalid_argument("train_stage2: checkpoint vocabulary " + std::to_string(mc.vocab_size) +
                                " does not match data vocabulary " + std::to_string(vocab.size()));
  const auto directions = directions_of(train);
  if (directions.size() < 2) throw std::invalid_argument("train_stage2: need at least two training directions");

  RunWriter writer(run_dir, config, mc);
  TrainResult result;
  model::ModelParams params = stage1.params;
  OptimizerState opt;
  // Separate streams so the data order does not depend on alpha or pool settings.
  std::mt19937_64 order_rng(config.seed);
  std::mt19937_64 conflict_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(train.size());
  std::size_t cursor = order.size();

  std::vector<data::FormattedSample> positives;
  std::vector<data::ConflictingSample> negatives;
  for (std::int64_t step = 1; step <= config.steps; ++step) {
    positives.clear();
    negatives.clear();
    for (int b = 0; b < config.batch_size; ++b) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      const auto& s = train[order[cursor++]];
      positives.push_back(data::format_sample(s, config.tmpl, {}, static_cast<std::size_t>(mc.max_context)));
      negatives.push_back(
          data::make_conflicting(s, directions, vocab, conflict_rng, config.conflict_pool, config.conflict_kind));
    }
    const double lr = lr_schedule(step, config.steps, config.warmup_ratio, config.base_lr);
    auto grads = batch_gradients(params, positives, negatives, config.alpha, config.ul_mode, config.tmpl,
                                 config.chunk_size);
    auto row = guarded_step(params, opt, grads, lr, config, step, writer);
    writer.row(row);
    if (on_step) on_step(row);
    result.log.push_back(row);
    if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0)
      writer.save(step_checkpoint_name(step), {params, checkpoint_metadata(config, step)});
  }
  result.checkpoint = {params, checkpoint_metadata(config, config.steps)};
  writer.save("final.bin", result.checkpoint);
  return result;
}

}  // namespace offtarget::train
