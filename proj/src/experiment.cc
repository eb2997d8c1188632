#include "offtarget/experiment.h"

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <cerrno>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace offtarget::exp {

using nlohmann::json;

namespace {

void note(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

// Re-labels config errors from lower layers as usage errors.
template <typename Fn>
auto as_usage(const std::string& what, Fn&& fn) {
  try {
    return fn();
  } catch (const json::exception& e) {
    throw UsageError(what + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw UsageError(what + ": " + e.what());
  }
}

json with_seed(json j, std::uint64_t seed) {
  if (!j.is_object()) j = json::object();
  if (!j.contains("seed")) j["seed"] = seed;
  return j;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

ExperimentConfig experiment_config_from_json(const json& j) {
  return as_usage("experiment config", [&] {
    if (!j.is_object()) throw UsageError("top level must be a JSON object");
    ExperimentConfig c;
    c.seed = j.value("seed", c.seed);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.post_ins_baseline = j.value("post_ins_baseline", c.post_ins_baseline);
    if (j.contains("alpha_grid")) c.alpha_grid = j.at("alpha_grid").get<std::vector<double>>();
    for (double a : c.alpha_grid)
      if (!(a >= 0)) throw UsageError("alpha_grid values must be non-negative");

    c.corpus = data::corpus_config_from_json(with_seed(j.value("corpus", json::object()), c.seed)).resolved();
    const data::Vocabulary vocab(c.corpus.num_languages, c.corpus.symbols_per_language);
    auto mj = with_seed(j.value("model", json::object()), c.seed);
    if (!mj.contains("vocab_size")) mj["vocab_size"] = vocab.size();
    c.model = model::model_config_from_json(mj);
    c.model.validate();
    if (c.model.vocab_size != vocab.size())
      throw UsageError("model vocab_size " + std::to_string(c.model.vocab_size) + " does not match corpus vocabulary " +
                       std::to_string(vocab.size()));
    c.stage1 = train::train_config_from_json(with_seed(j.value("stage1", json::object()), c.seed), 1);
    c.stage2 = train::train_config_from_json(with_seed(j.value("stage2", json::object()), c.seed), 2);
    if (c.stage1.stage != 1 || c.stage2.stage != 2) throw UsageError("stage1/stage2 sections name the wrong stage");
    c.decode = decode::decode_config_from_json(with_seed(j.value("decode", json::object()), c.seed));
    return c;
  });
}

json to_json(const ExperimentConfig& c) {
  return {{"seed", c.seed},
          {"out_dir", c.out_dir},
          {"corpus", data::to_json(c.corpus)},
          {"model", model::to_json(c.model)},
          {"stage1", train::to_json(c.stage1)},
          {"stage2", train::to_json(c.stage2)},
          {"decode", decode::to_json(c.decode)},
          {"alpha_grid", c.alpha_grid},
          {"post_ins_baseline", c.post_ins_baseline}};
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  if (path.empty()) return experiment_config_from_json(json::object());
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return experiment_config_from_json(j);
}

Dataset dataset_from_corpus(const data::Corpus& corpus) {
  Dataset d;
  d.config = corpus.config;
  d.vocab = data::Vocabulary(corpus.config.num_languages, corpus.config.symbols_per_language);
  d.languages = corpus.languages;
  d.train = corpus.train;
  d.test_supervised = corpus.test_supervised;
  d.test_zero_shot = corpus.test_zero_shot;
  d.demos = corpus.demos;
  return d;
}

void write_dataset(const fs::path& dir, const Dataset& d) {
  fs::create_directories(dir);
  data::write_jsonl(dir / "train.jsonl", d.train);
  data::write_jsonl(dir / "test_supervised.jsonl", d.test_supervised);
  data::write_jsonl(dir / "test_zeroshot.jsonl", d.test_zero_shot);
  data::write_jsonl(dir / "demos.jsonl", d.demos);
  write_text(dir / "vocab.json", data::manifest_json(d.vocab, d.languages).dump(2) + "\n");
  write_text(dir / "corpus_config.json", data::to_json(d.config).dump(2) + "\n");
}

Dataset read_dataset(const fs::path& dir) {
  for (const char* f : {"train.jsonl", "test_supervised.jsonl", "test_zeroshot.jsonl", "vocab.json"})
    if (!fs::exists(dir / f)) throw UsageError("data directory " + dir.string() + " lacks " + f);
  Dataset d;
  {
    std::ifstream in(dir / "vocab.json");
    auto [vocab, langs] = data::manifest_from_json(json::parse(in));
    d.vocab = vocab;
    d.languages = std::move(langs);
  }
  if (fs::exists(dir / "corpus_config.json")) {
    std::ifstream in(dir / "corpus_config.json");
    d.config = data::corpus_config_from_json(json::parse(in));
  }
  d.train = data::read_jsonl(dir / "train.jsonl");
  d.test_supervised = data::read_jsonl(dir / "test_supervised.jsonl");
  d.test_zero_shot = data::read_jsonl(dir / "test_zeroshot.jsonl");
  if (fs::exists(dir / "demos.jsonl")) d.demos = data::read_jsonl(dir / "demos.jsonl");
  return d;
}

RunLock::RunLock(const fs::path& dir) : path_(dir / ".lock") {
  fs::create_directories(dir);
  for (int attempt = 0; attempt < 2; ++attempt) {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd >= 0) {
      const std::string pid = std::to_string(::getpid()) + "\n";
      if (::write(fd, pid.data(), pid.size()) < 0) { /* the lock holds even without the pid */ }
      ::close(fd);
      return;
    }
    if (errno != EEXIST) throw std::runtime_error("cannot create lock " + path_.string() + ": " + std::strerror(errno));
    // Reclaim a lock whose owner is gone.
    long owner = 0;
    std::ifstream(path_) >> owner;
    if (owner > 0 && (::kill(static_cast<pid_t>(owner), 0) == 0 || errno != ESRCH))
      throw std::runtime_error("run directory " + dir.string() + " is locked by process " + std::to_string(owner));
    fs::remove(path_);
  }
  throw std::runtime_error("cannot acquire lock " + path_.string());
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

Dataset cmd_gen_data(const ExperimentConfig& cfg, const fs::path& out, const Logger& log) {
  RunLock lock(out);
  const auto corpus = as_usage("corpus config", [&] { return data::make_corpus(cfg.corpus); });
  auto d = dataset_from_corpus(corpus);
  write_dataset(out, d);
  note(log, "train " + std::to_string(d.train.size()) + ", test_supervised " + std::to_string(d.test_supervised.size()) +
                ", test_zeroshot " + std::to_string(d.test_zero_shot.size()) + ", demos " +
                std::to_string(d.demos.size()));
  return d;
}

namespace {

train::StepCallback progress(const Logger& log, const std::string& tag, std::int64_t every) {
  if (!log) return {};
  return [log, tag, every](const train::LogRow& r) {
    if (r.step % every != 0) return;
    std::ostringstream os;
    os << tag << " step " << r.step << " lr " << r.lr << " mle " << r.loss.mle;
    if (r.loss.alpha > 0) os << " ul " << r.loss.ul;
    log(os.str());
  };
}

train::TrainResult run_stage(int stage, const ExperimentConfig& cfg, const Dataset& d, const model::Checkpoint* from,
                             const fs::path& out, const Logger& log) {
  if (stage == 1) return train::train_stage1(cfg.stage1, d.train, cfg.model, out, progress(log, "stage1", 50));
  return train::train_stage2(cfg.stage2, *from, d.train, d.vocab, out, progress(log, "stage2", 10));
}

model::Checkpoint load_ckpt(const fs::path& p) {
  if (!fs::exists(p)) throw UsageError("checkpoint " + p.string() + " does not exist");
  return model::load_checkpoint(p);
}

eval::Evaluation evaluate_ckpt(const model::Checkpoint& ckpt, const std::string& ckpt_id, const Dataset& d,
                               const decode::DecodeConfig& dc) {
  return eval::evaluate(ckpt.params, {&d.test_supervised, &d.test_zero_shot, &d.demos}, d.vocab, dc,
                        {{"checkpoint", ckpt_id}, {"seed", dc.seed}});
}

AblationRow ablation_row(double x, const eval::EvalReport& r) {
  return {x, r.zero_shot.otr, r.zero_shot.bleu, r.supervised.bleu, r.supervised.otr};
}

json ablation_json(const std::vector<AblationRow>& rows) {
  json a = json::array();
  for (const auto& r : rows)
    a.push_back({{"x", r.x},
                 {"zero_shot_otr", r.zero_shot_otr},
                 {"zero_shot_bleu", r.zero_shot_bleu},
                 {"supervised_bleu", r.supervised_bleu},
                 {"supervised_otr", r.supervised_otr}});
  return a;
}

std::vector<AblationRow> ablate_alpha(const ExperimentConfig& cfg, const Dataset& d, const model::Checkpoint& s1,
                                      const fs::path& out, const Logger& log) {
  std::vector<AblationRow> rows;
  for (double alpha : cfg.alpha_grid) {
    auto c = cfg;
    c.stage2.alpha = alpha;
    c.stage2.checkpoint_every = 0;
    const auto dir = out / ("alpha_" + fmt("%g", alpha));
    note(log, "alpha ablation: alpha " + fmt("%g", alpha));
    auto r = train::train_stage2(c.stage2, s1, d.train, d.vocab, dir);
    auto e = evaluate_ckpt(r.checkpoint, model::file_fingerprint(dir / "final.bin"), d, cfg.decode);
    eval::write_report(dir / "eval", e, cfg.decode);
    rows.push_back(ablation_row(alpha, e.report));
  }
  return rows;
}

std::vector<AblationRow> ablate_steps(const ExperimentConfig& cfg, const Dataset& d, const model::Checkpoint& s1,
                                      const fs::path& out, const Logger& log) {
  auto c = cfg;
  if (c.stage2.checkpoint_every <= 0) c.stage2.checkpoint_every = 10;
  const auto run = out / "stage2";
  train::train_stage2(c.stage2, s1, d.train, d.vocab, run, progress(log, "steps ablation", 10));
  std::vector<AblationRow> rows;
  for (int step = c.stage2.checkpoint_every; step <= c.stage2.steps; step += c.stage2.checkpoint_every) {
    const auto path = run / train::step_checkpoint_name(step);
    auto e = evaluate_ckpt(model::load_checkpoint(path), model::file_fingerprint(path), d, cfg.decode);
    rows.push_back(ablation_row(step, e.report));
    note(log, "steps ablation: step " + std::to_string(step) + " zero-shot otr " + fmt("%.3f", e.report.zero_shot.otr));
  }
  return rows;
}

}  // namespace

train::TrainResult cmd_train(int stage, const ExperimentConfig& cfg, const fs::path& data_dir,
                             const std::optional<fs::path>& from, const fs::path& out, const Logger& log) {
  if (stage != 1 && stage != 2) throw UsageError("--stage must be 1 or 2");
  if (stage == 2 && !from) throw UsageError("stage 2 requires --from <stage-1 checkpoint>");
  const auto d = read_dataset(data_dir);
  std::optional<model::Checkpoint> s1;
  if (stage == 2) s1 = load_ckpt(*from);
  RunLock lock(out);
  return as_usage("train", [&] { return run_stage(stage, cfg, d, s1 ? &*s1 : nullptr, out, log); });
}

eval::Evaluation cmd_eval(const fs::path& ckpt_path, const fs::path& data_dir, const decode::DecodeConfig& dc,
                          const fs::path& out, const Logger& log) {
  const auto ckpt = load_ckpt(ckpt_path);
  const auto d = read_dataset(data_dir);
  as_usage("decode config", [&] {
    dc.validate();
    return 0;
  });
  RunLock lock(out);
  auto e = evaluate_ckpt(ckpt, model::file_fingerprint(ckpt_path), d, dc);
  eval::write_report(out, e, dc);
  note(log, "supervised otr " + fmt("%.4f", e.report.supervised.otr) + " bleu " + fmt("%.2f", e.report.supervised.bleu) +
                "; zero-shot otr " + fmt("%.4f", e.report.zero_shot.otr) + " bleu " +
                fmt("%.2f", e.report.zero_shot.bleu));
  return e;
}

std::string ablation_csv(const std::vector<AblationRow>& rows, const std::string& x_name) {
  std::string s = x_name + ",zero_shot_otr,zero_shot_bleu,supervised_bleu,supervised_otr\n";
  for (const auto& r : rows)
    s += fmt("%g", r.x) + "," + fmt("%.6f", r.zero_shot_otr) + "," + fmt("%.4f", r.zero_shot_bleu) + "," +
         fmt("%.4f", r.supervised_bleu) + "," + fmt("%.6f", r.supervised_otr) + "\n";
  return s;
}

std::vector<AblationRow> cmd_ablate(const std::string& what, const ExperimentConfig& cfg, const fs::path& data_dir,
                                    const fs::path& stage1_ckpt, const fs::path& out, const Logger& log) {
  if (what != "alpha" && what != "steps") throw UsageError("--what must be alpha or steps");
  const auto s1 = load_ckpt(stage1_ckpt);
  const auto d = read_dataset(data_dir);
  RunLock lock(out);
  auto rows = what == "alpha" ? ablate_alpha(cfg, d, s1, out, log) : ablate_steps(cfg, d, s1, out, log);
  write_text(out / "ablation.csv", ablation_csv(rows, what == "alpha" ? "alpha" : "step"));
  return rows;
}

json cmd_repro(const ExperimentConfig& cfg, const fs::path& out, const Logger& log) {
  RunLock lock(out);
  write_text(out / "config.json", to_json(cfg).dump(2) + "\n");

  note(log, "generating data");
  const auto d = dataset_from_corpus(as_usage("corpus config", [&] { return data::make_corpus(cfg.corpus); }));
  write_dataset(out / "data", d);

  note(log, "stage 1");
  const auto s1 = run_stage(1, cfg, d, nullptr, out / "stage1", log).checkpoint;
  const auto s1_id = model::file_fingerprint(out / "stage1" / "final.bin");
  note(log, "stage 2");
  const auto s2 = run_stage(2, cfg, d, &s1, out / "stage2", log).checkpoint;
  const auto s2_id = model::file_fingerprint(out / "stage2" / "final.bin");

  json report{{"config", to_json(cfg)}, {"checkpoints", {{"stage1", s1_id}, {"stage2", s2_id}}}};
  std::string summary = "model,setting,supervised_otr,supervised_bleu,supervised_token_accuracy,zero_shot_otr,"
                        "zero_shot_bleu,zero_shot_token_accuracy\n";
  auto run_eval = [&](const std::string& model_name, const std::string& setting, const model::Checkpoint& ck,
                      const std::string& id, const decode::DecodeConfig& dc) {
    note(log, "evaluating " + model_name + " / " + setting);
    auto e = evaluate_ckpt(ck, id, d, dc);
    eval::write_report(out / "eval" / (model_name + "_" + setting), e, dc);
    report["evaluations"][model_name][setting] = eval::to_json(e.report);
    const auto& s = e.report.supervised;
    const auto& z = e.report.zero_shot;
    summary += model_name + "," + setting + "," + fmt("%.6f", s.otr) + "," + fmt("%.4f", s.bleu) + "," +
               fmt("%.6f", s.token_accuracy) + "," + fmt("%.6f", z.otr) + "," + fmt("%.4f", z.bleu) + "," +
               fmt("%.6f", z.token_accuracy) + "\n";
    return e.report;
  };

  auto dc = cfg.decode;
  dc.strategy = decode::Strategy::kGreedy;
  dc.k_shot = 0;
  run_eval("stage1", "greedy", s1, s1_id, dc);
  run_eval("stage2", "greedy", s2, s2_id, dc);
  auto beam = dc;
  beam.strategy = decode::Strategy::kBeam;
  run_eval("stage1", "beam", s1, s1_id, beam);
  run_eval("stage2", "beam", s2, s2_id, beam);
  auto contrastive = dc;
  contrastive.strategy = decode::Strategy::kContrastive;
  run_eval("stage1", "contrastive", s1, s1_id, contrastive);
  for (int k : {1, 5}) {
    auto shot = dc;
    shot.k_shot = k;
    run_eval("stage1", std::to_string(k) + "-shot", s1, s1_id, shot);
  }
  if (cfg.post_ins_baseline) {
    note(log, "stage 1 on post-ins prompts");
    auto c = cfg;
    c.stage1.tmpl = data::Template::kPostIns;
    const auto post = run_stage(1, c, d, nullptr, out / "stage1_post_ins", log).checkpoint;
    auto post_dc = dc;
    post_dc.tmpl = data::Template::kPostIns;
    run_eval("stage1_post_ins", "greedy", post, model::file_fingerprint(out / "stage1_post_ins" / "final.bin"), post_dc);
  }

  note(log, "alpha ablation");
  auto alpha_rows = ablate_alpha(cfg, d, s1, out / "ablate_alpha", log);
  write_text(out / "ablate_alpha" / "ablation.csv", ablation_csv(alpha_rows, "alpha"));
  note(log, "steps ablation");
  auto step_rows = ablate_steps(cfg, d, s1, out / "ablate_steps", log);
  write_text(out / "ablate_steps" / "ablation.csv", ablation_csv(step_rows, "step"));
  report["ablations"] = {{"alpha", ablation_json(alpha_rows)}, {"steps", ablation_json(step_rows)}};

  write_text(out / "report.json", report.dump(2) + "\n");
  write_text(out / "report.csv", summary);
  return report;
}

}  // namespace offtarget::exp
