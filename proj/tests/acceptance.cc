// Acceptance run: one PASS/FAIL line per criterion. Criteria 4-10 come from
// two full repro pipelines with the default config and seed 0.
//
// usage: acceptance [work_dir] [--no-pipeline]   (default dir: <tmp>/offtarget_acceptance)

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>

#include "offtarget/eval.h"
#include "offtarget/experiment.h"
#include "offtarget/objectives.h"
#include "support/bleu_oracle.h"
#include "support/model_gradcheck.h"
#include "support/opcode_gradcheck.h"

using namespace offtarget;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

int failures = 0;

void report(int n, const std::string& name, bool ok, const std::string& detail) {
  std::printf("[%s] %2d %s: %s\n", ok ? "PASS" : "FAIL", n, name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

void criterion_gradients() {
  const auto start = Clock::now();
  double op_worst = 0;
  std::string worst_op;
  for (const auto& oc : testing::opcode_cases()) {
    const double e = testing::opcode_max_rel_error(oc, 10, 1);
    if (e > op_worst) op_worst = e, worst_op = oc.name;
  }

  // Full model at the default width, short sequences so differences stay cheap.
  const data::Vocabulary vocab(4, 16);
  model::ModelConfig cfg;
  const data::InstructionSample pos{{0, 2}, vocab.instruction({0, 2}), {13, 17, 14, 20}, {52, 46, 49, 45}, "train"};
  data::ConflictingSample neg;
  neg.base = pos;
  neg.conflicting_direction = {0, 1};
  neg.conflicting_ins = vocab.instruction({0, 1});
  data::ConflictingSample neg2 = neg;
  neg2.base = {{3, 0}, vocab.instruction({3, 0}), {61, 70, 66}, {21, 30, 26}, "train"};
  neg2.conflicting_direction = {2, 0};
  neg2.conflicting_ins = vocab.instruction({2, 0});
  const auto f = data::format_sample(pos, data::Template::kPreIns, {}, cfg.max_context);
  const auto full = f.full();
  const data::Tokens inputs(full.begin(), full.end() - 1), next(full.begin() + 1, full.end());
  const std::vector<std::uint8_t> mask(f.loss_mask.begin() + 1, f.loss_mask.end());

  double model_worst = 0;
  std::size_t coords = 0;
  const std::vector<data::ConflictingSample> negatives{neg, neg2};
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    // Mild perturbation: default-scale weights give vanishing gradients, large ones saturate softmax.
    auto params = model::init_params(cfg, seed).cast<double>();
    std::mt19937_64 rng(seed + 100);
    std::normal_distribution<double> nd(0.0, 0.1);
    for (auto& t : params.tensors)
      for (auto& v : t.values) v += nd(rng);
    auto mle = testing::model_grad_check(
        params,
        [&](ad::Graph<double>& g, const model::BoundParams<double>& b) {
          return objectives::mle_loss(model::forward(g, b, {inputs}, data::Vocabulary::kPad), next, mask);
        },
        200, seed);
    model_worst = std::max(model_worst, mle.max_rel_error);
    coords += mle.coords;
    for (auto mode : {objectives::ULMode::kSequence, objectives::ULMode::kToken}) {
      auto ul = testing::model_grad_check(
          params, [&](auto& g, const auto& b) { return objectives::ul_loss<double>(g, b, negatives, mode); }, 200,
          seed + 10);
      model_worst = std::max(model_worst, ul.max_rel_error);
      coords += ul.coords;
    }
  }
  const double t = seconds_since(start);
  report(1, "gradient correctness", op_worst < 1e-6 && model_worst < 1e-4 && t < 120,
         "opcode max rel " + fmt("%.2e", op_worst) + " (" + worst_op + "), model max rel " + fmt("%.2e", model_worst) +
             " over " + std::to_string(coords) + " coords, " + fmt("%.1fs", t));
}

void criterion_loss_oracles() {
  ad::Graph<double> g;
  const double uniform = objectives::mle_loss(g.leaf({1, 4}, {0, 0, 0, 0}), {2}, {1}).item();
  const double half = objectives::ul_sequence_term(g.leaf({1}, {std::log(0.5)})).item();
  const double quarter = objectives::ul_sequence_term(g.leaf({1}, {std::log(0.25)})).item();
  const double mixed = objectives::mixed_loss(1.0, 0.5, 0.05).total;
  const bool ok = std::abs(uniform - std::log(4.0)) < 1e-6 && std::abs(half - std::log(2.0)) < 1e-6 &&
                  std::abs(quarter - 0.287682) < 1e-6 && mixed == 1.025;
  report(2, "loss formula oracles", ok,
         "uniform " + fmt("%.9f", uniform) + ", P=0.5 " + fmt("%.9f", half) + ", P=0.25 " + fmt("%.9f", quarter) +
             ", mixed " + fmt("%.17g", mixed));
}

void criterion_bleu() {
  std::mt19937_64 rng(2024);
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<eval::Tokens> hyps, refs;
    const int pairs = 1 + rng() % 5;
    for (int s = 0; s < pairs; ++s) {
      eval::Tokens r(4 + rng() % 9), h;
      for (auto& t : r) t = 13 + rng() % 5;
      for (auto t : r)
        if (rng() % 6) h.push_back(rng() % 5 ? t : 13 + rng() % 5);
      hyps.push_back(h);
      refs.push_back(r);
    }
    worst = std::max(worst, std::abs(eval::bleu(hyps, refs) - testing::brute_bleu(hyps, refs, 4)));
  }
  const double self = eval::bleu({{13, 14, 15, 16, 17}}, {{13, 14, 15, 16, 17}});
  const double hand = eval::bleu({{1, 2}}, {{1, 2, 3}}, 2);
  report(3, "bleu oracle", worst < 1e-9 && self == 100.0 && std::abs(hand - 60.653) < 1e-3,
         "max |diff| " + fmt("%.2e", worst) + ", bleu(h,h) " + fmt("%.6f", self) + ", hand " + fmt("%.4f", hand));
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct RunTiming {
  double stage1 = 0, total = 0;
};

RunTiming run_repro(const fs::path& out) {
  fs::remove_all(out);
  std::map<std::string, double> marks;
  const auto start = Clock::now();
  exp::cmd_repro(exp::ExperimentConfig{}, out, [&](const std::string& msg) {
    const double t = seconds_since(start);
    marks.emplace(msg, t);
    std::fprintf(stderr, "[%7.1fs] %s\n", t, msg.c_str());
  });
  RunTiming r;
  r.total = seconds_since(start);
  r.stage1 = marks.at("stage 2") - marks.at("stage 1");
  return r;
}

const json& agg(const json& report, const std::string& model, const std::string& setting, const std::string& group) {
  return report.at("evaluations").at(model).at(setting).at("aggregates").at(group);
}

void pipeline_criteria(const fs::path& work) {
  const auto a = run_repro(work / "run_a");
  std::fprintf(stderr, "first pipeline: %.1fs\n", a.total);
  const json r = json::parse(slurp(work / "run_a" / "report.json"));

  const double s1_sup_acc = agg(r, "stage1", "greedy", "supervised").at("token_accuracy");
  const double s1_sup_otr = agg(r, "stage1", "greedy", "supervised").at("otr");
  const double s1_zs_otr = agg(r, "stage1", "greedy", "zero_shot").at("otr");
  const double s1_zs_bleu = agg(r, "stage1", "greedy", "zero_shot").at("bleu");
  const double s1_sup_bleu = agg(r, "stage1", "greedy", "supervised").at("bleu");
  report(4, "stage-1 phenomenon", s1_sup_acc >= 0.90 && s1_sup_otr <= 0.02 && s1_zs_otr >= 0.30 && a.stage1 <= 600,
         "supervised acc " + fmt("%.4f", s1_sup_acc) + ", supervised otr " + fmt("%.4f", s1_sup_otr) +
             ", zero-shot otr " + fmt("%.4f", s1_zs_otr) + ", stage 1 " + fmt("%.1fs", a.stage1));

  const double s2_zs_otr = agg(r, "stage2", "greedy", "zero_shot").at("otr");
  const double s2_zs_bleu = agg(r, "stage2", "greedy", "zero_shot").at("bleu");
  const double s2_sup_bleu = agg(r, "stage2", "greedy", "supervised").at("bleu");
  report(5, "stage-2 cure", s2_zs_otr <= 0.05 && s2_zs_bleu > s1_zs_bleu,
         "zero-shot otr " + fmt("%.4f", s1_zs_otr) + " -> " + fmt("%.4f", s2_zs_otr) + ", zero-shot bleu " +
             fmt("%.3f", s1_zs_bleu) + " -> " + fmt("%.3f", s2_zs_bleu));

  report(6, "supervised retention", std::abs(s2_sup_bleu - s1_sup_bleu) <= 2.0,
         "supervised bleu " + fmt("%.3f", s1_sup_bleu) + " -> " + fmt("%.3f", s2_sup_bleu));

  bool alpha_ok = true;
  std::string alpha_detail;
  for (const auto& row : r.at("ablations").at("alpha")) {
    const double x = row.at("x"), otr = row.at("zero_shot_otr");
    if (x == 0 && std::abs(otr - s1_zs_otr) > 0.05) alpha_ok = false;
    if (x >= 0.04 && otr > 0.05) alpha_ok = false;
    alpha_detail += (alpha_detail.empty() ? "" : ", ") + fmt("%g", x) + ":" + fmt("%.3f", otr);
  }
  report(7, "alpha ablation", alpha_ok, "zero-shot otr by alpha " + alpha_detail);

  bool steps_ok = true;
  double prev = s1_zs_otr, last = 1;
  std::string steps_detail;
  const auto& steps = r.at("ablations").at("steps");
  for (const auto& row : steps) {
    const double otr = row.at("zero_shot_otr");
    if (otr > prev + 0.05) steps_ok = false;
    prev = last = otr;
    steps_detail += (steps_detail.empty() ? "" : ", ") + fmt("%g", row.at("x").get<double>()) + ":" + fmt("%.3f", otr);
  }
  steps_ok = steps_ok && !steps.empty() && steps.back().at("x").get<double>() == 100 && last <= 0.05;
  report(8, "step ablation", steps_ok, "zero-shot otr by step " + steps_detail);

  const double c_otr = agg(r, "stage1", "contrastive", "zero_shot").at("otr");
  const double reduction = s1_zs_otr > 0 ? (s1_zs_otr - c_otr) / s1_zs_otr : 0;
  report(9, "contrastive baseline", s1_zs_otr > 0 && reduction >= 0.20,
         "zero-shot otr greedy " + fmt("%.4f", s1_zs_otr) + ", contrastive " + fmt("%.4f", c_otr) + " (" +
             fmt("%.1f%%", 100 * reduction) + " relative)");

  const auto b = run_repro(work / "run_b");
  std::fprintf(stderr, "second pipeline: %.1fs\n", b.total);
  const auto ja = slurp(work / "run_a" / "report.json");
  const auto jb = slurp(work / "run_b" / "report.json");
  report(10, "determinism", !ja.empty() && ja == jb,
         std::to_string(ja.size()) + " vs " + std::to_string(jb.size()) + " bytes, " + (ja == jb ? "identical" : "differ"));
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "offtarget_acceptance";
  bool pipeline = true;
  for (int i = 1; i < argc; ++i) {
    if (std::string(argv[i]) == "--no-pipeline")
      pipeline = false;
    else
      work = argv[i];
  }
  fs::create_directories(work);
  try {
    criterion_gradients();
    criterion_loss_oracles();
    criterion_bleu();
    if (pipeline) pipeline_criteria(work);
  } catch (const std::exception& e) {
    std::printf("[FAIL] acceptance aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
