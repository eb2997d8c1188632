// offtarget: data generation, two-stage training, evaluation, ablations.
// Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "offtarget/experiment.h"

using namespace offtarget;

namespace {

exp::Logger stderr_logger() {
  const auto start = std::chrono::steady_clock::now();
  return [start](const std::string& msg) {
    const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::fprintf(stderr, "[%7.1fs] %s\n", t, msg.c_str());
  };
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Off-target zero-shot translation lab"};
  app.require_subcommand(1);

  std::string config_path, out_dir, data_dir, from, ckpt, strategy = "greedy", tmpl = "pre-ins", what;
  int stage = 0, k = 0, beam_size = 4, contrast_target = -1;
  double lambda = 0.5;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic corpus");
  gen->add_option("--config", config_path, "Experiment config (JSON)");
  gen->add_option("--out", out_dir, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Run stage 1 or stage 2 fine-tuning");
  train->add_option("--stage", stage, "1 or 2")->required()->check(CLI::IsMember({1, 2}));
  train->add_option("--config", config_path, "Experiment config (JSON)");
  train->add_option("--data", data_dir, "Data directory from gen-data")->required();
  train->add_option("--from", from, "Stage-1 checkpoint (stage 2 only)");
  train->add_option("--out", out_dir, "Run directory")->required();

  auto* ev = app.add_subcommand("eval", "Decode the test sets and score them");
  ev->add_option("--ckpt", ckpt, "Checkpoint")->required();
  ev->add_option("--data", data_dir, "Data directory")->required();
  ev->add_option("--strategy", strategy, "greedy|beam|contrastive")
      ->check(CLI::IsMember({"greedy", "beam", "contrastive"}));
  ev->add_option("--k", k, "In-context demonstrations")->check(CLI::NonNegativeNumber);
  ev->add_option("--template", tmpl, "pre-ins|post-ins")->check(CLI::IsMember({"pre-ins", "post-ins"}));
  ev->add_option("--beam-size", beam_size, "Beam width")->check(CLI::PositiveNumber);
  ev->add_option("--lambda", lambda, "Contrastive weight")->check(CLI::NonNegativeNumber);
  ev->add_option("--contrast-target", contrast_target, "Contrast language (-1: source language)");
  ev->add_option("--config", config_path, "Experiment config supplying the decode seed");
  ev->add_option("--out", out_dir, "Output directory")->required();

  auto* ab = app.add_subcommand("ablate", "Alpha grid or stage-2 step sweep");
  ab->add_option("--what", what, "alpha|steps")->required()->check(CLI::IsMember({"alpha", "steps"}));
  ab->add_option("--config", config_path, "Experiment config (JSON)");
  ab->add_option("--data", data_dir, "Data directory")->required();
  ab->add_option("--from", from, "Stage-1 checkpoint")->required();
  ab->add_option("--out", out_dir, "Output directory")->required();

  auto* repro = app.add_subcommand("repro", "Full study: data, both stages, evaluations, ablations");
  repro->add_option("--config", config_path, "Experiment config (JSON)");
  repro->add_option("--out", out_dir, "Output directory (default: config out_dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  const auto log = stderr_logger();
  try {
    const auto cfg = exp::load_experiment_config(config_path);
    if (*gen) {
      const auto d = exp::cmd_gen_data(cfg, out_dir);
      std::cout << "train " << d.train.size() << "\ntest_supervised " << d.test_supervised.size() << "\ntest_zeroshot "
                << d.test_zero_shot.size() << "\ndemos " << d.demos.size() << "\n";
    } else if (*train) {
      std::optional<std::filesystem::path> from_path;
      if (!from.empty()) from_path = from;
      auto r = exp::cmd_train(stage, cfg, data_dir, from_path, out_dir, log);
      std::cout << "final mle " << r.log.back().loss.mle << " after " << r.log.size() << " steps\n";
    } else if (*ev) {
      auto dc = cfg.decode;
      dc.strategy = decode::strategy_from_string(strategy);
      dc.k_shot = k;
      dc.tmpl = data::template_from_string(tmpl);
      dc.beam_size = beam_size;
      dc.lambda_lang = lambda;
      dc.contrast_target = contrast_target;
      auto e = exp::cmd_eval(ckpt, data_dir, dc, out_dir, log);
      std::cout << eval::to_csv(e.report);
    } else if (*ab) {
      auto rows = exp::cmd_ablate(what, cfg, data_dir, from, out_dir, log);
      std::cout << exp::ablation_csv(rows, what == "alpha" ? "alpha" : "step");
    } else if (*repro) {
      exp::cmd_repro(cfg, out_dir.empty() ? std::filesystem::path(cfg.out_dir) : std::filesystem::path(out_dir), log);
      std::cout << "report written to " << (out_dir.empty() ? cfg.out_dir : out_dir) << "/report.json\n";
    }
  } catch (const exp::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const data::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
