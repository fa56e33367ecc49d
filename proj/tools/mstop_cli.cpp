#include <iostream>
#include <map>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "mstop/commands.h"

using namespace mstop;

namespace {

const std::map<std::string, PrizeMode> kPrizeModes{{"constant", PrizeMode::kConstant},
                                                   {"uniform", PrizeMode::kUniform}};
const std::map<std::string, BaselineKind> kBaselines{{"batch-mean", BaselineKind::kBatchMean},
                                                     {"greedy-rollout", BaselineKind::kGreedyRollout},
                                                     {"instance-aug", BaselineKind::kInstanceAug}};

void add_model_flags(CLI::App* cmd, DdtmConfig& m) {
  cmd->add_option("--d", m.d, "Embedding width")->capture_default_str();
  cmd->add_option("--heads", m.heads, "Attention heads")->capture_default_str();
  cmd->add_option("--ff-width", m.ff_width, "Encoder feed-forward width")->capture_default_str();
  cmd->add_option("--enc-layers", m.enc_layers, "Encoder layers")->capture_default_str();
  cmd->add_option("--dec-layers", m.dec_layers, "Decoder layers")->capture_default_str();
  cmd->add_option("--clip", m.clip, "Logit clipping constant")->capture_default_str();
}

void add_problem_flags(CLI::App* cmd, GenConfig& g) {
  cmd->add_option("--n", g.n, "Customers")->capture_default_str();
  cmd->add_option("--k", g.k, "Vehicles")->capture_default_str();
  cmd->add_option("--t-max", g.t_max, "Maximum route length")->capture_default_str();
  cmd->add_option("--prize-mode", g.prize_mode, "constant | uniform")
      ->transform(CLI::CheckedTransformer(kPrizeModes, CLI::ignore_case));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-start team orienteering: instances, exact solvers, DDTM training and evaluation"};
  app.set_config("--config", "", "INI/TOML config file; sections name subcommands, flags override");
  app.require_subcommand(1);
  std::size_t workers = 0;
  app.add_option("--workers", workers, "Worker threads (0 = all logical cores)")->capture_default_str();

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Write a JSONL dataset of random instances");
  g->add_option("--preset", gen.preset, "mstop10 | mstop20 | mstop50 | mstop70");
  g->add_option("--count", gen.count, "Number of instances")->capture_default_str();
  g->add_option("--seed", gen.config.seed, "Dataset seed")->capture_default_str();
  g->add_option("-o,--output", gen.output, "Dataset path")->required();
  add_problem_flags(g, gen.config);

  SolveArgs solve;
  std::size_t tsili_samples = solve.tsili.samples;
  auto* s = app.add_subcommand("solve", "Solve a dataset with the exact, brute-force or Tsiligirides solver");
  s->add_option("dataset", solve.dataset, "Dataset path")->required();
  s->add_option("--method", solve.method, "exact | brute | tsili")->capture_default_str();
  s->add_flag("--force", solve.force, "Run the exact solver beyond its size limit");
  s->add_option("--max-n", solve.max_n, "Exact solver size limit")->capture_default_str();
  s->add_option("--samples", tsili_samples, "Tsiligirides samples per instance")->capture_default_str();
  s->add_option("--seed", solve.seed, "Heuristic seed")->capture_default_str();
  s->add_flag("!--no-reference", solve.reference, "Skip the exact reference for tsili gaps");
  s->add_option("--out", solve.out_dir, "Output directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a DDTM policy with REINFORCE");
  add_model_flags(t, tr.model);
  add_problem_flags(t, tr.train.problem);
  t->add_option("--baseline", tr.train.baseline, "batch-mean | greedy-rollout | instance-aug")
      ->transform(CLI::CheckedTransformer(kBaselines, CLI::ignore_case));
  t->add_option("--alpha", tr.train.alpha, "Entropy weight")->capture_default_str();
  t->add_option("--epochs", tr.train.epochs, "Epochs")->capture_default_str();
  t->add_option("--steps", tr.train.steps_per_epoch, "Steps per epoch")->capture_default_str();
  t->add_option("--batch", tr.train.batch, "Trajectories per step")->capture_default_str();
  t->add_option("--augment", tr.train.augment, "Augmentation factor (1 or 8)")->capture_default_str();
  t->add_option("--lr", tr.train.lr, "Adam learning rate")->capture_default_str();
  t->add_option("--clip-norm", tr.train.clip_norm, "Gradient norm clip (<= 0 disables)")->capture_default_str();
  t->add_option("--validation-size", tr.train.validation_size, "Held-out instances")->capture_default_str();
  t->add_option("--data-seed", tr.train.data_seed)->capture_default_str();
  t->add_option("--model-seed", tr.train.model_seed)->capture_default_str();
  t->add_option("--rollout-seed", tr.train.rollout_seed)->capture_default_str();
  t->add_option("--out", tr.out_dir, "Output directory")->required();

  EvalArgs ev;
  DdtmConfig eval_model;
  std::vector<std::string> strategies{"greedy", "perm", "perm-aug"};
  auto* e = app.add_subcommand("eval", "Compare decoding strategies against a reference");
  e->add_option("dataset", ev.dataset, "Dataset path")->required();
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint (omit for random parameters)");
  e->add_option("--model-seed", ev.model_seed, "Initialization seed without a checkpoint")->capture_default_str();
  add_model_flags(e, eval_model);
  e->add_option("--strategies", strategies, "greedy, sampling, perm, perm-aug")->delimiter(',');
  e->add_option("--width", ev.infer.width, "Sampling width")->capture_default_str();
  e->add_option("--seed", ev.infer.seed, "Sampling seed")->capture_default_str();
  e->add_flag("!--no-greedy-in-sampling", ev.infer.include_greedy, "Exclude the greedy trajectory from sampling");
  e->add_option("--reference", ev.reference, "auto | exact | best")->capture_default_str();
  e->add_option("--max-n", ev.max_n, "Exact reference size limit")->capture_default_str();
  e->add_option("--out", ev.out_dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 1;
  }

  try {
    const Exec exec = configure_workers(workers);
    if (g->parsed()) {
      std::cout << cmd_generate(gen).line() << "\n";
    } else if (s->parsed()) {
      solve.exec = exec;
      solve.tsili.samples = tsili_samples;
      const auto r = cmd_solve(solve);
      std::cout << fmt::format("solve: method={} count={} mean_objective={:.4f} optimal={}/{}", solve.method, r.count,
                               r.mean_objective, r.optimal, r.count);
      if (r.has_reference) std::cout << fmt::format(" mean_gap={:.2f}%", r.mean_gap * 100.0);
      std::cout << fmt::format(" time={:.2f}s\n", r.wall_seconds);
    } else if (t->parsed()) {
      tr.train.exec = exec;
      cmd_train(tr, std::cout);
    } else if (e->parsed()) {
      ev.exec = exec;
      if (!e->get_option("--d")->empty() || !e->get_option("--heads")->empty() ||
          !e->get_option("--ff-width")->empty() || !e->get_option("--enc-layers")->empty() ||
          !e->get_option("--dec-layers")->empty() || !e->get_option("--clip")->empty() || ev.checkpoint.empty())
        ev.model = eval_model;
      ev.strategies.clear();
      for (const auto& name : strategies) {
        try {
          ev.strategies.push_back(parse_strategy(name));
        } catch (const std::invalid_argument& err) {
          throw UsageError(err.what());
        }
      }
      cmd_eval(ev, std::cout);
    }
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  }
  return 0;
}
