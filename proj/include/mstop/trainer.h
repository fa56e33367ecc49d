#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mstop/ddtm.h"
#include "mstop/instance.h"
#include "mstop/parallel.h"

namespace mstop {

enum class BaselineKind { kBatchMean, kGreedyRollout, kInstanceAug };

const char* to_string(BaselineKind kind);
BaselineKind parse_baseline(const std::string& s);

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t steps_per_epoch = 50;
  std::size_t batch = 64;       // trajectories per step
  std::size_t augment = 8;      // 1 or 8; used by the instance-aug baseline
  double alpha = 0.01;          // entropy weight
  BaselineKind baseline = BaselineKind::kInstanceAug;
  double lr = 1e-4;
  double clip_norm = 1.0;       // <= 0 disables clipping
  double bn_momentum = 0.1;
  std::size_t validation_size = 200;
  GenConfig problem{6, 2, 1.5, PrizeMode::kConstant, 0};
  std::uint64_t data_seed = 1;
  std::uint64_t model_seed = 2;
  std::uint64_t rollout_seed = 3;
  Exec exec = Exec::kParallel;
  std::string checkpoint_dir;  // empty: no checkpoints

  // Raw instances drawn per step: batch / augment for the instance-aug
  // baseline, batch otherwise. Throws std::invalid_argument.
  std::size_t raw_instances_per_step() const;
  void validate() const;
};

struct EpochReport {
  std::size_t epoch = 0;
  double train_reward = 0.0;
  double baseline = 0.0;
  double entropy = 0.0;     // mean per-step entropy of training rollouts
  double grad_norm = 0.0;   // mean pre-clipping norm
  double validation = 0.0;  // mean greedy reward on the held-out set
  std::size_t raw_instances = 0;
  std::size_t trajectories = 0;
  double wall_seconds = 0.0;
};

// Per-instance mean of `group` consecutive rewards. Throws
// std::invalid_argument when the count is not a multiple of `group`.
std::vector<double> baseline_instance_aug(std::span<const double> rewards, std::size_t group);
std::vector<double> baseline_batch_mean(std::span<const double> rewards);
// Greedy rewards of the frozen policy on each (instance, order).
std::vector<double> baseline_greedy_rollout(const Ddtm& frozen, std::span<const Instance> instances,
                                            std::span<const std::vector<std::size_t>> orders, Exec exec);

// One training step's work list: trajectory j runs on instances[j] with
// orders[j]; `group` consecutive trajectories share an instance-aug
// baseline.
struct Batch {
  std::vector<Instance> instances;
  std::vector<std::vector<std::size_t>> orders;
  std::vector<std::uint64_t> seeds;
  std::size_t group = 1;
};

// Draws raw instances with random vehicle orders and expands them into
// trajectories according to the baseline kind.
Batch make_batch(const TrainConfig& config, std::size_t epoch, std::size_t step);

struct StepResult {
  nk::Gradients grads;  // gradient of the surrogate loss (to be minimized)
  std::vector<double> rewards;
  std::vector<double> baselines;
  double mean_reward = 0.0;
  double mean_baseline = 0.0;
  double mean_entropy = 0.0;  // per decode step
  double loss = 0.0;
  std::vector<nk::BatchNormObservation> norm_obs;
};

// Surrogate loss -(1/B) sum_j [(R_j - b_j) * log P(tau_j) + alpha * sum_t H_t],
// with the advantage held constant. `frozen` is required for the
// greedy-rollout baseline.
StepResult compute_gradients(const Ddtm& model, const Batch& batch, const TrainConfig& config,
                             const Ddtm* frozen = nullptr);

struct StepDiagnostics {
  double mean_reward = 0.0;
  double mean_baseline = 0.0;
  double mean_entropy = 0.0;
  double grad_norm = 0.0;
  double loss = 0.0;
};

// compute_gradients, clipping, one Adam update and a running-statistics
// update of the batch-norm buffers.
StepDiagnostics reinforce_step(Ddtm& model, nk::AdamState& adam, const Batch& batch, const TrainConfig& config,
                               const Ddtm* frozen = nullptr);

// Mean greedy reward (identity vehicle order, eval-mode normalization).
double evaluate_greedy(const Ddtm& model, std::span<const Instance> instances, Exec exec);
std::vector<Instance> validation_set(const TrainConfig& config);

struct TrainResult {
  double initial_validation = 0.0;
  std::vector<EpochReport> epochs;
  double best_validation = 0.0;
  std::vector<double> baseline_validations;  // greedy-rollout mode: frozen policy score after each epoch
};

using EpochCallback = std::function<void(const EpochReport&)>;

// Runs REINFORCE for config.epochs epochs on freshly generated data. Writes
// `best.ckpt` / `last.ckpt` under checkpoint_dir when it is set.
TrainResult train(const TrainConfig& config, Ddtm& model, const EpochCallback& on_epoch = {});

}  // namespace mstop
