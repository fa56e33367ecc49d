#include "mstop/trainer.h"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <stdexcept>

#include "mstop/rng.h"

namespace mstop {

const char* to_string(BaselineKind kind) {
  switch (kind) {
    case BaselineKind::kBatchMean: return "batch-mean";
    case BaselineKind::kGreedyRollout: return "greedy-rollout";
    case BaselineKind::kInstanceAug: return "instance-aug";
  }
  return "?";
}

BaselineKind parse_baseline(const std::string& s) {
  if (s == "batch-mean") return BaselineKind::kBatchMean;
  if (s == "greedy-rollout") return BaselineKind::kGreedyRollout;
  if (s == "instance-aug") return BaselineKind::kInstanceAug;
  throw std::invalid_argument("unknown baseline '" + s + "' (expected batch-mean|greedy-rollout|instance-aug)");
}

std::size_t TrainConfig::raw_instances_per_step() const {
  validate();
  return baseline == BaselineKind::kInstanceAug ? batch / augment : batch;
}

void TrainConfig::validate() const {
  if (batch < 1) throw std::invalid_argument("train config: batch must be >= 1");
  if (augment != 1 && augment != kNumTransforms) throw std::invalid_argument("train config: augment must be 1 or 8");
  if (!(alpha >= 0.0)) throw std::invalid_argument("train config: alpha must be >= 0");
  if (!(lr > 0.0)) throw std::invalid_argument("train config: learning rate must be > 0");
  if (baseline == BaselineKind::kInstanceAug && batch % augment != 0)
    throw std::invalid_argument("train config: batch must be a multiple of the augmentation factor");
  if (baseline == BaselineKind::kInstanceAug && augment == 1 && batch < 1)
    throw std::invalid_argument("train config: empty batch");
}

std::vector<double> baseline_instance_aug(std::span<const double> rewards, std::size_t group) {
  if (group == 0 || rewards.size() % group != 0)
    throw std::invalid_argument("baseline_instance_aug: " + std::to_string(rewards.size()) +
                                " rewards do not split into groups of " + std::to_string(group));
  std::vector<double> b(rewards.size() / group);
  for (std::size_t i = 0; i < b.size(); ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < group; ++k) s += rewards[i * group + k];
    b[i] = s / static_cast<double>(group);
  }
  return b;
}

std::vector<double> baseline_batch_mean(std::span<const double> rewards) {
  double s = 0.0;
  for (double r : rewards) s += r;
  return std::vector<double>(rewards.size(), rewards.empty() ? 0.0 : s / static_cast<double>(rewards.size()));
}

std::vector<double> baseline_greedy_rollout(const Ddtm& frozen, std::span<const Instance> instances,
                                            std::span<const std::vector<std::size_t>> orders, Exec exec) {
  if (instances.size() != orders.size()) throw std::invalid_argument("baseline_greedy_rollout: size mismatch");
  std::vector<double> b(instances.size());
  for_each_index(instances.size(), exec, [&](std::size_t i) {
    b[i] = rollout(frozen, instances[i], orders[i], {DecodeMode::kGreedy, 0, nk::NormMode::kEval, {}}).reward;
  });
  return b;
}

Batch make_batch(const TrainConfig& config, std::size_t epoch, std::size_t step) {
  const std::size_t raw = config.raw_instances_per_step();
  const bool aug = config.baseline == BaselineKind::kInstanceAug;
  Batch batch;
  batch.group = aug ? config.augment : 1;
  for (std::size_t i = 0; i < raw; ++i) {
    GenConfig g = config.problem;
    g.seed = derive_seed(config.data_seed, {epoch, step, i});
    Instance inst = generate(g);
    std::vector<std::size_t> order = identity_order(inst.k());
    Rng rng(derive_seed(config.rollout_seed, {epoch, step, i, 0x6f72646572ULL}));
    for (std::size_t j = order.size(); j > 1; --j) std::swap(order[j - 1], order[rng.below(j)]);
    const std::size_t copies = aug ? config.augment : 1;
    for (std::size_t t = 0; t < copies; ++t) {
      batch.instances.push_back(transform_instance(inst, t));
      batch.orders.push_back(order);
      batch.seeds.push_back(derive_seed(config.rollout_seed, {epoch, step, i, t}));
    }
  }
  return batch;
}

StepResult compute_gradients(const Ddtm& model, const Batch& batch, const TrainConfig& config, const Ddtm* frozen) {
  const std::size_t m = batch.instances.size();
  if (m == 0) throw std::invalid_argument("compute_gradients: empty batch");
  if (batch.orders.size() != m || batch.seeds.size() != m)
    throw std::invalid_argument("compute_gradients: inconsistent batch");

  std::vector<std::unique_ptr<nk::Tape>> tapes(m);
  std::vector<Rollout> rolls(m);
  for_each_index(m, config.exec, [&](std::size_t j) {
    tapes[j] = std::make_unique<nk::Tape>(&model.params());
    rolls[j] = rollout(*tapes[j], model, batch.instances[j], batch.orders[j],
                       {DecodeMode::kSample, batch.seeds[j], nk::NormMode::kTrain, {}});
  });

  StepResult res;
  res.rewards.resize(m);
  for (std::size_t j = 0; j < m; ++j) res.rewards[j] = rolls[j].trajectory.reward;

  res.baselines.resize(m);
  switch (config.baseline) {
    case BaselineKind::kInstanceAug: {
      const auto b = baseline_instance_aug(res.rewards, batch.group);
      for (std::size_t j = 0; j < m; ++j) res.baselines[j] = b[j / batch.group];
      break;
    }
    case BaselineKind::kBatchMean:
      res.baselines = baseline_batch_mean(res.rewards);
      break;
    case BaselineKind::kGreedyRollout:
      if (frozen == nullptr) throw std::invalid_argument("compute_gradients: greedy-rollout baseline needs a frozen policy");
      res.baselines = baseline_greedy_rollout(*frozen, batch.instances, batch.orders, config.exec);
      break;
  }

  const double inv_m = 1.0 / static_cast<double>(m);
  std::vector<nk::Gradients> per(m);
  std::vector<double> losses(m);
  for_each_index(m, config.exec, [&](std::size_t j) {
    const double advantage = res.rewards[j] - res.baselines[j];
    nk::Tensor objective = nk::add(nk::scale(rolls[j].log_prob, advantage), nk::scale(rolls[j].entropy, config.alpha));
    nk::Tensor loss = nk::scale(objective, -inv_m);
    tapes[j]->backward(loss);
    tapes[j]->accumulate(per[j]);
    losses[j] = loss.item();
  });

  res.grads.assign(model.params().size(), {});
  for (std::size_t i = 0; i < model.params().size(); ++i)
    if (model.params()[i].trainable) res.grads[i].assign(model.params()[i].value.size(), 0.0);
  double entropy_sum = 0.0;
  std::size_t steps = 0;
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t i = 0; i < per[j].size(); ++i) {
      if (per[j][i].empty() || res.grads[i].empty()) continue;
      for (std::size_t e = 0; e < per[j][i].size(); ++e) res.grads[i][e] += per[j][i][e];
    }
    res.loss += losses[j];
    res.mean_reward += res.rewards[j] * inv_m;
    res.mean_baseline += res.baselines[j] * inv_m;
    entropy_sum += rolls[j].entropy.item();
    steps += rolls[j].trajectory.steps.size();
    const auto& obs = tapes[j]->norm_observations();
    res.norm_obs.insert(res.norm_obs.end(), obs.begin(), obs.end());
  }
  res.mean_entropy = steps ? entropy_sum / static_cast<double>(steps) : 0.0;
  return res;
}

namespace {

void update_running_stats(nk::ParameterSet& params, const std::vector<nk::BatchNormObservation>& obs,
                          double momentum) {
  struct Acc {
    std::size_t var_param = 0;
    std::vector<double> mean, var;
    std::size_t count = 0;
  };
  std::map<std::size_t, Acc> acc;
  for (const auto& o : obs) {
    auto& a = acc[o.mean_param];
    if (a.count == 0) {
      a.var_param = o.var_param;
      a.mean.assign(o.mean.size(), 0.0);
      a.var.assign(o.var.size(), 0.0);
    }
    for (std::size_t c = 0; c < o.mean.size(); ++c) {
      a.mean[c] += o.mean[c];
      a.var[c] += o.var[c];
    }
    ++a.count;
  }
  for (auto& [mean_param, a] : acc) {
    auto& rm = params[mean_param].value;
    auto& rv = params[a.var_param].value;
    const double inv = 1.0 / static_cast<double>(a.count);
    for (std::size_t c = 0; c < rm.size(); ++c) {
      rm[c] = (1.0 - momentum) * rm[c] + momentum * a.mean[c] * inv;
      rv[c] = (1.0 - momentum) * rv[c] + momentum * a.var[c] * inv;
    }
  }
}

}  // namespace

StepDiagnostics reinforce_step(Ddtm& model, nk::AdamState& adam, const Batch& batch, const TrainConfig& config,
                               const Ddtm* frozen) {
  StepResult res = compute_gradients(model, batch, config, frozen);
  if (!std::isfinite(res.loss)) throw std::runtime_error("reinforce_step: non-finite loss " + std::to_string(res.loss));
  StepDiagnostics diag;
  diag.grad_norm = nk::clip_global_norm(res.grads, config.clip_norm);
  if (!std::isfinite(diag.grad_norm)) throw std::runtime_error("reinforce_step: non-finite gradient norm");
  nk::adam_step(model.params(), res.grads, adam);
  update_running_stats(model.params(), res.norm_obs, config.bn_momentum);
  diag.mean_reward = res.mean_reward;
  diag.mean_baseline = res.mean_baseline;
  diag.mean_entropy = res.mean_entropy;
  diag.loss = res.loss;
  return diag;
}

double evaluate_greedy(const Ddtm& model, std::span<const Instance> instances, Exec exec) {
  if (instances.empty()) return 0.0;
  std::vector<double> r(instances.size());
  for_each_index(instances.size(), exec, [&](std::size_t i) {
    const auto order = identity_order(instances[i].k());
    r[i] = rollout(model, instances[i], order, {DecodeMode::kGreedy, 0, nk::NormMode::kEval, {}}).reward;
  });
  double s = 0.0;
  for (double x : r) s += x;
  return s / static_cast<double>(r.size());
}

std::vector<Instance> validation_set(const TrainConfig& config) {
  GenConfig g = config.problem;
  g.seed = derive_seed(config.data_seed, {0x76616c6964ULL});
  return generate_many(g, config.validation_size);
}

TrainResult train(const TrainConfig& config, Ddtm& model, const EpochCallback& on_epoch) {
  config.validate();
  const auto validation = validation_set(config);
  TrainResult result;
  result.initial_validation = evaluate_greedy(model, validation, config.exec);
  result.best_validation = result.initial_validation;

  nk::AdamState adam = nk::AdamState::for_params(model.params(), {config.lr});
  std::optional<Ddtm> frozen;
  double frozen_validation = result.initial_validation;
  if (config.baseline == BaselineKind::kGreedyRollout) frozen.emplace(model);

  namespace fs = std::filesystem;
  if (!config.checkpoint_dir.empty()) fs::create_directories(config.checkpoint_dir);

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochReport rep;
    rep.epoch = epoch;
    for (std::size_t step = 0; step < config.steps_per_epoch; ++step) {
      const Batch batch = make_batch(config, epoch, step);
      const auto d = reinforce_step(model, adam, batch, config, frozen ? &*frozen : nullptr);
      rep.train_reward += d.mean_reward;
      rep.baseline += d.mean_baseline;
      rep.entropy += d.mean_entropy;
      rep.grad_norm += d.grad_norm;
      rep.raw_instances += config.raw_instances_per_step();
      rep.trajectories += batch.instances.size();
    }
    if (config.steps_per_epoch > 0) {
      const double inv = 1.0 / static_cast<double>(config.steps_per_epoch);
      rep.train_reward *= inv;
      rep.baseline *= inv;
      rep.entropy *= inv;
      rep.grad_norm *= inv;
    }
    rep.validation = evaluate_greedy(model, validation, config.exec);
    if (frozen) {
      if (rep.validation > frozen_validation) {
        *frozen = model;
        frozen_validation = rep.validation;
      }
      result.baseline_validations.push_back(frozen_validation);
    }
    if (!config.checkpoint_dir.empty()) {
      if (rep.validation > result.best_validation || epoch == 1)
        nk::save_checkpoint((fs::path(config.checkpoint_dir) / "best.ckpt").string(), model.params(), &adam);
      nk::save_checkpoint((fs::path(config.checkpoint_dir) / "last.ckpt").string(), model.params(), &adam);
    }
    result.best_validation = std::max(result.best_validation, rep.validation);
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.epochs.push_back(rep);
    if (on_epoch) on_epoch(rep);
  }
  return result;
}

}  // namespace mstop
