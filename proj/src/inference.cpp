#include "mstop/inference.h"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "mstop/rng.h"

namespace mstop {

const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::kGreedy: return "greedy";
    case Strategy::kSampling: return "sampling";
    case Strategy::kPerm: return "perm";
    case Strategy::kPermAug: return "perm-aug";
  }
  return "?";
}

Strategy parse_strategy(const std::string& s) {
  if (s == "greedy") return Strategy::kGreedy;
  if (s == "sampling") return Strategy::kSampling;
  if (s == "perm") return Strategy::kPerm;
  if (s == "perm-aug") return Strategy::kPermAug;
  throw std::invalid_argument("unknown strategy '" + s + "' (expected greedy|sampling|perm|perm-aug)");
}

void InferConfig::validate() const {
  if (strategy == Strategy::kSampling && width < 1)
    throw std::invalid_argument("infer config: sample width must be >= 1");
}

std::vector<Candidate> enumerate_candidates(std::size_t k, const InferConfig& config) {
  config.validate();
  std::vector<Candidate> out;
  const auto identity = identity_order(k);
  switch (config.strategy) {
    case Strategy::kGreedy:
      out.push_back({identity, 0, DecodeMode::kGreedy, 0});
      break;
    case Strategy::kSampling:
      if (config.include_greedy) out.push_back({identity, 0, DecodeMode::kGreedy, 0});
      for (std::size_t j = 0; j < config.width; ++j)
        out.push_back({identity, 0, DecodeMode::kSample, derive_seed(config.seed, {j})});
      break;
    case Strategy::kPerm:
    case Strategy::kPermAug: {
      const std::size_t transforms = config.strategy == Strategy::kPerm ? 1 : kNumTransforms;
      auto order = identity;
      do {
        for (std::size_t t = 0; t < transforms; ++t) out.push_back({order, t, DecodeMode::kGreedy, 0});
      } while (std::next_permutation(order.begin(), order.end()));
      break;
    }
  }
  return out;
}

InferResult infer(const Ddtm& model, const Instance& inst, const InferConfig& config) {
  const auto candidates = enumerate_candidates(inst.k(), config);
  std::vector<Trajectory> replayed(candidates.size());
  for_each_index(candidates.size(), config.exec, [&](std::size_t i) {
    const Candidate& c = candidates[i];
    const Instance view = c.transform == 0 ? inst : transform_instance(inst, c.transform);
    const Trajectory decoded = rollout(model, view, c.order, {c.mode, c.seed, nk::NormMode::kEval, {}});
    const auto actions = decoded.actions();
    Trajectory t = trajectory_from_actions(inst, c.order, actions);
    if (!t.terminal) throw ContractViolation("infer: replayed trajectory is not terminal");
    t.reward = reward(inst, t);
    replayed[i] = std::move(t);
  });

  InferResult res;
  res.evaluated = candidates.size();
  for (std::size_t i = 1; i < replayed.size(); ++i)
    if (replayed[i].reward > replayed[res.best_index].reward) res.best_index = i;
  res.trajectory = replayed[res.best_index];
  res.candidate = candidates[res.best_index];
  res.best.routes = res.trajectory.routes;
  res.best.objective = res.trajectory.reward;
  const VerifyReport report = verify(inst, res.best);
  if (!report.ok()) throw ContractViolation("infer: best solution fails verification: " + report.summary());
  return res;
}

DominanceReport dominance_check(const Ddtm& model, const Instance& inst) {
  DominanceReport r;
  InferConfig c;
  c.strategy = Strategy::kGreedy;
  r.greedy = infer(model, inst, c).best.objective;
  c.strategy = Strategy::kPerm;
  r.perm = infer(model, inst, c).best.objective;
  c.strategy = Strategy::kPermAug;
  r.perm_aug = infer(model, inst, c).best.objective;
  if (!r.ok()) throw ContractViolation("dominance_check: strategy rewards are not non-decreasing");
  return r;
}

}  // namespace mstop
