#pragma once

// Central finite-difference checks shared by the unit tests and the
// acceptance binary.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mstop/ddtm.h"
#include "mstop/numkit.h"
#include "mstop/rng.h"

namespace gradcheck {

using mstop::Rng;
using mstop::nk::Shape;
using mstop::nk::Tape;
using mstop::nk::Tensor;

inline constexpr double kStep = 1e-5;
inline constexpr double kTolerance = 1e-4;
// Relative error denominator floor; keeps near-zero gradients from
// turning round-off into large ratios.
inline constexpr double kFloor = 1e-3;

inline double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kFloor});
}

struct Input {
  Shape shape;
  std::vector<double> value;
};

struct Case {
  std::vector<Input> inputs;
  std::function<Tensor(Tape&, const std::vector<Tensor>&)> build;
  mstop::nk::ParameterSet* params = nullptr;  // bound to the tape when set
  // Outputs given zero weight: masked log-probabilities are -1e9 sentinels
  // whose finite differences drown in round-off, and downstream code only
  // ever multiplies them by a zero probability.
  std::vector<bool> ignore_outputs;
};

// Loss = sum(op(inputs) * C) with a fixed random weight C so every output
// element contributes.
inline double check_case(const Case& c, Rng& rng) {
  std::vector<double> weights;
  auto loss_of = [&](const std::vector<Input>& in, Tape& tape, std::vector<Tensor>* leaves) {
    std::vector<Tensor> xs;
    for (const auto& i : in) xs.push_back(tape.variable(i.shape, i.value));
    if (leaves) *leaves = xs;
    Tensor out = c.build(tape, xs);
    if (weights.empty()) {
      weights.resize(out.shape().size());
      for (std::size_t i = 0; i < weights.size(); ++i)
        weights[i] = !c.ignore_outputs.empty() && c.ignore_outputs[i] ? 0.0 : rng.uniform(-1.0, 1.0);
    }
    return mstop::nk::sum(mstop::nk::mul(out, tape.constant(out.shape(), weights)));
  };

  Tape tape(c.params);
  std::vector<Tensor> leaves;
  Tensor loss = loss_of(c.inputs, tape, &leaves);
  tape.backward(loss);

  double worst = 0.0;
  auto in = c.inputs;
  for (std::size_t a = 0; a < in.size(); ++a) {
    const auto g = tape.grad(leaves[a]);
    for (std::size_t e = 0; e < in[a].value.size(); ++e) {
      const double x0 = in[a].value[e];
      in[a].value[e] = x0 + kStep;
      Tape tp(c.params);
      const double fp = loss_of(in, tp, nullptr).item();
      in[a].value[e] = x0 - kStep;
      Tape tm(c.params);
      const double fm = loss_of(in, tm, nullptr).item();
      in[a].value[e] = x0;
      worst = std::max(worst, rel_err(g[e], (fp - fm) / (2.0 * kStep)));
    }
  }
  return worst;
}

inline Input random_input(Rng& rng, std::size_t rows, std::size_t cols, double lo = -1.0, double hi = 1.0) {
  Input in{{rows, cols}, std::vector<double>(rows * cols)};
  for (auto& v : in.value) v = rng.uniform(lo, hi);
  return in;
}

// Values bounded away from zero (for kinked ops).
inline Input away_from_zero(Rng& rng, std::size_t rows, std::size_t cols) {
  Input in = random_input(rng, rows, cols, 0.05, 1.0);
  for (auto& v : in.value)
    if (rng.below(2)) v = -v;
  return in;
}

inline std::size_t dim(Rng& rng, std::size_t lo = 1, std::size_t hi = 4) { return lo + rng.below(hi - lo + 1); }

inline std::vector<double> random_mask(Rng& rng, std::size_t rows, std::size_t cols) {
  std::vector<double> m(rows * cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t keep = rng.below(cols);
    for (std::size_t c = 0; c < cols; ++c)
      if (c != keep && rng.below(3) == 0) m[r * cols + c] = mstop::nk::kMasked;
  }
  return m;
}

struct KindResult {
  std::string kind;
  double max_rel_err = 0.0;
  std::size_t trials = 0;
  bool ok() const { return max_rel_err <= kTolerance; }
};

inline std::vector<std::string> op_kinds() {
  return {"matmul", "transpose", "add",     "add_row",      "mul",           "scale",
          "concat_cols", "concat_rows", "slice_cols", "select_rows", "softmax", "log_softmax",
          "relu",   "tanh",      "log",     "sum",          "mean_rows",     "batch_norm_train",
          "batch_norm_eval", "param"};
}

// Runs `trials` random cases of one operation kind.
inline KindResult check_kind(const std::string& kind, std::size_t trials, std::uint64_t seed) {
  namespace nk = mstop::nk;
  Rng rng(mstop::derive_seed(seed, {std::hash<std::string>{}(kind)}));
  KindResult res{kind, 0.0, trials};
  for (std::size_t t = 0; t < trials; ++t) {
    Case c;
    nk::ParameterSet params;
    const std::size_t m = dim(rng), n = dim(rng);
    if (kind == "matmul") {
      const std::size_t k = dim(rng);
      c.inputs = {random_input(rng, m, k), random_input(rng, k, n)};
      c.build = [](Tape&, const std::vector<Tensor>& x) { return nk::matmul(x[0], x[1]); };
    } else if (kind == "transpose") {
      c.inputs = {random_input(rng, m, n)};
      c.build = [](Tape&, const std::vector<Tensor>& x) { return nk::transpose(x[0]); };
    } else if (kind == "add") {
      c.inputs = {random_input(rng, m, n), random_input(rng, m, n)};
      c.build = [](Tape&, const std::vector<Tensor>& x) { return nk::add(x[0], x[1]); };
    } else if (kind == "add_row") {
      c.inputs = {random_input(rng, m, n), random_input(rng, 1, n)};
      c.build = [](Tape&, const std::vector<Tensor>& x) { return nk::add_row(x[0], x[1]); };
    } else if (kind == "mul") {
      c.inputs = {random_input(rng, m, n), random_input(rng, m, n)};
      c.build = [](Tape&, const std::vector<Tensor>& x) { return nk::mul(x[0], x[1]); };
    } else if (kind == "scale") {
      const double s = rng.uniform(-2.0, 2.0);
      c.inputs = {random_input(rng, m, n)};
      c.build = [s](Tape&, const std::vector<Tensor>& x) { return nk::scale(x[0], s); };
    } else if (kind == "concat_cols") {
      c.inputs = {random_input(rng, m, n), random_input(rng, m, dim(rng))};
      c.build = [](Tape&, const std::vector<Tensor>& x) { return nk::concat_cols(x[0], x[1]); };
    } else if (kind == "concat_rows") {
      c.inputs = {random_input(rng, m, n), random_input(rng, dim(rng), n), random_input(rng, dim(rng), n)};
      c.build = [](Tape&, const std::vector<Tensor>& x) { return nk::concat_rows(x); };
    } else if (kind == "slice_cols") {
      const std::size_t cols = dim(rng, 2, 6);
      const std::size_t begin = rng.below(cols);
      const std::size_t width = 1 + rng.below(cols - begin);
      c.inputs = {random_input(rng, m, cols)};
      c.build = [begin, width](Tape&, const std::vector<Tensor>& x) { return nk::slice_cols(x[0], begin, width); };
    } else if (kind == "select_rows") {
      std::vector<std::size_t> rows(dim(rng));
      for (auto& r : rows) r = rng.below(m);
      c.inputs = {random_input(rng, m, n)};
      c.build = [rows](Tape&, const std::vector<Tensor>& x) { return nk::select_rows(x[0], rows); };
    } else if (kind == "softmax" || kind == "log_softmax") {
      const std::size_t cols = dim(rng, 2, 5);
      auto mask = random_mask(rng, m, cols);
      const bool log = kind == "log_softmax";
      c.inputs = {random_input(rng, m, cols, -2.0, 2.0)};
      if (log)
        for (double v : mask) c.ignore_outputs.push_back(v <= mstop::nk::kMasked);
      c.build = [mask, log](Tape&, const std::vector<Tensor>& x) {
        return log ? nk::log_softmax(x[0], mask) : nk::softmax(x[0], mask);
      };
    } else if (kind == "relu") {
      c.inputs = {away_from_zero(rng, m, n)};
      c.build = [](Tape&, const std::vector<Tensor>& x) { return nk::relu(x[0]); };
    } else if (kind == "tanh") {
      c.inputs = {random_input(rng, m, n, -2.0, 2.0)};
      c.build = [](Tape&, const std::vector<Tensor>& x) { return nk::tanh(x[0]); };
    } else if (kind == "log") {
      c.inputs = {random_input(rng, m, n, 0.2, 2.0)};
      c.build = [](Tape&, const std::vector<Tensor>& x) { return nk::log(x[0]); };
    } else if (kind == "sum") {
      c.inputs = {random_input(rng, m, n)};
      c.build = [](Tape&, const std::vector<Tensor>& x) { return nk::sum(x[0]); };
    } else if (kind == "mean_rows") {
      c.inputs = {random_input(rng, m, n)};
      c.build = [](Tape&, const std::vector<Tensor>& x) { return nk::mean_rows(x[0]); };
    } else if (kind == "batch_norm_train" || kind == "batch_norm_eval") {
      const std::size_t rows = dim(rng, 2, 5);
      const std::size_t rm = params.add("bn.running_mean", {1, n}, false);
      const std::size_t rv = params.add("bn.running_var", {1, n}, false);
      for (auto& v : params[rm].value) v = rng.uniform(-0.5, 0.5);
      for (auto& v : params[rv].value) v = rng.uniform(0.5, 1.5);
      const auto mode = kind == "batch_norm_train" ? nk::NormMode::kTrain : nk::NormMode::kEval;
      c.inputs = {random_input(rng, rows, n, -2.0, 2.0), random_input(rng, 1, n, 0.5, 1.5), random_input(rng, 1, n)};
      c.params = &params;
      c.build = [rm, rv, mode](Tape&, const std::vector<Tensor>& x) {
        return nk::batch_norm(x[0], x[1], x[2], rm, rv, mode);
      };
    } else if (kind == "param") {
      const std::size_t w = params.add("w", {n, m});
      for (auto& v : params[w].value) v = rng.uniform(-1.0, 1.0);
      c.params = &params;
      c.inputs = {random_input(rng, dim(rng), n)};
      c.build = [w](Tape& tape, const std::vector<Tensor>& x) { return nk::tanh(nk::matmul(x[0], tape.param(w))); };
    } else {
      throw std::invalid_argument("unknown op kind " + kind);
    }
    res.max_rel_err = std::max(res.max_rel_err, check_case(c, rng));
  }
  return res;
}

struct LossTerms {
  double advantage = 0.0;
  double alpha = 0.0;
};

// Checks d(loss)/d(theta) for the policy-gradient surrogate
// -(advantage * log P(tau) + alpha * sum_t H_t) on a fixed action sequence,
// probing `probes` random trainable parameter entries.
inline double check_policy_loss(const mstop::Ddtm& model0, const mstop::Instance& inst, LossTerms terms,
                                std::size_t probes, std::uint64_t seed) {
  namespace nk = mstop::nk;
  using namespace mstop;
  const auto order = identity_order(inst.k());
  const Trajectory fixed = rollout(model0, inst, order, {DecodeMode::kSample, seed, nk::NormMode::kTrain, {}});
  const auto actions = fixed.actions();

  auto loss_value = [&](const Ddtm& m, Tape& tape) {
    Rollout r = rollout(tape, m, inst, order, {DecodeMode::kGreedy, 0, nk::NormMode::kTrain, actions});
    return nk::scale(nk::add(nk::scale(r.log_prob, terms.advantage), nk::scale(r.entropy, terms.alpha)), -1.0);
  };

  Tape tape(&model0.params());
  tape.backward(loss_value(model0, tape));
  nk::Gradients grads;
  tape.accumulate(grads);

  Ddtm model = model0;
  Rng rng(seed ^ 0x5eedULL);
  std::vector<std::size_t> trainable;
  for (std::size_t i = 0; i < model.params().size(); ++i)
    if (model.params()[i].trainable) trainable.push_back(i);
  double worst = 0.0;
  for (std::size_t p = 0; p < probes; ++p) {
    const std::size_t pi = trainable[rng.below(trainable.size())];
    const std::size_t e = rng.below(model.params()[pi].value.size());
    const double analytic = grads[pi].empty() ? 0.0 : grads[pi][e];
    double& x = model.params()[pi].value[e];
    const double x0 = x;
    x = x0 + kStep;
    Tape tp(&model.params());
    const double fp = loss_value(model, tp).item();
    x = x0 - kStep;
    Tape tm(&model.params());
    const double fm = loss_value(model, tm).item();
    x = x0;
    worst = std::max(worst, rel_err(analytic, (fp - fm) / (2.0 * kStep)));
  }
  return worst;
}

}  // namespace gradcheck
