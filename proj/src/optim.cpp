#include <cmath>
#include <stdexcept>

#include "mstop/numkit.h"

namespace mstop::nk {

AdamState AdamState::for_params(const ParameterSet& params, AdamConfig config) {
  AdamState s;
  s.config = config;
  s.m.resize(params.size());
  s.v.resize(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    s.m[i].assign(params[i].value.size(), 0.0);
    s.v[i].assign(params[i].value.size(), 0.0);
  }
  return s;
}

void adam_step(ParameterSet& params, const Gradients& grads, AdamState& state) {
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw std::invalid_argument("adam_step: optimizer state does not match parameter set");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    if (i >= grads.size() || grads[i].size() != params[i].value.size())
      throw std::invalid_argument("adam_step: missing gradient for " + params[i].name);
    if (state.m[i].size() != params[i].value.size())
      throw std::invalid_argument("adam_step: moment shape mismatch for " + params[i].name);
  }
  const auto& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.trainable) continue;
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p.value[j] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

double global_norm(const Gradients& grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (double x : g) s += x * x;
  return std::sqrt(s);
}

double clip_global_norm(Gradients& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& g : grads)
      for (double& x : g) x *= f;
  }
  return norm;
}

}  // namespace mstop::nk
