#include "mstop/env.h"

#include <algorithm>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <string>

namespace mstop {

std::size_t State::active() const {
  if (terminal()) throw ContractViolation("active vehicle requested on a terminal state");
  return order_[order_pos_];
}

std::size_t State::visited_count() const {
  return static_cast<std::size_t>(std::count(visited_.begin(), visited_.end(), true));
}

double State::total_collected() const {
  double s = 0.0;
  for (const auto& v : vehicles_) s += v.collected;
  return s;
}

std::vector<std::size_t> identity_order(std::size_t k) {
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  return order;
}

State reset(const Instance& inst, std::span<const std::size_t> order) {
  const std::size_t k = inst.k();
  std::vector<bool> seen(k, false);
  if (order.size() != k) throw std::invalid_argument("reset: order has wrong length");
  for (auto v : order) {
    if (v >= k || seen[v]) throw std::invalid_argument("reset: order is not a permutation of the vehicles");
    seen[v] = true;
  }
  State s;
  s.inst_ = &inst;
  s.residual_.resize(inst.n());
  for (std::size_t i = 0; i < inst.n(); ++i) s.residual_[i] = inst.customers[i].prize;
  s.visited_.assign(inst.n(), false);
  s.vehicles_.resize(k);
  for (std::size_t v = 0; v < k; ++v)
    s.vehicles_[v] = {inst.vehicles[v].start, inst.n() + 1 + v, inst.vehicles[v].fuel, 0.0, false};
  s.order_.assign(order.begin(), order.end());
  s.routes_.assign(k, {});
  return s;
}

std::vector<bool> feasible_mask(const State& s) {
  if (s.terminal()) throw ContractViolation("feasible_mask called on a terminal state");
  const Instance& inst = s.instance();
  const auto& veh = s.active_vehicle();
  std::vector<bool> mask(inst.n() + 1, false);
  mask[0] = true;
  for (std::size_t j = 1; j <= inst.n(); ++j) {
    if (s.visited(j)) continue;
    const Point p = inst.customers[j - 1].pos;
    const double need = euclidean(veh.pos, p) + euclidean(p, inst.depot);
    mask[j] = veh.fuel + kFuelEps >= need;
  }
  return mask;
}

void step_inplace(State& s, std::size_t action) {
  if (s.terminal()) throw ContractViolation("step on a terminal state");
  const Instance& inst = s.instance();
  if (action > inst.n()) throw ContractViolation("action " + std::to_string(action) + " out of range");
  const auto mask = feasible_mask(s);
  if (!mask[action]) throw ContractViolation("infeasible action " + std::to_string(action));
  const std::size_t k = s.active();
  auto& veh = s.vehicles_[k];
  if (action == 0) {
    veh.fuel -= euclidean(veh.pos, inst.depot);
    veh.pos = inst.depot;
    veh.node = 0;
    veh.done = true;
    ++s.order_pos_;
    s.decode_step_ = 0;
  } else {
    const Point p = inst.customers[action - 1].pos;
    veh.fuel -= euclidean(veh.pos, p);
    veh.pos = p;
    veh.node = action;
    veh.collected += s.residual_[action - 1];
    s.residual_[action - 1] = 0.0;
    s.visited_[action - 1] = true;
    s.routes_[k].push_back(action);
    ++s.decode_step_;
  }
  ++s.step_;
}

State step(const State& s, std::size_t action) {
  State next = s;
  step_inplace(next, action);
  return next;
}

std::vector<std::size_t> Trajectory::actions() const {
  std::vector<std::size_t> a;
  a.reserve(steps.size());
  for (const auto& st : steps) a.push_back(st.action);
  return a;
}

double Trajectory::log_prob() const {
  double s = 0.0;
  for (const auto& st : steps) s += st.log_prob;
  return s;
}

double collected_prize(const Instance& inst, const std::vector<std::vector<std::size_t>>& routes) {
  std::vector<bool> seen(inst.n() + 1, false);
  for (const auto& route : routes)
    for (auto c : route) {
      if (c == 0 || c > inst.n()) throw ContractViolation("route references a non-customer node");
      seen[c] = true;
    }
  double r = 0.0;
  for (std::size_t c = 1; c <= inst.n(); ++c)
    if (seen[c]) r += inst.customers[c - 1].prize;
  return r;
}

double reward(const Instance& inst, const Trajectory& traj) {
  if (!traj.terminal) throw ContractViolation("reward of a non-terminal trajectory");
  return collected_prize(inst, traj.routes);
}

State replay(const Instance& inst, std::span<const std::size_t> order, std::span<const std::size_t> actions) {
  State s = reset(inst, order);
  for (auto a : actions) step_inplace(s, a);
  return s;
}

Trajectory trajectory_from_actions(const Instance& inst, std::span<const std::size_t> order,
                                   std::span<const std::size_t> actions) {
  Trajectory traj;
  traj.order.assign(order.begin(), order.end());
  State s = reset(inst, order);
  for (auto a : actions) {
    const std::size_t k = s.active();
    step_inplace(s, a);
    traj.steps.push_back({s.step_count() - 1, k, a, s.vehicles()[k].fuel, 0.0, 0.0});
  }
  traj.routes = s.routes();
  traj.terminal = s.terminal();
  traj.reward = collected_prize(inst, traj.routes);
  return traj;
}

void write_trajectory(std::ostream& os, const Trajectory& traj) {
  const auto flags = os.flags();
  os << std::setprecision(17);
  for (const auto& st : traj.steps)
    os << st.t << ' ' << st.vehicle << ' ' << st.action << ' ' << st.fuel_after << ' ' << st.log_prob << ' '
       << st.entropy << '\n';
  os.flags(flags);
}

}  // namespace mstop
