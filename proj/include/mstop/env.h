#pragma once

#include <iosfwd>
#include <span>
#include <stdexcept>
#include <vector>

#include "mstop/instance.h"

namespace mstop {

// Absolute tolerance for every fuel comparison.
inline constexpr double kFuelEps = 1e-9;

struct VehicleState {
  Point pos;
  std::size_t node = 0;  // current node reference (start node, customer or depot)
  double fuel = 0.0;
  double collected = 0.0;
  bool done = false;
  bool operator==(const VehicleState&) const = default;
};

class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Actions are node references 0..n: 0 returns the active vehicle to the
// depot and hands control to the next vehicle in the order.
class State {
 public:
  const Instance& instance() const { return *inst_; }
  std::span<const double> residual_prizes() const { return residual_; }
  double residual(std::size_t customer_node) const { return residual_[customer_node - 1]; }
  bool visited(std::size_t customer_node) const { return visited_[customer_node - 1]; }
  std::size_t visited_count() const;
  const std::vector<VehicleState>& vehicles() const { return vehicles_; }
  const std::vector<std::size_t>& order() const { return order_; }
  std::size_t done_count() const { return order_pos_; }
  std::size_t step_count() const { return step_; }
  std::size_t decode_step() const { return decode_step_; }
  bool terminal() const { return order_pos_ >= order_.size(); }
  // Index of the vehicle currently building its route.
  std::size_t active() const;
  const VehicleState& active_vehicle() const { return vehicles_[active()]; }
  const std::vector<std::vector<std::size_t>>& routes() const { return routes_; }
  double total_collected() const;

  bool operator==(const State&) const = default;

 private:
  friend State reset(const Instance&, std::span<const std::size_t>);
  friend State step(const State&, std::size_t);
  friend void step_inplace(State&, std::size_t);

  const Instance* inst_ = nullptr;
  std::vector<double> residual_;
  std::vector<bool> visited_;
  std::vector<VehicleState> vehicles_;
  std::vector<std::size_t> order_;
  std::size_t order_pos_ = 0;
  std::size_t step_ = 0;
  std::size_t decode_step_ = 0;
  std::vector<std::vector<std::size_t>> routes_;
};

// The instance must outlive the state. Throws std::invalid_argument unless
// `order` is a permutation of 0..K-1.
State reset(const Instance& inst, std::span<const std::size_t> order);
std::vector<std::size_t> identity_order(std::size_t k);

// Entry j is true when the active vehicle may take action j.
std::vector<bool> feasible_mask(const State& s);
State step(const State& s, std::size_t action);
void step_inplace(State& s, std::size_t action);

struct StepRecord {
  std::size_t t = 0;
  std::size_t vehicle = 0;
  std::size_t action = 0;
  double fuel_after = 0.0;
  double log_prob = 0.0;
  double entropy = 0.0;
};

struct Trajectory {
  std::vector<std::size_t> order;
  std::vector<StepRecord> steps;
  std::vector<std::vector<std::size_t>> routes;  // per vehicle, customers only
  double reward = 0.0;
  bool terminal = false;

  std::vector<std::size_t> actions() const;
  double log_prob() const;
};

// Sum of original prizes over the customers on `routes`, added in
// ascending node order so that equal route sets give bit-equal totals.
// Throws ContractViolation for references outside 1..n.
double collected_prize(const Instance& inst, const std::vector<std::vector<std::size_t>>& routes);

// collected_prize of a terminal trajectory; throws ContractViolation
// otherwise.
double reward(const Instance& inst, const Trajectory& traj);

// Replays an action sequence from reset; the result is terminal when the
// actions close every route.
State replay(const Instance& inst, std::span<const std::size_t> order, std::span<const std::size_t> actions);
// Builds a trajectory record (no log-probabilities) from a replay.
Trajectory trajectory_from_actions(const Instance& inst, std::span<const std::size_t> order,
                                   std::span<const std::size_t> actions);

// Debug dump: one line per step "t vehicle action fuel_after logprob entropy".
void write_trajectory(std::ostream& os, const Trajectory& traj);

}  // namespace mstop
