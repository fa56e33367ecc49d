#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mstop/instance.h"

namespace mstop {

// One route per vehicle (instance order). Each route lists customer node
// references; the vehicle start and the closing depot visit are implicit.
struct Solution {
  std::vector<std::vector<std::size_t>> routes;
  double objective = 0.0;
  bool optimal = false;
  std::uint64_t expansions = 0;

  // y[i][k] = 1 when customer node i (1..n) is served by vehicle k; row 0
  // is the depot and is set for every vehicle.
  std::vector<std::vector<int>> incidence(const Instance& inst) const;
  // Arcs (from, to, vehicle) in node references, start -> ... -> depot.
  struct Arc {
    std::size_t from, to, vehicle;
  };
  std::vector<Arc> arcs(const Instance& inst) const;

  std::string to_json() const;
};

double route_length(const Instance& inst, std::size_t vehicle, const std::vector<std::size_t>& route);

struct Violation {
  std::string constraint;  // e.g. "fuel", "single-visit"
  std::string detail;
};

struct VerifyReport {
  std::vector<Violation> violations;
  double recomputed_objective = 0.0;

  bool ok() const { return violations.empty(); }
  std::string summary() const;
};

// Checks route count, node validity, single visits, fuel limits and the
// objective value. Never throws for malformed solutions.
VerifyReport verify(const Instance& inst, const Solution& sol);

struct ExactOptions {
  std::uint64_t budget = 50'000'000;  // node expansions
};

// Route-sequential branch-and-bound. `optimal` is set when the search
// completed within budget; ties resolve to the lexicographically smallest
// route list.
Solution solve_exact(const Instance& inst, const ExactOptions& options = {});

inline constexpr std::size_t kBruteForceMaxN = 8;
// Exhaustive enumeration of every feasible route set; throws
// std::invalid_argument for n > kBruteForceMaxN.
Solution brute_force_enum(const Instance& inst);

struct TsiliParams {
  std::size_t samples = 1280;
  double exponent = 4.0;       // desirability (prize / distance)^r
  std::size_t candidates = 4;  // sample among the best `candidates` customers
};

// Stochastic Tsiligirides-style construction, best of `samples` rollouts.
Solution tsili_solve(const Instance& inst, const TsiliParams& params, std::uint64_t seed);

}  // namespace mstop
