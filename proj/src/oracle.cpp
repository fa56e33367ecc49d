#include "mstop/oracle.h"

#include <algorithm>
#include <bit>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include <json.hpp>

#include "mstop/env.h"
#include "mstop/rng.h"

namespace mstop {

namespace {

constexpr double kTieEps = 1e-9;

std::size_t start_node(const Instance& inst, std::size_t vehicle) { return inst.n() + 1 + vehicle; }

}  // namespace

double route_length(const Instance& inst, std::size_t vehicle, const std::vector<std::size_t>& route) {
  std::size_t cur = start_node(inst, vehicle);
  double len = 0.0;
  for (auto c : route) {
    len += distance(inst, cur, c);
    cur = c;
  }
  return len + distance(inst, cur, 0);
}

std::vector<std::vector<int>> Solution::incidence(const Instance& inst) const {
  std::vector<std::vector<int>> y(inst.n() + 1, std::vector<int>(inst.k(), 0));
  for (std::size_t k = 0; k < inst.k(); ++k) y[0][k] = 1;
  for (std::size_t k = 0; k < routes.size() && k < inst.k(); ++k)
    for (auto c : routes[k])
      if (c >= 1 && c <= inst.n()) y[c][k] = 1;
  return y;
}

std::vector<Solution::Arc> Solution::arcs(const Instance& inst) const {
  std::vector<Arc> out;
  for (std::size_t k = 0; k < routes.size(); ++k) {
    std::size_t cur = start_node(inst, k);
    for (auto c : routes[k]) {
      out.push_back({cur, c, k});
      cur = c;
    }
    out.push_back({cur, 0, k});
  }
  return out;
}

std::string Solution::to_json() const {
  nlohmann::json j;
  j["objective"] = objective;
  j["optimal"] = optimal;
  j["routes"] = routes;
  j["expansions"] = expansions;
  return j.dump();
}

std::string VerifyReport::summary() const {
  if (ok()) return "ok";
  std::ostringstream os;
  for (std::size_t i = 0; i < violations.size(); ++i)
    os << (i ? "; " : "") << violations[i].constraint << ": " << violations[i].detail;
  return os.str();
}

VerifyReport verify(const Instance& inst, const Solution& sol) {
  VerifyReport rep;
  if (sol.routes.size() != inst.k())
    rep.violations.push_back({"route-count", "expected " + std::to_string(inst.k()) + " routes, got " +
                                           std::to_string(sol.routes.size())});
  std::vector<int> visits(inst.n() + 1, 0);
  for (std::size_t k = 0; k < sol.routes.size(); ++k) {
    bool well_formed = true;
    for (auto c : sol.routes[k]) {
      if (c == 0 || c > inst.n()) {
        rep.violations.push_back({"node-range", "route " + std::to_string(k) + " references node " + std::to_string(c)});
        well_formed = false;
        continue;
      }
      ++visits[c];
    }
    if (well_formed && k < inst.k()) {
      const double len = route_length(inst, k, sol.routes[k]);
      if (len > inst.vehicles[k].fuel + kFuelEps) {
        std::ostringstream os;
        os.precision(17);
        os << "route " << k << " length " << len << " exceeds fuel " << inst.vehicles[k].fuel;
        rep.violations.push_back({"fuel", os.str()});
      }
    }
  }
  for (std::size_t c = 1; c <= inst.n(); ++c) {
    if (visits[c] > 1)
      rep.violations.push_back({"single-visit", "customer " + std::to_string(c) + " visited " +
                                             std::to_string(visits[c]) + " times"});
    if (visits[c] > 0) rep.recomputed_objective += inst.customers[c - 1].prize;
  }
  if (std::abs(rep.recomputed_objective - sol.objective) > 1e-9) {
    std::ostringstream os;
    os.precision(17);
    os << "reported " << sol.objective << " but routes collect " << rep.recomputed_objective;
    rep.violations.push_back({"objective", os.str()});
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Branch and bound

namespace {

struct MemoKey {
  std::uint64_t visited;
  std::uint32_t node;
  std::uint32_t vehicle;
  bool operator==(const MemoKey&) const = default;
};

struct MemoHash {
  std::size_t operator()(const MemoKey& k) const {
    return static_cast<std::size_t>(mix64(k.visited ^ (std::uint64_t{k.node} << 40) ^ (std::uint64_t{k.vehicle} << 56)));
  }
};

class BranchAndBound {
 public:
  BranchAndBound(const Instance& inst, std::uint64_t budget) : inst_(inst), budget_(budget) {
    n_ = inst.n();
    k_ = inst.k();
    if (n_ > 63) throw std::invalid_argument("solve_exact: at most 63 customers supported");
    const std::size_t nodes = inst.node_count();
    dist_.resize(nodes * nodes);
    for (std::size_t i = 0; i < nodes; ++i)
      for (std::size_t j = 0; j < nodes; ++j) dist_[i * nodes + j] = distance(inst, i, j);
    nodes_ = nodes;
    prize_.resize(n_ + 1, 0.0);
    for (std::size_t c = 1; c <= n_; ++c) prize_[c] = inst.customers[c - 1].prize;
    later_reach_.assign(k_ + 1, 0);
    for (std::size_t v = k_; v-- > 0;)
      later_reach_[v] = later_reach_[v + 1] | reach(start_node(inst, v), inst.vehicles[v].fuel, 0);
    routes_.assign(k_, {});
  }

  Solution run() {
    // Phase 1: best-first child ordering finds the optimal value.
    lex_ = false;
    best_ = -1.0;
    descend_vehicle(0, 0, 0.0);
    Solution sol;
    sol.expansions = expansions_;
    if (aborted_) {
      sol.routes = best_routes_;
      sol.objective = best_;
      sol.optimal = false;
      return sol;
    }
    const double phase1_best = best_;
    auto phase1_routes = best_routes_;

    // Phase 2: lexicographic search for the first route set reaching it.
    lex_ = true;
    target_ = phase1_best;
    found_ = false;
    memo_.clear();
    for (auto& r : routes_) r.clear();
    descend_vehicle(0, 0, 0.0);
    sol.expansions = expansions_;
    sol.optimal = true;
    if (found_) {
      sol.routes = best_routes_;
      sol.objective = best_objective_lex_;
    } else {
      sol.routes = phase1_routes;
      sol.objective = phase1_best;
    }
    return sol;
  }

 private:
  double d(std::size_t i, std::size_t j) const { return dist_[i * nodes_ + j]; }

  std::uint64_t reach(std::size_t cur, double fuel, std::uint64_t visited) const {
    std::uint64_t m = 0;
    for (std::size_t c = 1; c <= n_; ++c) {
      const std::uint64_t bit = std::uint64_t{1} << (c - 1);
      if (visited & bit) continue;
      if (fuel + kFuelEps >= d(cur, c) + d(c, 0)) m |= bit;
    }
    return m;
  }

  double prize_sum(std::uint64_t mask) const {
    double s = 0.0;
    while (mask) {
      const int b = std::countr_zero(mask);
      s += prize_[b + 1];
      mask &= mask - 1;
    }
    return s;
  }

  bool done() const { return aborted_ || (lex_ && found_); }

  void leaf(double collected) {
    if (lex_) {
      if (collected >= target_ - kTieEps) {
        found_ = true;
        best_routes_ = routes_;
        best_objective_lex_ = collected;
      }
      return;
    }
    if (collected > best_ + kTieEps) {
      best_ = collected;
      best_routes_ = routes_;
    }
  }

  void descend_vehicle(std::size_t v, std::uint64_t visited, double collected) {
    if (v == k_) {
      leaf(collected);
      return;
    }
    search(v, start_node(inst_, v), inst_.vehicles[v].fuel, visited, collected);
  }

  void search(std::size_t v, std::size_t cur, double fuel, std::uint64_t visited, double collected) {
    if (done()) return;
    if (++expansions_ > budget_) {
      aborted_ = true;
      return;
    }
    const MemoKey key{visited, static_cast<std::uint32_t>(cur), static_cast<std::uint32_t>(v)};
    auto [it, inserted] = memo_.try_emplace(key, fuel);
    if (!inserted) {
      if (it->second >= fuel) return;  // an earlier path reached this state with more fuel
      it->second = fuel;
    }

    const std::uint64_t here = reach(cur, fuel, visited);
    const double bound = collected + prize_sum((here | later_reach_[v + 1]) & ~visited);
    if (lex_) {
      if (bound < target_ - kTieEps) return;
    } else if (bound <= best_ + kTieEps) {
      return;
    }

    std::vector<std::size_t> children;
    for (std::uint64_t m = here; m; m &= m - 1) children.push_back(static_cast<std::size_t>(std::countr_zero(m)) + 1);

    if (lex_) {
      descend_vehicle(v + 1, visited, collected);
      for (auto c : children) {
        if (done()) return;
        expand(v, cur, fuel, visited, collected, c);
      }
      return;
    }
    std::stable_sort(children.begin(), children.end(), [&](std::size_t a, std::size_t b) {
      return prize_[a] / std::max(d(cur, a), 1e-12) > prize_[b] / std::max(d(cur, b), 1e-12);
    });
    for (auto c : children) {
      if (done()) return;
      expand(v, cur, fuel, visited, collected, c);
    }
    descend_vehicle(v + 1, visited, collected);
  }

  void expand(std::size_t v, std::size_t cur, double fuel, std::uint64_t visited, double collected,
              std::size_t c) {
    routes_[v].push_back(c);
    search(v, c, fuel - d(cur, c), visited | (std::uint64_t{1} << (c - 1)), collected + prize_[c]);
    routes_[v].pop_back();
  }

  const Instance& inst_;
  std::uint64_t budget_;
  std::size_t n_ = 0, k_ = 0, nodes_ = 0;
  std::vector<double> dist_;
  std::vector<double> prize_;
  std::vector<std::uint64_t> later_reach_;
  std::vector<std::vector<std::size_t>> routes_;
  std::unordered_map<MemoKey, double, MemoHash> memo_;

  std::uint64_t expansions_ = 0;
  bool aborted_ = false;
  bool lex_ = false;
  double best_ = -1.0;
  std::vector<std::vector<std::size_t>> best_routes_;
  double target_ = 0.0;
  bool found_ = false;
  double best_objective_lex_ = 0.0;
};

}  // namespace

Solution solve_exact(const Instance& inst, const ExactOptions& options) {
  if (options.budget == 0) throw std::invalid_argument("solve_exact: budget must be positive");
  BranchAndBound bb(inst, options.budget);
  Solution sol = bb.run();
  if (sol.routes.empty()) sol.routes.assign(inst.k(), {});
  sol.objective = collected_prize(inst, sol.routes);
  return sol;
}

// ---------------------------------------------------------------------------
// Brute force

namespace {

struct SubsetRoute {
  bool feasible = false;
  std::vector<std::size_t> order;
};

class Enumerator {
 public:
  explicit Enumerator(const Instance& inst) : inst_(inst), n_(inst.n()), k_(inst.k()) {
    const std::size_t subsets = std::size_t{1} << n_;
    table_.assign(k_, std::vector<SubsetRoute>(subsets));
    for (std::size_t v = 0; v < k_; ++v)
      for (std::size_t mask = 0; mask < subsets; ++mask) table_[v][mask] = route_for(v, mask);
  }

  Solution run() {
    current_.assign(k_, {});
    assign(0, (std::size_t{1} << n_) - 1, 0.0);
    Solution sol;
    sol.routes = best_routes_.empty() ? std::vector<std::vector<std::size_t>>(k_) : best_routes_;
    sol.objective = collected_prize(inst_, sol.routes);
    sol.optimal = true;
    return sol;
  }

 private:
  // Every permutation of the subset is tried; the first feasible one in
  // lexicographic order is kept.
  SubsetRoute route_for(std::size_t v, std::size_t mask) const {
    std::vector<std::size_t> nodes;
    for (std::size_t c = 1; c <= n_; ++c)
      if (mask & (std::size_t{1} << (c - 1))) nodes.push_back(c);
    do {
      if (route_length(inst_, v, nodes) <= inst_.vehicles[v].fuel + kFuelEps) return {true, nodes};
    } while (std::next_permutation(nodes.begin(), nodes.end()));
    return {};
  }

  void assign(std::size_t v, std::size_t remaining, double collected) {
    if (v == k_) {
      if (collected > best_ + kTieEps) {
        best_ = collected;
        best_routes_ = current_;
      }
      return;
    }
    // Enumerate every subset of the remaining customers, including empty.
    std::size_t sub = remaining;
    while (true) {
      const auto& r = table_[v][sub];
      if (r.feasible) {
        double p = 0.0;
        for (auto c : r.order) p += inst_.customers[c - 1].prize;
        current_[v] = r.order;
        assign(v + 1, remaining & ~sub, collected + p);
      }
      if (sub == 0) break;
      sub = (sub - 1) & remaining;
    }
    current_[v].clear();
  }

  const Instance& inst_;
  std::size_t n_, k_;
  std::vector<std::vector<SubsetRoute>> table_;
  std::vector<std::vector<std::size_t>> current_;
  std::vector<std::vector<std::size_t>> best_routes_;
  double best_ = -1.0;
};

}  // namespace

Solution brute_force_enum(const Instance& inst) {
  if (inst.n() > kBruteForceMaxN)
    throw std::invalid_argument("brute_force_enum: n = " + std::to_string(inst.n()) + " exceeds " +
                                std::to_string(kBruteForceMaxN));
  return Enumerator(inst).run();
}

// ---------------------------------------------------------------------------
// Tsiligirides

Solution tsili_solve(const Instance& inst, const TsiliParams& params, std::uint64_t seed) {
  if (params.samples < 1 || !(params.exponent > 0.0) || params.candidates < 1)
    throw std::invalid_argument("tsili_solve: invalid parameters");
  Rng rng(mix64(seed));
  const std::size_t n = inst.n();
  Solution best;
  best.objective = -1.0;
  std::vector<double> desirability(n + 1);
  std::vector<std::size_t> ranked;
  std::vector<double> weights;
  for (std::size_t s = 0; s < params.samples; ++s) {
    std::vector<bool> visited(n + 1, false);
    std::vector<std::vector<std::size_t>> routes(inst.k());
    double objective = 0.0;
    for (std::size_t v = 0; v < inst.k(); ++v) {
      Point pos = inst.vehicles[v].start;
      double fuel = inst.vehicles[v].fuel;
      while (true) {
        ranked.clear();
        for (std::size_t c = 1; c <= n; ++c) {
          if (visited[c]) continue;
          const auto& cust = inst.customers[c - 1];
          const double to = euclidean(pos, cust.pos);
          if (fuel + kFuelEps < to + euclidean(cust.pos, inst.depot)) continue;
          desirability[c] = std::pow(cust.prize / std::max(to, 1e-9), params.exponent);
          if (desirability[c] > 0.0) ranked.push_back(c);
        }
        if (ranked.empty()) break;
        std::stable_sort(ranked.begin(), ranked.end(),
                         [&](std::size_t a, std::size_t b) { return desirability[a] > desirability[b]; });
        if (ranked.size() > params.candidates) ranked.resize(params.candidates);
        weights.clear();
        for (auto c : ranked) weights.push_back(desirability[c]);
        const std::size_t pick = params.candidates == 1 ? 0 : rng.categorical(weights);
        const std::size_t c = ranked[std::min(pick, ranked.size() - 1)];
        const auto& cust = inst.customers[c - 1];
        fuel -= euclidean(pos, cust.pos);
        pos = cust.pos;
        visited[c] = true;
        routes[v].push_back(c);
        objective += cust.prize;
      }
    }
    if (objective > best.objective) {
      best.objective = objective;
      best.routes = std::move(routes);
    }
  }
  best.objective = collected_prize(inst, best.routes);
  best.optimal = false;
  best.expansions = params.samples;
  return best;
}

}  // namespace mstop
