#pragma once

#include <array>
#include <initializer_list>

#include "mstop/instance.h"

namespace testutil {

// Customers as {x, y, prize}; vehicles as {x, y, fuel}.
inline mstop::Instance make_instance(mstop::Point depot, std::initializer_list<std::array<double, 3>> customers,
                                     std::initializer_list<std::array<double, 3>> vehicles, double t_max = 2.0) {
  mstop::Instance inst;
  inst.depot = depot;
  for (const auto& c : customers) inst.customers.push_back({{c[0], c[1]}, c[2]});
  for (const auto& v : vehicles) inst.vehicles.push_back({{v[0], v[1]}, v[2]});
  inst.t_max = t_max;
  return inst;
}

inline mstop::GenConfig gen(std::size_t n, std::size_t k, double t_max, mstop::PrizeMode mode, std::uint64_t seed) {
  return {n, k, t_max, mode, seed};
}

}  // namespace testutil
