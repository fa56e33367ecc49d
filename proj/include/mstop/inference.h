#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mstop/ddtm.h"
#include "mstop/oracle.h"
#include "mstop/parallel.h"

namespace mstop {

enum class Strategy { kGreedy, kSampling, kPerm, kPermAug };

const char* to_string(Strategy s);
// Accepts greedy | sampling | perm | perm-aug.
Strategy parse_strategy(const std::string& s);

struct InferConfig {
  Strategy strategy = Strategy::kGreedy;
  std::size_t width = 1280;   // sampled trajectories
  std::uint64_t seed = 0;
  bool include_greedy = true; // add the greedy trajectory to the sampling pool
  Exec exec = Exec::kSerial;

  void validate() const;
};

// One decoding run: vehicle order, transform applied to the instance
// before decoding, and decode mode.
struct Candidate {
  std::vector<std::size_t> order;
  std::size_t transform = 0;
  DecodeMode mode = DecodeMode::kGreedy;
  std::uint64_t seed = 0;
};

// Deterministic enumeration. perm lists orders lexicographically from the
// identity; perm-aug crosses each order with transforms 0..7.
std::vector<Candidate> enumerate_candidates(std::size_t k, const InferConfig& config);

struct InferResult {
  Solution best;          // routes on the original instance
  Trajectory trajectory;  // replayed on the original instance
  Candidate candidate;
  std::size_t best_index = 0;
  std::size_t evaluated = 0;
};

// Best-by-reward over the strategy's trajectory set; ties keep the earliest
// candidate. Decoded actions are replayed on the original instance and the
// winner is verified there; a failure throws ContractViolation.
InferResult infer(const Ddtm& model, const Instance& inst, const InferConfig& config);

struct DominanceReport {
  double greedy = 0.0;
  double perm = 0.0;
  double perm_aug = 0.0;
  bool ok() const { return perm_aug >= perm && perm >= greedy; }
};

DominanceReport dominance_check(const Ddtm& model, const Instance& inst);

}  // namespace mstop
