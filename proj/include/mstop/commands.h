#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mstop/ddtm.h"
#include "mstop/inference.h"
#include "mstop/instance.h"
#include "mstop/trainer.h"

namespace mstop {

// Usage errors map to exit code 1; everything else thrown is a runtime
// failure (exit code 2).
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr std::size_t kExactDefaultMaxN = 20;

// Resolves an output directory: relative paths are placed under $MSTOP_OUT
// when it is set.
std::string resolve_out_dir(const std::string& path);

// Sets the OpenMP pool size (0 = all logical cores) and returns the
// matching execution policy.
Exec configure_workers(std::size_t workers);

struct GenerateArgs {
  std::string preset;  // empty: use `config` as given
  std::size_t count = 1000;
  GenConfig config;
  std::string output;  // dataset path
};

struct GenerateSummary {
  std::size_t count = 0;
  GenConfig config;
  std::string line() const;
};

GenerateSummary cmd_generate(const GenerateArgs& args);

struct SolveArgs {
  std::string dataset;
  std::string method = "exact";  // exact | brute | tsili
  bool force = false;            // lift the exact size limit
  std::size_t max_n = kExactDefaultMaxN;
  TsiliParams tsili;
  std::uint64_t seed = 0;
  bool reference = true;         // tsili: compute gaps against exact when within the size limit
  std::string out_dir;
  Exec exec = Exec::kParallel;
};

struct SolveSummary {
  std::size_t count = 0;
  double mean_objective = 0.0;
  double mean_gap = 0.0;  // fraction
  bool has_reference = false;
  std::size_t optimal = 0;
  double wall_seconds = 0.0;
  std::vector<Solution> solutions;
};

// Writes results.jsonl, summary.json, timing.csv and manifest.json.
SolveSummary cmd_solve(const SolveArgs& args);

struct TrainArgs {
  DdtmConfig model;
  TrainConfig train;
  std::string out_dir;
};

// Writes metrics.csv, timing.csv, best.ckpt, last.ckpt and manifest.json.
TrainResult cmd_train(const TrainArgs& args, std::ostream& log);

struct EvalArgs {
  std::string dataset;
  std::string checkpoint;  // empty: randomly initialized parameters
  std::optional<DdtmConfig> model;  // default: manifest.json beside the checkpoint
  std::uint64_t model_seed = 2;
  std::vector<Strategy> strategies{Strategy::kGreedy, Strategy::kPerm, Strategy::kPermAug};
  InferConfig infer;
  std::string reference = "auto";  // auto | exact | best
  std::size_t max_n = kExactDefaultMaxN;
  std::string out_dir;
  Exec exec = Exec::kParallel;
};

struct StrategyRow {
  std::string method;
  double mean_objective = 0.0;
  double mean_gap = 0.0;  // fraction
  std::size_t trajectories = 0;
  double wall_seconds = 0.0;
  std::size_t verified = 0;
};

struct EvalSummary {
  std::string reference;  // "exact" or "best"
  std::vector<StrategyRow> rows;
  std::size_t count = 0;
};

// Writes eval.csv, results.jsonl, timing.csv and manifest.json; `table`
// receives the aligned text table.
EvalSummary cmd_eval(const EvalArgs& args, std::ostream& table);

std::string format_table(const EvalSummary& s);

// Gap of a maximization objective against a reference; 0 when the
// reference is 0.
double gap(double reference, double objective);

}  // namespace mstop
