#include "mstop/commands.h"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>
#include <omp.h>

#include "mstop/rng.h"

namespace mstop {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kToolVersion = "0.1.0";

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

json versions() {
  return {{"tool", kToolVersion}, {"dataset", kDatasetVersion}, {"checkpoint", nk::kCheckpointVersion}};
}

json to_json(const GenConfig& g) {
  return {{"n", g.n}, {"K", g.k}, {"t_max", g.t_max}, {"prize_mode", to_string(g.prize_mode)}, {"seed", g.seed}};
}

json to_json(const DdtmConfig& c) {
  return {{"d", c.d},
          {"heads", c.heads},
          {"ff_width", c.ff_width},
          {"enc_layers", c.enc_layers},
          {"dec_layers", c.dec_layers},
          {"clip", c.clip}};
}

DdtmConfig ddtm_from_json(const json& j) {
  DdtmConfig c;
  c.d = j.at("d").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.ff_width = j.at("ff_width").get<std::size_t>();
  c.enc_layers = j.at("enc_layers").get<std::size_t>();
  c.dec_layers = j.at("dec_layers").get<std::size_t>();
  c.clip = j.at("clip").get<double>();
  return c;
}

json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"steps_per_epoch", c.steps_per_epoch},
          {"batch", c.batch},
          {"augment", c.augment},
          {"alpha", c.alpha},
          {"baseline", to_string(c.baseline)},
          {"lr", c.lr},
          {"clip_norm", c.clip_norm},
          {"bn_momentum", c.bn_momentum},
          {"validation_size", c.validation_size},
          {"problem", to_json(c.problem)},
          {"data_seed", c.data_seed},
          {"model_seed", c.model_seed},
          {"rollout_seed", c.rollout_seed}};
}

// Output is staged in a sibling directory and renamed into place on
// success, so a failed run never leaves a half-written result directory.
class OutputDir {
 public:
  explicit OutputDir(const std::string& path) : final_(resolve_out_dir(path)) {
    if (final_.empty()) throw UsageError("an output directory is required");
    if (fs::exists(final_) && !fs::is_directory(final_))
      throw std::runtime_error("output path exists and is not a directory: " + final_.string());
    if (fs::exists(final_) && !fs::is_empty(final_) && !fs::exists(final_ / "manifest.json"))
      throw std::runtime_error("refusing to replace non-empty directory without a manifest: " + final_.string());
    staging_ = final_;
    staging_ += ".partial";
    fs::remove_all(staging_);
    fs::create_directories(staging_);
  }
  ~OutputDir() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(staging_, ec);
    }
  }
  fs::path file(const std::string& name) const { return staging_ / name; }
  void commit() {
    fs::remove_all(final_);
    if (final_.has_parent_path()) fs::create_directories(final_.parent_path());
    fs::rename(staging_, final_);
    committed_ = true;
  }
  const fs::path& path() const { return final_; }

 private:
  fs::path final_;
  fs::path staging_;
  bool committed_ = false;
};

std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  return os;
}

void write_json(const fs::path& p, const json& j) {
  auto os = open_out(p);
  os << j.dump(2) << "\n";
}

std::vector<Instance> load_checked(const std::string& path) {
  if (path.empty()) throw UsageError("a dataset path is required");
  if (!fs::exists(path)) throw UsageError("dataset not found: " + path);
  return load_dataset(path);
}

std::size_t max_customers(const std::vector<Instance>& instances) {
  std::size_t m = 0;
  for (const auto& i : instances) m = std::max(m, i.n());
  return m;
}

}  // namespace

std::string resolve_out_dir(const std::string& path) {
  if (path.empty()) return path;
  fs::path p(path);
  if (p.is_relative()) {
    if (const char* root = std::getenv("MSTOP_OUT"); root != nullptr && *root != '\0') p = fs::path(root) / p;
  }
  return p.lexically_normal().string();
}

Exec configure_workers(std::size_t workers) {
  if (workers > 0) omp_set_num_threads(static_cast<int>(workers));
  return workers == 1 ? Exec::kSerial : Exec::kParallel;
}

double gap(double reference, double objective) {
  return reference > 0.0 ? (reference - objective) / reference : 0.0;
}

std::string GenerateSummary::line() const {
  return fmt::format("count={} n={} K={} t_max={} prize_mode={} seed={}", count, config.n, config.k, config.t_max,
                     to_string(config.prize_mode), config.seed);
}

GenerateSummary cmd_generate(const GenerateArgs& args) {
  GenConfig g = args.config;
  if (!args.preset.empty()) {
    const auto p = find_preset(args.preset);
    if (!p) throw UsageError("unknown preset '" + args.preset + "' (expected mstop10|mstop20|mstop50|mstop70)");
    g.n = p->n;
    g.k = p->k;
    g.t_max = p->t_max;
  }
  if (args.output.empty()) throw UsageError("an output dataset path is required");
  const auto instances = generate_many(g, args.count);
  const fs::path out = resolve_out_dir(args.output);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_dataset(instances, out.string());
  json manifest = {{"command", "generate"},
                   {"versions", versions()},
                   {"preset", args.preset},
                   {"count", args.count},
                   {"config", to_json(g)}};
  write_json(out.string() + ".manifest.json", manifest);
  return {args.count, g};
}

SolveSummary cmd_solve(const SolveArgs& args) {
  if (args.method != "exact" && args.method != "brute" && args.method != "tsili")
    throw UsageError("unknown method '" + args.method + "' (expected exact|brute|tsili)");
  const auto instances = load_checked(args.dataset);
  const std::size_t n_max = max_customers(instances);
  if (args.method == "exact" && n_max > args.max_n && !args.force)
    throw UsageError(fmt::format("exact solver limited to n <= {} (dataset has n = {}); pass --force to override",
                                 args.max_n, n_max));
  if (args.method == "brute" && n_max > kBruteForceMaxN)
    throw UsageError(fmt::format("brute force supports n <= {} (dataset has n = {})", kBruteForceMaxN, n_max));
  OutputDir out(args.out_dir);

  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t m = instances.size();
  SolveSummary s;
  s.count = m;
  s.solutions.resize(m);
  std::vector<double> reference(m, 0.0);
  std::vector<double> times(m, 0.0);
  const bool want_ref = args.method == "tsili" && args.reference && n_max <= args.max_n;
  for_each_index(m, args.exec, [&](std::size_t i) {
    const auto ti = std::chrono::steady_clock::now();
    if (args.method == "exact")
      s.solutions[i] = solve_exact(instances[i]);
    else if (args.method == "brute")
      s.solutions[i] = brute_force_enum(instances[i]);
    else
      s.solutions[i] = tsili_solve(instances[i], args.tsili, derive_seed(args.seed, {i}));
    times[i] = seconds_since(ti);
    if (want_ref) reference[i] = solve_exact(instances[i]).objective;
  });
  s.wall_seconds = seconds_since(t0);
  s.has_reference = want_ref || args.method != "tsili";

  auto results = open_out(out.file("results.jsonl"));
  auto timing = open_out(out.file("timing.csv"));
  timing << "instance,wall_seconds\n";
  for (std::size_t i = 0; i < m; ++i) {
    const auto& sol = s.solutions[i];
    const VerifyReport rep = verify(instances[i], sol);
    if (!rep.ok()) throw std::runtime_error(fmt::format("instance {}: solution fails verification: {}", i, rep.summary()));
    const double ref = s.has_reference ? (want_ref ? reference[i] : sol.objective) : sol.objective;
    const double g = gap(ref, sol.objective);
    json rec = {{"instance", i},
                {"method", args.method},
                {"objective", sol.objective},
                {"optimal", sol.optimal},
                {"gap", g},
                {"routes", sol.routes}};
    results << rec.dump() << "\n";
    timing << fmt::format("{},{}\n", i, times[i]);
    s.mean_objective += sol.objective;
    s.mean_gap += g;
    s.optimal += sol.optimal ? 1 : 0;
  }
  if (m > 0) {
    s.mean_objective /= static_cast<double>(m);
    s.mean_gap /= static_cast<double>(m);
  }
  timing << fmt::format("total,{}\n", s.wall_seconds);
  write_json(out.file("summary.json"), {{"count", m},
                                        {"method", args.method},
                                        {"mean_objective", s.mean_objective},
                                        {"mean_gap_percent", s.mean_gap * 100.0},
                                        {"reference", s.has_reference ? "exact" : "none"},
                                        {"optimal", s.optimal}});
  write_json(out.file("manifest.json"),
             {{"command", "solve"},
              {"versions", versions()},
              {"dataset", args.dataset},
              {"method", args.method},
              {"force", args.force},
              {"max_n", args.max_n},
              {"seed", args.seed},
              {"tsili", {{"samples", args.tsili.samples}, {"exponent", args.tsili.exponent}, {"candidates", args.tsili.candidates}}},
              {"reference", args.reference}});
  results.close();
  timing.close();
  out.commit();
  return s;
}

TrainResult cmd_train(const TrainArgs& args, std::ostream& log) {
  args.model.validate();
  args.train.validate();
  OutputDir out(args.out_dir);
  TrainConfig cfg = args.train;
  cfg.checkpoint_dir = out.file("").string();

  write_json(out.file("manifest.json"),
             {{"command", "train"}, {"versions", versions()}, {"model", to_json(args.model)}, {"train", to_json(cfg)}});
  log << fmt::format("train: baseline={} alpha={} lr={} batch={} epochs={} steps={} n={} K={}\n",
                     to_string(cfg.baseline), cfg.alpha, cfg.lr, cfg.batch, cfg.epochs, cfg.steps_per_epoch,
                     cfg.problem.n, cfg.problem.k);

  Ddtm model(args.model);
  model.init(cfg.model_seed);
  auto metrics = open_out(out.file("metrics.csv"));
  auto timing = open_out(out.file("timing.csv"));
  metrics << "epoch,train_reward,baseline,entropy,grad_norm,validation,raw_instances,trajectories\n";
  timing << "epoch,wall_seconds\n";
  const TrainResult result = train(cfg, model, [&](const EpochReport& e) {
    metrics << fmt::format("{},{},{},{},{},{},{},{}\n", e.epoch, e.train_reward, e.baseline, e.entropy, e.grad_norm,
                           e.validation, e.raw_instances, e.trajectories);
    metrics.flush();
    timing << fmt::format("{},{}\n", e.epoch, e.wall_seconds);
    log << fmt::format("epoch {:3d}  reward {:.4f}  baseline {:.4f}  entropy {:.4f}  |g| {:.4f}  val {:.4f}  ({:.1f}s)\n",
                       e.epoch, e.train_reward, e.baseline, e.entropy, e.grad_norm, e.validation, e.wall_seconds);
    log.flush();
  });
  if (cfg.epochs == 0) nk::save_checkpoint(out.file("last.ckpt").string(), model.params());
  write_json(out.file("summary.json"), {{"initial_validation", result.initial_validation},
                                        {"best_validation", result.best_validation},
                                        {"epochs", result.epochs.size()}});
  metrics.close();
  timing.close();
  out.commit();
  log << fmt::format("validation {:.4f} -> best {:.4f}; wrote {}\n", result.initial_validation,
                     result.best_validation, out.path().string());
  return result;
}

EvalSummary cmd_eval(const EvalArgs& args, std::ostream& table) {
  if (args.reference != "auto" && args.reference != "exact" && args.reference != "best")
    throw UsageError("unknown reference '" + args.reference + "' (expected auto|exact|best)");
  if (args.strategies.empty()) throw UsageError("at least one strategy is required");
  const auto instances = load_checked(args.dataset);

  DdtmConfig mc;
  if (args.model) {
    mc = *args.model;
  } else if (!args.checkpoint.empty()) {
    const fs::path manifest = fs::path(args.checkpoint).parent_path() / "manifest.json";
    if (!fs::exists(manifest))
      throw UsageError("no model configuration: pass model flags or keep manifest.json beside the checkpoint");
    std::ifstream is(manifest);
    mc = ddtm_from_json(json::parse(is).at("model"));
  }
  Ddtm model(mc);
  model.init(args.model_seed);
  if (!args.checkpoint.empty()) {
    if (!fs::exists(args.checkpoint)) throw UsageError("checkpoint not found: " + args.checkpoint);
    nk::load_checkpoint(args.checkpoint, model.params());
  }

  const std::size_t m = instances.size();
  const std::size_t n_max = max_customers(instances);
  std::string ref_kind = args.reference;
  if (ref_kind == "auto") ref_kind = n_max <= args.max_n ? "exact" : "best";
  if (ref_kind == "exact" && n_max > args.max_n)
    throw UsageError(fmt::format("exact reference limited to n <= {} (dataset has n = {})", args.max_n, n_max));
  OutputDir out(args.out_dir);

  const std::size_t S = args.strategies.size();
  std::vector<std::vector<InferResult>> res(S, std::vector<InferResult>(m));
  EvalSummary summary;
  summary.reference = ref_kind;
  summary.count = m;
  for (std::size_t s = 0; s < S; ++s) {
    InferConfig ic = args.infer;
    ic.strategy = args.strategies[s];
    ic.exec = Exec::kSerial;
    const auto t0 = std::chrono::steady_clock::now();
    for_each_index(m, args.exec, [&](std::size_t i) { res[s][i] = infer(model, instances[i], ic); });
    StrategyRow row;
    row.method = to_string(ic.strategy);
    row.wall_seconds = seconds_since(t0);
    summary.rows.push_back(row);
  }

  std::vector<double> reference(m, 0.0);
  double exact_seconds = 0.0;
  if (ref_kind == "exact") {
    const auto t0 = std::chrono::steady_clock::now();
    for_each_index(m, args.exec, [&](std::size_t i) { reference[i] = solve_exact(instances[i]).objective; });
    exact_seconds = seconds_since(t0);
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t s = 0; s < S; ++s) reference[i] = std::max(reference[i], res[s][i].best.objective);
  }

  auto results = open_out(out.file("results.jsonl"));
  for (std::size_t s = 0; s < S; ++s) {
    auto& row = summary.rows[s];
    for (std::size_t i = 0; i < m; ++i) {
      const auto& r = res[s][i];
      if (verify(instances[i], r.best).ok()) ++row.verified;
      row.mean_objective += r.best.objective;
      row.mean_gap += gap(reference[i], r.best.objective);
      row.trajectories += r.evaluated;
      json rec = {{"instance", i},
                  {"strategy", row.method},
                  {"reward", r.best.objective},
                  {"trajectories", r.evaluated},
                  {"order", r.candidate.order},
                  {"transform", r.candidate.transform},
                  {"routes", r.best.routes}};
      results << rec.dump() << "\n";
    }
    if (m > 0) {
      row.mean_objective /= static_cast<double>(m);
      row.mean_gap /= static_cast<double>(m);
    }
  }
  if (ref_kind == "exact") {
    StrategyRow row;
    row.method = "exact";
    for (double r : reference) row.mean_objective += r;
    if (m > 0) row.mean_objective /= static_cast<double>(m);
    row.verified = m;
    row.wall_seconds = exact_seconds;
    summary.rows.insert(summary.rows.begin(), row);
  }

  auto csv = open_out(out.file("eval.csv"));
  auto timing = open_out(out.file("timing.csv"));
  csv << "method,mean_objective,gap_percent,trajectories,verified,count\n";
  timing << "method,wall_seconds\n";
  for (const auto& row : summary.rows) {
    csv << fmt::format("{},{},{:.2f},{},{},{}\n", row.method, row.mean_objective, row.mean_gap * 100.0,
                       row.trajectories, row.verified, m);
    timing << fmt::format("{},{}\n", row.method, row.wall_seconds);
  }
  std::vector<std::string> names;
  for (auto st : args.strategies) names.emplace_back(to_string(st));
  write_json(out.file("manifest.json"), {{"command", "eval"},
                                         {"versions", versions()},
                                         {"dataset", args.dataset},
                                         {"checkpoint", args.checkpoint},
                                         {"model", to_json(mc)},
                                         {"model_seed", args.model_seed},
                                         {"strategies", names},
                                         {"width", args.infer.width},
                                         {"seed", args.infer.seed},
                                         {"include_greedy", args.infer.include_greedy},
                                         {"reference", ref_kind},
                                         {"max_n", args.max_n}});
  results.close();
  csv.close();
  timing.close();
  out.commit();
  table << format_table(summary);
  return summary;
}

std::string format_table(const EvalSummary& s) {
  std::ostringstream os;
  os << fmt::format("{:<10} {:>10} {:>8} {:>12} {:>10}\n", "method", "obj", "gap", "trajectories", "time");
  for (const auto& r : s.rows)
    os << fmt::format("{:<10} {:>10.4f} {:>7.2f}% {:>12} {:>9.2f}s\n", r.method, r.mean_objective, r.mean_gap * 100.0,
                      r.trajectories, r.wall_seconds);
  os << fmt::format("reference: {} ({} instances)\n", s.reference, s.count);
  return os.str();
}

}  // namespace mstop
