#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "mstop/commands.h"

using namespace mstop;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mstop_cmd_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::size_t line_count(const fs::path& p) {
  const auto s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

fs::path make_dataset(const fs::path& dir, std::size_t count, GenConfig g) {
  GenerateArgs a;
  a.count = count;
  a.config = g;
  a.output = (dir / "data.jsonl").string();
  cmd_generate(a);
  return a.output;
}

TrainArgs tiny_train(const fs::path& out) {
  TrainArgs a;
  a.model = {8, 2, 16, 1, 1, 10.0};
  a.train.epochs = 2;
  a.train.steps_per_epoch = 2;
  a.train.batch = 8;
  a.train.validation_size = 4;
  a.train.problem = {5, 2, 1.5, PrizeMode::kConstant, 0};
  a.out_dir = out.string();
  return a;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(MSTOP_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_SUITE("commands") {
  TEST_CASE("generate applies presets") {
    const auto dir = scratch("gen");
    GenerateArgs a;
    a.preset = "mstop10";
    a.count = 1000;
    a.config.seed = 7;
    a.output = (dir / "m10.jsonl").string();
    const auto s = cmd_generate(a);
    CHECK(s.config.n == 10);
    CHECK(s.config.k == 2);
    CHECK(s.config.t_max == 1.5);
    CHECK(line_count(a.output) == 1000);
    CHECK(fs::exists(a.output + ".manifest.json"));
    CHECK(s.line() == "count=1000 n=10 K=2 t_max=1.5 prize_mode=constant seed=7");

    a.preset = "mstop50";
    a.count = 2;
    const auto s50 = cmd_generate(a);
    CHECK(s50.config.n == 50);
    CHECK(s50.config.k == 3);
    CHECK(s50.config.t_max == 3.0);

    a.preset = "mstop10";
    a.count = 0;
    cmd_generate(a);
    CHECK(fs::file_size(a.output) == 0);
    CHECK(load_dataset(a.output).empty());

    a.preset = "mstop15";
    CHECK_THROWS_AS(cmd_generate(a), UsageError);
    fs::remove_all(dir);
  }

  TEST_CASE("solve writes verified records and enforces size limits") {
    const auto dir = scratch("solve");
    const auto data = make_dataset(dir, 12, {6, 2, 1.5, PrizeMode::kUniform, 3});
    SolveArgs a;
    a.dataset = data.string();
    a.out_dir = (dir / "exact").string();
    const auto ex = cmd_solve(a);
    CHECK(ex.count == 12);
    CHECK(ex.optimal == 12);
    CHECK(ex.mean_gap == 0.0);
    for (auto f : {"results.jsonl", "summary.json", "timing.csv", "manifest.json"}) CHECK(fs::exists(dir / "exact" / f));
    CHECK(line_count(dir / "exact" / "results.jsonl") == 12);

    a.method = "tsili";
    a.tsili.samples = 32;
    a.out_dir = (dir / "tsili").string();
    const auto ts = cmd_solve(a);
    CHECK(ts.has_reference);
    CHECK(ts.mean_objective <= ex.mean_objective);
    double g = 0.0;
    for (std::size_t i = 0; i < 12; ++i) g += gap(ex.solutions[i].objective, ts.solutions[i].objective) / 12.0;
    CHECK(ts.mean_gap == doctest::Approx(g).epsilon(1e-12));

    a.method = "exact";
    a.max_n = 5;
    CHECK_THROWS_AS(cmd_solve(a), UsageError);
    a.force = true;
    CHECK_NOTHROW(cmd_solve(a));
    a.method = "simplex";
    CHECK_THROWS_AS(cmd_solve(a), UsageError);
    a.method = "exact";
    a.dataset = (dir / "missing.jsonl").string();
    CHECK_THROWS_AS(cmd_solve(a), UsageError);
    fs::remove_all(dir);
  }

  TEST_CASE("output directories are never half-written") {
    const auto dir = scratch("staging");
    fs::create_directories(dir / "busy");
    std::ofstream(dir / "busy" / "keep.txt") << "x";
    const auto data = make_dataset(dir, 2, {4, 2, 1.5, PrizeMode::kConstant, 1});
    SolveArgs a;
    a.dataset = data.string();
    a.out_dir = (dir / "busy").string();
    CHECK_THROWS(cmd_solve(a));
    CHECK(fs::exists(dir / "busy" / "keep.txt"));
    CHECK_FALSE(fs::exists(dir / "busy.partial"));
    fs::remove_all(dir);
  }

  TEST_CASE("train echoes its configuration and writes artifacts") {
    const auto dir = scratch("train");
    auto a = tiny_train(dir / "run");
    a.train.alpha = 0.01;
    std::ostringstream log;
    const auto r = cmd_train(a, log);
    CHECK(r.epochs.size() == 2);
    CHECK(log.str().find("baseline=instance-aug alpha=0.01") != std::string::npos);
    for (auto f : {"metrics.csv", "timing.csv", "best.ckpt", "last.ckpt", "summary.json", "manifest.json"})
      CHECK(fs::exists(dir / "run" / f));
    CHECK(line_count(dir / "run" / "metrics.csv") == 3);
    CHECK(slurp(dir / "run" / "manifest.json").find("\"greedy-rollout\"") == std::string::npos);

    auto g = tiny_train(dir / "ablation");
    g.train.baseline = BaselineKind::kGreedyRollout;
    g.train.augment = 1;
    g.train.alpha = 0.0;
    std::ostringstream glog;
    cmd_train(g, glog);
    CHECK(glog.str().find("baseline=greedy-rollout alpha=0 ") != std::string::npos);
    fs::remove_all(dir);
  }

  TEST_CASE("eval reports dominance and a zero reference gap") {
    const auto dir = scratch("eval");
    const auto data = make_dataset(dir, 10, {6, 2, 1.5, PrizeMode::kUniform, 4});
    EvalArgs a;
    a.dataset = data.string();
    a.model = DdtmConfig{8, 2, 16, 1, 1, 10.0};
    a.out_dir = (dir / "out").string();
    std::ostringstream table;
    const auto s = cmd_eval(a, table);
    CHECK(s.reference == "exact");
    REQUIRE(s.rows.size() == 4);
    CHECK(s.rows[0].method == "exact");
    CHECK(s.rows[0].mean_gap == 0.0);
    CHECK(s.rows[1].mean_objective <= s.rows[2].mean_objective);
    CHECK(s.rows[2].mean_objective <= s.rows[3].mean_objective);
    CHECK(s.rows[3].trajectories == 10 * 16);
    for (const auto& row : s.rows) CHECK(row.verified == 10);
    const auto csv = slurp(dir / "out" / "eval.csv");
    CHECK(csv.find("exact,") != std::string::npos);
    CHECK(csv.find(",0.00,") != std::string::npos);
    CHECK(table.str().find("perm-aug") != std::string::npos);

    a.reference = "best";
    a.out_dir = (dir / "best").string();
    std::ostringstream t2;
    const auto b = cmd_eval(a, t2);
    REQUIRE(b.rows.size() == 3);
    CHECK(b.rows[2].mean_gap == 0.0);

    a.reference = "oracle";
    CHECK_THROWS_AS(cmd_eval(a, t2), UsageError);
    fs::remove_all(dir);
  }

  TEST_CASE("eval rejects a checkpoint of a different shape") {
    const auto dir = scratch("mismatch");
    const auto data = make_dataset(dir, 2, {5, 2, 1.5, PrizeMode::kConstant, 0});
    std::ostringstream log;
    cmd_train(tiny_train(dir / "run"), log);
    EvalArgs a;
    a.dataset = data.string();
    a.checkpoint = (dir / "run" / "best.ckpt").string();
    a.out_dir = (dir / "ok").string();
    std::ostringstream t;
    CHECK_NOTHROW(cmd_eval(a, t));
    a.model = DdtmConfig{16, 2, 16, 1, 1, 10.0};
    a.out_dir = (dir / "bad").string();
    try {
      cmd_eval(a, t);
      FAIL("expected a shape mismatch");
    } catch (const std::runtime_error& e) {
      const std::string msg = e.what();
      CHECK(msg.find("shape mismatch") != std::string::npos);
      CHECK(msg.find("8") != std::string::npos);
      CHECK(msg.find("16") != std::string::npos);
    }
    fs::remove_all(dir);
  }

  TEST_CASE("reruns produce byte-identical outputs") {
    const auto dir = scratch("rerun");
    const auto data = make_dataset(dir, 6, {5, 2, 1.5, PrizeMode::kUniform, 9});
    for (const char* run : {"a", "b"}) {
      std::ostringstream log;
      cmd_train(tiny_train(dir / run / "train"), log);
      SolveArgs s;
      s.dataset = data.string();
      s.method = "tsili";
      s.tsili.samples = 16;
      s.out_dir = (dir / run / "solve").string();
      cmd_solve(s);
      EvalArgs e;
      e.dataset = data.string();
      e.checkpoint = (dir / run / "train" / "best.ckpt").string();
      e.strategies = {Strategy::kGreedy, Strategy::kSampling, Strategy::kPermAug};
      e.infer.width = 8;
      e.out_dir = (dir / run / "eval").string();
      std::ostringstream t;
      cmd_eval(e, t);
    }
    for (const char* f : {"train/metrics.csv", "train/best.ckpt", "train/last.ckpt", "train/summary.json",
                          "train/manifest.json", "solve/results.jsonl", "solve/summary.json", "eval/eval.csv",
                          "eval/results.jsonl"}) {
      CAPTURE(f);
      CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
    }
    fs::remove_all(dir);
  }

  TEST_CASE("relative output paths honour the output root variable") {
    ::setenv("MSTOP_OUT", "/tmp/mstop_root", 1);
    CHECK(resolve_out_dir("runs/x") == "/tmp/mstop_root/runs/x");
    CHECK(resolve_out_dir("/abs/y") == "/abs/y");
    ::unsetenv("MSTOP_OUT");
    CHECK(resolve_out_dir("runs/x") == "runs/x");
  }

  TEST_CASE("gap orientation") {
    CHECK(gap(4.0, 3.0) == 0.25);
    CHECK(gap(4.0, 4.0) == 0.0);
    CHECK(gap(0.0, 0.0) == 0.0);
  }

  TEST_CASE("command-line exit codes") {
    const auto dir = scratch("cli");
    const std::string data = (dir / "d.jsonl").string();
    CHECK(run_cli("--help") == 0);
    CHECK(run_cli("generate --preset mstop10 --count 3 -o " + data) == 0);
    CHECK(run_cli("generate --preset nope -o " + data) == 1);
    CHECK(run_cli("frobnicate") == 1);
    CHECK(run_cli("solve " + data + " --method exact --max-n 4 --out " + (dir / "s").string()) == 1);
    CHECK(run_cli("eval " + data + " --strategies beam --out " + (dir / "e").string()) == 1);
    std::ofstream(dir / "bad.jsonl") << "{not json\n";
    CHECK(run_cli("solve " + (dir / "bad.jsonl").string() + " --out " + (dir / "b").string()) == 2);
    std::ofstream(dir / "cfg.ini") << "[generate]\npreset=mstop20\ncount=2\n";
    CHECK(run_cli("--config " + (dir / "cfg.ini").string() + " generate -o " + data) == 0);
    CHECK(load_dataset(data).at(0).n() == 20);
    fs::remove_all(dir);
  }
}
