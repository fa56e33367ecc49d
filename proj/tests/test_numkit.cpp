#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "gradcheck.h"
#include "mstop/numkit.h"
#include "mstop/rng.h"

using namespace mstop;
using namespace mstop::nk;

TEST_SUITE("numkit") {
  TEST_CASE("softmax of equal logits is uniform") {
    Tape t;
    auto p = softmax(t.constant({1, 2}, {0.0, 0.0}));
    CHECK(p.at(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(p.at(0, 1) == doctest::Approx(0.5).epsilon(1e-15));
  }

  TEST_CASE("identity matmul returns the operand") {
    Tape t;
    auto id = t.constant({2, 2}, {1, 0, 0, 1});
    auto m = t.constant({2, 2}, {1.5, -2.0, 3.25, 4.0});
    auto r = matmul(id, m);
    for (std::size_t i = 0; i < 4; ++i) CHECK(r.values()[i] == m.values()[i]);
  }

  TEST_CASE("masked softmax splits mass between the unmasked entries") {
    Tape t;
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> mask{0.0, -inf, 0.0};
    auto p = softmax(t.constant({1, 3}, {2, 2, 2}), mask);
    CHECK(p.at(0, 0) == doctest::Approx(0.5));
    CHECK(p.at(0, 1) == 0.0);
    CHECK(p.at(0, 2) == doctest::Approx(0.5));
  }

  TEST_CASE("a fully masked row keeps full precision") {
    Tape t;
    const std::vector<double> mask{kMasked, kMasked, kMasked};
    const std::vector<double> x{0.1, 0.1 + 1e-9, -0.3};
    auto p = softmax(t.constant({1, 3}, x), mask);
    auto q = softmax(t.constant({1, 3}, x));
    auto lp = log_softmax(t.constant({1, 3}, x), mask);
    auto lq = log_softmax(t.constant({1, 3}, x));
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(p.at(0, c) == q.at(0, c));
      CHECK(lp.at(0, c) == lq.at(0, c));
    }
    CHECK(p.at(0, 1) > p.at(0, 0));
  }

  TEST_CASE("softmax rows sum to one") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t rows = 1 + rng.below(4), cols = 2 + rng.below(6);
      std::vector<double> v(rows * cols);
      for (auto& x : v) x = rng.uniform(-20, 20);
      auto mask = gradcheck::random_mask(rng, rows, cols);
      Tape t;
      auto p = softmax(t.constant({rows, cols}, v), mask);
      for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
          s += p.at(r, c);
          if (mask[r * cols + c] <= kMasked) CHECK(p.at(r, c) == 0.0);
        }
        CHECK(std::abs(s - 1.0) <= 1e-9);
      }
    }
  }

  TEST_CASE("derivative of x squared at 3 is 6") {
    Tape t;
    auto x = t.variable({1, 1}, {3.0});
    t.backward(mul(x, x));
    CHECK(t.grad(x)[0] == doctest::Approx(6.0));
  }

  TEST_CASE("softmax-weighted sum gradient at the origin") {
    Tape t;
    auto x = t.variable({1, 2}, {0.0, 0.0});
    t.backward(sum(mul(softmax(x), t.constant({1, 2}, {1.0, 0.0}))));
    CHECK(t.grad(x)[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(t.grad(x)[1] == doctest::Approx(-0.25).epsilon(1e-12));
  }

  TEST_CASE("loss independent of a parameter gives it zero gradient") {
    ParameterSet ps;
    const auto w = ps.add("w", {2, 2});
    ps.init_uniform(1);
    Tape t(&ps);
    auto unused = t.param(w);
    (void)unused;
    auto c = t.constant({1, 2}, {1.0, 2.0});
    auto x = t.variable({1, 2}, {0.5, 0.5});
    t.backward(sum(mul(c, x)));
    Gradients g;
    t.accumulate(g);
    REQUIRE(g.size() == 1);
    for (double v : g[w]) CHECK(v == 0.0);
    CHECK_THROWS_AS(t.grad(c), std::invalid_argument);
  }

  TEST_CASE("shape errors are reported") {
    Tape t;
    auto a = t.constant({2, 3}, std::vector<double>(6, 1.0));
    auto b = t.constant({2, 3}, std::vector<double>(6, 1.0));
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
    CHECK_THROWS_AS(add(a, transpose(b)), ShapeError);
  }

  TEST_CASE("every op kind matches central differences") {
    for (const auto& kind : gradcheck::op_kinds()) {
      CAPTURE(kind);
      const auto r = gradcheck::check_kind(kind, 100, 2024);
      CHECK(r.max_rel_err <= gradcheck::kTolerance);
    }
  }

  TEST_CASE("eval-mode batch norm is a fixed affine map") {
    ParameterSet ps;
    const auto rm = ps.add("m", {1, 2}, false);
    const auto rv = ps.add("v", {1, 2}, false);
    ps[rm].value = {0.5, -1.0};
    ps[rv].value = {4.0, 0.25};
    Tape t(&ps);
    auto x = t.constant({3, 2}, {1, 2, 3, 4, 5, 6});
    auto y = batch_norm(x, t.constant({1, 2}, {2.0, 1.0}), t.constant({1, 2}, {0.1, 0.0}), rm, rv, NormMode::kEval);
    for (std::size_t r = 0; r < 3; ++r) {
      CHECK(y.at(r, 0) == doctest::Approx(2.0 * (x.at(r, 0) - 0.5) / std::sqrt(4.0 + 1e-5) + 0.1));
      CHECK(y.at(r, 1) == doctest::Approx((x.at(r, 1) + 1.0) / std::sqrt(0.25 + 1e-5)));
    }
    CHECK(t.norm_observations().empty());
  }

  TEST_CASE("train-mode batch norm records row statistics") {
    ParameterSet ps;
    const auto rm = ps.add("m", {1, 1}, false);
    const auto rv = ps.add("v", {1, 1}, false);
    ps[rv].value = {1.0};
    Tape t(&ps);
    auto y = batch_norm(t.constant({2, 1}, {1.0, 3.0}), t.constant({1, 1}, {1.0}), t.constant({1, 1}, {0.0}), rm, rv,
                        NormMode::kTrain);
    CHECK(y.at(0, 0) == doctest::Approx(-1.0 / std::sqrt(1.0 + 1e-5)));
    REQUIRE(t.norm_observations().size() == 1);
    CHECK(t.norm_observations()[0].mean[0] == doctest::Approx(2.0));
    CHECK(t.norm_observations()[0].var[0] == doctest::Approx(1.0));
  }

  TEST_CASE("tape replay is bit-identical") {
    auto run = [] {
      Rng rng(77);
      Tape t;
      auto a = t.variable({3, 4}, gradcheck::random_input(rng, 3, 4).value);
      auto b = t.constant({4, 2}, gradcheck::random_input(rng, 4, 2).value);
      auto out = log_softmax(tanh(matmul(a, b)));
      t.backward(sum(out));
      std::vector<double> v(out.values().begin(), out.values().end());
      v.insert(v.end(), t.grad(a).begin(), t.grad(a).end());
      return v;
    };
    CHECK(run() == run());
  }

  TEST_CASE("parallel gemm agrees bit-for-bit with the serial kernel") {
    Rng rng(3);
    for (auto [m, k, n] : {std::array<std::size_t, 3>{1, 1, 1}, {7, 5, 3}, {64, 33, 17}, {128, 128, 128}}) {
      std::vector<double> a(m * k), b(k * n), s(m * n), p(m * n);
      for (auto& x : a) x = rng.uniform(-1, 1);
      for (auto& x : b) x = rng.uniform(-1, 1);
      gemm_serial(a, b, s, m, k, n);
      gemm_parallel(a, b, p, m, k, n);
      CHECK(s == p);
    }
  }
}

TEST_SUITE("optim") {
  TEST_CASE("first Adam step moves by the learning rate against the gradient sign") {
    ParameterSet ps;
    const auto w = ps.add("w", {1, 3});
    ps[w].value = {1.0, 1.0, 1.0};
    auto adam = AdamState::for_params(ps, {1e-3});
    Gradients g{{0.5, -2.0, 0.0}};
    adam_step(ps, g, adam);
    CHECK(ps[w].value[0] == doctest::Approx(1.0 - 1e-3).epsilon(1e-6));
    CHECK(ps[w].value[1] == doctest::Approx(1.0 + 1e-3).epsilon(1e-6));
    CHECK(ps[w].value[2] == 1.0);
  }

  TEST_CASE("zero gradient leaves parameters unchanged") {
    ParameterSet ps;
    const auto w = ps.add("w", {1, 2});
    ps[w].value = {0.3, -0.7};
    auto adam = AdamState::for_params(ps, {1e-2});
    Gradients g{{0.0, 0.0}};
    for (int i = 0; i < 3; ++i) adam_step(ps, g, adam);
    CHECK(ps[w].value == std::vector<double>{0.3, -0.7});
  }

  TEST_CASE("zero gradient decays existing moments") {
    ParameterSet ps;
    const auto w = ps.add("w", {1, 1});
    auto adam = AdamState::for_params(ps, {1e-2});
    Gradients g{{1.0}};
    adam_step(ps, g, adam);
    const double m1 = adam.m[w][0], v1 = adam.v[w][0];
    g[w][0] = 0.0;
    adam_step(ps, g, adam);
    CHECK(adam.m[w][0] == doctest::Approx(0.9 * m1));
    CHECK(adam.v[w][0] == doctest::Approx(0.999 * v1));
  }

  TEST_CASE("two steps with a constant gradient follow the hand-computed recurrence") {
    ParameterSet ps;
    const auto w = ps.add("w", {1, 1});
    ps[w].value = {0.0};
    const double lr = 0.1, gval = 0.2;
    auto adam = AdamState::for_params(ps, {lr});
    Gradients g{{gval}};
    adam_step(ps, g, adam);
    adam_step(ps, g, adam);
    // m_t / (1 - b1^t) = g and v_t / (1 - b2^t) = g^2 for constant g.
    const double step = lr * gval / (std::abs(gval) + 1e-8);
    CHECK(ps[w].value[0] == doctest::Approx(-2.0 * step).epsilon(1e-9));
  }

  TEST_CASE("missing gradient buffer is rejected") {
    ParameterSet ps;
    ps.add("w", {1, 1});
    auto adam = AdamState::for_params(ps, {});
    Gradients g(1);
    CHECK_THROWS_AS(adam_step(ps, g, adam), std::invalid_argument);
  }

  TEST_CASE("global norm clipping") {
    Gradients g{{3.0}, {}, {4.0}};
    CHECK(global_norm(g) == doctest::Approx(5.0));
    CHECK(clip_global_norm(g, 1.0) == doctest::Approx(5.0));
    CHECK(global_norm(g) == doctest::Approx(1.0));
    Gradients h{{0.3}};
    clip_global_norm(h, 1.0);
    CHECK(h[0][0] == 0.3);
  }
}

TEST_SUITE("checkpoint") {
  TEST_CASE("save and load round-trip parameters and optimizer state") {
    const auto dir = std::filesystem::temp_directory_path() / "mstop_ckpt_test";
    std::filesystem::create_directories(dir);
    const auto path = (dir / "a.ckpt").string();
    ParameterSet ps;
    ps.add("w", {2, 3});
    ps.add("buf", {1, 3}, false);
    ps.init_uniform(9);
    ps[1].value = {1.0, 2.0, 3.0};
    auto adam = AdamState::for_params(ps, {0.01});
    Gradients g{{0.1, 0.2, 0.3, 0.4, 0.5, 0.6}, {}};
    adam_step(ps, g, adam);
    save_checkpoint(path, ps, &adam);

    ParameterSet other;
    other.add("w", {2, 3});
    other.add("buf", {1, 3}, false);
    auto adam2 = AdamState::for_params(other, {});
    load_checkpoint(path, other, &adam2);
    CHECK(other[0].value == ps[0].value);
    CHECK(other[1].value == ps[1].value);
    CHECK(adam2.step == adam.step);
    CHECK(adam2.m[0] == adam.m[0]);
    CHECK(adam2.v[0] == adam.v[0]);
    CHECK(adam2.config.lr == 0.01);

    ParameterSet wrong;
    wrong.add("w", {3, 2});
    wrong.add("buf", {1, 3}, false);
    CHECK_THROWS(load_checkpoint(path, wrong));
    CHECK_THROWS(load_checkpoint((dir / "missing.ckpt").string(), other));
    std::filesystem::remove_all(dir);
  }
}
