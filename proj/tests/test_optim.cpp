#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "crate/autodiff.hpp"
#include "crate/optim.hpp"
#include "oracles.hpp"

using namespace crate;

namespace {

CrateArch tiny_arch() {
  CrateArch arch;
  arch.input_dim = 3;
  arch.tokens = 2;
  arch.d = 4;
  arch.p = 2;
  arch.K = 1;
  arch.L = 1;
  arch.classes = 2;
  return arch;
}

struct Fixture {
  CrateParams params;
  CrateParams grads;
  OptState state;

  explicit Fixture(const TrainConfig& cfg, std::uint64_t seed = 1) {
    Rng rng(seed);
    params = init_crate_params(tiny_arch(), rng);
    grads = zero_like(params);
    state = init_opt_state(params, cfg.optimizer);
  }
};

std::vector<double> flatten(const CrateParams& p) {
  std::vector<double> out;
  for (const Matrix* m : tensor_ptrs(p))
    out.insert(out.end(), m->storage().begin(), m->storage().end());
  return out;
}

void fill_grads(CrateParams& grads, Rng& rng) {
  for (Matrix* m : tensor_ptrs(grads)) *m = gaussian_matrix(m->rows(), m->cols(), rng);
}

}  // namespace

TEST_CASE("adamw with zero gradient and zero decay leaves parameters alone") {
  TrainConfig cfg;
  cfg.optimizer = OptKind::kAdamW;
  cfg.weight_decay = 0.0;
  Fixture f(cfg);
  std::vector<double> before = flatten(f.params);
  optimizer_step(f.params, f.grads, f.state, cfg, 0.1);
  std::vector<double> after = flatten(f.params);
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i] == after[i]);
  CHECK(f.state.step == 1);
}

TEST_CASE("adamw first step moves by lr * g / (|g| + eps) when decay is off") {
  TrainConfig cfg;
  cfg.optimizer = OptKind::kAdamW;
  cfg.weight_decay = 0.0;
  Fixture f(cfg);
  Rng rng(4);
  fill_grads(f.grads, rng);
  std::vector<double> before = flatten(f.params);
  std::vector<double> g = flatten(f.grads);
  const double lr = 0.05;
  optimizer_step(f.params, f.grads, f.state, cfg, lr);
  std::vector<double> after = flatten(f.params);
  for (std::size_t i = 0; i < before.size(); ++i) {
    // Bias correction cancels on step one: mhat = g, sqrt(vhat) = |g|.
    const double want = before[i] - lr * g[i] / (std::abs(g[i]) + 1e-8);
    CHECK(after[i] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("adamw decay-only step is a uniform shrink toward zero") {
  TrainConfig cfg;
  cfg.optimizer = OptKind::kAdamW;
  cfg.weight_decay = 0.5;
  Fixture f(cfg);
  std::vector<double> before = flatten(f.params);
  const double lr = 0.01;
  optimizer_step(f.params, f.grads, f.state, cfg, lr);
  std::vector<double> after = flatten(f.params);
  for (std::size_t i = 0; i < before.size(); ++i)
    CHECK(after[i] == doctest::Approx(before[i] * (1.0 - lr * 0.5)).epsilon(1e-14));
}

TEST_CASE("adamw two-step trajectory matches a scalar reference") {
  TrainConfig cfg;
  cfg.optimizer = OptKind::kAdamW;
  cfg.weight_decay = 0.1;
  cfg.beta1 = 0.9;
  cfg.beta2 = 0.99;
  Fixture f(cfg);
  Matrix* slot = tensor_ptrs(f.params)[0];
  Matrix* gslot = tensor_ptrs(f.grads)[0];
  (*slot)(0, 0) = 1.0;
  const double lr = 0.1;
  const std::vector<double> gs{0.5, -0.3};

  double p = 1.0, m = 0.0, v = 0.0;
  for (std::size_t step = 0; step < gs.size(); ++step) {
    (*gslot)(0, 0) = gs[step];
    optimizer_step(f.params, f.grads, f.state, cfg, lr);

    m = 0.9 * m + 0.1 * gs[step];
    v = 0.99 * v + 0.01 * gs[step] * gs[step];
    const double mhat = m / (1.0 - std::pow(0.9, double(step + 1)));
    const double vhat = v / (1.0 - std::pow(0.99, double(step + 1)));
    p -= lr * mhat / (std::sqrt(vhat) + 1e-8) + lr * 0.1 * p;
    CHECK((*slot)(0, 0) == doctest::Approx(p).epsilon(1e-13));
  }
}

TEST_CASE("lion is invariant to positive gradient rescaling") {
  TrainConfig cfg;
  cfg.optimizer = OptKind::kLion;
  cfg.weight_decay = 0.0;
  Fixture a(cfg), b(cfg);
  Rng rng(9);
  fill_grads(a.grads, rng);
  b.grads = a.grads;
  for (Matrix* m : tensor_ptrs(b.grads)) *m = scale(*m, 37.5);
  optimizer_step(a.params, a.grads, a.state, cfg, 0.01);
  optimizer_step(b.params, b.grads, b.state, cfg, 0.01);
  std::vector<double> pa = flatten(a.params), pb = flatten(b.params);
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i] == pb[i]);
}

TEST_CASE("lion leaves parameters alone when gradient and momentum vanish") {
  TrainConfig cfg;
  cfg.optimizer = OptKind::kLion;
  cfg.weight_decay = 0.0;
  Fixture f(cfg);
  std::vector<double> before = flatten(f.params);
  optimizer_step(f.params, f.grads, f.state, cfg, 0.1);
  std::vector<double> after = flatten(f.params);
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i] == after[i]);
}

TEST_CASE("lion two-step trajectory matches hand arithmetic") {
  TrainConfig cfg;
  cfg.optimizer = OptKind::kLion;
  cfg.weight_decay = 0.1;
  cfg.beta1 = 0.9;
  cfg.beta2 = 0.99;
  Fixture f(cfg);
  for (Matrix* m : tensor_ptrs(f.params))
    for (double& v : m->storage()) v = 0.0;
  Matrix* slot = tensor_ptrs(f.params)[0];
  Matrix* gslot = tensor_ptrs(f.grads)[0];
  (*slot)(0, 0) = 1.0;
  const double lr = 0.1;

  // step 1: blend = 0.1 * 0.5 > 0, so w <- 1 - 0.1 * (1 + 0.1 * 1) = 0.89
  (*gslot)(0, 0) = 0.5;
  optimizer_step(f.params, f.grads, f.state, cfg, lr);
  CHECK((*slot)(0, 0) == doctest::Approx(0.89).epsilon(1e-14));

  // momentum after step 1 is 0.01 * 0.5 = 0.005
  // step 2: blend = 0.9 * 0.005 - 0.1 * 0.2 = -0.0155 < 0
  //         w <- 0.89 - 0.1 * (-1 + 0.1 * 0.89) = 0.9811
  (*gslot)(0, 0) = -0.2;
  optimizer_step(f.params, f.grads, f.state, cfg, lr);
  CHECK((*slot)(0, 0) == doctest::Approx(0.9811).epsilon(1e-14));

  // untouched zero entries stay exactly zero under decay
  CHECK((*slot)(0, 1) == 0.0);
  CHECK(f.state.step == 2);
}

TEST_CASE("optimizer rejects mismatched gradient shapes") {
  TrainConfig cfg;
  Fixture f(cfg);
  *tensor_ptrs(f.grads)[0] = Matrix(1, 1);
  CHECK_THROWS_AS(optimizer_step(f.params, f.grads, f.state, cfg, 0.1),
                  std::invalid_argument);
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  TrainConfig bad = cfg;
  bad.lr = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.beta2 = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.label_smoothing = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("learning-rate schedule: warmup ramp, plateau, cosine decay to zero") {
  const double lr_max = 2.0;
  const std::size_t total = 100, warmup = 10;

  CHECK(lr_at(0, total, warmup, LrSchedule::kCosine, lr_max) ==
        doctest::Approx(lr_max / 10.0).epsilon(1e-14));
  CHECK(lr_at(warmup - 1, total, warmup, LrSchedule::kCosine, lr_max) ==
        doctest::Approx(lr_max).epsilon(1e-14));

  double prev = lr_max;
  for (std::size_t s = warmup; s < total; ++s) {
    const double lr = lr_at(s, total, warmup, LrSchedule::kCosine, lr_max);
    CHECK(lr <= prev + 1e-15);
    CHECK(lr >= 0.0);
    prev = lr;
  }
  CHECK(lr_at(total - 1, total, warmup, LrSchedule::kCosine, lr_max) ==
        doctest::Approx(0.0).epsilon(1e-12));

  for (std::size_t s = warmup; s < total; ++s)
    CHECK(lr_at(s, total, warmup, LrSchedule::kConstant, lr_max) == lr_max);
  // Ramp is identical for both schedules.
  for (std::size_t s = 0; s < warmup; ++s)
    CHECK(lr_at(s, total, warmup, LrSchedule::kConstant, lr_max) ==
          lr_at(s, total, warmup, LrSchedule::kCosine, lr_max));

  // No warmup: the first step already carries a full cosine value.
  CHECK(lr_at(0, 50, 0, LrSchedule::kConstant, lr_max) == lr_max);
  CHECK(lr_at(0, 50, 0, LrSchedule::kCosine, lr_max) < lr_max);
  CHECK(lr_at(0, 50, 0, LrSchedule::kCosine, lr_max) > 0.9 * lr_max);

  CHECK_THROWS_AS(lr_at(100, total, warmup, LrSchedule::kCosine, lr_max),
                  std::invalid_argument);
}
