#include "crate/optim.hpp"

#include <cmath>

namespace crate {

void TrainConfig::validate() const {
  require(lr > 0.0, "train config: lr must be positive");
  require(batch_size >= 1, "train config: batch_size must be at least 1");
  require(weight_decay >= 0.0, "train config: weight_decay must be nonnegative");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
          "train config: betas must be in [0, 1)");
  require(label_smoothing >= 0.0 && label_smoothing < 1.0,
          "train config: label_smoothing must be in [0, 1)");
}

std::vector<Matrix*> tensor_ptrs(CrateParams& params) {
  std::vector<Matrix*> out;
  for_each_tensor(params, [&](const std::string&, Matrix& m) { out.push_back(&m); });
  return out;
}

std::vector<const Matrix*> tensor_ptrs(const CrateParams& params) {
  std::vector<const Matrix*> out;
  for_each_tensor(params,
                  [&](const std::string&, const Matrix& m) { out.push_back(&m); });
  return out;
}

OptState init_opt_state(const CrateParams& params, OptKind kind) {
  OptState state;
  for (const Matrix* p : tensor_ptrs(params)) {
    state.m.emplace_back(p->rows(), p->cols());
    if (kind == OptKind::kAdamW) state.v.emplace_back(p->rows(), p->cols());
  }
  return state;
}

namespace {

void check_slots(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads,
                 const OptState& state, bool needs_v) {
  require(params.size() == grads.size() && params.size() == state.m.size() &&
              (!needs_v || params.size() == state.v.size()),
          "optimizer: state/gradient slot count mismatch");
  for (std::size_t t = 0; t < params.size(); ++t)
    require(params[t]->same_shape(*grads[t]) && params[t]->same_shape(state.m[t]),
            "optimizer: tensor shape mismatch at slot " + std::to_string(t));
}

}  // namespace

void adamw_step(CrateParams& params, const CrateParams& grads, OptState& state,
                const TrainConfig& cfg, double lr) {
  constexpr double kEps = 1e-8;
  auto ps = tensor_ptrs(params);
  auto gs = tensor_ptrs(grads);
  check_slots(ps, gs, state, true);
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t t = 0; t < ps.size(); ++t) {
    double* p = ps[t]->storage().data();
    const double* g = gs[t]->storage().data();
    double* m = state.m[t].storage().data();
    double* v = state.v[t].storage().data();
    const std::size_t n = ps[t]->size();
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= lr * (mhat / (std::sqrt(vhat) + kEps)) + lr * cfg.weight_decay * p[i];
    }
  }
}

void lion_step(CrateParams& params, const CrateParams& grads, OptState& state,
               const TrainConfig& cfg, double lr) {
  auto ps = tensor_ptrs(params);
  auto gs = tensor_ptrs(grads);
  check_slots(ps, gs, state, false);
  state.step += 1;
  for (std::size_t t = 0; t < ps.size(); ++t) {
    double* p = ps[t]->storage().data();
    const double* g = gs[t]->storage().data();
    double* m = state.m[t].storage().data();
    const std::size_t n = ps[t]->size();
    for (std::size_t i = 0; i < n; ++i) {
      const double blend = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      const double u = blend > 0.0 ? 1.0 : (blend < 0.0 ? -1.0 : 0.0);
      p[i] -= lr * (u + cfg.weight_decay * p[i]);
      m[i] = cfg.beta2 * m[i] + (1.0 - cfg.beta2) * g[i];
    }
  }
}

void optimizer_step(CrateParams& params, const CrateParams& grads, OptState& state,
                    const TrainConfig& cfg, double lr) {
  if (cfg.optimizer == OptKind::kAdamW)
    adamw_step(params, grads, state, cfg, lr);
  else
    lion_step(params, grads, state, cfg, lr);
}

double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
             LrSchedule schedule, double lr_max) {
  require(total_steps > 0 && step < total_steps, "lr_at: step out of range");
  if (step < warmup_steps)
    return lr_max * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  if (schedule == LrSchedule::kConstant) return lr_max;
  const std::size_t span = total_steps - warmup_steps;
  if (span == 0) return lr_max;
  const double progress =
      static_cast<double>(step + 1 - warmup_steps) / static_cast<double>(span);
  constexpr double kPi = 3.14159265358979323846;
  return 0.5 * lr_max * (1.0 + std::cos(kPi * progress));
}

}  // namespace crate
