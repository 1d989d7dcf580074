#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "crate/layers.hpp"

namespace crate {

enum class OptKind { kAdamW, kLion };
enum class LrSchedule { kConstant, kCosine };

struct TrainConfig {
  OptKind optimizer = OptKind::kLion;
  double lr = 1e-4;
  double weight_decay = 0.5;
  double beta1 = 0.9;
  double beta2 = 0.99;
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double label_smoothing = 0.1;
  std::size_t warmup_epochs = 5;
  LrSchedule schedule = LrSchedule::kCosine;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  // Checkpoint cadence in epochs; 0 disables. Files land in checkpoint_dir.
  std::size_t checkpoint_every = 0;
  std::string checkpoint_dir;

  void validate() const;
};

// Parameter tensors in fixed traversal order (matches for_each_tensor).
std::vector<Matrix*> tensor_ptrs(CrateParams& params);
std::vector<const Matrix*> tensor_ptrs(const CrateParams& params);

// Optimizer slots, one per parameter tensor. v is unused by Lion.
struct OptState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::size_t step = 0;
};
OptState init_opt_state(const CrateParams& params, OptKind kind);

// Decoupled-weight-decay Adam with bias-corrected moments.
void adamw_step(CrateParams& params, const CrateParams& grads, OptState& state,
                const TrainConfig& cfg, double lr);
// Sign-of-interpolated-momentum update with decoupled decay:
//   u = sign(b1 m + (1 - b1) g); p -= lr (u + wd p); m = b2 m + (1 - b2) g.
void lion_step(CrateParams& params, const CrateParams& grads, OptState& state,
               const TrainConfig& cfg, double lr);
void optimizer_step(CrateParams& params, const CrateParams& grads, OptState& state,
                    const TrainConfig& cfg, double lr);

// Linear warmup to lr_max over warmup_steps, then the selected decay. The
// first step runs at lr_max / warmup_steps, the last warmup step at lr_max,
// and cosine decay is monotone non-increasing afterwards, reaching >= 0 at
// total_steps - 1.
double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps,
             LrSchedule schedule, double lr_max);

}  // namespace crate
