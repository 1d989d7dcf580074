#pragma once

#include <string>
#include <vector>

#include "crate/autodiff.hpp"
#include "crate/optim.hpp"
#include "crate/rng.hpp"

namespace crate {

struct SplitData {
  TokenBatch train;
  TokenBatch test;
};

struct MetricsRow {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
  double lr = 0.0;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

// Fraction of columns whose argmax (lowest index wins ties) equals the label.
double accuracy(const Matrix& logits, const std::vector<int>& labels);

// Full-batch forward pass metrics. The eval and train paths share this
// function, so "final train metrics" and a later standalone eval of the same
// checkpoint agree exactly.
EvalResult evaluate(const CrateParams& params, const TokenBatch& data,
                    const RateConfig& cfg, const LayerOptions& opt, double smoothing);

// Reads the architecture back off a parameter set (requires >= 1 layer).
CrateArch infer_arch(const CrateParams& params);

struct TrainResult {
  std::vector<MetricsRow> metrics;  // one train + one test row per epoch
  std::size_t steps = 0;
};

// Epoch loop: deterministic shuffling from cfg.seed, linear warmup then the
// selected schedule, per-epoch metrics on both splits, optional epoch
// checkpoints (cfg.checkpoint_every > 0 into cfg.checkpoint_dir). epochs = 0
// returns immediately with params untouched.
TrainResult train_model(CrateParams& params, const SplitData& data,
                        const TrainConfig& tcfg, const RateConfig& rcfg,
                        const LayerOptions& opt = {});

// CSV with header epoch,split,loss,accuracy,lr.
void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows);

}  // namespace crate
