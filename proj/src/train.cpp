#include "crate/train.hpp"

#include <numeric>

#include "crate/serialize.hpp"

namespace crate {

double accuracy(const Matrix& logits, const std::vector<int>& labels) {
  require(logits.cols() == labels.size(), "accuracy: one label per column required");
  require(logits.cols() > 0, "accuracy: empty batch");
  std::size_t correct = 0;
  for (std::size_t b = 0; b < logits.cols(); ++b) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.rows(); ++c)
      if (logits(c, b) > logits(best, b)) best = c;
    if (static_cast<int>(best) == labels[b]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(logits.cols());
}

EvalResult evaluate(const CrateParams& params, const TokenBatch& data,
                    const RateConfig& cfg, const LayerOptions& opt, double smoothing) {
  require(data.labeled(), "evaluate: batch has no labels");
  ForwardOutput out = crate_forward(data, params, cfg, opt);
  EvalResult res;
  res.loss = cross_entropy_smoothed(out.logits, data.labels, smoothing);
  res.accuracy = accuracy(out.logits, data.labels);
  return res;
}

CrateArch infer_arch(const CrateParams& params) {
  require(!params.layers.empty(), "infer_arch: parameter set has no layers");
  require(!params.layers[0].subspaces.empty(), "infer_arch: layer 0 has no subspaces");
  CrateArch arch;
  arch.input_dim = params.patch_embed.cols();
  arch.d = params.patch_embed.rows();
  arch.tokens = params.pos_embed.cols() - 1;
  arch.p = params.layers[0].subspaces[0].cols();
  arch.K = params.layers[0].subspaces.size();
  arch.L = params.layers.size();
  arch.classes = params.head.rows();
  return arch;
}

TrainResult train_model(CrateParams& params, const SplitData& data,
                        const TrainConfig& tcfg, const RateConfig& rcfg,
                        const LayerOptions& opt) {
  tcfg.validate();
  rcfg.validate();
  require(!data.train.samples.empty(), "train: empty training split");
  require(data.train.labeled(), "train: training split has no labels");

  TrainResult result;
  if (tcfg.epochs == 0) return result;

  const std::size_t n = data.train.size();
  const std::size_t bs = std::min(tcfg.batch_size, n);
  const std::size_t steps_per_epoch = (n + bs - 1) / bs;
  const std::size_t total_steps = steps_per_epoch * tcfg.epochs;
  const std::size_t warmup_steps = steps_per_epoch * tcfg.warmup_epochs;

  OptState state = init_opt_state(params, tcfg.optimizer);
  Rng root(tcfg.seed);
  std::size_t gstep = 0;
  double lr = 0.0;

  for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng epoch_rng = root.stream(epoch);
    epoch_rng.shuffle(order);

    for (std::size_t start = 0; start < n; start += bs) {
      TokenBatch batch;
      const std::size_t stop = std::min(start + bs, n);
      for (std::size_t i = start; i < stop; ++i) {
        batch.samples.push_back(data.train.samples[order[i]]);
        batch.labels.push_back(data.train.labels[order[i]]);
      }
      BatchGrads bg = crate_loss_grads(params, batch, rcfg, opt, tcfg.label_smoothing,
                                       tcfg.threads);
      lr = lr_at(gstep, total_steps, warmup_steps, tcfg.schedule, tcfg.lr);
      optimizer_step(params, bg.grads, state, tcfg, lr);
      ++gstep;
    }

    EvalResult tr = evaluate(params, data.train, rcfg, opt, tcfg.label_smoothing);
    result.metrics.push_back({epoch + 1, "train", tr.loss, tr.accuracy, lr});
    if (!data.test.samples.empty()) {
      require(data.test.labeled(), "train: test split has no labels");
      EvalResult te = evaluate(params, data.test, rcfg, opt, tcfg.label_smoothing);
      result.metrics.push_back({epoch + 1, "test", te.loss, te.accuracy, lr});
    }

    if (tcfg.checkpoint_every > 0 && !tcfg.checkpoint_dir.empty() &&
        (epoch + 1) % tcfg.checkpoint_every == 0) {
      json extra;
      extra["epoch"] = epoch + 1;
      extra["seed"] = tcfg.seed;
      save_checkpoint(tcfg.checkpoint_dir + "/checkpoint_epoch" +
                          std::to_string(epoch + 1),
                      params, infer_arch(params), rcfg, opt, extra);
    }
  }
  result.steps = gstep;
  return result;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
  std::vector<std::vector<std::string>> cells;
  for (const MetricsRow& r : rows)
    cells.push_back({std::to_string(r.epoch), r.split, format_double(r.loss),
                     format_double(r.accuracy), format_double(r.lr)});
  write_csv(path, "epoch,split,loss,accuracy,lr", cells);
}

}  // namespace crate
