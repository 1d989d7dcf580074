#include "crate/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "crate/autodiff.hpp"
#include "crate/data.hpp"
#include "crate/diagnostics.hpp"
#include "crate/linalg.hpp"
#include "crate/mog.hpp"
#include "crate/serialize.hpp"
#include "crate/train.hpp"

namespace fs = std::filesystem;

namespace crate {

namespace {

// ---------------------------------------------------------------------------
// Config plumbing. Configs are fail-closed: any key outside the documented
// schema aborts with a validation error, so typos cannot silently fall back
// to defaults.

json load_config(const std::string& path) {
  if (path.empty()) throw std::invalid_argument("missing --config");
  if (!fs::exists(path)) throw std::invalid_argument("config file not found: " + path);
  try {
    return json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw std::invalid_argument("config " + path + ": " + e.what());
  }
}

void check_keys(const json& j, const std::set<std::string>& allowed,
                const std::string& context) {
  if (!j.is_object())
    throw std::invalid_argument("config: " + context + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!allowed.count(key))
      throw std::invalid_argument("config: unknown key '" + key + "' in " + context);
  }
}

struct RunPaths {
  std::string out;
  bool enabled() const { return !out.empty(); }
  std::string file(const std::string& name) const { return out + "/" + name; }
  void require(const std::string& subcommand) const {
    if (!enabled())
      throw std::invalid_argument(subcommand + " requires --out <directory>");
    fs::create_directories(out);
  }
  void prepare() const {
    if (enabled()) fs::create_directories(out);
  }
};

// The echo carries everything that determines the computation (defaults
// materialized, seed resolved); reruns into a different directory stay
// byte-identical. Wall-clock facts live in run_info.json only.
void write_echo(const RunPaths& rp, const json& materialized) {
  if (rp.enabled())
    write_text_file(rp.file("config.echo.json"), materialized.dump(2) + "\n");
}

void write_run_info(const RunPaths& rp, const std::string& subcommand,
                    std::size_t threads) {
  if (!rp.enabled()) return;
  const std::time_t now = std::chrono::system_clock::to_time_t(
      std::chrono::system_clock::now());
  char stamp[32];
  std::tm tm_utc{};
  gmtime_r(&now, &tm_utc);
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  json info;
  info["subcommand"] = subcommand;
  info["threads"] = threads;
  info["timestamp_utc"] = stamp;
  write_text_file(rp.file("run_info.json"), info.dump(2) + "\n");
}

std::uint64_t resolve_seed(const json& cfg, const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  return cfg.value("seed", std::uint64_t{0});
}

// Model init draws must never collide with the epoch-indexed shuffle streams,
// which use small ids.
constexpr std::uint64_t kInitStream = 0x9e3779b97f4a7c15ull;

// ---------------------------------------------------------------------------
// gen-data

int run_gen_data(const std::string& config_path, const std::optional<std::uint64_t>& seed,
                 const RunPaths& rp) {
  json cfg = load_config(config_path);
  check_keys(cfg,
             {"classes", "tokens", "input_dim", "subspaces_per_class", "p_data",
              "sigma_data", "samples_per_class", "test_fraction", "seed"},
             "gen-data config");
  SyntheticSpec spec = SyntheticSpec::from_json(cfg);
  if (seed) spec.seed = *seed;
  spec.validate();
  rp.require("gen-data");

  Dataset ds = gen_synthetic(spec);
  save_dataset(rp.file("dataset"), ds);
  write_echo(rp, spec.to_json());
  write_run_info(rp, "gen-data", 1);
  std::cout << "dataset: " << ds.train.size() << " train / " << ds.test.size()
            << " test samples, cross-class coherence "
            << format_double(ds.info.at("coherence").get<double>()) << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainSetup {
  SplitData data;
  CrateArch arch;
  RateConfig rate;
  LayerOptions opt;
  TrainConfig tcfg;
  json echo;
};

TrainSetup build_train_setup(const json& cfg, const std::optional<std::uint64_t>& seed_flag,
                             const std::string& variant_flag,
                             const std::string& attention_flag, std::size_t threads,
                             const std::string& checkpoint_dir) {
  check_keys(cfg, {"data", "synthetic", "arch", "rate", "train", "options", "seed"},
             "train config");
  TrainSetup s;

  const bool has_path = cfg.contains("data");
  const bool has_spec = cfg.contains("synthetic");
  if (has_path == has_spec)
    throw std::invalid_argument(
        "train config: provide exactly one of 'data' (dataset stem) or 'synthetic'");
  if (has_path) {
    const std::string stem = cfg.at("data").get<std::string>();
    Dataset ds = load_dataset(stem);
    s.data.train = std::move(ds.train);
    s.data.test = std::move(ds.test);
    s.echo["data"] = stem;
  } else {
    check_keys(cfg.at("synthetic"),
               {"classes", "tokens", "input_dim", "subspaces_per_class", "p_data",
                "sigma_data", "samples_per_class", "test_fraction", "seed"},
               "train config synthetic");
    SyntheticSpec spec = SyntheticSpec::from_json(cfg.at("synthetic"));
    spec.validate();
    Dataset ds = gen_synthetic(spec);
    s.data.train = std::move(ds.train);
    s.data.test = std::move(ds.test);
    s.echo["synthetic"] = spec.to_json();
  }
  if (s.data.train.size() == 0)
    throw std::invalid_argument("train config: empty training split");

  const json& a = cfg.contains("arch") ? cfg.at("arch")
                                       : throw std::invalid_argument(
                                             "train config: missing 'arch' object");
  check_keys(a, {"d", "p", "K", "L"}, "train config arch");
  s.arch.d = a.at("d").get<std::size_t>();
  s.arch.p = a.at("p").get<std::size_t>();
  s.arch.K = a.at("K").get<std::size_t>();
  s.arch.L = a.at("L").get<std::size_t>();
  s.arch.input_dim = s.data.train.samples[0].rows();
  s.arch.tokens = s.data.train.samples[0].cols();
  int max_label = 0;
  for (int v : s.data.train.labels) max_label = std::max(max_label, v);
  for (int v : s.data.test.labels) max_label = std::max(max_label, v);
  s.arch.classes = static_cast<std::size_t>(max_label) + 1;
  s.arch.validate();
  s.echo["arch"] = {{"d", s.arch.d},
                    {"p", s.arch.p},
                    {"K", s.arch.K},
                    {"L", s.arch.L},
                    {"input_dim", s.arch.input_dim},
                    {"tokens", s.arch.tokens},
                    {"classes", s.arch.classes}};

  json r = cfg.value("rate", json::object());
  check_keys(r, {"eps", "lambda", "kappa", "eta"}, "train config rate");
  const double eps = r.value("eps", 0.5);
  const double lambda = r.value("lambda", 0.1);
  const double kappa = r.value("kappa", 1.0);
  const double eta = r.value("eta", 0.1);
  s.rate = s.arch.rate_config(eps, lambda, kappa, eta);
  s.rate.validate();
  s.echo["rate"] = {{"eps", eps}, {"lambda", lambda}, {"kappa", kappa}, {"eta", eta}};

  json t = cfg.value("train", json::object());
  check_keys(t,
             {"optimizer", "lr", "weight_decay", "beta1", "beta2", "epochs",
              "batch_size", "label_smoothing", "warmup_epochs", "schedule",
              "checkpoint_every"},
             "train config train");
  s.tcfg.optimizer = optimizer_from_string(t.value("optimizer", std::string("lion")));
  s.tcfg.batch_size = t.value("batch_size", std::size_t{64});
  // Recipe default: base rate 2.4e-4 under the linear batch-size rule.
  s.tcfg.lr = t.contains("lr") ? t.at("lr").get<double>()
                               : 2.4e-4 * double(s.tcfg.batch_size) / 2048.0;
  s.tcfg.weight_decay = t.value("weight_decay", 0.5);
  s.tcfg.beta1 = t.value("beta1", 0.9);
  s.tcfg.beta2 = t.value("beta2", 0.99);
  s.tcfg.epochs = t.value("epochs", std::size_t{20});
  s.tcfg.label_smoothing = t.value("label_smoothing", 0.1);
  s.tcfg.warmup_epochs = t.value("warmup_epochs", std::size_t{5});
  s.tcfg.schedule = schedule_from_string(t.value("schedule", std::string("cosine")));
  s.tcfg.checkpoint_every = t.value("checkpoint_every", std::size_t{0});
  s.tcfg.seed = resolve_seed(cfg, seed_flag);
  s.tcfg.threads = threads;
  s.tcfg.checkpoint_dir = checkpoint_dir;
  s.tcfg.validate();
  s.echo["train"] = {{"optimizer", to_string(s.tcfg.optimizer)},
                     {"lr", s.tcfg.lr},
                     {"weight_decay", s.tcfg.weight_decay},
                     {"beta1", s.tcfg.beta1},
                     {"beta2", s.tcfg.beta2},
                     {"epochs", s.tcfg.epochs},
                     {"batch_size", s.tcfg.batch_size},
                     {"label_smoothing", s.tcfg.label_smoothing},
                     {"warmup_epochs", s.tcfg.warmup_epochs},
                     {"schedule", to_string(s.tcfg.schedule)},
                     {"checkpoint_every", s.tcfg.checkpoint_every}};

  json o = cfg.value("options", json::object());
  check_keys(o, {"variant", "attention", "temperature", "layer_norm"},
             "train config options");
  s.opt.variant = variant_from_string(o.value("variant", std::string("default")));
  s.opt.attention =
      attention_from_string(o.value("attention", std::string("trainable_w")));
  s.opt.temperature = o.value("temperature", 0.0);
  s.opt.layer_norm_enabled = o.value("layer_norm", true);
  if (!variant_flag.empty()) s.opt.variant = variant_from_string(variant_flag);
  if (!attention_flag.empty()) s.opt.attention = attention_from_string(attention_flag);
  s.echo["options"] = {{"variant", to_string(s.opt.variant)},
                       {"attention", to_string(s.opt.attention)},
                       {"temperature", s.opt.temperature},
                       {"layer_norm", s.opt.layer_norm_enabled}};
  s.echo["seed"] = s.tcfg.seed;
  return s;
}

int run_train(const std::string& config_path, const std::optional<std::uint64_t>& seed,
              const std::string& variant_flag, const std::string& attention_flag,
              std::size_t threads, const RunPaths& rp) {
  json cfg = load_config(config_path);
  rp.require("train");
  TrainSetup s =
      build_train_setup(cfg, seed, variant_flag, attention_flag, threads, rp.out);

  Rng init_rng = Rng(s.tcfg.seed).stream(kInitStream);
  CrateParams params = init_crate_params(s.arch, init_rng);
  TrainResult result = train_model(params, s.data, s.tcfg, s.rate, s.opt);

  save_checkpoint(rp.file("model"), params, s.arch, s.rate, s.opt,
                  json{{"epochs", s.tcfg.epochs}, {"seed", s.tcfg.seed}});
  write_metrics_csv(rp.file("metrics.csv"), result.metrics);
  write_echo(rp, s.echo);
  write_run_info(rp, "train", threads);

  for (auto it = result.metrics.rbegin(); it != result.metrics.rend(); ++it) {
    if (it->split != "train") continue;
    std::cout << "final train loss " << format_double(it->loss) << ", accuracy "
              << format_double(it->accuracy) << "\n";
    break;
  }
  for (auto it = result.metrics.rbegin(); it != result.metrics.rend(); ++it) {
    if (it->split != "test") continue;
    std::cout << "final test loss " << format_double(it->loss) << ", accuracy "
              << format_double(it->accuracy) << "\n";
    break;
  }
  std::cout << "model written to " << rp.file("model") << ".{json,bin}\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval

const TokenBatch& pick_split(const Dataset& ds, const std::string& split) {
  if (split == "train") return ds.train;
  if (split == "test") return ds.test;
  throw std::invalid_argument("config: split must be 'train' or 'test', got '" +
                              split + "'");
}

int run_eval(const std::string& config_path, const RunPaths& rp) {
  json cfg = load_config(config_path);
  check_keys(cfg, {"model", "data", "split", "smoothing", "seed"}, "eval config");
  const std::string model = cfg.at("model").get<std::string>();
  const std::string data = cfg.at("data").get<std::string>();
  const std::string split = cfg.value("split", std::string("test"));
  const double smoothing = cfg.value("smoothing", 0.1);
  rp.prepare();

  Checkpoint ck = load_checkpoint(model);
  Dataset ds = load_dataset(data);
  const TokenBatch& batch = pick_split(ds, split);
  if (batch.size() == 0) throw std::invalid_argument("eval: split '" + split + "' is empty");
  EvalResult ev = evaluate(ck.params, batch, ck.rate, ck.options, smoothing);

  std::cout << "split " << split << ": loss " << format_double(ev.loss)
            << ", accuracy " << format_double(ev.accuracy) << "\n";
  if (rp.enabled()) {
    write_csv(rp.file("eval.csv"), "split,loss,accuracy",
              {{split, format_double(ev.loss), format_double(ev.accuracy)}});
    json echo = {{"model", model},
                 {"data", data},
                 {"split", split},
                 {"smoothing", smoothing},
                 {"seed", resolve_seed(cfg, std::nullopt)}};
    write_echo(rp, echo);
    write_run_info(rp, "eval", 1);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// diagnose

int run_diagnose(const std::string& config_path, const std::optional<std::uint64_t>& seed,
                 const RunPaths& rp) {
  json cfg = load_config(config_path);
  check_keys(cfg,
             {"model", "data", "split", "batch", "heatmap_rows", "heatmap_cols",
              "threshold", "seed"},
             "diagnose config");
  const std::string model = cfg.at("model").get<std::string>();
  const std::string data = cfg.at("data").get<std::string>();
  const std::string split = cfg.value("split", std::string("test"));
  const std::size_t batch_cap = cfg.value("batch", std::size_t{1000});
  const std::size_t heat_rows = cfg.value("heatmap_rows", std::size_t{16});
  const std::size_t heat_cols = cfg.value("heatmap_cols", std::size_t{8});
  const double threshold = cfg.value("threshold", 0.0);
  const std::uint64_t rng_seed = seed ? *seed : cfg.value("seed", std::uint64_t{0});
  rp.require("diagnose");

  Checkpoint ck = load_checkpoint(model);
  if (ck.arch.L == 0) throw std::invalid_argument("diagnose: model has no layers");
  Dataset ds = load_dataset(data);
  const TokenBatch& full = pick_split(ds, split);
  if (full.size() == 0)
    throw std::invalid_argument("diagnose: split '" + split + "' is empty");

  TokenBatch batch;
  const std::size_t n = std::min(batch_cap, full.size());
  for (std::size_t i = 0; i < n; ++i) {
    batch.samples.push_back(full.samples[i]);
    batch.labels.push_back(full.labels[i]);
  }

  ForwardOutput fwd = crate_forward(batch, ck.params, ck.rate, ck.options, true);
  std::vector<SubspaceBank> banks;
  for (const LayerParams& layer : ck.params.layers) banks.push_back(layer.subspaces);

  const std::vector<double> compression = measure_compression(fwd.traces, banks, ck.rate);
  const std::vector<double> sparsity = measure_sparsity(fwd.traces, threshold);

  std::vector<std::vector<std::string>> comp_rows, sparse_rows;
  for (std::size_t l = 0; l < ck.arch.L; ++l) {
    comp_rows.push_back({std::to_string(l), format_double(compression[l])});
    sparse_rows.push_back({std::to_string(l), format_double(sparsity[l])});
    std::cout << "layer " << l << ": compression " << format_double(compression[l])
              << ", sparsity " << format_double(sparsity[l]) << "\n";
  }
  write_csv(rp.file("compression.csv"), "layer,value", comp_rows);
  write_csv(rp.file("sparsity.csv"), "layer,value", sparse_rows);

  for (std::size_t l = 0; l < ck.arch.L; ++l) {
    write_matrix_csv(rp.file("coherence_l" + std::to_string(l) + ".csv"),
                     subspace_coherence(banks[l]));
    const LayerTrace& trace = fwd.traces[0][l];
    Rng heat_rng = Rng(rng_seed).stream(l);
    Matrix heat = export_token_heatmap(trace, std::min(heat_rows, trace.z_out.rows()),
                                       std::min(heat_cols, trace.z_out.cols()), heat_rng);
    write_matrix_csv(rp.file("tokens_l" + std::to_string(l) + ".csv"), heat);
  }

  json echo = {{"model", model},       {"data", data},
               {"split", split},       {"batch", batch_cap},
               {"heatmap_rows", heat_rows}, {"heatmap_cols", heat_cols},
               {"threshold", threshold},    {"seed", rng_seed}};
  write_echo(rp, echo);
  write_run_info(rp, "diagnose", 1);
  return 0;
}

// ---------------------------------------------------------------------------
// denoise-demo

int run_denoise_demo(const std::string& config_path,
                     const std::optional<std::uint64_t>& seed, const RunPaths& rp) {
  json cfg = load_config(config_path);
  check_keys(cfg, {"d", "p", "K", "sigmas", "points", "seed"}, "denoise-demo config");
  const std::size_t d = cfg.value("d", std::size_t{16});
  const std::size_t p = cfg.value("p", std::size_t{4});
  const std::size_t K = cfg.value("K", std::size_t{3});
  const std::vector<double> sigmas =
      cfg.value("sigmas", std::vector<double>{0.2, 0.1, 0.05});
  const std::size_t points = cfg.value("points", std::size_t{100});
  const std::uint64_t rng_seed = seed ? *seed : cfg.value("seed", std::uint64_t{0});
  if (p * K > d)
    throw std::invalid_argument(
        "denoise-demo config: p*K must not exceed d (orthogonal bases)");
  if (sigmas.empty() || points == 0)
    throw std::invalid_argument("denoise-demo config: need sigmas and points");
  for (double s : sigmas)
    if (!(s > 0.0))
      throw std::invalid_argument("denoise-demo config: sigmas must be positive");
  rp.prepare();

  // Mutually orthogonal bases sliced from one orthonormal frame, unit spectra,
  // uniform weights: the regime where the attention form tracks the posterior.
  Rng base_rng = Rng(rng_seed).stream(0);
  Matrix frame = orthonormalize(gaussian_matrix(d, p * K, base_rng), base_rng);
  MixtureModel model;
  for (std::size_t k = 0; k < K; ++k) {
    Matrix u(d, p);
    for (std::size_t c = 0; c < p; ++c)
      for (std::size_t r = 0; r < d; ++r) u(r, c) = frame(r, k * p + c);
    model.bases.push_back(std::move(u));
    model.pi.push_back(1.0 / double(K));
    model.lambdas.push_back(std::vector<double>(p, 1.0));
  }

  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };

  std::vector<std::vector<std::string>> rows;
  std::cout << "sigma,method,median_rel_err,mse\n";
  for (std::size_t si = 0; si < sigmas.size(); ++si) {
    model.sigma = sigmas[si];
    model.validate();
    // One stream for all noise levels pairs the draws across the sweep.
    Rng point_rng = Rng(rng_seed).stream(1);
    std::vector<NoisySample> samples = sample(model, points, point_rng);

    const char* names[3] = {"attention", "tweedie", "identity"};
    std::vector<double> rel[3], se[3];
    for (const NoisySample& sp : samples) {
      const Matrix reference = posterior_mean(model, sp.x);
      const double ref_norm = frobenius_norm(reference);
      const Matrix outputs[3] = {attention_denoise(model, sp.x),
                                 tweedie_denoise(model, sp.x), sp.x};
      for (int m = 0; m < 3; ++m) {
        rel[m].push_back(frobenius_dist(outputs[m], reference) /
                         std::max(ref_norm, 1e-300));
        const double err = frobenius_dist(outputs[m], *sp.z_true);
        se[m].push_back(err * err);
      }
    }
    for (int m = 0; m < 3; ++m) {
      double mse = 0.0;
      for (double e : se[m]) mse += e;
      mse /= double(se[m].size());
      std::vector<std::string> row{format_double(sigmas[si]), names[m],
                                   format_double(median(rel[m])), format_double(mse)};
      std::cout << row[0] << "," << row[1] << "," << row[2] << "," << row[3] << "\n";
      rows.push_back(std::move(row));
    }
  }

  if (rp.enabled()) {
    write_csv(rp.file("denoise.csv"), "sigma,method,median_rel_err,mse", rows);
    json echo = {{"d", d},
                 {"p", p},
                 {"K", K},
                 {"sigmas", sigmas},
                 {"points", points},
                 {"seed", rng_seed}};
    write_echo(rp, echo);
    write_run_info(rp, "denoise-demo", 1);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

using TapeBuilder =
    std::function<Tape::NodeId(Tape&, const std::vector<Tape::NodeId>&)>;

double tape_inner(const Matrix& a, const Matrix& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.storage()[i] * b.storage()[i];
  return s;
}

double vjp_probe(const TapeBuilder& build, const std::vector<Matrix>& inputs, Rng& rng,
                 bool symmetric_directions) {
  constexpr double kH = 1e-5;
  Tape tape;
  std::vector<Tape::NodeId> ids;
  for (const Matrix& m : inputs) ids.push_back(tape.input(m));
  Tape::NodeId out = build(tape, ids);
  Matrix u = gaussian_matrix(tape.value(out).rows(), tape.value(out).cols(), rng);
  tape.backward(out, u);

  auto forward_inner = [&](const std::vector<Matrix>& shifted) {
    Tape t;
    std::vector<Tape::NodeId> in;
    for (const Matrix& m : shifted) in.push_back(t.input(m));
    return tape_inner(u, t.value(build(t, in)));
  };

  double worst = 0.0;
  for (std::size_t idx = 0; idx < inputs.size(); ++idx) {
    Matrix v = gaussian_matrix(inputs[idx].rows(), inputs[idx].cols(), rng);
    if (symmetric_directions) v = scale(add(v, transpose(v)), 0.5);
    std::vector<Matrix> plus = inputs, minus = inputs;
    plus[idx] = add(plus[idx], scale(v, kH));
    minus[idx] = sub(minus[idx], scale(v, kH));
    const double fd = (forward_inner(plus) - forward_inner(minus)) / (2.0 * kH);
    const double an = tape_inner(tape.grad(ids[idx]), v);
    worst = std::max(worst,
                     std::abs(an - fd) / std::max(1e-8, std::abs(an) + std::abs(fd)));
  }
  return worst;
}

double rate_gradient_probe(Rng& rng, bool projected) {
  constexpr double kH = 1e-5;
  RateConfig cfg;
  cfg.d = 8;
  cfg.N = 6;
  cfg.p = 2;
  cfg.K = 3;
  cfg.eps = 0.5;
  cfg.lambda = 0.1;
  cfg.kappa = 1.0;
  cfg.eta = 0.1;
  SubspaceBank bank;
  for (std::size_t k = 0; k < cfg.K; ++k)
    bank.push_back(orthonormalize(gaussian_matrix(cfg.d, cfg.p, rng), rng));
  Matrix z = gaussian_matrix(cfg.d, cfg.N, rng);
  auto value = [&](const Matrix& m) {
    return projected ? coding_rate_projected(m, bank, cfg) : coding_rate(m, cfg);
  };
  Matrix grad = projected ? grad_coding_rate_projected(z, bank, cfg)
                          : grad_coding_rate(z, cfg);
  double worst = 0.0;
  for (int probe = 0; probe < 4; ++probe) {
    Matrix v = gaussian_matrix(cfg.d, cfg.N, rng);
    const double fd =
        (value(add(z, scale(v, kH))) - value(sub(z, scale(v, kH)))) / (2.0 * kH);
    const double an = tape_inner(grad, v);
    worst = std::max(worst,
                     std::abs(an - fd) / std::max(1e-8, std::abs(an) + std::abs(fd)));
  }
  return worst;
}

double model_gradient_probe(const LayerOptions& opt, std::uint64_t seed) {
  constexpr double kH = 1e-5;
  CrateArch arch;
  arch.input_dim = 5;
  arch.tokens = 3;
  arch.d = 6;
  arch.p = 2;
  arch.K = 2;
  arch.L = 2;
  arch.classes = 3;
  Rng rng(seed);
  CrateParams params = init_crate_params(arch, rng);
  RateConfig cfg = arch.rate_config(0.5, 0.1, 1.0, 0.1);
  TokenBatch batch;
  for (int b = 0; b < 2; ++b) batch.samples.push_back(gaussian_matrix(5, 3, rng));
  batch.labels = {1, 2};
  const double smoothing = 0.1;

  Tape tape;
  TapeParams tp = register_crate_params(tape, params);
  tape.backward(tape_crate_loss(tape, tp, batch, cfg, opt, smoothing));
  CrateParams grads = collect_param_grads(tape, tp, params);

  auto loss_now = [&]() {
    return cross_entropy_smoothed(crate_forward(batch, params, cfg, opt).logits,
                                  batch.labels, smoothing);
  };
  auto ps = tensor_ptrs(params);
  auto gs = tensor_ptrs(const_cast<const CrateParams&>(grads));
  double worst = 0.0;
  for (std::size_t t = 0; t < ps.size(); ++t) {
    const std::size_t count = std::min<std::size_t>(10, ps[t]->size());
    double diff2 = 0.0, fd2 = 0.0;
    for (std::size_t c = 0; c < count; ++c) {
      const std::size_t i = rng.uniform_index(ps[t]->size());
      double& slot = ps[t]->storage()[i];
      const double orig = slot;
      slot = orig + kH;
      const double up = loss_now();
      slot = orig - kH;
      const double down = loss_now();
      slot = orig;
      const double fd = (up - down) / (2.0 * kH);
      const double an = gs[t]->storage()[i];
      diff2 += (an - fd) * (an - fd);
      fd2 += fd * fd;
    }
    worst = std::max(worst, std::sqrt(diff2) / std::max(std::sqrt(fd2), 1e-10));
  }
  return worst;
}

int run_gradcheck(const std::string& config_path, const std::optional<std::uint64_t>& seed,
                  const RunPaths& rp) {
  json cfg = load_config(config_path);
  check_keys(cfg, {"seed"}, "gradcheck config");
  const std::uint64_t rng_seed = seed ? *seed : cfg.value("seed", std::uint64_t{0});
  rp.prepare();

  Rng rng(rng_seed + 1);
  std::vector<std::pair<std::string, double>> results;
  auto vjp = [&](const std::string& name, const TapeBuilder& build,
                 std::vector<Matrix> inputs, bool symmetric = false) {
    results.emplace_back("vjp_" + name, vjp_probe(build, inputs, rng, symmetric));
  };
  auto gm = [&](std::size_t r, std::size_t c) { return gaussian_matrix(r, c, rng); };

  vjp("matmul",
      [](Tape& t, const std::vector<Tape::NodeId>& in) { return t.matmul(in[0], in[1]); },
      {gm(4, 3), gm(3, 5)});
  vjp("add",
      [](Tape& t, const std::vector<Tape::NodeId>& in) { return t.add(in[0], in[1]); },
      {gm(4, 3), gm(4, 3)});
  vjp("sub",
      [](Tape& t, const std::vector<Tape::NodeId>& in) { return t.sub(in[0], in[1]); },
      {gm(3, 4), gm(3, 4)});
  vjp("scale",
      [](Tape& t, const std::vector<Tape::NodeId>& in) { return t.scale(in[0], -0.7); },
      {gm(3, 3)});
  vjp("add_scalar",
      [](Tape& t, const std::vector<Tape::NodeId>& in) {
        return t.add_scalar(in[0], 0.3);
      },
      {gm(3, 3)});
  vjp("transpose",
      [](Tape& t, const std::vector<Tape::NodeId>& in) { return t.transpose(in[0]); },
      {gm(2, 5)});
  vjp("softmax_columns",
      [](Tape& t, const std::vector<Tape::NodeId>& in) {
        return t.softmax_columns(in[0]);
      },
      {gm(5, 4)});
  {
    Matrix shifted = gm(4, 4);
    for (double& v : shifted.storage()) v += (v >= 0.0 ? 0.1 : -0.1);
    vjp("relu",
        [](Tape& t, const std::vector<Tape::NodeId>& in) { return t.relu(in[0]); },
        {shifted});
  }
  vjp("layer_norm",
      [](Tape& t, const std::vector<Tape::NodeId>& in) {
        return t.layer_norm(in[0], in[1], in[2]);
      },
      {gm(6, 3), gm(6, 1), gm(6, 1)});
  vjp("select_column",
      [](Tape& t, const std::vector<Tape::NodeId>& in) {
        return t.select_column(in[0], 2);
      },
      {gm(4, 5)});
  vjp("concat_columns",
      [](Tape& t, const std::vector<Tape::NodeId>& in) {
        return t.concat_columns(in[0], in[1]);
      },
      {gm(4, 2), gm(4, 3)});
  vjp("concat_rows",
      [](Tape& t, const std::vector<Tape::NodeId>& in) {
        return t.concat_rows(in[0], in[1]);
      },
      {gm(2, 4), gm(3, 4)});
  vjp("add_col_broadcast",
      [](Tape& t, const std::vector<Tape::NodeId>& in) {
        return t.add_col_broadcast(in[0], in[1]);
      },
      {gm(4, 3), gm(4, 1)});
  {
    Matrix base = gm(4, 4);
    Matrix spd = add(Matrix::identity(4), matmul(transpose(base), base));
    vjp("spd_inverse",
        [](Tape& t, const std::vector<Tape::NodeId>& in) { return t.spd_inverse(in[0]); },
        {spd}, true);
  }
  vjp("cross_entropy",
      [](Tape& t, const std::vector<Tape::NodeId>& in) {
        return t.cross_entropy_smoothed(in[0], {2, 0, 1}, 0.1);
      },
      {gm(4, 3)});

  results.emplace_back("coding_rate_gradient", rate_gradient_probe(rng, false));
  results.emplace_back("projected_rate_gradient", rate_gradient_probe(rng, true));
  results.emplace_back("model_default", model_gradient_probe({}, rng_seed + 11));
  {
    LayerOptions exact;
    exact.variant = LayerVariant::kExactGrad;
    results.emplace_back("model_exact_grad", model_gradient_probe(exact, rng_seed + 13));
    LayerOptions prox;
    prox.variant = LayerVariant::kMmProx;
    results.emplace_back("model_mm_prox", model_gradient_probe(prox, rng_seed + 17));
  }

  double max_err = 0.0;
  std::vector<std::vector<std::string>> rows;
  for (const auto& [name, err] : results) {
    max_err = std::max(max_err, err);
    rows.push_back({name, format_double(err)});
    std::cout << name << ": " << format_double(err) << "\n";
  }
  std::cout << "max relative error: " << format_double(max_err) << "\n";
  const bool ok = max_err <= 1e-5;
  std::cout << (ok ? "PASS" : "FAIL") << "\n";

  if (rp.enabled()) {
    write_csv(rp.file("gradcheck.csv"), "check,rel_err", rows);
    write_echo(rp, json{{"seed", rng_seed}});
    write_run_info(rp, "gradcheck", 1);
  }
  return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// export-checkpoint-info

int run_export_info(const std::string& config_path, const RunPaths& rp) {
  json cfg = load_config(config_path);
  check_keys(cfg, {"model", "seed"}, "export-checkpoint-info config");
  const std::string model = cfg.at("model").get<std::string>();
  rp.prepare();

  Checkpoint ck = load_checkpoint(model);  // full validation
  TensorFile tf = TensorFile::load(model);
  json info;
  info["container"] = tf.container();
  info["meta"] = tf.meta();
  json tensors = json::array();
  std::size_t total = 0;
  for (const std::string& name : tf.names()) {
    const auto shape = tf.shape(name);
    std::size_t count = 1;
    for (std::size_t s : shape) count *= s;
    total += count;
    tensors.push_back({{"name", name}, {"shape", shape}});
  }
  info["tensors"] = std::move(tensors);
  info["parameter_count"] = total;
  (void)ck;

  const std::string text = info.dump(2) + "\n";
  std::cout << text;
  if (rp.enabled()) {
    write_text_file(rp.file("info.json"), text);
    write_echo(rp, json{{"model", model}});
    write_run_info(rp, "export-checkpoint-info", 1);
  }
  return 0;
}

}  // namespace

int cli_dispatch(const std::vector<std::string>& args) {
  CLI::App app{"White-box transformer toolkit: synthetic data, training, evaluation,"
               " layer diagnostics, denoising demos, and gradient verification."};
  app.name("crate");
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  std::string config, out;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
  std::string variant_flag, attention_flag;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "JSON config file")->required();
    sub->add_option("--out", out, "output directory");
    sub->add_option("--seed", seed, "override the config seed");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  add_common(gen);
  CLI::App* train = app.add_subcommand("train", "train a model and write a checkpoint");
  add_common(train);
  train->add_option("--threads", threads, "gradient worker count");
  train->add_option("--variant", variant_flag, "layer variant override")
      ->check(CLI::IsMember({"default", "exact_grad", "mm_prox"}));
  train->add_option("--attention", attention_flag, "attention aggregation override")
      ->check(CLI::IsMember({"tied", "trainable_w"}));
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  add_common(eval_cmd);
  CLI::App* diagnose =
      app.add_subcommand("diagnose", "layer-wise compression/sparsity measurements");
  add_common(diagnose);
  CLI::App* denoise =
      app.add_subcommand("denoise-demo", "mixture denoising sweep as CSV");
  add_common(denoise);
  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference gradient verification");
  add_common(gradcheck);
  CLI::App* info =
      app.add_subcommand("export-checkpoint-info", "describe a checkpoint as JSON");
  add_common(info);

  std::vector<const char*> argv;
  argv.push_back("crate");
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  RunPaths rp{out};
  try {
    if (gen->parsed()) return run_gen_data(config, seed, rp);
    if (train->parsed())
      return run_train(config, seed, variant_flag, attention_flag, threads, rp);
    if (eval_cmd->parsed()) return run_eval(config, rp);
    if (diagnose->parsed()) return run_diagnose(config, seed, rp);
    if (denoise->parsed()) return run_denoise_demo(config, seed, rp);
    if (gradcheck->parsed()) return run_gradcheck(config, seed, rp);
    if (info->parsed()) return run_export_info(config, rp);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace crate
