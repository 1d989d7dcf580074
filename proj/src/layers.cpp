#include "crate/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace crate {
namespace {

double pick_temperature(double requested, std::size_t p) {
  return requested > 0.0 ? requested : 1.0 / std::sqrt(static_cast<double>(p));
}

// The prox formula without the orthogonality gate; see mm_prox_step.
Matrix mm_prox_apply(const Matrix& z_mid, const Matrix& dictionary, const RateConfig& cfg) {
  const double alpha = cfg.alpha();
  const double gain = 1.0 + 4.0 / (9.0 * (1.0 + alpha));
  const double threshold = 4.0 * cfg.lambda / (9.0 * alpha);
  Matrix pre = scale(matmul(transpose(dictionary), z_mid), gain);
  for (double& v : pre.storage()) v -= threshold;
  return relu(pre);
}

Matrix maybe_norm(const Matrix& z, const LayerNormParams& p, const LayerOptions& opt) {
  return opt.layer_norm_enabled ? layer_norm(z, p) : z;
}

}  // namespace

Matrix layer_norm(const Matrix& z, const LayerNormParams& params, double eps) {
  const std::size_t d = z.rows(), n = z.cols();
  require(params.gain.rows() == d && params.gain.cols() == 1 &&
              params.bias.rows() == d && params.bias.cols() == 1,
          "layer_norm: gain/bias must be " + std::to_string(d) + "x1");
  Matrix out(d, n);
  for (std::size_t j = 0; j < n; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += z(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      double c = z(i, j) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i)
      out(i, j) = params.gain(i, 0) * ((z(i, j) - mean) * inv) + params.bias(i, 0);
  }
  return out;
}

Matrix ssa(const Matrix& z, const Matrix& u_k, double temperature) {
  require(u_k.rows() == z.rows(),
          "ssa: basis is " + shape_str(u_k) + ", tokens are " + shape_str(z));
  require(temperature > 0.0, "ssa: temperature must be positive");
  Matrix g = matmul(transpose(u_k), z);  // p x N
  Matrix sim = scale(gram_columns(g), temperature);
  return matmul(g, softmax_columns(sim));
}

Matrix mssa(const Matrix& z, const LayerParams& params, const RateConfig& cfg,
            AttentionMode mode, double temperature) {
  check_bank_shapes(params.subspaces, cfg);
  require(z.rows() == cfg.d, "mssa: tokens are " + shape_str(z));
  const double temp = pick_temperature(temperature, cfg.p);
  if (mode == AttentionMode::kTied) {
    Matrix out(z.rows(), z.cols());
    for (const Matrix& u : params.subspaces) out = add(out, matmul(u, ssa(z, u, temp)));
    return scale(out, cfg.gamma());
  }
  require(!params.head_mixer.empty(), "mssa: trainable_w mode needs a head mixer");
  require(params.head_mixer.rows() == cfg.d && params.head_mixer.cols() == cfg.p * cfg.K,
          "mssa: head mixer is " + shape_str(params.head_mixer));
  Matrix stacked = ssa(z, params.subspaces[0], temp);
  for (std::size_t k = 1; k < params.subspaces.size(); ++k)
    stacked = concat_rows(stacked, ssa(z, params.subspaces[k], temp));
  return matmul(params.head_mixer, stacked);
}

Matrix compression_step(const Matrix& z, const LayerParams& params, const RateConfig& cfg,
                        GradKind kind) {
  if (kind == GradKind::kExact)
    return sub(z, scale(grad_coding_rate_projected(z, params.subspaces, cfg), cfg.kappa));
  check_bank_shapes(params.subspaces, cfg);
  require(z.rows() == cfg.d && z.cols() == cfg.N,
          "compression_step: tokens are " + shape_str(z));
  const double gamma = cfg.gamma();
  // The surrogate is derived at unit temperature; the trained attention
  // scale is a separate knob and does not belong here.
  Matrix heads(z.rows(), z.cols());
  for (const Matrix& u : params.subspaces) heads = add(heads, matmul(u, ssa(z, u, 1.0)));
  return add(scale(z, 1.0 - cfg.kappa * gamma), scale(heads, cfg.kappa * gamma * gamma));
}

Matrix ista_step(const Matrix& z_mid, const Matrix& dictionary, double eta, double lambda) {
  require(eta > 0.0, "ista_step: eta must be positive");
  require(lambda >= 0.0, "ista_step: lambda must be nonnegative");
  require(dictionary.rows() == dictionary.cols() && dictionary.rows() == z_mid.rows(),
          "ista_step: dictionary is " + shape_str(dictionary) + ", tokens are " +
              shape_str(z_mid));
  Matrix recon = matmul(dictionary, z_mid);
  Matrix correction = matmul(transpose(dictionary), sub(z_mid, recon));
  Matrix pre = add(z_mid, scale(correction, eta));
  const double shift = eta * lambda;
  for (double& v : pre.storage()) v -= shift;
  return relu(pre);
}

Matrix mm_prox_step(const Matrix& z_mid, const Matrix& dictionary, const RateConfig& cfg) {
  require(dictionary.rows() == dictionary.cols() && dictionary.rows() == z_mid.rows(),
          "mm_prox_step: dictionary is " + shape_str(dictionary) + ", tokens are " +
              shape_str(z_mid));
  Matrix gram = gram_columns(dictionary);
  for (std::size_t i = 0; i < gram.rows(); ++i) gram(i, i) -= 1.0;
  require(max_abs(gram) <= 1e-8,
          "mm_prox_step: dictionary is not orthogonal within 1e-8");
  return mm_prox_apply(z_mid, dictionary, cfg);
}

LayerTrace layer_forward(const Matrix& z, const LayerParams& params, const RateConfig& cfg,
                         const LayerOptions& opt) {
  LayerTrace trace;
  trace.z_in = z;
  Matrix normed = maybe_norm(z, params.ln1, opt);
  if (opt.variant == LayerVariant::kExactGrad) {
    trace.z_mid = compression_step(normed, params, cfg, GradKind::kExact);
  } else {
    trace.z_mid = add(z, mssa(normed, params, cfg, opt.attention, opt.temperature));
  }
  Matrix normed_mid = maybe_norm(trace.z_mid, params.ln2, opt);
  if (opt.variant == LayerVariant::kMmProx) {
    trace.z_out = mm_prox_apply(normed_mid, params.dictionary, cfg);
  } else {
    trace.z_out = ista_step(normed_mid, params.dictionary, cfg.eta, cfg.lambda);
  }
  return trace;
}

void CrateArch::validate() const {
  require(input_dim > 0 && tokens > 0 && d > 0 && p > 0 && K > 0 && classes > 0,
          "model arch: dimensions must be positive");
  require(L >= 1, "model arch: needs at least one layer");
  require(p <= d, "model arch: subspace dimension exceeds embedding width");
}

RateConfig CrateArch::rate_config(double eps, double lambda, double kappa, double eta) const {
  RateConfig cfg;
  cfg.d = d;
  cfg.N = tokens + 1;
  cfg.p = p;
  cfg.K = K;
  cfg.eps = eps;
  cfg.lambda = lambda;
  cfg.kappa = kappa;
  cfg.eta = eta;
  cfg.validate();
  return cfg;
}

CrateParams init_crate_params(const CrateArch& arch, Rng& rng) {
  arch.validate();
  CrateParams params;
  params.patch_embed =
      scale(gaussian_matrix(arch.d, arch.input_dim, rng),
            1.0 / std::sqrt(static_cast<double>(arch.input_dim)));
  params.patch_bias = Matrix(arch.d, 1);
  params.cls_token = scale(gaussian_matrix(arch.d, 1, rng), 0.02);
  params.pos_embed = scale(gaussian_matrix(arch.d, arch.tokens + 1, rng), 0.02);
  for (std::size_t l = 0; l < arch.L; ++l) {
    LayerParams layer;
    for (std::size_t k = 0; k < arch.K; ++k)
      layer.subspaces.push_back(orthonormalize(gaussian_matrix(arch.d, arch.p, rng), rng));
    layer.head_mixer = scale(gaussian_matrix(arch.d, arch.p * arch.K, rng),
                             1.0 / std::sqrt(static_cast<double>(arch.p * arch.K)));
    layer.dictionary = orthonormalize(gaussian_matrix(arch.d, arch.d, rng), rng);
    layer.ln1 = {Matrix(arch.d, 1), Matrix(arch.d, 1)};
    layer.ln2 = {Matrix(arch.d, 1), Matrix(arch.d, 1)};
    for (std::size_t i = 0; i < arch.d; ++i) {
      layer.ln1.gain(i, 0) = 1.0;
      layer.ln2.gain(i, 0) = 1.0;
    }
    params.layers.push_back(std::move(layer));
  }
  params.ln_final = {Matrix(arch.d, 1), Matrix(arch.d, 1)};
  for (std::size_t i = 0; i < arch.d; ++i) params.ln_final.gain(i, 0) = 1.0;
  params.head = scale(gaussian_matrix(arch.classes, arch.d, rng),
                      1.0 / std::sqrt(static_cast<double>(arch.d)));
  params.head_bias = Matrix(arch.classes, 1);
  return params;
}

namespace {

template <typename Params, typename Fn>
void visit_tensors(Params& params, const Fn& fn) {
  fn("patch_embed", params.patch_embed);
  fn("patch_bias", params.patch_bias);
  fn("cls_token", params.cls_token);
  fn("pos_embed", params.pos_embed);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto& layer = params.layers[l];
    const std::string base = "layers." + std::to_string(l) + ".";
    for (std::size_t k = 0; k < layer.subspaces.size(); ++k)
      fn(base + "subspaces." + std::to_string(k), layer.subspaces[k]);
    if (!layer.head_mixer.empty()) fn(base + "head_mixer", layer.head_mixer);
    fn(base + "dictionary", layer.dictionary);
    fn(base + "ln1.gain", layer.ln1.gain);
    fn(base + "ln1.bias", layer.ln1.bias);
    fn(base + "ln2.gain", layer.ln2.gain);
    fn(base + "ln2.bias", layer.ln2.bias);
  }
  fn("ln_final.gain", params.ln_final.gain);
  fn("ln_final.bias", params.ln_final.bias);
  fn("head", params.head);
  fn("head_bias", params.head_bias);
}

}  // namespace

void for_each_tensor(CrateParams& params,
                     const std::function<void(const std::string&, Matrix&)>& fn) {
  visit_tensors(params, fn);
}

void for_each_tensor(const CrateParams& params,
                     const std::function<void(const std::string&, const Matrix&)>& fn) {
  visit_tensors(params, fn);
}

ForwardOutput crate_forward(const TokenBatch& batch, const CrateParams& params,
                            const RateConfig& cfg, const LayerOptions& opt,
                            bool record_traces) {
  require(!batch.samples.empty(), "crate_forward: empty batch");
  const std::size_t d = params.patch_embed.rows();
  require(cfg.d == d, "crate_forward: config d does not match the embedding width");
  ForwardOutput out;
  out.logits = Matrix(params.head.rows(), batch.size());
  if (record_traces) out.traces.resize(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Matrix& x = batch.samples[b];
    require(x.rows() == params.patch_embed.cols(),
            "crate_forward: sample " + std::to_string(b) + " has token dimension " +
                std::to_string(x.rows()) + ", embedding expects " +
                std::to_string(params.patch_embed.cols()));
    require(x.cols() + 1 == cfg.N,
            "crate_forward: config N must equal tokens + 1 (class token included)");
    Matrix z = add_col_broadcast(matmul(params.patch_embed, x), params.patch_bias);
    z = concat_columns(params.cls_token, z);
    z = add(z, params.pos_embed);
    for (const LayerParams& layer : params.layers) {
      LayerTrace trace = layer_forward(z, layer, cfg, opt);
      z = trace.z_out;
      if (record_traces) out.traces[b].push_back(std::move(trace));
    }
    Matrix final_tokens = opt.layer_norm_enabled
                              ? layer_norm(z, params.ln_final)
                              : z;
    Matrix cls = select_column(final_tokens, 0);
    Matrix logits = add(matmul(params.head, cls), params.head_bias);
    set_column(out.logits, b, logits);
  }
  return out;
}

}  // namespace crate
