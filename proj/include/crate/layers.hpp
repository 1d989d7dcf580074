#pragma once

#include <functional>
#include <string>
#include <vector>

#include "crate/rate.hpp"
#include "crate/tokens.hpp"

namespace crate {

// Building blocks of the unrolled-optimization architecture. Each layer runs
// two half-steps derived from the sparse rate reduction objective: a
// compression step against the layer's subspace bank (attention), then a
// sparsification step against the layer's dictionary (the MLP slot).

struct LayerNormParams {
  Matrix gain;  // d x 1
  Matrix bias;  // d x 1
};

// Per-token (column) standardization across the d feature rows, then an
// elementwise affine map. Identity parameters are gain = 1, bias = 0.
Matrix layer_norm(const Matrix& z, const LayerNormParams& params, double eps = 1e-6);

enum class AttentionMode { kTied, kTrainableW };
enum class LayerVariant { kDefault, kExactGrad, kMmProx };
enum class GradKind { kApprox, kExact };

struct LayerParams {
  SubspaceBank subspaces;  // K bases, d x p each
  Matrix head_mixer;       // d x pK aggregation W; empty in tied-only models
  Matrix dictionary;       // d x d, initialized orthonormal
  LayerNormParams ln1;     // in front of the attention half-step
  LayerNormParams ln2;     // in front of the sparsification half-step
};

// Forward-pass switches. `temperature <= 0` selects the default 1/sqrt(p)
// attention scale; 1.0 gives the unscaled similarity form used in the math
// tests. `layer_norm_enabled = false` strips normalization so closed-form
// traces are reachable.
struct LayerOptions {
  LayerVariant variant = LayerVariant::kDefault;
  AttentionMode attention = AttentionMode::kTrainableW;
  double temperature = 0.0;
  bool layer_norm_enabled = true;
};

struct LayerTrace {
  Matrix z_in;
  Matrix z_mid;  // after the compression half-step
  Matrix z_out;  // after the sparsification half-step
};

// Single-head subspace attention:
//   (U_k^T Z) softmax_columns(temperature (U_k^T Z)^T (U_k^T Z)),  p x N.
Matrix ssa(const Matrix& z, const Matrix& u_k, double temperature);

// Head aggregation over the bank. Tied mode scales the concatenated heads by
// gamma = p/(N eps^2):   gamma [U_1..U_K] stack_k(ssa_k);
// trainable_w mode applies the learned mixer:   W stack_k(ssa_k).
// Throws when trainable_w is requested without a mixer.
Matrix mssa(const Matrix& z, const LayerParams& params, const RateConfig& cfg,
            AttentionMode mode, double temperature = 0.0);

// One gradient step on the projected coding rate with step size kappa.
//   exact:  Z - kappa grad_coding_rate_projected(Z)
//   approx: (1 - kappa gamma) Z + kappa gamma^2 [U..] stack(ssa)  -- the
//           softmax surrogate, evaluated at temperature 1 because that is the
//           form the surrogate is derived in.
Matrix compression_step(const Matrix& z, const LayerParams& params, const RateConfig& cfg,
                        GradKind kind);

// ReLU(Z + eta D^T (Z - D Z) - eta lambda 1): one nonnegative proximal
// gradient step on the sparse-coding program  min lambda ||A||_1 + ||Z - D A||_F^2.
Matrix ista_step(const Matrix& z_mid, const Matrix& dictionary, double eta, double lambda);

// ReLU((1 + 4/(9(1+alpha))) D^T Z - (4 lambda / (9 alpha)) 1): one proximal
// majorize-minimize step on  lambda ||Z||_1 - R(Z)  over nonnegative Z. The
// derivation assumes an orthogonal dictionary, so this entry point rejects
// dictionaries with ||D^T D - I||_max > 1e-8. Inside layer_forward the same
// formula is applied without that gate: a trained dictionary drifts away
// from exact orthogonality, and the trained variant must stay evaluable.
Matrix mm_prox_step(const Matrix& z_mid, const Matrix& dictionary, const RateConfig& cfg);

// One full block, pre-norm arrangement:
//   default:    z_mid = z + mssa(LN1(z));        z_out = ista_step(LN2(z_mid))
//   exact_grad: z_mid = compression_step(LN1(z), exact)   (the gradient step
//               carries its own identity term, so no extra residual)
//   mm_prox:    default z_mid;                   z_out = mm_prox(LN2(z_mid))
// The sparsification half-step has no residual around it beyond the leading
// Z term inside the ISTA update itself.
LayerTrace layer_forward(const Matrix& z, const LayerParams& params, const RateConfig& cfg,
                         const LayerOptions& opt = {});

// Static shape description of a full model.
struct CrateArch {
  std::size_t input_dim = 0;  // flattened patch length fed to the embedding
  std::size_t tokens = 0;     // patches per sample, before the class token
  std::size_t d = 0;          // embedding width
  std::size_t p = 0;          // subspace dimension per head
  std::size_t K = 0;          // heads
  std::size_t L = 0;          // layers
  std::size_t classes = 0;

  void validate() const;
  // Rate configuration implied by the architecture: N counts the class token.
  RateConfig rate_config(double eps, double lambda, double kappa, double eta) const;
};

struct CrateParams {
  Matrix patch_embed;  // d x input_dim
  Matrix patch_bias;   // d x 1
  Matrix cls_token;    // d x 1
  Matrix pos_embed;    // d x (tokens + 1)
  std::vector<LayerParams> layers;
  LayerNormParams ln_final;
  Matrix head;       // classes x d
  Matrix head_bias;  // classes x 1
};

// Fresh parameters: orthonormal subspaces and dictionary, identity layer
// norms, small random embeddings, mixer present (tied-mode runs ignore it).
CrateParams init_crate_params(const CrateArch& arch, Rng& rng);

// Visits every tensor in a fixed, documented order (the checkpoint and
// optimizer-state order). Names are stable identifiers like
// "layers.2.subspaces.0" or "head_bias".
void for_each_tensor(CrateParams& params,
                     const std::function<void(const std::string&, Matrix&)>& fn);
void for_each_tensor(const CrateParams& params,
                     const std::function<void(const std::string&, const Matrix&)>& fn);

struct ForwardOutput {
  Matrix logits;  // classes x batch, column b belongs to sample b
  // Per-sample, per-layer traces; filled only when requested.
  std::vector<std::vector<LayerTrace>> traces;
};

// Full forward pass: patch embedding, class token, positional embedding, L
// blocks, final layer norm, class-token readout, linear head. cfg.N must
// equal tokens + 1 (the class token participates in every block).
ForwardOutput crate_forward(const TokenBatch& batch, const CrateParams& params,
                            const RateConfig& cfg, const LayerOptions& opt = {},
                            bool record_traces = false);

}  // namespace crate
