#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "crate/layers.hpp"

namespace crate {

// Reverse-mode tape over matrix-valued primitives. Nodes are appended in
// construction order, which is by definition a topological order; backward()
// walks them in exact reverse, so gradient accumulation order is fixed and
// repeated runs are bit-identical. Forward values are computed by the same
// kernels the inference path uses, so a tape replay of the model produces
// bit-identical activations.
class Tape {
 public:
  using NodeId = std::size_t;

  // Leaf node. requires_grad marks it as a differentiation target; constants
  // (identity matrices, data) should use constant() so backward skips them.
  NodeId input(Matrix value, bool requires_grad = true);
  NodeId constant(Matrix value) { return input(std::move(value), false); }

  NodeId matmul(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  NodeId add_scalar(NodeId a, double shift);
  NodeId transpose(NodeId a);
  NodeId softmax_columns(NodeId a);
  NodeId relu(NodeId a);  // subgradient at 0 is 0
  NodeId layer_norm(NodeId z, NodeId gain, NodeId bias, double eps = 1e-6);
  NodeId select_column(NodeId a, std::size_t col);
  NodeId concat_columns(NodeId a, NodeId b);
  NodeId concat_rows(NodeId a, NodeId b);
  NodeId add_col_broadcast(NodeId a, NodeId col);
  // Inverse of a symmetric positive definite matrix (Cholesky-backed).
  NodeId spd_inverse(NodeId a);
  // Scalar (1x1) node: mean over columns of smoothed cross-entropy.
  NodeId cross_entropy_smoothed(NodeId logits, std::vector<int> labels, double smoothing);

  const Matrix& value(NodeId id) const;
  std::size_t size() const { return nodes_.size(); }

  // Reverse sweep from root. The seed is d(out)/d(root); the scalar overload
  // seeds with 1. Adjoints accumulate additively across consumers.
  void backward(NodeId root);
  void backward(NodeId root, const Matrix& seed);

  // Adjoint from the last backward sweep; zeros if the node is off-path.
  Matrix grad(NodeId id) const;

 private:
  enum class Op {
    kInput,
    kMatmul,
    kAdd,
    kSub,
    kScale,
    kAddScalar,
    kTranspose,
    kSoftmaxCols,
    kRelu,
    kLayerNorm,
    kSelectColumn,
    kConcatColumns,
    kConcatRows,
    kAddColBroadcast,
    kSpdInverse,
    kCrossEntropy,
  };
  struct Node {
    Op op;
    std::vector<NodeId> in;
    Matrix value;
    double aux = 0.0;  // scale factor / scalar shift / LN eps / CE smoothing
    std::size_t index = 0;
    bool needs_grad = false;
    std::vector<int> labels;  // cross-entropy only
  };

  NodeId push(Op op, std::vector<NodeId> in, Matrix value, double aux = 0.0,
              std::size_t index = 0);
  void accumulate(NodeId id, const Matrix& contribution);
  const Node& at(NodeId id) const;

  std::vector<Node> nodes_;
  std::vector<Matrix> adjoints_;
};

// Mean over the batch of -sum_c q_c log softmax(logits)_c with
// q = (1 - smoothing) * onehot(label) + smoothing / C.
double cross_entropy_smoothed(const Matrix& logits, const std::vector<int>& labels,
                              double smoothing);

// Parameter tensors registered on a tape, mirroring CrateParams.
struct TapeLayer {
  std::vector<Tape::NodeId> subspaces;
  Tape::NodeId head_mixer = 0;
  bool has_mixer = false;
  Tape::NodeId dictionary = 0;
  Tape::NodeId ln1_gain = 0, ln1_bias = 0;
  Tape::NodeId ln2_gain = 0, ln2_bias = 0;
};
struct TapeParams {
  Tape::NodeId patch_embed = 0, patch_bias = 0, cls_token = 0, pos_embed = 0;
  std::vector<TapeLayer> layers;
  Tape::NodeId ln_final_gain = 0, ln_final_bias = 0;
  Tape::NodeId head = 0, head_bias = 0;
};

TapeParams register_crate_params(Tape& tape, const CrateParams& params);

// Tape replays of the model forward. Activations match crate_forward
// bit-for-bit because both paths call the same kernels in the same order.
Tape::NodeId tape_crate_logits(Tape& tape, const TapeParams& tp, const TokenBatch& batch,
                               const RateConfig& cfg, const LayerOptions& opt = {});
Tape::NodeId tape_crate_loss(Tape& tape, const TapeParams& tp, const TokenBatch& batch,
                             const RateConfig& cfg, const LayerOptions& opt,
                             double smoothing);

// Gradient containers share the parameter layout.
CrateParams zero_like(const CrateParams& params);
CrateParams collect_param_grads(const Tape& tape, const TapeParams& tp,
                                const CrateParams& like);

// Loss, logits, and mean parameter gradients for a labeled batch, computed
// from one tape per sample and reduced in sample order (so the result is
// independent of `threads`). threads = 0 means one worker.
struct BatchGrads {
  CrateParams grads;
  double loss = 0.0;
  Matrix logits;
};
BatchGrads crate_loss_grads(const CrateParams& params, const TokenBatch& batch,
                            const RateConfig& cfg, const LayerOptions& opt,
                            double smoothing, std::size_t threads = 1);

}  // namespace crate
