#pragma once

#include <vector>

#include "crate/layers.hpp"
#include "crate/rate.hpp"
#include "crate/rng.hpp"

namespace crate {

// Per-layer compression term: the projected coding rate of each layer's
// attention-block output z_mid, averaged over the samples. traces[b][l] is
// sample b at layer l; banks[l] is that layer's subspace bank.
std::vector<double> measure_compression(const std::vector<std::vector<LayerTrace>>& traces,
                                        const std::vector<SubspaceBank>& banks,
                                        const RateConfig& cfg);

// Per-layer sparsity: fraction of entries with |value| > threshold in each
// layer's z_out, averaged over samples. The default threshold 0 counts exact
// zeros, which the ReLU in the sparsification step produces.
std::vector<double> measure_sparsity(const std::vector<std::vector<LayerTrace>>& traces,
                                     double threshold = 0.0);

// Column-normalizes each basis and returns the pK x pK Gram of [U_1 .. U_K].
Matrix subspace_coherence(const SubspaceBank& bank);

// Random row/column submatrix of z_out, deterministic given the generator.
Matrix export_token_heatmap(const LayerTrace& trace, std::size_t rows, std::size_t cols,
                            Rng& rng);

}  // namespace crate
