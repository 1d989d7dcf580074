#include "crate/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "crate/linalg.hpp"

namespace crate {

namespace {

std::size_t layer_count(const std::vector<std::vector<LayerTrace>>& traces,
                        const char* who) {
  require(!traces.empty(), std::string(who) + ": no traces");
  const std::size_t layers = traces[0].size();
  require(layers > 0, std::string(who) + ": traces have no layers");
  for (const auto& per_sample : traces)
    require(per_sample.size() == layers,
            std::string(who) + ": ragged per-sample layer counts");
  return layers;
}

}  // namespace

std::vector<double> measure_compression(const std::vector<std::vector<LayerTrace>>& traces,
                                        const std::vector<SubspaceBank>& banks,
                                        const RateConfig& cfg) {
  const std::size_t layers = layer_count(traces, "measure_compression");
  require(banks.size() == layers,
          "measure_compression: one subspace bank per layer required");
  std::vector<double> out(layers, 0.0);
  for (std::size_t l = 0; l < layers; ++l) {
    double sum = 0.0;
    for (const auto& per_sample : traces)
      sum += coding_rate_projected(per_sample[l].z_mid, banks[l], cfg);
    out[l] = sum / static_cast<double>(traces.size());
  }
  return out;
}

std::vector<double> measure_sparsity(const std::vector<std::vector<LayerTrace>>& traces,
                                     double threshold) {
  require(threshold >= 0.0, "measure_sparsity: threshold must be nonnegative");
  const std::size_t layers = layer_count(traces, "measure_sparsity");
  std::vector<double> out(layers, 0.0);
  for (std::size_t l = 0; l < layers; ++l) {
    double sum = 0.0;
    for (const auto& per_sample : traces) {
      const Matrix& z = per_sample[l].z_out;
      require(z.size() > 0, "measure_sparsity: empty trace output");
      sum += static_cast<double>(nnz_above(z, threshold)) /
             static_cast<double>(z.size());
    }
    out[l] = sum / static_cast<double>(traces.size());
  }
  return out;
}

Matrix subspace_coherence(const SubspaceBank& bank) {
  require(!bank.empty(), "subspace_coherence: empty bank");
  Matrix stacked = bank[0];
  for (std::size_t k = 1; k < bank.size(); ++k)
    stacked = concat_columns(stacked, bank[k]);
  for (std::size_t j = 0; j < stacked.cols(); ++j) {
    const double norm = column_norm(stacked, j);
    if (norm == 0.0)
      throw std::runtime_error("subspace_coherence: zero column " + std::to_string(j));
    for (std::size_t i = 0; i < stacked.rows(); ++i) stacked(i, j) /= norm;
  }
  return gram_columns(stacked);
}

Matrix export_token_heatmap(const LayerTrace& trace, std::size_t rows, std::size_t cols,
                            Rng& rng) {
  const Matrix& z = trace.z_out;
  require(rows >= 1 && cols >= 1, "export_token_heatmap: empty selection");
  require(rows <= z.rows() && cols <= z.cols(),
          "export_token_heatmap: requested " + std::to_string(rows) + "x" +
              std::to_string(cols) + " submatrix from a " + shape_str(z) + " trace");
  std::vector<std::size_t> ri(z.rows()), ci(z.cols());
  std::iota(ri.begin(), ri.end(), std::size_t{0});
  std::iota(ci.begin(), ci.end(), std::size_t{0});
  rng.shuffle(ri);
  rng.shuffle(ci);
  ri.resize(rows);
  ci.resize(cols);
  std::sort(ri.begin(), ri.end());
  std::sort(ci.begin(), ci.end());
  Matrix out(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out(i, j) = z(ri[i], ci[j]);
  return out;
}

}  // namespace crate
