#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crate/layers.hpp"
#include "crate/rng.hpp"
#include "crate/serialize.hpp"

namespace crate {

// Labeled token sets drawn from per-class subspace mixtures: each token is
// U c + sigma w with U one of the class's orthonormal bases. When all bases
// fit side by side in the ambient space they are sliced from one orthonormal
// matrix, making cross-class coherence exactly zero.
struct SyntheticSpec {
  std::size_t classes = 4;
  std::size_t tokens = 16;
  std::size_t input_dim = 48;
  std::size_t subspaces_per_class = 1;
  std::size_t p_data = 4;
  double sigma_data = 0.1;
  std::size_t samples_per_class = 1000;
  double test_fraction = 0.25;
  std::uint64_t seed = 0;

  void validate() const;
  json to_json() const;
  static SyntheticSpec from_json(const json& j);
};

struct Dataset {
  TokenBatch train;
  TokenBatch test;
  json info;  // spec echo plus measured cross-class coherence
};

Dataset gen_synthetic(const SyntheticSpec& spec);

// Dataset container: same manifest + blob framing as checkpoints.
void save_dataset(const std::string& stem, const Dataset& ds);
Dataset load_dataset(const std::string& stem);

// IDX ingestion (big-endian headers, magic 0x00000803 for u8 image tensors
// and 0x00000801 for labels).
struct IdxImages {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;  // row-major per image, images in order
};
IdxImages load_idx_images(const std::string& path);
std::vector<std::uint8_t> load_idx_labels(const std::string& path);
void write_idx_images(const std::string& path, const IdxImages& images);
void write_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels);

struct PatchSpec {
  std::size_t image_h = 0, image_w = 0, channels = 1;
  std::size_t patch_h = 0, patch_w = 0;
  void validate() const;
  std::size_t patch_dim() const { return patch_h * patch_w * channels; }
  std::size_t num_patches() const {
    return (image_h / patch_h) * (image_w / patch_w);
  }
};

// Non-overlapping patches flattened row-major (channel-last within a patch)
// into columns, patches ordered row-major over the grid; pixels scaled to
// [0, 1]. Image bytes are row-major channel-last.
Matrix patchify(const std::vector<std::uint8_t>& image, const PatchSpec& spec);
std::vector<std::uint8_t> unpatchify(const Matrix& tokens, const PatchSpec& spec);

TokenBatch idx_to_batch(const IdxImages& images, const std::vector<std::uint8_t>& labels,
                        const PatchSpec& spec);

}  // namespace crate
