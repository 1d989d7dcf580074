#include "crate/data.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "crate/linalg.hpp"

namespace crate {

namespace {

// Load-side integrity failures are environmental, matching the tensor container.
void require_file(bool cond, const std::string& message) {
  if (!cond) throw std::runtime_error(message);
}

}  // namespace

void SyntheticSpec::validate() const {
  require(classes >= 1 && tokens >= 1 && input_dim >= 1 && subspaces_per_class >= 1 &&
              p_data >= 1 && samples_per_class >= 1,
          "synthetic spec: counts must be positive");
  require(p_data <= input_dim, "synthetic spec: p_data exceeds input_dim");
  require(sigma_data >= 0.0, "synthetic spec: sigma_data must be nonnegative");
  require(test_fraction >= 0.0 && test_fraction < 1.0,
          "synthetic spec: test_fraction must be in [0, 1)");
  require(classes <= 255, "synthetic spec: at most 255 classes (u8 labels)");
}

json SyntheticSpec::to_json() const {
  return json{{"classes", classes},
              {"tokens", tokens},
              {"input_dim", input_dim},
              {"subspaces_per_class", subspaces_per_class},
              {"p_data", p_data},
              {"sigma_data", sigma_data},
              {"samples_per_class", samples_per_class},
              {"test_fraction", test_fraction},
              {"seed", seed}};
}

SyntheticSpec SyntheticSpec::from_json(const json& j) {
  SyntheticSpec s;
  s.classes = j.value("classes", s.classes);
  s.tokens = j.value("tokens", s.tokens);
  s.input_dim = j.value("input_dim", s.input_dim);
  s.subspaces_per_class = j.value("subspaces_per_class", s.subspaces_per_class);
  s.p_data = j.value("p_data", s.p_data);
  s.sigma_data = j.value("sigma_data", s.sigma_data);
  s.samples_per_class = j.value("samples_per_class", s.samples_per_class);
  s.test_fraction = j.value("test_fraction", s.test_fraction);
  s.seed = j.value("seed", s.seed);
  return s;
}

Dataset gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);

  // Class bases. If every subspace fits disjointly, slice one orthonormal
  // matrix so cross-class coherence is exactly zero.
  const std::size_t total = spec.classes * spec.subspaces_per_class;
  std::vector<Matrix> bases;
  if (total * spec.p_data <= spec.input_dim) {
    Matrix big =
        orthonormalize(gaussian_matrix(spec.input_dim, total * spec.p_data, rng), rng);
    for (std::size_t s = 0; s < total; ++s) {
      Matrix u(spec.input_dim, spec.p_data);
      for (std::size_t i = 0; i < spec.input_dim; ++i)
        for (std::size_t j = 0; j < spec.p_data; ++j)
          u(i, j) = big(i, s * spec.p_data + j);
      bases.push_back(std::move(u));
    }
  } else {
    for (std::size_t s = 0; s < total; ++s)
      bases.push_back(orthonormalize(gaussian_matrix(spec.input_dim, spec.p_data, rng), rng));
  }

  double coherence = 0.0;
  for (std::size_t a = 0; a < total; ++a)
    for (std::size_t b = a + 1; b < total; ++b)
      coherence = std::max(coherence, max_abs(matmul(transpose(bases[a]), bases[b])));

  const std::size_t n_test =
      static_cast<std::size_t>(static_cast<double>(spec.samples_per_class) *
                               spec.test_fraction);
  Dataset ds;
  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
      Matrix x(spec.input_dim, spec.tokens);
      for (std::size_t t = 0; t < spec.tokens; ++t) {
        const std::size_t s = spec.subspaces_per_class == 1
                                  ? 0
                                  : rng.uniform_index(spec.subspaces_per_class);
        const Matrix& u = bases[c * spec.subspaces_per_class + s];
        Matrix token = matmul(u, gaussian_matrix(spec.p_data, 1, rng));
        if (spec.sigma_data > 0.0)
          token = add(token, scale(gaussian_matrix(spec.input_dim, 1, rng),
                                   spec.sigma_data));
        set_column(x, t, token);
      }
      TokenBatch& split = i < spec.samples_per_class - n_test ? ds.train : ds.test;
      split.samples.push_back(std::move(x));
      split.labels.push_back(static_cast<int>(c));
    }
  }
  ds.info = json{{"spec", spec.to_json()}, {"coherence", coherence}};
  return ds;
}

namespace {

void pack_split(TensorWriter& writer, const std::string& prefix, const TokenBatch& batch) {
  const std::size_t n = batch.size();
  std::vector<double> flat;
  std::size_t d = 0, tokens = 0;
  if (n > 0) {
    d = batch.samples[0].rows();
    tokens = batch.samples[0].cols();
    flat.reserve(n * d * tokens);
    for (const Matrix& m : batch.samples) {
      require(m.rows() == d && m.cols() == tokens,
              "dataset: ragged sample shapes in " + prefix);
      flat.insert(flat.end(), m.storage().begin(), m.storage().end());
    }
  }
  writer.add_f64(prefix + "_samples", {n, d, tokens}, flat);
  std::vector<std::uint8_t> labels;
  for (int v : batch.labels) {
    require(v >= 0 && v <= 255, "dataset: label out of u8 range");
    labels.push_back(static_cast<std::uint8_t>(v));
  }
  require(labels.size() == n, "dataset: label count mismatch in " + prefix);
  writer.add_u8(prefix + "_labels", {n}, labels);
}

TokenBatch unpack_split(const TensorFile& tf, const std::string& prefix) {
  const auto shape = tf.shape(prefix + "_samples");
  require_file(shape.size() == 3, "dataset: " + prefix + "_samples is not a 3-d tensor");
  const std::size_t n = shape[0], d = shape[1], tokens = shape[2];
  const std::vector<double> flat = tf.f64(prefix + "_samples");
  const std::vector<std::uint8_t> labels = tf.u8(prefix + "_labels");
  require_file(labels.size() == n, "dataset: " + prefix + " label count mismatch");
  TokenBatch batch;
  for (std::size_t i = 0; i < n; ++i) {
    Matrix m(d, tokens);
    for (std::size_t k = 0; k < d * tokens; ++k) m.storage()[k] = flat[i * d * tokens + k];
    batch.samples.push_back(std::move(m));
    batch.labels.push_back(labels[i]);
  }
  return batch;
}

}  // namespace

void save_dataset(const std::string& stem, const Dataset& ds) {
  TensorWriter writer;
  pack_split(writer, "train", ds.train);
  pack_split(writer, "test", ds.test);
  writer.write(stem, "crate-dataset", ds.info);
}

Dataset load_dataset(const std::string& stem) {
  TensorFile tf = TensorFile::load(stem);
  require_file(tf.container() == "crate-dataset",
          "dataset: " + stem + " is a '" + tf.container() + "' container");
  Dataset ds;
  ds.train = unpack_split(tf, "train");
  ds.test = unpack_split(tf, "test");
  ds.info = tf.meta();
  return ds;
}

namespace {

std::uint32_t read_u32_be(std::istream& in, const std::string& path) {
  std::uint8_t b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in.good()) throw std::runtime_error("idx: truncated header in " + path);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

void write_u32_be(std::ostream& out, std::uint32_t v) {
  std::uint8_t b[4] = {std::uint8_t(v >> 24), std::uint8_t(v >> 16), std::uint8_t(v >> 8),
                       std::uint8_t(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

IdxImages load_idx_images(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw std::runtime_error("idx: cannot open " + path);
  const std::uint32_t magic = read_u32_be(in, path);
  if (magic != 0x00000803u)
    throw std::runtime_error("idx: bad image magic in " + path + " (got " +
                             std::to_string(magic) + ", want 2051)");
  IdxImages img;
  img.count = read_u32_be(in, path);
  img.rows = read_u32_be(in, path);
  img.cols = read_u32_be(in, path);
  img.pixels.resize(img.count * img.rows * img.cols);
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
    throw std::runtime_error("idx: truncated image payload in " + path);
  return img;
}

std::vector<std::uint8_t> load_idx_labels(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw std::runtime_error("idx: cannot open " + path);
  const std::uint32_t magic = read_u32_be(in, path);
  if (magic != 0x00000801u)
    throw std::runtime_error("idx: bad label magic in " + path + " (got " +
                             std::to_string(magic) + ", want 2049)");
  const std::uint32_t count = read_u32_be(in, path);
  std::vector<std::uint8_t> labels(count);
  in.read(reinterpret_cast<char*>(labels.data()),
          static_cast<std::streamsize>(labels.size()));
  if (in.gcount() != static_cast<std::streamsize>(labels.size()))
    throw std::runtime_error("idx: truncated label payload in " + path);
  return labels;
}

void write_idx_images(const std::string& path, const IdxImages& images) {
  require(images.pixels.size() == images.count * images.rows * images.cols,
          "idx: pixel buffer does not match declared dimensions");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "idx: cannot open " + path + " for writing");
  write_u32_be(out, 0x00000803u);
  write_u32_be(out, static_cast<std::uint32_t>(images.count));
  write_u32_be(out, static_cast<std::uint32_t>(images.rows));
  write_u32_be(out, static_cast<std::uint32_t>(images.cols));
  out.write(reinterpret_cast<const char*>(images.pixels.data()),
            static_cast<std::streamsize>(images.pixels.size()));
  require(out.good(), "idx: short write to " + path);
}

void write_idx_labels(const std::string& path, const std::vector<std::uint8_t>& labels) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "idx: cannot open " + path + " for writing");
  write_u32_be(out, 0x00000801u);
  write_u32_be(out, static_cast<std::uint32_t>(labels.size()));
  out.write(reinterpret_cast<const char*>(labels.data()),
            static_cast<std::streamsize>(labels.size()));
  require(out.good(), "idx: short write to " + path);
}

void PatchSpec::validate() const {
  require(image_h >= 1 && image_w >= 1 && channels >= 1 && patch_h >= 1 && patch_w >= 1,
          "patch spec: dimensions must be positive");
  require(image_h % patch_h == 0 && image_w % patch_w == 0,
          "patch spec: patch dimensions must divide image dimensions");
}

Matrix patchify(const std::vector<std::uint8_t>& image, const PatchSpec& spec) {
  spec.validate();
  require(image.size() == spec.image_h * spec.image_w * spec.channels,
          "patchify: image has " + std::to_string(image.size()) + " bytes, spec needs " +
              std::to_string(spec.image_h * spec.image_w * spec.channels));
  const std::size_t grid_w = spec.image_w / spec.patch_w;
  Matrix tokens(spec.patch_dim(), spec.num_patches());
  for (std::size_t pr = 0; pr < spec.image_h / spec.patch_h; ++pr) {
    for (std::size_t pc = 0; pc < grid_w; ++pc) {
      const std::size_t col = pr * grid_w + pc;
      std::size_t row = 0;
      for (std::size_t i = 0; i < spec.patch_h; ++i) {
        for (std::size_t j = 0; j < spec.patch_w; ++j) {
          for (std::size_t c = 0; c < spec.channels; ++c) {
            const std::size_t y = pr * spec.patch_h + i, x = pc * spec.patch_w + j;
            tokens(row++, col) =
                static_cast<double>(image[(y * spec.image_w + x) * spec.channels + c]) /
                255.0;
          }
        }
      }
    }
  }
  return tokens;
}

std::vector<std::uint8_t> unpatchify(const Matrix& tokens, const PatchSpec& spec) {
  spec.validate();
  require(tokens.rows() == spec.patch_dim() && tokens.cols() == spec.num_patches(),
          "unpatchify: token matrix is " + shape_str(tokens));
  std::vector<std::uint8_t> image(spec.image_h * spec.image_w * spec.channels);
  const std::size_t grid_w = spec.image_w / spec.patch_w;
  for (std::size_t col = 0; col < tokens.cols(); ++col) {
    const std::size_t pr = col / grid_w, pc = col % grid_w;
    std::size_t row = 0;
    for (std::size_t i = 0; i < spec.patch_h; ++i) {
      for (std::size_t j = 0; j < spec.patch_w; ++j) {
        for (std::size_t c = 0; c < spec.channels; ++c) {
          const std::size_t y = pr * spec.patch_h + i, x = pc * spec.patch_w + j;
          double v = tokens(row++, col) * 255.0;
          v = v < 0.0 ? 0.0 : (v > 255.0 ? 255.0 : v);
          image[(y * spec.image_w + x) * spec.channels + c] =
              static_cast<std::uint8_t>(std::lround(v));
        }
      }
    }
  }
  return image;
}

TokenBatch idx_to_batch(const IdxImages& images, const std::vector<std::uint8_t>& labels,
                        const PatchSpec& spec) {
  if (images.count != labels.size())
    throw std::runtime_error("idx: image/label count mismatch (" +
                             std::to_string(images.count) + " images, " +
                             std::to_string(labels.size()) + " labels)");
  require(spec.channels == 1, "idx_to_batch: IDX images are single-channel");
  require(spec.image_h == images.rows && spec.image_w == images.cols,
          "idx_to_batch: patch spec does not match image dimensions");
  TokenBatch batch;
  const std::size_t stride = images.rows * images.cols;
  for (std::size_t i = 0; i < images.count; ++i) {
    std::vector<std::uint8_t> one(images.pixels.begin() + i * stride,
                                  images.pixels.begin() + (i + 1) * stride);
    batch.samples.push_back(patchify(one, spec));
    batch.labels.push_back(labels[i]);
  }
  return batch;
}

}  // namespace crate
