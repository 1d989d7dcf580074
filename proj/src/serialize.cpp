#include "crate/serialize.hpp"

#include <charconv>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace crate {

namespace {

std::size_t shape_count(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t s : shape) n *= s;
  return n;
}

// File-level problems (missing, truncated, wrong kind) are environmental, not
// caller misuse, so they surface as runtime_error rather than invalid_argument.
void require_file(bool cond, const std::string& message) {
  if (!cond) throw std::runtime_error(message);
}

void append_f64_le(std::vector<std::uint8_t>& buf, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

double read_f64_le(const std::uint8_t* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

}  // namespace

void TensorWriter::add_f64(const std::string& name, const Matrix& m) {
  std::vector<double> data(m.storage().begin(), m.storage().end());
  add_f64(name, {m.rows(), m.cols()}, data);
}

void TensorWriter::add_f64(const std::string& name, std::vector<std::size_t> shape,
                           const std::vector<double>& data) {
  require(shape_count(shape) == data.size(),
          "tensor writer: shape does not match data size for " + name);
  Entry e;
  e.name = name;
  e.dtype = "f64";
  e.shape = std::move(shape);
  e.bytes.reserve(data.size() * 8);
  for (double v : data) append_f64_le(e.bytes, v);
  entries_.push_back(std::move(e));
}

void TensorWriter::add_u8(const std::string& name, std::vector<std::size_t> shape,
                          const std::vector<std::uint8_t>& data) {
  require(shape_count(shape) == data.size(),
          "tensor writer: shape does not match data size for " + name);
  Entry e;
  e.name = name;
  e.dtype = "u8";
  e.shape = std::move(shape);
  e.bytes = data;
  entries_.push_back(std::move(e));
}

void TensorWriter::write(const std::string& stem, const std::string& container,
                         const json& meta) const {
  json manifest;
  manifest["container"] = container;
  manifest["version"] = 1;
  json tensors = json::array();
  std::size_t offset = 0;
  std::vector<std::uint8_t> blob;
  for (const Entry& e : entries_) {
    json t;
    t["name"] = e.name;
    t["dtype"] = e.dtype;
    t["shape"] = e.shape;
    t["offset"] = offset;
    t["bytes"] = e.bytes.size();
    tensors.push_back(std::move(t));
    blob.insert(blob.end(), e.bytes.begin(), e.bytes.end());
    offset += e.bytes.size();
  }
  manifest["tensors"] = std::move(tensors);
  manifest["meta"] = meta.is_null() ? json::object() : meta;
  write_text_file(stem + ".json", manifest.dump(2) + "\n");
  std::ofstream bin(stem + ".bin", std::ios::binary | std::ios::trunc);
  require_file(bin.good(), "tensor writer: cannot open " + stem + ".bin for writing");
  bin.write(reinterpret_cast<const char*>(blob.data()),
            static_cast<std::streamsize>(blob.size()));
  require_file(bin.good(), "tensor writer: short write to " + stem + ".bin");
}

TensorFile TensorFile::load(const std::string& stem) {
  json manifest;
  try {
    manifest = json::parse(read_text_file(stem + ".json"));
  } catch (const json::exception& e) {
    throw std::runtime_error("tensor file: bad manifest " + stem + ".json: " + e.what());
  }
  std::ifstream bin(stem + ".bin", std::ios::binary);
  require_file(bin.good(), "tensor file: cannot open " + stem + ".bin");
  std::vector<std::uint8_t> blob((std::istreambuf_iterator<char>(bin)),
                                 std::istreambuf_iterator<char>());

  TensorFile tf;
  require_file(manifest.contains("container") && manifest.contains("tensors"),
          "tensor file: manifest missing container/tensors in " + stem + ".json");
  tf.container_ = manifest["container"].get<std::string>();
  tf.meta_ = manifest.value("meta", json::object());
  for (const json& t : manifest["tensors"]) {
    Entry e;
    e.dtype = t.at("dtype").get<std::string>();
    e.shape = t.at("shape").get<std::vector<std::size_t>>();
    const std::size_t offset = t.at("offset").get<std::size_t>();
    const std::size_t bytes = t.at("bytes").get<std::size_t>();
    require_file(offset + bytes <= blob.size(),
            "tensor file: " + stem + ".bin truncated (tensor " +
                t.at("name").get<std::string>() + " ends past end of blob)");
    const std::size_t unit = e.dtype == "f64" ? 8 : 1;
    require_file(e.dtype == "f64" || e.dtype == "u8",
            "tensor file: unknown dtype " + e.dtype);
    require_file(bytes == shape_count(e.shape) * unit,
            "tensor file: byte count does not match shape for " +
                t.at("name").get<std::string>());
    e.bytes.assign(blob.begin() + static_cast<std::ptrdiff_t>(offset),
                   blob.begin() + static_cast<std::ptrdiff_t>(offset + bytes));
    tf.entries_.emplace_back(t.at("name").get<std::string>(), std::move(e));
  }
  return tf;
}

const TensorFile::Entry& TensorFile::at(const std::string& name) const {
  for (const auto& [n, e] : entries_)
    if (n == name) return e;
  throw std::runtime_error("tensor file: no tensor named " + name);
}

bool TensorFile::has(const std::string& name) const {
  for (const auto& [n, e] : entries_)
    if (n == name) return true;
  return false;
}

std::vector<std::string> TensorFile::names() const {
  std::vector<std::string> out;
  for (const auto& [n, e] : entries_) out.push_back(n);
  return out;
}

std::vector<std::size_t> TensorFile::shape(const std::string& name) const {
  return at(name).shape;
}

Matrix TensorFile::matrix(const std::string& name) const {
  const Entry& e = at(name);
  require_file(e.dtype == "f64" && e.shape.size() == 2,
          "tensor file: " + name + " is not a 2-d f64 tensor");
  Matrix m(e.shape[0], e.shape[1]);
  for (std::size_t i = 0; i < m.size(); ++i)
    m.storage()[i] = read_f64_le(e.bytes.data() + 8 * i);
  return m;
}

std::vector<double> TensorFile::f64(const std::string& name) const {
  const Entry& e = at(name);
  require_file(e.dtype == "f64", "tensor file: " + name + " is not f64");
  std::vector<double> out(e.bytes.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = read_f64_le(e.bytes.data() + 8 * i);
  return out;
}

std::vector<std::uint8_t> TensorFile::u8(const std::string& name) const {
  const Entry& e = at(name);
  require_file(e.dtype == "u8", "tensor file: " + name + " is not u8");
  return e.bytes;
}

namespace {

CrateParams allocate_params(const CrateArch& arch, bool with_mixer) {
  CrateParams p;
  p.patch_embed = Matrix(arch.d, arch.input_dim);
  p.patch_bias = Matrix(arch.d, 1);
  p.cls_token = Matrix(arch.d, 1);
  p.pos_embed = Matrix(arch.d, arch.tokens + 1);
  for (std::size_t l = 0; l < arch.L; ++l) {
    LayerParams layer;
    for (std::size_t k = 0; k < arch.K; ++k) layer.subspaces.emplace_back(arch.d, arch.p);
    if (with_mixer) layer.head_mixer = Matrix(arch.d, arch.p * arch.K);
    layer.dictionary = Matrix(arch.d, arch.d);
    layer.ln1 = {Matrix(arch.d, 1), Matrix(arch.d, 1)};
    layer.ln2 = {Matrix(arch.d, 1), Matrix(arch.d, 1)};
    p.layers.push_back(std::move(layer));
  }
  p.ln_final = {Matrix(arch.d, 1), Matrix(arch.d, 1)};
  p.head = Matrix(arch.classes, arch.d);
  p.head_bias = Matrix(arch.classes, 1);
  return p;
}

}  // namespace

void save_checkpoint(const std::string& stem, const CrateParams& params,
                     const CrateArch& arch, const RateConfig& rate,
                     const LayerOptions& options, const json& extra_meta) {
  TensorWriter writer;
  // Tied attention never reads the mixer, so persisting it would only leave a
  // tensor the reload skeleton cannot place.
  const bool drop_mixer = options.attention == AttentionMode::kTied;
  for_each_tensor(params, [&](const std::string& name, const Matrix& m) {
    if (drop_mixer && name.find("head_mixer") != std::string::npos) return;
    writer.add_f64(name, m);
  });
  json meta;
  meta["arch"] = {{"input_dim", arch.input_dim}, {"tokens", arch.tokens},
                  {"d", arch.d},                 {"p", arch.p},
                  {"K", arch.K},                 {"L", arch.L},
                  {"classes", arch.classes}};
  meta["rate"] = {{"eps", rate.eps},
                  {"lambda", rate.lambda},
                  {"kappa", rate.kappa},
                  {"eta", rate.eta}};
  meta["options"] = {{"variant", to_string(options.variant)},
                     {"attention", to_string(options.attention)},
                     {"temperature", options.temperature},
                     {"layer_norm", options.layer_norm_enabled}};
  if (!extra_meta.is_null())
    for (const auto& [k, v] : extra_meta.items()) meta[k] = v;
  writer.write(stem, "crate-checkpoint", meta);
}

Checkpoint load_checkpoint(const std::string& stem) {
  TensorFile tf = TensorFile::load(stem);
  require_file(tf.container() == "crate-checkpoint",
          "checkpoint: " + stem + " is a '" + tf.container() + "' container");
  Checkpoint ck;
  ck.meta = tf.meta();
  const json& a = ck.meta.at("arch");
  ck.arch.input_dim = a.at("input_dim").get<std::size_t>();
  ck.arch.tokens = a.at("tokens").get<std::size_t>();
  ck.arch.d = a.at("d").get<std::size_t>();
  ck.arch.p = a.at("p").get<std::size_t>();
  ck.arch.K = a.at("K").get<std::size_t>();
  ck.arch.L = a.at("L").get<std::size_t>();
  ck.arch.classes = a.at("classes").get<std::size_t>();
  const json& r = ck.meta.at("rate");
  ck.rate = ck.arch.rate_config(r.at("eps").get<double>(), r.at("lambda").get<double>(),
                                r.at("kappa").get<double>(), r.at("eta").get<double>());
  const json& o = ck.meta.at("options");
  ck.options.variant = variant_from_string(o.at("variant").get<std::string>());
  ck.options.attention = attention_from_string(o.at("attention").get<std::string>());
  ck.options.temperature = o.at("temperature").get<double>();
  ck.options.layer_norm_enabled = o.at("layer_norm").get<bool>();

  ck.params = allocate_params(ck.arch,
                              ck.options.attention == AttentionMode::kTrainableW);
  std::size_t filled = 0;
  for_each_tensor(ck.params, [&](const std::string& name, Matrix& m) {
    Matrix stored = tf.matrix(name);
    require_file(stored.same_shape(m), "checkpoint: tensor " + name + " has shape " +
                                      shape_str(stored) + ", expected " + shape_str(m));
    m = std::move(stored);
    ++filled;
  });
  require_file(filled == tf.names().size(),
          "checkpoint: " + stem + " holds tensors the model does not expect");
  return ck;
}

std::string to_string(LayerVariant v) {
  switch (v) {
    case LayerVariant::kDefault: return "default";
    case LayerVariant::kExactGrad: return "exact_grad";
    case LayerVariant::kMmProx: return "mm_prox";
  }
  throw std::logic_error("unreachable variant");
}
std::string to_string(AttentionMode m) {
  return m == AttentionMode::kTied ? "tied" : "trainable_w";
}
std::string to_string(OptKind k) { return k == OptKind::kAdamW ? "adamw" : "lion"; }
std::string to_string(LrSchedule s) {
  return s == LrSchedule::kConstant ? "constant" : "cosine";
}

LayerVariant variant_from_string(const std::string& s) {
  if (s == "default") return LayerVariant::kDefault;
  if (s == "exact_grad") return LayerVariant::kExactGrad;
  if (s == "mm_prox") return LayerVariant::kMmProx;
  throw std::invalid_argument("unknown variant '" + s +
                              "' (expected default|exact_grad|mm_prox)");
}
AttentionMode attention_from_string(const std::string& s) {
  if (s == "tied") return AttentionMode::kTied;
  if (s == "trainable_w") return AttentionMode::kTrainableW;
  throw std::invalid_argument("unknown attention mode '" + s +
                              "' (expected tied|trainable_w)");
}
OptKind optimizer_from_string(const std::string& s) {
  if (s == "adamw") return OptKind::kAdamW;
  if (s == "lion") return OptKind::kLion;
  throw std::invalid_argument("unknown optimizer '" + s + "' (expected adamw|lion)");
}
LrSchedule schedule_from_string(const std::string& s) {
  if (s == "constant") return LrSchedule::kConstant;
  if (s == "cosine") return LrSchedule::kCosine;
  throw std::invalid_argument("unknown schedule '" + s + "' (expected constant|cosine)");
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  require(res.ec == std::errc(), "format_double: conversion failed");
  return std::string(buf, res.ptr);
}

void write_csv(const std::string& path, const std::string& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::string out = header + "\n";
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out += ',';
      out += row[i];
    }
    out += '\n';
  }
  write_text_file(path, out);
}

void write_matrix_csv(const std::string& path, const Matrix& m) {
  std::string out;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (j) out += ',';
      out += format_double(m(i, j));
    }
    out += '\n';
  }
  write_text_file(path, out);
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(f.good(), "cannot open " + path + " for writing");
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  require(f.good(), "short write to " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f.good()) throw std::runtime_error("cannot open " + path);
  return std::string((std::istreambuf_iterator<char>(f)),
                     std::istreambuf_iterator<char>());
}

}  // namespace crate
