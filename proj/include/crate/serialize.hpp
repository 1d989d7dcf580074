#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "crate/layers.hpp"
#include "crate/optim.hpp"

namespace crate {

using json = nlohmann::ordered_json;

// One container format for checkpoints and datasets: <stem>.json holds a
// manifest (tensor name, dtype, shape, byte offset) plus free-form meta;
// <stem>.bin is the packed blob. f64 payloads are little-endian 64-bit floats
// in manifest order, u8 payloads raw bytes. Round-trips are bit-exact.
class TensorWriter {
 public:
  void add_f64(const std::string& name, const Matrix& m);
  void add_f64(const std::string& name, std::vector<std::size_t> shape,
               const std::vector<double>& data);
  void add_u8(const std::string& name, std::vector<std::size_t> shape,
              const std::vector<std::uint8_t>& data);
  // Writes <stem>.json and <stem>.bin. container tags the file kind.
  void write(const std::string& stem, const std::string& container, const json& meta) const;

 private:
  struct Entry {
    std::string name, dtype;
    std::vector<std::size_t> shape;
    std::vector<std::uint8_t> bytes;
  };
  std::vector<Entry> entries_;
};

class TensorFile {
 public:
  static TensorFile load(const std::string& stem);

  bool has(const std::string& name) const;
  std::vector<std::string> names() const;
  std::vector<std::size_t> shape(const std::string& name) const;
  // Requires a 2-d f64 tensor.
  Matrix matrix(const std::string& name) const;
  std::vector<double> f64(const std::string& name) const;
  std::vector<std::uint8_t> u8(const std::string& name) const;
  const std::string& container() const { return container_; }
  const json& meta() const { return meta_; }

 private:
  struct Entry {
    std::string dtype;
    std::vector<std::size_t> shape;
    std::vector<std::uint8_t> bytes;
  };
  const Entry& at(const std::string& name) const;
  std::string container_;
  json meta_;
  std::vector<std::pair<std::string, Entry>> entries_;
};

// Model checkpoints: every parameter tensor under its traversal name, plus
// enough meta (arch, rate, layer options) to rebuild the model standalone.
struct Checkpoint {
  CrateParams params;
  CrateArch arch;
  RateConfig rate;
  LayerOptions options;
  json meta;
};
void save_checkpoint(const std::string& stem, const CrateParams& params,
                     const CrateArch& arch, const RateConfig& rate,
                     const LayerOptions& options, const json& extra_meta = {});
Checkpoint load_checkpoint(const std::string& stem);

// Enum names used in configs and checkpoint meta.
std::string to_string(LayerVariant v);
std::string to_string(AttentionMode m);
std::string to_string(OptKind k);
std::string to_string(LrSchedule s);
LayerVariant variant_from_string(const std::string& s);
AttentionMode attention_from_string(const std::string& s);
OptKind optimizer_from_string(const std::string& s);
LrSchedule schedule_from_string(const std::string& s);

// Deterministic float text: shortest round-trippable decimal (printf %.17g
// with trailing-zero trimming is not stable across libcs; this is).
std::string format_double(double v);

void write_csv(const std::string& path, const std::string& header,
               const std::vector<std::vector<std::string>>& rows);
void write_matrix_csv(const std::string& path, const Matrix& m);
void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace crate
