#pragma once

// Binary model format (all integers and floats little-endian):
//
//   offset  size  field
//   0       8     magic "VRECMLP\0"
//   8       4     format_version (u32, currently 1)
//   12      4     input_dim (u32)
//   16      4     layer_count (u32)
//   then per layer:
//           4     in_dim (u32)
//           4     out_dim (u32)
//           1     activation tag (u8: 0 identity, 1 relu)
//           8*out*in   weights, row-major (f64)
//           8*out      bias (f64)

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "vrec/nnet.hpp"

namespace vrec {

inline constexpr std::uint32_t kModelFormatVersion = 1;
inline constexpr std::array<char, 8> kModelMagic{'V', 'R', 'E', 'C', 'M', 'L', 'P', '\0'};

namespace detail {

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  os.write(bytes.data(), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  std::array<char, sizeof(T)> bytes;
  if (!is.read(bytes.data(), sizeof(T))) throw IoError("model stream truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

}  // namespace detail

inline void write_model(std::ostream& os, const MlpModel& model) {
  os.write(kModelMagic.data(), kModelMagic.size());
  detail::write_le<std::uint32_t>(os, kModelFormatVersion);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(model.input_dim()));
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(model.layers().size()));
  for (const auto& l : model.layers()) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(l.in_dim()));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(l.out_dim()));
    detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(l.activation));
    for (double w : l.weight.data) detail::write_le<double>(os, w);
    for (double b : l.bias) detail::write_le<double>(os, b);
  }
  if (!os) throw IoError("failed writing model stream");
}

[[nodiscard]] inline MlpModel read_model(std::istream& is) {
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kModelMagic) throw IoError("not a model file (bad magic)");
  const auto version = detail::read_le<std::uint32_t>(is);
  if (version != kModelFormatVersion) throw IoError("unsupported model format version " + std::to_string(version));
  const auto input_dim = detail::read_le<std::uint32_t>(is);
  const auto n_layers = detail::read_le<std::uint32_t>(is);
  if (n_layers == 0 || n_layers > 1024) throw IoError("implausible layer count");
  std::vector<DenseLayer> layers;
  for (std::uint32_t k = 0; k < n_layers; ++k) {
    const auto in = detail::read_le<std::uint32_t>(is);
    const auto out = detail::read_le<std::uint32_t>(is);
    const auto tag = detail::read_le<std::uint8_t>(is);
    if (tag > 1) throw IoError("unknown activation tag " + std::to_string(tag));
    if (static_cast<std::uint64_t>(in) * out > (1ULL << 28)) throw IoError("implausible layer size");
    DenseLayer l{Matrix(out, in), Vector(out), static_cast<Activation>(tag)};
    for (double& w : l.weight.data) w = detail::read_le<double>(is);
    for (double& b : l.bias) b = detail::read_le<double>(is);
    layers.push_back(std::move(l));
  }
  MlpModel model(std::move(layers));
  if (model.input_dim() != input_dim) throw IoError("header input_dim disagrees with first layer");
  return model;
}

[[nodiscard]] inline std::string model_bytes(const MlpModel& model) {
  std::ostringstream os(std::ios::binary);
  write_model(os, model);
  return os.str();
}

inline void save_model(const std::filesystem::path& path, const MlpModel& model) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_model(os, model);
}

[[nodiscard]] inline MlpModel load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_model(is);
}

}  // namespace vrec
