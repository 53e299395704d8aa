#pragma once

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "iff/detector.hpp"

namespace iff {

struct TrainingMeta {
  std::uint64_t seed = 0;
  std::uint32_t epochs = 0;
  double final_loss = 0.0;
  bool operator==(const TrainingMeta&) const = default;
};

struct Checkpoint {
  DetectorModel model;
  TrainingMeta meta;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::array<char, 8> kCheckpointMagic = {'I', 'F', 'F', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void put_le(std::ostream& os, T v) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) os.put(char((std::make_unsigned_t<T>(v) >> (8 * i)) & 0xff));
}

inline void put_f64(std::ostream& os, double v) { put_le(os, std::bit_cast<std::uint64_t>(v)); }

inline void put_str(std::ostream& os, const std::string& s) {
  put_le(os, std::uint32_t(s.size()));
  os.write(s.data(), std::streamsize(s.size()));
}

template <typename T>
T get_le(std::istream& is) {
  unsigned char b[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(T))) throw CheckpointError("checkpoint: truncated file");
  std::make_unsigned_t<T> v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= std::make_unsigned_t<T>(b[i]) << (8 * i);
  return T(v);
}

inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_le<std::uint64_t>(is)); }

inline std::string get_str(std::istream& is, std::size_t limit = 1 << 16) {
  const auto n = get_le<std::uint32_t>(is);
  if (n > limit) throw CheckpointError("checkpoint: string length " + std::to_string(n) + " out of range");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw CheckpointError("checkpoint: truncated file");
  return s;
}

}  // namespace detail

/// Layout (all integers little-endian):
///   magic[8] version:u32
///   iterations:u32 slope:f64 pad:u8 enforce_contraction:u8 feedback_kernel:u32
///   seed:u64 epochs:u32 final_loss:f64
///   count:u32, then per tensor: name (u32 length + bytes), rank:u32, extents:u64 x rank, f64 x volume
inline void save_checkpoint(std::ostream& os, const Checkpoint& ck) {
  using namespace detail;
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  put_le(os, kCheckpointVersion);
  const IffConfig& c = ck.model.config;
  put_le(os, c.iterations);
  put_f64(os, c.slope);
  put_le(os, std::uint8_t(c.pad == PaddingMode::Circular));
  put_le(os, std::uint8_t(c.enforce_contraction));
  put_le(os, c.feedback_kernel);
  put_le(os, ck.meta.seed);
  put_le(os, ck.meta.epochs);
  put_f64(os, ck.meta.final_loss);
  put_le(os, std::uint32_t(ck.model.params.size()));
  for (const auto& [name, t] : ck.model.params.entries()) {
    put_str(os, name);
    put_le(os, std::uint32_t(t.rank()));
    for (auto d : t.shape()) put_le(os, std::uint64_t(d));
    for (double v : t.data()) put_f64(os, v);
  }
  if (!os) throw CheckpointError("checkpoint: write failed");
}

inline Checkpoint load_checkpoint(std::istream& is) {
  using namespace detail;
  std::array<char, 8> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kCheckpointMagic)
    throw CheckpointError("checkpoint: bad magic bytes");
  const auto version = get_le<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint: version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  IffConfig c;
  c.iterations = get_le<std::uint32_t>(is);
  c.slope = get_f64(is);
  c.pad = get_le<std::uint8_t>(is) ? PaddingMode::Circular : PaddingMode::Zero;
  c.enforce_contraction = get_le<std::uint8_t>(is) != 0;
  c.feedback_kernel = get_le<std::uint32_t>(is);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint: bad config: ") + e.what());
  }
  Checkpoint ck;
  ck.meta.seed = get_le<std::uint64_t>(is);
  ck.meta.epochs = get_le<std::uint32_t>(is);
  ck.meta.final_loss = get_f64(is);

  try {
    ck.model = DetectorModel::zeros(c);
  } catch (const std::logic_error& e) {
    throw CheckpointError(std::string("checkpoint: bad config: ") + e.what());
  }
  const auto count = get_le<std::uint32_t>(is);
  if (count != ck.model.params.size())
    throw CheckpointError("checkpoint: expected " + std::to_string(ck.model.params.size()) + " tensors, found " +
                          std::to_string(count));
  std::vector<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = get_str(is);
    if (!ck.model.params.contains(name)) throw CheckpointError("checkpoint: unknown tensor '" + name + "'");
    if (std::find(seen.begin(), seen.end(), name) != seen.end())
      throw CheckpointError("checkpoint: tensor '" + name + "' appears twice");
    seen.push_back(name);
    const auto rank = get_le<std::uint32_t>(is);
    if (rank < 1 || rank > 4) throw CheckpointError("checkpoint: tensor '" + name + "' has rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = std::size_t(get_le<std::uint64_t>(is));
    if (shape != ck.model.params.get(name).shape())
      throw CheckpointError("checkpoint: tensor '" + name + "' has shape " + shape_str(shape) + ", expected " +
                            shape_str(ck.model.params.get(name).shape()));
    std::vector<double> data(shape_volume(shape));
    for (double& v : data) v = get_f64(is);
    ck.model.params.set(name, Tensor(shape, std::move(data)));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw CheckpointError("checkpoint: trailing bytes");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("checkpoint: cannot open '" + path + "' for writing");
  save_checkpoint(os, ck);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("checkpoint: cannot open '" + path + "'");
  return load_checkpoint(is);
}

}  // namespace iff
