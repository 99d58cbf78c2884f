#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "bevfuse/diffcore/parameters.hpp"

namespace bevfuse::diff {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Little-endian scalar IO shared by the checkpoint and scene formats.
namespace le {

template <typename T>
void put(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(buf, buf + sizeof(T));
  }
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  unsigned char buf[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) {
    throw FormatError("unexpected end of stream");
  }
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(buf, buf + sizeof(T));
  }
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, std::size_t max_len = 1u << 20) {
  const auto n = get<std::uint32_t>(is);
  if (n > max_len) throw FormatError("string length out of range");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw FormatError("unexpected end of stream");
  return s;
}

}  // namespace le

enum class DType : std::uint8_t { kF64 = 0, kF32 = 1, kU8 = 2 };

inline const char* dtype_name(DType t) {
  switch (t) {
    case DType::kF64: return "f64";
    case DType::kF32: return "f32";
    case DType::kU8: return "u8";
  }
  return "?";
}

/// One checkpoint record. Numeric payloads are widened to double in memory;
/// u8 records carry opaque bytes (e.g. the embedded run configuration).
struct CheckpointEntry {
  std::string name;
  DType dtype = DType::kF64;
  Shape shape;
  std::vector<double> values;
  std::string bytes;
};

inline constexpr char kCheckpointMagic[4] = {'B', 'F', 'K', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout: magic "BFK1", u32 version, u32 entry count, then the manifest
// (per entry: name, u8 dtype, u32 rank, u64 dims), then every entry's raw
// little-endian payload in manifest order.
inline void write_checkpoint(std::ostream& os, const std::vector<CheckpointEntry>& entries) {
  os.write(kCheckpointMagic, 4);
  le::put<std::uint32_t>(os, kCheckpointVersion);
  le::put<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    le::put_string(os, e.name);
    le::put<std::uint8_t>(os, static_cast<std::uint8_t>(e.dtype));
    le::put<std::uint32_t>(os, static_cast<std::uint32_t>(e.shape.size()));
    for (std::size_t d : e.shape) le::put<std::uint64_t>(os, d);
  }
  for (const auto& e : entries) {
    const std::size_t n = shape_numel(e.shape);
    switch (e.dtype) {
      case DType::kF64:
        for (std::size_t i = 0; i < n; ++i) le::put<double>(os, e.values.at(i));
        break;
      case DType::kF32:
        for (std::size_t i = 0; i < n; ++i) le::put<float>(os, static_cast<float>(e.values.at(i)));
        break;
      case DType::kU8:
        if (e.bytes.size() != n) throw FormatError("u8 entry size mismatch: " + e.name);
        os.write(e.bytes.data(), static_cast<std::streamsize>(n));
        break;
    }
  }
  if (!os) throw FormatError("checkpoint write failed");
}

inline std::vector<CheckpointEntry> read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw FormatError("not a BFK1 checkpoint");
  }
  const auto version = le::get<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = le::get<std::uint32_t>(is);
  std::vector<CheckpointEntry> entries(count);
  for (auto& e : entries) {
    e.name = le::get_string(is, 4096);
    const auto dt = le::get<std::uint8_t>(is);
    if (dt > 2) throw FormatError("unknown dtype in entry '" + e.name + "'");
    e.dtype = static_cast<DType>(dt);
    const auto rank = le::get<std::uint32_t>(is);
    if (rank > 8) throw FormatError("rank out of range in entry '" + e.name + "'");
    e.shape.resize(rank);
    for (auto& d : e.shape) d = static_cast<std::size_t>(le::get<std::uint64_t>(is));
  }
  for (auto& e : entries) {
    const std::size_t n = shape_numel(e.shape);
    if (n > (std::size_t{1} << 32)) throw FormatError("entry too large: " + e.name);
    switch (e.dtype) {
      case DType::kF64:
        e.values.resize(n);
        for (auto& v : e.values) v = le::get<double>(is);
        break;
      case DType::kF32:
        e.values.resize(n);
        for (auto& v : e.values) v = static_cast<double>(le::get<float>(is));
        break;
      case DType::kU8:
        e.bytes.resize(n);
        if (n && !is.read(e.bytes.data(), static_cast<std::streamsize>(n))) {
          throw FormatError("unexpected end of stream");
        }
        break;
    }
  }
  return entries;
}

/// Parameters (f64) plus optional opaque attachments.
inline void save_checkpoint(const std::string& path, const ParameterStore& params,
                            const std::map<std::string, std::string>& attachments = {}) {
  std::vector<CheckpointEntry> entries;
  for (const auto& [name, t] : params) {
    entries.push_back({name, DType::kF64, t.shape(), t.storage(), {}});
  }
  for (const auto& [name, bytes] : attachments) {
    entries.push_back({name, DType::kU8, Shape{bytes.size()}, {}, bytes});
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  write_checkpoint(os, entries);
}

struct LoadedCheckpoint {
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> attachments;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  LoadedCheckpoint out;
  for (auto& e : read_checkpoint(is)) {
    if (e.dtype == DType::kU8) {
      out.attachments.emplace(e.name, std::move(e.bytes));
    } else {
      out.tensors.emplace(e.name, Tensor(e.shape, std::move(e.values)));
    }
  }
  return out;
}

/// Copies every registered parameter from the checkpoint; all must be present
/// with matching shapes.
inline void restore_parameters(ParameterStore& params, const LoadedCheckpoint& ckpt) {
  for (auto& [name, t] : params) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) {
      throw FormatError("checkpoint lacks parameter '" + name + "'");
    }
    if (it->second.shape() != t.shape()) {
      throw FormatError("checkpoint parameter '" + name + "' has shape " +
                        shape_str(it->second.shape()) + ", model expects " +
                        shape_str(t.shape()));
    }
    t = it->second;
  }
}

}  // namespace bevfuse::diff
