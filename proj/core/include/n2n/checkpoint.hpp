#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace n2n {

inline constexpr char kCheckpointMagic[8] = {'N', '2', 'N', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<float> data;

  bool operator==(const NamedArray&) const = default;
};

// Binary container for model state. Layout (all little-endian):
//   "N2NCKPT1" u32 version
//   str kind, str config_json, u64 config_hash, u32 epoch, u64 step
//   u32 n_counters { str name, u64 value }
//   u32 n_arrays   { str name, u32 rank, u32 dims[rank], f32 data[prod(dims)] }
// where str = u32 length + bytes.
struct Checkpoint {
  std::string kind;
  std::string config_json;
  std::uint64_t config_hash = 0;
  std::uint32_t epoch = 0;
  std::uint64_t step = 0;
  std::vector<std::pair<std::string, std::uint64_t>> counters;
  std::vector<NamedArray> arrays;

  const NamedArray& array(std::string_view name) const;
  std::uint64_t counter(std::string_view name) const;

  std::string serialize() const;
  static Checkpoint deserialize(std::string_view bytes);
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  bool operator==(const Checkpoint&) const = default;
};

// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace n2n
