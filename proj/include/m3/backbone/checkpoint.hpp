#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "m3/backbone/backbone.hpp"
#include "m3/numcore/optim.hpp"

// Checkpoint container, version 1. All integers little-endian.
//
//   offset  field
//   0       magic "M3CKPT\0\0"                      8 bytes
//   8       format version                          u32
//   12      metadata length N                       u32
//   16      metadata, UTF-8 JSON                    N bytes
//   ...     tensor count                            u32
//   per tensor:
//           name length, name bytes                 u32 + bytes
//           rank, extents                           u32 + rank * u64
//           values, row-major                       numel * f32
//   end     CRC-32 (zlib polynomial) of all
//           preceding bytes                         u32
namespace m3::backbone {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct CheckpointTensor {
  std::string name;
  numcore::Shape shape;
  std::vector<Real> values;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<CheckpointTensor> tensors;

  void add(std::string name, const numcore::Shape& shape, std::span<const Real> values);
  const CheckpointTensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  // Stores every parameter under "<prefix><param name>".
  void add_module(const std::string& prefix, const std::vector<NamedParam>& params);
  // Restores values into existing parameters; shapes must match exactly.
  void load_module(const std::string& prefix, const std::vector<NamedParam>& params) const;

  void add_optimizer(const std::string& prefix, const numcore::Adam& opt);
  void load_optimizer(const std::string& prefix, numcore::Adam& opt) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

}  // namespace m3::backbone
