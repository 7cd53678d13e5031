#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sdet/tensor.hpp"

namespace sdet::io {

// Binary formats. All integers and floats are little-endian.
//
// Tensor record ("KDT1"):
//   magic "KDT1" | u32 rank | u32 extent[rank] | f32 element[n] row-major
//
// Checkpoint ("KDC1"):
//   magic "KDC1" | u32 version | u32 manifest_len | manifest (UTF-8 JSON)
//   | u32 tensor_count | { u32 name_len | name | tensor record } ...
//   The manifest carries the model spec, the init seed and the format version
//   so a checkpoint is self-describing.
//
// Teacher logit file ("KDL1"):
//   magic "KDL1" | u32 version | byte spec_hash[32] | u32 id_len | image id
//   | 9 tensor records, scale-major: (cls, reg, obj) for scales 0, 1, 2.
//   spec_hash is the SHA-256 of the teacher's canonical spec JSON; loaders
//   refuse files whose hash does not match the expected teacher.

inline constexpr uint32_t kCheckpointVersion = 1;
inline constexpr uint32_t kLogitVersion = 1;

void write_tensor_record(std::ostream& os, const Tensor& t);
Tensor read_tensor_record(std::istream& is);

struct Checkpoint {
  nlohmann::json manifest;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

using SpecHash = std::array<uint8_t, 32>;

SpecHash sha256(const std::string& data);
std::string hex(const SpecHash& h);

struct LogitRecord {
  std::string image_id;
  std::vector<Tensor> maps;  // exactly 9: (cls, reg, obj) per scale
};

void write_logit_file(const std::string& path, const SpecHash& spec_hash,
                      const LogitRecord& rec);
// expect_hash == nullptr skips the teacher identity check.
LogitRecord read_logit_file(const std::string& path, const SpecHash* expect_hash);

// Small JSON file helpers used for indexes, manifests and config snapshots.
void write_json_file(const std::string& path, const nlohmann::json& j);
nlohmann::json read_json_file(const std::string& path);

void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

}  // namespace sdet::io
