#include "sdet/serialize.hpp"

#include <openssl/evp.h>

#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace sdet::io {

namespace {

constexpr size_t kMaxRank = 8;
constexpr size_t kMaxElems = size_t(1) << 31;  // corrupt-header guard

void put_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), std::streamsize(n));
  if (!os) fail("io", "write failed");
}

void get_bytes(std::istream& is, void* p, size_t n) {
  is.read(static_cast<char*>(p), std::streamsize(n));
  if (size_t(is.gcount()) != n) fail("format", "truncated record");
}

void put_u32(std::ostream& os, uint32_t v) {
  uint8_t b[4] = {uint8_t(v), uint8_t(v >> 8), uint8_t(v >> 16), uint8_t(v >> 24)};
  put_bytes(os, b, 4);
}

uint32_t get_u32(std::istream& is) {
  uint8_t b[4];
  get_bytes(is, b, 4);
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

void put_f32(std::ostream& os, float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(os, u);
}

float get_f32(std::istream& is) {
  uint32_t u = get_u32(is);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

void expect_magic(std::istream& is, const char* magic, const char* what) {
  char b[4];
  get_bytes(is, b, 4);
  if (std::memcmp(b, magic, 4) != 0)
    fail("format", std::string("bad magic, expected ") + magic, what);
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail("io", "cannot open for writing", path);
  return os;
}

std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("io", "cannot open for reading", path);
  return is;
}

void put_string(std::ostream& os, const std::string& s) {
  if (s.size() > std::numeric_limits<uint32_t>::max()) fail("format", "string too long");
  put_u32(os, uint32_t(s.size()));
  put_bytes(os, s.data(), s.size());
}

std::string get_string(std::istream& is, size_t max_len) {
  uint32_t n = get_u32(is);
  if (n > max_len) fail("format", "string length out of range");
  std::string s(n, '\0');
  if (n) get_bytes(is, s.data(), n);
  return s;
}

}  // namespace

void write_tensor_record(std::ostream& os, const Tensor& t) {
  put_bytes(os, "KDT1", 4);
  put_u32(os, uint32_t(t.rank()));
  for (size_t i = 0; i < t.rank(); ++i) put_u32(os, uint32_t(t.dim(i)));
  for (size_t i = 0; i < t.numel(); ++i) put_f32(os, float(t.data()[i]));
}

Tensor read_tensor_record(std::istream& is) {
  expect_magic(is, "KDT1", "tensor record");
  uint32_t rank = get_u32(is);
  if (rank == 0 || rank > kMaxRank) fail("format", "tensor rank out of range");
  Shape shape(rank);
  size_t n = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    shape[i] = get_u32(is);
    if (shape[i] == 0 || n > kMaxElems / std::max<size_t>(shape[i], 1))
      fail("format", "tensor extents out of range");
    n *= shape[i];
  }
  std::vector<double> data(n);
  for (size_t i = 0; i < n; ++i) data[i] = double(get_f32(is));
  return Tensor::from_data(std::move(shape), std::move(data));
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  auto os = open_out(path);
  put_bytes(os, "KDC1", 4);
  put_u32(os, kCheckpointVersion);
  put_string(os, ck.manifest.dump());
  put_u32(os, uint32_t(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    put_string(os, name);
    write_tensor_record(os, t);
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  auto is = open_in(path);
  expect_magic(is, "KDC1", path.c_str());
  uint32_t version = get_u32(is);
  if (version != kCheckpointVersion) fail("format", "unsupported checkpoint version", path);
  Checkpoint ck;
  std::string manifest = get_string(is, size_t(1) << 24);
  ck.manifest = nlohmann::json::parse(manifest, nullptr, false);
  if (ck.manifest.is_discarded()) fail("format", "checkpoint manifest is not valid JSON", path);
  uint32_t count = get_u32(is);
  ck.tensors.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = get_string(is, 4096);
    ck.tensors.emplace_back(std::move(name), read_tensor_record(is));
  }
  return ck;
}

SpecHash sha256(const std::string& data) {
  SpecHash h{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), h.data(), &len, EVP_sha256(), nullptr) != 1 ||
      len != h.size())
    fail("io", "sha256 failed");
  return h;
}

std::string hex(const SpecHash& h) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  s.reserve(64);
  for (uint8_t b : h) {
    s.push_back(digits[b >> 4]);
    s.push_back(digits[b & 0xf]);
  }
  return s;
}

void write_logit_file(const std::string& path, const SpecHash& spec_hash,
                      const LogitRecord& rec) {
  if (rec.maps.size() != 9) fail("bad_argument", "logit record needs 9 maps");
  auto os = open_out(path);
  put_bytes(os, "KDL1", 4);
  put_u32(os, kLogitVersion);
  put_bytes(os, spec_hash.data(), spec_hash.size());
  put_string(os, rec.image_id);
  for (const Tensor& t : rec.maps) write_tensor_record(os, t);
}

LogitRecord read_logit_file(const std::string& path, const SpecHash* expect_hash) {
  auto is = open_in(path);
  expect_magic(is, "KDL1", path.c_str());
  uint32_t version = get_u32(is);
  if (version != kLogitVersion) fail("format", "unsupported logit file version", path);
  SpecHash h{};
  get_bytes(is, h.data(), h.size());
  if (expect_hash && h != *expect_hash)
    fail("spec_hash_mismatch",
         "logit file was produced by a different teacher spec", path);
  LogitRecord rec;
  rec.image_id = get_string(is, 4096);
  rec.maps.reserve(9);
  for (int i = 0; i < 9; ++i) rec.maps.push_back(read_tensor_record(is));
  return rec;
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
  auto os = open_out(path);
  std::string text = j.dump(2);
  text.push_back('\n');
  put_bytes(os, text.data(), text.size());
}

nlohmann::json read_json_file(const std::string& path) {
  auto j = nlohmann::json::parse(read_text_file(path), nullptr, false);
  if (j.is_discarded()) fail("format", "invalid JSON", path);
  return j;
}

void write_text_file(const std::string& path, const std::string& text) {
  auto os = open_out(path);
  put_bytes(os, text.data(), text.size());
}

std::string read_text_file(const std::string& path) {
  auto is = open_in(path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace sdet::io
