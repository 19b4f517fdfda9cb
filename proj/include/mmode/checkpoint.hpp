#pragma once

// MMCK checkpoint container.
//
//   "MMCK"                      4 bytes
//   version                     u32 (currently 1)
//   block count                 u32
//   per block:
//     name length               u32
//     name                      UTF-8 bytes
//     dtype tag                 u8   (0 = f32, 1 = f64, 2 = raw bytes)
//     rank                      u32
//     dims                      rank x u64
//     values                    prod(dims) elements, little-endian
//
// All integers are little-endian. Blocks appear in insertion order, so saving
// the same parameters twice yields identical bytes.

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "mmode/errors.hpp"
#include "mmode/nn.hpp"

namespace mmode::ckpt {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

inline constexpr std::uint32_t kVersion = 1;

enum class DType : std::uint8_t { F32 = 0, F64 = 1, Bytes = 2 };

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::F32: return 4;
    case DType::F64: return 8;
    case DType::Bytes: return 1;
  }
  throw CheckpointError("unknown dtype tag");
}

struct Block {
  std::string name;
  DType dtype = DType::F32;
  std::vector<std::uint64_t> shape;
  std::vector<std::uint8_t> bytes;

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::F32;
  else return DType::F64;
}

template <class T>
Block make_block(const std::string& name, const nn::Shape& shape, std::span<const T> values) {
  Block b;
  b.name = name;
  b.dtype = dtype_of<T>();
  b.shape.assign(shape.begin(), shape.end());
  b.bytes.resize(values.size() * sizeof(T));
  std::memcpy(b.bytes.data(), values.data(), b.bytes.size());
  return b;
}

inline Block text_block(const std::string& name, const std::string& text) {
  Block b;
  b.name = name;
  b.dtype = DType::Bytes;
  b.shape = {text.size()};
  b.bytes.assign(text.begin(), text.end());
  return b;
}

inline std::string block_text(const Block& b) { return std::string(b.bytes.begin(), b.bytes.end()); }

inline std::vector<std::uint8_t> serialize(const std::vector<Block>& blocks) {
  std::vector<std::uint8_t> out;
  auto put = [&out](const void* p, std::size_t n) {
    const auto* c = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), c, c + n);
  };
  auto put_u32 = [&put](std::uint32_t v) { put(&v, 4); };
  put("MMCK", 4);
  put_u32(kVersion);
  put_u32(static_cast<std::uint32_t>(blocks.size()));
  for (const auto& b : blocks) {
    if (b.bytes.size() != b.numel() * dtype_size(b.dtype))
      throw CheckpointError("block '" + b.name + "' payload does not match its shape");
    put_u32(static_cast<std::uint32_t>(b.name.size()));
    put(b.name.data(), b.name.size());
    const auto tag = static_cast<std::uint8_t>(b.dtype);
    put(&tag, 1);
    put_u32(static_cast<std::uint32_t>(b.shape.size()));
    for (auto d : b.shape) put(&d, 8);
    put(b.bytes.data(), b.bytes.size());
  }
  return out;
}

inline std::vector<Block> deserialize(const std::vector<std::uint8_t>& data) {
  std::size_t pos = 0;
  auto take = [&](void* dst, std::size_t n) {
    if (pos + n > data.size()) throw CheckpointError("checkpoint truncated");
    std::memcpy(dst, data.data() + pos, n);
    pos += n;
  };
  char magic[4];
  take(magic, 4);
  if (std::string(magic, 4) != "MMCK") throw CheckpointError("not an MMCK checkpoint");
  std::uint32_t version = 0, count = 0;
  take(&version, 4);
  if (version != kVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  take(&count, 4);
  std::vector<Block> blocks(count);
  for (auto& b : blocks) {
    std::uint32_t len = 0, rank = 0;
    take(&len, 4);
    if (len > data.size()) throw CheckpointError("checkpoint truncated");
    b.name.resize(len);
    take(b.name.data(), len);
    std::uint8_t tag = 0;
    take(&tag, 1);
    if (tag > 2) throw CheckpointError("unknown dtype tag in block '" + b.name + "'");
    b.dtype = static_cast<DType>(tag);
    take(&rank, 4);
    if (rank > 16) throw CheckpointError("implausible rank in block '" + b.name + "'");
    b.shape.resize(rank);
    for (auto& d : b.shape) take(&d, 8);
    const auto n = b.numel() * dtype_size(b.dtype);
    if (n > data.size() - pos) throw CheckpointError("checkpoint truncated");
    b.bytes.resize(n);
    take(b.bytes.data(), n);
  }
  if (pos != data.size()) throw CheckpointError("trailing bytes after last block");
  return blocks;
}

inline void write_file(const std::filesystem::path& path, const std::vector<Block>& blocks) {
  const auto bytes = serialize(blocks);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("short write to " + path.string());
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  return {std::istreambuf_iterator<char>(is), {}};
}

inline std::vector<Block> read_file(const std::filesystem::path& path) {
  return deserialize(read_bytes(path));
}

/// Git blob hash: SHA-1 over "blob <size>\0" followed by the content.
inline std::string content_hash(const std::vector<std::uint8_t>& bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, header.data(), header.size());
  EVP_DigestUpdate(ctx, bytes.data(), bytes.size());
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i)
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

template <class T>
void append_params(std::vector<Block>& blocks, const nn::ParamList<T>& params) {
  for (const auto& p : params)
    blocks.push_back(make_block<T>(p.name, p.tensor.shape(), p.tensor.data()));
}

inline const Block* find(const std::vector<Block>& blocks, const std::string& name) {
  for (const auto& b : blocks)
    if (b.name == name) return &b;
  return nullptr;
}

/// Copies every listed parameter from the blocks; names, dtypes and shapes must match.
template <class T>
void load_params(const std::vector<Block>& blocks, nn::ParamList<T>& params) {
  for (auto& p : params) {
    const Block* b = find(blocks, p.name);
    if (!b) throw CheckpointError("checkpoint has no parameter '" + p.name + "'");
    if (b->dtype != dtype_of<T>())
      throw CheckpointError("dtype mismatch for parameter '" + p.name + "'");
    const nn::Shape want = p.tensor.shape();
    if (b->shape.size() != want.size() || !std::equal(want.begin(), want.end(), b->shape.begin()))
      throw CheckpointError("shape mismatch for parameter '" + p.name + "'");
    std::memcpy(p.tensor.data().data(), b->bytes.data(), b->bytes.size());
  }
}

}  // namespace mmode::ckpt
