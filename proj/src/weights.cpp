#include "hyperdys/weights.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <unordered_set>

#include "bytes.hpp"
#include "hyperdys/dsp.hpp"

namespace hyperdys::weights {

namespace {

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = crc32(crc, bytes.data() + off, chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::vector<std::uint8_t> encode(const std::vector<NamedTensor>& tensors) {
  detail::ByteWriter w;
  w.tag("HWTS");
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xFFFF) throw ParameterError("tensor name too long: " + name);
    if (t.rank() > 0xFF) throw ParameterError("tensor rank too large: " + name);
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    w.bytes(t.raw(), t.size() * sizeof(float));
  }
  w.u32(crc_of(w.buffer()));
  return std::move(w.buffer());
}

std::vector<NamedTensor> decode(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "weights file");
  if (bytes.size() < 16) r.fail("file too small");
  if (r.tag() != "HWTS") r.fail("bad magic");
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  if (crc_of(bytes.first(bytes.size() - 4)) != stored_crc) {
    throw CorruptionError("weights file checksum mismatch");
  }
  const std::uint32_t version = r.u32();
  if (version != kVersion) throw VersionError("unsupported weights file version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  std::vector<NamedTensor> out;
  std::unordered_set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = r.u16();
    auto name_bytes = r.take(len);
    std::string name(reinterpret_cast<const char*>(name_bytes.data()), len);
    if (!seen.insert(name).second) r.fail("duplicate tensor name " + name);
    const std::uint8_t rank = r.u8();
    ad::Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    ad::Tensor<float> t(shape);
    const std::size_t n = t.size() * sizeof(float);
    if (n > r.remaining() - 4) r.fail("tensor " + name + " payload exceeds file");
    std::memcpy(t.raw(), r.take(n).data(), n);
    out.push_back({std::move(name), std::move(t)});
  }
  if (r.remaining() != 4) r.fail("trailing bytes after last tensor");
  return out;
}

void save(const ad::ParamStore<float>& store, const std::filesystem::path& path) {
  std::vector<NamedTensor> tensors;
  for (const auto& p : store) tensors.push_back({p->name, p->value});
  const auto bytes = encode(tensors);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::vector<std::string> load(std::span<const std::uint8_t> bytes, ad::ParamStore<float>& store) {
  auto tensors = decode(bytes);
  for (const auto& [name, t] : tensors) {
    if (!store.contains(name)) throw IncompatibleWeightsError("unknown tensor name in weights file: " + name);
    const auto& expected = store.at(name).value.shape();
    if (expected != t.shape()) {
      throw IncompatibleWeightsError("tensor " + name + " has shape " + ad::to_string(t.shape()) +
                                     ", network expects " + ad::to_string(expected));
    }
  }
  std::vector<std::string> names;
  for (auto& [name, t] : tensors) {
    store.at(name).value = std::move(t);
    names.push_back(name);
  }
  return names;
}

std::vector<std::string> load(const std::filesystem::path& path, ad::ParamStore<float>& store) {
  if (!std::filesystem::exists(path)) throw DataError("weights file not found: " + path.string());
  return load(dsp::read_file(path), store);
}

}  // namespace hyperdys::weights
