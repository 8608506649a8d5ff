#include <cmath>
#include <cstring>
#include <fstream>

#include "bytes.hpp"
#include "hyperdys/dsp.hpp"

namespace hyperdys::dsp {

// "HDIM", version, dims (3,224,224), row-major float32 payload; all LE.
std::vector<std::uint8_t> encode_image(const SpectrogramImage& image) {
  detail::ByteWriter w;
  w.tag("HDIM");
  w.u32(kImageCacheVersion);
  for (std::size_t d : image.pixels.shape()) w.u32(static_cast<std::uint32_t>(d));
  w.bytes(image.pixels.raw(), image.pixels.size() * sizeof(float));
  return std::move(w.buffer());
}

SpectrogramImage decode_image(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "image cache");
  if (r.tag() != "HDIM") r.fail("bad magic");
  const std::uint32_t version = r.u32();
  if (version != kImageCacheVersion) {
    throw VersionError("image cache version " + std::to_string(version) + " (expected " +
                       std::to_string(kImageCacheVersion) + ")");
  }
  const std::uint32_t c = r.u32(), h = r.u32(), w = r.u32();
  if (c != SpectrogramImage::kChannels || h != SpectrogramImage::kSide || w != SpectrogramImage::kSide) {
    r.fail("unexpected dims " + std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w));
  }
  SpectrogramImage img;
  const std::size_t n = img.pixels.size() * sizeof(float);
  if (r.remaining() != n) r.fail("payload length " + std::to_string(r.remaining()) + " != " + std::to_string(n));
  std::memcpy(img.pixels.raw(), r.take(n).data(), n);
  if (!img.pixels.all_finite()) r.fail("non-finite pixel");
  return img;
}

void write_image(const std::filesystem::path& path, const SpectrogramImage& image) {
  const auto bytes = encode_image(image);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  std::filesystem::rename(tmp, path);
}

SpectrogramImage read_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DataError("missing image cache entry " + path.string());
  const auto bytes = read_file(path);
  try {
    return decode_image(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace hyperdys::dsp
