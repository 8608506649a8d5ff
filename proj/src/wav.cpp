#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <optional>

#include "bytes.hpp"
#include "hyperdys/dsp.hpp"

namespace hyperdys::dsp {

namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

struct WavFormat {
  std::uint16_t code = 0;
  std::uint16_t channels = 0;
  std::uint32_t sample_rate = 0;
  std::uint16_t bits = 0;
};

}  // namespace

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

AudioClip decode_wav(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "wav");
  if (bytes.size() < 12) r.fail("file too small for a RIFF header");
  if (r.tag() != "RIFF") r.fail("missing RIFF tag");
  r.u32();
  if (r.tag() != "WAVE") r.fail("missing WAVE tag");

  std::optional<WavFormat> fmt;
  std::optional<std::span<const std::uint8_t>> data;
  while (r.remaining() >= 8 && !data) {
    const std::string id = r.tag();
    const std::uint32_t size = r.u32();
    if (size > r.remaining()) {
      r.fail("chunk '" + id + "' declares " + std::to_string(size) + " bytes but only " +
             std::to_string(r.remaining()) + " remain");
    }
    auto body = r.take(size);
    if (size % 2 == 1 && r.remaining() > 0) r.take(1);
    if (id == "fmt ") {
      detail::ByteReader f(body, "wav fmt chunk");
      WavFormat w;
      w.code = f.u16();
      w.channels = f.u16();
      w.sample_rate = f.u32();
      f.u32();  // byte rate
      f.u16();  // block align
      w.bits = f.u16();
      if (w.code == kFormatExtensible) {
        if (f.remaining() < 24) f.fail("truncated WAVE_FORMAT_EXTENSIBLE block");
        f.u16();  // cbSize
        f.u16();  // valid bits
        f.u32();  // channel mask
        w.code = f.u16();  // leading two bytes of the subformat GUID
      }
      fmt = w;
    } else if (id == "data") {
      data = body;
    }
  }
  if (!fmt) r.fail("missing fmt chunk");
  if (!data) r.fail("missing data chunk");

  const bool pcm16 = fmt->code == kFormatPcm && fmt->bits == 16;
  const bool f32 = fmt->code == kFormatFloat && fmt->bits == 32;
  if (!pcm16 && !f32) {
    throw UnsupportedError("unsupported WAV encoding (format " + std::to_string(fmt->code) + ", " +
                           std::to_string(fmt->bits) + " bits)");
  }
  if (fmt->channels < 1 || fmt->channels > 2) {
    throw UnsupportedError("unsupported channel count " + std::to_string(fmt->channels));
  }
  if (fmt->sample_rate == 0) r.fail("sample rate is zero");

  const std::size_t width = fmt->bits / 8;
  const std::size_t frame = width * fmt->channels;
  if (data->size() % frame != 0) r.fail("data chunk is not a whole number of frames");
  const std::size_t frames = data->size() / frame;
  if (frames == 0) throw EmptyInputError("WAV file contains no samples");

  AudioClip clip;
  clip.sample_rate = fmt->sample_rate;
  clip.samples.resize(frames);
  detail::ByteReader d(*data, "wav data chunk");
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0.0;
    for (std::uint16_t c = 0; c < fmt->channels; ++c) {
      double v;
      if (pcm16) {
        v = static_cast<double>(d.read<std::int16_t>()) / 32768.0;
      } else {
        v = static_cast<double>(d.read<float>());
        if (!std::isfinite(v)) d.fail("non-finite float sample");
        v = std::clamp(v, -1.0, 1.0);
      }
      acc += v;
    }
    clip.samples[i] = acc / fmt->channels;
  }
  return clip;
}

AudioClip load_wav(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode_wav(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_wav(const AudioClip& clip, WavEncoding encoding,
                                     unsigned channels) {
  if (channels < 1 || channels > 2) throw ParameterError("encode_wav: 1 or 2 channels");
  const std::uint16_t bits = encoding == WavEncoding::pcm16 ? 16 : 32;
  const std::uint32_t block = bits / 8 * channels;
  const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * block);
  detail::ByteWriter w;
  w.tag("RIFF");
  w.u32(36 + data_bytes);
  w.tag("WAVE");
  w.tag("fmt ");
  w.u32(16);
  w.u16(encoding == WavEncoding::pcm16 ? kFormatPcm : kFormatFloat);
  w.u16(static_cast<std::uint16_t>(channels));
  w.u32(clip.sample_rate);
  w.u32(clip.sample_rate * block);
  w.u16(static_cast<std::uint16_t>(block));
  w.u16(bits);
  w.tag("data");
  w.u32(data_bytes);
  for (double s : clip.samples) {
    const double v = std::clamp(s, -1.0, 1.0);
    for (unsigned c = 0; c < channels; ++c) {
      if (encoding == WavEncoding::pcm16) {
        w.i16(static_cast<std::int16_t>(std::lround(std::clamp(v * 32768.0, -32768.0, 32767.0))));
      } else {
        w.f32(static_cast<float>(v));
      }
    }
  }
  return std::move(w.buffer());
}

void write_wav(const std::filesystem::path& path, const AudioClip& clip, WavEncoding encoding) {
  const auto bytes = encode_wav(clip, encoding);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

AudioClip resample(const AudioClip& clip, unsigned target_rate) {
  if (target_rate == 0) throw ParameterError("resample: target rate must be positive");
  if (clip.sample_rate == 0) throw ParameterError("resample: source rate must be positive");
  if (clip.samples.empty()) throw EmptyInputError("resample: empty clip");
  if (target_rate == clip.sample_rate) return clip;

  constexpr double kZeroCrossings = 32.0;
  const double ratio = static_cast<double>(target_rate) / clip.sample_rate;
  const double cutoff = std::min(1.0, ratio);
  const double half_width = kZeroCrossings / cutoff;  // in input samples
  const std::size_t n_in = clip.samples.size();
  const std::size_t n_out =
      (n_in * static_cast<std::size_t>(target_rate) + clip.sample_rate - 1) / clip.sample_rate;

  AudioClip out;
  out.sample_rate = target_rate;
  out.samples.resize(n_out);
  for (std::size_t j = 0; j < n_out; ++j) {
    const double t = static_cast<double>(j) * clip.sample_rate / target_rate;
    const long lo = std::max(0L, static_cast<long>(std::ceil(t - half_width)));
    const long hi = std::min(static_cast<long>(n_in) - 1, static_cast<long>(std::floor(t + half_width)));
    double acc = 0.0;
    for (long i = lo; i <= hi; ++i) {
      const double x = t - static_cast<double>(i);
      const double arg = std::numbers::pi * cutoff * x;
      const double sinc = x == 0.0 ? 1.0 : std::sin(arg) / arg;
      const double win = 0.5 + 0.5 * std::cos(std::numbers::pi * x / half_width);
      acc += clip.samples[static_cast<std::size_t>(i)] * cutoff * sinc * win;
    }
    out.samples[j] = std::clamp(acc, -1.0, 1.0);
  }
  return out;
}

}  // namespace hyperdys::dsp
