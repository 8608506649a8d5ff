#pragma once

// Audio front end: WAV I/O, resampling, STFT, mel filterbank, log-Mel,
// MFCC, delta features, and assembly of the 3x224x224 network input.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "hyperdys/tensor.hpp"

namespace hyperdys::dsp {

struct AudioClip {
  std::vector<double> samples;  // mono, in [-1, 1]
  unsigned sample_rate = 0;

  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
};

// Dense row-major matrix of doubles.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

enum class BinKind { power, mel, mfcc };

// Spectro-temporal representation: rows are frequency (or cepstral) bins,
// columns are frames.
struct FeatureMatrix {
  Matrix m;
  BinKind kind = BinKind::power;
  std::size_t hop = 0;

  std::size_t bins() const { return m.rows; }
  std::size_t frames() const { return m.cols; }
  double& operator()(std::size_t b, std::size_t t) { return m(b, t); }
  double operator()(std::size_t b, std::size_t t) const { return m(b, t); }
};

enum class Normalization { unit, imagenet };
enum class InputKind { logmel, mfcc };

// Stored image = (resized - offset) / scale. scale is never zero.
struct ChannelNorm {
  double offset = 0.0;
  double scale = 1.0;
};

struct SpectrogramImage {
  static constexpr std::size_t kChannels = 3;
  static constexpr std::size_t kSide = 224;

  ad::Tensor<float> pixels{{kChannels, kSide, kSide}};  // (base, delta, delta-delta)
  std::array<ChannelNorm, kChannels> norm{};
};

struct DspConfig {
  unsigned sample_rate = 22050;
  std::size_t n_fft = 2048;
  std::size_t hop = 512;
  std::size_t n_mels = 256;
  std::size_t n_mfcc = 20;
  double f_min = 0.0;
  double f_max = 0.0;  // 0 selects Nyquist
  double top_db = 80.0;
  double amin = 1e-10;
  std::size_t delta_width = 9;
  Normalization normalization = Normalization::unit;
  std::array<double, 3> image_mean{0.485, 0.456, 0.406};
  std::array<double, 3> image_std{0.229, 0.224, 0.225};
};

// ---- WAV ------------------------------------------------------------------

enum class WavEncoding { pcm16, float32 };

AudioClip decode_wav(std::span<const std::uint8_t> bytes);
AudioClip load_wav(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_wav(const AudioClip& clip, WavEncoding encoding = WavEncoding::pcm16,
                                     unsigned channels = 1);
void write_wav(const std::filesystem::path& path, const AudioClip& clip,
               WavEncoding encoding = WavEncoding::pcm16);

// ---- signal ops -----------------------------------------------------------

// Windowed-sinc band-limited resampling. Output length is
// ceil(len * target / source).
AudioClip resample(const AudioClip& clip, unsigned target_rate);

// |DFT|^2 of Hann-windowed frames of the reflect-padded (centered) signal.
// Result has n_fft/2+1 rows and 1 + floor(len/hop) columns.
FeatureMatrix stft_power(const AudioClip& clip, std::size_t n_fft, std::size_t hop);

// Slaney mel scale: linear below 1 kHz, logarithmic above.
double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Area-normalized triangular filters, n_mels x (n_fft/2+1).
Matrix mel_filterbank(std::size_t n_mels, std::size_t n_fft, double sample_rate, double f_min,
                      double f_max);

// 10*log10(max(S, amin) / max(S_max, amin)), floored top_db below the peak.
Matrix power_to_db(const Matrix& power, double amin, double top_db);

FeatureMatrix log_mel(const AudioClip& clip, const DspConfig& cfg = {});

// Orthonormal DCT-II basis, n_out x n_in.
Matrix dct_basis(std::size_t n_out, std::size_t n_in);

FeatureMatrix mfcc_from_log_mel(const FeatureMatrix& log_mel, std::size_t n_mfcc);
FeatureMatrix mfcc(const AudioClip& clip, const DspConfig& cfg = {});

// Local least-squares slope along time with edge replication.
FeatureMatrix delta(const FeatureMatrix& m, std::size_t width = 9);

// Bilinear interpolation with corner alignment.
Matrix bilinear_resize(const Matrix& in, std::size_t rows, std::size_t cols);

SpectrogramImage assemble_image(const FeatureMatrix& base, const DspConfig& cfg = {});

// Resample to cfg.sample_rate, compute the base representation, assemble.
SpectrogramImage featurize(const AudioClip& clip, InputKind kind, const DspConfig& cfg = {});

// ---- image cache ----------------------------------------------------------

inline constexpr std::uint32_t kImageCacheVersion = 1;

std::vector<std::uint8_t> encode_image(const SpectrogramImage& image);
SpectrogramImage decode_image(std::span<const std::uint8_t> bytes);
void write_image(const std::filesystem::path& path, const SpectrogramImage& image);
SpectrogramImage read_image(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

}  // namespace hyperdys::dsp
