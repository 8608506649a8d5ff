#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <memory>
#include <mutex>
#include <numbers>

#include "hyperdys/dsp.hpp"

namespace hyperdys::dsp {

namespace {

// FFTW planning is not thread-safe; execution with new-array calls is.
std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n) {
    in_ = static_cast<double*>(fftw_malloc(sizeof(double) * n));
    out_ = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * (n / 2 + 1)));
    std::lock_guard<std::mutex> lock(fftw_planner_mutex());
    plan_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), in_, out_, FFTW_ESTIMATE);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;
  ~RealFft() {
    {
      std::lock_guard<std::mutex> lock(fftw_planner_mutex());
      fftw_destroy_plan(plan_);
    }
    fftw_free(in_);
    fftw_free(out_);
  }

  double* input() { return in_; }
  const fftw_complex* execute() {
    fftw_execute(plan_);
    return out_;
  }

 private:
  std::size_t n_;
  double* in_ = nullptr;
  fftw_complex* out_ = nullptr;
  fftw_plan plan_ = nullptr;
};

// numpy-style "reflect" (edge sample not repeated), periodic for long pads.
double reflect_at(const std::vector<double>& x, long i) {
  const long n = static_cast<long>(x.size());
  if (n == 1) return x[0];
  const long period = 2 * (n - 1);
  long k = i % period;
  if (k < 0) k += period;
  if (k >= n) k = period - k;
  return x[static_cast<std::size_t>(k)];
}

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

void require_finite(const Matrix& m, const char* what) {
  for (double v : m.values) {
    if (!std::isfinite(v)) throw ParameterError(std::string(what) + ": non-finite input");
  }
}

// Slaney constants: 200/3 Hz per mel below 1 kHz, ln(6.4)/27 per mel above.
constexpr double kMelLinearHz = 200.0 / 3.0;
constexpr double kMelBreakHz = 1000.0;
constexpr double kMelBreak = kMelBreakHz / kMelLinearHz;
const double kMelLogStep = std::log(6.4) / 27.0;

}  // namespace

FeatureMatrix stft_power(const AudioClip& clip, std::size_t n_fft, std::size_t hop) {
  if (!is_power_of_two(n_fft)) throw ParameterError("stft: n_fft must be a power of two");
  if (hop == 0) throw ParameterError("stft: hop must be at least 1");
  if (clip.samples.empty()) throw EmptyInputError("stft: empty clip");

  const std::size_t len = clip.samples.size();
  const std::size_t frames = 1 + len / hop;
  const std::size_t bins = n_fft / 2 + 1;
  const long pad = static_cast<long>(n_fft / 2);

  std::vector<double> window(n_fft);
  for (std::size_t i = 0; i < n_fft; ++i)
    window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / n_fft);

  FeatureMatrix out{Matrix(bins, frames), BinKind::power, hop};
  RealFft fft(n_fft);
  double* buf = fft.input();
  for (std::size_t t = 0; t < frames; ++t) {
    const long start = static_cast<long>(t * hop) - pad;
    for (std::size_t i = 0; i < n_fft; ++i)
      buf[i] = window[i] * reflect_at(clip.samples, start + static_cast<long>(i));
    const fftw_complex* spec = fft.execute();
    for (std::size_t k = 0; k < bins; ++k) out(k, t) = spec[k][0] * spec[k][0] + spec[k][1] * spec[k][1];
  }
  return out;
}

double hz_to_mel(double hz) {
  if (hz < kMelBreakHz) return hz / kMelLinearHz;
  return kMelBreak + std::log(hz / kMelBreakHz) / kMelLogStep;
}

double mel_to_hz(double mel) {
  if (mel < kMelBreak) return mel * kMelLinearHz;
  return kMelBreakHz * std::exp((mel - kMelBreak) * kMelLogStep);
}

Matrix mel_filterbank(std::size_t n_mels, std::size_t n_fft, double sample_rate, double f_min,
                      double f_max) {
  if (n_mels == 0) throw ParameterError("mel_filterbank: n_mels must be at least 1");
  if (n_fft < 2) throw ParameterError("mel_filterbank: n_fft must be at least 2");
  if (!(sample_rate > 0)) throw ParameterError("mel_filterbank: sample rate must be positive");
  if (f_max > sample_rate / 2.0) {
    throw ParameterError("mel_filterbank: f_max " + std::to_string(f_max) + " exceeds Nyquist " +
                         std::to_string(sample_rate / 2.0));
  }
  if (!(f_min >= 0.0 && f_min < f_max)) throw ParameterError("mel_filterbank: need 0 <= f_min < f_max");

  const std::size_t bins = n_fft / 2 + 1;
  const double mel_lo = hz_to_mel(f_min), mel_hi = hz_to_mel(f_max);
  std::vector<double> edges(n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / (n_mels + 1));

  Matrix fb(n_mels, bins);
  for (std::size_t m = 0; m < n_mels; ++m) {
    const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
    const double norm = 2.0 / (hi - lo);
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / static_cast<double>(n_fft);
      const double rising = (f - lo) / (mid - lo);
      const double falling = (hi - f) / (hi - mid);
      fb(m, k) = std::max(0.0, std::min(rising, falling)) * norm;
    }
  }
  return fb;
}

Matrix power_to_db(const Matrix& power, double amin, double top_db) {
  if (!(amin > 0)) throw ParameterError("power_to_db: amin must be positive");
  if (top_db < 0) throw ParameterError("power_to_db: top_db must be non-negative");
  double peak = amin;
  for (double v : power.values) peak = std::max(peak, v);
  const double ref_db = 10.0 * std::log10(peak);
  Matrix out = power;
  double top = -std::numeric_limits<double>::infinity();
  for (double& v : out.values) {
    v = 10.0 * std::log10(std::max(v, amin)) - ref_db;
    top = std::max(top, v);
  }
  const double floor = top - top_db;
  for (double& v : out.values) v = std::max(v, floor);
  return out;
}

FeatureMatrix log_mel(const AudioClip& clip, const DspConfig& cfg) {
  const double nyquist = clip.sample_rate / 2.0;
  const double f_max = cfg.f_max > 0 ? cfg.f_max : nyquist;
  const Matrix fb = mel_filterbank(cfg.n_mels, cfg.n_fft, clip.sample_rate, cfg.f_min, f_max);
  const FeatureMatrix power = stft_power(clip, cfg.n_fft, cfg.hop);

  Matrix mel(cfg.n_mels, power.frames());
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    std::size_t first = 0, last = 0;
    bool any = false;
    for (std::size_t k = 0; k < fb.cols; ++k) {
      if (fb(m, k) == 0.0) continue;
      if (!any) first = k;
      last = k;
      any = true;
    }
    if (!any) continue;
    for (std::size_t t = 0; t < power.frames(); ++t) {
      double acc = 0.0;
      for (std::size_t k = first; k <= last; ++k) acc += fb(m, k) * power(k, t);
      mel(m, t) = acc;
    }
  }
  return FeatureMatrix{power_to_db(mel, cfg.amin, cfg.top_db), BinKind::mel, cfg.hop};
}

Matrix dct_basis(std::size_t n_out, std::size_t n_in) {
  if (n_in == 0 || n_out == 0) throw ParameterError("dct_basis: sizes must be positive");
  if (n_out > n_in) throw ParameterError("dct_basis: more coefficients than inputs");
  Matrix b(n_out, n_in);
  const double scale0 = std::sqrt(1.0 / n_in), scale = std::sqrt(2.0 / n_in);
  for (std::size_t k = 0; k < n_out; ++k)
    for (std::size_t n = 0; n < n_in; ++n)
      b(k, n) = (k == 0 ? scale0 : scale) *
                std::cos(std::numbers::pi * static_cast<double>(k) * (2.0 * n + 1.0) / (2.0 * n_in));
  return b;
}

FeatureMatrix mfcc_from_log_mel(const FeatureMatrix& lm, std::size_t n_mfcc) {
  if (n_mfcc > lm.bins()) {
    throw ParameterError("mfcc: n_mfcc " + std::to_string(n_mfcc) + " exceeds n_mels " +
                         std::to_string(lm.bins()));
  }
  const Matrix basis = dct_basis(n_mfcc, lm.bins());
  FeatureMatrix out{Matrix(n_mfcc, lm.frames()), BinKind::mfcc, lm.hop};
  for (std::size_t k = 0; k < n_mfcc; ++k)
    for (std::size_t t = 0; t < lm.frames(); ++t) {
      double acc = 0.0;
      for (std::size_t n = 0; n < lm.bins(); ++n) acc += basis(k, n) * lm(n, t);
      out(k, t) = acc;
    }
  return out;
}

FeatureMatrix mfcc(const AudioClip& clip, const DspConfig& cfg) {
  if (cfg.n_mfcc > cfg.n_mels) {
    throw ParameterError("mfcc: n_mfcc " + std::to_string(cfg.n_mfcc) + " exceeds n_mels " +
                         std::to_string(cfg.n_mels));
  }
  return mfcc_from_log_mel(log_mel(clip, cfg), cfg.n_mfcc);
}

FeatureMatrix delta(const FeatureMatrix& m, std::size_t width) {
  if (width < 3 || width % 2 == 0) {
    throw ParameterError("delta: width must be odd and at least 3, got " + std::to_string(width));
  }
  const long half = static_cast<long>(width / 2);
  double denom = 0.0;
  for (long k = 1; k <= half; ++k) denom += 2.0 * static_cast<double>(k * k);
  const long frames = static_cast<long>(m.frames());
  auto clamp = [frames](long t) { return static_cast<std::size_t>(std::clamp(t, 0L, frames - 1)); };

  FeatureMatrix out{Matrix(m.bins(), m.frames()), m.kind, m.hop};
  for (std::size_t b = 0; b < m.bins(); ++b)
    for (long t = 0; t < frames; ++t) {
      double acc = 0.0;
      for (long k = 1; k <= half; ++k) acc += static_cast<double>(k) * (m(b, clamp(t + k)) - m(b, clamp(t - k)));
      out(b, static_cast<std::size_t>(t)) = acc / denom;
    }
  return out;
}

Matrix bilinear_resize(const Matrix& in, std::size_t rows, std::size_t cols) {
  if (in.rows == 0 || in.cols == 0 || rows == 0 || cols == 0)
    throw ParameterError("bilinear_resize: empty dimensions");
  auto source = [](std::size_t i, std::size_t out_n, std::size_t in_n) {
    if (out_n == 1 || in_n == 1) return 0.0;
    return static_cast<double>(i) * static_cast<double>(in_n - 1) / static_cast<double>(out_n - 1);
  };
  Matrix out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const double sr = source(r, rows, in.rows);
    const std::size_t r0 = std::min(static_cast<std::size_t>(sr), in.rows - 1);
    const std::size_t r1 = std::min(r0 + 1, in.rows - 1);
    const double fr = sr - static_cast<double>(r0);
    for (std::size_t c = 0; c < cols; ++c) {
      const double sc = source(c, cols, in.cols);
      const std::size_t c0 = std::min(static_cast<std::size_t>(sc), in.cols - 1);
      const std::size_t c1 = std::min(c0 + 1, in.cols - 1);
      const double fc = sc - static_cast<double>(c0);
      const double top = in(r0, c0) + (in(r0, c1) - in(r0, c0)) * fc;
      const double bottom = in(r1, c0) + (in(r1, c1) - in(r1, c0)) * fc;
      out(r, c) = top + (bottom - top) * fr;
    }
  }
  return out;
}

SpectrogramImage assemble_image(const FeatureMatrix& base, const DspConfig& cfg) {
  if (base.frames() < 2) {
    throw TooShortError("assemble_image: need at least 2 frames, got " + std::to_string(base.frames()));
  }
  require_finite(base.m, "assemble_image");
  const FeatureMatrix d1 = delta(base, cfg.delta_width);
  const FeatureMatrix d2 = delta(d1, cfg.delta_width);
  const std::array<const FeatureMatrix*, 3> channels{&base, &d1, &d2};

  constexpr std::size_t side = SpectrogramImage::kSide;
  SpectrogramImage img;
  float* dst = img.pixels.raw();
  for (std::size_t c = 0; c < 3; ++c) {
    const Matrix resized = bilinear_resize(channels[c]->m, side, side);
    const auto [lo_it, hi_it] = std::minmax_element(resized.values.begin(), resized.values.end());
    double lo = *lo_it, range = *hi_it - *lo_it;
    if (!(range > 0.0)) {
      // constant channel maps to 0.5
      lo = *lo_it - 0.5;
      range = 1.0;
    }
    ChannelNorm norm{lo, range};
    if (cfg.normalization == Normalization::imagenet) {
      norm.offset = lo + cfg.image_mean[c] * range;
      norm.scale = range * cfg.image_std[c];
    }
    img.norm[c] = norm;
    for (std::size_t i = 0; i < side * side; ++i)
      dst[c * side * side + i] = static_cast<float>((resized.values[i] - norm.offset) / norm.scale);
  }
  return img;
}

SpectrogramImage featurize(const AudioClip& clip, InputKind kind, const DspConfig& cfg) {
  const AudioClip audio = resample(clip, cfg.sample_rate);
  const FeatureMatrix base = kind == InputKind::logmel ? log_mel(audio, cfg) : mfcc(audio, cfg);
  return assemble_image(base, cfg);
}

}  // namespace hyperdys::dsp
