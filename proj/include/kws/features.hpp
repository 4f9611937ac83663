#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "kws/audio.hpp"
#include "kws/common.hpp"
#include "kws/tensor.hpp"

namespace kws::frontend {

constexpr size_t kNumMelBins = 40;
constexpr double kLogFloor = 1e-6;
constexpr int kFrameLengthMs = 25;
constexpr int kDefaultFrameHopMs = 10;
constexpr double kMelLowHz = 125.0;
constexpr double kMelHighHz = 7500.0;

// T x 40 matrix of log-mel energies for one utterance.
struct FeatureSequence {
  nd::Tensor frames;  // [T x 40]
  int frame_length_ms = kFrameLengthMs;
  int frame_hop_ms = kDefaultFrameHopMs;

  size_t num_frames() const { return frames.rows(); }
  size_t dim() const { return frames.rank() == 2 ? frames.shape[1] : 0; }

  void validate() const {
    if (frames.rank() != 2 || frames.shape[1] != kNumMelBins)
      throw Error("frontend", "FeatureSequence must be T x 40, got " + nd::shape_str(frames.shape));
    if (frames.shape[0] < 1) throw Error("frontend", "FeatureSequence must have at least one frame");
    double floor = std::log(kLogFloor);
    for (double v : frames.data)
      if (!(v >= floor)) throw Error("frontend", "FeatureSequence entry below log floor");
  }
};

namespace fft_detail {

// Iterative radix-2 Cooley-Tukey; n must be a power of two.
inline void fft_inplace(std::vector<std::complex<double>>& x) {
  size_t n = x.size();
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(x[i], x[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    double ang = -2.0 * 3.14159265358979323846 / static_cast<double>(len);
    std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t k = 0; k < len / 2; ++k) {
        std::complex<double> u = x[i + k];
        std::complex<double> v = x[i + k + len / 2] * w;
        x[i + k] = u + v;
        x[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

inline size_t next_pow2(size_t n) {
  size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

}  // namespace fft_detail

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Triangular filters on the magnitude spectrum; rows are filters, columns
// FFT bins up to Nyquist.
struct MelFilterbank {
  std::vector<std::vector<double>> weights;  // [num_filters][num_bins]
  std::vector<double> center_hz;

  static MelFilterbank build(size_t num_filters, size_t fft_size, int sample_rate_hz,
                             double low_hz, double high_hz) {
    size_t num_bins = fft_size / 2 + 1;
    double mel_lo = hz_to_mel(low_hz), mel_hi = hz_to_mel(high_hz);
    std::vector<double> edges(num_filters + 2);
    for (size_t i = 0; i < edges.size(); ++i)
      edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                                        static_cast<double>(num_filters + 1));
    MelFilterbank fb;
    fb.weights.assign(num_filters, std::vector<double>(num_bins, 0.0));
    fb.center_hz.assign(edges.begin() + 1, edges.end() - 1);
    double bin_hz = static_cast<double>(sample_rate_hz) / static_cast<double>(fft_size);
    for (size_t m = 0; m < num_filters; ++m) {
      double f0 = edges[m], f1 = edges[m + 1], f2 = edges[m + 2];
      for (size_t k = 0; k < num_bins; ++k) {
        double f = bin_hz * static_cast<double>(k);
        if (f > f0 && f < f1)
          fb.weights[m][k] = (f - f0) / (f1 - f0);
        else if (f >= f1 && f < f2)
          fb.weights[m][k] = (f2 - f) / (f2 - f1);
      }
    }
    return fb;
  }
};

inline std::vector<double> mel_center_frequencies_hz(size_t num_filters = kNumMelBins,
                                                     size_t fft_size = 512,
                                                     int sample_rate_hz = 16000,
                                                     double low_hz = kMelLowHz,
                                                     double high_hz = kMelHighHz) {
  return MelFilterbank::build(num_filters, fft_size, sample_rate_hz, low_hz, high_hz).center_hz;
}

// 25 ms Hann-windowed frames at the given hop, magnitude spectrum, 40
// triangular mel filters over 125-7500 Hz, natural log with floor 1e-6.
inline FeatureSequence extract_features(const AudioClip& clip, int frame_hop_ms = kDefaultFrameHopMs) {
  clip.validate();
  size_t frame_len = static_cast<size_t>(clip.sample_rate_hz) * kFrameLengthMs / 1000;
  size_t hop = static_cast<size_t>(clip.sample_rate_hz) * frame_hop_ms / 1000;
  if (clip.samples.size() < frame_len)
    throw Error("frontend", "clip shorter than one " + std::to_string(kFrameLengthMs) + " ms frame");
  size_t num_frames = 1 + (clip.samples.size() - frame_len) / hop;
  size_t fft_size = fft_detail::next_pow2(frame_len);

  std::vector<double> window(frame_len);
  for (size_t i = 0; i < frame_len; ++i)
    window[i] = 0.5 - 0.5 * std::cos(2.0 * 3.14159265358979323846 * static_cast<double>(i) /
                                     static_cast<double>(frame_len - 1));

  static_assert(kNumMelBins == 40);
  MelFilterbank fb = MelFilterbank::build(kNumMelBins, fft_size, clip.sample_rate_hz, kMelLowHz, kMelHighHz);

  FeatureSequence out;
  out.frames = nd::Tensor({num_frames, kNumMelBins});
  out.frame_hop_ms = frame_hop_ms;
  std::vector<std::complex<double>> buf(fft_size);
  size_t num_bins = fft_size / 2 + 1;
  std::vector<double> mag(num_bins);
  for (size_t f = 0; f < num_frames; ++f) {
    const double* src = clip.samples.data() + f * hop;
    for (size_t i = 0; i < frame_len; ++i) buf[i] = {src[i] * window[i], 0.0};
    for (size_t i = frame_len; i < fft_size; ++i) buf[i] = {0.0, 0.0};
    fft_detail::fft_inplace(buf);
    for (size_t k = 0; k < num_bins; ++k) mag[k] = std::abs(buf[k]);
    for (size_t m = 0; m < kNumMelBins; ++m) {
      double e = 0.0;
      const auto& w = fb.weights[m];
      for (size_t k = 0; k < num_bins; ++k) e += w[k] * mag[k];
      out.frames.at(f, m) = std::log(std::max(e, kLogFloor));
    }
  }
  return out;
}

// Feature-domain counterpart of add_noise on waveforms: Gaussian
// perturbation with RMS set by the same SNR rule, re-floored so the
// output stays a valid FeatureSequence.
inline FeatureSequence add_noise(const FeatureSequence& features, double snr_db, uint64_t seed) {
  features.validate();
  if (!std::isfinite(snr_db)) throw Error("frontend", "add_noise: snr_db must be finite");
  double signal_rms = 0.0;
  for (double v : features.frames.data) signal_rms += v * v;
  signal_rms = std::sqrt(signal_rms / static_cast<double>(features.frames.numel()));
  if (signal_rms == 0.0) throw Error("frontend", "add_noise: zero-power features");
  double noise_rms = signal_rms * std::pow(10.0, -snr_db / 20.0);
  Rng rng(seed);
  FeatureSequence out = features;
  double floor = std::log(kLogFloor);
  for (double& v : out.frames.data) v = std::max(floor, v + rng.normal(0.0, noise_rms));
  return out;
}

// ---- KWSF flat binary feature records ----
// Header: magic "KWSF", version u32, T u32, dim u32; then T*dim
// little-endian float32 values.

namespace kwsf_detail {

inline void write_u32(std::ostream& out, uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b, 4);
}

inline uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
         static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

}  // namespace kwsf_detail

constexpr uint32_t kKwsfVersion = 1;

inline void write_kwsf(const std::string& path, const FeatureSequence& features) {
  features.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("frontend", "cannot write feature file: " + path);
  out.write("KWSF", 4);
  kwsf_detail::write_u32(out, kKwsfVersion);
  kwsf_detail::write_u32(out, static_cast<uint32_t>(features.num_frames()));
  kwsf_detail::write_u32(out, static_cast<uint32_t>(features.dim()));
  for (double v : features.frames.data) {
    float f = static_cast<float>(v);
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    kwsf_detail::write_u32(out, bits);
  }
  if (!out) throw Error("frontend", "failed writing feature file: " + path);
}

inline FeatureSequence read_kwsf(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("frontend", "cannot open feature file: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "KWSF", 4) != 0)
    throw Error("frontend", "bad magic in feature file: " + path);
  uint32_t version = kwsf_detail::read_u32(in);
  if (version != kKwsfVersion)
    throw Error("frontend", "unsupported feature file version " + std::to_string(version) + ": " + path);
  uint32_t t = kwsf_detail::read_u32(in);
  uint32_t dim = kwsf_detail::read_u32(in);
  if (dim != kNumMelBins)
    throw Error("frontend", "feature file dim " + std::to_string(dim) + " != 40: " + path);
  FeatureSequence out;
  out.frames = nd::Tensor({t, dim});
  double floor = std::log(kLogFloor);
  for (size_t i = 0; i < out.frames.numel(); ++i) {
    uint32_t bits = kwsf_detail::read_u32(in);
    float f;
    std::memcpy(&f, &bits, 4);
    // float32 rounding can land a hair under the floor; snap it back.
    out.frames.data[i] = std::max(static_cast<double>(f), floor);
  }
  if (!in) throw Error("frontend", "truncated feature file: " + path);
  out.validate();
  return out;
}

// Pad (by repeating the final frame) or truncate to exactly `frames` rows.
inline FeatureSequence fit_length(const FeatureSequence& features, size_t frames) {
  if (frames == 0) throw Error("frontend", "fit_length: frame count must be positive");
  size_t t = features.num_frames();
  if (t == frames) return features;
  FeatureSequence out = features;
  out.frames = nd::Tensor({frames, kNumMelBins});
  for (size_t i = 0; i < frames; ++i) {
    size_t src = std::min(i, t - 1);
    for (size_t j = 0; j < kNumMelBins; ++j) out.frames.at(i, j) = features.frames.at(src, j);
  }
  return out;
}

}  // namespace kws::frontend
