#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "kws/common.hpp"

namespace kws::frontend {

// Mono waveform, samples in [-1, 1].
struct AudioClip {
  std::vector<double> samples;
  int sample_rate_hz = 16000;

  void validate() const {
    if (samples.empty()) throw Error("frontend", "AudioClip must be non-empty");
    if (sample_rate_hz <= 0) throw Error("frontend", "AudioClip sample rate must be positive");
  }
};

inline double rms(const std::vector<double>& x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s / static_cast<double>(x.size()));
}

// White Gaussian noise at the requested SNR; deterministic per seed.
// Output samples are clamped back into [-1, 1].
inline AudioClip add_noise(const AudioClip& clip, double snr_db, uint64_t seed) {
  clip.validate();
  if (!std::isfinite(snr_db)) throw Error("frontend", "add_noise: snr_db must be finite");
  double signal_rms = rms(clip.samples);
  if (signal_rms == 0.0) throw Error("frontend", "add_noise: zero-power signal");
  double noise_rms = signal_rms * std::pow(10.0, -snr_db / 20.0);
  Rng rng(seed);
  AudioClip out = clip;
  for (double& v : out.samples) {
    v += rng.normal(0.0, noise_rms);
    v = std::min(1.0, std::max(-1.0, v));
  }
  return out;
}

namespace wav_detail {

inline uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
         static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

inline uint16_t read_u16(std::istream& in) {
  unsigned char b[2];
  in.read(reinterpret_cast<char*>(b), 2);
  return static_cast<uint16_t>(b[0] | b[1] << 8);
}

inline void write_u32(std::ostream& out, uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b, 4);
}

inline void write_u16(std::ostream& out, uint16_t v) {
  char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
  out.write(b, 2);
}

}  // namespace wav_detail

// Mono 16-bit PCM at 16 kHz only; anything else is rejected, not resampled.
inline AudioClip read_wav(const std::string& path, int required_rate_hz = 16000) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("frontend", "cannot open WAV file: " + path);

  char riff[4], wave[4];
  in.read(riff, 4);
  wav_detail::read_u32(in);  // total size
  in.read(wave, 4);
  if (!in || std::memcmp(riff, "RIFF", 4) != 0 || std::memcmp(wave, "WAVE", 4) != 0)
    throw Error("frontend", "not a RIFF/WAVE file: " + path);

  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  bool got_fmt = false;
  std::vector<double> samples;
  while (in) {
    char id[4];
    in.read(id, 4);
    if (!in) break;
    uint32_t size = wav_detail::read_u32(in);
    if (std::memcmp(id, "fmt ", 4) == 0) {
      format = wav_detail::read_u16(in);
      channels = wav_detail::read_u16(in);
      rate = wav_detail::read_u32(in);
      wav_detail::read_u32(in);  // byte rate
      wav_detail::read_u16(in);  // block align
      bits = wav_detail::read_u16(in);
      if (size > 16) in.seekg(size - 16, std::ios::cur);
      got_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      if (!got_fmt) throw Error("frontend", "WAV data chunk before fmt chunk: " + path);
      if (format != 1 || bits != 16) throw Error("frontend", "only 16-bit PCM WAV is supported: " + path);
      if (channels != 1) throw Error("frontend", "only mono WAV is supported: " + path);
      if (static_cast<int>(rate) != required_rate_hz)
        throw Error("frontend", "WAV sample rate " + std::to_string(rate) + " Hz rejected, expected " +
                                    std::to_string(required_rate_hz) + " Hz: " + path);
      size_t n = size / 2;
      samples.resize(n);
      for (size_t i = 0; i < n; ++i) {
        unsigned char b[2];
        in.read(reinterpret_cast<char*>(b), 2);
        auto v = static_cast<int16_t>(b[0] | b[1] << 8);
        samples[i] = static_cast<double>(v) / 32768.0;
      }
      if (size % 2) in.seekg(1, std::ios::cur);
    } else {
      in.seekg(size + (size % 2), std::ios::cur);
    }
  }
  if (samples.empty()) throw Error("frontend", "WAV file has no samples: " + path);
  return AudioClip{std::move(samples), required_rate_hz};
}

inline void write_wav(const std::string& path, const AudioClip& clip) {
  clip.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("frontend", "cannot write WAV file: " + path);
  uint32_t data_bytes = static_cast<uint32_t>(clip.samples.size() * 2);
  out.write("RIFF", 4);
  wav_detail::write_u32(out, 36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  wav_detail::write_u32(out, 16);
  wav_detail::write_u16(out, 1);  // PCM
  wav_detail::write_u16(out, 1);  // mono
  wav_detail::write_u32(out, static_cast<uint32_t>(clip.sample_rate_hz));
  wav_detail::write_u32(out, static_cast<uint32_t>(clip.sample_rate_hz * 2));
  wav_detail::write_u16(out, 2);
  wav_detail::write_u16(out, 16);
  out.write("data", 4);
  wav_detail::write_u32(out, data_bytes);
  for (double v : clip.samples) {
    double clamped = std::min(1.0, std::max(-1.0, v));
    auto s = static_cast<int16_t>(std::lrint(clamped * 32767.0));
    wav_detail::write_u16(out, static_cast<uint16_t>(s));
  }
}

}  // namespace kws::frontend
