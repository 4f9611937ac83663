#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>

#include "kws/audio.hpp"
#include "kws/features.hpp"

using namespace kws::frontend;
using kws::Error;

namespace {

AudioClip sine(double freq_hz, double seconds, double amplitude = 0.2, int rate = 16000) {
  AudioClip clip;
  clip.sample_rate_hz = rate;
  size_t n = static_cast<size_t>(seconds * rate);
  clip.samples.resize(n);
  for (size_t i = 0; i < n; ++i)
    clip.samples[i] = amplitude * std::sin(2.0 * M_PI * freq_hz * static_cast<double>(i) / rate);
  return clip;
}

std::string temp_path(const char* name) {
  return std::string("kws_test_") + name;
}

}  // namespace

TEST_CASE("frame count formula") {
  AudioClip clip = sine(440.0, 1.0);  // 16000 samples
  FeatureSequence f = extract_features(clip);
  REQUIRE(f.num_frames() == 98);  // 1 + (16000 - 400) / 160
  REQUIRE(f.dim() == 40);
  f.validate();

  // shorter clips still produce 40-dim features
  clip.samples.resize(500);
  FeatureSequence g = extract_features(clip);
  REQUIRE(g.dim() == 40);
  REQUIRE(g.num_frames() == 1);

  clip.samples.resize(399);  // under one 25 ms frame
  REQUIRE_THROWS_AS(extract_features(clip), Error);
}

TEST_CASE("all-zero clip hits the log floor everywhere") {
  AudioClip clip;
  clip.samples.assign(16000, 0.0);
  FeatureSequence f = extract_features(clip);
  double floor = std::log(1e-6);
  for (double v : f.frames.data) REQUIRE(v == floor);
}

TEST_CASE("pure tone lands in the bracketing mel filter") {
  FeatureSequence f = extract_features(sine(1000.0, 1.0));
  std::vector<double> centers = mel_center_frequencies_hz();
  // locate the pair of filters whose centers bracket 1 kHz
  size_t below = 0;
  for (size_t m = 0; m < centers.size(); ++m)
    if (centers[m] <= 1000.0) below = m;
  size_t first_argmax = 0;
  for (size_t t = 0; t < f.num_frames(); ++t) {
    size_t argmax = 0;
    for (size_t m = 1; m < 40; ++m)
      if (f.frames.at(t, m) > f.frames.at(t, argmax)) argmax = m;
    if (t == 0)
      first_argmax = argmax;
    else
      REQUIRE(argmax == first_argmax);  // constant across frames
  }
  REQUIRE((first_argmax == below || first_argmax == below + 1));
}

TEST_CASE("extract_features is deterministic and pure") {
  AudioClip clip = sine(700.0, 0.5);
  FeatureSequence a = extract_features(clip);
  FeatureSequence b = extract_features(clip);
  REQUIRE(a.frames.data == b.frames.data);
}

TEST_CASE("add_noise hits the requested SNR on waveforms") {
  AudioClip clip = sine(440.0, 1.0);
  double signal = rms(clip.samples);

  AudioClip nearly_clean = add_noise(clip, 60.0, 7);
  std::vector<double> diff(clip.samples.size());
  for (size_t i = 0; i < diff.size(); ++i) diff[i] = nearly_clean.samples[i] - clip.samples[i];
  REQUIRE(rms(diff) < 0.01 * signal * 10.0);  // 60 dB -> 0.1% of signal RMS; generous margin
  double out_rms = rms(nearly_clean.samples);
  REQUIRE(std::abs(out_rms - signal) / signal < 0.01);  // within 1% RMS of input

  AudioClip snr0 = add_noise(clip, 0.0, 7);
  for (size_t i = 0; i < diff.size(); ++i) diff[i] = snr0.samples[i] - clip.samples[i];
  REQUIRE(std::abs(rms(diff) - signal) / signal < 0.02);  // noise RMS == signal RMS within 2%

  AudioClip again = add_noise(clip, 0.0, 7);
  REQUIRE(again.samples == snr0.samples);  // bit-identical per seed
  AudioClip other = add_noise(clip, 0.0, 8);
  REQUIRE(other.samples != snr0.samples);

  AudioClip silent;
  silent.samples.assign(1000, 0.0);
  REQUIRE_THROWS_AS(add_noise(silent, 10.0, 1), Error);
}

TEST_CASE("feature-domain add_noise is deterministic and floored") {
  AudioClip clip = sine(500.0, 0.5);
  FeatureSequence f = extract_features(clip);
  FeatureSequence a = add_noise(f, 3.0, 42);
  FeatureSequence b = add_noise(f, 3.0, 42);
  REQUIRE(a.frames.data == b.frames.data);
  a.validate();
  // lower SNR perturbs more
  FeatureSequence mild = add_noise(f, 30.0, 42);
  double d_strong = 0.0, d_mild = 0.0;
  for (size_t i = 0; i < f.frames.numel(); ++i) {
    d_strong += std::abs(a.frames.data[i] - f.frames.data[i]);
    d_mild += std::abs(mild.frames.data[i] - f.frames.data[i]);
  }
  REQUIRE(d_strong > d_mild);
}

TEST_CASE("WAV round trip and format rejection") {
  AudioClip clip = sine(300.0, 0.25);
  std::string path = temp_path("roundtrip.wav");
  write_wav(path, clip);
  AudioClip back = read_wav(path);
  REQUIRE(back.samples.size() == clip.samples.size());
  for (size_t i = 0; i < clip.samples.size(); ++i)
    REQUIRE(back.samples[i] == Catch::Approx(clip.samples[i]).margin(1.0 / 32768.0 + 1e-9));

  AudioClip wrong_rate = clip;
  wrong_rate.sample_rate_hz = 8000;
  std::string path2 = temp_path("wrongrate.wav");
  write_wav(path2, wrong_rate);
  REQUIRE_THROWS_AS(read_wav(path2), Error);

  REQUIRE_THROWS_AS(read_wav("does_not_exist.wav"), Error);
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("KWSF feature files round trip at float32 precision") {
  FeatureSequence f = extract_features(sine(900.0, 0.5));
  std::string path = temp_path("feat.kwsf");
  write_kwsf(path, f);
  FeatureSequence back = read_kwsf(path);
  REQUIRE(back.num_frames() == f.num_frames());
  REQUIRE(back.dim() == 40);
  for (size_t i = 0; i < f.frames.numel(); ++i)
    REQUIRE(back.frames.data[i] == Catch::Approx(f.frames.data[i]).margin(1e-4));
  back.validate();
  std::remove(path.c_str());

  REQUIRE_THROWS_AS(read_kwsf("missing.kwsf"), Error);
}

TEST_CASE("fit_length pads by repeating the last frame and truncates") {
  FeatureSequence f;
  f.frames = kws::nd::Tensor({3, 40});
  for (size_t t = 0; t < 3; ++t)
    for (size_t d = 0; d < 40; ++d) f.frames.at(t, d) = static_cast<double>(t);
  FeatureSequence longer = fit_length(f, 5);
  REQUIRE(longer.num_frames() == 5);
  REQUIRE(longer.frames.at(4, 0) == 2.0);
  FeatureSequence shorter = fit_length(f, 2);
  REQUIRE(shorter.num_frames() == 2);
  REQUIRE(shorter.frames.at(1, 0) == 1.0);
}
