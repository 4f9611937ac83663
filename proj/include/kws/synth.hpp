#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "kws/common.hpp"
#include "kws/dataset.hpp"
#include "kws/features.hpp"

namespace kws::frontend {

// Desk-scale synthetic feature data: each phrase is a smooth random
// trajectory in the 40-dim feature space; utterances are time-warped,
// speaker-offset, noisy copies of it.
struct SynthSpec {
  size_t num_phrases = 12;
  size_t utterances_per_phrase = 40;
  size_t frames_per_utterance = 25;
  size_t speaker_count = 4;
  double noise_sigma = 1.0;
  double warp_fraction = 0.2;  // utterance length varies by +-this
  uint64_t seed = 1;

  void validate() const {
    if (num_phrases < 1 || utterances_per_phrase < 1 || frames_per_utterance < 1 || speaker_count < 1)
      throw Error("frontend", "SynthSpec counts must all be >= 1");
    if (noise_sigma < 0.0) throw Error("frontend", "SynthSpec noise_sigma must be >= 0");
    if (warp_fraction < 0.0 || warp_fraction >= 1.0)
      throw Error("frontend", "SynthSpec warp_fraction must be in [0, 1)");
  }
};

namespace synth_detail {

constexpr double kSpeakerOffsetSigma = 4.0;
constexpr double kPrototypeWalkSigma = 0.5;
constexpr size_t kControlStride = 8;

// Catmull-Rom through Gaussian-walk control points: a cubic-smoothed
// random trajectory, one independent walk per feature dimension.
inline nd::Tensor prototype_trajectory(size_t frames, Rng& rng) {
  size_t segments = (frames - 1) / kControlStride + 1;
  size_t n_ctrl = segments + 3;
  std::vector<std::vector<double>> ctrl(kNumMelBins, std::vector<double>(n_ctrl));
  for (size_t d = 0; d < kNumMelBins; ++d) {
    double walk = rng.normal(0.0, kPrototypeWalkSigma);
    for (size_t k = 0; k < n_ctrl; ++k) {
      ctrl[d][k] = walk;
      walk += rng.normal(0.0, kPrototypeWalkSigma);
    }
  }
  nd::Tensor out({frames, kNumMelBins});
  for (size_t t = 0; t < frames; ++t) {
    double u = static_cast<double>(t) / static_cast<double>(kControlStride);
    size_t seg = static_cast<size_t>(u);
    double s = u - static_cast<double>(seg);
    double s2 = s * s, s3 = s2 * s;
    for (size_t d = 0; d < kNumMelBins; ++d) {
      double p0 = ctrl[d][seg], p1 = ctrl[d][seg + 1], p2 = ctrl[d][seg + 2], p3 = ctrl[d][seg + 3];
      out.at(t, d) = 0.5 * ((2.0 * p1) + (-p0 + p2) * s + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * s2 +
                            (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * s3);
    }
  }
  return out;
}

inline nd::Tensor resample_rows(const nd::Tensor& src, size_t out_rows) {
  size_t in_rows = src.shape[0], cols = src.shape[1];
  nd::Tensor out({out_rows, cols});
  for (size_t i = 0; i < out_rows; ++i) {
    double pos = out_rows == 1 ? 0.0
                               : static_cast<double>(i) * static_cast<double>(in_rows - 1) /
                                     static_cast<double>(out_rows - 1);
    size_t lo = static_cast<size_t>(pos);
    size_t hi = std::min(lo + 1, in_rows - 1);
    double frac = pos - static_cast<double>(lo);
    for (size_t j = 0; j < cols; ++j)
      out.at(i, j) = (1.0 - frac) * src.at(lo, j) + frac * src.at(hi, j);
  }
  return out;
}

inline std::string tag(const char* prefix, size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%02zu", prefix, i);
  return buf;
}

}  // namespace synth_detail

inline dataset::Dataset synth_dataset(const SynthSpec& spec) {
  spec.validate();
  using namespace synth_detail;
  double floor = std::log(kLogFloor);

  std::vector<nd::Tensor> prototypes(spec.num_phrases);
  for (size_t p = 0; p < spec.num_phrases; ++p) {
    Rng rng(derive_seed(spec.seed, 0x700000 + p));
    prototypes[p] = prototype_trajectory(spec.frames_per_utterance, rng);
  }
  std::vector<std::vector<double>> speaker_offsets(spec.speaker_count,
                                                   std::vector<double>(kNumMelBins));
  for (size_t s = 0; s < spec.speaker_count; ++s) {
    Rng rng(derive_seed(spec.seed, 0x900000 + s));
    for (double& v : speaker_offsets[s]) v = rng.normal(0.0, kSpeakerOffsetSigma);
  }

  dataset::Dataset out;
  out.reserve(spec.num_phrases * spec.utterances_per_phrase);
  for (size_t p = 0; p < spec.num_phrases; ++p) {
    for (size_t u = 0; u < spec.utterances_per_phrase; ++u) {
      Rng rng(derive_seed(spec.seed, 0x100000 + (p << 32) + u));
      size_t speaker = u % spec.speaker_count;
      size_t frames = spec.frames_per_utterance;
      if (spec.warp_fraction > 0.0) {
        double w = rng.uniform(-spec.warp_fraction, spec.warp_fraction);
        frames = std::max<size_t>(
            1, static_cast<size_t>(std::lround(static_cast<double>(spec.frames_per_utterance) * (1.0 + w))));
      }
      nd::Tensor feat = resample_rows(prototypes[p], frames);
      for (size_t t = 0; t < frames; ++t)
        for (size_t d = 0; d < kNumMelBins; ++d) {
          double v = feat.at(t, d) + speaker_offsets[speaker][d];
          if (spec.noise_sigma > 0.0) v += rng.normal(0.0, spec.noise_sigma);
          feat.at(t, d) = std::max(v, floor);
        }
      dataset::Utterance utt;
      utt.id = tag("p", p) + "_" + tag("u", u);
      utt.phrase = "phrase_" + tag("", p);
      utt.speaker = "spk_" + tag("", speaker);
      FeatureSequence fs;
      fs.frames = std::move(feat);
      utt.set_features(std::move(fs));
      out.push_back(std::move(utt));
    }
  }
  return out;
}

}  // namespace kws::frontend
