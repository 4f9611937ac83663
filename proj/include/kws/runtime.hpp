#pragma once

#include <cctype>
#include <cstdio>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "kws/checkpoint.hpp"
#include "kws/common.hpp"
#include "kws/encoder.hpp"
#include "kws/evalkit.hpp"
#include "kws/features.hpp"

namespace kws::runtime {

// Phrase profile used at serving time: the centroid of the enrollment
// embeddings plus enough metadata to refuse a mismatched model.
struct EnrollmentProfile {
  std::string phrase;
  std::vector<double> centroid;
  size_t enrolled_count = 0;
  uint64_t model_checksum = 0;
  uint64_t seed = 0;
};

inline EnrollmentProfile enroll(const encoder::Encoder& enc,
                                const std::vector<const frontend::FeatureSequence*>& utterances,
                                const std::string& phrase, uint64_t seed = 0) {
  if (utterances.empty()) throw Error("runtime", "enroll: need at least one utterance");
  EnrollmentProfile p;
  p.phrase = phrase;
  p.enrolled_count = utterances.size();
  p.model_checksum = enc.checksum();
  p.seed = seed;
  p.centroid.assign(enc.embed_dim(), 0.0);
  for (const auto* f : utterances) {
    std::vector<double> e = enc.forward(*f);
    for (size_t i = 0; i < e.size(); ++i) p.centroid[i] += e[i];
  }
  double inv = 1.0 / static_cast<double>(utterances.size());
  for (double& v : p.centroid) v *= inv;
  return p;
}

struct VerifyResult {
  bool accepted = false;
  double score = 0.0;
};

// Accept iff cosine(embedding, centroid) >= threshold. The caller passes
// the checksum of the encoder that produced `embedding`; a profile built
// with different weights is an integrity error, not a silent mismatch.
inline VerifyResult verify(std::span<const double> embedding, const EnrollmentProfile& profile,
                           double threshold, uint64_t model_checksum) {
  if (!(threshold >= 0.0 && threshold <= 1.0))
    throw Error("runtime", "verify threshold must be in [0, 1]");
  if (model_checksum != profile.model_checksum)
    throw Error("runtime", "model checksum mismatch for profile '" + profile.phrase +
                               "'; re-enroll with the serving model");
  if (embedding.size() != profile.centroid.size())
    throw Error("runtime", "embedding dimension does not match profile centroid");
  double score = evalkit::cosine(embedding, profile.centroid);
  return {score >= threshold, score};
}

struct DetectionEvent {
  size_t start_frame = 0;
  size_t end_frame = 0;  // exclusive
  std::string phrase;
  double score = 0.0;
  double threshold = 0.0;
};

struct DetectConfig {
  double threshold = 0.9;
  size_t window_frames = 98;  // ~1 s at 25 ms / 10 ms
  size_t hop_frames = 10;
  // Optional refractory period: after an acceptance, skip this many
  // subsequent windows for that profile. 0 = report every hit.
  size_t refractory_windows = 0;
};

// Slides a window over the feature sequence, embeds each window and
// verifies it against every profile. Events are ordered by window start,
// then profile order. Audio shorter than one window yields no events.
inline std::vector<DetectionEvent> stream_detect(const encoder::Encoder& enc,
                                                 const std::vector<EnrollmentProfile>& profiles,
                                                 const frontend::FeatureSequence& features,
                                                 const DetectConfig& cfg) {
  if (cfg.window_frames < 1 || cfg.hop_frames < 1)
    throw Error("runtime", "window and hop must be >= 1 frame");
  if (!(cfg.threshold >= 0.0 && cfg.threshold <= 1.0))
    throw Error("runtime", "detect threshold must be in [0, 1]");
  uint64_t checksum = enc.checksum();
  for (const auto& p : profiles)
    if (p.model_checksum != checksum)
      throw Error("runtime", "model checksum mismatch for profile '" + p.phrase +
                                 "'; re-enroll with the serving model");

  std::vector<DetectionEvent> events;
  size_t total = features.num_frames();
  if (total < cfg.window_frames) return events;
  std::vector<size_t> skip_until(profiles.size(), 0);  // window index gate
  size_t window_index = 0;
  for (size_t start = 0; start + cfg.window_frames <= total; start += cfg.hop_frames, ++window_index) {
    frontend::FeatureSequence win;
    win.frames = nd::Tensor({cfg.window_frames, features.dim()});
    std::copy(features.frames.data.begin() + start * features.dim(),
              features.frames.data.begin() + (start + cfg.window_frames) * features.dim(),
              win.frames.data.begin());
    std::vector<double> emb = enc.forward(win);
    for (size_t pi = 0; pi < profiles.size(); ++pi) {
      if (cfg.refractory_windows > 0 && window_index < skip_until[pi]) continue;
      double score = evalkit::cosine(emb, profiles[pi].centroid);
      if (score >= cfg.threshold) {
        events.push_back({start, start + cfg.window_frames, profiles[pi].phrase, score, cfg.threshold});
        if (cfg.refractory_windows > 0) skip_until[pi] = window_index + 1 + cfg.refractory_windows;
      }
    }
  }
  return events;
}

inline std::vector<DetectionEvent> stream_detect(const encoder::Encoder& enc,
                                                 const std::vector<EnrollmentProfile>& profiles,
                                                 const frontend::AudioClip& clip,
                                                 const DetectConfig& cfg) {
  return stream_detect(enc, profiles, frontend::extract_features(clip), cfg);
}

inline void write_events_csv(const std::string& path, const std::vector<DetectionEvent>& events) {
  std::ofstream out(path);
  if (!out) throw Error("runtime", "cannot write: " + path);
  out << "start_frame,end_frame,phrase,score\n";
  for (const auto& e : events)
    out << e.start_frame << "," << e.end_frame << "," << e.phrase << "," << evalkit::fmt(e.score) << "\n";
}

// ---- profile store: one container file per profile plus a TSV index ----

inline std::string sanitize_filename(const std::string& name) {
  std::string out;
  for (char c : name)
    out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
  return out.empty() ? std::string("profile") : out;
}

inline void save_profile(const std::string& path, const EnrollmentProfile& p) {
  io::Container c;
  c.arch = "profile";
  c.meta = {{"phrase", p.phrase},
            {"enrolled_count", std::to_string(p.enrolled_count)},
            {"model_checksum", std::to_string(p.model_checksum)},
            {"seed", std::to_string(p.seed)}};
  io::Blob b;
  b.name = "profile";
  b.kind = 0;
  b.shape = {p.centroid.size()};
  b.f64 = p.centroid;
  c.blobs.push_back(std::move(b));
  io::write_container(path, c);
}

inline EnrollmentProfile load_profile(const std::string& path) {
  io::Container c = io::read_container(path);
  if (c.arch != "profile") throw Error("runtime", "not a profile container: " + path);
  EnrollmentProfile p;
  p.phrase = c.require_meta("phrase");
  p.enrolled_count = static_cast<size_t>(std::stoull(c.require_meta("enrolled_count")));
  p.model_checksum = std::stoull(c.require_meta("model_checksum"));
  p.seed = std::stoull(c.require_meta("seed"));
  p.centroid = c.require_blob("profile").f64;
  return p;
}

// Writes <dir>/<phrase>.kwsp for each profile and an index file
// <dir>/profiles.tsv with lines `phrase<TAB>filename`.
inline void save_profile_store(const std::string& dir, const std::vector<EnrollmentProfile>& profiles) {
  std::ofstream index(dir + "/profiles.tsv");
  if (!index) throw Error("runtime", "cannot write profile index in: " + dir);
  for (const auto& p : profiles) {
    std::string fname = sanitize_filename(p.phrase) + ".kwsp";
    save_profile(dir + "/" + fname, p);
    index << p.phrase << "\t" << fname << "\n";
  }
}

inline std::vector<EnrollmentProfile> load_profile_store(const std::string& dir) {
  std::ifstream index(dir + "/profiles.tsv");
  if (!index) throw Error("runtime", "cannot open profile index: " + dir + "/profiles.tsv");
  std::vector<EnrollmentProfile> out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(index, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    size_t tab = line.find('\t');
    if (tab == std::string::npos)
      throw Error("runtime", "profiles.tsv:" + std::to_string(line_no) + ": expected phrase<TAB>filename");
    EnrollmentProfile p = load_profile(dir + "/" + line.substr(tab + 1));
    if (p.phrase != line.substr(0, tab))
      throw Error("runtime", "profiles.tsv:" + std::to_string(line_no) + ": phrase does not match file");
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace kws::runtime
