#pragma once

#include <algorithm>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "kws/common.hpp"
#include "kws/features.hpp"

namespace kws::dataset {

inline frontend::FeatureSequence load_features_file(const std::string& path) {
  if (path.size() >= 5 && path.compare(path.size() - 5, 5, ".kwsf") == 0)
    return frontend::read_kwsf(path);
  if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".wav") == 0)
    return frontend::extract_features(frontend::read_wav(path));
  throw Error("dataset", "unknown feature file type (expected .wav or .kwsf): " + path);
}

// One labeled utterance. Features are either held in memory or loaded
// from `path` on first access.
struct Utterance {
  std::string id;
  std::string phrase;
  std::string speaker;
  std::string path;  // empty for in-memory utterances

  const frontend::FeatureSequence& features() const {
    if (!cached_) {
      if (path.empty()) throw Error("dataset", "utterance '" + id + "' has no features and no path");
      cached_ = std::make_shared<frontend::FeatureSequence>(load_features_file(path));
    }
    return *cached_;
  }

  void set_features(frontend::FeatureSequence f) {
    cached_ = std::make_shared<frontend::FeatureSequence>(std::move(f));
  }

  bool loaded() const { return static_cast<bool>(cached_); }

 private:
  mutable std::shared_ptr<frontend::FeatureSequence> cached_;
};

using Dataset = std::vector<Utterance>;

// Phrase labels in order of first appearance.
inline std::vector<std::string> phrase_labels(const Dataset& data) {
  std::vector<std::string> out;
  std::unordered_map<std::string, bool> seen;
  for (const auto& u : data)
    if (!seen[u.phrase]) {
      seen[u.phrase] = true;
      out.push_back(u.phrase);
    }
  return out;
}

inline std::unordered_map<std::string, std::vector<size_t>> indices_by_phrase(const Dataset& data) {
  std::unordered_map<std::string, std::vector<size_t>> out;
  for (size_t i = 0; i < data.size(); ++i) out[data[i].phrase].push_back(i);
  return out;
}

// Manifest lines: id<TAB>phrase<TAB>speaker<TAB>path; '#' starts a comment.
inline Dataset load_manifest(const std::string& path, bool eager = true) {
  std::ifstream in(path);
  if (!in) throw Error("dataset", "cannot open manifest: " + path);
  Dataset out;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cols;
    size_t start = 0;
    while (true) {
      size_t tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (cols.size() != 4)
      throw Error("dataset", path + ":" + std::to_string(line_no) + ": expected 4 tab-separated columns, got " +
                                 std::to_string(cols.size()));
    for (size_t c = 0; c < 4; ++c)
      if (cols[c].empty()) {
        static const char* names[] = {"id", "phrase", "speaker", "path"};
        throw Error("dataset",
                    path + ":" + std::to_string(line_no) + ": missing " + names[c] + " column");
      }
    Utterance u;
    u.id = cols[0];
    u.phrase = cols[1];
    u.speaker = cols[2];
    u.path = cols[3];
    if (eager) {
      try {
        u.features();
      } catch (const Error& e) {
        throw Error("dataset", path + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
    out.push_back(std::move(u));
  }
  return out;
}

// Training batch: X phrases x Y utterances. Positions use the 0-based
// index j; even j is an enrollment slot, odd j a test slot (the paper's
// 1-based odd/even convention mapped onto storage order).
struct Batch {
  size_t num_phrases = 0;      // X
  size_t utterances_per = 0;   // Y, even
  std::vector<std::vector<size_t>> grid;  // [X][Y] dataset indices

  static bool is_enrollment_slot(size_t j) { return j % 2 == 0; }

  std::vector<size_t> enrollment_indices_flat() const {
    std::vector<size_t> out;
    for (size_t i = 0; i < num_phrases; ++i)
      for (size_t j = 0; j < utterances_per; j += 2) out.push_back(i * utterances_per + j);
    return out;
  }

  std::vector<size_t> test_indices_flat() const {
    std::vector<size_t> out;
    for (size_t i = 0; i < num_phrases; ++i)
      for (size_t j = 1; j < utterances_per; j += 2) out.push_back(i * utterances_per + j);
    return out;
  }
};

inline Batch sample_batch(const Dataset& data, size_t num_phrases = 8, size_t utterances_per = 10,
                          uint64_t seed = 0) {
  if (num_phrases < 2) throw Error("dataset", "sample_batch: need at least 2 phrases per batch");
  if (utterances_per < 2 || utterances_per % 2 != 0)
    throw Error("dataset", "sample_batch: utterances per phrase must be even and >= 2");

  auto by_phrase = indices_by_phrase(data);
  std::vector<std::string> labels = phrase_labels(data);
  std::vector<std::string> eligible;
  for (const auto& l : labels)
    if (by_phrase[l].size() >= utterances_per) eligible.push_back(l);
  if (eligible.size() < num_phrases)
    throw Error("dataset", "sample_batch: need " + std::to_string(num_phrases) + " phrases with >= " +
                               std::to_string(utterances_per) + " utterances, have " +
                               std::to_string(eligible.size()));

  Rng rng(derive_seed(seed, 0xba7c4));
  // Partial Fisher-Yates for phrases, then per-phrase sampling without
  // replacement.
  std::vector<size_t> order(eligible.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (size_t i = 0; i < num_phrases; ++i) {
    size_t j = i + rng.index(order.size() - i);
    std::swap(order[i], order[j]);
  }

  Batch batch;
  batch.num_phrases = num_phrases;
  batch.utterances_per = utterances_per;
  batch.grid.resize(num_phrases);
  for (size_t i = 0; i < num_phrases; ++i) {
    const auto& pool = by_phrase[eligible[order[i]]];
    std::vector<size_t> picks(pool);
    for (size_t j = 0; j < utterances_per; ++j) {
      size_t k = j + rng.index(picks.size() - j);
      std::swap(picks[j], picks[k]);
    }
    picks.resize(utterances_per);
    batch.grid[i] = std::move(picks);
  }
  return batch;
}

// Per-phrase disjoint enrollment/test partition for evaluation.
struct EvalSplit {
  struct PhraseSplit {
    std::string phrase;
    std::vector<size_t> enroll;
    std::vector<size_t> test;
  };
  std::vector<PhraseSplit> phrases;
};

inline EvalSplit make_eval_split(const Dataset& data, size_t enroll_count = 10, uint64_t seed = 0) {
  auto by_phrase = indices_by_phrase(data);
  std::vector<std::string> labels = phrase_labels(data);
  EvalSplit split;
  Rng rng(derive_seed(seed, 0xe7a1));
  for (const auto& label : labels) {
    const auto& pool = by_phrase[label];
    if (pool.size() <= enroll_count)
      throw Error("dataset", "phrase '" + label + "' has " + std::to_string(pool.size()) +
                                 " utterances; need more than " + std::to_string(enroll_count) +
                                 " to split enrollment/test");
    std::vector<size_t> shuffled(pool);
    for (size_t j = 0; j + 1 < shuffled.size(); ++j) {
      size_t k = j + rng.index(shuffled.size() - j);
      std::swap(shuffled[j], shuffled[k]);
    }
    EvalSplit::PhraseSplit ps;
    ps.phrase = label;
    ps.enroll.assign(shuffled.begin(), shuffled.begin() + enroll_count);
    ps.test.assign(shuffled.begin() + enroll_count, shuffled.end());
    std::sort(ps.enroll.begin(), ps.enroll.end());
    std::sort(ps.test.begin(), ps.test.end());
    split.phrases.push_back(std::move(ps));
  }
  return split;
}

// Deterministic train/holdout split used by the training loop's periodic
// evaluation.
inline std::pair<Dataset, Dataset> split_holdout(const Dataset& data, size_t holdout_per_phrase,
                                                 uint64_t seed) {
  auto by_phrase = indices_by_phrase(data);
  std::vector<std::string> labels = phrase_labels(data);
  Rng rng(derive_seed(seed, 0x401d));
  std::vector<char> held(data.size(), 0);
  for (const auto& label : labels) {
    const auto& pool = by_phrase[label];
    if (pool.size() <= holdout_per_phrase)
      throw Error("dataset", "phrase '" + label + "' has too few utterances (" +
                                 std::to_string(pool.size()) + ") to hold out " +
                                 std::to_string(holdout_per_phrase));
    std::vector<size_t> shuffled(pool);
    for (size_t j = 0; j + 1 < shuffled.size(); ++j) {
      size_t k = j + rng.index(shuffled.size() - j);
      std::swap(shuffled[j], shuffled[k]);
    }
    for (size_t j = 0; j < holdout_per_phrase; ++j) held[shuffled[j]] = 1;
  }
  Dataset train, holdout;
  for (size_t i = 0; i < data.size(); ++i) (held[i] ? holdout : train).push_back(data[i]);
  return {std::move(train), std::move(holdout)};
}

}  // namespace kws::dataset
