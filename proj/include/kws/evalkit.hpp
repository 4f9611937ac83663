#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "kws/common.hpp"
#include "kws/tensor.hpp"

namespace kws::evalkit {

// Cosine scores of one phrase's enrollment centroid against every test
// utterance, partitioned by label equality.
struct ScoreSet {
  std::string phrase;
  std::vector<double> positives;  // same-phrase test utterances
  std::vector<double> negatives;  // all other phrases' test utterances

  void validate() const {
    if (positives.empty() || negatives.empty())
      throw Error("evalkit", "ScoreSet for '" + phrase + "' needs >= 1 positive and >= 1 negative");
    for (double s : positives)
      if (!(s >= -1.0 - 1e-9 && s <= 1.0 + 1e-9))
        throw Error("evalkit", "positive score out of [-1, 1]");
    for (double s : negatives)
      if (!(s >= -1.0 - 1e-9 && s <= 1.0 + 1e-9))
        throw Error("evalkit", "negative score out of [-1, 1]");
  }
};

// 100 bins over [0, 1) with stride 0.01, plus an underflow bin for
// scores < 0 and an overflow bin for scores >= 1; each side normalized to
// a probability distribution.
struct Histogram {
  std::array<double, 100> pos{}, neg{};
  double pos_underflow = 0.0, pos_overflow = 0.0;
  double neg_underflow = 0.0, neg_overflow = 0.0;
};

inline Histogram histogram(const ScoreSet& scores) {
  scores.validate();
  Histogram h;
  auto accum = [](const std::vector<double>& xs, std::array<double, 100>& bins, double& under,
                  double& over) {
    for (double s : xs) {
      if (s < 0.0)
        under += 1.0;
      else if (s >= 1.0)
        over += 1.0;
      else
        bins[static_cast<size_t>(s / 0.01)] += 1.0;
    }
    double total = static_cast<double>(xs.size());
    for (double& b : bins) b /= total;
    under /= total;
    over /= total;
  };
  accum(scores.positives, h.pos, h.pos_underflow, h.pos_overflow);
  accum(scores.negatives, h.neg, h.neg_underflow, h.neg_overflow);
  return h;
}

// Accept iff score >= threshold.
inline std::pair<double, double> far_frr(const ScoreSet& scores, double threshold) {
  scores.validate();
  if (!(threshold >= 0.0 && threshold <= 1.0))
    throw Error("evalkit", "threshold must be in [0, 1]");
  size_t false_accepts = 0, false_rejects = 0;
  for (double s : scores.negatives)
    if (s >= threshold) ++false_accepts;
  for (double s : scores.positives)
    if (s < threshold) ++false_rejects;
  return {static_cast<double>(false_accepts) / static_cast<double>(scores.negatives.size()),
          static_cast<double>(false_rejects) / static_cast<double>(scores.positives.size())};
}

// FAR/FRR at thresholds k * step for k = 0..n; the default grid is the
// 0-to-1 stride-0.01 sweep.
struct ThresholdSweep {
  std::vector<double> thresholds;
  std::vector<double> far;
  std::vector<double> frr;

  void validate() const {
    if (thresholds.size() < 2 || thresholds.size() != far.size() || thresholds.size() != frr.size())
      throw Error("evalkit", "ThresholdSweep needs >= 2 aligned points");
  }
};

inline std::vector<double> default_threshold_grid(double step = 0.01) {
  if (step <= 0.0 || step > 1.0) throw Error("evalkit", "threshold step must be in (0, 1]");
  std::vector<double> out;
  size_t n = static_cast<size_t>(std::lround(1.0 / step));
  out.reserve(n + 1);
  for (size_t k = 0; k <= n; ++k) out.push_back(static_cast<double>(k) * step);
  out.back() = 1.0;
  return out;
}

inline ThresholdSweep det_curve(const ScoreSet& scores, double step = 0.01) {
  ThresholdSweep sweep;
  sweep.thresholds = default_threshold_grid(step);
  for (double t : sweep.thresholds) {
    auto [fa, fr] = far_frr(scores, t);
    sweep.far.push_back(fa);
    sweep.frr.push_back(fr);
  }
  return sweep;
}

// The finer alternative: every distinct observed score as a threshold
// (plus the grid endpoints 0 and 1).
inline ThresholdSweep det_curve_exact(const ScoreSet& scores) {
  scores.validate();
  std::vector<double> ts{0.0, 1.0};
  for (double s : scores.positives)
    if (s >= 0.0 && s <= 1.0) ts.push_back(s);
  for (double s : scores.negatives)
    if (s >= 0.0 && s <= 1.0) ts.push_back(s);
  std::sort(ts.begin(), ts.end());
  ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
  ThresholdSweep sweep;
  sweep.thresholds = ts;
  for (double t : ts) {
    auto [fa, fr] = far_frr(scores, t);
    sweep.far.push_back(fa);
    sweep.frr.push_back(fr);
  }
  return sweep;
}

// Area under the DET curve (FRR integrated over FAR), lower is better.
// Points are walked in descending-threshold order, i.e. FAR ascending;
// the (FAR=0, max FRR) and (FAR=1, FRR=0) corners are appended when the
// sweep itself never reaches them.
inline double auc(const ThresholdSweep& sweep) {
  sweep.validate();
  size_t n = sweep.thresholds.size();
  std::vector<std::pair<double, double>> pts;  // (far, frr), far ascending
  pts.reserve(n + 2);
  for (size_t k = n; k-- > 0;) pts.emplace_back(sweep.far[k], sweep.frr[k]);
  if (pts.front().first > 0.0) pts.insert(pts.begin(), {0.0, pts.front().second});
  if (pts.back().first < 1.0) pts.emplace_back(1.0, 0.0);
  double area = 0.0;
  for (size_t i = 0; i + 1 < pts.size(); ++i)
    area += (pts[i + 1].first - pts[i].first) * 0.5 * (pts[i].second + pts[i + 1].second);
  return area;
}

// Operating point where FAR == FRR, linearly interpolated between the
// adjacent sweep thresholds where (FAR - FRR) changes sign.
inline double eer(const ThresholdSweep& sweep) {
  sweep.validate();
  size_t n = sweep.thresholds.size();
  for (size_t k = 0; k < n; ++k)
    if (sweep.far[k] == sweep.frr[k]) return sweep.far[k];
  for (size_t k = 0; k + 1 < n; ++k) {
    double d0 = sweep.far[k] - sweep.frr[k];
    double d1 = sweep.far[k + 1] - sweep.frr[k + 1];
    if ((d0 > 0.0 && d1 < 0.0) || (d0 < 0.0 && d1 > 0.0)) {
      double alpha = d0 / (d0 - d1);
      return sweep.far[k] + alpha * (sweep.far[k + 1] - sweep.far[k]);
    }
  }
  // No sign change (degenerate score sets); fall back to the closest
  // point.
  size_t best = 0;
  double best_gap = std::abs(sweep.far[0] - sweep.frr[0]);
  for (size_t k = 1; k < n; ++k) {
    double gap = std::abs(sweep.far[k] - sweep.frr[k]);
    if (gap < best_gap) {
      best_gap = gap;
      best = k;
    }
  }
  return 0.5 * (sweep.far[best] + sweep.frr[best]);
}

struct PhraseMetrics {
  std::string phrase;
  double auc = 0.0;
  double eer = 0.0;
  ThresholdSweep sweep;
};

struct AggregateMetrics {
  double mean_auc = 0.0;
  double mean_eer = 0.0;
  ThresholdSweep mean_det;  // index-wise mean of FARs and FRRs
};

inline PhraseMetrics evaluate_scores(const ScoreSet& scores, double step = 0.01) {
  PhraseMetrics m;
  m.phrase = scores.phrase;
  m.sweep = det_curve(scores, step);
  m.auc = auc(m.sweep);
  m.eer = eer(m.sweep);
  return m;
}

inline AggregateMetrics aggregate(const std::vector<PhraseMetrics>& phrases) {
  if (phrases.empty()) throw Error("evalkit", "aggregate requires >= 1 phrase");
  AggregateMetrics agg;
  agg.mean_det.thresholds = phrases[0].sweep.thresholds;
  agg.mean_det.far.assign(agg.mean_det.thresholds.size(), 0.0);
  agg.mean_det.frr.assign(agg.mean_det.thresholds.size(), 0.0);
  for (const auto& m : phrases) {
    if (m.sweep.thresholds != agg.mean_det.thresholds)
      throw Error("evalkit", "aggregate: phrase '" + m.phrase + "' uses a different threshold grid");
    agg.mean_auc += m.auc;
    agg.mean_eer += m.eer;
    for (size_t k = 0; k < m.sweep.far.size(); ++k) {
      agg.mean_det.far[k] += m.sweep.far[k];
      agg.mean_det.frr[k] += m.sweep.frr[k];
    }
  }
  double inv = 1.0 / static_cast<double>(phrases.size());
  agg.mean_auc *= inv;
  agg.mean_eer *= inv;
  for (double& v : agg.mean_det.far) v *= inv;
  for (double& v : agg.mean_det.frr) v *= inv;
  return agg;
}

// Cosine between a centroid and one embedding, same eps policy as the
// graph op.
inline double cosine(std::span<const double> a, std::span<const double> b, double eps = 1e-8) {
  if (a.size() != b.size()) throw Error("evalkit", "cosine: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / std::max(std::sqrt(na) * std::sqrt(nb), eps);
}

// Scores one phrase centroid against every test embedding.
inline ScoreSet score_phrase(const std::string& phrase, std::span<const double> centroid,
                             const std::vector<std::vector<double>>& test_embeddings,
                             const std::vector<std::string>& test_phrases) {
  if (test_embeddings.empty()) throw Error("evalkit", "score_phrase: empty test set");
  if (test_embeddings.size() != test_phrases.size())
    throw Error("evalkit", "score_phrase: embeddings/labels length mismatch");
  ScoreSet out;
  out.phrase = phrase;
  for (size_t i = 0; i < test_embeddings.size(); ++i) {
    double s = cosine(centroid, test_embeddings[i]);
    s = std::min(1.0, std::max(-1.0, s));  // shave rounding spill past +-1
    (test_phrases[i] == phrase ? out.positives : out.negatives).push_back(s);
  }
  out.validate();
  return out;
}

// ---- CSV emission (fixed formatting so reruns are byte-identical) ----

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

inline void write_metrics_csv(const std::string& path, const std::vector<PhraseMetrics>& phrases,
                              const AggregateMetrics& agg) {
  std::ofstream out(path);
  if (!out) throw Error("evalkit", "cannot write: " + path);
  out << "phrase,auc,eer\n";
  for (const auto& m : phrases) out << m.phrase << "," << fmt(m.auc) << "," << fmt(m.eer) << "\n";
  out << "ALL," << fmt(agg.mean_auc) << "," << fmt(agg.mean_eer) << "\n";
}

inline void write_curves_csv(const std::string& path, const std::vector<PhraseMetrics>& phrases,
                             const AggregateMetrics& agg) {
  std::ofstream out(path);
  if (!out) throw Error("evalkit", "cannot write: " + path);
  out << "phrase,threshold,far,frr\n";
  for (const auto& m : phrases)
    for (size_t k = 0; k < m.sweep.thresholds.size(); ++k)
      out << m.phrase << "," << fmt(m.sweep.thresholds[k]) << "," << fmt(m.sweep.far[k]) << ","
          << fmt(m.sweep.frr[k]) << "\n";
  for (size_t k = 0; k < agg.mean_det.thresholds.size(); ++k)
    out << "ALL," << fmt(agg.mean_det.thresholds[k]) << "," << fmt(agg.mean_det.far[k]) << ","
        << fmt(agg.mean_det.frr[k]) << "\n";
}

inline void write_histograms_csv(const std::string& path, const std::vector<ScoreSet>& scores) {
  std::ofstream out(path);
  if (!out) throw Error("evalkit", "cannot write: " + path);
  out << "phrase,bin_low,pos_prob,neg_prob\n";
  for (const auto& s : scores) {
    Histogram h = histogram(s);
    out << s.phrase << ",-1," << fmt(h.pos_underflow) << "," << fmt(h.neg_underflow) << "\n";
    for (size_t b = 0; b < 100; ++b)
      out << s.phrase << "," << fmt(0.01 * static_cast<double>(b)) << "," << fmt(h.pos[b]) << ","
          << fmt(h.neg[b]) << "\n";
    out << s.phrase << ",1," << fmt(h.pos_overflow) << "," << fmt(h.neg_overflow) << "\n";
  }
}

}  // namespace kws::evalkit
