#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "kws/common.hpp"
#include "kws/graph.hpp"

namespace kws::loss {

using nd::Graph;
using nd::Tensor;
using nd::Var;

// X*Y embeddings as one [X*Y x D] node, rows in (phrase, utterance)
// row-major order. The utterance slot j is 0-based: even j = enrollment,
// odd j = test (the paper's 1-based odd/even roles).
struct BatchEmbeddings {
  Var embeddings;  // [X*Y x D]
  size_t num_phrases = 0;     // X
  size_t utterances_per = 0;  // Y (even)

  void validate() const {
    if (num_phrases < 1 || utterances_per < 2 || utterances_per % 2 != 0)
      throw Error("loss", "BatchEmbeddings requires X >= 1 and even Y >= 2");
    const Tensor& e = embeddings.value();
    if (e.rank() != 2 || e.shape[0] != num_phrases * utterances_per)
      throw Error("loss", "BatchEmbeddings tensor must be [X*Y x D], got " + nd::shape_str(e.shape));
  }

  std::vector<size_t> enrollment_rows() const {
    std::vector<size_t> idx;
    for (size_t i = 0; i < num_phrases; ++i)
      for (size_t j = 0; j < utterances_per; j += 2) idx.push_back(i * utterances_per + j);
    return idx;
  }

  std::vector<size_t> test_rows() const {
    std::vector<size_t> idx;
    for (size_t i = 0; i < num_phrases; ++i)
      for (size_t j = 1; j < utterances_per; j += 2) idx.push_back(i * utterances_per + j);
    return idx;
  }
};

// Per-phrase mean of the Y/2 enrollment embeddings -> [X x D].
inline Var centroids(Graph& g, const BatchEmbeddings& batch) {
  batch.validate();
  (void)g;
  Var enroll = nd::select_rows(batch.embeddings, batch.enrollment_rows());
  return nd::group_row_mean(enroll, batch.utterances_per / 2);
}

struct Ge2eOutput {
  Var batch_loss;               // scalar; mean over phrases
  std::vector<Var> per_phrase;  // L(c_i), scalars
  Var centroid_matrix;          // [X x D]
  Var score_matrix;             // [X x X*Y/2] cosine(centroid_i, test_q)
};

// L(c_i) = lse(cos(c_i, negatives)) - lse(cos(c_i, positives)), where the
// positives are phrase i's test embeddings and the negatives everyone
// else's. One cosine_matrix call covers every (centroid, test) pair.
inline Ge2eOutput ge2e_loss(Graph& g, const BatchEmbeddings& batch) {
  batch.validate();
  if (batch.num_phrases < 2) throw Error("loss", "GE2E requires >= 2 phrases per batch");
  size_t x = batch.num_phrases, half = batch.utterances_per / 2;

  Ge2eOutput out;
  out.centroid_matrix = centroids(g, batch);
  Var tests = nd::select_rows(batch.embeddings, batch.test_rows());  // [X*half x D], phrase-major
  out.score_matrix = nd::cosine_matrix(out.centroid_matrix, tests);

  for (size_t i = 0; i < x; ++i) {
    Var row = nd::slice_rows(out.score_matrix, i, i + 1);  // [1 x X*half]
    Var pos = nd::slice_cols(row, i * half, (i + 1) * half);
    Var neg;
    if (i == 0) {
      neg = nd::slice_cols(row, half, x * half);
    } else if (i == x - 1) {
      neg = nd::slice_cols(row, 0, i * half);
    } else {
      Var left = nd::slice_cols(row, 0, i * half);
      Var right = nd::slice_cols(row, (i + 1) * half, x * half);
      neg = nd::concat_cols({left, right});
    }
    out.per_phrase.push_back(nd::sub(nd::log_sum_exp(neg), nd::log_sum_exp(pos)));
  }
  out.batch_loss = nd::mean(nd::concat(out.per_phrase));
  return out;
}

// Scalar reference for one phrase's loss given raw similarity scores;
// exposed so tests can probe score-level behavior directly.
inline double ge2e_phrase_loss(std::span<const double> positives, std::span<const double> negatives) {
  if (positives.empty() || negatives.empty())
    throw Error("loss", "ge2e_phrase_loss requires non-empty score sets");
  auto lse = [](std::span<const double> xs) {
    double m = xs[0];
    for (double v : xs) m = std::max(m, v);
    double s = 0.0;
    for (double v : xs) s += std::exp(v - m);
    return m + std::log(s);
  };
  return lse(negatives) - lse(positives);
}

// Per-phrase losses recomputed from an already-evaluated score matrix
// [X x X*Y/2]; used for perturbation-style checks.
inline std::vector<double> ge2e_losses_from_scores(const Tensor& scores, size_t num_phrases,
                                                   size_t utterances_per) {
  size_t half = utterances_per / 2;
  if (scores.rank() != 2 || scores.shape[0] != num_phrases || scores.shape[1] != num_phrases * half)
    throw Error("loss", "score matrix must be [X x X*Y/2]");
  std::vector<double> out;
  for (size_t i = 0; i < num_phrases; ++i) {
    std::vector<double> pos, neg;
    for (size_t q = 0; q < num_phrases * half; ++q) {
      double s = scores.at(i, q);
      (q / half == i ? pos : neg).push_back(s);
    }
    out.push_back(ge2e_phrase_loss(pos, neg));
  }
  return out;
}

struct TripletConfig {
  double margin = 0.5;

  void validate() const {
    if (margin < 0.0) throw Error("loss", "triplet margin must be >= 0");
  }
};

// Baseline objective: one (anchor, positive, negative) triple per phrase,
// hinge on cosine distance d = 1 - cos.
inline Var triplet_loss(Graph& g, const BatchEmbeddings& batch, const TripletConfig& cfg, uint64_t seed) {
  batch.validate();
  cfg.validate();
  if (batch.num_phrases < 2) throw Error("loss", "triplet loss requires >= 2 phrases per batch");
  size_t x = batch.num_phrases, y = batch.utterances_per;
  Rng rng(derive_seed(seed, 0x3a1b));
  std::vector<Var> terms;
  for (size_t i = 0; i < x; ++i) {
    size_t ja = rng.index(y);
    size_t jp = rng.index(y - 1);
    if (jp >= ja) ++jp;
    size_t k = rng.index(x - 1);
    if (k >= i) ++k;
    size_t jn = rng.index(y);
    Var anchor = nd::slice_rows(batch.embeddings, i * y + ja, i * y + ja + 1);
    Var pos = nd::slice_rows(batch.embeddings, i * y + jp, i * y + jp + 1);
    Var neg = nd::slice_rows(batch.embeddings, k * y + jn, k * y + jn + 1);
    Var d_ap = nd::add_scalar(nd::scale(nd::cosine_matrix(anchor, pos), -1.0), 1.0);
    Var d_an = nd::add_scalar(nd::scale(nd::cosine_matrix(anchor, neg), -1.0), 1.0);
    terms.push_back(nd::relu(nd::add_scalar(nd::sub(d_ap, d_an), cfg.margin)));
  }
  return nd::mean(nd::concat(terms));
}

}  // namespace kws::loss
