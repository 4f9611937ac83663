#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "kws/encoder.hpp"
#include "kws/loss.hpp"

using namespace kws::loss;
using kws::Error;
using kws::Rng;
using kws::nd::Graph;
using kws::nd::Tensor;
using kws::nd::Var;

namespace {

// ---- test-side oracle: scalar cosines, naive log-sum-exp, plain loops ----

double cos_oracle(const double* a, const double* b, size_t d) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < d; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / std::max(std::sqrt(na) * std::sqrt(nb), 1e-8);
}

double lse_naive(const std::vector<double>& xs) {
  double s = 0.0;
  for (double v : xs) s += std::exp(v);
  return std::log(s);
}

// Brute-force GE2E over an [X*Y x D] embedding tensor: every centroid,
// every pairwise cosine, no matrix ops.
struct Ge2eOracle {
  std::vector<double> per_phrase;
  double batch_loss = 0.0;
};

Ge2eOracle ge2e_oracle(const Tensor& emb, size_t x, size_t y) {
  size_t d = emb.shape[1], half = y / 2;
  std::vector<std::vector<double>> centroids(x, std::vector<double>(d, 0.0));
  for (size_t i = 0; i < x; ++i) {
    for (size_t j = 0; j < y; j += 2)  // 0-based even = the paper's 1-based odd enrollment slots
      for (size_t k = 0; k < d; ++k) centroids[i][k] += emb.at(i * y + j, k);
    for (double& v : centroids[i]) v /= static_cast<double>(half);
  }
  Ge2eOracle out;
  for (size_t i = 0; i < x; ++i) {
    std::vector<double> pos, neg;
    for (size_t kp = 0; kp < x; ++kp)
      for (size_t j = 1; j < y; j += 2) {
        double c = cos_oracle(centroids[i].data(), &emb.data[(kp * y + j) * d], d);
        (kp == i ? pos : neg).push_back(c);
      }
    out.per_phrase.push_back(lse_naive(neg) - lse_naive(pos));
  }
  for (double v : out.per_phrase) out.batch_loss += v;
  out.batch_loss /= static_cast<double>(x);
  return out;
}

Tensor random_embeddings(size_t rows, size_t d, uint64_t seed) {
  Tensor t({rows, d});
  Rng rng(seed);
  t.fill_normal(rng);
  return t;
}

BatchEmbeddings make_batch(Graph& g, Tensor emb, size_t x, size_t y) {
  return BatchEmbeddings{g.param(std::move(emb)), x, y};
}

}  // namespace

TEST_CASE("centroids: two-point mean and constant rows") {
  Graph g;
  // X=1 is fine for centroids (the X>=2 rule applies to the loss)
  Tensor emb = Tensor::from({4, 2}, {1, 0,   // j=0 enroll
                                     9, 9,   // j=1 test (ignored)
                                     0, 1,   // j=2 enroll
                                     9, 9}); // j=3 test
  Var c = centroids(g, make_batch(g, emb, 1, 4));
  REQUIRE(c.value().shape == std::vector<size_t>{1, 2});
  REQUIRE(c.value().at(0, 0) == Catch::Approx(0.5));
  REQUIRE(c.value().at(0, 1) == Catch::Approx(0.5));

  Tensor same = Tensor::from({4, 2}, {3, -1, 0, 0, 3, -1, 0, 0});
  Var c2 = centroids(g, make_batch(g, same, 1, 4));
  REQUIRE(c2.value().at(0, 0) == Catch::Approx(3.0));
  REQUIRE(c2.value().at(0, 1) == Catch::Approx(-1.0));
}

TEST_CASE("centroids match the loop-and-average oracle") {
  Graph g;
  size_t x = 3, y = 6, d = 5;
  Tensor emb = random_embeddings(x * y, d, 404);
  Var c = centroids(g, make_batch(g, emb, x, y));
  for (size_t i = 0; i < x; ++i)
    for (size_t k = 0; k < d; ++k) {
      double acc = 0.0;
      for (size_t j = 0; j < y; j += 2) acc += emb.at(i * y + j, k);
      acc /= static_cast<double>(y / 2);
      REQUIRE(std::abs(c.value().at(i, k) - acc) < 1e-12);
    }
}

TEST_CASE("ge2e hand case: perfect positives and anti-aligned negatives give -2") {
  Graph g;
  // phrase 0 embeddings all point at (1,0); phrase 1 at (-1,0)
  Tensor emb({8, 2});
  for (size_t j = 0; j < 4; ++j) {
    emb.at(j, 0) = 1.0;
    emb.at(4 + j, 0) = -1.0;
  }
  Ge2eOutput out = ge2e_loss(g, make_batch(g, emb, 2, 4));
  for (Var lp : out.per_phrase) REQUIRE(lp.value().data[0] == Catch::Approx(-2.0).epsilon(1e-12));
  REQUIRE(out.batch_loss.value().data[0] == Catch::Approx(-2.0).epsilon(1e-12));
  REQUIRE(out.score_matrix.value().shape == std::vector<size_t>{2, 4});
}

TEST_CASE("ge2e hand case: single positive 0.9 and single negative 0.1 give -0.8") {
  // X=2, Y=2: each centroid is its phrase's single enrollment embedding.
  double a = std::acos(0.9), b = std::acos(0.1);
  double gph = b + a;  // direction of phrase 1's enrollment
  Tensor emb = Tensor::from({4, 2}, {
                                        1.0, 0.0,                    // c1
                                        std::cos(a), std::sin(a),    // t1: cos(c1,t1)=0.9
                                        std::cos(gph), std::sin(gph),// c2
                                        std::cos(b), std::sin(b),    // t2: cos(c1,t2)=0.1, cos(c2,t2)=0.9
                                    });
  Graph g;
  Ge2eOutput out = ge2e_loss(g, make_batch(g, emb, 2, 2));
  REQUIRE(out.per_phrase[0].value().data[0] == Catch::Approx(-0.8).epsilon(1e-9));
  REQUIRE(out.per_phrase[1].value().data[0] == Catch::Approx(-0.8).epsilon(1e-9));
  REQUIRE(out.batch_loss.value().data[0] == Catch::Approx(-0.8).epsilon(1e-9));
}

TEST_CASE("phrase-level score formula matches an independent log-sum-exp") {
  std::vector<double> pos{0.8, 0.6}, neg{0.2, 0.0, -0.1};
  double expected = lse_naive(neg) - lse_naive(pos);
  REQUIRE(ge2e_phrase_loss(pos, neg) == Catch::Approx(expected).epsilon(1e-12));
  REQUIRE_THROWS_AS(ge2e_phrase_loss({}, neg), Error);
}

TEST_CASE("ge2e matches the pairwise brute-force oracle on random batches") {
  Rng pick(777);
  for (int trial = 0; trial < 25; ++trial) {
    size_t x = 2 + pick.index(4);          // 2..5
    size_t y = 2 * (1 + pick.index(3));    // 2, 4, 6
    size_t d = 2 + pick.index(7);
    Tensor emb = random_embeddings(x * y, d, 1000 + trial);
    Graph g;
    Ge2eOutput out = ge2e_loss(g, make_batch(g, emb, x, y));
    Ge2eOracle oracle = ge2e_oracle(emb, x, y);
    for (size_t i = 0; i < x; ++i)
      REQUIRE(std::abs(out.per_phrase[i].value().data[0] - oracle.per_phrase[i]) < 1e-9);
    REQUIRE(std::abs(out.batch_loss.value().data[0] - oracle.batch_loss) < 1e-9);
  }
}

TEST_CASE("ge2e requires at least two phrases") {
  Graph g;
  Tensor emb = random_embeddings(4, 3, 5);
  REQUIRE_THROWS_AS(ge2e_loss(g, make_batch(g, emb, 1, 4)), Error);
}

TEST_CASE("ge2e permutation invariance") {
  size_t x = 4, y = 4, d = 6;
  Tensor emb = random_embeddings(x * y, d, 2024);
  Graph g;
  Ge2eOutput base = ge2e_loss(g, make_batch(g, emb, x, y));

  // swap phrase blocks 1 and 3
  Tensor permuted = emb;
  for (size_t j = 0; j < y; ++j)
    for (size_t k = 0; k < d; ++k) {
      permuted.at(1 * y + j, k) = emb.at(3 * y + j, k);
      permuted.at(3 * y + j, k) = emb.at(1 * y + j, k);
    }
  Graph g2;
  Ge2eOutput perm = ge2e_loss(g2, make_batch(g2, permuted, x, y));
  REQUIRE(perm.per_phrase[1].value().data[0] ==
          Catch::Approx(base.per_phrase[3].value().data[0]).epsilon(1e-12));
  REQUIRE(perm.per_phrase[3].value().data[0] ==
          Catch::Approx(base.per_phrase[1].value().data[0]).epsilon(1e-12));
  REQUIRE(perm.batch_loss.value().data[0] ==
          Catch::Approx(base.batch_loss.value().data[0]).epsilon(1e-12));

  // swap the two enrollment slots (j=0 and j=2) of phrase 0
  Tensor enroll_swap = emb;
  for (size_t k = 0; k < d; ++k) {
    enroll_swap.at(0, k) = emb.at(2, k);
    enroll_swap.at(2, k) = emb.at(0, k);
  }
  Graph g3;
  Ge2eOutput es = ge2e_loss(g3, make_batch(g3, enroll_swap, x, y));
  REQUIRE(es.per_phrase[0].value().data[0] ==
          Catch::Approx(base.per_phrase[0].value().data[0]).epsilon(1e-12));

  // swap the two test slots (j=1 and j=3) of phrase 0
  Tensor test_swap = emb;
  for (size_t k = 0; k < d; ++k) {
    test_swap.at(1, k) = emb.at(3, k);
    test_swap.at(3, k) = emb.at(1, k);
  }
  Graph g4;
  Ge2eOutput ts = ge2e_loss(g4, make_batch(g4, test_swap, x, y));
  REQUIRE(ts.per_phrase[0].value().data[0] ==
          Catch::Approx(base.per_phrase[0].value().data[0]).epsilon(1e-12));
}

TEST_CASE("ge2e scale invariance") {
  size_t x = 3, y = 4, d = 5;
  Tensor emb = random_embeddings(x * y, d, 31415);
  Graph g;
  double base = ge2e_loss(g, make_batch(g, emb, x, y)).batch_loss.value().data[0];
  for (double s : {0.01, 3.7, 250.0}) {
    Tensor scaled = emb;
    for (double& v : scaled.data) v *= s;
    Graph g2;
    double loss = ge2e_loss(g2, make_batch(g2, scaled, x, y)).batch_loss.value().data[0];
    REQUIRE(std::abs(loss - base) < 1e-9);
  }
}

TEST_CASE("score monotonicity: better positives lower the loss, better negatives raise it") {
  size_t x = 3, y = 4;
  Tensor scores({x, x * y / 2});
  Rng rng(6);
  for (double& v : scores.data) v = rng.uniform(-0.5, 0.9);
  std::vector<double> base = ge2e_losses_from_scores(scores, x, y);

  Tensor up = scores;
  up.at(1, 2) += 0.05;  // positive of phrase 1 (columns 2..3)
  REQUIRE(ge2e_losses_from_scores(up, x, y)[1] < base[1]);

  Tensor neg_up = scores;
  neg_up.at(1, 0) += 0.05;  // negative of phrase 1 (phrase 0's column)
  REQUIRE(ge2e_losses_from_scores(neg_up, x, y)[1] > base[1]);
}

TEST_CASE("ge2e lower bound at saturated scores") {
  // positives at +1 and negatives at -1: L -> (ln|n| - 1) - (ln|p| + 1)
  size_t x = 3, y = 6, half = y / 2;
  Tensor scores({x, x * half});
  for (size_t i = 0; i < x; ++i)
    for (size_t q = 0; q < x * half; ++q) scores.at(i, q) = (q / half == i) ? 1.0 : -1.0;
  std::vector<double> ls = ge2e_losses_from_scores(scores, x, y);
  double expected = (std::log(static_cast<double>((x - 1) * half)) - 1.0) -
                    (std::log(static_cast<double>(half)) + 1.0);
  for (double v : ls) REQUIRE(v == Catch::Approx(expected).epsilon(1e-12));
}

TEST_CASE("triplet loss: zero at satisfied margins, exact formula otherwise") {
  // all utterances of a phrase identical, phrases orthogonal:
  // d(a,p) = 0, d(a,n) = 1 >= margin, so every sampled triplet is 0.
  Graph g;
  Tensor emb({8, 2});
  for (size_t j = 0; j < 4; ++j) {
    emb.at(j, 0) = 2.0;       // phrase 0 -> (2, 0)
    emb.at(4 + j, 1) = 0.5;   // phrase 1 -> (0, 0.5)
  }
  TripletConfig cfg;  // margin 0.5
  Var l = triplet_loss(g, make_batch(g, emb, 2, 4), cfg, 99);
  REQUIRE(l.value().data[0] == 0.0);

  // hinge arithmetic: d_ap = 0.9, d_an = 0.1, margin 0.5 -> 1.3
  REQUIRE(std::max(0.0, 0.9 - 0.1 + 0.5) == Catch::Approx(1.3));
}

TEST_CASE("triplet loss matches an independent re-implementation exactly") {
  size_t x = 4, y = 6, d = 5;
  Tensor emb = random_embeddings(x * y, d, 555);
  uint64_t seed = 17;
  Graph g;
  TripletConfig cfg;
  cfg.margin = 0.3;
  double impl = triplet_loss(g, make_batch(g, emb, x, y), cfg, seed).value().data[0];

  // mirror the documented sampling scheme with the library rng, then do
  // all the arithmetic independently
  kws::Rng rng(kws::derive_seed(seed, 0x3a1b));
  double total = 0.0;
  for (size_t i = 0; i < x; ++i) {
    size_t ja = rng.index(y);
    size_t jp = rng.index(y - 1);
    if (jp >= ja) ++jp;
    size_t k = rng.index(x - 1);
    if (k >= i) ++k;
    size_t jn = rng.index(y);
    double d_ap = 1.0 - cos_oracle(&emb.data[(i * y + ja) * d], &emb.data[(i * y + jp) * d], d);
    double d_an = 1.0 - cos_oracle(&emb.data[(i * y + ja) * d], &emb.data[(k * y + jn) * d], d);
    total += std::max(0.0, d_ap - d_an + cfg.margin);
  }
  total /= static_cast<double>(x);
  REQUIRE(impl == Catch::Approx(total).epsilon(1e-12));

  REQUIRE_THROWS_AS(triplet_loss(g, make_batch(g, emb, 1, 4), cfg, 1), Error);
  TripletConfig bad;
  bad.margin = -0.1;
  REQUIRE_THROWS_AS(triplet_loss(g, make_batch(g, emb, x, y), bad, 1), Error);
}

TEST_CASE("ge2e gradient through a tiny LSTM passes the finite-difference check") {
  using namespace kws::encoder;
  LstmConfig cfg;
  cfg.hidden = 8;
  cfg.embed = 8;
  LstmParams p = init_lstm(cfg, 9);
  std::vector<kws::frontend::FeatureSequence> feats;
  for (size_t i = 0; i < 4; ++i) {
    kws::frontend::FeatureSequence f;
    f.frames = Tensor({6, 40});
    Rng rng(900 + i);
    f.frames.fill_normal(rng);
    feats.push_back(std::move(f));
  }
  std::vector<const kws::frontend::FeatureSequence*> ptrs;
  for (auto& f : feats) ptrs.push_back(&f);

  std::vector<Tensor> params;
  for (auto& np : p.named()) params.push_back(*np.tensor);
  auto fn = [&](Graph& g, const std::vector<Var>& leaves) {
    LstmVars vars = lstm_vars_from(cfg, leaves);
    Var emb = lstm_forward_graph(g, cfg, vars, ptrs);
    BatchEmbeddings be{emb, 2, 2};
    return ge2e_loss(g, be).batch_loss;
  };
  REQUIRE(kws::nd::finite_diff_check(fn, params) < 1e-4);
}
