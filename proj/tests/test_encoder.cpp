#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>

#include "kws/encoder.hpp"

using namespace kws::encoder;
using kws::Error;
using kws::Rng;
using kws::nd::Graph;
using kws::nd::Tensor;
using kws::nd::Var;

namespace {

kws::frontend::FeatureSequence random_features(size_t t, uint64_t seed) {
  kws::frontend::FeatureSequence f;
  f.frames = Tensor({t, 40});
  Rng rng(seed);
  f.frames.fill_normal(rng);
  return f;
}

}  // namespace

TEST_CASE("zero-weight LSTM emits a zero embedding") {
  LstmConfig cfg;
  cfg.hidden = 8;
  cfg.embed = 4;
  LstmParams p = init_lstm(cfg, 1);
  for (auto& np : p.named())
    for (double& v : np.tensor->data) v = 0.0;
  std::vector<double> e = lstm_forward(p, random_features(7, 2));
  REQUIRE(e.size() == 4);
  for (double v : e) REQUIRE(v == 0.0);
}

TEST_CASE("embedding length is the configured D regardless of T") {
  LstmConfig cfg;
  cfg.hidden = 6;
  cfg.embed = 5;
  LstmParams p = init_lstm(cfg, 3);
  for (size_t t : {1, 4, 31}) REQUIRE(lstm_forward(p, random_features(t, t)).size() == 5);

  ConformerConfig cc;
  cc.model_dim = 8;
  cc.heads = 2;
  cc.blocks = 1;
  cc.kernel = 3;
  cc.embed = 5;
  ConformerParams cp = init_conformer(cc, 4);
  for (size_t t : {1, 4, 17}) REQUIRE(conformer_forward(cp, random_features(t, t)).size() == 5);
}

TEST_CASE("init_params: seeded, bounded, forget-gate bias one") {
  LstmConfig cfg;
  LstmParams a = init_lstm(cfg, 42), b = init_lstm(cfg, 42), c = init_lstm(cfg, 43);
  REQUIRE(a.layer[0].wx.data == b.layer[0].wx.data);
  REQUIRE(a.layer[0].wx.data != c.layer[0].wx.data);

  // forget-gate slice is exactly 1, everything else in the bias is 0
  size_t h = cfg.hidden;
  for (size_t l = 0; l < cfg.layers; ++l)
    for (size_t j = 0; j < 4 * h; ++j)
      REQUIRE(a.layer[l].b.data[j] == ((j >= h && j < 2 * h) ? 1.0 : 0.0));

  // weight magnitudes bounded by 1/sqrt(fan_in)
  auto check_bound = [](const Tensor& w, size_t fan_in) {
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double v : w.data) REQUIRE(std::abs(v) <= bound);
  };
  check_bound(a.layer[0].wx, cfg.input_dim);
  check_bound(a.layer[1].wx, cfg.hidden);
  check_bound(a.layer[0].wh, cfg.hidden);
  check_bound(a.proj_w, cfg.hidden);
}

TEST_CASE("streaming equals whole-sequence forward for the LSTM") {
  for (uint64_t seed = 1; seed <= 20; ++seed) {
    LstmConfig cfg;
    Rng pick(seed);
    cfg.hidden = 4 + pick.index(12);
    cfg.embed = 2 + pick.index(10);
    LstmParams p = init_lstm(cfg, seed * 7 + 1);
    for (size_t t : {1, 5, 98}) {
      kws::frontend::FeatureSequence f = random_features(t, seed * 131 + t);
      std::vector<double> whole = lstm_forward(p, f);
      LstmState s = make_lstm_state(p);
      for (size_t ti = 0; ti < t; ++ti)
        lstm_step(p, s, std::span<const double>(f.frames.data.data() + ti * 40, 40));
      std::vector<double> streamed = lstm_emit(p, s);
      REQUIRE(streamed.size() == whole.size());
      for (size_t i = 0; i < whole.size(); ++i)
        REQUIRE(std::abs(streamed[i] - whole[i]) < 1e-9);
    }
  }
}

TEST_CASE("LSTM graph forward matches the plain path") {
  LstmConfig cfg;
  cfg.hidden = 10;
  cfg.embed = 6;
  LstmParams p = init_lstm(cfg, 5);
  std::vector<kws::frontend::FeatureSequence> feats;
  for (size_t i = 0; i < 3; ++i) feats.push_back(random_features(9, 100 + i));
  std::vector<const kws::frontend::FeatureSequence*> ptrs{&feats[0], &feats[1], &feats[2]};

  Graph g;
  LstmVars vars = lift(g, p);
  Var emb = lstm_forward_graph(g, cfg, vars, ptrs);
  REQUIRE(emb.value().shape == std::vector<size_t>{3, 6});
  for (size_t i = 0; i < 3; ++i) {
    std::vector<double> plain = lstm_forward(p, feats[i]);
    for (size_t j = 0; j < 6; ++j) REQUIRE(std::abs(emb.value().at(i, j) - plain[j]) < 1e-12);
  }
}

TEST_CASE("LSTM stream_step rejects wrong frame width; reset zeroes state") {
  LstmConfig cfg;
  cfg.hidden = 4;
  cfg.embed = 3;
  LstmParams p = init_lstm(cfg, 2);
  LstmState s = make_lstm_state(p);
  std::vector<double> bad(39, 0.0);
  REQUIRE_THROWS_AS(lstm_step(p, s, bad), Error);

  std::vector<double> frame(40, 0.5);
  lstm_step(p, s, frame);
  s.reset();
  for (const auto& h : s.h)
    for (double v : h) REQUIRE(v == 0.0);
  REQUIRE(s.frames_seen == 0);

  // zero-weight model: emit zero after zero frames
  for (auto& np : p.named())
    for (double& v : np.tensor->data) v = 0.0;
  LstmState z = make_lstm_state(p);
  std::vector<double> zero_frame(40, 0.0);
  lstm_step(p, z, zero_frame);
  for (double v : lstm_emit(p, z)) REQUIRE(v == 0.0);
}

TEST_CASE("conformer graph forward matches the plain path") {
  ConformerConfig cfg;
  cfg.model_dim = 8;
  cfg.heads = 2;
  cfg.blocks = 2;
  cfg.kernel = 3;
  cfg.embed = 4;
  ConformerParams p = init_conformer(cfg, 11);
  kws::frontend::FeatureSequence f = random_features(7, 200);

  std::vector<double> plain = conformer_forward(p, f);
  Graph g;
  ConformerVars vars = lift(g, p);
  Var emb = conformer_forward_graph(g, cfg, vars, f);
  REQUIRE(emb.value().shape == std::vector<size_t>{1, 4});
  for (size_t j = 0; j < 4; ++j) REQUIRE(std::abs(emb.value().data[j] - plain[j]) < 1e-12);
}

TEST_CASE("conformer embedding is order-sensitive with PE, invariant at kernel 1 without") {
  kws::frontend::FeatureSequence f = random_features(6, 300);
  kws::frontend::FeatureSequence permuted = f;
  // reverse frame order
  for (size_t t = 0; t < 6; ++t)
    for (size_t d = 0; d < 40; ++d) permuted.frames.at(t, d) = f.frames.at(5 - t, d);

  ConformerConfig with_pe;
  with_pe.model_dim = 8;
  with_pe.heads = 2;
  with_pe.blocks = 1;
  with_pe.kernel = 3;
  with_pe.embed = 4;
  ConformerParams p1 = init_conformer(with_pe, 21);
  std::vector<double> a = conformer_forward(p1, f);
  std::vector<double> b = conformer_forward(p1, permuted);
  double diff = 0.0;
  for (size_t i = 0; i < a.size(); ++i) diff += std::abs(a[i] - b[i]);
  REQUIRE(diff > 1e-6);  // positional encoding breaks permutation symmetry

  ConformerConfig no_pe = with_pe;
  no_pe.positional_encoding = false;
  no_pe.kernel = 1;
  ConformerParams p2 = init_conformer(no_pe, 21);
  std::vector<double> c = conformer_forward(p2, f);
  std::vector<double> d = conformer_forward(p2, permuted);
  for (size_t i = 0; i < c.size(); ++i) REQUIRE(c[i] == Catch::Approx(d[i]).margin(1e-10));
}

TEST_CASE("conformer streaming window arithmetic") {
  ConformerConfig cfg;
  cfg.model_dim = 8;
  cfg.heads = 2;
  cfg.blocks = 1;
  cfg.kernel = 3;
  cfg.embed = 4;
  Encoder enc = Encoder::make_conformer(cfg, 31);
  StreamState s = StreamState::make(enc, 98, 10);
  kws::frontend::FeatureSequence f = random_features(108, 400);
  size_t emitted = 0;
  for (size_t t = 0; t < 108; ++t) {
    auto e = s.step(enc, std::span<const double>(f.frames.data.data() + t * 40, 40));
    if (e) ++emitted;
  }
  REQUIRE(emitted == 2);  // at frames 98 and 108

  // window content equals forward() on the last 98 frames
  StreamState s2 = StreamState::make(enc, 20, 5);
  std::optional<std::vector<double>> last;
  for (size_t t = 0; t < 25; ++t) {
    auto e = s2.step(enc, std::span<const double>(f.frames.data.data() + t * 40, 40));
    if (e) last = e;
  }
  REQUIRE(last.has_value());
  kws::frontend::FeatureSequence tail;
  tail.frames = Tensor({20, 40});
  std::copy(f.frames.data.begin() + 5 * 40, f.frames.data.begin() + 25 * 40, tail.frames.data.begin());
  std::vector<double> direct = enc.forward(tail);
  for (size_t i = 0; i < direct.size(); ++i) REQUIRE((*last)[i] == Catch::Approx(direct[i]).margin(1e-12));
}

TEST_CASE("gradients flow through the LSTM under a scalar loss") {
  LstmConfig cfg;
  cfg.hidden = 8;
  cfg.embed = 8;
  LstmParams p = init_lstm(cfg, 77);
  std::vector<kws::frontend::FeatureSequence> feats;
  for (size_t i = 0; i < 2; ++i) feats.push_back(random_features(6, 500 + i));
  std::vector<const kws::frontend::FeatureSequence*> ptrs{&feats[0], &feats[1]};

  std::vector<Tensor> params;
  for (auto& np : p.named()) params.push_back(*np.tensor);
  Tensor w({2, 8});
  Rng rng(9);
  w.fill_normal(rng);

  auto fn = [&](Graph& g, const std::vector<Var>& leaves) {
    LstmVars vars = lstm_vars_from(cfg, leaves);
    Var emb = lstm_forward_graph(g, cfg, vars, ptrs);
    return kws::nd::sum(kws::nd::mul(emb, g.constant(w)));
  };
  REQUIRE(kws::nd::finite_diff_check(fn, params) < 1e-4);
}

TEST_CASE("gradients flow through the conformer under a scalar loss") {
  ConformerConfig cfg;
  cfg.model_dim = 8;
  cfg.heads = 2;
  cfg.blocks = 1;
  cfg.kernel = 3;
  cfg.embed = 4;
  ConformerParams p = init_conformer(cfg, 88);
  kws::frontend::FeatureSequence f = random_features(5, 600);

  std::vector<Tensor> params;
  for (auto& np : p.named()) params.push_back(*np.tensor);
  Tensor w({1, 4});
  Rng rng(10);
  w.fill_normal(rng);

  auto fn = [&](Graph& g, const std::vector<Var>& leaves) {
    ConformerVars vars = conformer_vars_from(cfg, leaves);
    Var emb = conformer_forward_graph(g, cfg, vars, f);
    return kws::nd::sum(kws::nd::mul(emb, g.constant(w)));
  };
  // h = 1e-4: the deep LN/attention stack makes smaller steps roundoff
  // dominated rather than more accurate.
  REQUIRE(kws::nd::finite_diff_check(fn, params, 1e-4) < 1e-4);
}

TEST_CASE("checkpoint round trip preserves both architectures exactly") {
  const char* path = "kws_test_ckpt.kwsm";
  {
    Encoder e = Encoder::make_lstm(LstmConfig{40, 12, 3, 8}, 3);
    save_encoder(path, e);
    Encoder back = load_encoder(path);
    REQUIRE(back.arch() == Arch::lstm);
    REQUIRE(back.checksum() == e.checksum());
    kws::frontend::FeatureSequence f = random_features(9, 700);
    REQUIRE(back.forward(f) == e.forward(f));
  }
  {
    ConformerConfig cfg;
    cfg.model_dim = 8;
    cfg.heads = 2;
    cfg.blocks = 1;
    cfg.kernel = 3;
    cfg.embed = 6;
    Encoder e = Encoder::make_conformer(cfg, 4);
    save_encoder(path, e);
    Encoder back = load_encoder(path);
    REQUIRE(back.arch() == Arch::conformer);
    REQUIRE(back.checksum() == e.checksum());
    kws::frontend::FeatureSequence f = random_features(9, 800);
    REQUIRE(back.forward(f) == e.forward(f));
  }
  std::remove(path);
}

TEST_CASE("config validation") {
  ConformerConfig bad;
  bad.model_dim = 10;
  bad.heads = 4;  // not divisible
  REQUIRE_THROWS_AS(init_conformer(bad, 1), Error);
  bad.model_dim = 8;
  bad.kernel = 4;  // even kernel
  REQUIRE_THROWS_AS(init_conformer(bad, 1), Error);
  REQUIRE_THROWS_AS(StreamState::make(Encoder::make_lstm(LstmConfig{}, 1), 0, 1), Error);
}
