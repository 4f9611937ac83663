#pragma once

#include <cmath>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "kws/checkpoint.hpp"
#include "kws/common.hpp"
#include "kws/features.hpp"
#include "kws/graph.hpp"
#include "kws/tensor.hpp"

namespace kws::encoder {

using nd::Graph;
using nd::Tensor;
using nd::Var;

struct NamedParam {
  std::string name;
  Tensor* tensor;
};

// ---------------------------------------------------------------- LSTM

struct LstmConfig {
  size_t input_dim = 40;
  size_t hidden = 64;
  size_t layers = 3;
  size_t embed = 64;

  void validate() const {
    if (input_dim < 1 || hidden < 1 || layers < 1 || embed < 1)
      throw Error("encoder", "LstmConfig dimensions must be >= 1");
  }
};

// Gate order along the 4H axis: input, forget, cell candidate, output.
struct LstmParams {
  LstmConfig cfg;
  struct Layer {
    Tensor wx;  // [4H x in]
    Tensor wh;  // [4H x H]
    Tensor b;   // [4H]
  };
  std::vector<Layer> layer;
  Tensor proj_w;  // [D x H]
  Tensor proj_b;  // [D]

  std::vector<NamedParam> named() {
    std::vector<NamedParam> out;
    for (size_t l = 0; l < layer.size(); ++l) {
      std::string p = "lstm.l" + std::to_string(l) + ".";
      out.push_back({p + "wx", &layer[l].wx});
      out.push_back({p + "wh", &layer[l].wh});
      out.push_back({p + "b", &layer[l].b});
    }
    out.push_back({"proj.w", &proj_w});
    out.push_back({"proj.b", &proj_b});
    return out;
  }
};

inline LstmParams init_lstm(const LstmConfig& cfg, uint64_t seed) {
  cfg.validate();
  LstmParams p;
  p.cfg = cfg;
  Rng rng(derive_seed(seed, 0x15731));
  size_t h = cfg.hidden;
  for (size_t l = 0; l < cfg.layers; ++l) {
    size_t in = l == 0 ? cfg.input_dim : h;
    LstmParams::Layer layer;
    double sx = 1.0 / std::sqrt(static_cast<double>(in));
    double sh = 1.0 / std::sqrt(static_cast<double>(h));
    layer.wx = Tensor({4 * h, in});
    layer.wx.fill_uniform(rng, -sx, sx);
    layer.wh = Tensor({4 * h, h});
    layer.wh.fill_uniform(rng, -sh, sh);
    layer.b = Tensor({4 * h});
    for (size_t j = h; j < 2 * h; ++j) layer.b.data[j] = 1.0;  // forget gate
    p.layer.push_back(std::move(layer));
  }
  double sp = 1.0 / std::sqrt(static_cast<double>(h));
  p.proj_w = Tensor({cfg.embed, h});
  p.proj_w.fill_uniform(rng, -sp, sp);
  p.proj_b = Tensor({cfg.embed});
  return p;
}

// Streaming state: per-layer hidden and cell vectors.
struct LstmState {
  std::vector<std::vector<double>> h, c;
  size_t frames_seen = 0;

  void reset() {
    for (auto& v : h) std::fill(v.begin(), v.end(), 0.0);
    for (auto& v : c) std::fill(v.begin(), v.end(), 0.0);
    frames_seen = 0;
  }
};

inline LstmState make_lstm_state(const LstmParams& p) {
  LstmState s;
  s.h.assign(p.cfg.layers, std::vector<double>(p.cfg.hidden, 0.0));
  s.c.assign(p.cfg.layers, std::vector<double>(p.cfg.hidden, 0.0));
  return s;
}

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// One recurrent step for one layer; `x` has the layer's input width.
inline void lstm_cell(const LstmParams::Layer& lp, size_t h, std::span<const double> x,
                      std::vector<double>& hv, std::vector<double>& cv) {
  size_t in = x.size();
  std::vector<double> gate(4 * h);
  for (size_t r = 0; r < 4 * h; ++r) {
    const double* wx = lp.wx.data.data() + r * in;
    double acc = 0.0;
    for (size_t k = 0; k < in; ++k) acc += x[k] * wx[k];
    const double* wh = lp.wh.data.data() + r * h;
    double acc_h = 0.0;
    for (size_t k = 0; k < h; ++k) acc_h += hv[k] * wh[k];
    gate[r] = (acc + acc_h) + lp.b.data[r];
  }
  for (size_t j = 0; j < h; ++j) {
    double ig = sigmoid(gate[j]);
    double fg = sigmoid(gate[h + j]);
    double gg = std::tanh(gate[2 * h + j]);
    double og = sigmoid(gate[3 * h + j]);
    cv[j] = fg * cv[j] + ig * gg;
    hv[j] = og * std::tanh(cv[j]);
  }
}

}  // namespace detail

// Consume one 40-dim frame; the projected top hidden state after any
// number of steps equals forward() on the frames consumed so far.
inline void lstm_step(const LstmParams& p, LstmState& s, std::span<const double> frame) {
  if (frame.size() != p.cfg.input_dim)
    throw Error("encoder", "stream frame dimension " + std::to_string(frame.size()) + " != " +
                               std::to_string(p.cfg.input_dim));
  std::vector<double> x(frame.begin(), frame.end());
  for (size_t l = 0; l < p.cfg.layers; ++l) {
    detail::lstm_cell(p.layer[l], p.cfg.hidden, x, s.h[l], s.c[l]);
    x = s.h[l];
  }
  ++s.frames_seen;
}

inline std::vector<double> lstm_emit(const LstmParams& p, const LstmState& s) {
  size_t d = p.cfg.embed, h = p.cfg.hidden;
  const auto& top = s.h.back();
  std::vector<double> e(d);
  for (size_t r = 0; r < d; ++r) {
    const double* w = p.proj_w.data.data() + r * h;
    double acc = 0.0;
    for (size_t k = 0; k < h; ++k) acc += top[k] * w[k];
    e[r] = acc + p.proj_b.data[r];
  }
  return e;
}

// Whole-sequence forward; final top-layer hidden state projected to the
// embedding. Written as its own loop so the streaming path has an
// independent reference to agree with.
inline std::vector<double> lstm_forward(const LstmParams& p, const frontend::FeatureSequence& f) {
  if (f.dim() != p.cfg.input_dim)
    throw Error("encoder", "feature dimension " + std::to_string(f.dim()) + " != " +
                               std::to_string(p.cfg.input_dim));
  size_t t = f.num_frames(), h = p.cfg.hidden;
  std::vector<std::vector<double>> hv(p.cfg.layers, std::vector<double>(h, 0.0));
  std::vector<std::vector<double>> cv(p.cfg.layers, std::vector<double>(h, 0.0));
  std::vector<double> x;
  for (size_t ti = 0; ti < t; ++ti) {
    x.assign(f.frames.data.data() + ti * f.dim(), f.frames.data.data() + (ti + 1) * f.dim());
    for (size_t l = 0; l < p.cfg.layers; ++l) {
      detail::lstm_cell(p.layer[l], h, x, hv[l], cv[l]);
      x = hv[l];
    }
  }
  size_t d = p.cfg.embed;
  std::vector<double> e(d);
  for (size_t r = 0; r < d; ++r) {
    const double* w = p.proj_w.data.data() + r * h;
    double acc = 0.0;
    for (size_t k = 0; k < h; ++k) acc += hv.back()[k] * w[k];
    e[r] = acc + p.proj_b.data[r];
  }
  return e;
}

// Graph (training) path: all utterances in the batch share one fixed
// length, so each time step is a [B x 40] constant.
struct LstmVars {
  struct Layer {
    Var wx, wh, b;
  };
  std::vector<Layer> layer;
  Var proj_w, proj_b;
  std::vector<Var> all;  // named() order
};

inline LstmVars lift(Graph& g, const LstmParams& p) {
  LstmVars v;
  for (const auto& l : p.layer) {
    LstmVars::Layer lv{g.param(l.wx), g.param(l.wh), g.param(l.b)};
    v.layer.push_back(lv);
    v.all.insert(v.all.end(), {lv.wx, lv.wh, lv.b});
  }
  v.proj_w = g.param(p.proj_w);
  v.proj_b = g.param(p.proj_b);
  v.all.push_back(v.proj_w);
  v.all.push_back(v.proj_b);
  return v;
}

// Rebuild the typed view from a flat leaf list in named() order; used by
// gradient checks that own the leaves.
inline LstmVars lstm_vars_from(const LstmConfig& cfg, const std::vector<Var>& leaves) {
  if (leaves.size() != cfg.layers * 3 + 2)
    throw Error("encoder", "lstm_vars_from: wrong leaf count");
  LstmVars v;
  v.all = leaves;
  for (size_t l = 0; l < cfg.layers; ++l)
    v.layer.push_back({leaves[3 * l], leaves[3 * l + 1], leaves[3 * l + 2]});
  v.proj_w = leaves[cfg.layers * 3];
  v.proj_b = leaves[cfg.layers * 3 + 1];
  return v;
}

inline Var lstm_forward_graph(Graph& g, const LstmConfig& cfg, const LstmVars& v,
                              const std::vector<const frontend::FeatureSequence*>& batch) {
  if (batch.empty()) throw Error("encoder", "empty batch");
  size_t t = batch[0]->num_frames(), b = batch.size(), h = cfg.hidden;
  for (const auto* f : batch)
    if (f->num_frames() != t || f->dim() != cfg.input_dim)
      throw Error("encoder", "batch features must share shape [T x input_dim]");

  std::vector<Var> hs(cfg.layers), cs(cfg.layers);
  for (size_t l = 0; l < cfg.layers; ++l) {
    hs[l] = g.constant(Tensor({b, h}));
    cs[l] = g.constant(Tensor({b, h}));
  }
  for (size_t ti = 0; ti < t; ++ti) {
    Tensor xt({b, cfg.input_dim});
    for (size_t bi = 0; bi < b; ++bi)
      for (size_t k = 0; k < cfg.input_dim; ++k) xt.at(bi, k) = batch[bi]->frames.at(ti, k);
    Var x = g.constant(std::move(xt));
    for (size_t l = 0; l < cfg.layers; ++l) {
      Var gates = nd::add_row(nd::add(nd::matmul_nt(x, v.layer[l].wx), nd::matmul_nt(hs[l], v.layer[l].wh)),
                              v.layer[l].b);
      Var ig = nd::sigmoid(nd::slice_cols(gates, 0, h));
      Var fg = nd::sigmoid(nd::slice_cols(gates, h, 2 * h));
      Var gg = nd::tanh(nd::slice_cols(gates, 2 * h, 3 * h));
      Var og = nd::sigmoid(nd::slice_cols(gates, 3 * h, 4 * h));
      cs[l] = nd::add(nd::mul(fg, cs[l]), nd::mul(ig, gg));
      hs[l] = nd::mul(og, nd::tanh(cs[l]));
      x = hs[l];
    }
  }
  return nd::add_row(nd::matmul_nt(hs.back(), v.proj_w), v.proj_b);  // [B x D]
}

// ------------------------------------------------------ conformer-lite

struct ConformerConfig {
  size_t input_dim = 40;
  size_t model_dim = 64;
  size_t heads = 4;
  size_t blocks = 2;
  size_t kernel = 7;
  size_t ffn_mult = 2;
  size_t embed = 64;
  bool positional_encoding = true;

  void validate() const {
    if (input_dim < 1 || model_dim < 1 || heads < 1 || blocks < 1 || embed < 1 || ffn_mult < 1)
      throw Error("encoder", "ConformerConfig dimensions must be >= 1");
    if (model_dim % heads != 0) throw Error("encoder", "model_dim must be divisible by heads");
    if (kernel % 2 == 0) throw Error("encoder", "conv kernel width must be odd");
  }
};

struct ConformerParams {
  ConformerConfig cfg;
  Tensor in_w, in_b;  // [M x 40], [M]
  struct Block {
    Tensor ln1_g, ln1_b, ffn1_w1, ffn1_b1, ffn1_w2, ffn1_b2;
    Tensor ln2_g, ln2_b, wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln3_g, ln3_b, conv_w, conv_b;  // [K x M], [M]
    Tensor ln4_g, ln4_b, ffn2_w1, ffn2_b1, ffn2_w2, ffn2_b2;
  };
  std::vector<Block> block;
  Tensor ln_out_g, ln_out_b;
  Tensor out_w, out_b;  // [D x M], [D]

  std::vector<NamedParam> named() {
    std::vector<NamedParam> out{{"in.w", &in_w}, {"in.b", &in_b}};
    for (size_t i = 0; i < block.size(); ++i) {
      std::string p = "block" + std::to_string(i) + ".";
      Block& bl = block[i];
      out.insert(out.end(), {{p + "ln1.g", &bl.ln1_g},   {p + "ln1.b", &bl.ln1_b},
                             {p + "ffn1.w1", &bl.ffn1_w1}, {p + "ffn1.b1", &bl.ffn1_b1},
                             {p + "ffn1.w2", &bl.ffn1_w2}, {p + "ffn1.b2", &bl.ffn1_b2},
                             {p + "ln2.g", &bl.ln2_g},   {p + "ln2.b", &bl.ln2_b},
                             {p + "att.wq", &bl.wq},     {p + "att.bq", &bl.bq},
                             {p + "att.wk", &bl.wk},     {p + "att.bk", &bl.bk},
                             {p + "att.wv", &bl.wv},     {p + "att.bv", &bl.bv},
                             {p + "att.wo", &bl.wo},     {p + "att.bo", &bl.bo},
                             {p + "ln3.g", &bl.ln3_g},   {p + "ln3.b", &bl.ln3_b},
                             {p + "conv.w", &bl.conv_w}, {p + "conv.b", &bl.conv_b},
                             {p + "ln4.g", &bl.ln4_g},   {p + "ln4.b", &bl.ln4_b},
                             {p + "ffn2.w1", &bl.ffn2_w1}, {p + "ffn2.b1", &bl.ffn2_b1},
                             {p + "ffn2.w2", &bl.ffn2_w2}, {p + "ffn2.b2", &bl.ffn2_b2}});
    }
    out.insert(out.end(),
               {{"ln_out.g", &ln_out_g}, {"ln_out.b", &ln_out_b}, {"out.w", &out_w}, {"out.b", &out_b}});
    return out;
  }
};

inline ConformerParams init_conformer(const ConformerConfig& cfg, uint64_t seed) {
  cfg.validate();
  ConformerParams p;
  p.cfg = cfg;
  Rng rng(derive_seed(seed, 0xc04f));
  size_t m = cfg.model_dim, f = cfg.ffn_mult * m;
  auto mat = [&rng](size_t rows, size_t cols) {
    Tensor t({rows, cols});
    double s = 1.0 / std::sqrt(static_cast<double>(cols));
    t.fill_uniform(rng, -s, s);
    return t;
  };
  auto ones = [](size_t n) { return Tensor({n}, 1.0); };
  auto zeros = [](size_t n) { return Tensor({n}); };

  p.in_w = mat(m, cfg.input_dim);
  p.in_b = zeros(m);
  for (size_t i = 0; i < cfg.blocks; ++i) {
    ConformerParams::Block bl;
    bl.ln1_g = ones(m); bl.ln1_b = zeros(m);
    bl.ffn1_w1 = mat(f, m); bl.ffn1_b1 = zeros(f);
    bl.ffn1_w2 = mat(m, f); bl.ffn1_b2 = zeros(m);
    bl.ln2_g = ones(m); bl.ln2_b = zeros(m);
    bl.wq = mat(m, m); bl.bq = zeros(m);
    bl.wk = mat(m, m); bl.bk = zeros(m);
    bl.wv = mat(m, m); bl.bv = zeros(m);
    bl.wo = mat(m, m); bl.bo = zeros(m);
    bl.ln3_g = ones(m); bl.ln3_b = zeros(m);
    bl.conv_w = Tensor({cfg.kernel, m});
    double sc = 1.0 / std::sqrt(static_cast<double>(cfg.kernel));
    bl.conv_w.fill_uniform(rng, -sc, sc);
    bl.conv_b = zeros(m);
    bl.ln4_g = ones(m); bl.ln4_b = zeros(m);
    bl.ffn2_w1 = mat(f, m); bl.ffn2_b1 = zeros(f);
    bl.ffn2_w2 = mat(m, f); bl.ffn2_b2 = zeros(m);
    p.block.push_back(std::move(bl));
  }
  p.ln_out_g = ones(m);
  p.ln_out_b = zeros(m);
  p.out_w = mat(cfg.embed, m);
  p.out_b = zeros(cfg.embed);
  return p;
}

inline Tensor sinusoidal_pe(size_t t, size_t m) {
  Tensor pe({t, m});
  for (size_t ti = 0; ti < t; ++ti)
    for (size_t j = 0; j < m; ++j) {
      double exponent = static_cast<double>(2 * (j / 2)) / static_cast<double>(m);
      double angle = static_cast<double>(ti) / std::pow(10000.0, exponent);
      pe.at(ti, j) = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  return pe;
}

namespace detail {

inline Tensor linear_nt(const Tensor& x, const Tensor& w, const Tensor& b) {
  size_t r = x.shape[0], k = x.shape[1], n = w.shape[0];
  Tensor out({r, n});
  nd::gemm_nt(x.data.data(), r, k, w.data.data(), n, out.data.data());
  for (size_t i = 0; i < r; ++i)
    for (size_t j = 0; j < n; ++j) out.at(i, j) += b.data[j];
  return out;
}

inline Tensor layer_norm_plain(const Tensor& x, const Tensor& gm, const Tensor& bt, double eps = 1e-5) {
  size_t r = x.shape[0], c = x.shape[1];
  Tensor out({r, c});
  for (size_t i = 0; i < r; ++i) {
    const double* row = x.data.data() + i * c;
    double mu = 0.0;
    for (size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    double is = 1.0 / std::sqrt(var + eps);
    for (size_t j = 0; j < c; ++j) out.at(i, j) = gm.data[j] * ((row[j] - mu) * is) + bt.data[j];
  }
  return out;
}

inline void softmax_rows_plain(Tensor& x) {
  size_t r = x.shape[0], c = x.shape[1];
  for (size_t i = 0; i < r; ++i) {
    double* row = x.data.data() + i * c;
    double m = row[0];
    for (size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (size_t j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - m);
      s += row[j];
    }
    double inv = 1.0 / s;
    for (size_t j = 0; j < c; ++j) row[j] *= inv;
  }
}

inline Tensor slice_cols_plain(const Tensor& x, size_t c0, size_t c1) {
  size_t r = x.shape[0], c = x.shape[1], w = c1 - c0;
  Tensor out({r, w});
  for (size_t i = 0; i < r; ++i)
    for (size_t j = 0; j < w; ++j) out.at(i, j) = x.at(i, c0 + j);
  return out;
}

}  // namespace detail

inline std::vector<double> conformer_forward(const ConformerParams& p, const frontend::FeatureSequence& f) {
  const ConformerConfig& cfg = p.cfg;
  if (f.dim() != cfg.input_dim)
    throw Error("encoder", "feature dimension " + std::to_string(f.dim()) + " != " +
                               std::to_string(cfg.input_dim));
  size_t t = f.num_frames(), m = cfg.model_dim, heads = cfg.heads, dh = m / heads;
  using namespace detail;

  Tensor x = linear_nt(f.frames, p.in_w, p.in_b);
  if (cfg.positional_encoding) {
    Tensor pe = sinusoidal_pe(t, m);
    for (size_t i = 0; i < x.numel(); ++i) x.data[i] += pe.data[i];
  }
  double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (const auto& bl : p.block) {
    {  // half FFN (pre)
      Tensor y = layer_norm_plain(x, bl.ln1_g, bl.ln1_b);
      y = linear_nt(y, bl.ffn1_w1, bl.ffn1_b1);
      for (double& v : y.data) v = v > 0.0 ? v : 0.0;
      y = linear_nt(y, bl.ffn1_w2, bl.ffn1_b2);
      for (size_t i = 0; i < x.numel(); ++i) x.data[i] += 0.5 * y.data[i];
    }
    {  // MHSA
      Tensor y = layer_norm_plain(x, bl.ln2_g, bl.ln2_b);
      Tensor q = linear_nt(y, bl.wq, bl.bq);
      Tensor k = linear_nt(y, bl.wk, bl.bk);
      Tensor v = linear_nt(y, bl.wv, bl.bv);
      Tensor heads_out({t, m});
      for (size_t hi = 0; hi < heads; ++hi) {
        Tensor qh = slice_cols_plain(q, hi * dh, (hi + 1) * dh);
        Tensor kh = slice_cols_plain(k, hi * dh, (hi + 1) * dh);
        Tensor vh = slice_cols_plain(v, hi * dh, (hi + 1) * dh);
        Tensor scores({t, t});
        nd::gemm_nt(qh.data.data(), t, dh, kh.data.data(), t, scores.data.data());
        for (double& s : scores.data) s *= inv_sqrt_dh;
        softmax_rows_plain(scores);
        Tensor oh({t, dh});
        nd::gemm(scores.data.data(), t, t, vh.data.data(), dh, oh.data.data());
        for (size_t i = 0; i < t; ++i)
          for (size_t j = 0; j < dh; ++j) heads_out.at(i, hi * dh + j) = oh.at(i, j);
      }
      Tensor o = linear_nt(heads_out, bl.wo, bl.bo);
      for (size_t i = 0; i < x.numel(); ++i) x.data[i] += o.data[i];
    }
    {  // depthwise conv module
      Tensor y = layer_norm_plain(x, bl.ln3_g, bl.ln3_b);
      size_t kw = cfg.kernel, pad = (kw - 1) / 2;
      Tensor c({t, m});
      for (size_t ti = 0; ti < t; ++ti)
        for (size_t j = 0; j < m; ++j) {
          double acc = bl.conv_b.data[j];
          for (size_t ki = 0; ki < kw; ++ki) {
            ptrdiff_t src = static_cast<ptrdiff_t>(ti + ki) - static_cast<ptrdiff_t>(pad);
            if (src >= 0 && src < static_cast<ptrdiff_t>(t)) acc += bl.conv_w.at(ki, j) * y.at(static_cast<size_t>(src), j);
          }
          c.at(ti, j) = acc > 0.0 ? acc : 0.0;
        }
      for (size_t i = 0; i < x.numel(); ++i) x.data[i] += c.data[i];
    }
    {  // half FFN (post)
      Tensor y = layer_norm_plain(x, bl.ln4_g, bl.ln4_b);
      y = linear_nt(y, bl.ffn2_w1, bl.ffn2_b1);
      for (double& v : y.data) v = v > 0.0 ? v : 0.0;
      y = linear_nt(y, bl.ffn2_w2, bl.ffn2_b2);
      for (size_t i = 0; i < x.numel(); ++i) x.data[i] += 0.5 * y.data[i];
    }
  }
  Tensor out = detail::layer_norm_plain(x, p.ln_out_g, p.ln_out_b);
  // temporal mean pool, then project
  std::vector<double> pooled(m, 0.0);
  for (size_t ti = 0; ti < t; ++ti)
    for (size_t j = 0; j < m; ++j) pooled[j] += out.at(ti, j);
  double inv = 1.0 / static_cast<double>(t);
  for (double& v : pooled) v *= inv;
  std::vector<double> e(cfg.embed);
  for (size_t r = 0; r < cfg.embed; ++r) {
    const double* w = p.out_w.data.data() + r * m;
    double acc = 0.0;
    for (size_t kk = 0; kk < m; ++kk) acc += pooled[kk] * w[kk];
    e[r] = acc + p.out_b.data[r];
  }
  return e;
}

struct ConformerVars {
  Var in_w, in_b;
  struct Block {
    Var ln1_g, ln1_b, ffn1_w1, ffn1_b1, ffn1_w2, ffn1_b2;
    Var ln2_g, ln2_b, wq, bq, wk, bk, wv, bv, wo, bo;
    Var ln3_g, ln3_b, conv_w, conv_b;
    Var ln4_g, ln4_b, ffn2_w1, ffn2_b1, ffn2_w2, ffn2_b2;
  };
  std::vector<Block> block;
  Var ln_out_g, ln_out_b, out_w, out_b;
  std::vector<Var> all;  // named() order
};

inline ConformerVars lift(Graph& g, const ConformerParams& p) {
  ConformerVars v;
  auto add = [&](Var var) {
    v.all.push_back(var);
    return var;
  };
  v.in_w = add(g.param(p.in_w));
  v.in_b = add(g.param(p.in_b));
  for (const auto& bl : p.block) {
    ConformerVars::Block bv;
    bv.ln1_g = add(g.param(bl.ln1_g)); bv.ln1_b = add(g.param(bl.ln1_b));
    bv.ffn1_w1 = add(g.param(bl.ffn1_w1)); bv.ffn1_b1 = add(g.param(bl.ffn1_b1));
    bv.ffn1_w2 = add(g.param(bl.ffn1_w2)); bv.ffn1_b2 = add(g.param(bl.ffn1_b2));
    bv.ln2_g = add(g.param(bl.ln2_g)); bv.ln2_b = add(g.param(bl.ln2_b));
    bv.wq = add(g.param(bl.wq)); bv.bq = add(g.param(bl.bq));
    bv.wk = add(g.param(bl.wk)); bv.bk = add(g.param(bl.bk));
    bv.wv = add(g.param(bl.wv)); bv.bv = add(g.param(bl.bv));
    bv.wo = add(g.param(bl.wo)); bv.bo = add(g.param(bl.bo));
    bv.ln3_g = add(g.param(bl.ln3_g)); bv.ln3_b = add(g.param(bl.ln3_b));
    bv.conv_w = add(g.param(bl.conv_w)); bv.conv_b = add(g.param(bl.conv_b));
    bv.ln4_g = add(g.param(bl.ln4_g)); bv.ln4_b = add(g.param(bl.ln4_b));
    bv.ffn2_w1 = add(g.param(bl.ffn2_w1)); bv.ffn2_b1 = add(g.param(bl.ffn2_b1));
    bv.ffn2_w2 = add(g.param(bl.ffn2_w2)); bv.ffn2_b2 = add(g.param(bl.ffn2_b2));
    v.block.push_back(bv);
  }
  v.ln_out_g = add(g.param(p.ln_out_g));
  v.ln_out_b = add(g.param(p.ln_out_b));
  v.out_w = add(g.param(p.out_w));
  v.out_b = add(g.param(p.out_b));
  return v;
}

inline ConformerVars conformer_vars_from(const ConformerConfig& cfg, const std::vector<Var>& leaves) {
  if (leaves.size() != 2 + cfg.blocks * 26 + 4)
    throw Error("encoder", "conformer_vars_from: wrong leaf count");
  ConformerVars v;
  v.all = leaves;
  size_t i = 0;
  v.in_w = leaves[i++];
  v.in_b = leaves[i++];
  for (size_t b = 0; b < cfg.blocks; ++b) {
    ConformerVars::Block bv;
    bv.ln1_g = leaves[i++]; bv.ln1_b = leaves[i++];
    bv.ffn1_w1 = leaves[i++]; bv.ffn1_b1 = leaves[i++];
    bv.ffn1_w2 = leaves[i++]; bv.ffn1_b2 = leaves[i++];
    bv.ln2_g = leaves[i++]; bv.ln2_b = leaves[i++];
    bv.wq = leaves[i++]; bv.bq = leaves[i++];
    bv.wk = leaves[i++]; bv.bk = leaves[i++];
    bv.wv = leaves[i++]; bv.bv = leaves[i++];
    bv.wo = leaves[i++]; bv.bo = leaves[i++];
    bv.ln3_g = leaves[i++]; bv.ln3_b = leaves[i++];
    bv.conv_w = leaves[i++]; bv.conv_b = leaves[i++];
    bv.ln4_g = leaves[i++]; bv.ln4_b = leaves[i++];
    bv.ffn2_w1 = leaves[i++]; bv.ffn2_b1 = leaves[i++];
    bv.ffn2_w2 = leaves[i++]; bv.ffn2_b2 = leaves[i++];
    v.block.push_back(bv);
  }
  v.ln_out_g = leaves[i++];
  v.ln_out_b = leaves[i++];
  v.out_w = leaves[i++];
  v.out_b = leaves[i++];
  return v;
}

// [1 x D] for a single utterance; mirrors conformer_forward op for op.
inline Var conformer_forward_graph(Graph& g, const ConformerConfig& cfg, const ConformerVars& v,
                                   const frontend::FeatureSequence& f) {
  size_t t = f.num_frames(), m = cfg.model_dim, heads = cfg.heads, dh = m / heads;
  Var x = nd::add_row(nd::matmul_nt(g.constant(f.frames), v.in_w), v.in_b);
  if (cfg.positional_encoding) x = nd::add(x, g.constant(sinusoidal_pe(t, m)));
  double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (const auto& bl : v.block) {
    {
      Var y = nd::layer_norm(x, bl.ln1_g, bl.ln1_b);
      y = nd::add_row(nd::matmul_nt(y, bl.ffn1_w1), bl.ffn1_b1);
      y = nd::relu(y);
      y = nd::add_row(nd::matmul_nt(y, bl.ffn1_w2), bl.ffn1_b2);
      x = nd::add(x, nd::scale(y, 0.5));
    }
    {
      Var y = nd::layer_norm(x, bl.ln2_g, bl.ln2_b);
      Var q = nd::add_row(nd::matmul_nt(y, bl.wq), bl.bq);
      Var k = nd::add_row(nd::matmul_nt(y, bl.wk), bl.bk);
      Var vv = nd::add_row(nd::matmul_nt(y, bl.wv), bl.bv);
      std::vector<Var> head_outs;
      for (size_t hi = 0; hi < heads; ++hi) {
        Var qh = nd::slice_cols(q, hi * dh, (hi + 1) * dh);
        Var kh = nd::slice_cols(k, hi * dh, (hi + 1) * dh);
        Var vh = nd::slice_cols(vv, hi * dh, (hi + 1) * dh);
        Var scores = nd::scale(nd::matmul_nt(qh, kh), inv_sqrt_dh);
        Var attn = nd::softmax_rows(scores);
        head_outs.push_back(nd::matmul(attn, vh));
      }
      Var o = nd::add_row(nd::matmul_nt(nd::concat_cols(head_outs), bl.wo), bl.bo);
      x = nd::add(x, o);
    }
    {
      Var y = nd::layer_norm(x, bl.ln3_g, bl.ln3_b);
      Var c = nd::relu(nd::depthwise_conv1d(y, bl.conv_w, bl.conv_b));
      x = nd::add(x, c);
    }
    {
      Var y = nd::layer_norm(x, bl.ln4_g, bl.ln4_b);
      y = nd::add_row(nd::matmul_nt(y, bl.ffn2_w1), bl.ffn2_b1);
      y = nd::relu(y);
      y = nd::add_row(nd::matmul_nt(y, bl.ffn2_w2), bl.ffn2_b2);
      x = nd::add(x, nd::scale(y, 0.5));
    }
  }
  Var out = nd::layer_norm(x, v.ln_out_g, v.ln_out_b);
  Var pooled = nd::row_mean(out);
  return nd::add_row(nd::matmul_nt(pooled, v.out_w), v.out_b);  // [1 x D]
}

// Sliding-window streaming for the conformer: buffer `window` frames and
// re-run the whole-window forward every `hop` frames.
struct ConformerState {
  std::deque<std::vector<double>> buffer;
  size_t window = 98;
  size_t hop = 10;
  size_t frames_seen = 0;

  void reset() {
    buffer.clear();
    frames_seen = 0;
  }
};

// ------------------------------------------------------------- wrapper

enum class Arch { lstm, conformer };

inline const char* arch_name(Arch a) { return a == Arch::lstm ? "lstm" : "conformer"; }

class Encoder {
 public:
  static Encoder make_lstm(const LstmConfig& cfg, uint64_t seed) {
    Encoder e;
    e.params_ = init_lstm(cfg, seed);
    return e;
  }

  static Encoder make_conformer(const ConformerConfig& cfg, uint64_t seed) {
    Encoder e;
    e.params_ = init_conformer(cfg, seed);
    return e;
  }

  Arch arch() const { return std::holds_alternative<LstmParams>(params_) ? Arch::lstm : Arch::conformer; }

  size_t embed_dim() const {
    return arch() == Arch::lstm ? lstm().cfg.embed : conformer().cfg.embed;
  }

  LstmParams& lstm() {
    if (arch() != Arch::lstm) throw Error("encoder", "not an LSTM encoder");
    return std::get<LstmParams>(params_);
  }
  const LstmParams& lstm() const {
    if (arch() != Arch::lstm) throw Error("encoder", "not an LSTM encoder");
    return std::get<LstmParams>(params_);
  }
  ConformerParams& conformer() {
    if (arch() != Arch::conformer) throw Error("encoder", "not a conformer encoder");
    return std::get<ConformerParams>(params_);
  }
  const ConformerParams& conformer() const {
    if (arch() != Arch::conformer) throw Error("encoder", "not a conformer encoder");
    return std::get<ConformerParams>(params_);
  }

  std::vector<double> forward(const frontend::FeatureSequence& f) const {
    return arch() == Arch::lstm ? lstm_forward(lstm(), f) : conformer_forward(conformer(), f);
  }

  std::vector<NamedParam> named_params() {
    return arch() == Arch::lstm ? lstm().named() : conformer().named();
  }

  std::vector<NamedParam> named_params() const {
    auto& self = const_cast<Encoder&>(*this);
    return self.named_params();
  }

  uint64_t checksum() const {
    Fnv1a h;
    for (const auto& np : named_params()) {
      h.update(np.name.data(), np.name.size());
      for (size_t d : np.tensor->shape) {
        uint64_t v = d;
        h.update(&v, sizeof(v));
      }
      h.update(np.tensor->data.data(), np.tensor->data.size() * sizeof(double));
    }
    return h.digest();
  }

 private:
  std::variant<LstmParams, ConformerParams> params_;
};

// Streaming wrapper over both architectures. The LSTM emits after every
// frame; the conformer emits once per completed hop after the first full
// window.
class StreamState {
 public:
  StreamState() = default;

  static StreamState make(const Encoder& e, size_t window = 98, size_t hop = 10) {
    if (window < 1 || hop < 1) throw Error("encoder", "stream window and hop must be >= 1");
    StreamState s;
    if (e.arch() == Arch::lstm) {
      s.state_ = make_lstm_state(e.lstm());
    } else {
      ConformerState cs;
      cs.window = window;
      cs.hop = hop;
      s.state_ = std::move(cs);
    }
    return s;
  }

  void reset() {
    if (auto* l = std::get_if<LstmState>(&state_))
      l->reset();
    else
      std::get<ConformerState>(state_).reset();
  }

  std::optional<std::vector<double>> step(const Encoder& e, std::span<const double> frame) {
    if (auto* l = std::get_if<LstmState>(&state_)) {
      lstm_step(e.lstm(), *l, frame);
      return lstm_emit(e.lstm(), *l);
    }
    auto& cs = std::get<ConformerState>(state_);
    if (frame.size() != e.conformer().cfg.input_dim)
      throw Error("encoder", "stream frame dimension " + std::to_string(frame.size()) + " != " +
                                 std::to_string(e.conformer().cfg.input_dim));
    cs.buffer.emplace_back(frame.begin(), frame.end());
    if (cs.buffer.size() > cs.window) cs.buffer.pop_front();
    ++cs.frames_seen;
    if (cs.frames_seen < cs.window || (cs.frames_seen - cs.window) % cs.hop != 0) return std::nullopt;
    frontend::FeatureSequence f;
    f.frames = Tensor({cs.buffer.size(), frame.size()});
    for (size_t i = 0; i < cs.buffer.size(); ++i)
      for (size_t j = 0; j < frame.size(); ++j) f.frames.at(i, j) = cs.buffer[i][j];
    return conformer_forward(e.conformer(), f);
  }

 private:
  std::variant<LstmState, ConformerState> state_;
};

// ---------------------------------------------------------- checkpoint

inline io::Container to_container(const Encoder& e) {
  io::Container c;
  c.arch = arch_name(e.arch());
  if (e.arch() == Arch::lstm) {
    const auto& cfg = e.lstm().cfg;
    c.meta = {{"input_dim", std::to_string(cfg.input_dim)},
              {"hidden", std::to_string(cfg.hidden)},
              {"layers", std::to_string(cfg.layers)},
              {"embed", std::to_string(cfg.embed)}};
  } else {
    const auto& cfg = e.conformer().cfg;
    c.meta = {{"input_dim", std::to_string(cfg.input_dim)},
              {"model_dim", std::to_string(cfg.model_dim)},
              {"heads", std::to_string(cfg.heads)},
              {"blocks", std::to_string(cfg.blocks)},
              {"kernel", std::to_string(cfg.kernel)},
              {"ffn_mult", std::to_string(cfg.ffn_mult)},
              {"embed", std::to_string(cfg.embed)},
              {"positional_encoding", e.conformer().cfg.positional_encoding ? "1" : "0"}};
  }
  for (const auto& np : e.named_params()) {
    io::Blob b;
    b.name = np.name;
    b.kind = 0;
    b.shape = np.tensor->shape;
    b.f64 = np.tensor->data;
    c.blobs.push_back(std::move(b));
  }
  return c;
}

inline size_t meta_size_t(const io::Container& c, const std::string& key) {
  return static_cast<size_t>(std::stoull(c.require_meta(key)));
}

// Fills an encoder's tensors from container blobs; `dequant` sees each q8
// blob and returns its float64 reconstruction.
template <typename DequantFn>
inline Encoder encoder_from_container(const io::Container& c, DequantFn&& dequant) {
  Encoder e;
  if (c.arch == "lstm") {
    LstmConfig cfg;
    cfg.input_dim = meta_size_t(c, "input_dim");
    cfg.hidden = meta_size_t(c, "hidden");
    cfg.layers = meta_size_t(c, "layers");
    cfg.embed = meta_size_t(c, "embed");
    e = Encoder::make_lstm(cfg, 0);
  } else if (c.arch == "conformer") {
    ConformerConfig cfg;
    cfg.input_dim = meta_size_t(c, "input_dim");
    cfg.model_dim = meta_size_t(c, "model_dim");
    cfg.heads = meta_size_t(c, "heads");
    cfg.blocks = meta_size_t(c, "blocks");
    cfg.kernel = meta_size_t(c, "kernel");
    cfg.ffn_mult = meta_size_t(c, "ffn_mult");
    cfg.embed = meta_size_t(c, "embed");
    cfg.positional_encoding = c.require_meta("positional_encoding") == "1";
    e = Encoder::make_conformer(cfg, 0);
  } else {
    throw Error("checkpoint", "unknown arch tag '" + c.arch + "'");
  }
  for (auto& np : e.named_params()) {
    const io::Blob& b = c.require_blob(np.name);
    if (b.shape != np.tensor->shape)
      throw Error("checkpoint", "blob '" + np.name + "' shape mismatch: file " + nd::shape_str(b.shape) +
                                    " vs model " + nd::shape_str(np.tensor->shape));
    if (b.kind == 0)
      np.tensor->data = b.f64;
    else
      np.tensor->data = dequant(b);
  }
  return e;
}

inline void save_encoder(const std::string& path, const Encoder& e) {
  io::write_container(path, to_container(e));
}

inline Encoder load_encoder(const std::string& path) {
  io::Container c = io::read_container(path);
  return encoder_from_container(c, [](const io::Blob& b) -> std::vector<double> {
    std::vector<double> out(b.q8.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = b.scale * static_cast<double>(b.q8[i]);
    return out;
  });
}

}  // namespace kws::encoder
