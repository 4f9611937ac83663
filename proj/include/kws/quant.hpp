#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "kws/checkpoint.hpp"
#include "kws/common.hpp"
#include "kws/encoder.hpp"
#include "kws/tensor.hpp"

namespace kws::quant {

// Symmetric per-tensor dynamic-range quantization: scale = max|t| / 127,
// values rounded half away from zero and clamped to [-127, 127].
struct QuantTensor {
  std::vector<size_t> shape;
  std::vector<int8_t> values;
  double scale = 1.0;

  size_t numel() const { return nd::Tensor::count(shape); }
};

inline QuantTensor quantize(const nd::Tensor& t) {
  if (!t.all_finite()) throw Error("quant", "cannot quantize non-finite tensor");
  QuantTensor q;
  q.shape = t.shape;
  q.values.resize(t.numel());
  double max_abs = 0.0;
  for (double v : t.data) max_abs = std::max(max_abs, std::abs(v));
  q.scale = max_abs == 0.0 ? 1.0 : max_abs / 127.0;
  for (size_t i = 0; i < t.numel(); ++i) {
    double r = std::round(t.data[i] / q.scale);  // half away from zero
    r = std::min(127.0, std::max(-127.0, r));
    q.values[i] = static_cast<int8_t>(r);
  }
  return q;
}

inline nd::Tensor dequantize(const QuantTensor& q) {
  nd::Tensor t(q.shape);
  for (size_t i = 0; i < q.values.size(); ++i)
    t.data[i] = q.scale * static_cast<double>(q.values[i]);
  return t;
}

// Weight-only quantized encoder: every parameter tensor is stored as
// int8 + scale, and inference runs the ordinary float graph on the
// dequantized weights.
struct QuantizedEncoder {
  encoder::Arch arch = encoder::Arch::lstm;
  std::vector<std::pair<std::string, QuantTensor>> blobs;
  encoder::Encoder dequantized;  // same computation path as the float model

  std::vector<double> forward(const frontend::FeatureSequence& f) const { return dequantized.forward(f); }
  uint64_t checksum() const { return dequantized.checksum(); }
};

inline QuantizedEncoder quantize_encoder(const encoder::Encoder& e) {
  QuantizedEncoder q;
  q.arch = e.arch();
  q.dequantized = e;
  for (auto& np : q.dequantized.named_params()) {
    QuantTensor qt = quantize(*np.tensor);
    *np.tensor = dequantize(qt);
    q.blobs.emplace_back(np.name, std::move(qt));
  }
  return q;
}

inline io::Container to_container(const QuantizedEncoder& q) {
  io::Container c = encoder::to_container(q.dequantized);
  c.blobs.clear();
  for (const auto& [name, qt] : q.blobs) {
    io::Blob b;
    b.name = name;
    b.kind = 1;
    b.shape = qt.shape;
    b.scale = qt.scale;
    b.q8 = qt.values;
    c.blobs.push_back(std::move(b));
  }
  return c;
}

inline void save_quantized(const std::string& path, const QuantizedEncoder& q) {
  io::write_container(path, to_container(q));
}

inline QuantizedEncoder load_quantized(const std::string& path) {
  io::Container c = io::read_container(path);
  QuantizedEncoder q;
  q.dequantized = encoder::encoder_from_container(c, [&](const io::Blob& b) {
    QuantTensor qt;
    qt.shape = b.shape;
    qt.values = b.q8;
    qt.scale = b.scale;
    return dequantize(qt).data;
  });
  q.arch = q.dequantized.arch();
  for (const auto& b : c.blobs) {
    if (b.kind != 1) throw Error("quant", "expected q8 blobs in quantized checkpoint: " + path);
    QuantTensor qt;
    qt.shape = b.shape;
    qt.values = b.q8;
    qt.scale = b.scale;
    q.blobs.emplace_back(b.name, std::move(qt));
  }
  return q;
}

// Bytes of parameter payload in each representation (metadata excluded).
inline size_t float_payload_bytes(const encoder::Encoder& e) {
  size_t n = 0;
  for (const auto& np : e.named_params()) n += np.tensor->numel() * sizeof(double);
  return n;
}

inline size_t quant_payload_bytes(const QuantizedEncoder& q) {
  size_t n = 0;
  for (const auto& [name, qt] : q.blobs) n += qt.values.size() + sizeof(double);
  return n;
}

}  // namespace kws::quant
