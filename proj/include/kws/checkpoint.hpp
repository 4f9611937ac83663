#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "kws/common.hpp"
#include "kws/tensor.hpp"

namespace kws::io {

// KWSM container: magic "KWSM", version, arch tag, string metadata, then
// named parameter blobs. Blob kind 0 holds little-endian float64; kind 1
// ("q8") holds a float64 scale followed by int8 values. Full layout:
//
//   "KWSM" | u32 version | u32 len + arch | u32 n_meta | n x (str key, str val)
//   | u32 n_blobs | n x (str name, u8 kind, u32 ndim, u64 dims[], payload)
//
// where str = u32 length + bytes, all integers little-endian.

constexpr uint32_t kContainerVersion = 1;

struct Blob {
  std::string name;
  uint8_t kind = 0;  // 0 = f64, 1 = q8
  std::vector<size_t> shape;
  std::vector<double> f64;
  std::vector<int8_t> q8;
  double scale = 1.0;

  size_t numel() const { return nd::Tensor::count(shape); }
  size_t payload_bytes() const { return kind == 0 ? numel() * 8 : numel() + 8; }
};

struct Container {
  std::string arch;
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<Blob> blobs;

  const std::string* find_meta(const std::string& key) const {
    for (const auto& [k, v] : meta)
      if (k == key) return &v;
    return nullptr;
  }

  const std::string& require_meta(const std::string& key) const {
    const std::string* v = find_meta(key);
    if (!v) throw Error("checkpoint", "missing metadata key '" + key + "'");
    return *v;
  }

  const Blob& require_blob(const std::string& name) const {
    for (const auto& b : blobs)
      if (b.name == name) return b;
    throw Error("checkpoint", "missing blob '" + name + "'");
  }

  size_t total_payload_bytes() const {
    size_t n = 0;
    for (const auto& b : blobs) n += b.payload_bytes();
    return n;
  }
};

namespace detail {

inline void put_u32(std::ostream& out, uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b, 4);
}

inline void put_u64(std::ostream& out, uint64_t v) {
  put_u32(out, static_cast<uint32_t>(v & 0xffffffffu));
  put_u32(out, static_cast<uint32_t>(v >> 32));
}

inline void put_f64(std::ostream& out, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

inline void put_str(std::ostream& out, const std::string& s) {
  put_u32(out, static_cast<uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
         static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

inline uint64_t get_u64(std::istream& in) {
  uint64_t lo = get_u32(in);
  uint64_t hi = get_u32(in);
  return lo | hi << 32;
}

inline double get_f64(std::istream& in) {
  uint64_t bits = get_u64(in);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

inline std::string get_str(std::istream& in) {
  uint32_t n = get_u32(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  return s;
}

}  // namespace detail

inline void write_container(const std::string& path, const Container& c) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("checkpoint", "cannot write: " + path);
  out.write("KWSM", 4);
  detail::put_u32(out, kContainerVersion);
  detail::put_str(out, c.arch);
  detail::put_u32(out, static_cast<uint32_t>(c.meta.size()));
  for (const auto& [k, v] : c.meta) {
    detail::put_str(out, k);
    detail::put_str(out, v);
  }
  detail::put_u32(out, static_cast<uint32_t>(c.blobs.size()));
  for (const auto& b : c.blobs) {
    detail::put_str(out, b.name);
    out.put(static_cast<char>(b.kind));
    detail::put_u32(out, static_cast<uint32_t>(b.shape.size()));
    for (size_t d : b.shape) detail::put_u64(out, d);
    if (b.kind == 0) {
      if (b.f64.size() != b.numel()) throw Error("checkpoint", "blob '" + b.name + "' size mismatch");
      for (double v : b.f64) detail::put_f64(out, v);
    } else if (b.kind == 1) {
      if (b.q8.size() != b.numel()) throw Error("checkpoint", "blob '" + b.name + "' size mismatch");
      detail::put_f64(out, b.scale);
      out.write(reinterpret_cast<const char*>(b.q8.data()), static_cast<std::streamsize>(b.q8.size()));
    } else {
      throw Error("checkpoint", "unknown blob kind");
    }
  }
  if (!out) throw Error("checkpoint", "failed writing: " + path);
}

inline Container read_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("checkpoint", "cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "KWSM", 4) != 0) throw Error("checkpoint", "bad magic: " + path);
  uint32_t version = detail::get_u32(in);
  if (version != kContainerVersion)
    throw Error("checkpoint", "unsupported version " + std::to_string(version) + ": " + path);
  Container c;
  c.arch = detail::get_str(in);
  uint32_t n_meta = detail::get_u32(in);
  for (uint32_t i = 0; i < n_meta; ++i) {
    std::string k = detail::get_str(in);
    std::string v = detail::get_str(in);
    c.meta.emplace_back(std::move(k), std::move(v));
  }
  uint32_t n_blobs = detail::get_u32(in);
  for (uint32_t i = 0; i < n_blobs; ++i) {
    Blob b;
    b.name = detail::get_str(in);
    b.kind = static_cast<uint8_t>(in.get());
    uint32_t ndim = detail::get_u32(in);
    b.shape.resize(ndim);
    for (uint32_t d = 0; d < ndim; ++d) b.shape[d] = static_cast<size_t>(detail::get_u64(in));
    if (b.kind == 0) {
      b.f64.resize(b.numel());
      for (double& v : b.f64) v = detail::get_f64(in);
    } else if (b.kind == 1) {
      b.scale = detail::get_f64(in);
      b.q8.resize(b.numel());
      in.read(reinterpret_cast<char*>(b.q8.data()), static_cast<std::streamsize>(b.q8.size()));
    } else {
      throw Error("checkpoint", "unknown blob kind in " + path);
    }
    c.blobs.push_back(std::move(b));
  }
  if (!in) throw Error("checkpoint", "truncated container: " + path);
  return c;
}

}  // namespace kws::io
