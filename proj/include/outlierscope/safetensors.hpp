// Copyright 2026 The outlierscope Authors
// SPDX-License-Identifier: Apache-2.0

// Reader/writer for the safetensors container: an 8-byte little-endian header
// length, a JSON header mapping tensor name -> {dtype, shape, data_offsets},
// then the raw tensor bytes. Tensors are widened to float32 on read.

#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "outlierscope/common.hpp"

namespace outlierscope {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

struct HostTensor {
  std::vector<int64_t> shape;
  std::vector<float> data;

  int64_t numel() const {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
  }

  /// View as rows x cols; 1-D tensors become a single column.
  Matrix as_matrix() const {
    if (shape.size() == 1) {
      Matrix m(shape[0], 1);
      std::memcpy(m.data(), data.data(), data.size() * sizeof(float));
      return m;
    }
    if (shape.size() != 2) throw LoadError("expected a 1-D or 2-D tensor");
    Matrix m(shape[0], shape[1]);
    std::memcpy(m.data(), data.data(), data.size() * sizeof(float));
    return m;
  }

  Vector as_vector() const {
    Vector v(numel());
    std::memcpy(v.data(), data.data(), data.size() * sizeof(float));
    return v;
  }

  static HostTensor from(const Matrix& m) {
    HostTensor t;
    t.shape = {m.rows(), m.cols()};
    t.data.assign(m.data(), m.data() + m.size());
    return t;
  }

  static HostTensor from(const Vector& v) {
    HostTensor t;
    t.shape = {v.size()};
    t.data.assign(v.data(), v.data() + v.size());
    return t;
  }
};

using TensorMap = std::map<std::string, HostTensor>;

namespace detail {

inline float half_to_float(uint16_t h) {
  const uint32_t sign = (h & 0x8000u) << 16;
  uint32_t exp = (h >> 10) & 0x1fu;
  uint32_t mant = h & 0x3ffu;
  uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      exp = 127 - 15 + 1;
      while ((mant & 0x400u) == 0) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3ffu;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 0x1f) {
    bits = sign | 0x7f800000u | (mant << 13);
  } else {
    bits = sign | ((exp + 127 - 15) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

inline float bf16_to_float(uint16_t h) { return std::bit_cast<float>(static_cast<uint32_t>(h) << 16); }

inline size_t dtype_size(const std::string& dtype) {
  if (dtype == "F32") return 4;
  if (dtype == "F16" || dtype == "BF16") return 2;
  if (dtype == "F64") return 8;
  throw LoadError("unsupported safetensors dtype " + dtype);
}

}  // namespace detail

inline TensorMap read_safetensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), 8);
  if (!in || header_len == 0 || header_len > (1ull << 30)) throw LoadError("bad safetensors header in " + path.string());
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw LoadError("truncated safetensors header in " + path.string());

  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("malformed safetensors header in " + path.string() + ": " + e.what());
  }

  const auto base = static_cast<std::streamoff>(8 + header_len);
  TensorMap out;
  std::vector<char> raw;
  for (const auto& [name, info] : meta.items()) {
    if (name == "__metadata__") continue;
    const std::string dtype = info.at("dtype").get<std::string>();
    const auto offsets = info.at("data_offsets").get<std::vector<uint64_t>>();
    HostTensor t;
    t.shape = info.at("shape").get<std::vector<int64_t>>();
    const size_t elem = detail::dtype_size(dtype);
    const auto n = static_cast<size_t>(t.numel());
    if (offsets.size() != 2 || offsets[1] - offsets[0] != n * elem)
      throw LoadError("tensor " + name + " has inconsistent offsets");
    raw.resize(n * elem);
    in.seekg(base + static_cast<std::streamoff>(offsets[0]));
    in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (!in) throw LoadError("truncated tensor data for " + name);
    t.data.resize(n);
    if (dtype == "F32") {
      std::memcpy(t.data.data(), raw.data(), raw.size());
    } else if (dtype == "F64") {
      for (size_t i = 0; i < n; ++i) {
        double d;
        std::memcpy(&d, raw.data() + 8 * i, 8);
        t.data[i] = static_cast<float>(d);
      }
    } else {
      const bool bf16 = dtype == "BF16";
      for (size_t i = 0; i < n; ++i) {
        uint16_t h;
        std::memcpy(&h, raw.data() + 2 * i, 2);
        t.data[i] = bf16 ? detail::bf16_to_float(h) : detail::half_to_float(h);
      }
    }
    out.emplace(name, std::move(t));
  }
  return out;
}

/// Writes every tensor as F32, in name order.
inline void write_safetensors(const std::filesystem::path& path, const TensorMap& tensors) {
  nlohmann::json meta = nlohmann::json::object();
  uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    if (static_cast<size_t>(t.numel()) != t.data.size()) throw InvalidArgument("tensor " + name + " shape/data mismatch");
    const uint64_t bytes = t.data.size() * sizeof(float);
    meta[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string header = meta.dump();
  while (header.size() % 8 != 0) header.push_back(' ');
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  const uint64_t header_len = header.size();
  out.write(reinterpret_cast<const char*>(&header_len), 8);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& [name, t] : tensors)
    out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace outlierscope
