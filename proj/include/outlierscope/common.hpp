// Copyright 2026 The outlierscope Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace outlierscope {

/// Row-major float matrix; rows are tokens (or output channels for weights).
using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXf;

using TokenSequence = std::vector<int32_t>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoint or corpus could not be read.
class LoadError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint is readable but not a supported decoder-only architecture.
class UnsupportedArchitecture : public Error {
 public:
  using Error::Error;
};

/// Caller-supplied arguments violate an operation precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A forward pass produced NaN or Inf in a recorded tensor.
class NonFiniteActivation : public Error {
 public:
  using Error::Error;
};

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

/// Median of |entries|; the mean of the two middle values for even counts.
inline double median_abs(const Matrix& m) {
  if (m.size() == 0) throw InvalidArgument("median of an empty tensor");
  std::vector<float> mags(static_cast<size_t>(m.size()));
  const float* data = m.data();
  for (size_t i = 0; i < mags.size(); ++i) mags[i] = std::fabs(data[i]);
  const size_t n = mags.size();
  const size_t hi = n / 2;
  std::nth_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(hi), mags.end());
  const double upper = mags[hi];
  if (n % 2 == 1) return upper;
  const double lower = *std::max_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(hi));
  return 0.5 * (lower + upper);
}

/// Mean over every entry, accumulated in double in row-major order.
inline double tensor_mean(const Matrix& m) {
  if (m.size() == 0) throw InvalidArgument("mean of an empty tensor");
  double sum = 0.0;
  const float* data = m.data();
  for (Eigen::Index i = 0; i < m.size(); ++i) sum += data[i];
  return sum / static_cast<double>(m.size());
}

/// 64-bit FNV-1a, used for config and plan digests.
inline uint64_t fnv1a64(std::string_view bytes) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<size_t>(i)] = kDigits[v & 0xf];
    v >>= 4;
  }
  return out;
}

}  // namespace outlierscope
