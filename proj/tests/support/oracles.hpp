// Copyright 2026 The outlierscope Authors
// SPDX-License-Identifier: Apache-2.0

// Brute-force reference implementations and random tensor generators shared
// by the unit and acceptance suites. Written for obviousness, not speed: full
// sorts, explicit loops, no shared helpers from the library under test.

#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <tuple>
#include <utility>
#include <vector>

#include "outlierscope/common.hpp"
#include "outlierscope/random.hpp"

namespace oracle {

using outlierscope::Matrix;

/// (token, channel) of every entry with |v| > 100 and |v| >= 1000 * median|v|.
inline std::set<std::pair<int, int>> massive_positions(const Matrix& m) {
  std::vector<double> mags;
  for (int t = 0; t < m.rows(); ++t)
    for (int c = 0; c < m.cols(); ++c) mags.push_back(std::fabs(static_cast<double>(m(t, c))));
  std::sort(mags.begin(), mags.end());
  const size_t n = mags.size();
  const double median = n % 2 ? mags[n / 2] : 0.5 * (mags[n / 2 - 1] + mags[n / 2]);
  std::set<std::pair<int, int>> out;
  for (int t = 0; t < m.rows(); ++t)
    for (int c = 0; c < m.cols(); ++c) {
      const double a = std::fabs(static_cast<double>(m(t, c)));
      if (a > 100.0 && a >= 1000.0 * median) out.emplace(t, c);
    }
  return out;
}

/// Channel-wise outliers: channel mean beyond tensor mean +/- m * tensor std
/// (population) and channel std (population) below beta. Returns (channel,
/// +1 high / -1 low).
inline std::vector<std::pair<int, int>> outlier_channels(const Matrix& a, double m, double beta) {
  const double count = static_cast<double>(a.rows()) * static_cast<double>(a.cols());
  double sum = 0.0;
  for (int t = 0; t < a.rows(); ++t)
    for (int c = 0; c < a.cols(); ++c) sum += a(t, c);
  const double mu = sum / count;
  double ss = 0.0;
  for (int t = 0; t < a.rows(); ++t)
    for (int c = 0; c < a.cols(); ++c) ss += (a(t, c) - mu) * (a(t, c) - mu);
  const double sigma = std::sqrt(ss / count);
  std::vector<std::pair<int, int>> out;
  for (int c = 0; c < a.cols(); ++c) {
    double cs = 0.0;
    for (int t = 0; t < a.rows(); ++t) cs += a(t, c);
    const double cm = cs / a.rows();
    double cv = 0.0;
    for (int t = 0; t < a.rows(); ++t) cv += (a(t, c) - cm) * (a(t, c) - cm);
    const double csd = std::sqrt(cv / a.rows());
    if (csd >= beta) continue;
    if (cm > mu + m * sigma) out.emplace_back(c, +1);
    if (cm < mu - m * sigma) out.emplace_back(c, -1);
  }
  return out;
}

/// Random tensor with planted massive entries and planted constant channels.
inline Matrix planted_tensor(outlierscope::SeededRng& rng, int max_rows = 64, int max_cols = 64) {
  const int rows = 2 + static_cast<int>(rng.below(static_cast<uint64_t>(max_rows - 1)));
  const int cols = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(max_cols)));
  const double scale = std::pow(10.0, rng.uniform(-3.0, 0.0));
  Matrix m(rows, cols);
  for (int t = 0; t < rows; ++t)
    for (int c = 0; c < cols; ++c) m(t, c) = static_cast<float>(rng.normal() * scale);
  // Constant channels (small internal spread) far from the bulk, either side.
  const int channels = static_cast<int>(rng.below(4));
  for (int k = 0; k < channels; ++k) {
    const int c = static_cast<int>(rng.below(static_cast<uint64_t>(cols)));
    const double level = (rng.below(2) ? 1.0 : -1.0) * rng.uniform(0.5, 40.0);
    for (int t = 0; t < rows; ++t) m(t, c) = static_cast<float>(level + rng.normal() * rng.uniform(0.0, 0.5));
  }
  // Massive entries, some below the absolute floor.
  const int spikes = static_cast<int>(rng.below(5));
  for (int k = 0; k < spikes; ++k) {
    const int t = static_cast<int>(rng.below(static_cast<uint64_t>(rows)));
    const int c = static_cast<int>(rng.below(static_cast<uint64_t>(cols)));
    m(t, c) = static_cast<float>((rng.below(2) ? 1.0 : -1.0) * rng.uniform(20.0, 3000.0));
  }
  return m;
}

}  // namespace oracle
