// Copyright 2026 The outlierscope Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "outlierscope/common.hpp"
#include "outlierscope/tap_point.hpp"

namespace outlierscope {

/// One recorded tensor (tokens x channels) at one tap for one forward pass.
/// Values are always stored as float32, whatever the compute precision.
struct ActivationSnapshot {
  TapPoint tap;
  Matrix values;
  std::string pass_id;

  Eigen::Index tokens() const { return values.rows(); }
  Eigen::Index channels() const { return values.cols(); }
};

/// Stacks snapshots of one tap from several passes along the token axis.
inline ActivationSnapshot pool_snapshots(const std::vector<ActivationSnapshot>& parts) {
  if (parts.empty()) throw InvalidArgument("nothing to pool");
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.values.cols() != parts.front().values.cols()) throw InvalidArgument("pooled snapshots differ in width");
    rows += p.values.rows();
  }
  ActivationSnapshot out{parts.front().tap, Matrix(rows, parts.front().values.cols()), "pooled"};
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.values.middleRows(at, p.values.rows()) = p.values;
    at += p.values.rows();
  }
  out.pass_id = "pooled:" + parts.front().pass_id + "+" + std::to_string(parts.size() - 1);
  return out;
}

}  // namespace outlierscope
