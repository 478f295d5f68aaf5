// Copyright 2026 The outlierscope Authors
// SPDX-License-Identifier: Apache-2.0

// Channel-wise outliers (CO): channels whose mean sits more than m * sigma_A
// away from the tensor mean while their own std stays below beta_std. Both
// sides are tested and labelled with a polarity.

#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "outlierscope/activation.hpp"
#include "outlierscope/ma_analysis.hpp"
#include "outlierscope/model.hpp"

namespace outlierscope {

struct CoCriteria {
  double m = 4.0;
  double beta_std = 1.0 / 3.0;

  void validate() const {
    if (!(m > 0.0) || !(beta_std > 0.0)) throw InvalidArgument("CO criteria require m > 0 and beta_std > 0");
  }
};

enum class Polarity { high, low };

inline std::string_view polarity_name(Polarity p) { return p == Polarity::high ? "high" : "low"; }

struct OutlierChannelSet {
  TapPoint tap;
  CoCriteria criteria;
  std::vector<int> channel_indices;  // ascending
  std::vector<Polarity> polarity;    // parallel to channel_indices
  std::vector<double> per_channel_mean;  // indexed by channel
  std::vector<double> per_channel_std;   // population std, indexed by channel
  double tensor_mean = 0.0;
  double tensor_std = 0.0;  // population std over every entry

  size_t size() const { return channel_indices.size(); }
  bool contains(int c) const { return std::binary_search(channel_indices.begin(), channel_indices.end(), c); }
};

/// Channel statistics and flags for a tokens x channels matrix.
inline OutlierChannelSet outlier_channels_of(const Matrix& a, const CoCriteria& criteria, TapPoint tap = {}) {
  criteria.validate();
  if (a.rows() < 2) throw InvalidArgument("CO detection needs at least two tokens");
  if (!all_finite(a)) throw NonFiniteActivation("CO detection on non-finite tensor at " + tap.to_string());
  OutlierChannelSet out;
  out.tap = tap;
  out.criteria = criteria;
  const auto rows = static_cast<double>(a.rows());
  out.tensor_mean = tensor_mean(a);
  double ss = 0.0;
  const float* data = a.data();
  for (Eigen::Index i = 0; i < a.size(); ++i) ss += (data[i] - out.tensor_mean) * (data[i] - out.tensor_mean);
  out.tensor_std = std::sqrt(ss / static_cast<double>(a.size()));

  out.per_channel_mean.assign(static_cast<size_t>(a.cols()), 0.0);
  out.per_channel_std.assign(static_cast<size_t>(a.cols()), 0.0);
  const double hi = out.tensor_mean + criteria.m * out.tensor_std;
  const double lo = out.tensor_mean - criteria.m * out.tensor_std;
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    double mean = 0.0;
    for (Eigen::Index t = 0; t < a.rows(); ++t) mean += a(t, c);
    mean /= rows;
    double var = 0.0;
    for (Eigen::Index t = 0; t < a.rows(); ++t) var += (a(t, c) - mean) * (a(t, c) - mean);
    const double sd = std::sqrt(var / rows);
    out.per_channel_mean[static_cast<size_t>(c)] = mean;
    out.per_channel_std[static_cast<size_t>(c)] = sd;
    if (sd < criteria.beta_std && (mean > hi || mean < lo)) {
      out.channel_indices.push_back(static_cast<int>(c));
      out.polarity.push_back(mean > hi ? Polarity::high : Polarity::low);
    }
  }
  return out;
}

/// CO detection on a snapshot; with strip_mas, MA entries are first replaced
/// by the tensor mean.
inline OutlierChannelSet detect_outlier_channels(const ActivationSnapshot& snapshot, const CoCriteria& criteria = {},
                                                 bool strip_mas = false) {
  if (snapshot.values.size() == 0) throw InvalidArgument("CO detection on empty snapshot");
  if (!strip_mas) return outlier_channels_of(snapshot.values, criteria, snapshot.tap);
  return outlier_channels_of(strip_massive_activations(snapshot).values, criteria, snapshot.tap);
}

struct NormDecomposition {
  OutlierChannelSet input;         // after optional MA stripping
  OutlierChannelSet standardized;
  OutlierChannelSet rescaled;
  Matrix standardized_values;
  Matrix rescaled_values;
};

/// Splits a normalization into standardization and gamma/beta rescaling and
/// runs CO detection on the input and on each stage.
inline NormDecomposition decompose_normalization(const ActivationSnapshot& input, const Vector& gamma,
                                                 const std::optional<Vector>& beta_shift, NormKind norm_kind,
                                                 const CoCriteria& criteria = {}, bool strip_input_mas = true,
                                                 float eps = 1e-5f) {
  const Matrix& raw = input.values;
  if (gamma.size() != raw.cols()) throw InvalidArgument("gamma length does not match channel count");
  if (norm_kind == NormKind::layernorm && !beta_shift) throw InvalidArgument("layernorm decomposition needs beta_shift");
  if (norm_kind == NormKind::rmsnorm && beta_shift) throw InvalidArgument("rmsnorm has no beta_shift");
  if (beta_shift && beta_shift->size() != raw.cols()) throw InvalidArgument("beta_shift length does not match channel count");

  const ActivationSnapshot source = strip_input_mas ? strip_massive_activations(input) : input;
  for (Eigen::Index t = 0; t < raw.rows(); ++t) {
    const auto row = source.values.row(t);
    double spread = 0.0;
    if (norm_kind == NormKind::layernorm) {
      const double mu = row.cast<double>().mean();
      spread = (row.cast<double>().array() - mu).square().sum();
    } else {
      spread = row.cast<double>().squaredNorm();
    }
    if (spread == 0.0) throw InvalidArgument("token " + std::to_string(t) + " has zero spread; normalization is degenerate");
  }

  NormDecomposition out;
  out.input = outlier_channels_of(source.values, criteria, input.tap);
  out.standardized_values = detail::standardize(source.values, norm_kind, eps);
  NormWeights w{gamma, beta_shift ? *beta_shift : Vector()};
  out.rescaled_values = detail::rescale(out.standardized_values, w);
  out.standardized = outlier_channels_of(out.standardized_values, criteria, input.tap);
  out.rescaled = outlier_channels_of(out.rescaled_values, criteria, input.tap);
  return out;
}

struct OtcSet {
  std::string weight_name;
  int layer = kAllLayers;
  std::vector<int> row_indices;
  double fraction = 0.0;
  std::vector<int> output_co;          // CO(output) channels
  std::vector<int> input_co;           // CO(input) channels neutralized in the recheck
};

/// Rows of `weight` (out x in) whose output channel is CO in `output` and stays
/// CO when the input's CO channels are replaced by the input tensor mean.
inline OtcSet identify_otcs(const Matrix& weight, const ActivationSnapshot& input, const ActivationSnapshot& output,
                            const CoCriteria& criteria = {}, const Vector& bias = Vector(), std::string weight_name = {}) {
  if (weight.cols() != input.values.cols() || weight.rows() != output.values.cols() ||
      input.values.rows() != output.values.rows())
    throw InvalidArgument("identify_otcs: weight " + std::to_string(weight.rows()) + "x" + std::to_string(weight.cols()) +
                          " does not map input width " + std::to_string(input.values.cols()) + " to output width " +
                          std::to_string(output.values.cols()) + " over matching tokens");
  if (bias.size() != 0 && bias.size() != weight.rows()) throw InvalidArgument("identify_otcs: bias length mismatch");

  OtcSet out;
  out.weight_name = std::move(weight_name);
  out.layer = output.tap.layer;
  const auto co_out = outlier_channels_of(output.values, criteria, output.tap);
  const auto co_in = outlier_channels_of(input.values, criteria, input.tap);
  out.output_co = co_out.channel_indices;
  out.input_co = co_in.channel_indices;

  Matrix neutral = input.values;
  const auto fill = static_cast<float>(co_in.tensor_mean);
  for (int c : co_in.channel_indices) neutral.col(c).setConstant(fill);
  Matrix recomputed = neutral * weight.transpose();
  detail::add_bias(recomputed, bias);
  const auto co_re = outlier_channels_of(recomputed, criteria, output.tap);

  for (int r : co_out.channel_indices)
    if (co_re.contains(r)) out.row_indices.push_back(r);
  out.fraction = static_cast<double>(out.row_indices.size()) / static_cast<double>(weight.rows());
  return out;
}

enum class ChannelStatistic { mean_abs, l2_norm };

/// Rows whose statistic (mean |w| by default) lies more than sd_threshold
/// cross-row standard deviations from the cross-row mean, on either side.
inline std::vector<int> weight_channel_statistics(const Matrix& weight, double sd_threshold,
                                                  ChannelStatistic stat = ChannelStatistic::mean_abs) {
  if (!(sd_threshold > 0.0)) throw InvalidArgument("sd_threshold must be > 0");
  if (weight.rows() < 2) throw InvalidArgument("weight channel statistics need at least two channels");
  std::vector<double> s(static_cast<size_t>(weight.rows()));
  for (Eigen::Index r = 0; r < weight.rows(); ++r) {
    double acc = 0.0;
    for (Eigen::Index c = 0; c < weight.cols(); ++c) {
      const double v = weight(r, c);
      acc += stat == ChannelStatistic::mean_abs ? std::fabs(v) : v * v;
    }
    s[static_cast<size_t>(r)] = stat == ChannelStatistic::mean_abs ? acc / static_cast<double>(weight.cols()) : std::sqrt(acc);
  }
  double mean = 0.0;
  for (double v : s) mean += v;
  mean /= static_cast<double>(s.size());
  double var = 0.0;
  for (double v : s) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(s.size()));
  std::vector<int> out;
  if (sd == 0.0) return out;
  for (size_t r = 0; r < s.size(); ++r)
    if (std::fabs(s[r] - mean) > sd_threshold * sd) out.push_back(static_cast<int>(r));
  return out;
}

/// Same statistic for a vector (gamma): each entry is its own channel.
inline std::vector<int> vector_channel_statistics(const Vector& v, double sd_threshold) {
  Matrix m(v.size(), 1);
  m.col(0) = v;
  return weight_channel_statistics(m, sd_threshold);
}

}  // namespace outlierscope
