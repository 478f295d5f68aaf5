// Copyright 2026 The outlierscope Authors
// SPDX-License-Identifier: Apache-2.0

// Massive-activation (MA) detection, true/fake classification, and the
// initial-vs-final sign trend.
//
// An entry is massive when |v| > 100 and |v| >= 1000 * median(|entries|), the
// median taken over the whole snapshot.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "outlierscope/activation.hpp"

namespace outlierscope {

inline constexpr double kMaAbsoluteFloor = 100.0;
inline constexpr double kMaMedianRatio = 1000.0;

enum class MaKind { unclassified, true_ma, fake_ma };

inline std::string_view ma_kind_name(MaKind k) {
  switch (k) {
    case MaKind::true_ma: return "true_ma";
    case MaKind::fake_ma: return "fake_ma";
    default: return "unclassified";
  }
}

struct MassiveActivationEvent {
  TapPoint tap;
  int token_index = 0;
  int channel_index = 0;
  float value = 0.0f;
  MaKind kind = MaKind::unclassified;
};

inline bool is_massive(float value, double median) {
  const double mag = std::fabs(static_cast<double>(value));
  return mag > kMaAbsoluteFloor && mag >= kMaMedianRatio * median;
}

/// Every entry meeting both thresholds, in row-major order.
inline std::vector<MassiveActivationEvent> detect_mas(const ActivationSnapshot& snapshot) {
  const Matrix& v = snapshot.values;
  if (v.size() == 0) throw InvalidArgument("detect_mas: empty snapshot at " + snapshot.tap.to_string());
  if (!all_finite(v)) throw NonFiniteActivation("detect_mas: non-finite values at " + snapshot.tap.to_string());
  const double median = median_abs(v);
  std::vector<MassiveActivationEvent> events;
  for (Eigen::Index t = 0; t < v.rows(); ++t)
    for (Eigen::Index c = 0; c < v.cols(); ++c)
      if (is_massive(v(t, c), median))
        events.push_back({snapshot.tap, static_cast<int>(t), static_cast<int>(c), v(t, c), MaKind::unclassified});
  return events;
}

/// Replaces MA entries with the mean of the original tensor.
inline ActivationSnapshot strip_massive_activations(const ActivationSnapshot& snapshot) {
  ActivationSnapshot out = snapshot;
  const auto events = detect_mas(snapshot);
  if (events.empty()) return out;
  const auto mean = static_cast<float>(tensor_mean(snapshot.values));
  for (const auto& e : events) out.values(e.token_index, e.channel_index) = mean;
  return out;
}

inline void sort_by_magnitude(std::vector<MassiveActivationEvent>& events) {
  std::stable_sort(events.begin(), events.end(), [](const auto& a, const auto& b) {
    const float ma = std::fabs(a.value), mb = std::fabs(b.value);
    if (ma != mb) return ma > mb;
    if (a.token_index != b.token_index) return a.token_index < b.token_index;
    return a.channel_index < b.channel_index;
  });
}

/// Top-k MAs per layer at one slot, from a single forward pass.
struct MaProfile {
  Slot slot = Slot::x1;
  std::string pass_id;
  /// Digest of the input tokens; classification requires both profiles to share it.
  std::string input_digest;
  /// 0 keeps every event.
  int k = 3;
  std::vector<std::vector<MassiveActivationEvent>> layers;

  size_t event_count() const {
    size_t n = 0;
    for (const auto& l : layers) n += l.size();
    return n;
  }
};

/// Builds a profile from one snapshot per layer (all the same slot and pass).
inline MaProfile build_ma_profile(const std::vector<ActivationSnapshot>& per_layer, int k,
                                  std::string input_digest = {}) {
  if (k < 0) throw InvalidArgument("top-k must be >= 0");
  if (per_layer.empty()) throw InvalidArgument("build_ma_profile: no snapshots");
  MaProfile p;
  p.slot = per_layer.front().tap.slot;
  p.pass_id = per_layer.front().pass_id;
  p.input_digest = std::move(input_digest);
  p.k = k;
  int max_layer = 0;
  for (const auto& s : per_layer) max_layer = std::max(max_layer, s.tap.layer);
  p.layers.resize(static_cast<size_t>(max_layer) + 1);
  for (const auto& s : per_layer) {
    if (s.tap.slot != p.slot) throw InvalidArgument("build_ma_profile: mixed slots");
    if (s.pass_id != p.pass_id) throw InvalidArgument("build_ma_profile: mixed passes");
    auto events = detect_mas(s);
    sort_by_magnitude(events);
    if (k > 0 && events.size() > static_cast<size_t>(k)) events.resize(static_cast<size_t>(k));
    p.layers[static_cast<size_t>(s.tap.layer)] = std::move(events);
  }
  return p;
}

/// Marks each baseline event true_ma if an MA at the same (layer, token,
/// channel) survives with residual connections removed, fake_ma otherwise.
inline MaProfile classify_tma_fma(const MaProfile& baseline, const MaProfile& no_residual) {
  if (baseline.slot != no_residual.slot || baseline.input_digest != no_residual.input_digest ||
      baseline.layers.size() != no_residual.layers.size())
    throw InvalidArgument("classify_tma_fma: profiles come from different inputs or tap sets");
  MaProfile out = baseline;
  for (size_t l = 0; l < out.layers.size(); ++l) {
    const auto& survivors = no_residual.layers[l];
    for (auto& e : out.layers[l]) {
      const bool persists = std::any_of(survivors.begin(), survivors.end(), [&](const auto& s) {
        return s.token_index == e.token_index && s.channel_index == e.channel_index;
      });
      e.kind = persists ? MaKind::true_ma : MaKind::fake_ma;
    }
  }
  return out;
}

struct TrendOptions {
  double initial_fraction = 0.25;
  int final_count = 2;
};

struct TrendRecord {
  int token_index = 0;
  int channel_index = 0;
  int initial_layer = 0;
  float initial_value = 0.0f;
  int final_layer = 0;
  float final_value = 0.0f;
  bool sign_flipped = false;
};

struct TrendReport {
  std::vector<int> initial_layers;
  std::vector<int> final_layers;
  std::vector<TrendRecord> records;
};

/// Pairs each initial-layer TMA with TMAs at the same (token, channel) in the
/// final layers. Fake MAs never participate; unclassified events do.
inline TrendReport trend_analysis(const MaProfile& profile, const TrendOptions& options = {}) {
  TrendReport report;
  const int layer_count = static_cast<int>(profile.layers.size());
  if (layer_count == 0) return report;
  const int initial_end = std::max(1, static_cast<int>(std::floor(options.initial_fraction * layer_count)));
  for (int l = 0; l < std::min(initial_end, layer_count); ++l) report.initial_layers.push_back(l);
  for (int l = std::max(initial_end, layer_count - options.final_count); l < layer_count; ++l)
    report.final_layers.push_back(l);

  auto eligible = [](const MassiveActivationEvent& e) { return e.kind != MaKind::fake_ma; };

  std::map<std::pair<int, int>, std::pair<int, float>> initial;
  for (int l : report.initial_layers) {
    for (const auto& e : profile.layers[static_cast<size_t>(l)]) {
      if (!eligible(e)) continue;
      const auto key = std::make_pair(e.token_index, e.channel_index);
      auto it = initial.find(key);
      if (it == initial.end() || std::fabs(e.value) > std::fabs(it->second.second)) initial[key] = {l, e.value};
    }
  }
  for (const auto& [pos, first] : initial) {
    for (int l : report.final_layers) {
      for (const auto& e : profile.layers[static_cast<size_t>(l)]) {
        if (!eligible(e) || e.token_index != pos.first || e.channel_index != pos.second) continue;
        report.records.push_back({pos.first, pos.second, first.first, first.second, l, e.value,
                                  static_cast<double>(first.second) * static_cast<double>(e.value) < 0.0});
      }
    }
  }
  return report;
}

}  // namespace outlierscope
