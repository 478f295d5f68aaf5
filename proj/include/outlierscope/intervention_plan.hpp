// Copyright 2026 The outlierscope Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "outlierscope/activation.hpp"
#include "outlierscope/ma_analysis.hpp"

namespace outlierscope {

enum class PlanTargetKind { tap, gamma, weight };
enum class ReplacePolicy { replace_with_mean, replace_with_zero };
enum class MeanScope { whole_tensor, per_channel };
enum class IndexSelection { explicit_indices, detected_mas };

inline constexpr int kAllLayers = -1;

/// One edited position. Tap targets use (token, channel); gamma and weight
/// targets use channel only. layer == kAllLayers applies to every layer.
struct EditIndex {
  int layer = kAllLayers;
  int token = -1;
  int channel = 0;

  auto operator<=>(const EditIndex&) const = default;
};

/// A declarative, replayable edit of activations or parameters.
struct InterventionPlan {
  PlanTargetKind target = PlanTargetKind::tap;
  Slot slot = Slot::y6;
  /// gamma target: self_attention selects the pre-attention norm, ffn the pre-FFN norm.
  BlockKind norm_block = BlockKind::self_attention;
  /// weight target: attn.q | attn.k | attn.v | attn.o | mlp.fc | mlp.up | mlp.down
  std::string weight_name;
  IndexSelection selection = IndexSelection::explicit_indices;
  /// Layers scanned when selection == detected_mas; empty means all.
  std::vector<int> layers;
  std::vector<EditIndex> indices;
  ReplacePolicy policy = ReplacePolicy::replace_with_mean;
  MeanScope mean_scope = MeanScope::whole_tensor;
  bool mean_includes_targets = true;
  std::optional<uint64_t> seed;
  std::string label;

  bool is_parameter_plan() const { return target != PlanTargetKind::tap; }

  bool covers_layer(int layer) const {
    if (selection == IndexSelection::detected_mas)
      return layers.empty() || std::find(layers.begin(), layers.end(), layer) != layers.end();
    return std::any_of(indices.begin(), indices.end(),
                       [&](const EditIndex& i) { return i.layer == kAllLayers || i.layer == layer; });
  }

  bool applies_to(const TapPoint& tap) const {
    return target == PlanTargetKind::tap && tap.slot == slot && covers_layer(tap.layer);
  }
};

using PlanSet = std::vector<InterventionPlan>;

inline std::string_view policy_name(ReplacePolicy p) {
  return p == ReplacePolicy::replace_with_zero ? "zero" : "mean";
}

inline ReplacePolicy parse_policy(std::string_view s) {
  if (s == "mean" || s == "replace_with_mean") return ReplacePolicy::replace_with_mean;
  if (s == "zero" || s == "replace_with_zero") return ReplacePolicy::replace_with_zero;
  throw InvalidArgument("unknown policy '" + std::string(s) + "'");
}

/// Positions (token, channel) this plan edits in `m` at `layer`.
inline std::vector<std::pair<int, int>> materialize_tap_positions(const InterventionPlan& plan, const Matrix& m,
                                                                  int layer) {
  std::vector<std::pair<int, int>> out;
  if (!plan.covers_layer(layer)) return out;
  if (plan.selection == IndexSelection::detected_mas) {
    const ActivationSnapshot snap{TapPoint(plan.slot, layer), m, {}};
    for (const auto& e : detect_mas(snap)) out.emplace_back(e.token_index, e.channel_index);
    return out;
  }
  for (const auto& i : plan.indices)
    if (i.layer == kAllLayers || i.layer == layer) out.emplace_back(i.token, i.channel);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

/// Replaces the planned entries of `m` in place; untouched entries keep their bits.
inline size_t apply_tap_edit(const InterventionPlan& plan, Matrix& m, int layer) {
  const auto positions = materialize_tap_positions(plan, m, layer);
  if (positions.empty()) return 0;
  for (const auto& [t, c] : positions)
    if (t < 0 || t >= m.rows() || c < 0 || c >= m.cols())
      throw InvalidArgument("plan position (" + std::to_string(t) + ", " + std::to_string(c) +
                            ") outside tensor at " + TapPoint(plan.slot, layer).to_string());

  std::vector<float> fill(positions.size(), 0.0f);
  if (plan.policy == ReplacePolicy::replace_with_mean) {
    std::set<std::pair<int, int>> targets(positions.begin(), positions.end());
    if (plan.mean_scope == MeanScope::whole_tensor) {
      double sum = 0.0;
      double count = 0.0;
      for (Eigen::Index t = 0; t < m.rows(); ++t)
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
          if (!plan.mean_includes_targets && targets.count({static_cast<int>(t), static_cast<int>(c)})) continue;
          sum += m(t, c);
          count += 1.0;
        }
      std::fill(fill.begin(), fill.end(), count > 0 ? static_cast<float>(sum / count) : 0.0f);
    } else {
      for (size_t i = 0; i < positions.size(); ++i) {
        const int c = positions[i].second;
        double sum = 0.0;
        double count = 0.0;
        for (Eigen::Index t = 0; t < m.rows(); ++t) {
          if (!plan.mean_includes_targets && targets.count({static_cast<int>(t), c})) continue;
          sum += m(t, c);
          count += 1.0;
        }
        fill[i] = count > 0 ? static_cast<float>(sum / count) : 0.0f;
      }
    }
  }
  for (size_t i = 0; i < positions.size(); ++i) m(positions[i].first, positions[i].second) = fill[i];
  return positions.size();
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

inline nlohmann::json plan_to_json(const InterventionPlan& p) {
  nlohmann::json j;
  switch (p.target) {
    case PlanTargetKind::tap: j["target"] = {{"kind", "tap"}, {"slot", slot_name(p.slot)}}; break;
    case PlanTargetKind::gamma: j["target"] = {{"kind", "gamma"}, {"block", block_name(p.norm_block)}}; break;
    case PlanTargetKind::weight: j["target"] = {{"kind", "weight"}, {"name", p.weight_name}}; break;
  }
  j["selection"] = p.selection == IndexSelection::detected_mas ? "detected_mas" : "explicit";
  j["layers"] = p.layers;
  nlohmann::json idx = nlohmann::json::array();
  for (const auto& i : p.indices) {
    if (p.target == PlanTargetKind::tap)
      idx.push_back({i.layer, i.token, i.channel});
    else
      idx.push_back({i.layer, i.channel});
  }
  j["indices"] = idx;
  j["policy"] = policy_name(p.policy);
  j["mean_scope"] = p.mean_scope == MeanScope::per_channel ? "per_channel" : "whole_tensor";
  j["mean_includes_targets"] = p.mean_includes_targets;
  j["seed"] = p.seed ? nlohmann::json(*p.seed) : nlohmann::json(nullptr);
  j["label"] = p.label;
  return j;
}

inline InterventionPlan plan_from_json(const nlohmann::json& j) {
  try {
    InterventionPlan p;
    const auto& target = j.at("target");
    const std::string kind = target.at("kind").get<std::string>();
    if (kind == "tap") {
      p.target = PlanTargetKind::tap;
      p.slot = parse_slot(target.at("slot").get<std::string>());
    } else if (kind == "gamma") {
      p.target = PlanTargetKind::gamma;
      p.norm_block = parse_block(target.at("block").get<std::string>());
    } else if (kind == "weight") {
      p.target = PlanTargetKind::weight;
      p.weight_name = target.at("name").get<std::string>();
    } else {
      throw InvalidArgument("unknown plan target kind '" + kind + "'");
    }
    const std::string sel = j.value("selection", "explicit");
    if (sel == "detected_mas")
      p.selection = IndexSelection::detected_mas;
    else if (sel == "explicit")
      p.selection = IndexSelection::explicit_indices;
    else
      throw InvalidArgument("unknown selection '" + sel + "'");
    p.layers = j.value("layers", std::vector<int>{});
    for (const auto& row : j.value("indices", nlohmann::json::array())) {
      EditIndex e;
      if (p.target == PlanTargetKind::tap) {
        if (row.size() != 3) throw InvalidArgument("tap plan index must be [layer, token, channel]");
        e = {row[0].get<int>(), row[1].get<int>(), row[2].get<int>()};
      } else {
        if (row.size() != 2) throw InvalidArgument("parameter plan index must be [layer, channel]");
        e = {row[0].get<int>(), -1, row[1].get<int>()};
      }
      p.indices.push_back(e);
    }
    p.policy = parse_policy(j.value("policy", "mean"));
    const std::string scope = j.value("mean_scope", "whole_tensor");
    if (scope == "per_channel")
      p.mean_scope = MeanScope::per_channel;
    else if (scope == "whole_tensor")
      p.mean_scope = MeanScope::whole_tensor;
    else
      throw InvalidArgument("unknown mean_scope '" + scope + "'");
    p.mean_includes_targets = j.value("mean_includes_targets", true);
    if (j.contains("seed") && !j.at("seed").is_null()) p.seed = j.at("seed").get<uint64_t>();
    p.label = j.value("label", "");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("malformed plan JSON: ") + e.what());
  }
}

inline nlohmann::json plans_to_json(std::span<const InterventionPlan> plans) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : plans) arr.push_back(plan_to_json(p));
  return {{"plans", arr}};
}

inline PlanSet plans_from_json(const nlohmann::json& j) {
  PlanSet out;
  if (j.contains("plans")) {
    for (const auto& p : j.at("plans")) out.push_back(plan_from_json(p));
  } else {
    out.push_back(plan_from_json(j));
  }
  return out;
}

/// "baseline" for no plans, otherwise a digest of the canonical JSON.
inline std::string plan_digest(std::span<const InterventionPlan> plans) {
  if (plans.empty()) return "baseline";
  return hex64(fnv1a64(plans_to_json(plans).dump()));
}

}  // namespace outlierscope
