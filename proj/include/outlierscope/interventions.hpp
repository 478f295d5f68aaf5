// Copyright 2026 The outlierscope Authors
// SPDX-License-Identifier: Apache-2.0

// Plan builders and the reversible parameter-edit session.

#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "outlierscope/intervention_plan.hpp"
#include "outlierscope/model.hpp"
#include "outlierscope/random.hpp"

namespace outlierscope {

/// Replaces exactly the given events; all events must come from `site`.
inline InterventionPlan plan_tma_removal(Slot site, ReplacePolicy policy, const std::vector<MassiveActivationEvent>& events) {
  if (site != Slot::y6 && site != Slot::y7) throw InvalidArgument("TMA removal site must be y6 or y7");
  InterventionPlan p;
  p.target = PlanTargetKind::tap;
  p.slot = site;
  p.policy = policy;
  p.mean_scope = MeanScope::whole_tensor;
  p.label = "tma-" + std::string(policy_name(policy)) + "@" + std::string(slot_name(site));
  std::set<EditIndex> seen;
  for (const auto& e : events) {
    if (e.tap.slot != site) throw InvalidArgument("event at " + e.tap.to_string() + " does not come from " + std::string(slot_name(site)));
    const EditIndex idx{e.tap.layer, e.token_index, e.channel_index};
    if (seen.insert(idx).second) p.indices.push_back(idx);
  }
  return p;
}

/// Same removal, but positions are re-detected at `site` on every pass.
inline InterventionPlan plan_tma_removal_detected(Slot site, ReplacePolicy policy, std::vector<int> layers = {}) {
  if (site != Slot::y6 && site != Slot::y7) throw InvalidArgument("TMA removal site must be y6 or y7");
  InterventionPlan p;
  p.target = PlanTargetKind::tap;
  p.slot = site;
  p.selection = IndexSelection::detected_mas;
  p.layers = std::move(layers);
  p.policy = policy;
  p.mean_scope = MeanScope::whole_tensor;
  p.label = "tma-" + std::string(policy_name(policy)) + "@" + std::string(slot_name(site)) + "-detected";
  return p;
}

inline InterventionPlan plan_gamma_edit(int layer, BlockKind block, const std::vector<int>& indices, ReplacePolicy policy) {
  if (layer < 0 && layer != kAllLayers) throw InvalidArgument("bad gamma layer");
  InterventionPlan p;
  p.target = PlanTargetKind::gamma;
  p.norm_block = block;
  p.policy = policy;
  p.mean_scope = MeanScope::whole_tensor;
  std::set<int> seen;
  for (int c : indices) {
    if (c < 0) throw InvalidArgument("negative gamma index");
    if (seen.insert(c).second) p.indices.push_back({layer, -1, c});
  }
  p.label = "gamma-" + std::string(policy_name(policy)) + "@" + std::string(block_name(block));
  return p;
}

/// Rows of `weight_name`, each with its own layer (kAllLayers for every layer).
inline InterventionPlan plan_weight_ablation(const std::string& weight_name, const std::vector<EditIndex>& rows,
                                             ReplacePolicy policy, MeanScope scope = MeanScope::per_channel) {
  if (std::find(kWeightNames.begin(), kWeightNames.end(), weight_name) == kWeightNames.end())
    throw InvalidArgument("unknown weight name '" + weight_name + "'");
  InterventionPlan p;
  p.target = PlanTargetKind::weight;
  p.weight_name = weight_name;
  p.policy = policy;
  p.mean_scope = scope;
  std::set<EditIndex> seen;
  for (auto r : rows) {
    r.token = -1;
    if (r.channel < 0) throw InvalidArgument("negative weight row");
    if (seen.insert(r).second) p.indices.push_back(r);
  }
  p.label = "weight-" + std::string(policy_name(policy)) + "@" + weight_name;
  return p;
}

/// `count` distinct indices from [0, total) \ exclude, reproducible under seed.
inline std::vector<int> sample_random_channels(int total, int count, uint64_t seed, const std::set<int>& exclude = {}) {
  if (total < 0 || count < 0) throw InvalidArgument("total and count must be non-negative");
  std::vector<int> pool;
  for (int i = 0; i < total; ++i)
    if (!exclude.count(i)) pool.push_back(i);
  if (static_cast<size_t>(count) > pool.size())
    throw InvalidArgument("cannot sample " + std::to_string(count) + " channels from " + std::to_string(pool.size()) + " available");
  SeededRng rng(seed);
  for (int i = 0; i < count; ++i) {
    const auto j = static_cast<size_t>(i) + rng.below(pool.size() - static_cast<size_t>(i));
    std::swap(pool[static_cast<size_t>(i)], pool[j]);
  }
  pool.resize(static_cast<size_t>(count));
  std::sort(pool.begin(), pool.end());
  return pool;
}

/// Checks a parameter plan against the model; throws before anything is edited.
inline void validate_parameter_plan(const DecoderModel& model, const InterventionPlan& plan) {
  const auto& d = model.descriptor();
  if (!plan.is_parameter_plan()) throw InvalidArgument("not a parameter plan");
  if (plan.selection != IndexSelection::explicit_indices) throw InvalidArgument("parameter plans need explicit indices");
  for (const auto& i : plan.indices) {
    if (i.layer != kAllLayers && (i.layer < 0 || i.layer >= d.layer_count))
      throw InvalidArgument("plan layer " + std::to_string(i.layer) + " out of range");
    const int probe = i.layer == kAllLayers ? 0 : i.layer;
    const Eigen::Index bound = plan.target == PlanTargetKind::gamma ? model.norm(probe, plan.norm_block).gamma.size()
                                                                    : model.weight(probe, plan.weight_name).rows();
    if (i.channel < 0 || i.channel >= bound)
      throw InvalidArgument("index " + std::to_string(i.channel) + " outside " +
                            (plan.target == PlanTargetKind::gamma ? std::string("gamma of length ")
                                                                  : plan.weight_name + " with rows ") +
                            std::to_string(bound));
  }
}

/// Applies gamma/weight plans on construction and restores the original bits
/// on destruction (or revert()).
class ParameterEditSession {
 public:
  ParameterEditSession(DecoderModel& model, std::span<const InterventionPlan> plans) : model_(model) {
    for (const auto& p : plans)
      if (p.is_parameter_plan()) validate_parameter_plan(model, p);
    for (const auto& p : plans)
      if (p.is_parameter_plan()) apply(p);
  }

  ParameterEditSession(const ParameterEditSession&) = delete;
  ParameterEditSession& operator=(const ParameterEditSession&) = delete;

  ~ParameterEditSession() { revert(); }

  void revert() {
    // Undo in reverse so overlapping edits restore the earliest saved value.
    for (auto it = saved_.rbegin(); it != saved_.rend(); ++it) *it->first = it->second;
    saved_.clear();
  }

  size_t edited_values() const { return edited_; }

 private:
  void save(float* slot) { saved_.emplace_back(slot, *slot); }

  void apply(const InterventionPlan& p) {
    const int L = model_.descriptor().layer_count;
    std::map<int, std::vector<int>> by_layer;
    for (const auto& i : p.indices) {
      if (i.layer == kAllLayers)
        for (int l = 0; l < L; ++l) by_layer[l].push_back(i.channel);
      else
        by_layer[i.layer].push_back(i.channel);
    }
    for (auto& [layer, chans] : by_layer) {
      std::sort(chans.begin(), chans.end());
      chans.erase(std::unique(chans.begin(), chans.end()), chans.end());
      if (p.target == PlanTargetKind::gamma) {
        Vector& g = model_.norm(layer, p.norm_block).gamma;
        const auto fill = p.policy == ReplacePolicy::replace_with_mean ? static_cast<float>(g.cast<double>().mean()) : 0.0f;
        for (int c : chans) {
          save(&g(c));
          g(c) = fill;
          ++edited_;
        }
      } else {
        Matrix& w = model_.weight(layer, p.weight_name);
        const float whole = p.policy == ReplacePolicy::replace_with_mean && p.mean_scope == MeanScope::whole_tensor
                                ? static_cast<float>(w.cast<double>().mean())
                                : 0.0f;
        for (int r : chans) {
          float fill = 0.0f;
          if (p.policy == ReplacePolicy::replace_with_mean)
            fill = p.mean_scope == MeanScope::per_channel ? static_cast<float>(w.row(r).cast<double>().mean()) : whole;
          for (Eigen::Index c = 0; c < w.cols(); ++c) {
            save(&w(r, c));
            w(r, c) = fill;
            ++edited_;
          }
        }
      }
    }
  }

  DecoderModel& model_;
  std::vector<std::pair<float*, float>> saved_;
  size_t edited_ = 0;
};

/// Forward pass with a mixed plan set: parameter plans are applied for the
/// duration of the call, tap plans in flight.
inline ForwardResult run_with_plans(DecoderModel& model, std::span<const int32_t> tokens, const std::set<TapPoint>& taps,
                                    std::span<const InterventionPlan> plans, std::string pass_id = "pass") {
  std::vector<InterventionPlan> tap_plans;
  for (const auto& p : plans)
    if (!p.is_parameter_plan()) tap_plans.push_back(p);
  ParameterEditSession session(model, plans);
  return run_with_taps(model, tokens, taps, tap_plans, std::move(pass_id));
}

}  // namespace outlierscope
