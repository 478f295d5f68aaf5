// Copyright 2026 The outlierscope Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "outlierscope/model.hpp"

namespace outlierscope {

struct SlotTopK {
  Slot slot = Slot::x1;
  std::vector<float> values;  // signed, by descending magnitude
  std::vector<std::pair<int, int>> positions;  // (token, channel) of each value
};

struct SublayerProfile {
  int layer = 0;
  int k = 2;
  std::vector<SlotTopK> slots;     // forward order
  std::vector<std::string> notes;  // slots omitted for this architecture
};

/// Top-k entries of `m` by magnitude; ties resolve to the earlier row-major entry.
inline SlotTopK top_k_entries(Slot slot, const Matrix& m, int k) {
  std::vector<Eigen::Index> order(static_cast<size_t>(m.size()));
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Eigen::Index>(i);
  const auto take = std::min<size_t>(static_cast<size_t>(k), order.size());
  const float* data = m.data();
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                    [&](Eigen::Index a, Eigen::Index b) {
                      const float fa = std::fabs(data[a]), fb = std::fabs(data[b]);
                      return fa != fb ? fa > fb : a < b;
                    });
  SlotTopK out;
  out.slot = slot;
  for (size_t i = 0; i < take; ++i) {
    out.values.push_back(data[order[i]]);
    out.positions.emplace_back(static_cast<int>(order[i] / m.cols()), static_cast<int>(order[i] % m.cols()));
  }
  return out;
}

/// Top-k signed values at every slot of one layer, optionally under tap plans.
inline SublayerProfile profile_sublayers(const DecoderModel& model, std::span<const int32_t> tokens, int layer, int k,
                                         std::span<const InterventionPlan> plans = {}) {
  const auto& d = model.descriptor();
  if (layer < 0 || layer >= d.layer_count) throw InvalidArgument("layer " + std::to_string(layer) + " does not exist");
  if (k < 1) throw InvalidArgument("k must be >= 1");
  SublayerProfile out;
  out.layer = layer;
  out.k = k;
  std::set<TapPoint> taps;
  for (Slot s : kAllSlots) {
    if (d.slot_defined(s)) {
      taps.emplace(s, layer);
    } else {
      out.notes.push_back(std::string(slot_name(s)) + ": not defined for " + std::string(ffn_kind_name(d.ffn_kind)));
    }
  }
  if (d.ffn_kind == FfnKind::standard_mlp) out.notes.push_back("y6: alias of y4 for standard_mlp");
  ForwardRequest req;
  req.taps = taps;
  req.plans = plans;
  req.pass_id = "sublayer@" + std::to_string(layer);
  req.compute_logits = false;
  for (const auto& snap : model.run(tokens, req).snapshots) out.slots.push_back(top_k_entries(snap.tap.slot, snap.values, k));
  return out;
}

}  // namespace outlierscope
