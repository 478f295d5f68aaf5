// Copyright 2026 The outlierscope Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <compare>
#include <string>
#include <string_view>

#include "outlierscope/common.hpp"

namespace outlierscope {

enum class BlockKind { self_attention, ffn };

// Canonical tap map.
//
// Self-attention block:
//   x1 block input (pre-norm)          x2 norm output
//   x3 query projection                x4 key projection
//   x5 value projection                x6 scaled scores, pre-softmax (masked entries read 0)
//   x7 softmax output                  x8 attention-weighted values (heads concatenated)
//   x9 output projection, pre-residual
// FFN block:
//   y1 block input (pre-norm)          y2 norm output
//   y3 gate / first FC output          y4 activation output
//   y5 up projection (gated only)      y6 y4*y5 (gated) or alias of y4 (standard)
//   y7 down projection, pre-residual
enum class Slot : int { x1, x2, x3, x4, x5, x6, x7, x8, x9, y1, y2, y3, y4, y5, y6, y7 };

inline constexpr int kSlotCount = 16;

inline constexpr std::array<Slot, kSlotCount> kAllSlots = {
    Slot::x1, Slot::x2, Slot::x3, Slot::x4, Slot::x5, Slot::x6, Slot::x7, Slot::x8,
    Slot::x9, Slot::y1, Slot::y2, Slot::y3, Slot::y4, Slot::y5, Slot::y6, Slot::y7};

inline constexpr BlockKind block_of(Slot s) {
  return static_cast<int>(s) <= static_cast<int>(Slot::x9) ? BlockKind::self_attention
                                                            : BlockKind::ffn;
}

inline std::string_view slot_name(Slot s) {
  static constexpr std::array<std::string_view, kSlotCount> kNames = {
      "x1", "x2", "x3", "x4", "x5", "x6", "x7", "x8",
      "x9", "y1", "y2", "y3", "y4", "y5", "y6", "y7"};
  return kNames[static_cast<size_t>(s)];
}

inline Slot parse_slot(std::string_view text) {
  for (Slot s : kAllSlots)
    if (slot_name(s) == text) return s;
  throw InvalidArgument("unknown tap slot '" + std::string(text) + "'");
}

inline std::string_view block_name(BlockKind b) {
  return b == BlockKind::self_attention ? "self_attention" : "ffn";
}

inline BlockKind parse_block(std::string_view text) {
  if (text == "self_attention" || text == "attn" || text == "sa") return BlockKind::self_attention;
  if (text == "ffn" || text == "mlp") return BlockKind::ffn;
  throw InvalidArgument("unknown block kind '" + std::string(text) + "'");
}

/// A probe site: one slot of one decoder layer.
struct TapPoint {
  Slot slot = Slot::x1;
  int layer = 0;

  TapPoint() = default;
  TapPoint(Slot s, int layer_index) : slot(s), layer(layer_index) {
    if (layer_index < 0) throw InvalidArgument("negative layer index");
  }

  BlockKind block_kind() const { return block_of(slot); }

  /// Forward-pass order: layer-major, then slot order.
  int order() const { return layer * kSlotCount + static_cast<int>(slot); }

  auto operator<=>(const TapPoint& other) const { return order() <=> other.order(); }
  bool operator==(const TapPoint& other) const = default;

  /// "y6@3" for slot y6 of layer 3.
  std::string to_string() const { return std::string(slot_name(slot)) + "@" + std::to_string(layer); }

  static TapPoint parse(std::string_view text) {
    const auto at = text.find('@');
    if (at == std::string_view::npos) throw InvalidArgument("tap must look like 'y6@3', got '" + std::string(text) + "'");
    const Slot s = parse_slot(text.substr(0, at));
    int layer = 0;
    try {
      size_t used = 0;
      const std::string digits(text.substr(at + 1));
      layer = std::stoi(digits, &used);
      if (used != digits.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw InvalidArgument("bad layer index in tap '" + std::string(text) + "'");
    }
    return TapPoint(s, layer);
  }
};

}  // namespace outlierscope
