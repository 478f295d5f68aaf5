// Copyright 2026 The outlierscope Authors
// SPDX-License-Identifier: Apache-2.0

// Decoder-only transformer with named tap points. Supports the two layouts the
// toolkit studies: GPT-2 style (LayerNorm, learned positions, standard GeLU
// MLP) and LLaMA style (RMSNorm, rotary positions, gated SiLU MLP).

#pragma once

#include <cmath>
#include <numbers>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "outlierscope/activation.hpp"
#include "outlierscope/intervention_plan.hpp"

namespace outlierscope {

enum class FfnKind { gated_mlp, standard_mlp };
enum class NormKind { layernorm, rmsnorm };
enum class Activation { gelu_tanh, gelu_erf, silu, relu };
enum class PositionEncoding { learned, rotary };

inline std::string_view ffn_kind_name(FfnKind k) { return k == FfnKind::gated_mlp ? "gated_mlp" : "standard_mlp"; }
inline std::string_view norm_kind_name(NormKind k) { return k == NormKind::layernorm ? "layernorm" : "rmsnorm"; }

struct RopeScaling {
  bool llama3 = false;
  double factor = 1.0;
  double low_freq_factor = 1.0;
  double high_freq_factor = 4.0;
  double original_max_position = 8192;
};

struct ModelDescriptor {
  std::string model_id;
  std::string architecture;
  int layer_count = 0;
  int hidden_dim = 0;
  int intermediate_dim = 0;
  int head_count = 0;
  int kv_head_count = 0;
  int head_dim = 0;
  int vocab_size = 0;
  int max_sequence_length = 0;
  FfnKind ffn_kind = FfnKind::standard_mlp;
  NormKind norm_kind = NormKind::layernorm;
  Activation activation = Activation::gelu_tanh;
  PositionEncoding positions = PositionEncoding::learned;
  float norm_eps = 1e-5f;
  double rope_theta = 10000.0;
  RopeScaling rope_scaling;

  /// y5 exists only for gated MLPs; every other slot is defined everywhere.
  bool slot_defined(Slot s) const { return !(s == Slot::y5 && ffn_kind == FfnKind::standard_mlp); }

  /// Channel count of the tensor at `s` for a pass over `tokens` tokens.
  int tap_width(Slot s, int tokens) const {
    switch (s) {
      case Slot::x1: case Slot::x2: case Slot::x9:
      case Slot::y1: case Slot::y2: case Slot::y7: return hidden_dim;
      case Slot::x3: case Slot::x8: return head_count * head_dim;
      case Slot::x4: case Slot::x5: return kv_head_count * head_dim;
      case Slot::x6: case Slot::x7: return head_count * tokens;
      default: return intermediate_dim;
    }
  }

  void validate() const {
    if (layer_count <= 0 || hidden_dim <= 0 || intermediate_dim <= 0 || head_count <= 0 || kv_head_count <= 0 ||
        head_dim <= 0 || vocab_size <= 0 || max_sequence_length <= 0)
      throw LoadError("model descriptor has non-positive dimensions");
    if (head_count % kv_head_count != 0) throw LoadError("head count must be a multiple of kv head count");
  }
};

struct NormWeights {
  Vector gamma;
  Vector beta;  // empty for RMSNorm
};

struct LayerWeights {
  NormWeights ln_1;
  NormWeights ln_2;
  Matrix wq, wk, wv, wo;  // out x in
  Vector bq, bk, bv, bo;  // empty when the checkpoint has no bias
  Matrix w_fc;            // gate projection (gated) or first FC (standard): intermediate x hidden
  Vector b_fc;
  Matrix w_up;            // gated only
  Vector b_up;
  Matrix w_down;          // hidden x intermediate
  Vector b_down;
};

struct ModelWeights {
  Matrix wte;      // vocab x hidden
  Matrix wpe;      // positions x hidden; empty for rotary models
  std::vector<LayerWeights> layers;
  NormWeights ln_f;
  Matrix lm_head;  // vocab x hidden; empty means tied to wte
};

inline constexpr std::array<std::string_view, 7> kWeightNames = {"attn.q", "attn.k",  "attn.v",  "attn.o",
                                                                 "mlp.fc", "mlp.up", "mlp.down"};

/// A residual addition site: the add that closes `block` in `layer`.
struct ResidualSite {
  int layer = 0;
  BlockKind block = BlockKind::self_attention;
  auto operator<=>(const ResidualSite&) const = default;
};

struct ForwardRequest {
  std::set<TapPoint> taps;
  std::span<const InterventionPlan> plans;
  std::set<ResidualSite> disabled_residuals;
  std::string pass_id = "pass";
  bool compute_logits = true;
};

struct ForwardResult {
  Matrix logits;  // tokens x vocab
  std::vector<ActivationSnapshot> snapshots;  // in forward order
  size_t edited_entries = 0;
};

namespace detail {

inline float activate(Activation a, float v) {
  switch (a) {
    case Activation::gelu_tanh: {
      constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
      return 0.5f * v * (1.0f + std::tanh(k * (v + 0.044715f * v * v * v)));
    }
    case Activation::gelu_erf: return 0.5f * v * (1.0f + std::erf(v * 0.7071067811865476f));
    case Activation::silu: return v / (1.0f + std::exp(-v));
    case Activation::relu: return v > 0.0f ? v : 0.0f;
  }
  return v;
}

inline void add_bias(Matrix& m, const Vector& b) {
  if (b.size() == 0) return;
  m.rowwise() += b.transpose();
}

/// Token-wise standardization (LayerNorm) or RMS division (RMSNorm) only.
inline Matrix standardize(const Matrix& x, NormKind kind, float eps) {
  Matrix out(x.rows(), x.cols());
  const auto n = static_cast<double>(x.cols());
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const auto row = x.row(t);
    if (kind == NormKind::layernorm) {
      double mean = 0.0;
      for (Eigen::Index c = 0; c < x.cols(); ++c) mean += row(c);
      mean /= n;
      double var = 0.0;
      for (Eigen::Index c = 0; c < x.cols(); ++c) var += (row(c) - mean) * (row(c) - mean);
      var /= n;
      const double inv = 1.0 / std::sqrt(var + eps);
      for (Eigen::Index c = 0; c < x.cols(); ++c) out(t, c) = static_cast<float>((row(c) - mean) * inv);
    } else {
      double ms = 0.0;
      for (Eigen::Index c = 0; c < x.cols(); ++c) ms += static_cast<double>(row(c)) * row(c);
      ms /= n;
      const double inv = 1.0 / std::sqrt(ms + eps);
      for (Eigen::Index c = 0; c < x.cols(); ++c) out(t, c) = static_cast<float>(row(c) * inv);
    }
  }
  return out;
}

inline Matrix rescale(const Matrix& standardized, const NormWeights& w) {
  Matrix out = standardized;
  out.array().rowwise() *= w.gamma.transpose().array();
  if (w.beta.size() != 0) out.rowwise() += w.beta.transpose();
  return out;
}

inline Matrix normalize(const Matrix& x, const NormWeights& w, NormKind kind, float eps) {
  return rescale(standardize(x, kind, eps), w);
}

inline std::vector<double> rope_inv_freq(const ModelDescriptor& d) {
  std::vector<double> inv(static_cast<size_t>(d.head_dim / 2));
  for (size_t i = 0; i < inv.size(); ++i)
    inv[i] = 1.0 / std::pow(d.rope_theta, 2.0 * static_cast<double>(i) / d.head_dim);
  if (d.rope_scaling.llama3) {
    const auto& s = d.rope_scaling;
    const double low_wavelen = s.original_max_position / s.low_freq_factor;
    const double high_wavelen = s.original_max_position / s.high_freq_factor;
    for (double& f : inv) {
      const double wavelen = 2.0 * std::numbers::pi / f;
      if (wavelen > low_wavelen) {
        f /= s.factor;
      } else if (wavelen >= high_wavelen) {
        const double smooth = (s.original_max_position / wavelen - s.low_freq_factor) /
                              (s.high_freq_factor - s.low_freq_factor);
        f = (1.0 - smooth) * f / s.factor + smooth * f;
      }
    }
  }
  return inv;
}

/// Rotate-half rotary embedding applied in place to every head of `m`.
inline void apply_rope(Matrix& m, int heads, int head_dim, const std::vector<double>& inv_freq) {
  const int half = head_dim / 2;
  for (Eigen::Index t = 0; t < m.rows(); ++t) {
    for (int h = 0; h < heads; ++h) {
      float* v = m.row(t).data() + static_cast<ptrdiff_t>(h) * head_dim;
      for (int i = 0; i < half; ++i) {
        const double angle = static_cast<double>(t) * inv_freq[static_cast<size_t>(i)];
        const auto c = static_cast<float>(std::cos(angle));
        const auto s = static_cast<float>(std::sin(angle));
        const float a = v[i];
        const float b = v[i + half];
        v[i] = a * c - b * s;
        v[i + half] = b * c + a * s;
      }
    }
  }
}

}  // namespace detail

class DecoderModel {
 public:
  DecoderModel(ModelDescriptor descriptor, ModelWeights weights)
      : descriptor_(std::move(descriptor)), weights_(std::move(weights)) {
    descriptor_.validate();
    check_shapes();
    if (descriptor_.positions == PositionEncoding::rotary) inv_freq_ = detail::rope_inv_freq(descriptor_);
  }

  const ModelDescriptor& descriptor() const { return descriptor_; }
  const ModelWeights& weights() const { return weights_; }

  /// Mutable parameter access; edits must go through ParameterEditSession so
  /// they can be reverted.
  ModelWeights& mutable_weights() { return weights_; }

  Matrix& weight(int layer, std::string_view name) {
    return const_cast<Matrix&>(std::as_const(*this).weight(layer, name));
  }

  const Matrix& weight(int layer, std::string_view name) const {
    check_layer(layer);
    const auto& l = weights_.layers[static_cast<size_t>(layer)];
    if (name == "attn.q") return l.wq;
    if (name == "attn.k") return l.wk;
    if (name == "attn.v") return l.wv;
    if (name == "attn.o") return l.wo;
    if (name == "mlp.fc") return l.w_fc;
    if (name == "mlp.down") return l.w_down;
    if (name == "mlp.up") {
      if (descriptor_.ffn_kind != FfnKind::gated_mlp) throw InvalidArgument("mlp.up exists only in gated MLPs");
      return l.w_up;
    }
    throw InvalidArgument("unknown weight name '" + std::string(name) + "'");
  }

  NormWeights& norm(int layer, BlockKind block) {
    return const_cast<NormWeights&>(std::as_const(*this).norm(layer, block));
  }

  const NormWeights& norm(int layer, BlockKind block) const {
    check_layer(layer);
    const auto& l = weights_.layers[static_cast<size_t>(layer)];
    return block == BlockKind::self_attention ? l.ln_1 : l.ln_2;
  }

  /// Rejects anything that would fail mid-pass: bad tokens, unresolvable taps,
  /// out-of-range plan indices, parameter plans.
  void validate_request(std::span<const int32_t> tokens, const ForwardRequest& req) const {
    const int T = static_cast<int>(tokens.size());
    if (T == 0) throw InvalidArgument("empty token sequence");
    if (T > descriptor_.max_sequence_length)
      throw InvalidArgument("sequence of " + std::to_string(T) + " tokens exceeds max_sequence_length " +
                            std::to_string(descriptor_.max_sequence_length));
    for (int32_t id : tokens)
      if (id < 0 || id >= descriptor_.vocab_size) throw InvalidArgument("token id " + std::to_string(id) + " out of vocabulary");
    for (const auto& tap : req.taps) {
      if (tap.layer >= descriptor_.layer_count) throw InvalidArgument("tap " + tap.to_string() + " beyond layer count");
      if (!descriptor_.slot_defined(tap.slot))
        throw InvalidArgument("tap " + tap.to_string() + " is not defined for " + std::string(ffn_kind_name(descriptor_.ffn_kind)));
    }
    for (const auto& site : req.disabled_residuals)
      if (site.layer < 0 || site.layer >= descriptor_.layer_count)
        throw InvalidArgument("residual site layer " + std::to_string(site.layer) + " out of range");
    for (const auto& plan : req.plans) {
      if (plan.is_parameter_plan())
        throw InvalidArgument("gamma/weight plans are applied to parameters before the pass, not during it");
      if (!descriptor_.slot_defined(plan.slot))
        throw InvalidArgument("plan targets undefined slot " + std::string(slot_name(plan.slot)));
      for (int l : plan.layers)
        if (l < 0 || l >= descriptor_.layer_count) throw InvalidArgument("plan layer " + std::to_string(l) + " out of range");
      const int width = descriptor_.tap_width(plan.slot, T);
      for (const auto& i : plan.indices) {
        if (i.layer != kAllLayers && (i.layer < 0 || i.layer >= descriptor_.layer_count))
          throw InvalidArgument("plan layer " + std::to_string(i.layer) + " out of range");
        if (i.token < 0 || i.token >= T || i.channel < 0 || i.channel >= width)
          throw InvalidArgument("plan index (" + std::to_string(i.token) + ", " + std::to_string(i.channel) +
                                ") outside " + std::string(slot_name(plan.slot)) + " tensor of " + std::to_string(T) +
                                " x " + std::to_string(width));
      }
    }
  }

  ForwardResult run(std::span<const int32_t> tokens, const ForwardRequest& req) const {
    validate_request(tokens, req);
    const int T = static_cast<int>(tokens.size());
    const auto& d = descriptor_;
    ForwardResult result;

    auto visit = [&](Slot slot, int layer, Matrix& m) {
      const TapPoint tap(slot, layer);
      for (const auto& plan : req.plans)
        if (plan.applies_to(tap)) result.edited_entries += apply_tap_edit(plan, m, layer);
      if (req.taps.count(tap)) {
        if (!all_finite(m)) throw NonFiniteActivation("non-finite values at " + tap.to_string() + " in " + req.pass_id);
        result.snapshots.push_back({tap, m, req.pass_id});
      }
    };

    Matrix x(T, d.hidden_dim);
    for (int t = 0; t < T; ++t) {
      x.row(t) = weights_.wte.row(tokens[static_cast<size_t>(t)]);
      if (d.positions == PositionEncoding::learned) x.row(t) += weights_.wpe.row(t);
    }

    const int group = d.head_count / d.kv_head_count;
    const float scale = 1.0f / std::sqrt(static_cast<float>(d.head_dim));

    for (int l = 0; l < d.layer_count; ++l) {
      const auto& w = weights_.layers[static_cast<size_t>(l)];

      // Self-attention block.
      visit(Slot::x1, l, x);
      Matrix h = detail::normalize(x, w.ln_1, d.norm_kind, d.norm_eps);
      visit(Slot::x2, l, h);
      Matrix q = h * w.wq.transpose();
      detail::add_bias(q, w.bq);
      visit(Slot::x3, l, q);
      Matrix k = h * w.wk.transpose();
      detail::add_bias(k, w.bk);
      visit(Slot::x4, l, k);
      Matrix v = h * w.wv.transpose();
      detail::add_bias(v, w.bv);
      visit(Slot::x5, l, v);
      if (d.positions == PositionEncoding::rotary) {
        detail::apply_rope(q, d.head_count, d.head_dim, inv_freq_);
        detail::apply_rope(k, d.kv_head_count, d.head_dim, inv_freq_);
      }

      Matrix scores = Matrix::Zero(T, static_cast<Eigen::Index>(d.head_count) * T);
      for (int hd = 0; hd < d.head_count; ++hd) {
        const int kv = hd / group;
        const auto qh = q.middleCols(static_cast<Eigen::Index>(hd) * d.head_dim, d.head_dim);
        const auto kh = k.middleCols(static_cast<Eigen::Index>(kv) * d.head_dim, d.head_dim);
        Matrix s = (qh * kh.transpose()) * scale;
        for (int t = 0; t < T; ++t) s.row(t).tail(T - t - 1).setZero();
        scores.middleCols(static_cast<Eigen::Index>(hd) * T, T) = s;
      }
      visit(Slot::x6, l, scores);

      Matrix probs = Matrix::Zero(T, scores.cols());
      for (int hd = 0; hd < d.head_count; ++hd) {
        for (int t = 0; t < T; ++t) {
          const float* srow = scores.row(t).data() + static_cast<ptrdiff_t>(hd) * T;
          float* prow = probs.row(t).data() + static_cast<ptrdiff_t>(hd) * T;
          float mx = srow[0];
          for (int j = 1; j <= t; ++j) mx = std::max(mx, srow[j]);
          double sum = 0.0;
          for (int j = 0; j <= t; ++j) {
            prow[j] = std::exp(srow[j] - mx);
            sum += prow[j];
          }
          const auto inv = static_cast<float>(1.0 / sum);
          for (int j = 0; j <= t; ++j) prow[j] *= inv;
        }
      }
      visit(Slot::x7, l, probs);

      Matrix ctx(T, static_cast<Eigen::Index>(d.head_count) * d.head_dim);
      for (int hd = 0; hd < d.head_count; ++hd) {
        const int kv = hd / group;
        ctx.middleCols(static_cast<Eigen::Index>(hd) * d.head_dim, d.head_dim) =
            probs.middleCols(static_cast<Eigen::Index>(hd) * T, T) *
            v.middleCols(static_cast<Eigen::Index>(kv) * d.head_dim, d.head_dim);
      }
      visit(Slot::x8, l, ctx);
      Matrix attn_out = ctx * w.wo.transpose();
      detail::add_bias(attn_out, w.bo);
      visit(Slot::x9, l, attn_out);
      if (req.disabled_residuals.count({l, BlockKind::self_attention}))
        x = std::move(attn_out);
      else
        x += attn_out;

      // FFN block.
      visit(Slot::y1, l, x);
      Matrix h2 = detail::normalize(x, w.ln_2, d.norm_kind, d.norm_eps);
      visit(Slot::y2, l, h2);
      Matrix pre = h2 * w.w_fc.transpose();
      detail::add_bias(pre, w.b_fc);
      visit(Slot::y3, l, pre);
      Matrix act = pre.unaryExpr([a = d.activation](float val) { return detail::activate(a, val); });
      visit(Slot::y4, l, act);
      if (d.ffn_kind == FfnKind::gated_mlp) {
        Matrix up = h2 * w.w_up.transpose();
        detail::add_bias(up, w.b_up);
        visit(Slot::y5, l, up);
        act.array() *= up.array();
      }
      visit(Slot::y6, l, act);
      Matrix ffn_out = act * w.w_down.transpose();
      detail::add_bias(ffn_out, w.b_down);
      visit(Slot::y7, l, ffn_out);
      if (req.disabled_residuals.count({l, BlockKind::ffn}))
        x = std::move(ffn_out);
      else
        x += ffn_out;
    }

    if (req.compute_logits) {
      const Matrix hf = detail::normalize(x, weights_.ln_f, d.norm_kind, d.norm_eps);
      const Matrix& head = weights_.lm_head.size() != 0 ? weights_.lm_head : weights_.wte;
      result.logits = hf * head.transpose();
    }
    return result;
  }

 private:
  void check_layer(int layer) const {
    if (layer < 0 || layer >= descriptor_.layer_count) throw InvalidArgument("layer " + std::to_string(layer) + " out of range");
  }

  void check_shapes() const {
    const auto& d = descriptor_;
    auto expect = [](bool ok, const std::string& what) {
      if (!ok) throw LoadError("weight shape mismatch: " + what);
    };
    const Eigen::Index H = d.hidden_dim, I = d.intermediate_dim;
    const Eigen::Index Q = static_cast<Eigen::Index>(d.head_count) * d.head_dim;
    const Eigen::Index KV = static_cast<Eigen::Index>(d.kv_head_count) * d.head_dim;
    expect(weights_.wte.rows() == d.vocab_size && weights_.wte.cols() == H, "token embedding");
    if (d.positions == PositionEncoding::learned)
      expect(weights_.wpe.rows() >= d.max_sequence_length && weights_.wpe.cols() == H, "position embedding");
    expect(static_cast<int>(weights_.layers.size()) == d.layer_count, "layer count");
    auto norm_ok = [&](const NormWeights& n) {
      return n.gamma.size() == H && (d.norm_kind == NormKind::rmsnorm ? n.beta.size() == 0 || n.beta.size() == H
                                                                        : n.beta.size() == H);
    };
    for (size_t i = 0; i < weights_.layers.size(); ++i) {
      const auto& l = weights_.layers[i];
      const std::string at = " in layer " + std::to_string(i);
      expect(norm_ok(l.ln_1) && norm_ok(l.ln_2), "norm" + at);
      expect(l.wq.rows() == Q && l.wq.cols() == H, "query projection" + at);
      expect(l.wk.rows() == KV && l.wk.cols() == H, "key projection" + at);
      expect(l.wv.rows() == KV && l.wv.cols() == H, "value projection" + at);
      expect(l.wo.rows() == H && l.wo.cols() == Q, "output projection" + at);
      expect(l.w_fc.rows() == I && l.w_fc.cols() == H, "first FFN projection" + at);
      expect(l.w_down.rows() == H && l.w_down.cols() == I, "down projection" + at);
      if (d.ffn_kind == FfnKind::gated_mlp) expect(l.w_up.rows() == I && l.w_up.cols() == H, "up projection" + at);
      expect(l.bq.size() == 0 || l.bq.size() == Q, "query bias" + at);
      expect(l.bk.size() == 0 || l.bk.size() == KV, "key bias" + at);
      expect(l.bv.size() == 0 || l.bv.size() == KV, "value bias" + at);
      expect(l.bo.size() == 0 || l.bo.size() == H, "output bias" + at);
      expect(l.b_fc.size() == 0 || l.b_fc.size() == I, "FFN bias" + at);
      expect(l.b_down.size() == 0 || l.b_down.size() == H, "down bias" + at);
    }
    expect(norm_ok(weights_.ln_f), "final norm");
    expect(weights_.lm_head.size() == 0 || (weights_.lm_head.rows() == d.vocab_size && weights_.lm_head.cols() == H),
           "lm head");
  }

  ModelDescriptor descriptor_;
  ModelWeights weights_;
  std::vector<double> inv_freq_;
};

/// Forward pass recording `taps`, with optional tap-level plans applied in flight.
inline ForwardResult run_with_taps(const DecoderModel& model, std::span<const int32_t> tokens,
                                   const std::set<TapPoint>& taps, std::span<const InterventionPlan> plans = {},
                                   std::string pass_id = "pass") {
  ForwardRequest req;
  req.taps = taps;
  req.plans = plans;
  req.pass_id = std::move(pass_id);
  return model.run(tokens, req);
}

/// Forward pass with the listed residual additions skipped; returns snapshots only.
inline std::vector<ActivationSnapshot> run_without_residuals(const DecoderModel& model, std::span<const int32_t> tokens,
                                                             const std::set<ResidualSite>& disabled,
                                                             const std::set<TapPoint>& taps,
                                                             std::string pass_id = "no-residual") {
  ForwardRequest req;
  req.taps = taps;
  req.disabled_residuals = disabled;
  req.pass_id = std::move(pass_id);
  req.compute_logits = false;
  return model.run(tokens, req).snapshots;
}

/// Every residual add in the model.
inline std::set<ResidualSite> all_residual_sites(const ModelDescriptor& d) {
  std::set<ResidualSite> out;
  for (int l = 0; l < d.layer_count; ++l) {
    out.insert({l, BlockKind::self_attention});
    out.insert({l, BlockKind::ffn});
  }
  return out;
}

/// One tap per layer for `slot`.
inline std::set<TapPoint> taps_for_slot(const ModelDescriptor& d, Slot slot) {
  std::set<TapPoint> out;
  for (int l = 0; l < d.layer_count; ++l) out.emplace(slot, l);
  return out;
}

/// Digest of a token sequence, used to tie profiles to their input.
inline std::string token_digest(std::span<const int32_t> tokens) {
  return hex64(fnv1a64(std::string_view(reinterpret_cast<const char*>(tokens.data()), tokens.size_bytes())));
}

}  // namespace outlierscope
