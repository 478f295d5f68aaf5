// Copyright 2026 The outlierscope Authors
// SPDX-License-Identifier: Apache-2.0

// Tiny random decoders for unit tests. Weights are drawn from a seeded normal
// so every test sees the same model.

#pragma once

#include <cstdint>
#include <string>

#include "outlierscope/model.hpp"
#include "outlierscope/random.hpp"

namespace toy {

using namespace outlierscope;

inline Matrix random_matrix(SeededRng& rng, Eigen::Index rows, Eigen::Index cols, double sd) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal() * sd);
  return m;
}

inline Vector random_vector(SeededRng& rng, Eigen::Index n, double mean, double sd) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = static_cast<float>(mean + rng.normal() * sd);
  return v;
}

struct Shape {
  int layers = 2;
  int hidden = 16;
  int heads = 2;
  int kv_heads = 2;
  int inner = 32;
  int vocab = 32;
  int positions = 32;
};

/// GPT-2 layout: LayerNorm with bias, learned positions, GeLU MLP, tied head.
inline DecoderModel gpt2(uint64_t seed = 7, Shape s = {}) {
  SeededRng rng(seed);
  ModelDescriptor d;
  d.model_id = "toy-gpt2";
  d.architecture = "gpt2";
  d.layer_count = s.layers;
  d.hidden_dim = s.hidden;
  d.intermediate_dim = s.inner;
  d.head_count = s.heads;
  d.kv_head_count = s.heads;
  d.head_dim = s.hidden / s.heads;
  d.vocab_size = s.vocab;
  d.max_sequence_length = s.positions;
  d.ffn_kind = FfnKind::standard_mlp;
  d.norm_kind = NormKind::layernorm;
  d.activation = Activation::gelu_tanh;
  d.positions = PositionEncoding::learned;

  ModelWeights w;
  w.wte = random_matrix(rng, s.vocab, s.hidden, 0.5);
  w.wpe = random_matrix(rng, s.positions, s.hidden, 0.1);
  for (int l = 0; l < s.layers; ++l) {
    LayerWeights lw;
    lw.ln_1 = {random_vector(rng, s.hidden, 1.0, 0.1), random_vector(rng, s.hidden, 0.0, 0.05)};
    lw.ln_2 = {random_vector(rng, s.hidden, 1.0, 0.1), random_vector(rng, s.hidden, 0.0, 0.05)};
    lw.wq = random_matrix(rng, s.hidden, s.hidden, 0.3);
    lw.wk = random_matrix(rng, s.hidden, s.hidden, 0.3);
    lw.wv = random_matrix(rng, s.hidden, s.hidden, 0.3);
    lw.wo = random_matrix(rng, s.hidden, s.hidden, 0.3);
    lw.bq = random_vector(rng, s.hidden, 0.0, 0.02);
    lw.bk = random_vector(rng, s.hidden, 0.0, 0.02);
    lw.bv = random_vector(rng, s.hidden, 0.0, 0.02);
    lw.bo = random_vector(rng, s.hidden, 0.0, 0.02);
    lw.w_fc = random_matrix(rng, s.inner, s.hidden, 0.3);
    lw.b_fc = random_vector(rng, s.inner, 0.0, 0.02);
    lw.w_down = random_matrix(rng, s.hidden, s.inner, 0.2);
    lw.b_down = random_vector(rng, s.hidden, 0.0, 0.02);
    w.layers.push_back(std::move(lw));
  }
  w.ln_f = {random_vector(rng, s.hidden, 1.0, 0.1), random_vector(rng, s.hidden, 0.0, 0.05)};
  return DecoderModel(std::move(d), std::move(w));
}

/// LLaMA layout: RMSNorm, rotary positions, gated SiLU MLP, grouped KV heads,
/// untied head.
inline DecoderModel llama(uint64_t seed = 11, Shape s = {.layers = 2, .hidden = 16, .heads = 4, .kv_heads = 2}) {
  SeededRng rng(seed);
  ModelDescriptor d;
  d.model_id = "toy-llama";
  d.architecture = "llama";
  d.layer_count = s.layers;
  d.hidden_dim = s.hidden;
  d.intermediate_dim = s.inner;
  d.head_count = s.heads;
  d.kv_head_count = s.kv_heads;
  d.head_dim = s.hidden / s.heads;
  d.vocab_size = s.vocab;
  d.max_sequence_length = s.positions;
  d.ffn_kind = FfnKind::gated_mlp;
  d.norm_kind = NormKind::rmsnorm;
  d.activation = Activation::silu;
  d.positions = PositionEncoding::rotary;
  d.norm_eps = 1e-6f;

  const Eigen::Index kv = static_cast<Eigen::Index>(s.kv_heads) * d.head_dim;
  ModelWeights w;
  w.wte = random_matrix(rng, s.vocab, s.hidden, 0.5);
  for (int l = 0; l < s.layers; ++l) {
    LayerWeights lw;
    lw.ln_1 = {random_vector(rng, s.hidden, 1.0, 0.1), {}};
    lw.ln_2 = {random_vector(rng, s.hidden, 1.0, 0.1), {}};
    lw.wq = random_matrix(rng, s.hidden, s.hidden, 0.3);
    lw.wk = random_matrix(rng, kv, s.hidden, 0.3);
    lw.wv = random_matrix(rng, kv, s.hidden, 0.3);
    lw.wo = random_matrix(rng, s.hidden, s.hidden, 0.3);
    lw.w_fc = random_matrix(rng, s.inner, s.hidden, 0.3);
    lw.w_up = random_matrix(rng, s.inner, s.hidden, 0.3);
    lw.w_down = random_matrix(rng, s.hidden, s.inner, 0.2);
    w.layers.push_back(std::move(lw));
  }
  w.ln_f = {random_vector(rng, s.hidden, 1.0, 0.1), {}};
  w.lm_head = random_matrix(rng, s.vocab, s.hidden, 0.3);
  return DecoderModel(std::move(d), std::move(w));
}

inline TokenSequence tokens(int n, int vocab, uint64_t seed = 3) {
  SeededRng rng(seed);
  TokenSequence out;
  for (int i = 0; i < n; ++i) out.push_back(static_cast<int32_t>(rng.below(static_cast<uint64_t>(vocab))));
  return out;
}

}  // namespace toy
