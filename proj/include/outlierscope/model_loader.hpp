// Copyright 2026 The outlierscope Authors
// SPDX-License-Identifier: Apache-2.0

// Loads Hugging Face style checkpoint directories (config.json + safetensors)
// for GPT-2 and LLaMA-family (llama, mistral, qwen2) decoders.

#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "outlierscope/model.hpp"
#include "outlierscope/safetensors.hpp"

namespace outlierscope {

namespace detail {

inline TensorMap read_checkpoint_tensors(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  TensorMap all;
  std::vector<fs::path> files;
  if (fs::exists(dir / "model.safetensors.index.json")) {
    std::ifstream in(dir / "model.safetensors.index.json");
    const auto idx = nlohmann::json::parse(in);
    std::set<std::string> shards;
    for (const auto& [name, file] : idx.at("weight_map").items()) shards.insert(file.get<std::string>());
    for (const auto& s : shards) files.push_back(dir / s);
  } else if (fs::exists(dir / "model.safetensors")) {
    files.push_back(dir / "model.safetensors");
  } else {
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".safetensors") files.push_back(e.path());
    std::sort(files.begin(), files.end());
  }
  if (files.empty()) throw LoadError("no safetensors weights in " + dir.string());
  for (const auto& f : files) all.merge(read_safetensors(f));
  return all;
}

class TensorSource {
 public:
  TensorSource(TensorMap tensors, std::string prefix) : tensors_(std::move(tensors)), prefix_(std::move(prefix)) {}

  bool has(const std::string& name) const { return tensors_.count(prefix_ + name) || tensors_.count(name); }

  const HostTensor& get(const std::string& name) const {
    auto it = tensors_.find(prefix_ + name);
    if (it == tensors_.end()) it = tensors_.find(name);
    if (it == tensors_.end()) throw LoadError("missing weight '" + prefix_ + name + "'");
    return it->second;
  }

  Matrix matrix(const std::string& name) const { return get(name).as_matrix(); }
  Vector vector(const std::string& name) const { return get(name).as_vector(); }
  Vector optional_vector(const std::string& name) const { return has(name) ? vector(name) : Vector(); }

 private:
  TensorMap tensors_;
  std::string prefix_;
};

inline Activation parse_activation(const std::string& s) {
  if (s == "gelu_new" || s == "gelu_pytorch_tanh" || s == "gelu_fast") return Activation::gelu_tanh;
  if (s == "gelu") return Activation::gelu_erf;
  if (s == "silu" || s == "swish") return Activation::silu;
  if (s == "relu") return Activation::relu;
  throw UnsupportedArchitecture("unsupported activation function '" + s + "'");
}

inline DecoderModel load_gpt2(const nlohmann::json& cfg, TensorMap tensors, std::string model_id) {
  ModelDescriptor d;
  d.model_id = std::move(model_id);
  d.architecture = "gpt2";
  d.layer_count = cfg.at("n_layer").get<int>();
  d.hidden_dim = cfg.at("n_embd").get<int>();
  d.head_count = cfg.at("n_head").get<int>();
  d.kv_head_count = d.head_count;
  d.head_dim = d.hidden_dim / d.head_count;
  d.intermediate_dim = cfg.contains("n_inner") && !cfg.at("n_inner").is_null() ? cfg.at("n_inner").get<int>() : 4 * d.hidden_dim;
  d.vocab_size = cfg.at("vocab_size").get<int>();
  d.max_sequence_length = cfg.value("n_positions", cfg.value("n_ctx", 1024));
  d.ffn_kind = FfnKind::standard_mlp;
  d.norm_kind = NormKind::layernorm;
  d.activation = parse_activation(cfg.value("activation_function", "gelu_new"));
  d.positions = PositionEncoding::learned;
  d.norm_eps = cfg.value("layer_norm_epsilon", 1e-5f);

  const bool prefixed = tensors.count("transformer.wte.weight") != 0;
  const TensorSource src(std::move(tensors), prefixed ? "transformer." : "");
  ModelWeights w;
  w.wte = src.matrix("wte.weight");
  w.wpe = src.matrix("wpe.weight");
  // Conv1D stores [in, out]; transpose to out x in.
  for (int l = 0; l < d.layer_count; ++l) {
    const std::string p = "h." + std::to_string(l) + ".";
    LayerWeights lw;
    lw.ln_1 = {src.vector(p + "ln_1.weight"), src.vector(p + "ln_1.bias")};
    lw.ln_2 = {src.vector(p + "ln_2.weight"), src.vector(p + "ln_2.bias")};
    const Matrix qkv = src.matrix(p + "attn.c_attn.weight").transpose();
    const Vector qkv_b = src.vector(p + "attn.c_attn.bias");
    if (qkv.rows() != 3 * d.hidden_dim) throw LoadError("fused qkv weight has unexpected shape in layer " + std::to_string(l));
    const Eigen::Index H = d.hidden_dim;
    lw.wq = qkv.topRows(H);
    lw.wk = qkv.middleRows(H, H);
    lw.wv = qkv.bottomRows(H);
    lw.bq = qkv_b.segment(0, H);
    lw.bk = qkv_b.segment(H, H);
    lw.bv = qkv_b.segment(2 * H, H);
    lw.wo = src.matrix(p + "attn.c_proj.weight").transpose();
    lw.bo = src.vector(p + "attn.c_proj.bias");
    lw.w_fc = src.matrix(p + "mlp.c_fc.weight").transpose();
    lw.b_fc = src.vector(p + "mlp.c_fc.bias");
    lw.w_down = src.matrix(p + "mlp.c_proj.weight").transpose();
    lw.b_down = src.vector(p + "mlp.c_proj.bias");
    w.layers.push_back(std::move(lw));
  }
  w.ln_f = {src.vector("ln_f.weight"), src.vector("ln_f.bias")};
  if (src.has("lm_head.weight")) w.lm_head = src.matrix("lm_head.weight");
  return DecoderModel(std::move(d), std::move(w));
}

inline DecoderModel load_llama(const nlohmann::json& cfg, TensorMap tensors, std::string model_id, std::string arch) {
  ModelDescriptor d;
  d.model_id = std::move(model_id);
  d.architecture = std::move(arch);
  d.layer_count = cfg.at("num_hidden_layers").get<int>();
  d.hidden_dim = cfg.at("hidden_size").get<int>();
  d.intermediate_dim = cfg.at("intermediate_size").get<int>();
  d.head_count = cfg.at("num_attention_heads").get<int>();
  d.kv_head_count = cfg.value("num_key_value_heads", d.head_count);
  d.head_dim = cfg.contains("head_dim") && !cfg.at("head_dim").is_null() ? cfg.at("head_dim").get<int>() : d.hidden_dim / d.head_count;
  d.vocab_size = cfg.at("vocab_size").get<int>();
  d.max_sequence_length = cfg.value("max_position_embeddings", 2048);
  d.ffn_kind = FfnKind::gated_mlp;
  d.norm_kind = NormKind::rmsnorm;
  d.activation = parse_activation(cfg.value("hidden_act", "silu"));
  d.positions = PositionEncoding::rotary;
  d.norm_eps = cfg.value("rms_norm_eps", 1e-6f);
  d.rope_theta = cfg.value("rope_theta", 10000.0);
  if (cfg.contains("rope_scaling") && cfg.at("rope_scaling").is_object()) {
    const auto& rs = cfg.at("rope_scaling");
    const std::string type = rs.value("rope_type", rs.value("type", ""));
    if (type == "llama3") {
      d.rope_scaling.llama3 = true;
      d.rope_scaling.factor = rs.value("factor", 8.0);
      d.rope_scaling.low_freq_factor = rs.value("low_freq_factor", 1.0);
      d.rope_scaling.high_freq_factor = rs.value("high_freq_factor", 4.0);
      d.rope_scaling.original_max_position = rs.value("original_max_position_embeddings", 8192.0);
    } else if (!type.empty() && type != "default") {
      throw UnsupportedArchitecture("unsupported rope scaling '" + type + "'");
    }
  }

  const TensorSource src(std::move(tensors), "model.");
  ModelWeights w;
  w.wte = src.matrix("embed_tokens.weight");
  for (int l = 0; l < d.layer_count; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    LayerWeights lw;
    lw.ln_1 = {src.vector(p + "input_layernorm.weight"), {}};
    lw.ln_2 = {src.vector(p + "post_attention_layernorm.weight"), {}};
    lw.wq = src.matrix(p + "self_attn.q_proj.weight");
    lw.wk = src.matrix(p + "self_attn.k_proj.weight");
    lw.wv = src.matrix(p + "self_attn.v_proj.weight");
    lw.wo = src.matrix(p + "self_attn.o_proj.weight");
    lw.bq = src.optional_vector(p + "self_attn.q_proj.bias");
    lw.bk = src.optional_vector(p + "self_attn.k_proj.bias");
    lw.bv = src.optional_vector(p + "self_attn.v_proj.bias");
    lw.w_fc = src.matrix(p + "mlp.gate_proj.weight");
    lw.w_up = src.matrix(p + "mlp.up_proj.weight");
    lw.w_down = src.matrix(p + "mlp.down_proj.weight");
    w.layers.push_back(std::move(lw));
  }
  w.ln_f = {src.vector("norm.weight"), {}};
  if (!cfg.value("tie_word_embeddings", false)) w.lm_head = src.matrix("lm_head.weight");
  return DecoderModel(std::move(d), std::move(w));
}

}  // namespace detail

/// Writes a standard-MLP LayerNorm model in the GPT-2 checkpoint layout that
/// load_model reads back bit-identically.
inline void save_gpt2_checkpoint(const DecoderModel& model, const std::filesystem::path& dir,
                                 const nlohmann::json& extra_config = nlohmann::json::object()) {
  const auto& d = model.descriptor();
  const auto& w = model.weights();
  if (d.ffn_kind != FfnKind::standard_mlp || d.positions != PositionEncoding::learned || d.head_count != d.kv_head_count)
    throw InvalidArgument("only GPT-2 layout models can be saved");
  std::filesystem::create_directories(dir);
  auto bias = [](const Vector& b, Eigen::Index n) { return b.size() != 0 ? b : Vector(Vector::Zero(n)); };
  TensorMap t;
  t["wte.weight"] = HostTensor::from(w.wte);
  t["wpe.weight"] = HostTensor::from(w.wpe);
  const Eigen::Index H = d.hidden_dim;
  for (int l = 0; l < d.layer_count; ++l) {
    const auto& lw = w.layers[static_cast<size_t>(l)];
    const std::string p = "h." + std::to_string(l) + ".";
    t[p + "ln_1.weight"] = HostTensor::from(lw.ln_1.gamma);
    t[p + "ln_1.bias"] = HostTensor::from(lw.ln_1.beta);
    t[p + "ln_2.weight"] = HostTensor::from(lw.ln_2.gamma);
    t[p + "ln_2.bias"] = HostTensor::from(lw.ln_2.beta);
    Matrix qkv(3 * H, H);
    qkv << lw.wq, lw.wk, lw.wv;
    Vector qkv_b(3 * H);
    qkv_b << bias(lw.bq, H), bias(lw.bk, H), bias(lw.bv, H);
    t[p + "attn.c_attn.weight"] = HostTensor::from(Matrix(qkv.transpose()));
    t[p + "attn.c_attn.bias"] = HostTensor::from(qkv_b);
    t[p + "attn.c_proj.weight"] = HostTensor::from(Matrix(lw.wo.transpose()));
    t[p + "attn.c_proj.bias"] = HostTensor::from(bias(lw.bo, H));
    t[p + "mlp.c_fc.weight"] = HostTensor::from(Matrix(lw.w_fc.transpose()));
    t[p + "mlp.c_fc.bias"] = HostTensor::from(bias(lw.b_fc, d.intermediate_dim));
    t[p + "mlp.c_proj.weight"] = HostTensor::from(Matrix(lw.w_down.transpose()));
    t[p + "mlp.c_proj.bias"] = HostTensor::from(bias(lw.b_down, H));
  }
  t["ln_f.weight"] = HostTensor::from(w.ln_f.gamma);
  t["ln_f.bias"] = HostTensor::from(w.ln_f.beta);
  if (w.lm_head.size() != 0) t["lm_head.weight"] = HostTensor::from(w.lm_head);
  write_safetensors(dir / "model.safetensors", t);

  nlohmann::json cfg = {{"model_type", "gpt2"},
                        {"n_layer", d.layer_count},
                        {"n_embd", d.hidden_dim},
                        {"n_head", d.head_count},
                        {"n_inner", d.intermediate_dim},
                        {"n_positions", d.max_sequence_length},
                        {"vocab_size", d.vocab_size},
                        {"layer_norm_epsilon", d.norm_eps},
                        {"activation_function", d.activation == Activation::gelu_erf ? "gelu" : "gelu_new"}};
  cfg.update(extra_config);
  std::ofstream out(dir / "config.json");
  out << cfg.dump(2) << "\n";
  if (!out) throw Error("cannot write config.json in " + dir.string());
}

/// Reads `weights_location` and returns a resident model.
inline DecoderModel load_model(const std::string& model_id, const std::filesystem::path& weights_location) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(weights_location)) throw LoadError("checkpoint directory not found: " + weights_location.string());
  const auto cfg_path = weights_location / "config.json";
  if (!fs::exists(cfg_path)) throw LoadError("missing config.json in " + weights_location.string());
  nlohmann::json cfg;
  try {
    std::ifstream in(cfg_path);
    cfg = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("malformed config.json: ") + e.what());
  }
  const std::string type = cfg.value("model_type", "");
  if (cfg.value("is_encoder_decoder", false))
    throw UnsupportedArchitecture("'" + type + "' is an encoder-decoder model; only decoder-only causal LMs are supported");
  static const std::set<std::string> kEncoders = {"bert", "roberta", "t5", "bart", "mbart", "marian", "pegasus",
                                                  "whisper", "electra", "deberta", "deberta-v2", "distilbert"};
  if (kEncoders.count(type))
    throw UnsupportedArchitecture("'" + type + "' is not a decoder-only architecture");
  const std::string id = model_id.empty() ? weights_location.filename().string() : model_id;
  try {
    if (type == "gpt2") return detail::load_gpt2(cfg, detail::read_checkpoint_tensors(weights_location), id);
    if (type == "llama" || type == "mistral" || type == "qwen2")
      return detail::load_llama(cfg, detail::read_checkpoint_tensors(weights_location), id, type);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("config.json missing required field: ") + e.what());
  }
  throw UnsupportedArchitecture("unsupported model_type '" + type + "'");
}

}  // namespace outlierscope
