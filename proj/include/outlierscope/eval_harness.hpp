// Copyright 2026 The outlierscope Authors
// SPDX-License-Identifier: Apache-2.0

// Corpus ingestion, fixed-seed sampling and perplexity.
//
// Scoring convention: each sample of L tokens contributes the next-token NLL
// at target positions 1..L-1; windows do not overlap unless stride < L.

#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "outlierscope/interventions.hpp"
#include "outlierscope/model.hpp"
#include "outlierscope/tokenizer.hpp"

namespace outlierscope {

enum class DatasetKind { wikitext, c4, local_text };

inline std::string_view dataset_name(DatasetKind k) {
  switch (k) {
    case DatasetKind::wikitext: return "wikitext";
    case DatasetKind::c4: return "c4";
    default: return "local";
  }
}

inline DatasetKind parse_dataset(std::string_view s) {
  if (s == "wikitext") return DatasetKind::wikitext;
  if (s == "c4") return DatasetKind::c4;
  if (s == "local" || s == "local_text") return DatasetKind::local_text;
  throw InvalidArgument("unknown dataset '" + std::string(s) + "'");
}

struct EvalConfig {
  DatasetKind dataset = DatasetKind::wikitext;
  int sample_count = 100;
  uint64_t seed = 0;
  int sequence_length = 1024;
  int stride = 0;  // 0 means sequence_length

  int effective_stride() const { return stride > 0 ? stride : sequence_length; }

  void validate(int model_max = std::numeric_limits<int>::max()) const {
    if (sample_count < 1) throw InvalidArgument("sample_count must be >= 1");
    if (sequence_length < 2) throw InvalidArgument("sequence_length must be >= 2");
    if (sequence_length > model_max)
      throw InvalidArgument("sequence_length " + std::to_string(sequence_length) + " exceeds model max " + std::to_string(model_max));
    if (stride < 0) throw InvalidArgument("stride must be >= 0");
  }
};

inline nlohmann::json to_json(const EvalConfig& c) {
  return {{"dataset", dataset_name(c.dataset)},
          {"sample_count", c.sample_count},
          {"seed", c.seed},
          {"sequence_length", c.sequence_length},
          {"stride", c.effective_stride()}};
}

inline EvalConfig eval_config_from_json(const nlohmann::json& j) {
  EvalConfig c;
  c.dataset = parse_dataset(j.at("dataset").get<std::string>());
  c.sample_count = j.at("sample_count").get<int>();
  c.seed = j.at("seed").get<uint64_t>();
  c.sequence_length = j.at("sequence_length").get<int>();
  c.stride = j.value("stride", 0);
  return c;
}

namespace detail {

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw LoadError("cannot read corpus file " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::filesystem::path pick_file(const std::filesystem::path& dir, const std::vector<std::string>& preferred,
                                       const std::vector<std::string>& extensions) {
  for (const auto& name : preferred)
    if (std::filesystem::exists(dir / name)) return dir / name;
  std::vector<std::filesystem::path> found;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    for (const auto& ext : extensions)
      if (e.is_regular_file() && e.path().extension() == ext) found.push_back(e.path());
  if (found.empty()) throw LoadError("no corpus file found in " + dir.string());
  std::sort(found.begin(), found.end());
  return found.front();
}

}  // namespace detail

/// Corpus text: wikitext raw files as-is, C4 JSON-lines documents joined by
/// newlines, local text as-is. Directories resolve to the conventional file.
inline std::string read_corpus_text(DatasetKind kind, const std::filesystem::path& location) {
  namespace fs = std::filesystem;
  if (!fs::exists(location)) throw LoadError("corpus not found: " + location.string());
  fs::path file = location;
  if (fs::is_directory(location)) {
    switch (kind) {
      case DatasetKind::wikitext:
        file = detail::pick_file(location, {"wiki.test.raw", "test.txt", "wiki.valid.raw"}, {".raw", ".txt"});
        break;
      case DatasetKind::c4:
        file = detail::pick_file(location, {"c4-validation.00000-of-00008.json", "validation.jsonl"}, {".jsonl", ".json"});
        break;
      default:
        file = detail::pick_file(location, {}, {".txt"});
    }
  }
  if (kind != DatasetKind::c4) return detail::slurp(file);
  std::ifstream in(file);
  if (!in) throw LoadError("cannot read corpus file " + file.string());
  std::string line, out;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto doc = nlohmann::json::parse(line);
      if (!out.empty()) out.push_back('\n');
      out += doc.at("text").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("malformed JSON line " + std::to_string(lineno) + " in " + file.string() + ": " + e.what());
    }
  }
  return out;
}

struct CorpusSample {
  size_t start = 0;  // token offset of the window in the corpus stream
  TokenSequence tokens;
};

/// Windows of exactly sequence_length tokens (short tail dropped); picks
/// sample_count distinct windows uniformly under seed, returned by offset.
inline std::vector<CorpusSample> sample_token_stream(const EvalConfig& config, const TokenSequence& stream) {
  config.validate();
  const auto L = static_cast<size_t>(config.sequence_length);
  const auto stride = static_cast<size_t>(config.effective_stride());
  const size_t windows = stream.size() < L ? 0 : (stream.size() - L) / stride + 1;
  if (windows < static_cast<size_t>(config.sample_count))
    throw InvalidArgument("corpus provides " + std::to_string(windows) + " sequences of " + std::to_string(L) +
                          " tokens; " + std::to_string(config.sample_count) + " requested");
  const auto picks = sample_random_channels(static_cast<int>(windows), config.sample_count, config.seed);
  std::vector<CorpusSample> out;
  for (int w : picks) {
    const size_t start = static_cast<size_t>(w) * stride;
    out.push_back({start, TokenSequence(stream.begin() + static_cast<std::ptrdiff_t>(start),
                                        stream.begin() + static_cast<std::ptrdiff_t>(start + L))});
  }
  return out;
}

inline std::vector<CorpusSample> sample_corpus(const EvalConfig& config, const std::filesystem::path& corpus_location,
                                               const Tokenizer& tokenizer) {
  const auto text = read_corpus_text(config.dataset, corpus_location);
  if (text.empty()) throw InvalidArgument("corpus " + corpus_location.string() + " is empty");
  return sample_token_stream(config, tokenizer.encode(text));
}

struct PplResult {
  double perplexity = 0.0;
  double mean_nll = 0.0;
  size_t token_count = 0;
  bool diverged = false;
  EvalConfig config;
  std::string plan_digest = "baseline";
};

inline nlohmann::json to_json(const PplResult& r) {
  nlohmann::json j = {{"perplexity", r.diverged ? nlohmann::json(nullptr) : nlohmann::json(r.perplexity)},
                      {"mean_nll", std::isfinite(r.mean_nll) ? nlohmann::json(r.mean_nll) : nlohmann::json(nullptr)},
                      {"token_count", r.token_count},
                      {"diverged", r.diverged},
                      {"config", to_json(r.config)},
                      {"plan_digest", r.plan_digest}};
  return j;
}

/// Summed next-token NLL (double) over positions 1..L-1 of one logits matrix.
inline double sequence_nll(const Matrix& logits, std::span<const int32_t> tokens) {
  double total = 0.0;
  for (Eigen::Index t = 0; t + 1 < logits.rows(); ++t) {
    const auto row = logits.row(t);
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index v = 0; v < row.size(); ++v) mx = std::max(mx, static_cast<double>(row(v)));
    double sum = 0.0;
    for (Eigen::Index v = 0; v < row.size(); ++v) sum += std::exp(static_cast<double>(row(v)) - mx);
    const double logz = mx + std::log(sum);
    total += logz - static_cast<double>(row(tokens[static_cast<size_t>(t) + 1]));
  }
  return total;
}

/// Perplexity with `plans` applied to every pass. Parameter plans are held for
/// the whole evaluation and reverted afterwards.
inline PplResult evaluate_ppl(DecoderModel& model, const std::vector<CorpusSample>& samples,
                              std::span<const InterventionPlan> plans = {}, const EvalConfig& config = {}) {
  if (samples.empty()) throw InvalidArgument("evaluate_ppl: no samples");
  std::vector<InterventionPlan> tap_plans;
  for (const auto& p : plans)
    if (!p.is_parameter_plan()) tap_plans.push_back(p);
  ParameterEditSession session(model, plans);

  PplResult r;
  r.config = config;
  r.plan_digest = plan_digest(plans);
  double total = 0.0;
  for (const auto& s : samples) {
    ForwardRequest req;
    req.plans = tap_plans;
    req.pass_id = "ppl";
    const auto out = model.run(s.tokens, req);
    total += sequence_nll(out.logits, s.tokens);
    r.token_count += s.tokens.size() - 1;
  }
  r.mean_nll = total / static_cast<double>(r.token_count);
  r.perplexity = std::exp(r.mean_nll);
  r.diverged = !std::isfinite(r.perplexity);
  return r;
}

}  // namespace outlierscope
