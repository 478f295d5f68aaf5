// Copyright 2026 The outlierscope Authors
// SPDX-License-Identifier: Apache-2.0

// The subcommands behind the CLI, callable in-process. Each takes a
// CommandOptions and returns a CommandResult whose `replay` block holds
// everything needed to run it again; the CLI adds ledger bookkeeping.

#pragma once

#include <cstdlib>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "outlierscope/co_analysis.hpp"
#include "outlierscope/eval_harness.hpp"
#include "outlierscope/interventions.hpp"
#include "outlierscope/ma_analysis.hpp"
#include "outlierscope/model_loader.hpp"
#include "outlierscope/reporting.hpp"
#include "outlierscope/sublayer_profile.hpp"
#include "outlierscope/tokenizer.hpp"

namespace outlierscope {

/// Process exit codes.
enum ExitCode : int { kExitOk = 0, kExitRuntime = 1, kExitUsage = 2, kExitDiverged = 3, kExitReplayMismatch = 4, kExitCheckFailed = 5 };

struct CommandOptions {
  std::filesystem::path model;
  std::string model_id;  // empty: checkpoint directory name
  DatasetKind dataset = DatasetKind::wikitext;
  /// Corpus file or directory. Empty: $OUTLIERSCOPE_DATA/<dataset>, else a
  /// sibling of the model directory named after the dataset.
  std::filesystem::path data;
  int samples = 100;
  uint64_t seed = 0;
  int seq_len = 0;  // 0: min(1024, model context)
  std::filesystem::path out = "outlierscope-out";
  double m = 4.0;
  double beta_std = 1.0 / 3.0;
  std::vector<Slot> taps;  // profile/dump; empty means x1
  int top_k = 2;
  std::string site;  // intervene: y6 | y7 TMA removal
  ReplacePolicy policy = ReplacePolicy::replace_with_mean;
  std::string weights;  // intervene: qkv | gamma | mlp | attn.o | a single weight name
  std::string otc;      // intervene: q | k | v
  double sd = 4.0;
  bool random = false;  // matched random rows instead of the selected ones
  uint64_t random_seed = 1;
  bool no_residual = false;
  bool strip_mas = false;
  int calibration_samples = 8;  // OTC identification passes
  std::filesystem::path plan_file;
  nlohmann::json inline_plans;  // set by replay; wins over every other plan source
};

inline nlohmann::json to_json(const CommandOptions& o) {
  std::vector<std::string> taps;
  for (Slot s : o.taps) taps.emplace_back(slot_name(s));
  return {{"model", o.model.string()},
          {"model_id", o.model_id},
          {"dataset", dataset_name(o.dataset)},
          {"data", o.data.string()},
          {"samples", o.samples},
          {"seed", o.seed},
          {"seq_len", o.seq_len},
          {"out", o.out.string()},
          {"m", o.m},
          {"beta_std", o.beta_std},
          {"taps", taps},
          {"top_k", o.top_k},
          {"site", o.site},
          {"policy", policy_name(o.policy)},
          {"weights", o.weights},
          {"otc", o.otc},
          {"sd", o.sd},
          {"random", o.random},
          {"random_seed", o.random_seed},
          {"no_residual", o.no_residual},
          {"strip_mas", o.strip_mas},
          {"calibration_samples", o.calibration_samples},
          {"plan_file", o.plan_file.string()},
          {"inline_plans", o.inline_plans}};
}

inline CommandOptions command_options_from_json(const nlohmann::json& j) {
  CommandOptions o;
  o.model = j.at("model").get<std::string>();
  o.model_id = j.value("model_id", "");
  o.dataset = parse_dataset(j.value("dataset", "wikitext"));
  o.data = j.value("data", "");
  o.samples = j.value("samples", 100);
  o.seed = j.value("seed", uint64_t{0});
  o.seq_len = j.value("seq_len", 0);
  o.out = j.value("out", "outlierscope-out");
  o.m = j.value("m", 4.0);
  o.beta_std = j.value("beta_std", 1.0 / 3.0);
  for (const auto& t : j.value("taps", std::vector<std::string>{})) o.taps.push_back(parse_slot(t));
  o.top_k = j.value("top_k", 2);
  o.site = j.value("site", "");
  o.policy = parse_policy(j.value("policy", "mean"));
  o.weights = j.value("weights", "");
  o.otc = j.value("otc", "");
  o.sd = j.value("sd", 4.0);
  o.random = j.value("random", false);
  o.random_seed = j.value("random_seed", uint64_t{1});
  o.no_residual = j.value("no_residual", false);
  o.strip_mas = j.value("strip_mas", false);
  o.calibration_samples = j.value("calibration_samples", 8);
  o.plan_file = j.value("plan_file", "");
  o.inline_plans = j.value("inline_plans", nlohmann::json());
  return o;
}

inline std::string config_digest(const CommandOptions& o) { return hex64(fnv1a64(to_json(o).dump())); }

struct CommandResult {
  nlohmann::json result = nlohmann::json::object();
  std::vector<std::string> artifacts;
  std::string model_id;
  std::string plan_digest = "baseline";
  nlohmann::json replay = nlohmann::json::object();
  int exit_code = kExitOk;
};

/// Model, tokenizer and sampled corpus for one command, loaded on first use.
class Workspace {
 public:
  explicit Workspace(CommandOptions options) : opts_(std::move(options)) {}

  const CommandOptions& options() const { return opts_; }

  DecoderModel& model() {
    if (!model_) {
      if (opts_.model.empty()) throw InvalidArgument("--model is required");
      model_ = std::make_unique<DecoderModel>(load_model(opts_.model_id, opts_.model));
    }
    return *model_;
  }

  std::filesystem::path corpus_location() const {
    if (!opts_.data.empty()) return opts_.data;
    const std::string name(dataset_name(opts_.dataset));
    if (const char* env = std::getenv("OUTLIERSCOPE_DATA")) return std::filesystem::path(env) / name;
    return opts_.model.parent_path() / name;
  }

  EvalConfig eval_config() {
    EvalConfig c;
    c.dataset = opts_.dataset;
    c.sample_count = opts_.samples;
    c.seed = opts_.seed;
    c.sequence_length = opts_.seq_len > 0 ? opts_.seq_len : std::min(1024, model().descriptor().max_sequence_length);
    c.validate(model().descriptor().max_sequence_length);
    return c;
  }

  const std::vector<CorpusSample>& samples() {
    if (!samples_) {
      const auto tok = load_tokenizer(opts_.model);
      samples_ = sample_corpus(eval_config(), corpus_location(), *tok);
    }
    return *samples_;
  }

 private:
  CommandOptions opts_;
  std::unique_ptr<DecoderModel> model_;
  std::optional<std::vector<CorpusSample>> samples_;
};

namespace detail {

inline std::vector<Slot> taps_or_default(const CommandOptions& o) {
  return o.taps.empty() ? std::vector<Slot>{Slot::x1} : o.taps;
}

inline ForwardRequest snapshot_request(const ModelDescriptor& d, const std::vector<Slot>& slots, bool no_residual,
                                       std::span<const InterventionPlan> plans, std::string pass_id) {
  ForwardRequest req;
  for (Slot s : slots)
    if (d.slot_defined(s))
      for (const auto& t : taps_for_slot(d, s)) req.taps.insert(t);
  if (no_residual) req.disabled_residuals = all_residual_sites(d);
  req.plans = plans;
  req.pass_id = std::move(pass_id);
  req.compute_logits = false;
  return req;
}

inline nlohmann::json event_json(const MassiveActivationEvent& e, int sample) {
  return {{"sample", sample}, {"token", e.token_index}, {"channel", e.channel_index}, {"value", e.value},
          {"kind", ma_kind_name(e.kind)}};
}

/// Snapshots of `slot` at every layer, pooled over samples (token axis).
inline std::vector<ActivationSnapshot> pooled_by_layer(DecoderModel& model, const std::vector<CorpusSample>& samples,
                                                       Slot slot, std::span<const InterventionPlan> plans = {}) {
  const auto& d = model.descriptor();
  std::vector<std::vector<ActivationSnapshot>> parts(static_cast<size_t>(d.layer_count));
  std::vector<InterventionPlan> tap_plans;
  for (const auto& p : plans)
    if (!p.is_parameter_plan()) tap_plans.push_back(p);
  ParameterEditSession session(model, plans);
  for (size_t i = 0; i < samples.size(); ++i)
    for (auto& s : model.run(samples[i].tokens, snapshot_request(d, {slot}, false, tap_plans, "sample-" + std::to_string(i))).snapshots)
      parts[static_cast<size_t>(s.tap.layer)].push_back(std::move(s));
  std::vector<ActivationSnapshot> out;
  for (auto& p : parts) out.push_back(pool_snapshots(p));
  return out;
}

inline std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (size_t i = 0; i < v.size(); ++i) s += (i ? ";" : "") + std::to_string(v[i]);
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Plan construction for `intervene`.

/// Weight names of a family; a bare weight name is its own family.
inline std::vector<std::string> weight_family(const std::string& family, const ModelDescriptor& d) {
  if (family == "qkv") return {"attn.q", "attn.k", "attn.v"};
  if (family == "mlp") {
    if (d.ffn_kind == FfnKind::gated_mlp) return {"mlp.fc", "mlp.up", "mlp.down"};
    return {"mlp.fc", "mlp.down"};
  }
  if (family == "o") return {"attn.o"};
  if (std::find(kWeightNames.begin(), kWeightNames.end(), family) != kWeightNames.end()) return {family};
  throw InvalidArgument("unknown weight family '" + family + "' (qkv, gamma, mlp, o or a weight name)");
}

/// Rows (or gamma entries) whose mean |w| lies beyond `sd` cross-row standard
/// deviations, per layer. Empty selections produce no plan.
inline PlanSet outlier_channel_plans(DecoderModel& model, const std::string& family, double sd, ReplacePolicy policy) {
  const auto& d = model.descriptor();
  PlanSet plans;
  if (family == "gamma") {
    for (BlockKind b : {BlockKind::self_attention, BlockKind::ffn})
      for (int l = 0; l < d.layer_count; ++l) {
        const auto idx = vector_channel_statistics(model.norm(l, b).gamma, sd);
        if (!idx.empty()) plans.push_back(plan_gamma_edit(l, b, idx, policy));
      }
    return plans;
  }
  for (const auto& name : weight_family(family, d)) {
    std::vector<EditIndex> rows;
    for (int l = 0; l < d.layer_count; ++l)
      for (int r : weight_channel_statistics(model.weight(l, name), sd)) rows.push_back({l, -1, r});
    if (!rows.empty()) plans.push_back(plan_weight_ablation(name, rows, policy));
  }
  return plans;
}

/// Same per-(plan, layer) counts, drawn uniformly from the unselected rows.
inline PlanSet matched_random_plans(DecoderModel& model, const PlanSet& selected, uint64_t seed) {
  PlanSet out;
  for (size_t pi = 0; pi < selected.size(); ++pi) {
    const auto& p = selected[pi];
    std::map<int, std::set<int>> by_layer;
    for (const auto& i : p.indices) by_layer[i.layer].insert(i.channel);
    InterventionPlan r = p;
    r.indices.clear();
    r.seed = seed;
    for (const auto& [layer, chosen] : by_layer) {
      const int probe = layer == kAllLayers ? 0 : layer;
      const int total = p.target == PlanTargetKind::gamma ? static_cast<int>(model.norm(probe, p.norm_block).gamma.size())
                                                          : static_cast<int>(model.weight(probe, p.weight_name).rows());
      const uint64_t stream = seed ^ (fnv1a64(p.label) + 0x9e3779b97f4a7c15ull * static_cast<uint64_t>(layer + 2));
      for (int c : sample_random_channels(total, static_cast<int>(chosen.size()), stream, chosen))
        r.indices.push_back({layer, -1, c});
    }
    r.label = p.label + "-random";
    out.push_back(std::move(r));
  }
  return out;
}

/// OTC rows of attn.q / attn.k / attn.v per layer, identified on pooled
/// calibration passes.
inline PlanSet otc_plans(DecoderModel& model, const std::vector<CorpusSample>& calibration, const std::string& which,
                         const CoCriteria& criteria, ReplacePolicy policy, nlohmann::json* report = nullptr) {
  const Slot out_slot = which == "q" ? Slot::x3 : which == "k" ? Slot::x4 : which == "v" ? Slot::x5 : Slot::x1;
  if (out_slot == Slot::x1) throw InvalidArgument("--otc takes q, k or v");
  const std::string name = "attn." + which;
  const auto inputs = detail::pooled_by_layer(model, calibration, Slot::x2);
  const auto outputs = detail::pooled_by_layer(model, calibration, out_slot);
  std::vector<EditIndex> rows;
  for (size_t l = 0; l < inputs.size(); ++l) {
    const int layer = static_cast<int>(l);
    const auto& lw = model.weights().layers[l];
    const Vector& bias = which == "q" ? lw.bq : which == "k" ? lw.bk : lw.bv;
    const auto otc = identify_otcs(model.weight(layer, name), inputs[l], outputs[l], criteria, bias, name);
    for (int r : otc.row_indices) rows.push_back({layer, -1, r});
    if (report)
      report->push_back({{"layer", layer}, {"weight", name}, {"rows", otc.row_indices}, {"fraction", otc.fraction},
                         {"output_co", otc.output_co}, {"input_co", otc.input_co}});
  }
  if (rows.empty()) return {};
  return {plan_weight_ablation(name, rows, policy)};
}

// ---------------------------------------------------------------------------
// Commands.

inline CommandResult cmd_profile(Workspace& ws) {
  const auto& o = ws.options();
  auto& model = ws.model();
  const auto& d = model.descriptor();
  const auto& samples = ws.samples();
  const auto slots = detail::taps_or_default(o);
  PlanSet plans;
  if (!o.site.empty()) plans.push_back(plan_tma_removal_detected(parse_slot(o.site), o.policy));

  CommandResult res;
  res.model_id = d.model_id;
  res.plan_digest = plan_digest(plans);
  OutputSet out(o.out);

  // Per-pass detection: each sample's tensor is its own MA population.
  std::map<TapPoint, nlohmann::json> events;
  std::map<TapPoint, std::vector<std::tuple<float, int, int, int>>> top;  // |value| merge of per-sample top-k
  std::map<Slot, size_t> counts;
  for (size_t i = 0; i < samples.size(); ++i) {
    const auto snaps = model.run(samples[i].tokens,
                                 detail::snapshot_request(d, slots, o.no_residual, plans, "sample-" + std::to_string(i)))
                           .snapshots;
    for (const auto& s : snaps) {
      auto& ev = events[s.tap];
      if (ev.is_null()) ev = nlohmann::json::array();
      for (const auto& e : detect_mas(s)) {
        ev.push_back(detail::event_json(e, static_cast<int>(i)));
        ++counts[s.tap.slot];
      }
      const auto tk = top_k_entries(s.tap.slot, s.values, o.top_k);
      auto& t = top[s.tap];
      for (size_t r = 0; r < tk.values.size(); ++r)
        t.emplace_back(tk.values[r], static_cast<int>(i), tk.positions[r].first, tk.positions[r].second);
      std::stable_sort(t.begin(), t.end(), [](const auto& a, const auto& b) { return std::fabs(std::get<0>(a)) > std::fabs(std::get<0>(b)); });
      if (t.size() > static_cast<size_t>(o.top_k)) t.resize(static_cast<size_t>(o.top_k));
    }
  }

  nlohmann::json profile = nlohmann::json::object();
  for (Slot s : slots) {
    if (!d.slot_defined(s)) continue;
    std::vector<std::vector<std::string>> rows;
    nlohmann::json layers = nlohmann::json::array();
    for (int l = 0; l < d.layer_count; ++l) {
      const TapPoint tp(s, l);
      nlohmann::json topj = nlohmann::json::array();
      int rank = 0;
      for (const auto& [v, smp, tok, ch] : top[tp]) {
        rows.push_back({std::to_string(l), std::to_string(++rank), fmt_float(v), std::to_string(smp), std::to_string(tok), std::to_string(ch)});
        topj.push_back({{"value", v}, {"sample", smp}, {"token", tok}, {"channel", ch}});
      }
      layers.push_back({{"layer", l}, {"events", events[tp]}, {"top", topj}});
    }
    profile[std::string(slot_name(s))] = {{"layers", layers}, {"event_count", counts[s]}};
    out.write_csv("topk_" + std::string(slot_name(s)) + ".csv", {"layer", "rank", "value", "sample", "token", "channel"}, rows);
  }
  out.write_json("ma_profile.json", {{"model_id", d.model_id},
                                     {"no_residual", o.no_residual},
                                     {"plans", plans_to_json(plans)},
                                     {"samples", samples.size()},
                                     {"profile", profile}});

  // Sublayer table for the first sample: top-k at every tap of every layer.
  std::vector<std::vector<std::string>> sub;
  for (int l = 0; l < d.layer_count; ++l) {
    const auto sp = profile_sublayers(model, samples.front().tokens, l, o.top_k, plans);
    for (const auto& st : sp.slots)
      for (size_t r = 0; r < st.values.size(); ++r)
        sub.push_back({std::to_string(l), std::string(slot_name(st.slot)), std::to_string(r + 1), fmt_float(st.values[r]),
                       std::to_string(st.positions[r].first), std::to_string(st.positions[r].second)});
  }
  out.write_csv("sublayers.csv", {"layer", "tap", "rank", "value", "token", "channel"}, sub);

  nlohmann::json summary = nlohmann::json::object();
  for (const auto& [slot, n] : counts) summary[std::string(slot_name(slot))] = n;
  res.result = {{"events", summary}, {"samples", samples.size()}, {"no_residual", o.no_residual}};
  out.commit();
  res.artifacts = out.artifact_names();
  return res;
}

/// Classification and trend of layer-input (x1) MAs, one sample at a time.
struct ClassifySummary {
  std::map<int, std::pair<size_t, size_t>> per_layer;  // layer -> (true, fake)
  std::vector<std::pair<int, TrendRecord>> records;    // (sample, record)
  std::vector<int> initial_layers, final_layers;
};

inline ClassifySummary classify_samples(const DecoderModel& model, const std::vector<CorpusSample>& samples,
                                        const TrendOptions& trend = {}) {
  const auto& d = model.descriptor();
  ClassifySummary out;
  for (size_t i = 0; i < samples.size(); ++i) {
    const auto digest = token_digest(samples[i].tokens);
    const auto taps = taps_for_slot(d, Slot::x1);
    const auto base = build_ma_profile(run_with_taps(model, samples[i].tokens, taps, {}, "baseline").snapshots, 0, digest);
    const auto bare = build_ma_profile(run_without_residuals(model, samples[i].tokens, all_residual_sites(d), taps), 0, digest);
    const auto classified = classify_tma_fma(base, bare);
    for (size_t l = 0; l < classified.layers.size(); ++l)
      for (const auto& e : classified.layers[l]) {
        auto& c = out.per_layer[static_cast<int>(l)];
        (e.kind == MaKind::true_ma ? c.first : c.second)++;
      }
    const auto report = trend_analysis(classified, trend);
    out.initial_layers = report.initial_layers;
    out.final_layers = report.final_layers;
    for (const auto& r : report.records) out.records.emplace_back(static_cast<int>(i), r);
  }
  return out;
}

inline CommandResult cmd_classify(Workspace& ws) {
  const auto& o = ws.options();
  auto& model = ws.model();
  const auto& d = model.descriptor();
  const auto& samples = ws.samples();
  CommandResult res;
  res.model_id = d.model_id;
  OutputSet out(o.out);

  const auto summary = classify_samples(model, samples);

  // Table-1 layout: the two largest layer-input MAs per layer, averaged over
  // the samples in which the (token, channel) position appears.
  std::map<std::tuple<int, int, int>, std::tuple<double, int, size_t, size_t>> agg;  // (layer,tok,ch) -> sum, n, true, fake
  for (size_t i = 0; i < samples.size(); ++i) {
    const auto digest = token_digest(samples[i].tokens);
    const auto taps = taps_for_slot(d, Slot::x1);
    const auto base = build_ma_profile(run_with_taps(model, samples[i].tokens, taps, {}, "baseline").snapshots, 0, digest);
    const auto bare = build_ma_profile(run_without_residuals(model, samples[i].tokens, all_residual_sites(d), taps), 0, digest);
    const auto cl = classify_tma_fma(base, bare);
    for (size_t l = 0; l < cl.layers.size(); ++l)
      for (const auto& e : cl.layers[l]) {
        auto& a = agg[{static_cast<int>(l), e.token_index, e.channel_index}];
        std::get<0>(a) += e.value;
        std::get<1>(a) += 1;
        (e.kind == MaKind::true_ma ? std::get<2>(a) : std::get<3>(a))++;
      }
  }
  std::map<int, std::vector<std::tuple<double, int, int, int, std::string>>> per_layer;
  for (const auto& [key, a] : agg) {
    const auto [layer, tok, ch] = key;
    const double mean = std::get<0>(a) / std::get<1>(a);
    const std::string kind = std::get<2>(a) >= std::get<3>(a) ? "true_ma" : "fake_ma";
    per_layer[layer].emplace_back(mean, tok, ch, std::get<1>(a), kind);
  }
  std::vector<std::vector<std::string>> table;
  nlohmann::json table_json = nlohmann::json::array();
  for (auto& [layer, v] : per_layer) {
    std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return std::fabs(std::get<0>(a)) > std::fabs(std::get<0>(b)); });
    for (size_t r = 0; r < std::min<size_t>(2, v.size()); ++r) {
      const auto& [mean, tok, ch, n, kind] = v[r];
      table.push_back({std::to_string(layer), std::to_string(r + 1), fmt_float(mean), std::to_string(tok), std::to_string(ch), kind, std::to_string(n)});
      table_json.push_back({{"layer", layer}, {"rank", r + 1}, {"mean_value", mean}, {"token", tok}, {"channel", ch}, {"kind", kind}, {"samples", n}});
    }
  }
  out.write_csv("table_ma_inputs.csv", {"layer", "rank", "mean_value", "token", "channel", "kind", "samples"}, table);

  nlohmann::json classes = nlohmann::json::array();
  size_t n_true = 0, n_fake = 0;
  for (const auto& [layer, c] : summary.per_layer) {
    classes.push_back({{"layer", layer}, {"true_ma", c.first}, {"fake_ma", c.second}});
    n_true += c.first;
    n_fake += c.second;
  }
  nlohmann::json records = nlohmann::json::array();
  bool all_flipped = true;
  for (const auto& [sample, r] : summary.records) {
    records.push_back({{"sample", sample}, {"token", r.token_index}, {"channel", r.channel_index},
                       {"initial_layer", r.initial_layer}, {"initial_value", r.initial_value},
                       {"final_layer", r.final_layer}, {"final_value", r.final_value}, {"sign_flipped", r.sign_flipped}});
    all_flipped = all_flipped && r.sign_flipped;
  }
  const bool none = summary.records.empty();
  out.write_json("classification.json", {{"per_layer", classes}, {"table", table_json}});
  out.write_json("trend.json", {{"initial_layers", summary.initial_layers},
                                {"final_layers", summary.final_layers},
                                {"records", records},
                                {"note", none ? "no initial-layer TMA recurs in the final layers" : ""}});
  res.result = {{"true_ma", n_true},
                {"fake_ma", n_fake},
                {"trend_records", summary.records.size()},
                {"all_sign_flipped", !none && all_flipped},
                {"none_found", none},
                {"samples", samples.size()}};
  out.commit();
  res.artifacts = out.artifact_names();
  return res;
}

/// Plans for `intervene`, from the first source present: inline (replay),
/// --plan file, --site, --otc, --weights.
inline PlanSet build_intervention_plans(Workspace& ws, nlohmann::json* report) {
  const auto& o = ws.options();
  auto& model = ws.model();
  if (!o.inline_plans.is_null()) return plans_from_json(o.inline_plans);
  if (!o.plan_file.empty()) {
    std::ifstream in(o.plan_file);
    if (!in) throw LoadError("cannot read plan file " + o.plan_file.string());
    try {
      return plans_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      throw InvalidArgument(std::string("malformed plan file: ") + e.what());
    }
  }
  PlanSet plans;
  if (!o.site.empty()) {
    plans.push_back(plan_tma_removal_detected(parse_slot(o.site), o.policy));
  } else if (!o.otc.empty()) {
    const auto& all = ws.samples();
    const auto n = std::min<size_t>(all.size(), static_cast<size_t>(std::max(1, o.calibration_samples)));
    const std::vector<CorpusSample> calib(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n));
    *report = nlohmann::json::array();
    plans = otc_plans(model, calib, o.otc, CoCriteria{o.m, o.beta_std}, o.policy, report);
  } else if (!o.weights.empty()) {
    plans = outlier_channel_plans(model, o.weights, o.sd, o.policy);
  } else {
    throw InvalidArgument("intervene needs one of --site, --otc, --weights or --plan");
  }
  if (o.random) {
    if (!o.site.empty()) throw InvalidArgument("--random applies to --otc and --weights selections");
    plans = matched_random_plans(model, plans, o.random_seed);
  }
  return plans;
}

inline CommandResult cmd_intervene(Workspace& ws) {
  const auto& o = ws.options();
  auto& model = ws.model();
  CommandResult res;
  res.model_id = model.descriptor().model_id;
  nlohmann::json selection;
  const PlanSet plans = build_intervention_plans(ws, &selection);
  for (const auto& p : plans)
    if (p.is_parameter_plan()) validate_parameter_plan(model, p);
  res.plan_digest = plan_digest(plans);
  const auto& samples = ws.samples();
  const auto config = ws.eval_config();

  const auto base = evaluate_ppl(model, samples, {}, config);
  const auto edited = evaluate_ppl(model, samples, plans, config);
  size_t edited_values = 0;
  {
    ParameterEditSession s(model, plans);
    edited_values = s.edited_values();
  }
  const bool diverged = base.diverged || edited.diverged;
  const double delta = edited.perplexity - base.perplexity;
  res.result = {{"baseline", to_json(base)},
                {"intervened", to_json(edited)},
                {"delta_ppl", diverged ? nlohmann::json(nullptr) : nlohmann::json(delta)},
                {"relative_delta", diverged ? nlohmann::json(nullptr) : nlohmann::json(delta / base.perplexity)},
                {"diverged", diverged},
                {"plan_count", plans.size()},
                {"edited_parameter_values", edited_values}};
  OutputSet out(o.out);
  // The selection report stays out of the result: a replay pins the plans
  // inline and never re-identifies them.
  if (!selection.is_null()) out.write_json("selection.json", selection);
  out.write_json("plan.json", plans_to_json(plans));
  out.write_json("intervene.json", res.result);
  out.commit();
  res.artifacts = out.artifact_names();
  res.replay["plans"] = plans_to_json(plans);
  if (diverged) res.exit_code = kExitDiverged;
  return res;
}

inline CommandResult cmd_co_report(Workspace& ws) {
  const auto& o = ws.options();
  auto& model = ws.model();
  const auto& d = model.descriptor();
  const auto& samples = ws.samples();
  const CoCriteria criteria{o.m, o.beta_std};
  criteria.validate();
  CommandResult res;
  res.model_id = d.model_id;
  OutputSet out(o.out);

  // m sweep on x1 (raw, MA-stripped, standardized, rescaled by ln_1).
  const std::array<double, 3> sweep = {6.0, 4.0, 2.0};
  std::array<std::vector<std::vector<std::string>>, 3> scatter;
  const auto x1 = detail::pooled_by_layer(model, samples, Slot::x1);
  size_t snapshots_checked = 0;
  nlohmann::json violations = nlohmann::json::array();
  for (int l = 0; l < d.layer_count; ++l) {
    const auto& raw = x1[static_cast<size_t>(l)];
    const auto stripped = strip_massive_activations(raw);
    const auto& norm = model.norm(l, BlockKind::self_attention);
    const Matrix standardized = outlierscope::detail::standardize(stripped.values, d.norm_kind, d.norm_eps);
    const Matrix rescaled = outlierscope::detail::rescale(standardized, norm);
    const std::array<std::pair<const char*, const Matrix*>, 4> stages = {
        {{"x1", &raw.values}, {"x1_stripped", &stripped.values}, {"standardized", &standardized}, {"rescaled", &rescaled}}};
    for (const auto& [stage, m] : stages) {
      std::array<OutlierChannelSet, 3> sets;
      for (size_t k = 0; k < sweep.size(); ++k) {
        sets[k] = outlier_channels_of(*m, CoCriteria{sweep[k], o.beta_std}, TapPoint(Slot::x1, l));
        for (Eigen::Index c = 0; c < m->cols(); ++c) {
          const auto ci = static_cast<size_t>(c);
          const bool flagged = sets[k].contains(static_cast<int>(c));
          scatter[k].push_back({std::to_string(l), stage, std::to_string(c), fmt_float(sets[k].per_channel_mean[ci]),
                                fmt_float(sets[k].per_channel_std[ci]), flagged ? "1" : "0"});
        }
      }
      ++snapshots_checked;
      for (size_t k = 0; k + 1 < sweep.size(); ++k)
        for (int c : sets[k].channel_indices)
          if (!sets[k + 1].contains(c))
            violations.push_back({{"layer", l}, {"stage", stage}, {"channel", c}, {"m", sweep[k]}, {"missing_at_m", sweep[k + 1]}});
    }
  }
  for (size_t k = 0; k < sweep.size(); ++k)
    out.write_csv("co_scatter_m" + std::to_string(static_cast<int>(sweep[k])) + ".csv",
                  {"layer", "stage", "channel", "mean", "std", "flagged"}, scatter[k]);

  // Standardization vs rescaling, with an identity-gamma control.
  const auto y1 = detail::pooled_by_layer(model, samples, Slot::y1);
  std::vector<std::vector<std::string>> norm_rows;
  nlohmann::json norm_json = nlohmann::json::array();
  std::map<std::pair<int, BlockKind>, std::vector<int>> flagged_gamma;
  for (int l = 0; l < d.layer_count; ++l)
    for (BlockKind b : {BlockKind::self_attention, BlockKind::ffn}) {
      const auto& input = b == BlockKind::self_attention ? x1[static_cast<size_t>(l)] : y1[static_cast<size_t>(l)];
      const auto& norm = model.norm(l, b);
      std::optional<Vector> beta;
      if (d.norm_kind == NormKind::layernorm) beta = norm.beta.size() ? norm.beta : Vector::Zero(norm.gamma.size()).eval();
      const auto dec = decompose_normalization(input, norm.gamma, beta, d.norm_kind, criteria, true, d.norm_eps);
      std::optional<Vector> zero_beta;
      if (d.norm_kind == NormKind::layernorm) zero_beta = Vector::Zero(norm.gamma.size());
      const auto control = decompose_normalization(input, Vector::Ones(norm.gamma.size()), zero_beta, d.norm_kind, criteria, true, d.norm_eps);
      // Edit targets come from the norm as the forward pass sees it (MAs
      // present); the stripped split above is the attribution view.
      const auto live = decompose_normalization(input, norm.gamma, beta, d.norm_kind, criteria, false, d.norm_eps);
      std::vector<int> gained;
      for (int c : live.rescaled.channel_indices)
        if (!live.standardized.contains(c)) gained.push_back(c);
      flagged_gamma[{l, b}] = gained;
      norm_rows.push_back({std::to_string(l), std::string(block_name(b)), std::to_string(dec.input.size()),
                           std::to_string(dec.standardized.size()), std::to_string(dec.rescaled.size()),
                           std::to_string(control.rescaled.size()), detail::join_ints(gained)});
      norm_json.push_back({{"layer", l}, {"block", block_name(b)}, {"input", dec.input.size()},
                           {"standardized", dec.standardized.size()}, {"rescaled", dec.rescaled.size()},
                           {"identity_rescaled", control.rescaled.size()}, {"flagged_gamma", gained}});
    }
  out.write_csv("co_norm.csv", {"layer", "block", "input", "standardized", "rescaled", "identity_rescaled", "flagged_gamma"}, norm_rows);

  // Per-layer CO counts at x2 and y2 before and after gamma edits.
  auto series = [&](std::span<const InterventionPlan> plans) {
    std::vector<size_t> counts(static_cast<size_t>(d.layer_count), 0);
    for (Slot s : {Slot::x2, Slot::y2}) {
      const auto snaps = detail::pooled_by_layer(model, samples, s, plans);
      for (const auto& snap : snaps) counts[static_cast<size_t>(snap.tap.layer)] += detect_outlier_channels(snap, criteria, o.strip_mas).size();
    }
    return counts;
  };
  auto gamma_plans = [&](ReplacePolicy policy) {
    PlanSet p;
    for (const auto& [key, idx] : flagged_gamma)
      if (!idx.empty()) p.push_back(plan_gamma_edit(key.first, key.second, idx, policy));
    return p;
  };
  const auto mean_plans = gamma_plans(ReplacePolicy::replace_with_mean);
  const auto zero_plans = gamma_plans(ReplacePolicy::replace_with_zero);
  const auto base_counts = series({});
  const auto mean_counts = series(mean_plans);
  const auto zero_counts = series(zero_plans);
  std::vector<std::vector<std::string>> series_rows;
  size_t reduced = 0;
  for (int l = 0; l < d.layer_count; ++l) {
    const auto i = static_cast<size_t>(l);
    if (mean_counts[i] < base_counts[i]) ++reduced;
    series_rows.push_back({std::to_string(l), std::to_string(base_counts[i]), std::to_string(mean_counts[i]), std::to_string(zero_counts[i])});
  }
  out.write_csv("co_gamma_series.csv", {"layer", "baseline", "gamma_mean", "gamma_zero"}, series_rows);
  out.write_json("co_report.json", {{"criteria", {{"m", o.m}, {"beta_std", o.beta_std}}},
                                    {"nesting_violations", violations},
                                    {"norms", norm_json},
                                    {"gamma_plans", plans_to_json(mean_plans)},
                                    {"series", {{"baseline", base_counts}, {"gamma_mean", mean_counts}, {"gamma_zero", zero_counts}}}});

  const auto& first = norm_json.front();
  res.result = {{"nesting_ok", violations.empty()},
                {"snapshots_checked", snapshots_checked},
                {"first_layer", {{"standardized", first["standardized"]}, {"rescaled", first["rescaled"]}, {"identity_rescaled", first["identity_rescaled"]}}},
                {"layers_reduced_by_gamma_mean", reduced},
                {"layer_count", d.layer_count},
                {"series", {{"baseline", base_counts}, {"gamma_mean", mean_counts}, {"gamma_zero", zero_counts}}}};
  res.plan_digest = plan_digest(mean_plans);
  out.commit();
  res.artifacts = out.artifact_names();
  if (!violations.empty()) res.exit_code = kExitCheckFailed;
  return res;
}

inline CommandResult cmd_dump(Workspace& ws) {
  const auto& o = ws.options();
  auto& model = ws.model();
  const auto& d = model.descriptor();
  const auto& samples = ws.samples();
  const auto slots = detail::taps_or_default(o);
  CommandResult res;
  res.model_id = d.model_id;
  ActivationDump dump{d.model_id, "dump", {}};
  for (size_t i = 0; i < samples.size(); ++i)
    for (auto& s : model.run(samples[i].tokens, detail::snapshot_request(d, slots, o.no_residual, {}, "sample-" + std::to_string(i))).snapshots)
      dump.snapshots.push_back(std::move(s));
  OutputSet out(o.out);
  write_activation_dump(out.path("activations.osd"), dump);
  size_t bytes = 0;
  for (const auto& s : dump.snapshots) bytes += static_cast<size_t>(s.values.size()) * sizeof(float);
  res.result = {{"tensors", dump.snapshots.size()}, {"payload_bytes", bytes}, {"samples", samples.size()}};
  out.commit();
  res.artifacts = out.artifact_names();
  return res;
}

inline CommandResult run_command(const std::string& name, const CommandOptions& options) {
  Workspace ws(options);
  CommandResult r;
  if (name == "profile") r = cmd_profile(ws);
  else if (name == "classify") r = cmd_classify(ws);
  else if (name == "intervene") r = cmd_intervene(ws);
  else if (name == "co-report") r = cmd_co_report(ws);
  else if (name == "dump") r = cmd_dump(ws);
  else throw InvalidArgument("unknown command '" + name + "'");
  // Replay re-runs the command with the same options; plans are pinned inline
  // so a changed plan file cannot alter the rerun.
  CommandOptions pinned = options;
  if (r.replay.contains("plans")) pinned.inline_plans = r.replay["plans"];
  r.replay = {{"command", name}, {"options", to_json(pinned)}, {"result", r.result}};
  return r;
}

/// Re-runs a ledger entry into `scratch` and compares its result exactly.
inline CommandResult cmd_replay(const RunLedgerEntry& entry, const std::filesystem::path& scratch) {
  if (!entry.replay.contains("command") || !entry.replay.contains("options"))
    throw InvalidArgument("ledger entry for '" + entry.command + "' carries no replay information");
  const auto name = entry.replay.at("command").get<std::string>();
  auto options = command_options_from_json(entry.replay.at("options"));
  options.out = scratch;
  const auto rerun = run_command(name, options);
  CommandResult res;
  res.model_id = rerun.model_id;
  res.plan_digest = rerun.plan_digest;
  const bool match = rerun.result == entry.replay.at("result") && rerun.plan_digest == entry.plan_digest;
  res.result = {{"replayed_command", name}, {"match", match}, {"original", entry.replay.at("result")}, {"replayed", rerun.result}};
  res.artifacts = rerun.artifacts;
  res.exit_code = match ? kExitOk : kExitReplayMismatch;
  return res;
}

}  // namespace outlierscope
