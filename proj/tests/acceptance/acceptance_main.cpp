// Copyright 2026 The outlierscope Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance run against the desk fixture. Prints one PASS/FAIL line per
// criterion and exits non-zero if any criterion fails. Every threshold below
// is fixed here; nothing is read from the environment.

#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "outlierscope/commands.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;
using namespace outlierscope;
using Clock = std::chrono::steady_clock;

namespace {

// Pinned tolerances and sample counts.
constexpr int kC1Tensors = 1000;
constexpr double kC1Seconds = 60.0;
constexpr int kC3Samples = 20;
constexpr double kC3Seconds = 600.0;
constexpr int kC4Samples = 20;
constexpr double kC4MinFakeFraction = 0.90;
constexpr int kC5Samples = 100;
constexpr uint64_t kEvalSeed = 0;
constexpr double kC5MaxRelativeMean = 0.02;
constexpr double kC5Gpt2Reference = 14.795;
constexpr double kC5ReferenceBand = 0.30;
constexpr int kC6Samples = 20;
constexpr int kCoSamples = 16;
constexpr double kC9MinLayerFraction = 0.80;
constexpr int kC10EvalSamples = 100;
constexpr int kC10CalibrationSamples = 8;
constexpr std::array<uint64_t, 3> kC10RandomSeeds = {1, 2, 3};
constexpr double kC10ValueRatio = 2.0;
constexpr int kC11Samples = 100;
constexpr int kC12Samples = 20;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << std::fixed << v;
  return s.str();
}

struct Desk {
  fs::path root;
  fs::path cli;
  std::unique_ptr<DecoderModel> model;
  std::unique_ptr<Tokenizer> tokenizer;
  TokenSequence wiki_stream;
  int seq_len = 0;

  std::vector<CorpusSample> samples(int n, uint64_t seed = kEvalSeed) const {
    EvalConfig c;
    c.sample_count = n;
    c.seed = seed;
    c.sequence_length = seq_len;
    return sample_token_stream(c, wiki_stream);
  }
};

/// Runs the CLI and parses the JSON it prints; returns the exit code.
int run_cli(const Desk& desk, const std::string& args, nlohmann::json& out) {
  const std::string cmd = desk.cli.string() + " " + args + " 2>/dev/null";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) throw Error("cannot start " + cmd);
  std::string text;
  std::array<char, 4096> buf{};
  while (size_t n = fread(buf.data(), 1, buf.size(), pipe)) text.append(buf.data(), n);
  const int status = pclose(pipe);
  out = text.empty() ? nlohmann::json() : nlohmann::json::parse(text, nullptr, false);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string cli_common(const Desk& desk, int samples, const fs::path& out, const fs::path& ledger) {
  return "--model " + (desk.root / "model").string() + " --data " + (desk.root / "wikitext").string() +
         " --samples " + std::to_string(samples) + " --seed " + std::to_string(kEvalSeed) + " --out " + out.string() +
         " --ledger " + ledger.string();
}

// ---------------------------------------------------------------------------

Outcome c1_oracle_equivalence() {
  const auto t0 = Clock::now();
  SeededRng rng(0xacce97);
  int ma_mismatch = 0, co_mismatch = 0, ma_events = 0, co_channels = 0;
  for (int i = 0; i < kC1Tensors; ++i) {
    const Matrix m = oracle::planted_tensor(rng);
    const ActivationSnapshot snap{TapPoint(Slot::x1, 0), m, "c1"};
    std::set<std::pair<int, int>> got;
    for (const auto& e : detect_mas(snap)) got.emplace(e.token_index, e.channel_index);
    const auto want = oracle::massive_positions(m);
    ma_events += static_cast<int>(want.size());
    if (got != want) ++ma_mismatch;
    for (double mm : {6.0, 4.0, 2.0}) {
      const auto co = detect_outlier_channels(snap, CoCriteria{mm, 1.0 / 3.0});
      std::vector<std::pair<int, int>> got_co;
      for (size_t k = 0; k < co.size(); ++k)
        got_co.emplace_back(co.channel_indices[k], co.polarity[k] == Polarity::high ? +1 : -1);
      const auto want_co = oracle::outlier_channels(m, mm, 1.0 / 3.0);
      co_channels += static_cast<int>(want_co.size());
      if (got_co != want_co) ++co_mismatch;
    }
  }
  const double secs = seconds_since(t0);
  return {ma_mismatch == 0 && co_mismatch == 0 && secs < kC1Seconds,
          std::to_string(kC1Tensors) + " tensors, " + std::to_string(ma_events) + " MAs and " +
              std::to_string(co_channels) + " CO flags in the oracle; mismatches MA=" + std::to_string(ma_mismatch) +
              " CO=" + std::to_string(co_mismatch) + "; " + fmt(secs, 1) + " s"};
}

Outcome c2_ma_boundaries() {
  // Background magnitude fixes the median; one probe entry sits on a boundary.
  auto events = [](float background, float probe) {
    Matrix m = Matrix::Constant(8, 9, background);
    m(3, 4) = probe;
    return detect_mas({TapPoint(Slot::x1, 0), m, "c2"}).size();
  };
  struct Case {
    const char* name;
    float background, probe;
    size_t expected;
  };
  const std::vector<Case> cases = {
      {"exactly 100, ratio satisfied", 0.0625f, 100.0f, 0},
      {"exactly -100, ratio satisfied", 0.0625f, -100.0f, 0},
      {"just above 100", 0.0625f, 100.0078125f, 1},
      {"exactly 1000x median (125)", 0.125f, 125.0f, 1},
      {"exactly -1000x median", 0.125f, -125.0f, 1},
      {"just below 1000x median", 0.125f, 124.9921875f, 0},
      {"uniform tensor", 3.0f, 3.0f, 0},
      {"uniform zero tensor", 0.0f, 0.0f, 0},
      {"uniform large tensor", 500.0f, 500.0f, 0},
  };
  std::string failed;
  for (const auto& c : cases)
    if (events(c.background, c.probe) != c.expected) failed += std::string(failed.empty() ? "" : "; ") + c.name;
  return {failed.empty(), std::to_string(cases.size()) + " boundary cases" + (failed.empty() ? "" : ", failed: " + failed)};
}

Outcome c3_birthplace(Desk& desk) {
  const auto t0 = Clock::now();
  const auto samples = desk.samples(kC3Samples);
  const auto& d = desk.model->descriptor();
  std::set<TapPoint> taps;
  for (Slot s : kAllSlots)
    if (d.slot_defined(s))
      for (const auto& t : taps_for_slot(d, s)) taps.insert(t);
  int y4_first = 0, without = 0;
  std::string offenders;
  for (size_t i = 0; i < samples.size(); ++i) {
    ForwardRequest req;
    req.taps = taps;
    req.compute_logits = false;
    const auto snaps = desk.model->run(samples[i].tokens, req).snapshots;
    std::optional<TapPoint> first;
    for (const auto& s : snaps)
      if (!detect_mas(s).empty() && (!first || s.tap < *first)) first = s.tap;
    if (!first)
      ++without;
    else if (first->slot == Slot::y4)
      ++y4_first;
    else
      offenders += " sample" + std::to_string(i) + "@" + first->to_string();
  }
  const double secs = seconds_since(t0);
  return {y4_first == kC3Samples && secs < kC3Seconds,
          std::to_string(y4_first) + "/" + std::to_string(kC3Samples) + " samples first show an MA at y4" +
              (without ? ", " + std::to_string(without) + " without MAs" : "") + offenders + "; " + fmt(secs, 1) + " s"};
}

Outcome c4_residual_diagnostic(Desk& desk, const ClassifySummary& summary) {
  const int L = desk.model->descriptor().layer_count;
  const int lo = L / 4, hi = (3 * L + 3) / 4;
  size_t fake = 0, total = 0;
  for (const auto& [layer, c] : summary.per_layer)
    if (layer >= lo && layer < hi) {
      fake += c.second;
      total += c.first + c.second;
    }
  const double frac = total ? static_cast<double>(fake) / static_cast<double>(total) : 0.0;
  return {total > 0 && frac >= kC4MinFakeFraction,
          std::to_string(fake) + "/" + std::to_string(total) + " middle-layer (" + std::to_string(lo) + ".." +
              std::to_string(hi - 1) + ") input MAs vanish without residuals (" + fmt(100 * frac, 1) + "%, need >= " +
              fmt(100 * kC4MinFakeFraction, 0) + "%)"};
}

Outcome c5_intervention_ordering(Desk& desk) {
  const auto samples = desk.samples(kC5Samples);
  auto ppl = [&](std::vector<InterventionPlan> plans) { return evaluate_ppl(*desk.model, samples, plans).perplexity; };
  const double base = ppl({});
  const double y6_mean = ppl({plan_tma_removal_detected(Slot::y6, ReplacePolicy::replace_with_mean)});
  const double y6_zero = ppl({plan_tma_removal_detected(Slot::y6, ReplacePolicy::replace_with_zero)});
  const double y7_zero = ppl({plan_tma_removal_detected(Slot::y7, ReplacePolicy::replace_with_zero)});
  const double rel = std::fabs(y6_mean - base) / base;
  const bool ordered = base <= y6_mean && y6_mean <= y6_zero && y6_zero <= y7_zero;
  bool absolute_ok = true;
  std::string absolute = "absolute band not applicable at " + std::to_string(desk.seq_len) + "-token contexts";
  if (desk.seq_len == 1024) {
    absolute_ok = std::fabs(base - kC5Gpt2Reference) <= kC5ReferenceBand * kC5Gpt2Reference;
    absolute = "baseline within 30% of " + fmt(kC5Gpt2Reference, 3) + ": " + (absolute_ok ? "yes" : "no");
  }
  return {ordered && rel <= kC5MaxRelativeMean && absolute_ok,
          "PPL base " + fmt(base) + " <= y6-mean " + fmt(y6_mean) + " <= y6-zero " + fmt(y6_zero) + " <= y7-zero " +
              fmt(y7_zero) + (ordered ? "" : " (ORDER VIOLATED)") + "; |rel y6-mean| " + fmt(100 * rel, 2) +
              "% (max 2%); " + absolute};
}

/// Synthetic profiles exercising the position match and sign test directly.
bool c6_synthetic_logic(std::string& why) {
  auto ev = [](int layer, int tok, int ch, float v, MaKind k) {
    return MassiveActivationEvent{TapPoint(Slot::x1, layer), tok, ch, v, k};
  };
  MaProfile p;
  p.slot = Slot::x1;
  p.layers.resize(8);
  p.layers[0] = {ev(0, 0, 447, -900.f, MaKind::true_ma), ev(0, 3, 12, 300.f, MaKind::true_ma)};
  p.layers[1] = {ev(1, 5, 77, 400.f, MaKind::fake_ma)};
  p.layers[6] = {ev(6, 0, 447, 850.f, MaKind::true_ma), ev(6, 5, 77, -420.f, MaKind::true_ma)};
  p.layers[7] = {ev(7, 3, 12, 310.f, MaKind::true_ma), ev(7, 0, 446, 700.f, MaKind::true_ma)};
  const auto r = trend_analysis(p);
  // Expected: (0,447) flips 0->6; (3,12) recurs 0->7 without a flip; the fake
  // (5,77) and the off-by-one channel 446 produce no record.
  if (r.records.size() != 2) {
    why = "expected 2 synthetic records, got " + std::to_string(r.records.size());
    return false;
  }
  const auto& a = r.records[0];
  const auto& b = r.records[1];
  const bool ok = a.token_index == 0 && a.channel_index == 447 && a.final_layer == 6 && a.sign_flipped &&
                  b.token_index == 3 && b.channel_index == 12 && b.final_layer == 7 && !b.sign_flipped;
  if (!ok) why = "synthetic record contents wrong";
  return ok;
}

Outcome c6_trend(const ClassifySummary& summary) {
  std::string why;
  const bool logic = c6_synthetic_logic(why);
  size_t flipped = 0;
  std::string first;
  for (const auto& [sample, r] : summary.records) {
    if (r.sign_flipped) ++flipped;
    if (first.empty())
      first = "(" + std::to_string(r.token_index) + "," + std::to_string(r.channel_index) + ") " +
              fmt(r.initial_value, 1) + "@L" + std::to_string(r.initial_layer) + " -> " + fmt(r.final_value, 1) + "@L" +
              std::to_string(r.final_layer);
  }
  const bool none = summary.records.empty();
  const bool natural = none || flipped == summary.records.size();
  return {logic && natural,
          std::string("synthetic position/sign logic ") + (logic ? "ok" : "FAILED: " + why) + "; desk: " +
              (none ? "none found" : std::to_string(flipped) + "/" + std::to_string(summary.records.size()) +
                                         " recurring TMAs flip sign, e.g. " + first)};
}

Outcome c7_nesting(const nlohmann::json& co, int code, int layers) {
  if (co.is_discarded() || !co.contains("nesting_ok")) return {false, "co-report produced no result (exit " + std::to_string(code) + ")"};
  const bool ok = co["nesting_ok"].get<bool>();
  const auto checked = co["snapshots_checked"].get<int>();
  return {ok && code == kExitOk && checked == 4 * layers,
          std::to_string(checked) + " snapshots checked by co-report across m = 6, 4, 2; nesting " +
              (ok ? "holds" : "VIOLATED") + "; exit " + std::to_string(code)};
}

Outcome c8_norm_attribution(Desk& desk) {
  const auto samples = desk.samples(kCoSamples);
  const auto& d = desk.model->descriptor();
  const auto x1 = detail::pooled_by_layer(*desk.model, samples, Slot::x1);
  const auto& norm = desk.model->norm(0, BlockKind::self_attention);
  const CoCriteria criteria{};
  const auto dec = decompose_normalization(x1[0], norm.gamma, norm.beta, d.norm_kind, criteria, true, d.norm_eps);
  const auto control = decompose_normalization(x1[0], Vector::Ones(norm.gamma.size()),
                                               Vector::Zero(norm.gamma.size()).eval(), d.norm_kind, criteria, true, d.norm_eps);
  const bool gained = dec.rescaled.size() > dec.standardized.size();
  const bool identity = control.rescaled.channel_indices == control.standardized.channel_indices &&
                        control.standardized.channel_indices == dec.standardized.channel_indices;
  return {gained && identity,
          "layer 0: |CO(standardized)| = " + std::to_string(dec.standardized.size()) + ", |CO(rescaled)| = " +
              std::to_string(dec.rescaled.size()) + "; identity-gamma control " +
              std::to_string(control.rescaled.size()) + (identity ? " (equal)" : " (NOT equal)")};
}

Outcome c9_gamma_edit(const nlohmann::json& co) {
  if (co.is_discarded() || !co.contains("layers_reduced_by_gamma_mean")) return {false, "co-report produced no result"};
  const int reduced = co["layers_reduced_by_gamma_mean"].get<int>();
  const int layers = co["layer_count"].get<int>();
  const double frac = static_cast<double>(reduced) / layers;
  std::string series;
  const auto& b = co["series"]["baseline"];
  const auto& m = co["series"]["gamma_mean"];
  for (size_t l = 0; l < b.size(); ++l) series += (l ? " " : "") + b[l].dump() + "->" + m[l].dump();
  return {frac >= kC9MinLayerFraction,
          std::to_string(reduced) + "/" + std::to_string(layers) + " layers lose outlier channels under the gamma-mean edit (" +
              fmt(100 * frac, 0) + "%, need >= 80%); counts " + series};
}

Outcome c10_otc_vs_random(Desk& desk) {
  const auto samples = desk.samples(kC10EvalSamples);
  const std::vector<CorpusSample> calib(samples.begin(), samples.begin() + kC10CalibrationSamples);
  const double base = evaluate_ppl(*desk.model, samples).perplexity;
  bool pass = true;
  std::string detail = "base " + fmt(base);
  for (const std::string which : {"q", "k", "v"}) {
    const auto plans = otc_plans(*desk.model, calib, which, CoCriteria{}, ReplacePolicy::replace_with_mean);
    size_t rows = 0;
    for (const auto& p : plans) rows += p.indices.size();
    const double d_otc = evaluate_ppl(*desk.model, samples, plans).perplexity - base;
    double d_rand = 0.0;
    for (uint64_t seed : kC10RandomSeeds)
      d_rand += evaluate_ppl(*desk.model, samples, matched_random_plans(*desk.model, plans, seed)).perplexity - base;
    d_rand /= static_cast<double>(kC10RandomSeeds.size());
    bool ok = false;
    if (which != "v") {
      ok = rows > 0 && d_otc > d_rand;
    } else {
      // Within a factor of two either way; two exact zeros (no OTC rows) agree.
      const double a = std::fabs(d_otc), b = std::fabs(d_rand);
      ok = (a == 0.0 && b == 0.0) || (a <= kC10ValueRatio * b && b <= kC10ValueRatio * a);
    }
    pass = pass && ok;
    detail += "; " + which + ": " + std::to_string(rows) + " OTC rows, dPPL " + fmt(d_otc) + " vs random " + fmt(d_rand) +
              (ok ? "" : " (FAIL)");
  }
  return {pass, detail};
}

Outcome c11_sd_sweep(Desk& desk) {
  const auto samples = desk.samples(kC11Samples);
  bool pass = true;
  std::string detail;
  for (const std::string family : {"qkv", "gamma", "mlp"}) {
    std::vector<double> ppl;
    std::vector<size_t> counts;
    for (double sd : {6.0, 4.0, 2.0}) {
      const auto plans = outlier_channel_plans(*desk.model, family, sd, ReplacePolicy::replace_with_mean);
      size_t n = 0;
      for (const auto& p : plans) n += p.indices.size();
      counts.push_back(n);
      ppl.push_back(evaluate_ppl(*desk.model, samples, plans).perplexity);
    }
    const bool ok = ppl[0] <= ppl[1] && ppl[1] <= ppl[2];
    pass = pass && ok;
    detail += (detail.empty() ? "" : "; ") + family + " " + fmt(ppl[0]) + " -> " + fmt(ppl[1]) + " -> " + fmt(ppl[2]) +
              " (" + std::to_string(counts[0]) + "/" + std::to_string(counts[1]) + "/" + std::to_string(counts[2]) +
              " channels)" + (ok ? "" : " NOT MONOTONE");
  }
  return {pass, detail};
}

Outcome c12_replay(Desk& desk, const fs::path& work) {
  const fs::path ledger = work / "c12-ledger.jsonl";
  fs::remove(ledger);
  bool pass = true;
  std::string detail;
  const std::vector<std::pair<std::string, std::string>> runs = {{"site y6", "--site y6 --policy mean"},
                                                                 {"otc k", "--otc k --policy mean"}};
  for (size_t i = 0; i < runs.size(); ++i) {
    nlohmann::json first, replay;
    const fs::path out = work / ("c12-run" + std::to_string(i));
    const int code = run_cli(desk, "intervene " + cli_common(desk, kC12Samples, out, ledger) + " " + runs[i].second, first);
    const int rcode = run_cli(desk, "replay --entry -1 --ledger " + ledger.string() + " --out " + (work / "c12-replay").string(), replay);
    bool same = false;
    if (!first.is_discarded() && !replay.is_discarded() && replay.contains("replayed")) {
      const auto& a = first["intervened"]["perplexity"];
      const auto& b = replay["replayed"]["intervened"]["perplexity"];
      same = a.is_number() && b.is_number() && a.get<double>() == b.get<double>() &&
             replay["match"].get<bool>();
    }
    const bool ok = code == kExitOk && rcode == kExitOk && same;
    pass = pass && ok;
    detail += (detail.empty() ? "" : "; ") + runs[i].first + ": intervene exit " + std::to_string(code) + ", replay exit " +
              std::to_string(rcode) + (same ? ", PPL bit-identical" : ", PPL differs");
  }
  return {pass, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"outlierscope acceptance run"};
  fs::path desk_dir, cli;
  app.add_option("--desk", desk_dir, "desk fixture directory (make-desk output)")->required();
  app.add_option("--cli", cli, "outlierscope executable")->required();
  CLI11_PARSE(app, argc, argv);

  Desk desk;
  desk.root = fs::absolute(desk_dir);
  desk.cli = fs::absolute(cli);
  desk.model = std::make_unique<DecoderModel>(load_model("desk", desk.root / "model"));
  desk.tokenizer = load_tokenizer(desk.root / "model");
  desk.wiki_stream = desk.tokenizer->encode(read_corpus_text(DatasetKind::wikitext, desk.root / "wikitext"));
  desk.seq_len = std::min(1024, desk.model->descriptor().max_sequence_length);
  const fs::path work = desk.root / "acceptance-work";
  fs::create_directories(work);

  int failures = 0;
  auto report = [&](int n, const char* title, const std::function<Outcome()>& check) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::cout << "C" << n << (n < 10 ? "  " : " ") << (o.pass ? "PASS" : "FAIL") << "  " << title << ": " << o.detail
              << std::endl;
  };

  ClassifySummary classify;
  auto classified = [&]() -> const ClassifySummary& {
    if (classify.per_layer.empty()) classify = classify_samples(*desk.model, desk.samples(std::max(kC4Samples, kC6Samples)));
    return classify;
  };
  nlohmann::json co;
  int co_code = -1;
  auto co_report = [&]() -> const nlohmann::json& {
    if (co_code < 0)
      co_code = run_cli(desk, "co-report " + cli_common(desk, kCoSamples, work / "co-report", work / "co-ledger.jsonl"), co);
    return co;
  };

  report(1, "detection oracle equivalence", c1_oracle_equivalence);
  report(2, "MA boundary convention", c2_ma_boundaries);
  report(3, "MA birthplace is y4", [&] { return c3_birthplace(desk); });
  report(4, "residual diagnostic", [&] { return c4_residual_diagnostic(desk, classified()); });
  report(5, "intervention ordering", [&] { return c5_intervention_ordering(desk); });
  report(6, "initial/final TMA sign trend", [&] { return c6_trend(classified()); });
  report(7, "CO nesting across m", [&] {
    const auto& result = co_report();
    return c7_nesting(result, co_code, desk.model->descriptor().layer_count);
  });
  report(8, "normalization attribution", [&] { return c8_norm_attribution(desk); });
  report(9, "gamma-mean edit", [&] { return c9_gamma_edit(co_report()); });
  report(10, "OTC vs matched random", [&] { return c10_otc_vs_random(desk); });
  report(11, "SD sweep monotonicity", [&] { return c11_sd_sweep(desk); });
  report(12, "ledger replay", [&] { return c12_replay(desk, work); });

  std::cout << (failures ? std::to_string(failures) + " criteria failed" : std::string("all criteria passed")) << std::endl;
  return failures ? 1 : 0;
}
