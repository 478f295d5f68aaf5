// Copyright 2026 The outlierscope Authors
// SPDX-License-Identifier: Apache-2.0

// outlierscope command-line entry point. Every invocation, including usage
// errors and failures, appends exactly one line to the run ledger.

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "outlierscope/commands.hpp"
#include "outlierscope/desk_model.hpp"
#include "outlierscope/reporting.hpp"

namespace fs = std::filesystem;
using namespace outlierscope;

namespace {

constexpr const char* kDefaultLedger = "outlierscope-ledger.jsonl";

/// The ledger path must be known even when argument parsing fails.
fs::path prescan_ledger(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--ledger" && i + 1 < argc) return argv[i + 1];
    if (a.rfind("--ledger=", 0) == 0) return a.substr(9);
  }
  if (const char* env = std::getenv("OUTLIERSCOPE_LEDGER")) return env;
  return kDefaultLedger;
}

std::vector<Slot> parse_taps(const std::string& text) {
  std::vector<Slot> out;
  if (text == "all") return {kAllSlots.begin(), kAllSlots.end()};
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(parse_slot(item));
  return out;
}

struct RawFlags {
  std::string dataset = "wikitext";
  std::string policy = "mean";
  std::string taps;
  std::string ledger;
};

void add_shared(CLI::App* sub, CommandOptions& o, RawFlags& raw) {
  sub->add_option("--model", o.model, "checkpoint directory (config.json + *.safetensors)");
  sub->add_option("--model-id", o.model_id, "identifier recorded in reports (default: directory name)");
  sub->add_option("--dataset", raw.dataset, "wikitext | c4 | local")->check(CLI::IsMember({"wikitext", "c4", "local"}));
  sub->add_option("--data", o.data, "corpus file or directory (default: $OUTLIERSCOPE_DATA/<dataset>, else next to --model)");
  sub->add_option("--samples", o.samples, "number of sampled sequences")->check(CLI::PositiveNumber);
  sub->add_option("--seed", o.seed, "sampling seed");
  sub->add_option("--seq-len", o.seq_len, "tokens per sequence (default min(1024, model context))")->check(CLI::NonNegativeNumber);
  sub->add_option("--out", o.out, "output directory");
  sub->add_option("--m", o.m, "channel-wise outlier threshold in tensor standard deviations");
  sub->add_option("--beta-std", o.beta_std, "maximum within-channel standard deviation of an outlier channel");
  sub->add_option("--taps", raw.taps, "comma-separated slots (x1..x9, y1..y7) or 'all'");
  sub->add_option("--top-k", o.top_k, "values kept per layer in top-k tables")->check(CLI::PositiveNumber);
  sub->add_option("--site", o.site, "TMA removal site: y6 | y7")->check(CLI::IsMember({"y6", "y7"}));
  sub->add_option("--policy", raw.policy, "replacement policy: mean | zero")->check(CLI::IsMember({"mean", "zero"}));
  sub->add_option("--weights", o.weights, "outlier-channel family: qkv | gamma | mlp | o | <weight name>");
  sub->add_option("--otc", o.otc, "outlier-triggering channels of q | k | v")->check(CLI::IsMember({"q", "k", "v"}));
  sub->add_option("--sd", o.sd, "weight-channel threshold in standard deviations (6, 4, 2)")->check(CLI::PositiveNumber);
  sub->add_flag("--random", o.random, "ablate matched random channels instead of the selected ones");
  sub->add_option("--random-seed", o.random_seed, "seed for --random");
  sub->add_flag("--no-residual", o.no_residual, "disable every residual connection while profiling");
  sub->add_flag("--strip-mas", o.strip_mas, "replace MAs by the tensor mean before channel-wise outlier detection");
  sub->add_option("--calibration-samples", o.calibration_samples, "passes used to identify OTCs")->check(CLI::PositiveNumber);
  sub->add_option("--plan", o.plan_file, "JSON plan file for intervene");
  sub->add_option("--ledger", raw.ledger, "run ledger (JSON lines)");
}

}  // namespace

int main(int argc, char** argv) {
  RunLedgerEntry entry;
  entry.timestamp = utc_timestamp();
  entry.command = argc > 1 ? argv[1] : "";
  fs::path ledger = prescan_ledger(argc, argv);
  int code = kExitOk;

  CLI::App app{"outlierscope: activation outlier profiling and intervention toolkit"};
  app.require_subcommand(1);
  CommandOptions opts;
  RawFlags raw;
  std::vector<CLI::App*> analysis;
  for (const char* name : {"profile", "classify", "intervene", "co-report", "dump"}) {
    static const std::map<std::string, std::string> kHelp = {
        {"profile", "massive-activation profile and top-k tables per layer"},
        {"classify", "true/fake MA classification and initial/final trend"},
        {"intervene", "perplexity before and after an intervention plan"},
        {"co-report", "channel-wise outlier data: m sweep, normalization split, gamma edits"},
        {"dump", "write raw activations to a dump file"}};
    auto* sub = app.add_subcommand(name, kHelp.at(name));
    add_shared(sub, opts, raw);
    analysis.push_back(sub);
  }
  auto* replay = app.add_subcommand("replay", "re-run a ledger entry and compare results bit for bit");
  int entry_index = -1;
  fs::path replay_ledger;
  replay->add_option("--entry", entry_index, "ledger line (0-based; negative counts from the end)");
  replay->add_option("--from", replay_ledger, "ledger to read the entry from (default: --ledger)");
  replay->add_option("--out", opts.out, "scratch directory for the rerun");
  replay->add_option("--ledger", raw.ledger, "run ledger (JSON lines)");
  auto* desk = app.add_subcommand("make-desk", "generate the desk fixture model and corpora");
  fs::path desk_out = "desk";
  uint64_t desk_seed = desk::DeskOptions{}.seed;
  bool quiet = false;
  desk->add_option("--out", desk_out, "fixture directory");
  desk->add_option("--seed", desk_seed, "construction seed");
  desk->add_flag("--quiet", quiet, "suppress progress output");
  desk->add_option("--ledger", raw.ledger, "run ledger (JSON lines)");

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
      code = app.exit(e);
      entry.command = "help";
      throw;
    } catch (const CLI::ParseError& e) {
      code = app.exit(e) == 0 ? kExitOk : kExitUsage;
      entry.result = {{"error", e.what()}};
      throw;
    }
    if (!raw.ledger.empty()) ledger = raw.ledger;
    CLI::App* chosen = app.get_subcommands().front();
    entry.command = chosen->get_name();
    opts.dataset = parse_dataset(raw.dataset);
    opts.policy = parse_policy(raw.policy);
    opts.taps = parse_taps(raw.taps);
    if (!opts.model.empty()) opts.model = fs::absolute(opts.model);
    if (!opts.data.empty()) opts.data = fs::absolute(opts.data);
    opts.out = fs::absolute(opts.out);

    CommandResult res;
    if (chosen == desk) {
      desk::DeskOptions d;
      d.seed = desk_seed;
      desk::Log log = [&](const std::string& s) {
        if (!quiet) std::cerr << s << "\n";
      };
      const auto art = desk::make_desk(desk_out, d, {}, log);
      res.model_id = "outlierscope-desk-gpt2";
      res.result = {{"model", art.model_dir.string()}, {"wikitext", art.wikitext.string()}, {"c4", art.c4.string()},
                    {"local", art.local_text.string()}, {"calibration", art.calibration}};
      res.artifacts = {art.model_dir.string(), art.wikitext.string(), art.c4.string(), art.local_text.string()};
      res.replay = {{"command", "make-desk"}, {"seed", desk_seed}};
    } else if (chosen == replay) {
      const auto entries = read_ledger(replay_ledger.empty() ? ledger : replay_ledger);
      if (entries.empty()) throw InvalidArgument("ledger has no entries to replay");
      const int n = static_cast<int>(entries.size());
      const int idx = entry_index < 0 ? n + entry_index : entry_index;
      if (idx < 0 || idx >= n) throw InvalidArgument("ledger entry " + std::to_string(entry_index) + " out of range (" + std::to_string(n) + " entries)");
      res = cmd_replay(entries[static_cast<size_t>(idx)], opts.out / ("replay-" + std::to_string(idx)));
      res.result["entry"] = idx;
    } else {
      entry.config_digest = config_digest(opts);
      res = run_command(entry.command, opts);
    }
    entry.model_id = res.model_id;
    entry.plan_digest = res.plan_digest;
    entry.result = res.result;
    entry.artifacts = res.artifacts;
    entry.replay = res.replay;
    code = res.exit_code;
    std::cout << res.result.dump(2) << "\n";
    if (code == kExitDiverged) std::cerr << "outlierscope: perplexity diverged\n";
    if (code == kExitReplayMismatch) std::cerr << "outlierscope: replay does not match the recorded result\n";
    if (code == kExitCheckFailed) std::cerr << "outlierscope: a built-in consistency check failed; see the report\n";
  } catch (const CLI::Error&) {
    // Already reported by app.exit.
  } catch (const InvalidArgument& e) {
    std::cerr << "outlierscope: " << e.what() << "\n";
    entry.result = {{"error", e.what()}};
    code = kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "outlierscope: " << e.what() << "\n";
    entry.result = {{"error", e.what()}};
    code = kExitRuntime;
  }

  entry.exit_code = code;
  try {
    append_ledger_entry(ledger, entry);
  } catch (const std::exception& e) {
    std::cerr << "outlierscope: " << e.what() << "\n";
    if (code == kExitOk) code = kExitRuntime;
  }
  return code;
}
