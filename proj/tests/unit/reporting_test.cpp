// Copyright 2026 The outlierscope Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "outlierscope/reporting.hpp"
#include "outlierscope/random.hpp"

using namespace outlierscope;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("outlierscope-" + name + "-" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(ActivationDump, RoundTripIsBitIdentical) {
  const auto dir = scratch_dir("dump");
  SeededRng rng(1);
  ActivationDump dump{"toy", "pass-1", {}};
  for (int l = 0; l < 3; ++l) {
    Matrix m(5 + l, 7);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal() * 1e3);
    m(0, 0) = -0.0f;
    m(1, 1) = std::numeric_limits<float>::denorm_min();
    dump.snapshots.push_back({TapPoint(Slot::y6, l), m, "pass-1"});
  }
  write_activation_dump(dir / "a.osd", dump);
  const auto back = read_activation_dump(dir / "a.osd");
  EXPECT_EQ(back.model_id, "toy");
  ASSERT_EQ(back.snapshots.size(), 3u);
  for (size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.snapshots[i].tap, dump.snapshots[i].tap);
    const auto& a = back.snapshots[i].values;
    const auto& b = dump.snapshots[i].values;
    ASSERT_EQ(a.size(), b.size());
    EXPECT_EQ(std::memcmp(a.data(), b.data(), static_cast<size_t>(a.size()) * sizeof(float)), 0);
  }
  fs::remove_all(dir);
}

TEST(ActivationDump, RejectsForeignAndTruncatedFiles) {
  const auto dir = scratch_dir("dump-bad");
  std::ofstream(dir / "x") << "not a dump at all";
  EXPECT_THROW(read_activation_dump(dir / "x"), LoadError);
  write_activation_dump(dir / "y", {"m", "p", {{TapPoint(Slot::x1, 0), Matrix::Ones(4, 4), "p"}}});
  fs::resize_file(dir / "y", fs::file_size(dir / "y") - 8);
  EXPECT_THROW(read_activation_dump(dir / "y"), LoadError);
  fs::remove_all(dir);
}

TEST(Ledger, EachAppendAddsOneEntryThatRoundTrips) {
  const auto dir = scratch_dir("ledger");
  const auto path = dir / "nested" / "ledger.jsonl";
  EXPECT_TRUE(read_ledger(path).empty());
  for (int i = 0; i < 3; ++i) {
    RunLedgerEntry e;
    e.timestamp = utc_timestamp();
    e.command = "eval-ppl";
    e.config_digest = "c" + std::to_string(i);
    e.model_id = "toy";
    e.result = {{"perplexity", 1.5 + i}};
    e.artifacts = {"a.json"};
    e.exit_code = i;
    e.replay = {{"argv", {"eval-ppl"}}};
    append_ledger_entry(path, e);
    const auto all = read_ledger(path);
    ASSERT_EQ(all.size(), static_cast<size_t>(i + 1));
    EXPECT_EQ(to_json(all.back()), to_json(e));
  }
  fs::remove_all(dir);
}

TEST(OutputSet, UncommittedFilesAreRemoved) {
  const auto dir = scratch_dir("outputs");
  fs::path kept, dropped;
  {
    OutputSet out(dir / "a");
    out.write_json("r.json", {{"k", 1}});
    kept = out.path("r.json");
    out.commit();
  }
  {
    OutputSet out(dir / "b");
    out.write_csv("r.csv", {"x", "y"}, {{"1", "a,b"}});
    dropped = dir / "b" / "r.csv";
    EXPECT_TRUE(fs::exists(dropped));
  }
  EXPECT_TRUE(fs::exists(kept));
  EXPECT_FALSE(fs::exists(dropped));
  fs::remove_all(dir);
}

TEST(OutputSet, CsvQuotesFieldsThatNeedIt) {
  const auto dir = scratch_dir("csv");
  {
    OutputSet out(dir);
    out.write_csv("t.csv", {"a", "b"}, {{"x,y", "say \"hi\""}});
    out.commit();
  }
  std::ifstream in(dir / "t.csv");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(row, "\"x,y\",\"say \"\"hi\"\"\"");
  fs::remove_all(dir);
}
