// Copyright 2026 The outlierscope Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <set>

#include "outlierscope/ma_analysis.hpp"
#include "support/oracles.hpp"
#include "support/toy_models.hpp"

using namespace outlierscope;

namespace {

ActivationSnapshot snap(Matrix m, int layer = 0, std::string pass = "p") {
  return {TapPoint(Slot::x1, layer), std::move(m), std::move(pass)};
}

std::set<std::pair<int, int>> positions(const std::vector<MassiveActivationEvent>& events) {
  std::set<std::pair<int, int>> out;
  for (const auto& e : events) out.emplace(e.token_index, e.channel_index);
  return out;
}

}  // namespace

TEST(MassiveActivations, MatchesBruteForceOnPlantedTensors) {
  SeededRng rng(2024);
  for (int i = 0; i < 300; ++i) {
    const Matrix m = oracle::planted_tensor(rng);
    EXPECT_EQ(positions(detect_mas(snap(m))), oracle::massive_positions(m)) << "tensor " << i;
  }
}

TEST(MassiveActivations, AbsoluteFloorIsStrict) {
  Matrix m = Matrix::Constant(4, 4, 0.01f);
  m(1, 2) = 100.0f;
  EXPECT_TRUE(detect_mas(snap(m)).empty());
  m(1, 2) = -100.5f;
  const auto events = detect_mas(snap(m));
  ASSERT_EQ(events.size(), 1u);
  EXPECT_EQ(events[0].value, -100.5f);
}

TEST(MassiveActivations, MedianRatioIsInclusive) {
  // Median |v| is 0.25 with 16 entries; 1000x median is exactly 250.
  Matrix m = Matrix::Constant(4, 4, 0.25f);
  m(0, 0) = 250.0f;
  EXPECT_EQ(detect_mas(snap(m)).size(), 1u);
  m(0, 0) = 249.9f;
  EXPECT_TRUE(detect_mas(snap(m)).empty());
}

TEST(MassiveActivations, EvenCountMedianAveragesMiddleValues) {
  // |v| sorted: 0.1 x 8, 0.3 x 7, 150; the median of 16 entries is (0.1 + 0.3) / 2.
  Matrix m = Matrix::Constant(4, 4, 0.3f);
  for (int i = 0; i < 8; ++i) m.data()[i] = 0.1f;
  m(3, 3) = 150.0f;  // 1000 * 0.2 = 200 > 150
  EXPECT_NEAR(median_abs(m), 0.2, 1e-7);
  EXPECT_TRUE(detect_mas(snap(m)).empty());
}

TEST(MassiveActivations, RejectsNonFiniteAndEmpty) {
  Matrix m = Matrix::Zero(2, 2);
  m(0, 1) = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(detect_mas(snap(m)), NonFiniteActivation);
  EXPECT_THROW(detect_mas(snap(Matrix())), InvalidArgument);
}

TEST(MassiveActivations, StripReplacesOnlyMasWithTensorMean) {
  Matrix m = Matrix::Constant(3, 4, 0.05f);
  m(2, 1) = 500.0f;
  const auto stripped = strip_massive_activations(snap(m));
  const auto mean = static_cast<float>(tensor_mean(m));
  EXPECT_EQ(stripped.values(2, 1), mean);
  m(2, 1) = mean;
  EXPECT_EQ(stripped.values, m);
}

TEST(MaProfile, TopKKeepsLargestByMagnitude) {
  Matrix m = Matrix::Constant(4, 8, 0.01f);
  m(0, 0) = 300.0f;
  m(1, 3) = -900.0f;
  m(2, 5) = 600.0f;
  const auto p = build_ma_profile({snap(m)}, 2);
  ASSERT_EQ(p.layers.size(), 1u);
  ASSERT_EQ(p.layers[0].size(), 2u);
  EXPECT_EQ(p.layers[0][0].value, -900.0f);
  EXPECT_EQ(p.layers[0][1].value, 600.0f);
  EXPECT_EQ(build_ma_profile({snap(m)}, 0).event_count(), 3u);
}

TEST(MaProfile, RejectsMixedPasses) {
  const Matrix m = Matrix::Constant(2, 2, 1.0f);
  EXPECT_THROW(build_ma_profile({snap(m, 0, "a"), snap(m, 1, "b")}, 3), InvalidArgument);
}

TEST(Classification, SurvivorsAreTrueOthersFake) {
  Matrix base = Matrix::Constant(4, 4, 0.01f);
  base(0, 1) = 400.0f;
  base(2, 3) = -700.0f;
  Matrix bare = Matrix::Constant(4, 4, 0.01f);
  bare(0, 1) = 250.0f;  // same position, different value: still a true MA
  const auto cl = classify_tma_fma(build_ma_profile({snap(base)}, 0, "d"), build_ma_profile({snap(bare)}, 0, "d"));
  for (const auto& e : cl.layers[0])
    EXPECT_EQ(e.kind, e.token_index == 0 ? MaKind::true_ma : MaKind::fake_ma);
}

TEST(Classification, RefusesProfilesFromDifferentInputs) {
  const Matrix m = Matrix::Constant(2, 2, 1.0f);
  EXPECT_THROW(classify_tma_fma(build_ma_profile({snap(m)}, 0, "a"), build_ma_profile({snap(m)}, 0, "b")),
               InvalidArgument);
}

TEST(Trend, PairsInitialAndFinalLayersAndSkipsFakes) {
  MaProfile p;
  p.layers.resize(8);
  auto ev = [](int layer, int token, int channel, float v, MaKind k) {
    return MassiveActivationEvent{TapPoint(Slot::x1, layer), token, channel, v, k};
  };
  p.layers[0] = {ev(0, 0, 5, 800.0f, MaKind::true_ma), ev(0, 1, 9, 300.0f, MaKind::fake_ma)};
  p.layers[1] = {ev(1, 0, 5, 900.0f, MaKind::true_ma)};
  p.layers[6] = {ev(6, 0, 5, -850.0f, MaKind::true_ma), ev(6, 1, 9, -300.0f, MaKind::true_ma)};
  p.layers[7] = {ev(7, 0, 5, 820.0f, MaKind::true_ma)};
  const auto r = trend_analysis(p);
  EXPECT_EQ(r.initial_layers, (std::vector<int>{0, 1}));
  EXPECT_EQ(r.final_layers, (std::vector<int>{6, 7}));
  ASSERT_EQ(r.records.size(), 2u);
  // The larger of the two initial sightings is the reference.
  EXPECT_EQ(r.records[0].initial_layer, 1);
  EXPECT_TRUE(r.records[0].sign_flipped);
  EXPECT_FALSE(r.records[1].sign_flipped);
}

TEST(MassiveActivations, ZeroModelHasNone) {
  auto model = toy::gpt2();
  for (auto& l : model.mutable_weights().layers) {
    l.wo.setZero();
    l.bo.setZero();
    l.w_down.setZero();
    l.b_down.setZero();
  }
  const auto toks = toy::tokens(16, model.descriptor().vocab_size);
  const auto out = run_with_taps(model, toks, taps_for_slot(model.descriptor(), Slot::x1));
  for (const auto& s : out.snapshots) EXPECT_TRUE(detect_mas(s).empty()) << s.tap.to_string();
}
