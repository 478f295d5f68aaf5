// Copyright 2026 The outlierscope Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "outlierscope/co_analysis.hpp"
#include "support/oracles.hpp"

using namespace outlierscope;

namespace {

std::vector<std::pair<int, int>> flagged(const OutlierChannelSet& s) {
  std::vector<std::pair<int, int>> out;
  for (size_t i = 0; i < s.size(); ++i)
    out.emplace_back(s.channel_indices[i], s.polarity[i] == Polarity::high ? +1 : -1);
  return out;
}

}  // namespace

TEST(OutlierChannels, MatchesBruteForceOnPlantedTensors) {
  SeededRng rng(77);
  for (int i = 0; i < 300; ++i) {
    const Matrix m = oracle::planted_tensor(rng);
    for (double k : {6.0, 4.0, 2.0})
      EXPECT_EQ(flagged(outlier_channels_of(m, {k, 1.0 / 3.0})), oracle::outlier_channels(m, k, 1.0 / 3.0))
          << "tensor " << i << " m=" << k;
  }
}

TEST(OutlierChannels, LooserMultiplierFlagsSuperset) {
  SeededRng rng(5);
  for (int i = 0; i < 200; ++i) {
    const Matrix m = oracle::planted_tensor(rng);
    const auto strict = outlier_channels_of(m, {6.0, 1.0 / 3.0});
    const auto mid = outlier_channels_of(m, {4.0, 1.0 / 3.0});
    const auto loose = outlier_channels_of(m, {2.0, 1.0 / 3.0});
    for (int c : strict.channel_indices) EXPECT_TRUE(mid.contains(c));
    for (int c : mid.channel_indices) EXPECT_TRUE(loose.contains(c));
  }
}

TEST(OutlierChannels, FlagsBothPolaritiesAndRespectsSpread) {
  Matrix m(8, 12);
  SeededRng rng(1);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal() * 0.1);
  m.col(3).setConstant(5.0f);
  m.col(7).setConstant(-5.0f);
  for (int t = 0; t < 8; ++t) m(t, 9) = t % 2 ? 9.0f : 3.0f;  // far off but std 3 > beta
  const auto s = outlier_channels_of(m, {1.0, 1.0 / 3.0});
  EXPECT_EQ(flagged(s), (std::vector<std::pair<int, int>>{{3, +1}, {7, -1}}));
}

TEST(OutlierChannels, NeedsTwoTokens) {
  EXPECT_THROW(outlier_channels_of(Matrix::Ones(1, 4), {}), InvalidArgument);
  EXPECT_THROW(outlier_channels_of(Matrix::Ones(4, 4), {0.0, 1.0}), InvalidArgument);
}

TEST(Decomposition, IdentityGammaMakesRescaledEqualStandardized) {
  SeededRng rng(9);
  Matrix m(10, 16);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal());
  m.col(4).setConstant(30.0f);
  const ActivationSnapshot in{TapPoint(Slot::x1, 0), m, "p"};
  const Vector ones = Vector::Ones(16);
  const Vector zeros = Vector::Zero(16);
  const auto ln = decompose_normalization(in, ones, zeros, NormKind::layernorm);
  EXPECT_EQ(ln.rescaled_values, ln.standardized_values);
  EXPECT_EQ(ln.rescaled.channel_indices, ln.standardized.channel_indices);
  const auto rms = decompose_normalization(in, ones, std::nullopt, NormKind::rmsnorm);
  EXPECT_EQ(rms.rescaled_values, rms.standardized_values);
}

TEST(Decomposition, LargeGammaCreatesRescaledOutlier) {
  SeededRng rng(10);
  Matrix m(32, 64);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(rng.normal());
  m.col(2).array() = 0.5f + 0.01f * m.col(2).array();  // narrow channel inside the bulk
  Vector gamma = Vector::Ones(64);
  gamma(2) = 40.0f;
  // beta is loose because RMS scaling spreads the channel in proportion to gamma.
  const auto d = decompose_normalization({TapPoint(Slot::x1, 0), m, "p"}, gamma, std::nullopt, NormKind::rmsnorm,
                                         {4.0, 2.5});
  EXPECT_FALSE(d.standardized.contains(2));
  EXPECT_TRUE(d.rescaled.contains(2));
}

TEST(Decomposition, RejectsMismatchedShapesAndNormKinds) {
  const ActivationSnapshot in{TapPoint(Slot::x1, 0), Matrix::Random(4, 8), "p"};
  EXPECT_THROW(decompose_normalization(in, Vector::Ones(7), std::nullopt, NormKind::rmsnorm), InvalidArgument);
  EXPECT_THROW(decompose_normalization(in, Vector::Ones(8), std::nullopt, NormKind::layernorm), InvalidArgument);
  EXPECT_THROW(decompose_normalization(in, Vector::Ones(8), Vector::Zero(8), NormKind::rmsnorm), InvalidArgument);
  const ActivationSnapshot flat{TapPoint(Slot::x1, 0), Matrix::Constant(4, 8, 2.0f), "p"};
  EXPECT_THROW(decompose_normalization(flat, Vector::Ones(8), Vector::Zero(8), NormKind::layernorm), InvalidArgument);
}

TEST(Otc, RowThatCreatesOutputOutlierFromOrdinaryInput) {
  SeededRng rng(3);
  Matrix x(24, 8);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<float>(rng.normal() * 0.2);
  Matrix w(6, 8);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<float>(rng.normal() * 0.1);
  Vector b = Vector::Zero(6);
  b(4) = 20.0f;  // row 4 produces a constant high channel through its bias
  const Matrix y = (x * w.transpose()).rowwise() + b.transpose();
  const auto otc = identify_otcs(w, {TapPoint(Slot::x2, 0), x, "p"}, {TapPoint(Slot::x3, 0), y, "p"}, {2.0, 1.0 / 3.0},
                                 b, "attn.q");
  EXPECT_EQ(otc.row_indices, std::vector<int>{4});
  EXPECT_DOUBLE_EQ(otc.fraction, 1.0 / 6.0);
  // Without the bias in the recheck the outlier does not reappear.
  EXPECT_TRUE(identify_otcs(w, {TapPoint(Slot::x2, 0), x, "p"}, {TapPoint(Slot::x3, 0), y, "p"}, {2.0, 1.0 / 3.0})
                  .row_indices.empty());
}

TEST(Otc, InheritedOutlierIsNotAttributedToTheWeight) {
  SeededRng rng(4);
  Matrix x(24, 32);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<float>(rng.normal());
  x.col(1).setConstant(25.0f);  // CO already in the input
  Matrix w = Matrix::Zero(32, 32);
  w(0, 1) = 1.0f;  // row 0 just forwards the input outlier
  for (int r = 1; r < 32; ++r) w(r, r == 1 ? 0 : r) = 0.5f;
  const Matrix y = x * w.transpose();
  const auto otc = identify_otcs(w, {TapPoint(Slot::x2, 0), x, "p"}, {TapPoint(Slot::x3, 0), y, "p"});
  EXPECT_EQ(otc.input_co, std::vector<int>{1});
  EXPECT_EQ(otc.output_co, std::vector<int>{0});
  EXPECT_TRUE(otc.row_indices.empty());
}

TEST(ChannelStatistics, FlagsRowsFarFromTheCrossRowMean) {
  Matrix w = Matrix::Constant(20, 4, 0.1f);
  w.row(3).setConstant(2.0f);
  w.row(11).setConstant(-2.0f);
  EXPECT_EQ(weight_channel_statistics(w, 2.0), (std::vector<int>{3, 11}));
  EXPECT_EQ(weight_channel_statistics(Matrix::Ones(5, 3), 1.0), std::vector<int>{});
  Vector g = Vector::Ones(30);
  g(17) = 9.0f;
  EXPECT_EQ(vector_channel_statistics(g, 4.0), std::vector<int>{17});
}
