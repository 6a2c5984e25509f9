/*
 * Copyright (c) 2025 The groupquant Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>

#include <Eigen/Cholesky>

#include "groupquant/statistics.hpp"
#include "test_util.hpp"

using namespace groupquant;

namespace {

// brute-force double-loop estimators, kept independent of the library path
Eigen::MatrixXd naive_hessian(const Eigen::MatrixXd& samples) {
  const Eigen::Index d = samples.cols();
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(d, d);
  for (Eigen::Index n = 0; n < samples.rows(); ++n)
    for (Eigen::Index a = 0; a < d; ++a)
      for (Eigen::Index b = 0; b < d; ++b) h(a, b) += samples(n, a) * samples(n, b);
  return h / static_cast<double>(samples.rows());
}

Eigen::MatrixXd naive_deviation(const Eigen::MatrixXd& q, const Eigen::MatrixXd& fp) {
  const Eigen::Index d = q.cols();
  Eigen::MatrixXd r = Eigen::MatrixXd::Zero(d, d);
  for (Eigen::Index n = 0; n < q.rows(); ++n)
    for (Eigen::Index a = 0; a < d; ++a)
      for (Eigen::Index b = 0; b < d; ++b)
        r(a, b) += (q(n, a) - fp(n, a)) * q(n, b);
  return r / static_cast<double>(q.rows());
}

} // namespace

TEST(Hessian, SingleSampleOuterProduct) {
  Eigen::MatrixXd x(1, 2);
  x << 1, 2;
  const Eigen::MatrixXd h = estimate_hessian(x);
  Eigen::MatrixXd expected(2, 2);
  expected << 1, 2, 2, 4;
  EXPECT_TRUE(h.isApprox(expected, 1e-15));
}

TEST(Hessian, MeanOfIdenticalSamplesMatchesSingle) {
  Eigen::MatrixXd one(1, 3);
  one << 0.5, -1.0, 2.0;
  Eigen::MatrixXd many(6, 3);
  for (int n = 0; n < 6; ++n) many.row(n) = one.row(0);
  EXPECT_TRUE(estimate_hessian(many).isApprox(estimate_hessian(one), 1e-14));
}

TEST(Hessian, MatchesNaiveAccumulation) {
  const Eigen::MatrixXd x = gqtest::random_gaussian(64, 8, 31);
  const Eigen::MatrixXd h = estimate_hessian(x);
  EXPECT_LT((h - naive_hessian(x)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Hessian, SymmetricByConstruction) {
  const Eigen::MatrixXd x = gqtest::random_gaussian(17, 6, 32);
  const Eigen::MatrixXd h = estimate_hessian(x);
  EXPECT_TRUE((h.array() == h.transpose().array()).all());
}

TEST(Hessian, EmptyCalibrationRejected) {
  EXPECT_THROW(estimate_hessian(Eigen::MatrixXd(0, 4)), config_error);
}

// Eq. between the sample form and the quadratic form of the reconstruction
// loss: (q-w)^T H (q-w) == (1/N) sum_n ((q-w)^T x_n)^2.
TEST(Hessian, QuadraticFormMatchesSampleForm) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Eigen::MatrixXd x = gqtest::random_gaussian(32, 6, 100 + seed);
    const Eigen::MatrixXd h = estimate_hessian(x);
    const Eigen::VectorXd diff = gqtest::random_vector(6, 200 + seed);
    const double quad = diff.dot(h * diff);
    const double sample = (x * diff).squaredNorm() / static_cast<double>(x.rows());
    EXPECT_NEAR(quad, sample, 1e-8 * std::max(1.0, std::abs(sample)));
  }
}

TEST(Dampen, IdentityCase) {
  const Eigen::MatrixXd h = Eigen::MatrixXd::Identity(3, 3);
  const Eigen::MatrixXd d = dampen(h, 0.01);
  EXPECT_TRUE(d.isApprox(1.01 * Eigen::MatrixXd::Identity(3, 3), 1e-15));
}

TEST(Dampen, AddsMeanDiagonalFraction) {
  Eigen::MatrixXd h(2, 2);
  h << 2, 0, 0, 4;
  double lambda = 0.0;
  const Eigen::MatrixXd d = dampen(h, 0.5, &lambda);
  EXPECT_DOUBLE_EQ(lambda, 1.5);
  EXPECT_DOUBLE_EQ(d(0, 0), 3.5);
  EXPECT_DOUBLE_EQ(d(1, 1), 5.5);
  EXPECT_DOUBLE_EQ(d(0, 1), 0.0);
}

// Rank-deficient H (fewer samples than dims) becomes factorizable.
TEST(Dampen, RankDeficientPassesCholesky) {
  const Eigen::MatrixXd x = gqtest::random_gaussian(2, 4, 77);
  const Eigen::MatrixXd h = estimate_hessian(x);
  EXPECT_NE(Eigen::LLT<Eigen::MatrixXd>(h).info(), Eigen::Success);
  const Eigen::MatrixXd d = dampen(h, 0.01);
  EXPECT_EQ(Eigen::LLT<Eigen::MatrixXd>(d).info(), Eigen::Success);
}

TEST(Dampen, AllZeroCalibrationIsDegenerate) {
  EXPECT_THROW(dampen(Eigen::MatrixXd::Zero(3, 3), 0.01), numeric_error);
  EXPECT_THROW(dampen(Eigen::MatrixXd::Identity(3, 3), 0.0), config_error);
}

TEST(Deviation, IdenticalStreamsGiveExactZero) {
  const Eigen::MatrixXd x = gqtest::random_gaussian(16, 5, 55);
  const Eigen::MatrixXd r = estimate_deviation_correlation(x, x);
  EXPECT_TRUE((r.array() == 0.0).all());
}

TEST(Deviation, SinglePairOuterProduct) {
  Eigen::MatrixXd q(1, 2), fp(1, 2);
  q << 2, 0;
  fp << 1, 0;
  const Eigen::MatrixXd r = estimate_deviation_correlation(q, fp);
  Eigen::MatrixXd expected(2, 2);
  expected << 2, 0, 0, 0;
  EXPECT_TRUE(r.isApprox(expected, 1e-15));
}

TEST(Deviation, MatchesNaiveAccumulation) {
  const Eigen::MatrixXd fp = gqtest::random_gaussian(32, 8, 61);
  const Eigen::MatrixXd q = fp + 0.25 * gqtest::random_gaussian(32, 8, 62);
  const Eigen::MatrixXd r = estimate_deviation_correlation(q, fp);
  EXPECT_LT((r - naive_deviation(q, fp)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Deviation, ShapeMismatchRejected) {
  EXPECT_THROW(
      estimate_deviation_correlation(Eigen::MatrixXd(3, 2), Eigen::MatrixXd(3, 3)),
      config_error);
}

TEST(Partition, CeilDivisionAndRaggedTail) {
  const GroupPartition p = GroupPartition::make(10, 4);
  EXPECT_EQ(p.num_groups, 3u);
  EXPECT_EQ(p.size(0), 4u);
  EXPECT_EQ(p.size(2), 2u); // ragged last group
  EXPECT_EQ(p.begin(2), 8u);
  EXPECT_EQ(p.group_of(9), 2u);
  EXPECT_THROW(p.begin(3), std::out_of_range);
  EXPECT_THROW(p.group_of(10), std::out_of_range);
}

TEST(Blocks, SliceMatchesDirectIndexing) {
  const std::size_t d = 4;
  Eigen::MatrixXd h(d, d);
  for (Eigen::Index i = 0; i < 16; ++i) h(i / 4, i % 4) = static_cast<double>(i);
  const GroupPartition p = GroupPartition::make(4, 2);
  const Eigen::MatrixXd b01 = block(h, p, 0, 1);
  EXPECT_TRUE(b01.isApprox(h.block(0, 2, 2, 2), 0.0));
  EXPECT_THROW(block(h, p, 2, 0), std::out_of_range);
}

TEST(Blocks, DiagonalBlockOfIdentityIsIdentity) {
  const Eigen::MatrixXd h = Eigen::MatrixXd::Identity(6, 6);
  const GroupPartition p = GroupPartition::make(6, 3);
  EXPECT_TRUE(block(h, p, 1, 1).isApprox(Eigen::MatrixXd::Identity(3, 3), 0.0));
  EXPECT_TRUE(block(h, p, 0, 1).isApprox(Eigen::MatrixXd::Zero(3, 3), 0.0));
}

// Concatenating blocks over j reproduces the row block; the tiling has no
// overlap and no gap.
TEST(Blocks, TileExactly) {
  const Eigen::MatrixXd h = gqtest::random_gaussian(7, 7, 91);
  const GroupPartition p = GroupPartition::make(7, 3);
  for (std::size_t i = 0; i < p.num_groups; ++i) {
    const Eigen::MatrixXd rb = row_block(h, p, i);
    Eigen::MatrixXd joined(rb.rows(), 0);
    for (std::size_t j = 0; j < p.num_groups; ++j) {
      const Eigen::MatrixXd bj = block(h, p, i, j);
      Eigen::MatrixXd next(rb.rows(), joined.cols() + bj.cols());
      next << joined, bj;
      joined = std::move(next);
    }
    EXPECT_TRUE((joined.array() == rb.array()).all());
  }
}

TEST(LayerStatsIo, RoundTripWithAndWithoutDeviation) {
  gqtest::TempDir dir;
  LayerStats stats;
  stats.hessian = gqtest::random_spd(5, 3);
  stats.deviation = gqtest::random_gaussian(5, 5, 4);
  stats.n_samples = 42;
  stats.damp_lambda = 0.125;
  save_layer_stats(stats, dir.path(), "layer_1");
  const LayerStats back = load_layer_stats(dir.path(), "layer_1");
  EXPECT_TRUE((back.hessian.array() == stats.hessian.array()).all());
  ASSERT_TRUE(back.deviation.has_value());
  EXPECT_TRUE((back.deviation->array() == stats.deviation->array()).all());
  EXPECT_EQ(back.n_samples, 42u);
  EXPECT_DOUBLE_EQ(back.damp_lambda, 0.125);

  LayerStats first;
  first.hessian = stats.hessian;
  first.n_samples = 7;
  first.damp_lambda = 0.5;
  save_layer_stats(first, dir.path(), "layer_0");
  EXPECT_FALSE(load_layer_stats(dir.path(), "layer_0").deviation.has_value());
}
