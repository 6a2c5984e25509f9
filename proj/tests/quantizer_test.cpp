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

#include "groupquant/quantizer.hpp"
#include "test_util.hpp"

using namespace groupquant;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

} // namespace

TEST(Rounding, HalfToEven) {
  EXPECT_DOUBLE_EQ(round_half_even(0.49), 0.0);
  EXPECT_DOUBLE_EQ(round_half_even(0.5), 0.0);
  EXPECT_DOUBLE_EQ(round_half_even(1.5), 2.0);
  EXPECT_DOUBLE_EQ(round_half_even(2.5), 2.0);
  EXPECT_DOUBLE_EQ(round_half_even(-0.5), 0.0);
  EXPECT_DOUBLE_EQ(round_half_even(-1.5), -2.0);
  EXPECT_DOUBLE_EQ(round_half_even(3.2), 3.0);
  EXPECT_DOUBLE_EQ(round_half_even(-3.7), -4.0);
}

TEST(ScaleFromBeta, FullRangeTwoBits) {
  const ScaleZero sz = scale_from_beta(vec({0, 3}), 1.0, 2);
  EXPECT_DOUBLE_EQ(sz.scale, 1.0);
  EXPECT_EQ(sz.zero, 0);
}

TEST(ScaleFromBeta, LinearInBeta) {
  const ScaleZero sz = scale_from_beta(vec({0, 3}), 0.5, 2);
  EXPECT_DOUBLE_EQ(sz.scale, 0.5);
}

TEST(ScaleFromBeta, SignedRangeGetsZeroPoint) {
  const ScaleZero sz = scale_from_beta(vec({-1, 1}), 1.0, 2);
  EXPECT_DOUBLE_EQ(sz.scale, 2.0 / 3.0);
  EXPECT_EQ(sz.zero, 2); // clamp(-round(-1.5), 0, 3), ties to even

  // dequantizing the rounded codes recovers both endpoints within s/2
  const Eigen::VectorXd w = vec({-1, 1});
  const Eigen::VectorXi codes = quantize_group(w, sz.scale, sz.zero, 2);
  const Eigen::VectorXd q = dequantize(codes, sz.scale, sz.zero);
  EXPECT_LE((q - w).cwiseAbs().maxCoeff(), sz.scale / 2.0 + 1e-15);
}

TEST(ScaleFromBeta, SymmetricModeForcesZeroPointToZero) {
  const ScaleZero sz = scale_from_beta(vec({-1, 1}), 1.0, 2, /*symmetric=*/true);
  EXPECT_DOUBLE_EQ(sz.scale, 2.0 / 3.0);
  EXPECT_EQ(sz.zero, 0);
}

TEST(ScaleFromBeta, ConstantSegmentDequantizesExactly) {
  for (double c : {0.0, 0.75, -0.75}) {
    const ScaleZero sz = scale_from_beta(vec({c, c, c}), 1.0, 2);
    EXPECT_GT(sz.scale, 0.0);
    const Eigen::VectorXi codes = quantize_group(vec({c, c, c}), sz.scale, sz.zero, 2);
    const Eigen::VectorXd q = dequantize(codes, sz.scale, sz.zero);
    EXPECT_DOUBLE_EQ(q[0], c);
  }
}

TEST(ScaleFromBeta, RejectsBadArguments) {
  EXPECT_THROW(scale_from_beta(Eigen::VectorXd(), 1.0, 2), config_error);
  EXPECT_THROW(scale_from_beta(vec({1}), 0.0, 2), config_error);
  EXPECT_THROW(scale_from_beta(vec({1}), 1.5, 2), config_error);
  EXPECT_THROW(scale_from_beta(vec({1}), 1.0, 1), config_error);
  EXPECT_THROW(scale_from_beta(vec({1}), 1.0, 17), config_error);
}

TEST(QuantizeGroup, IntegersOnGridPassThrough) {
  const Eigen::VectorXi codes = quantize_group(vec({0, 1, 2, 3}), 1.0, 0, 2);
  EXPECT_EQ(codes[0], 0);
  EXPECT_EQ(codes[1], 1);
  EXPECT_EQ(codes[2], 2);
  EXPECT_EQ(codes[3], 3);
}

TEST(QuantizeGroup, ZeroPointShift) {
  const Eigen::VectorXi codes = quantize_group(vec({-1, 0, 1}), 1.0, 1, 2);
  EXPECT_EQ(codes[0], 0);
  EXPECT_EQ(codes[1], 1);
  EXPECT_EQ(codes[2], 2);
}

TEST(QuantizeGroup, HalfToEvenTies) {
  const Eigen::VectorXi codes = quantize_group(vec({0.49, 0.5, 1.5}), 1.0, 0, 2);
  EXPECT_EQ(codes[0], 0);
  EXPECT_EQ(codes[1], 0);
  EXPECT_EQ(codes[2], 2);
}

TEST(Dequantize, IdentityGrid) {
  Eigen::VectorXi codes(4);
  codes << 0, 1, 2, 3;
  const Eigen::VectorXd q = dequantize(codes, 1.0, 0);
  EXPECT_TRUE(q.isApprox(vec({0, 1, 2, 3}), 0.0));
}

TEST(Dequantize, ScaleAndZeroPoint) {
  Eigen::VectorXi codes(3);
  codes << 0, 1, 2;
  const Eigen::VectorXd q = dequantize(codes, 0.5, 1);
  EXPECT_TRUE(q.isApprox(vec({-0.5, 0.0, 0.5}), 1e-15));
}

TEST(EffectiveInt, Definition) {
  Eigen::VectorXi codes(2);
  codes << 0, 3;
  EXPECT_TRUE(effective_int(codes, 0).isApprox(vec({0, 3}), 0.0));
  EXPECT_TRUE(effective_int(codes, 2).isApprox(vec({-2, 1}), 0.0));

  // dequantize == s * effective_int
  const double s = 0.37;
  EXPECT_TRUE(dequantize(codes, s, 2).isApprox(s * effective_int(codes, 2), 0.0));
}

// property: round-trip error is at most s/2 for in-range weights, and the
// code vector is monotone in the input
TEST(QuantizeGroup, RoundTripBoundAndMonotonicity) {
  groupquant::GaussianSampler rng(17);
  for (int iter = 0; iter < 50; ++iter) {
    const int bits = 2 + static_cast<int>(rng.next_u64() % 3);
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng.next_u64() % 12);
    Eigen::VectorXd w(n);
    for (Eigen::Index i = 0; i < n; ++i) w[i] = 2.0 * rng();
    const ScaleZero sz = scale_from_beta(w, 1.0, bits);
    const Eigen::VectorXi codes = quantize_group(w, sz.scale, sz.zero, bits);
    const Eigen::VectorXd q = dequantize(codes, sz.scale, sz.zero);

    // in-range elements (those the clamp cannot touch) obey the s/2 bound
    const int levels = (1 << bits) - 1;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double lo = sz.scale * (0 - sz.zero);
      const double hi = sz.scale * (levels - sz.zero);
      if (w[i] >= lo && w[i] <= hi)
        EXPECT_LE(std::abs(q[i] - w[i]), sz.scale / 2.0 + 1e-12);
    }

    // monotonicity: sort w, codes must be non-decreasing
    Eigen::VectorXd sorted = w;
    std::sort(sorted.data(), sorted.data() + sorted.size());
    const Eigen::VectorXi sorted_codes = quantize_group(sorted, sz.scale, sz.zero, bits);
    for (Eigen::Index i = 1; i < n; ++i)
      EXPECT_GE(sorted_codes[i], sorted_codes[i - 1]);
  }
}

TEST(QuantizedLayerIo, RoundTrip) {
  gqtest::TempDir dir;
  const Eigen::MatrixXd w = gqtest::random_gaussian(4, 6, 5);
  const GroupPartition p = GroupPartition::make(6, 4);

  GroupGrid grid;
  grid.bits = 3;
  grid.symmetric = false;
  grid.partition = p;
  grid.scales.resize(4, 2);
  grid.zeros.resize(4, 2);
  QuantizedLayer layer;
  layer.w_int.resize(4, 6);
  for (Eigen::Index r = 0; r < 4; ++r) {
    for (std::size_t i = 0; i < p.num_groups; ++i) {
      const auto b = static_cast<Eigen::Index>(p.begin(i));
      const auto len = static_cast<Eigen::Index>(p.size(i));
      const ScaleZero sz = scale_from_beta(w.row(r).segment(b, len).transpose(), 1.0, 3);
      grid.scales(r, static_cast<Eigen::Index>(i)) = sz.scale;
      grid.zeros(r, static_cast<Eigen::Index>(i)) = sz.zero;
      layer.w_int.row(r).segment(b, len) =
          quantize_group(w.row(r).segment(b, len).transpose(), sz.scale, sz.zero, 3)
              .transpose();
    }
  }
  layer.grid = grid;

  save_quantized_layer(layer, dir.path() / "layer_0.q");
  const QuantizedLayer back = load_quantized_layer(dir.path() / "layer_0.q");
  EXPECT_TRUE((back.w_int.array() == layer.w_int.array()).all());
  EXPECT_TRUE((back.grid.zeros.array() == layer.grid.zeros.array()).all());
  EXPECT_EQ(back.grid.bits, 3);
  EXPECT_EQ(back.grid.partition.group_size, 4u);
  // scales persist as f32
  for (Eigen::Index i = 0; i < back.grid.scales.size(); ++i)
    EXPECT_DOUBLE_EQ(back.grid.scales(i),
                     static_cast<double>(static_cast<float>(layer.grid.scales(i))));
}
