#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <set>

#include "bsdehedge/market_models.hpp"
#include "bsdehedge/rng.hpp"

namespace bsdehedge {
namespace {

// Counter-based generator known answers, frozen from independent
// implementations of the same 10-round 4x32 algorithm.
TEST(Rng, CounterBlockKnownAnswers) {
  {
    const std::array<std::uint32_t, 4> ctr = {0, 0, 0, 0};
    const std::array<std::uint32_t, 2> key = {0, 0};
    const auto out = Philox4x32::block(ctr, key);
    EXPECT_EQ(out[0], 0x6627e8d5u);
    EXPECT_EQ(out[1], 0xe169c58du);
    EXPECT_EQ(out[2], 0xbc57ac4cu);
    EXPECT_EQ(out[3], 0x9b00dbd8u);
  }
  {
    const std::array<std::uint32_t, 4> ctr = {0xffffffffu, 0xffffffffu,
                                              0xffffffffu, 0xffffffffu};
    const std::array<std::uint32_t, 2> key = {0xffffffffu, 0xffffffffu};
    const auto out = Philox4x32::block(ctr, key);
    EXPECT_EQ(out[0], 0x408f276du);
    EXPECT_EQ(out[1], 0x41c83b0eu);
    EXPECT_EQ(out[2], 0xa20bc7c6u);
    EXPECT_EQ(out[3], 0x6d5451fdu);
  }
  {
    const std::array<std::uint32_t, 4> ctr = {0x243f6a88u, 0x85a308d3u,
                                              0x13198a2eu, 0x03707344u};
    const std::array<std::uint32_t, 2> key = {0xa4093822u, 0x299f31d0u};
    const auto out = Philox4x32::block(ctr, key);
    EXPECT_EQ(out[0], 0xd16cfe09u);
    EXPECT_EQ(out[1], 0x94fdccebu);
    EXPECT_EQ(out[2], 0x5001e420u);
    EXPECT_EQ(out[3], 0x24126ea1u);
  }
}

TEST(Rng, UniformFromBitsRange) {
  // (u >> 11) * 2^-53 + 2^-54: bounded away from zero (>= 2^-54), which is
  // what normal sampling via log() requires. The top value 1 - 2^-54 sits
  // halfway between representable doubles and rounds to exactly 1.0, so the
  // upper end is closed; log(1) = 0 is still harmless.
  EXPECT_GT(uniform_from_bits(0), 0.0);
  EXPECT_DOUBLE_EQ(uniform_from_bits(0), std::ldexp(1.0, -54));
  EXPECT_LE(uniform_from_bits(~std::uint64_t(0)), 1.0);
  EXPECT_DOUBLE_EQ(uniform_from_bits(~std::uint64_t(0)), 1.0);
  // One ulp below the top stays strictly inside the unit interval.
  EXPECT_LT(uniform_from_bits((~std::uint64_t(0)) - (std::uint64_t(1) << 11)),
            1.0);
}

TEST(Rng, NormalPairsAreDeterministicAndDistinctAcrossStreams) {
  NormalStream a(42), a2(42), b(43);
  const auto p1 = a.normal_pair(7, 3, 1);
  const auto p2 = a2.normal_pair(7, 3, 1);
  EXPECT_EQ(p1[0], p2[0]);
  EXPECT_EQ(p1[1], p2[1]);
  const auto q = b.normal_pair(7, 3, 1);
  EXPECT_NE(p1[0], q[0]);
  const auto r = a.normal_pair(7, 3, 2);
  EXPECT_NE(p1[0], r[0]);
  EXPECT_TRUE(std::isfinite(p1[0]));
  EXPECT_TRUE(std::isfinite(p1[1]));
}

TEST(Rng, NormalMomentsMatchStandardGaussian) {
  NormalStream stream(7);
  const int n = 200000;
  double sum = 0, sum2 = 0, sum4 = 0;
  for (int i = 0; i < n; i += 2) {
    const auto pair = stream.normal_pair(i, 0, 0);
    for (double x : {pair[0], pair[1]}) {
      sum += x;
      sum2 += x * x;
      sum4 += x * x * x * x;
    }
  }
  const double mean = sum / n;
  const double var = sum2 / n - mean * mean;
  const double kurt = sum4 / n;
  EXPECT_NEAR(mean, 0.0, 0.01);
  EXPECT_NEAR(var, 1.0, 0.02);
  EXPECT_NEAR(kurt, 3.0, 0.1);
}

TEST(Rng, DeriveStreamSeparatesTags) {
  const std::uint64_t s1 = derive_stream(1, {stream_tag::kSimulation, 0});
  const std::uint64_t s2 = derive_stream(1, {stream_tag::kSimulation, 1});
  const std::uint64_t s3 = derive_stream(1, {stream_tag::kTrainBatch, 0});
  const std::uint64_t s4 = derive_stream(2, {stream_tag::kSimulation, 0});
  std::set<std::uint64_t> all = {s1, s2, s3, s4};
  EXPECT_EQ(all.size(), 4u);
  EXPECT_EQ(s1, derive_stream(1, {stream_tag::kSimulation, 0}));
}

TEST(Rng, UniformPairsCoverUnitInterval) {
  UniformStream stream(11);
  double lo = 1.0, hi = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const auto pair = stream.uniform_pair(i, 0, 0);
    for (double u : {pair[0], pair[1]}) {
      EXPECT_GT(u, 0.0);
      EXPECT_LT(u, 1.0);
      lo = std::min(lo, u);
      hi = std::max(hi, u);
    }
  }
  EXPECT_LT(lo, 0.001);
  EXPECT_GT(hi, 0.999);
}

}  // namespace
}  // namespace bsdehedge
