#pragma once

#include <array>
#include <cmath>
#include <cstdint>

#include "bsdehedge/common.hpp"

namespace bsdehedge {

// Counter-based pseudo-random generator (Philox-4x32, 10 rounds).
// Each (key, counter) pair maps to four independent 32-bit words, so any
// coordinate of any path at any time step can be generated out of order
// and in parallel without shared state.  Enlarging an ensemble leaves the
// draws of existing paths untouched because the path index is part of the
// counter, never of a sequential stream position.
struct Philox4x32 {
  static constexpr std::uint32_t kMul0 = 0xD2511F53u;
  static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

  static std::array<std::uint32_t, 4> block(std::array<std::uint32_t, 4> ctr,
                                            std::array<std::uint32_t, 2> key) {
    for (int round = 0; round < 10; ++round) {
      const std::uint64_t p0 = std::uint64_t(kMul0) * ctr[0];
      const std::uint64_t p1 = std::uint64_t(kMul1) * ctr[2];
      const std::uint32_t hi0 = std::uint32_t(p0 >> 32);
      const std::uint32_t lo0 = std::uint32_t(p0);
      const std::uint32_t hi1 = std::uint32_t(p1 >> 32);
      const std::uint32_t lo1 = std::uint32_t(p1);
      ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
      key[0] += kWeyl0;
      key[1] += kWeyl1;
    }
    return ctr;
  }
};

// Map a 64-bit word to a double in (0, 1]: take the top 53 bits and centre
// in the cell. The result is at least 2^-54, so log() in the normal
// transform below is always finite; the largest value 1 - 2^-54 rounds to
// exactly 1.0, which is harmless there (log(1) = 0).
inline double uniform_from_bits(std::uint64_t u) {
  return double(u >> 11) * 0x1.0p-53 + 0x1.0p-54;
}

// One stream of standard normal variates addressed by (path, step, index).
// The stream id is the Philox key; (path, step, block) is the counter.
// Each 128-bit block yields two uniforms, hence one Box-Muller pair.
class NormalStream {
 public:
  explicit NormalStream(std::uint64_t stream_id) : stream_id_(stream_id) {}

  std::uint64_t stream_id() const { return stream_id_; }

  // Normal pair number `block` of (path, step).
  std::array<double, 2> normal_pair(std::uint64_t path, std::uint32_t step,
                                    std::uint32_t block) const {
    const std::array<std::uint32_t, 2> key = {
        std::uint32_t(stream_id_), std::uint32_t(stream_id_ >> 32)};
    const std::array<std::uint32_t, 4> ctr = {
        std::uint32_t(path), std::uint32_t(path >> 32),
        step, block};
    const auto words = Philox4x32::block(ctr, key);
    const std::uint64_t b0 = (std::uint64_t(words[0]) << 32) | words[1];
    const std::uint64_t b1 = (std::uint64_t(words[2]) << 32) | words[3];
    const double u1 = uniform_from_bits(b0);
    const double u2 = uniform_from_bits(b1);
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 6.283185307179586476925286766559 * u2;
    return {radius * std::cos(angle), radius * std::sin(angle)};
  }

  // Fill `out[0..count)` with normals for (path, step), consuming
  // ceil(count/2) blocks starting at block 0.
  void fill_normals(std::uint64_t path, std::uint32_t step, double* out,
                    std::size_t count) const {
    std::uint32_t block = 0;
    std::size_t i = 0;
    while (i < count) {
      const auto pair = normal_pair(path, step, block++);
      out[i++] = pair[0];
      if (i < count) out[i++] = pair[1];
    }
  }

 private:
  std::uint64_t stream_id_;
};

// Uniform(0,1) pairs addressed the same way as NormalStream, for
// initialization draws.
class UniformStream {
 public:
  explicit UniformStream(std::uint64_t stream_id) : stream_id_(stream_id) {}

  std::array<double, 2> uniform_pair(std::uint64_t index, std::uint32_t tag0,
                                     std::uint32_t tag1) const {
    const std::array<std::uint32_t, 2> key = {
        std::uint32_t(stream_id_), std::uint32_t(stream_id_ >> 32)};
    const std::array<std::uint32_t, 4> ctr = {
        std::uint32_t(index), std::uint32_t(index >> 32), tag0, tag1};
    const auto words = Philox4x32::block(ctr, key);
    const std::uint64_t b0 = (std::uint64_t(words[0]) << 32) | words[1];
    const std::uint64_t b1 = (std::uint64_t(words[2]) << 32) | words[3];
    return {uniform_from_bits(b0), uniform_from_bits(b1)};
  }

 private:
  std::uint64_t stream_id_;
};

}  // namespace bsdehedge
