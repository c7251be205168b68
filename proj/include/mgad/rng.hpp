#pragma once

#include <array>
#include <cstdint>

#include "mgad/tensor.hpp"

namespace mgad {

/// Counter-based random stream (Philox4x32-10).
///
/// The key is the 64-bit seed; the 128-bit counter is (counter, stream_id).
/// Two streams with the same seed and stream_id replay identical values, and
/// streams with different ids never share a counter block.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id) : seed_(seed), stream_id_(stream_id) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }
  std::uint64_t counter() const { return counter_; }

  /// Next raw 128-bit block; advances the counter by one.
  std::array<std::uint32_t, 4> next_block();

  /// Uniform in the open interval (0, 1).
  double uniform();
  /// Standard normal draw.
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  /// A new stream with the same seed and a stream id derived from this one
  /// and `tag`. Does not advance this stream.
  RngStream derive(std::uint64_t tag) const;

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t counter_ = 0;
};

/// Tensor of i.i.d. N(0, 1) draws. Entries are filled pairwise from one
/// Box-Muller transform per counter block.
Tensor gaussian(const Shape& shape, RngStream& rng);

/// Uniform draws in [lo, hi).
Tensor uniform(const Shape& shape, RngStream& rng, double lo, double hi);

}  // namespace mgad
