#include "mgad/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace mgad {
namespace {

constexpr std::uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr std::uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr std::uint32_t kPhiloxW0 = 0x9E3779B9u;
constexpr std::uint32_t kPhiloxW1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> ctr, std::array<std::uint32_t, 2> key) {
  for (int round = 0; round < 10; ++round) {
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kPhiloxM0, ctr[0], hi0, lo0);
    mulhilo(kPhiloxM1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kPhiloxW0;
    key[1] += kPhiloxW1;
  }
  return ctr;
}

inline double to_open_unit(std::uint32_t hi, std::uint32_t lo) {
  // 53 random bits, shifted by half an ulp so 0 and 1 are never produced.
  const std::uint64_t bits = ((static_cast<std::uint64_t>(hi) << 32) | lo) >> 11;
  return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace

std::array<std::uint32_t, 4> RngStream::next_block() {
  const std::array<std::uint32_t, 4> ctr = {
      static_cast<std::uint32_t>(counter_), static_cast<std::uint32_t>(counter_ >> 32),
      static_cast<std::uint32_t>(stream_id_), static_cast<std::uint32_t>(stream_id_ >> 32)};
  const std::array<std::uint32_t, 2> key = {static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32)};
  ++counter_;
  return philox4x32_10(ctr, key);
}

double RngStream::uniform() {
  const auto b = next_block();
  return to_open_unit(b[0], b[1]);
}

double RngStream::normal() {
  const auto b = next_block();
  const double u1 = to_open_unit(b[0], b[1]);
  const double u2 = to_open_unit(b[2], b[3]);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t RngStream::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("RngStream::below: n must be positive");
  // Rejection keeps the draw exactly uniform.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  for (;;) {
    const auto b = next_block();
    const std::uint64_t v = (static_cast<std::uint64_t>(b[0]) << 32) | b[1];
    if (v < limit) return v % n;
  }
}

RngStream RngStream::derive(std::uint64_t tag) const {
  return RngStream(seed_, splitmix64(stream_id_ ^ splitmix64(tag + 0x5851F42D4C957F2Dull)));
}

Tensor gaussian(const Shape& shape, RngStream& rng) {
  Tensor out(shape);
  auto data = out.data();
  std::size_t i = 0;
  while (i < data.size()) {
    const auto b = rng.next_block();
    const double u1 = to_open_unit(b[0], b[1]);
    const double u2 = to_open_unit(b[2], b[3]);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    data[i++] = r * std::cos(theta);
    if (i < data.size()) data[i++] = r * std::sin(theta);
  }
  return out;
}

Tensor uniform(const Shape& shape, RngStream& rng, double lo, double hi) {
  Tensor out(shape);
  for (double& v : out.data()) v = lo + (hi - lo) * rng.uniform();
  return out;
}

}  // namespace mgad
