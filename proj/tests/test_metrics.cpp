#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "doctest.h"
#include "mgad/metrics.hpp"
#include "mgad/rng.hpp"

using namespace mgad;

namespace {

// Replicates every pixel onto a 144x128 lattice (multiples of both 9x8 and
// 16x16), then averages blocks.
std::vector<double> replicated_grid(const Tensor& img) {
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  const std::size_t big_w = w * 9, big_h = h * 8;
  std::vector<double> grid(72, 0.0);
  for (std::size_t r = 0; r < 8; ++r) {
    for (std::size_t k = 0; k < 9; ++k) {
      double acc = 0.0;
      for (std::size_t y = r * big_h / 8; y < (r + 1) * big_h / 8; ++y) {
        for (std::size_t x = k * big_w / 9; x < (k + 1) * big_w / 9; ++x) {
          double g = 0.0;
          for (std::size_t ch = 0; ch < c; ++ch) g += img[(ch * h + y / 8) * w + x / 9];
          acc += g / static_cast<double>(c);
        }
      }
      grid[r * 9 + k] = acc / static_cast<double>((big_h / 8) * (big_w / 9));
    }
  }
  return grid;
}

DHash bits_from_grid(const std::vector<double>& g) {
  DHash h = 0;
  for (std::size_t r = 0; r < 8; ++r) {
    for (std::size_t c = 0; c < 8; ++c) {
      if (g[r * 9 + c + 1] - g[r * 9 + c] > kDHashTie) h |= DHash{1} << (63 - (8 * r + c));
    }
  }
  return h;
}

double bit_loop_distance(DHash a, DHash b) {
  int diff = 0;
  for (int i = 0; i < 64; ++i) diff += ((a >> i) & 1) != ((b >> i) & 1);
  return diff / 64.0;
}

Tensor ramp(bool increasing) {
  Tensor t({3, 16, 16});
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < 16; ++y) {
      for (std::size_t x = 0; x < 16; ++x) {
        const double v = -1.0 + 2.0 * x / 15.0;
        t[(c * 16 + y) * 16 + x] = increasing ? v : -v;
      }
    }
  }
  return t;
}

}  // namespace

TEST_SUITE("dhash") {
  TEST_CASE("constant image hashes to zero") {
    for (double v : {-1.0, 0.3, 0.7071, 1.0}) CHECK(dhash(Tensor({3, 16, 16}, v)) == 0);
    CHECK(dhash(Tensor({3, 37, 23}, 0.1)) == 0);
  }

  TEST_CASE("increasing ramp sets every bit") { CHECK(dhash(ramp(true)) == ~DHash{0}); }

  TEST_CASE("uniform brightness offset leaves the hash unchanged") {
    RngStream rng(1, 0);
    for (int i = 0; i < 20; ++i) {
      const Tensor img = uniform({3, 16, 16}, rng, -1.0, 1.0);
      CHECK(dhash(img) == dhash(axpy(img, 0.25, Tensor({3, 16, 16}, 1.0))));
    }
  }

  TEST_CASE("area resampling matches the replication oracle") {
    RngStream rng(2, 0);
    for (int i = 0; i < 20; ++i) {
      const Tensor img = uniform({3, 16, 16}, rng, -1.0, 1.0);
      const std::vector<double> fast = dhash_grid(img);
      const std::vector<double> slow = replicated_grid(img);
      double worst = 0.0;
      for (std::size_t k = 0; k < 72; ++k) worst = std::max(worst, std::abs(fast[k] - slow[k]));
      CHECK(worst < 1e-12);
      CHECK(dhash(img) == bits_from_grid(slow));
    }
  }

  TEST_CASE("grayscale and odd sizes") {
    RngStream rng(3, 0);
    const Tensor img = uniform({1, 5, 7}, rng, 0.0, 1.0);
    CHECK(dhash(img) == dhash(img.reshaped({5, 7})));
    CHECK_THROWS_AS(dhash(Tensor()), std::invalid_argument);
    CHECK_THROWS_AS(dhash(Tensor({4})), std::invalid_argument);
  }
}

TEST_SUITE("hamming") {
  TEST_CASE("identity and complement") {
    const DHash a = 0x0123456789abcdefULL;
    CHECK(hamming_norm(a, a) == 0.0);
    CHECK(hamming_norm(a, ~a) == 1.0);
  }

  TEST_CASE("matches the bit loop and is a metric") {
    RngStream rng(4, 0);
    auto draw = [&] {
      const auto b = rng.next_block();
      return (DHash{b[0]} << 32) | b[1];
    };
    for (int i = 0; i < 200; ++i) {
      const DHash a = draw(), b = draw(), c = draw();
      CHECK(hamming_norm(a, b) == bit_loop_distance(a, b));
      CHECK(hamming_norm(a, b) == hamming_norm(b, a));
      CHECK(hamming_norm(a, c) <= hamming_norm(a, b) + hamming_norm(b, c));
    }
  }
}

TEST_SUITE("diversity") {
  TEST_CASE("identical and complementary pairs") {
    const Tensor img = ramp(true);
    CHECK(diversity_report({img, img}).mean_pairwise_dhash == 0.0);
    const DiversityReport r = diversity_report({ramp(true), ramp(false)});
    CHECK(r.mean_pairwise_dhash == 1.0);
    CHECK(r.pair_count == 1);
  }

  TEST_CASE("matches the double loop and ignores order") {
    RngStream rng(5, 0);
    std::vector<Tensor> imgs;
    for (int i = 0; i < 9; ++i) imgs.push_back(uniform({3, 16, 16}, rng, -1.0, 1.0));
    double acc = 0.0;
    int pairs = 0;
    for (std::size_t i = 0; i < imgs.size(); ++i) {
      for (std::size_t j = 0; j < imgs.size(); ++j) {
        if (i < j) {
          acc += bit_loop_distance(dhash(imgs[i]), dhash(imgs[j]));
          ++pairs;
        }
      }
    }
    const DiversityReport r = diversity_report(imgs);
    CHECK(r.pair_count == 36);
    CHECK(r.mean_pairwise_dhash == acc / pairs);
    std::reverse(imgs.begin(), imgs.end());
    CHECK(std::abs(diversity_report(imgs).mean_pairwise_dhash - r.mean_pairwise_dhash) < 1e-15);
    CHECK_THROWS_AS(diversity_report({imgs[0]}), std::invalid_argument);
  }

  TEST_CASE("report serialisations") {
    const DiversityReport r{0.5, 3};
    CHECK(r.to_text() == "mean_pairwise_dhash: 0.5\npair_count: 3\n");
    CHECK(r.to_json()["pair_count"] == 3);
  }
}

TEST_SUITE("wasserstein") {
  // int |F_n(x) - Phi(x)| dx by the trapezoid rule on a fine grid.
  double numeric_w1(std::vector<double> s) {
    std::sort(s.begin(), s.end());
    const double lo = -12.0, hi = 12.0;
    const int n = 400000;
    const double h = (hi - lo) / n;
    std::size_t below = 0;
    double acc = 0.0, prev = 0.0;
    for (int i = 0; i <= n; ++i) {
      const double x = lo + i * h;
      while (below < s.size() && s[below] <= x) ++below;
      const double f = std::abs(static_cast<double>(below) / s.size() - 0.5 * std::erfc(-x / std::numbers::sqrt2));
      if (i > 0) acc += 0.5 * (f + prev) * h;
      prev = f;
    }
    return acc;
  }

  TEST_CASE("exact W1 to N(0, 1) matches numerical integration") {
    RngStream rng(6, 0);
    for (std::size_t n : {1u, 5u, 40u}) {
      std::vector<double> s;
      for (std::size_t i = 0; i < n; ++i) s.push_back(1.3 * rng.normal() + 0.4);
      CHECK(std::abs(wasserstein1_standard_normal(s) - numeric_w1(s)) < 2e-4);
    }
    // a point mass at 0: W1 = E|Z| = sqrt(2 / pi)
    CHECK(std::abs(wasserstein1_standard_normal({0.0}) - std::sqrt(2.0 / std::numbers::pi)) < 1e-14);
  }

  TEST_CASE("W1 shrinks with sample size for true normals") {
    RngStream rng(7, 0);
    std::vector<double> s;
    for (int i = 0; i < 100000; ++i) s.push_back(rng.normal());
    CHECK(wasserstein1_standard_normal(s) < 0.01);
  }

  TEST_CASE("two-sample W1") {
    CHECK(wasserstein1({0.0, 1.0}, {1.0, 2.0}) == 1.0);
    CHECK(wasserstein1({3.0, 1.0}, {1.0, 3.0}) == 0.0);
    CHECK_THROWS_AS(wasserstein1({1.0}, {}), std::invalid_argument);
  }
}

TEST_CASE("W1 to a Gaussian mixture agrees with the standard-normal case and a grid integral") {
  RngStream rng(31, 0);
  std::vector<double> xs;
  for (int i = 0; i < 300; ++i) xs.push_back(rng.normal() * 0.8 + 0.3);
  CHECK(wasserstein1_gaussian_mixture(xs, {1.0}, {0.0}, {1.0}) ==
        doctest::Approx(wasserstein1_standard_normal(xs)).epsilon(1e-9));

  const std::vector<double> w{0.3, 0.7}, m{-1.0, 1.0}, sd{0.4, 0.6};
  std::vector<double> sorted = xs;
  std::sort(sorted.begin(), sorted.end());
  auto mix_cdf = [&](double x) {
    return 0.3 * 0.5 * std::erfc(-(x + 1.0) / (0.4 * std::sqrt(2.0))) +
           0.7 * 0.5 * std::erfc(-(x - 1.0) / (0.6 * std::sqrt(2.0)));
  };
  // Trapezoid on a fine grid of |F_n - F|.
  const double lo = -8.0, hi = 8.0;
  const int steps = 400000;
  const double h = (hi - lo) / steps;
  double grid = 0.0;
  std::size_t k = 0;
  for (int i = 0; i <= steps; ++i) {
    const double x = lo + i * h;
    while (k < sorted.size() && sorted[k] <= x) ++k;
    const double f = std::abs(static_cast<double>(k) / sorted.size() - mix_cdf(x));
    grid += (i == 0 || i == steps) ? 0.5 * f : f;
  }
  grid *= h;
  CHECK(wasserstein1_gaussian_mixture(xs, w, m, sd) == doctest::Approx(grid).epsilon(1e-4));
  CHECK_THROWS_AS(wasserstein1_gaussian_mixture(xs, {1.0}, {0.0}, {0.0}), std::invalid_argument);
}
