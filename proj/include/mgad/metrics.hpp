#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mgad/tensor.hpp"

namespace mgad {

/// 64-bit difference hash. Bit (r, c) of the 8x8 grid is stored at position
/// 63 - (8 r + c), so the hex form reads row-major from the left.
using DHash = std::uint64_t;

/// Grayscale (unweighted channel mean), area-resampled to 9 wide by 8 high.
/// Returns the 8x9 grid row-major. Accepts [C, H, W] or [H, W].
std::vector<double> dhash_grid(const Tensor& image);

/// Grid differences at or below this count as ties (bit 0). It absorbs the
/// rounding of the area average, so flat regions hash to zero.
inline constexpr double kDHashTie = 1e-9;

/// Bit (r, c) is set iff grid[r][c + 1] - grid[r][c] > kDHashTie.
DHash dhash(const Tensor& image);

/// popcount(a ^ b) / 64.
double hamming_norm(DHash a, DHash b);

struct DiversityReport {
  double mean_pairwise_dhash = 0.0;
  std::size_t pair_count = 0;

  std::string to_text() const;
  nlohmann::json to_json() const;
};

/// Mean normalized Hamming distance over all unordered pairs.
DiversityReport diversity_report(const std::vector<Tensor>& images);

/// Exact W1 between the empirical distribution of `samples` and N(0, 1).
double wasserstein1_standard_normal(std::vector<double> samples);

/// Exact W1 between the empirical distribution of `samples` and a 1-D
/// Gaussian mixture (standard deviations must be positive).
double wasserstein1_gaussian_mixture(std::vector<double> samples, const std::vector<double>& weights,
                                     const std::vector<double>& means, const std::vector<double>& sds);

/// W1 between two equal-size empirical distributions on the line.
double wasserstein1(std::vector<double> a, std::vector<double> b);

}  // namespace mgad
