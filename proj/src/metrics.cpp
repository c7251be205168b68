#include "mgad/metrics.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include <boost/math/distributions/normal.hpp>

namespace mgad {

namespace {

// Row i of the result holds the fractional overlap of output cell i with each
// input pixel, divided by the cell width.
std::vector<double> area_weights(std::size_t in, std::size_t out) {
  std::vector<double> w(out * in, 0.0);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double lo = o * scale, hi = (o + 1) * scale;
    for (std::size_t i = static_cast<std::size_t>(lo); i < in && static_cast<double>(i) < hi; ++i) {
      const double overlap = std::min(hi, i + 1.0) - std::max(lo, static_cast<double>(i));
      if (overlap > 0.0) w[o * in + i] = overlap / scale;
    }
  }
  return w;
}

}  // namespace

std::vector<double> dhash_grid(const Tensor& image) {
  if (image.empty()) throw std::invalid_argument("dhash: empty image");
  std::size_t c = 1, h = 0, w = 0;
  if (image.rank() == 3) {
    c = image.dim(0), h = image.dim(1), w = image.dim(2);
  } else if (image.rank() == 2) {
    h = image.dim(0), w = image.dim(1);
  } else {
    throw std::invalid_argument("dhash: expected [C, H, W] or [H, W], got " + shape_string(image.shape()));
  }
  std::vector<double> gray(h * w, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < h * w; ++i) gray[i] += image[ch * h * w + i];
  }
  for (double& g : gray) g /= static_cast<double>(c);

  constexpr std::size_t rows = 8, cols = 9;
  const std::vector<double> wr = area_weights(h, rows);
  const std::vector<double> wc = area_weights(w, cols);
  std::vector<double> tmp(rows * w, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t y = 0; y < h; ++y) {
      const double a = wr[r * h + y];
      if (a == 0.0) continue;
      for (std::size_t x = 0; x < w; ++x) tmp[r * w + x] += a * gray[y * w + x];
    }
  }
  std::vector<double> grid(rows * cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < cols; ++k) {
      double acc = 0.0;
      for (std::size_t x = 0; x < w; ++x) acc += wc[k * w + x] * tmp[r * w + x];
      grid[r * cols + k] = acc;
    }
  }
  return grid;
}

DHash dhash(const Tensor& image) {
  const std::vector<double> g = dhash_grid(image);
  DHash bits = 0;
  for (std::size_t r = 0; r < 8; ++r) {
    for (std::size_t c = 0; c < 8; ++c) {
      if (g[r * 9 + c + 1] - g[r * 9 + c] > kDHashTie) bits |= DHash{1} << (63 - (8 * r + c));
    }
  }
  return bits;
}

double hamming_norm(DHash a, DHash b) { return std::popcount(a ^ b) / 64.0; }

DiversityReport diversity_report(const std::vector<Tensor>& images) {
  if (images.size() < 2) throw std::invalid_argument("diversity report needs at least 2 images");
  std::vector<DHash> hashes;
  hashes.reserve(images.size());
  for (const Tensor& im : images) hashes.push_back(dhash(im));
  DiversityReport r;
  double acc = 0.0;
  for (std::size_t i = 0; i < hashes.size(); ++i) {
    for (std::size_t j = i + 1; j < hashes.size(); ++j) {
      acc += hamming_norm(hashes[i], hashes[j]);
      ++r.pair_count;
    }
  }
  r.mean_pairwise_dhash = acc / static_cast<double>(r.pair_count);
  return r;
}

std::string DiversityReport::to_text() const {
  std::ostringstream out;
  out.precision(17);
  out << "mean_pairwise_dhash: " << mean_pairwise_dhash << "\npair_count: " << pair_count << "\n";
  return out.str();
}

nlohmann::json DiversityReport::to_json() const {
  return {{"mean_pairwise_dhash", mean_pairwise_dhash}, {"pair_count", pair_count}};
}

double wasserstein1_standard_normal(std::vector<double> samples) {
  if (samples.empty()) throw std::invalid_argument("W1 needs samples");
  std::sort(samples.begin(), samples.end());
  const boost::math::normal_distribution<double> normal;
  const double n = static_cast<double>(samples.size());
  // Quantile coupling: sum_i int_{z_{i-1}}^{z_i} |x_i - z| phi(z) dz with
  // z_i = Phi^{-1}(i / n). An antiderivative of (x - z) phi(z) is
  // x Phi(z) + phi(z).
  auto antider = [&](double x, double z) {
    if (std::isinf(z)) return z > 0 ? x : 0.0;
    return x * boost::math::cdf(normal, z) + boost::math::pdf(normal, z);
  };
  auto quantile = [&](std::size_t i) {
    if (i == 0) return -HUGE_VAL;
    if (i == samples.size()) return HUGE_VAL;
    return boost::math::quantile(normal, static_cast<double>(i) / n);
  };
  double total = 0.0;
  double za = quantile(0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double zb = quantile(i + 1);
    const double x = samples[i];
    const double mid = std::clamp(x, za, zb);
    // z below x contributes (x - z) phi, above contributes (z - x) phi.
    total += (antider(x, mid) - antider(x, za)) - (antider(x, zb) - antider(x, mid));
    za = zb;
  }
  return total;
}

double wasserstein1_gaussian_mixture(std::vector<double> samples, const std::vector<double>& weights,
                                     const std::vector<double>& means, const std::vector<double>& sds) {
  if (samples.empty()) throw std::invalid_argument("W1 needs samples");
  if (weights.empty() || weights.size() != means.size() || weights.size() != sds.size()) {
    throw std::invalid_argument("mixture parameter lists differ in length");
  }
  double wsum = 0.0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    if (!(sds[k] > 0.0) || !(weights[k] >= 0.0)) throw std::invalid_argument("mixture needs sd > 0 and weights >= 0");
    wsum += weights[k];
  }
  if (!(wsum > 0.0)) throw std::invalid_argument("mixture weights sum to zero");
  std::sort(samples.begin(), samples.end());
  const boost::math::normal_distribution<double> normal;
  auto cdf = [&](double x) {
    double f = 0.0;
    for (std::size_t k = 0; k < weights.size(); ++k) f += weights[k] * boost::math::cdf(normal, (x - means[k]) / sds[k]);
    return f / wsum;
  };
  // Antiderivative of the CDF: sum_k w_k s_k (z Phi(z) + phi(z)).
  auto integral = [&](double x) {
    double a = 0.0;
    for (std::size_t k = 0; k < weights.size(); ++k) {
      const double z = (x - means[k]) / sds[k];
      a += weights[k] * sds[k] * (z * boost::math::cdf(normal, z) + boost::math::pdf(normal, z));
    }
    return a / wsum;
  };
  // Tail above x of 1 - F: sum_k w_k s_k (phi(z) - z (1 - Phi(z))).
  auto upper = [&](double x) {
    double a = 0.0;
    for (std::size_t k = 0; k < weights.size(); ++k) {
      const double z = (x - means[k]) / sds[k];
      a += weights[k] * sds[k] * (boost::math::pdf(normal, z) - z * boost::math::cdf(boost::math::complement(normal, z)));
    }
    return a / wsum;
  };
  const double n = static_cast<double>(samples.size());
  double total = integral(samples.front()) + upper(samples.back());
  for (std::size_t i = 0; i + 1 < samples.size(); ++i) {
    const double a = samples[i], b = samples[i + 1];
    if (b <= a) continue;
    const double c = static_cast<double>(i + 1) / n;
    auto piece = [&](double lo, double hi) { return std::abs(integral(hi) - integral(lo) - c * (hi - lo)); };
    if (cdf(a) < c && cdf(b) > c) {
      double lo = a, hi = b;
      for (int it = 0; it < 100 && hi - lo > 1e-15 * (1.0 + std::abs(lo)); ++it) {
        const double mid = 0.5 * (lo + hi);
        (cdf(mid) < c ? lo : hi) = mid;
      }
      const double cross = 0.5 * (lo + hi);
      total += piece(a, cross) + piece(cross, b);
    } else {
      total += piece(a, b);
    }
  }
  return total;
}

double wasserstein1(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || a.size() != b.size()) throw std::invalid_argument("W1 needs equal, nonempty sample sets");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

}  // namespace mgad
