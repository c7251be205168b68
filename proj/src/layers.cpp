#include "mgad/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace mgad {

using ad::make_op;
using ad::Node;

void ParamSet::add(const std::string& name, Tensor value, bool frozen) {
  if (!tensors_.emplace(name, std::move(value)).second) throw std::invalid_argument("duplicate parameter name: " + name);
  if (frozen) frozen_.insert(name);
}

const Tensor& ParamSet::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

Tensor& ParamSet::get_mut(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

void ParamSet::freeze(const std::string& name) {
  get(name);
  frozen_.insert(name);
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors_) n += t.size();
  return n;
}

BoundParams ParamSet::bind() const {
  BoundParams b;
  for (const auto& [name, t] : tensors_) {
    b.vars_.emplace(name, frozen(name) ? Var::constant(t) : Var::tracked(t));
  }
  return b;
}

const Var& BoundParams::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

Tensor normal_init(const Shape& shape, double stddev, RngStream& rng) { return stddev * gaussian(shape, rng); }

void add_conv(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t k, RngStream& rng,
              double gain) {
  const double fan_in = static_cast<double>(in * k * k);
  ps.add(name + ".w", normal_init({out, in, k, k}, gain * std::sqrt(1.0 / fan_in), rng));
  ps.add(name + ".b", Tensor({out}, 0.0));
}

void add_linear(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out, RngStream& rng, double gain) {
  ps.add(name + ".w", normal_init({out, in}, gain * std::sqrt(1.0 / static_cast<double>(in)), rng));
  ps.add(name + ".b", Tensor({out}, 0.0));
}

void add_group_norm(ParamSet& ps, const std::string& name, std::size_t channels) {
  ps.add(name + ".gamma", Tensor({channels}, 1.0));
  ps.add(name + ".beta", Tensor({channels}, 0.0));
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const Shape& ws = w.shape();
  if (ws.size() != 2) throw std::invalid_argument("linear: weight must be [out, in]");
  const std::size_t out_dim = ws[0], in_dim = ws[1];
  const bool batched = x.shape().size() == 2;
  const std::size_t rows = batched ? x.shape()[0] : 1;
  if (x.shape().back() != in_dim || (!batched && x.shape().size() != 1)) {
    throw std::invalid_argument("linear: input " + shape_string(x.shape()) + " vs weight " + shape_string(ws));
  }
  if (b.shape() != Shape{out_dim}) throw std::invalid_argument("linear: bias shape");
  Tensor out(batched ? Shape{rows, out_dim} : Shape{out_dim});
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t o = 0; o < out_dim; ++o) {
      double acc = bv[o];
      for (std::size_t i = 0; i < in_dim; ++i) acc += wv[o * in_dim + i] * xv[r * in_dim + i];
      out[r * out_dim + o] = acc;
    }
  }
  return make_op(std::move(out), {x, w, b},
                 [rows, in_dim, out_dim](const Node& self, const Tensor& g, std::span<Tensor* const> pg) {
                   const Tensor& xv = self.input(0);
                   const Tensor& wv = self.input(1);
                   for (std::size_t r = 0; r < rows; ++r) {
                     for (std::size_t o = 0; o < out_dim; ++o) {
                       const double go = g[r * out_dim + o];
                       if (pg[0]) for (std::size_t i = 0; i < in_dim; ++i) (*pg[0])[r * in_dim + i] += go * wv[o * in_dim + i];
                       if (pg[1]) for (std::size_t i = 0; i < in_dim; ++i) (*pg[1])[o * in_dim + i] += go * xv[r * in_dim + i];
                       if (pg[2]) (*pg[2])[o] += go;
                     }
                   }
                 },
                 "linear");
}

namespace {

struct ConvGeom {
  std::size_t c, h, w, o, k, stride, pad, oh, ow;
};

// Valid output range [lo, hi) along one axis for kernel offset `kk`.
inline void valid_range(std::size_t kk, std::size_t stride, std::size_t pad, std::size_t in, std::size_t out,
                        std::size_t& lo, std::size_t& hi) {
  // need 0 <= o*stride + kk - pad < in
  lo = (kk >= pad) ? 0 : (pad - kk + stride - 1) / stride;
  const long long last = static_cast<long long>(in) - 1 + static_cast<long long>(pad) - static_cast<long long>(kk);
  hi = last < 0 ? 0 : std::min(out, static_cast<std::size_t>(last) / stride + 1);
  if (lo > hi) lo = hi;
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t stride, std::size_t pad) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 3 || ws.size() != 4 || ws[1] != xs[0] || ws[2] != ws[3]) {
    throw std::invalid_argument("conv2d: input " + shape_string(xs) + " incompatible with kernel " + shape_string(ws));
  }
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be >= 1");
  ConvGeom gm{xs[0], xs[1], xs[2], ws[0], ws[2], stride, pad, 0, 0};
  if (gm.h + 2 * pad < gm.k || gm.w + 2 * pad < gm.k) throw std::invalid_argument("conv2d: kernel larger than input");
  gm.oh = (gm.h + 2 * pad - gm.k) / stride + 1;
  gm.ow = (gm.w + 2 * pad - gm.k) / stride + 1;
  const bool has_bias = b.defined();
  if (has_bias && b.shape() != Shape{gm.o}) throw std::invalid_argument("conv2d: bias shape");

  Tensor out({gm.o, gm.oh, gm.ow});
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  for (std::size_t o = 0; o < gm.o; ++o) {
    double* op = &out[o * gm.oh * gm.ow];
    if (has_bias) for (std::size_t i = 0; i < gm.oh * gm.ow; ++i) op[i] = b.value()[o];
    for (std::size_t c = 0; c < gm.c; ++c) {
      const double* ip = &xv[c * gm.h * gm.w];
      for (std::size_t ky = 0; ky < gm.k; ++ky) {
        std::size_t ylo, yhi;
        valid_range(ky, stride, pad, gm.h, gm.oh, ylo, yhi);
        for (std::size_t kx = 0; kx < gm.k; ++kx) {
          std::size_t xlo, xhi;
          valid_range(kx, stride, pad, gm.w, gm.ow, xlo, xhi);
          const double wk = wv[((o * gm.c + c) * gm.k + ky) * gm.k + kx];
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const double* row = ip + (oy * stride + ky - pad) * gm.w;
            double* orow = op + oy * gm.ow;
            for (std::size_t ox = xlo; ox < xhi; ++ox) orow[ox] += wk * row[ox * stride + kx - pad];
          }
        }
      }
    }
  }

  std::vector<Var> parents{x, w};
  if (has_bias) parents.push_back(b);
  return make_op(std::move(out), std::move(parents),
                 [gm, has_bias](const Node& self, const Tensor& g, std::span<Tensor* const> pg) {
                   const Tensor& xv = self.input(0);
                   const Tensor& wv = self.input(1);
                   const std::size_t plane = gm.oh * gm.ow;
                   for (std::size_t o = 0; o < gm.o; ++o) {
                     const double* gp = &g[o * plane];
                     if (has_bias && pg[2]) {
                       double acc = 0.0;
                       for (std::size_t i = 0; i < plane; ++i) acc += gp[i];
                       (*pg[2])[o] += acc;
                     }
                     for (std::size_t c = 0; c < gm.c; ++c) {
                       const double* ip = &xv[c * gm.h * gm.w];
                       double* gip = pg[0] ? &(*pg[0])[c * gm.h * gm.w] : nullptr;
                       for (std::size_t ky = 0; ky < gm.k; ++ky) {
                         std::size_t ylo, yhi;
                         valid_range(ky, gm.stride, gm.pad, gm.h, gm.oh, ylo, yhi);
                         for (std::size_t kx = 0; kx < gm.k; ++kx) {
                           std::size_t xlo, xhi;
                           valid_range(kx, gm.stride, gm.pad, gm.w, gm.ow, xlo, xhi);
                           const std::size_t widx = ((o * gm.c + c) * gm.k + ky) * gm.k + kx;
                           const double wk = wv[widx];
                           double gw = 0.0;
                           for (std::size_t oy = ylo; oy < yhi; ++oy) {
                             const std::size_t iy = oy * gm.stride + ky - gm.pad;
                             const double* row = ip + iy * gm.w;
                             const double* grow = gp + oy * gm.ow;
                             if (gip) {
                               double* girow = gip + iy * gm.w;
                               for (std::size_t ox = xlo; ox < xhi; ++ox) {
                                 const std::size_t ix = ox * gm.stride + kx - gm.pad;
                                 gw += grow[ox] * row[ix];
                                 girow[ix] += wk * grow[ox];
                               }
                             } else {
                               for (std::size_t ox = xlo; ox < xhi; ++ox) gw += grow[ox] * row[ox * gm.stride + kx - gm.pad];
                             }
                           }
                           if (pg[1]) (*pg[1])[widx] += gw;
                         }
                       }
                     }
                   }
                 },
                 "conv2d");
}

Var group_norm(const Var& x, std::size_t groups, const Var& gamma, const Var& beta, double eps) {
  const Shape& xs = x.shape();
  if (xs.size() != 3) throw std::invalid_argument("group_norm expects [C, H, W]");
  const std::size_t c = xs[0], hw = xs[1] * xs[2];
  if (groups == 0 || c % groups != 0) {
    throw std::invalid_argument("group_norm: " + std::to_string(c) + " channels not divisible into " +
                                std::to_string(groups) + " groups");
  }
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) throw std::invalid_argument("group_norm: affine shape");
  const std::size_t cpg = c / groups, n = cpg * hw;
  const Tensor& xv = x.value();
  Tensor xhat(xs);
  std::vector<double> inv_std(groups);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const std::size_t off = gi * n;
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += xv[off + i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (xv[off + i] - mu) * (xv[off + i] - mu);
    var /= static_cast<double>(n);
    inv_std[gi] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) xhat[off + i] = (xv[off + i] - mu) * inv_std[gi];
  }
  Tensor out(xs);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] = gamma.value()[ch] * xhat[ch * hw + i] + beta.value()[ch];

  return make_op(std::move(out), {x, gamma, beta},
                 [xhat = std::move(xhat), inv_std = std::move(inv_std), groups, c, hw, cpg, n](
                     const Node& self, const Tensor& g, std::span<Tensor* const> pg) {
                   const Tensor& gam = self.input(1);
                   for (std::size_t ch = 0; ch < c; ++ch) {
                     double sg = 0.0, sgx = 0.0;
                     for (std::size_t i = 0; i < hw; ++i) {
                       sg += g[ch * hw + i];
                       sgx += g[ch * hw + i] * xhat[ch * hw + i];
                     }
                     if (pg[1]) (*pg[1])[ch] += sgx;
                     if (pg[2]) (*pg[2])[ch] += sg;
                   }
                   if (!pg[0]) return;
                   const double dn = static_cast<double>(n);
                   for (std::size_t gi = 0; gi < groups; ++gi) {
                     const std::size_t off = gi * n;
                     double sd = 0.0, sdx = 0.0;
                     for (std::size_t i = 0; i < n; ++i) {
                       const double d = g[off + i] * gam[(off + i) / hw];
                       sd += d;
                       sdx += d * xhat[off + i];
                     }
                     for (std::size_t i = 0; i < n; ++i) {
                       const double d = g[off + i] * gam[(off + i) / hw];
                       (*pg[0])[off + i] += inv_std[gi] * (d - sd / dn - xhat[off + i] * sdx / dn);
                     }
                   }
                   (void)cpg;
                 },
                 "group_norm");
}

Var add_channel_bias(const Var& x, const Var& v) {
  const Shape& xs = x.shape();
  if (xs.size() != 3 || v.shape() != Shape{xs[0]}) throw std::invalid_argument("add_channel_bias: shape mismatch");
  const std::size_t c = xs[0], hw = xs[1] * xs[2];
  Tensor out = x.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] += v.value()[ch];
  return make_op(std::move(out), {x, v},
                 [c, hw](const Node&, const Tensor& g, std::span<Tensor* const> pg) {
                   if (pg[0]) for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
                   if (pg[1]) {
                     for (std::size_t ch = 0; ch < c; ++ch) {
                       double acc = 0.0;
                       for (std::size_t i = 0; i < hw; ++i) acc += g[ch * hw + i];
                       (*pg[1])[ch] += acc;
                     }
                   }
                 },
                 "add_channel_bias");
}

Var avg_pool2(const Var& x) {
  const Shape& xs = x.shape();
  if (xs.size() != 3 || xs[1] % 2 || xs[2] % 2) throw std::invalid_argument("avg_pool2 needs even H and W");
  const std::size_t c = xs[0], h = xs[1], w = xs[2], oh = h / 2, ow = w / 2;
  Tensor out({c, oh, ow});
  const Tensor& v = x.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const std::size_t base = ch * h * w + 2 * y * w + 2 * xx;
        out[(ch * oh + y) * ow + xx] = 0.25 * (v[base] + v[base + 1] + v[base + w] + v[base + w + 1]);
      }
  return make_op(std::move(out), {x},
                 [c, h, w, oh, ow](const Node&, const Tensor& g, std::span<Tensor* const> pg) {
                   for (std::size_t ch = 0; ch < c; ++ch)
                     for (std::size_t y = 0; y < oh; ++y)
                       for (std::size_t xx = 0; xx < ow; ++xx) {
                         const double gv = 0.25 * g[(ch * oh + y) * ow + xx];
                         const std::size_t base = ch * h * w + 2 * y * w + 2 * xx;
                         Tensor& t = *pg[0];
                         t[base] += gv;
                         t[base + 1] += gv;
                         t[base + w] += gv;
                         t[base + w + 1] += gv;
                       }
                 },
                 "avg_pool2");
}

Var upsample_nearest2(const Var& x) {
  const Shape& xs = x.shape();
  if (xs.size() != 3) throw std::invalid_argument("upsample_nearest2 expects [C, H, W]");
  const std::size_t c = xs[0], h = xs[1], w = xs[2], oh = 2 * h, ow = 2 * w;
  Tensor out({c, oh, ow});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) out[(ch * oh + y) * ow + xx] = x.value()[(ch * h + y / 2) * w + xx / 2];
  return make_op(std::move(out), {x},
                 [c, h, w, oh, ow](const Node&, const Tensor& g, std::span<Tensor* const> pg) {
                   for (std::size_t ch = 0; ch < c; ++ch)
                     for (std::size_t y = 0; y < oh; ++y)
                       for (std::size_t xx = 0; xx < ow; ++xx)
                         (*pg[0])[(ch * h + y / 2) * w + xx / 2] += g[(ch * oh + y) * ow + xx];
                 },
                 "upsample_nearest2");
}

Var concat_channels(const Var& a, const Var& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[1] != bs[1] || as[2] != bs[2]) {
    throw std::invalid_argument("concat_channels: " + shape_string(as) + " vs " + shape_string(bs));
  }
  std::vector<double> data(a.value().values());
  data.insert(data.end(), b.value().data().begin(), b.value().data().end());
  const std::size_t na = a.size();
  return make_op(Tensor({as[0] + bs[0], as[1], as[2]}, std::move(data)), {a, b},
                 [na](const Node&, const Tensor& g, std::span<Tensor* const> pg) {
                   if (pg[0]) for (std::size_t i = 0; i < na; ++i) (*pg[0])[i] += g[i];
                   if (pg[1]) for (std::size_t i = na; i < g.size(); ++i) (*pg[1])[i - na] += g[i];
                 },
                 "concat_channels");
}

Var global_avg_pool(const Var& x) {
  const Shape& xs = x.shape();
  if (xs.size() != 3) throw std::invalid_argument("global_avg_pool expects [C, H, W]");
  const std::size_t c = xs[0], hw = xs[1] * xs[2];
  Tensor out({c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::size_t i = 0; i < hw; ++i) acc += x.value()[ch * hw + i];
    out[ch] = acc / static_cast<double>(hw);
  }
  return make_op(std::move(out), {x},
                 [c, hw](const Node&, const Tensor& g, std::span<Tensor* const> pg) {
                   for (std::size_t ch = 0; ch < c; ++ch)
                     for (std::size_t i = 0; i < hw; ++i) (*pg[0])[ch * hw + i] += g[ch] / static_cast<double>(hw);
                 },
                 "global_avg_pool");
}

Var conv(const BoundParams& p, const std::string& name, const Var& x, std::size_t stride, std::size_t pad) {
  return conv2d(x, p[name + ".w"], p[name + ".b"], stride, pad);
}

Var dense(const BoundParams& p, const std::string& name, const Var& x) {
  return linear(x, p[name + ".w"], p[name + ".b"]);
}

Var norm(const BoundParams& p, const std::string& name, const Var& x, std::size_t groups) {
  return group_norm(x, groups, p[name + ".gamma"], p[name + ".beta"]);
}

void add_self_attention(ParamSet& ps, const std::string& name, std::size_t channels, RngStream& rng) {
  add_group_norm(ps, name + ".norm", channels);
  add_linear(ps, name + ".q", channels, channels, rng);
  add_linear(ps, name + ".k", channels, channels, rng);
  add_linear(ps, name + ".v", channels, channels, rng);
  add_linear(ps, name + ".o", channels, channels, rng);
}

Var self_attention(const BoundParams& p, const std::string& name, const Var& x, std::size_t groups) {
  const Shape& xs = x.shape();
  const std::size_t c = xs[0], hw = xs[1] * xs[2];
  const Var h = norm(p, name + ".norm", x, groups);
  const Var tokens = ad::transpose(ad::reshape(h, {c, hw}));  // [HW, C]
  const Var q = dense(p, name + ".q", tokens);
  const Var k = dense(p, name + ".k", tokens);
  const Var v = dense(p, name + ".v", tokens);
  const Var scores = ad::scale(ad::matmul(q, ad::transpose(k)), 1.0 / std::sqrt(static_cast<double>(c)));
  const Var attn = ad::softmax(scores);  // rows sum to one
  const Var mixed = dense(p, name + ".o", ad::matmul(attn, v));
  return ad::add(x, ad::reshape(ad::transpose(mixed), xs));
}

Tensor sinusoidal_time_embedding(double t, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) throw std::invalid_argument("time embedding dim must be even and positive");
  if (t < 0) throw std::invalid_argument("time embedding needs t >= 0");
  Tensor out({dim});
  for (std::size_t i = 0; i < dim / 2; ++i) {
    const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
    out[2 * i] = std::sin(t * freq);
    out[2 * i + 1] = std::cos(t * freq);
  }
  return out;
}

}  // namespace mgad
