#pragma once

#include <cstddef>
#include <map>
#include <set>
#include <string>

#include "mgad/autodiff.hpp"
#include "mgad/rng.hpp"

namespace mgad {

using ad::Var;

class BoundParams;

/// Named model parameters. Names are unique layer paths ("enc.0.conv1.w").
class ParamSet {
 public:
  void add(const std::string& name, Tensor value, bool frozen = false);
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  Tensor& get_mut(const std::string& name);
  bool frozen(const std::string& name) const { return frozen_.count(name) != 0; }
  void freeze(const std::string& name);

  const std::map<std::string, Tensor>& tensors() const { return tensors_; }
  std::size_t tensor_count() const { return tensors_.size(); }
  /// Total number of scalar parameters.
  std::size_t scalar_count() const;

  /// Leaf Vars for one forward pass. Frozen entries become constants.
  BoundParams bind() const;

  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  std::map<std::string, Tensor> tensors_;
  std::set<std::string> frozen_;
};

class BoundParams {
 public:
  const Var& operator[](const std::string& name) const;
  const std::map<std::string, Var>& vars() const { return vars_; }
  /// Replaces (or adds) one binding.
  void set(const std::string& name, Var v) { vars_[name] = std::move(v); }

 private:
  std::map<std::string, Var> vars_;
  friend class ParamSet;
};

// ---- initialisers ----
Tensor normal_init(const Shape& shape, double stddev, RngStream& rng);
void add_conv(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t k, RngStream& rng,
              double gain = 1.0);
void add_linear(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out, RngStream& rng,
                double gain = 1.0);
void add_group_norm(ParamSet& ps, const std::string& name, std::size_t channels);

// ---- layer ops (all on single samples, images are [C, H, W]) ----

/// y = W x + b for x of shape [in] or [n, in]; W is [out, in], b is [out].
Var linear(const Var& x, const Var& w, const Var& b);
/// 2-D convolution with square kernels, zero padding. `b` may be undefined.
Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t stride, std::size_t pad);
/// Normalises each channel group to zero mean and unit variance, then applies
/// a per-channel affine map.
Var group_norm(const Var& x, std::size_t groups, const Var& gamma, const Var& beta, double eps = 1e-5);
/// Adds v[c] to every pixel of channel c.
Var add_channel_bias(const Var& x, const Var& v);
Var avg_pool2(const Var& x);
Var upsample_nearest2(const Var& x);
Var concat_channels(const Var& a, const Var& b);
/// Mean over H and W; returns [C].
Var global_avg_pool(const Var& x);
/// Single-head self-attention over the H*W positions of x with a residual
/// connection. Parameters `<name>.{q,k,v,o}.{w,b}` and `<name>.norm.*`.
Var self_attention(const BoundParams& p, const std::string& name, const Var& x, std::size_t groups);
void add_self_attention(ParamSet& ps, const std::string& name, std::size_t channels, RngStream& rng);

/// Convenience wrappers reading `<name>.w` / `<name>.b`.
Var conv(const BoundParams& p, const std::string& name, const Var& x, std::size_t stride = 1, std::size_t pad = 1);
Var dense(const BoundParams& p, const std::string& name, const Var& x);
Var norm(const BoundParams& p, const std::string& name, const Var& x, std::size_t groups);

/// Interleaved sin/cos encoding of a step index over a geometric frequency
/// ladder with base 10000: out[2i] = sin(t w_i), out[2i+1] = cos(t w_i),
/// w_i = 10000^(-2i/dim).
Tensor sinusoidal_time_embedding(double t, std::size_t dim);

}  // namespace mgad
