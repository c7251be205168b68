#include "mgad/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace mgad {

using ad::Var;

int MixtureParams::label_count() const {
  int n = 0;
  for (std::size_t k = 0; k < size(); ++k) n = std::max(n, label_of(k));
  return n;
}

void MixtureParams::validate() const {
  const std::size_t k = weights.size();
  if (k == 0) throw std::invalid_argument("mixture needs at least one component");
  if (means.size() != k || variances.size() != k || (!labels.empty() && labels.size() != k)) {
    throw std::invalid_argument("mixture field lengths disagree");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    if (!(weights[i] > 0.0)) throw std::invalid_argument("mixture weights must be positive");
    if (!(variances[i] >= 0.0)) throw std::invalid_argument("mixture variances must be non-negative");
    if (means[i].shape() != means[0].shape()) throw std::invalid_argument("mixture means differ in shape");
    if (label_of(i) < 1) throw std::invalid_argument("mixture labels start at 1");
    total += weights[i];
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("mixture weights must sum to 1");
}

MixtureParams empirical_mixture(const std::vector<Tensor>& items, const std::vector<int>& labels) {
  if (items.empty()) throw std::invalid_argument("empirical mixture needs items");
  if (!labels.empty() && labels.size() != items.size()) throw std::invalid_argument("one label per item");
  MixtureParams mix;
  mix.weights.assign(items.size(), 1.0 / static_cast<double>(items.size()));
  mix.means = items;
  mix.variances.assign(items.size(), 0.0);
  mix.labels = labels;
  mix.validate();
  return mix;
}

MixtureSamples sample_mixture(const MixtureParams& mix, std::size_t n, RngStream& rng) {
  mix.validate();
  MixtureSamples out;
  for (std::size_t i = 0; i < n; ++i) {
    double u = rng.uniform();
    std::size_t k = 0;
    while (k + 1 < mix.size() && u >= mix.weights[k]) u -= mix.weights[k++];
    out.items.push_back(axpy(mix.means[k], std::sqrt(mix.variances[k]), gaussian(mix.means[k].shape(), rng)));
    out.labels.push_back(mix.label_of(k));
  }
  return out;
}

namespace {

// Per-component terms of the noised mixture restricted to one label:
// p_t(x) = sum_k w_k N(x; a m_k, v_k I) with a = sqrt(alpha_bar_t).
struct NoisedMixture {
  std::vector<std::size_t> active;
  std::vector<double> var;     // v_k
  std::vector<double> offset;  // log w_k - D/2 log(2 pi v_k)
  std::vector<Tensor> mean;    // a m_k
};

NoisedMixture noised(const Tensor& x_shape_ref, int t, const Schedule& sched, const MixtureParams& mix, int label) {
  if (x_shape_ref.shape() != mix.means.at(0).shape()) {
    throw std::invalid_argument("analytic_eps: input " + shape_string(x_shape_ref.shape()) + " vs mixture " +
                                shape_string(mix.means[0].shape()));
  }
  const double ab = sched.alpha_bar(t);
  const double a = std::sqrt(ab);
  const double dim = static_cast<double>(x_shape_ref.size());
  NoisedMixture out;
  for (std::size_t k = 0; k < mix.size(); ++k) {
    if (label != kNullLabel && mix.label_of(k) != label) continue;
    const double v = ab * mix.variances[k] + (1.0 - ab);
    if (!(v > 0.0)) throw std::invalid_argument("analytic_eps: degenerate component variance at this step");
    out.active.push_back(k);
    out.var.push_back(v);
    out.offset.push_back(std::log(mix.weights[k]) - 0.5 * dim * std::log(2.0 * std::numbers::pi * v));
    out.mean.push_back(a * mix.means[k]);
  }
  if (out.active.empty()) throw std::invalid_argument("no mixture component carries label " + std::to_string(label));
  return out;
}

std::vector<double> log_terms(const Tensor& x, const NoisedMixture& nm) {
  std::vector<double> logit(nm.active.size());
  for (std::size_t j = 0; j < logit.size(); ++j) {
    double sq = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = x[i] - nm.mean[j][i];
      sq += d * d;
    }
    logit[j] = nm.offset[j] - sq / (2.0 * nm.var[j]);
  }
  return logit;
}

double log_sum_exp(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace

double mixture_log_density(const Tensor& x_t, int t, const Schedule& sched, const MixtureParams& mix, int label) {
  return log_sum_exp(log_terms(x_t, noised(x_t, t, sched, mix, label)));
}

Tensor analytic_eps(const Tensor& x_t, int t, const Schedule& sched, const MixtureParams& mix, int label) {
  const NoisedMixture nm = noised(x_t, t, sched, mix, label);
  const std::vector<double> logit = log_terms(x_t, nm);
  const double lse = log_sum_exp(logit);
  Tensor eps(x_t.shape());
  for (std::size_t j = 0; j < logit.size(); ++j) {
    const double r = std::exp(logit[j] - lse) / nm.var[j];
    if (r == 0.0) continue;
    for (std::size_t i = 0; i < eps.size(); ++i) eps[i] += r * (x_t[i] - nm.mean[j][i]);
  }
  return std::sqrt(1.0 - sched.alpha_bar(t)) * eps;
}

Var analytic_eps(const Var& x_t, int t, const Schedule& sched, const MixtureParams& mix, int label) {
  const NoisedMixture nm = noised(x_t.value(), t, sched, mix, label);
  const std::size_t k = nm.active.size();
  const std::size_t d = x_t.size();

  // logit_k = offset_k - (|x|^2 - 2 x.m_k + |m_k|^2) / (2 v_k)
  Tensor means({k, d});
  Tensor quad({k, 1}), lin({k, 1}), constant({k, 1}), inv_var({1, k});
  for (std::size_t j = 0; j < k; ++j) {
    double mm = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      means[j * d + i] = nm.mean[j][i];
      mm += nm.mean[j][i] * nm.mean[j][i];
    }
    quad[j] = -0.5 / nm.var[j];
    lin[j] = 1.0 / nm.var[j];
    constant[j] = nm.offset[j] - mm / (2.0 * nm.var[j]);
    inv_var[j] = 1.0 / nm.var[j];
  }
  const Var m = Var::constant(means);
  const Var x_col = ad::reshape(x_t, {d, 1});
  const Var xx = ad::reshape(ad::dot(x_t, x_t), {1, 1});
  const Var xx_k = ad::matmul(Var::constant(Tensor({k, 1}, 1.0)), xx);
  const Var xm = ad::matmul(m, x_col);
  Var logits = ad::add(ad::mul(Var::constant(quad), xx_k), ad::mul(Var::constant(lin), xm));
  logits = ad::add(logits, Var::constant(constant));
  const Var r = ad::softmax(ad::reshape(logits, {1, k}));

  // eps / sqrt(1 - ab) = x sum_k r_k / v_k - sum_k (r_k / v_k) m_k
  const Var rv = ad::mul(r, Var::constant(inv_var));
  const Var total = ad::reshape(ad::sum(rv), {1});
  const Var pull = ad::reshape(ad::matmul(rv, m), x_t.shape());
  const Var eps = ad::sub(ad::mul_scalar(total, x_t), pull);
  return ad::scale(eps, std::sqrt(1.0 - sched.alpha_bar(t)));
}

AnalyticDenoiser::AnalyticDenoiser(MixtureParams mix) : mix_(std::move(mix)) { mix_.validate(); }

Tensor AnalyticDenoiser::eps(const Tensor& x_t, int t, const Schedule& sched, int label) const {
  return analytic_eps(x_t, t, sched, mix_, label);
}

Var AnalyticDenoiser::eps_var(const Var& x_t, int t, const Schedule& sched, int label) const {
  return analytic_eps(x_t, t, sched, mix_, label);
}

void EpsNetwork::check_inputs(const Var& x, int label) const {
  if (x.shape() != input_shape()) {
    throw std::invalid_argument("network input " + shape_string(x.shape()) + ", expected " +
                                shape_string(input_shape()));
  }
  if (label < 0 || label >= vocab()) {
    throw std::invalid_argument("unknown conditioning token " + std::to_string(label));
  }
}

// ---- MLP ----

MlpNet::MlpNet(MlpConfig cfg) : cfg_(cfg) {
  if (cfg_.dim == 0 || cfg_.hidden == 0 || cfg_.vocab < 1 || cfg_.time_dim % 2 != 0) {
    throw std::invalid_argument("invalid MLP config");
  }
}

ParamSet MlpNet::init(RngStream& rng) const {
  ParamSet ps;
  add_linear(ps, "time.0", cfg_.time_dim, cfg_.hidden, rng);
  add_linear(ps, "time.1", cfg_.hidden, cfg_.hidden, rng);
  ps.add("label.emb", normal_init({static_cast<std::size_t>(cfg_.vocab), cfg_.hidden}, 1.0, rng));
  add_linear(ps, "in", cfg_.dim, cfg_.hidden, rng);
  for (std::size_t i = 0; i < cfg_.depth; ++i) {
    add_linear(ps, "block." + std::to_string(i) + ".a", cfg_.hidden, cfg_.hidden, rng);
    add_linear(ps, "block." + std::to_string(i) + ".b", cfg_.hidden, cfg_.hidden, rng);
  }
  add_linear(ps, "out", cfg_.hidden, cfg_.dim, rng);
  return ps;
}

Var MlpNet::forward(const BoundParams& p, const Var& x, int t, int label) const {
  check_inputs(x, label);
  const Var temb = Var::constant(sinusoidal_time_embedding(t, cfg_.time_dim));
  Var c = dense(p, "time.1", ad::silu(dense(p, "time.0", temb)));
  c = ad::add(c, ad::select(p["label.emb"], static_cast<std::size_t>(label)));
  Var h = ad::add(dense(p, "in", x), c);
  for (std::size_t i = 0; i < cfg_.depth; ++i) {
    const std::string name = "block." + std::to_string(i);
    const Var u = ad::add(dense(p, name + ".a", ad::silu(h)), c);
    h = ad::add(h, dense(p, name + ".b", ad::silu(u)));
  }
  return dense(p, "out", ad::silu(h));
}

nlohmann::json MlpNet::descriptor() const {
  return {{"arch", "mlp"},          {"dim", cfg_.dim},           {"hidden", cfg_.hidden},
          {"depth", cfg_.depth},    {"time_dim", cfg_.time_dim}, {"vocab", cfg_.vocab}};
}

// ---- U-Net ----

void UNetConfig::validate() const {
  if (stages() < 1) throw std::invalid_argument("U-Net needs at least one stage");
  if (resolution % (std::size_t{1} << stages()) != 0) {
    throw std::invalid_argument("U-Net resolution must be divisible by 2^stages");
  }
  if (vocab < 1 || time_dim % 2 != 0 || groups == 0 || in_channels == 0) {
    throw std::invalid_argument("invalid U-Net config");
  }
  for (std::size_t m : channel_mult) {
    if (m == 0 || (base_width * m) % groups != 0) {
      throw std::invalid_argument("U-Net channel widths must be positive multiples of the group count");
    }
  }
  for (std::size_t r : attention_resolutions) {
    bool found = false;
    for (std::size_t i = 0; i <= stages(); ++i) found = found || r == resolution >> i;
    if (!found) throw std::invalid_argument("attention resolution " + std::to_string(r) + " is not a feature map size");
  }
}

namespace {

std::size_t temb_width(const UNetConfig& cfg) { return 4 * cfg.base_width; }

bool has_attention(const UNetConfig& cfg, std::size_t res) {
  return std::find(cfg.attention_resolutions.begin(), cfg.attention_resolutions.end(), res) !=
         cfg.attention_resolutions.end();
}

void add_res_block(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t temb,
                   RngStream& rng) {
  add_group_norm(ps, name + ".norm1", in);
  add_conv(ps, name + ".conv1", in, out, 3, rng);
  add_linear(ps, name + ".temb", temb, out, rng);
  add_group_norm(ps, name + ".norm2", out);
  add_conv(ps, name + ".conv2", out, out, 3, rng);
  if (in != out) add_conv(ps, name + ".skip", in, out, 1, rng);
}

Var res_block(const BoundParams& p, const std::string& name, const Var& h, const Var& temb, std::size_t groups) {
  Var a = conv(p, name + ".conv1", ad::silu(norm(p, name + ".norm1", h, groups)));
  a = add_channel_bias(a, dense(p, name + ".temb", temb));
  a = conv(p, name + ".conv2", ad::silu(norm(p, name + ".norm2", a, groups)));
  const bool project = p.vars().count(name + ".skip.w") != 0;
  return ad::add(project ? conv(p, name + ".skip", h, 1, 0) : h, a);
}

}  // namespace

UNet::UNet(UNetConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

ParamSet UNet::init(RngStream& rng) const {
  ParamSet ps;
  const std::size_t e = temb_width(cfg_);
  add_linear(ps, "time.0", cfg_.time_dim, e, rng);
  add_linear(ps, "time.1", e, e, rng);
  ps.add("label.emb", normal_init({static_cast<std::size_t>(cfg_.vocab), e}, 1.0, rng));
  std::size_t prev = cfg_.base_width * cfg_.channel_mult[0];
  add_conv(ps, "conv_in", cfg_.in_channels, prev, 3, rng);
  for (std::size_t i = 0; i < cfg_.stages(); ++i) {
    const std::size_t ch = cfg_.base_width * cfg_.channel_mult[i];
    add_res_block(ps, "down." + std::to_string(i), prev, ch, e, rng);
    if (has_attention(cfg_, cfg_.resolution >> i)) add_self_attention(ps, "down." + std::to_string(i) + ".attn", ch, rng);
    prev = ch;
  }
  add_res_block(ps, "mid.0", prev, prev, e, rng);
  if (has_attention(cfg_, cfg_.resolution >> cfg_.stages())) add_self_attention(ps, "mid.attn", prev, rng);
  add_res_block(ps, "mid.1", prev, prev, e, rng);
  for (std::size_t i = cfg_.stages(); i-- > 0;) {
    const std::size_t ch = cfg_.base_width * cfg_.channel_mult[i];
    add_res_block(ps, "up." + std::to_string(i), prev + ch, ch, e, rng);
    if (has_attention(cfg_, cfg_.resolution >> i)) add_self_attention(ps, "up." + std::to_string(i) + ".attn", ch, rng);
    prev = ch;
  }
  add_group_norm(ps, "out.norm", prev);
  add_conv(ps, "conv_out", prev, cfg_.in_channels, 3, rng);
  return ps;
}

Var UNet::forward(const BoundParams& p, const Var& x, int t, int label) const {
  check_inputs(x, label);
  const std::size_t g = cfg_.groups;
  const Var t_in = Var::constant(sinusoidal_time_embedding(t, cfg_.time_dim));
  Var temb = dense(p, "time.1", ad::silu(dense(p, "time.0", t_in)));
  temb = ad::silu(ad::add(temb, ad::select(p["label.emb"], static_cast<std::size_t>(label))));

  Var h = conv(p, "conv_in", x);
  std::vector<Var> skips;
  for (std::size_t i = 0; i < cfg_.stages(); ++i) {
    const std::string name = "down." + std::to_string(i);
    h = res_block(p, name, h, temb, g);
    if (has_attention(cfg_, cfg_.resolution >> i)) h = self_attention(p, name + ".attn", h, g);
    skips.push_back(h);
    h = avg_pool2(h);
  }
  h = res_block(p, "mid.0", h, temb, g);
  if (has_attention(cfg_, cfg_.resolution >> cfg_.stages())) h = self_attention(p, "mid.attn", h, g);
  h = res_block(p, "mid.1", h, temb, g);
  for (std::size_t i = cfg_.stages(); i-- > 0;) {
    const std::string name = "up." + std::to_string(i);
    h = concat_channels(upsample_nearest2(h), skips[i]);
    h = res_block(p, name, h, temb, g);
    if (has_attention(cfg_, cfg_.resolution >> i)) h = self_attention(p, name + ".attn", h, g);
  }
  return conv(p, "conv_out", ad::silu(norm(p, "out.norm", h, g)));
}

nlohmann::json UNet::descriptor() const {
  return {{"arch", "unet"},
          {"resolution", cfg_.resolution},
          {"in_channels", cfg_.in_channels},
          {"base_width", cfg_.base_width},
          {"channel_mult", cfg_.channel_mult},
          {"attention_resolutions", cfg_.attention_resolutions},
          {"time_dim", cfg_.time_dim},
          {"vocab", cfg_.vocab},
          {"groups", cfg_.groups}};
}

std::shared_ptr<const EpsNetwork> network_from_descriptor(const nlohmann::json& desc) {
  try {
    const std::string arch = desc.at("arch").get<std::string>();
    if (arch == "mlp") {
      MlpConfig c;
      c.dim = desc.at("dim").get<std::size_t>();
      c.hidden = desc.at("hidden").get<std::size_t>();
      c.depth = desc.at("depth").get<std::size_t>();
      c.time_dim = desc.at("time_dim").get<std::size_t>();
      c.vocab = desc.at("vocab").get<int>();
      return std::make_shared<MlpNet>(c);
    }
    if (arch == "unet") {
      UNetConfig c;
      c.resolution = desc.at("resolution").get<std::size_t>();
      c.in_channels = desc.at("in_channels").get<std::size_t>();
      c.base_width = desc.at("base_width").get<std::size_t>();
      c.channel_mult = desc.at("channel_mult").get<std::vector<std::size_t>>();
      c.attention_resolutions = desc.at("attention_resolutions").get<std::vector<std::size_t>>();
      c.time_dim = desc.at("time_dim").get<std::size_t>();
      c.vocab = desc.at("vocab").get<int>();
      c.groups = desc.at("groups").get<std::size_t>();
      return std::make_shared<UNet>(c);
    }
    throw std::invalid_argument("unknown network architecture '" + arch + "'");
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("bad network descriptor: ") + e.what());
  }
}

NetworkDenoiser::NetworkDenoiser(std::shared_ptr<const EpsNetwork> net, const ParamSet& params)
    : net_(std::move(net)) {
  ParamSet frozen = params;
  for (const auto& [name, _] : params.tensors()) frozen.freeze(name);
  bound_ = frozen.bind();
}

Tensor NetworkDenoiser::eps(const Tensor& x_t, int t, const Schedule& sched, int label) const {
  return net_->forward(bound_, Var::constant(x_t), sched.model_step(t), label).value();
}

Var NetworkDenoiser::eps_var(const Var& x_t, int t, const Schedule& sched, int label) const {
  return net_->forward(bound_, x_t, sched.model_step(t), label);
}

}  // namespace mgad
