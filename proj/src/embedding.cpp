#include "mgad/embedding.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "mgad/diffusion.hpp"
#include "mgad/error.hpp"

namespace mgad {

using ad::Var;

void EmbedderConfig::validate() const {
  if (dim == 0 || channels == 0 || width == 0 || vocab == 0 || time_dim % 2 != 0 || !(temperature > 0.0)) {
    throw std::invalid_argument("invalid embedder config");
  }
  if (resolution % 4 != 0) throw std::invalid_argument("embedder resolution must be divisible by 4");
  if (groups == 0 || width % groups != 0) throw std::invalid_argument("embedder width must be a multiple of groups");
}

nlohmann::json EmbedderConfig::to_json() const {
  return {{"dim", dim},           {"resolution", resolution}, {"channels", channels},
          {"width", width},       {"time_dim", time_dim},     {"vocab", vocab},
          {"groups", groups},     {"temperature", temperature}};
}

EmbedderConfig EmbedderConfig::from_json(const nlohmann::json& j) {
  EmbedderConfig c;
  try {
    c.dim = j.at("dim").get<std::size_t>();
    c.resolution = j.at("resolution").get<std::size_t>();
    c.channels = j.at("channels").get<std::size_t>();
    c.width = j.at("width").get<std::size_t>();
    c.time_dim = j.at("time_dim").get<std::size_t>();
    c.vocab = j.at("vocab").get<std::size_t>();
    c.groups = j.at("groups").get<std::size_t>();
    c.temperature = j.at("temperature").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("bad embedder config: ") + e.what());
  }
  c.validate();
  return c;
}

ParamSet init_embedder(const EmbedderConfig& cfg, RngStream& rng) {
  cfg.validate();
  const std::size_t w = cfg.width, w2 = 2 * cfg.width;
  ParamSet ps;
  ps.add("txt.emb", normal_init({cfg.vocab, cfg.dim}, 1.0, rng));
  add_linear(ps, "txt.0", cfg.dim, cfg.dim, rng);
  add_linear(ps, "txt.1", cfg.dim, cfg.dim, rng);
  add_linear(ps, "img.time", cfg.time_dim, cfg.dim, rng);
  add_conv(ps, "img.conv0", cfg.channels, w, 3, rng);
  add_group_norm(ps, "img.norm0", w);
  add_linear(ps, "img.t0", cfg.dim, w, rng);
  add_conv(ps, "img.conv1", w, w2, 3, rng);
  add_group_norm(ps, "img.norm1", w2);
  add_linear(ps, "img.t1", cfg.dim, w2, rng);
  add_conv(ps, "img.conv2", w2, w2, 3, rng);
  add_group_norm(ps, "img.norm2", w2);
  add_linear(ps, "img.proj", w2, cfg.dim, rng);
  return ps;
}

Var text_embedding(const EmbedderConfig& cfg, const BoundParams& p, const Tokens& tokens) {
  if (tokens.empty()) throw std::invalid_argument("empty prompt");
  Var acc;
  for (std::size_t tok : tokens) {
    if (tok >= cfg.vocab) throw std::invalid_argument("token id " + std::to_string(tok) + " outside vocabulary");
    const Var row = ad::select(p["txt.emb"], tok);
    acc = acc.defined() ? ad::add(acc, row) : row;
  }
  const Var pooled = ad::scale(acc, 1.0 / static_cast<double>(tokens.size()));
  return ad::l2_normalize(dense(p, "txt.1", ad::silu(dense(p, "txt.0", pooled))));
}

Var image_embedding(const EmbedderConfig& cfg, const BoundParams& p, const Var& x, int t) {
  const Shape want{cfg.channels, cfg.resolution, cfg.resolution};
  if (x.shape() != want) {
    throw std::invalid_argument("embedder input " + shape_string(x.shape()) + ", expected " + shape_string(want));
  }
  if (t < 0) throw std::invalid_argument("embedder step must be >= 0");
  const Var temb = ad::silu(dense(p, "img.time", Var::constant(sinusoidal_time_embedding(t, cfg.time_dim))));
  const std::size_t g = cfg.groups;
  Var h = conv(p, "img.conv0", x, 2, 1);
  h = ad::silu(add_channel_bias(norm(p, "img.norm0", h, g), dense(p, "img.t0", temb)));
  h = conv(p, "img.conv1", h, 2, 1);
  h = ad::silu(add_channel_bias(norm(p, "img.norm1", h, g), dense(p, "img.t1", temb)));
  h = conv(p, "img.conv2", h, 1, 1);
  h = ad::silu(norm(p, "img.norm2", h, g));
  return ad::l2_normalize(dense(p, "img.proj", global_avg_pool(h)));
}

Var contrastive_loss(const Var& images, const Var& texts, double temperature) {
  const std::size_t b = images.shape().at(0);
  if (b < 2) throw std::invalid_argument("contrastive loss needs a batch of at least 2");
  if (texts.shape() != images.shape()) throw std::invalid_argument("image and text batches differ in shape");
  const Var logits = ad::scale(ad::matmul(images, ad::transpose(texts)), 1.0 / temperature);
  std::vector<std::size_t> diag(b);
  for (std::size_t i = 0; i < b; ++i) diag[i] = i;
  return ad::scale(ad::add(ad::cross_entropy(logits, diag), ad::cross_entropy(ad::transpose(logits), diag)), 0.5);
}

Embedder::Embedder(EmbedderConfig cfg, const ParamSet& params, ScheduleSpec schedule)
    : cfg_(cfg), params_(params), spec_(std::move(schedule)) {
  cfg_.validate();
  RngStream probe(0, 0);
  const ParamSet expected = init_embedder(cfg_, probe);
  for (const auto& [name, t] : expected.tensors()) {
    if (!params.contains(name) || params.get(name).shape() != t.shape()) {
      throw std::invalid_argument("embedder parameters do not match the config at '" + name + "'");
    }
  }
  ParamSet frozen = params;
  for (const auto& [name, _] : params.tensors()) frozen.freeze(name);
  bound_ = frozen.bind();
}

void Embedder::check_tokens(const Tokens& tokens) const {
  if (tokens.empty()) throw std::invalid_argument("empty prompt");
}

Tensor Embedder::embed_text(const Tokens& tokens) const {
  check_tokens(tokens);
  return text_embedding(cfg_, bound_, tokens).value();
}

Tensor Embedder::embed_image_noised(const Tensor& x_t, int t) const {
  if (t > steps()) throw std::out_of_range("embedder step beyond its schedule");
  return image_embedding(cfg_, bound_, Var::constant(x_t), t).value();
}

Var Embedder::image_var(const Var& x_t, int t) const {
  if (t > steps()) throw std::out_of_range("embedder step beyond its schedule");
  return image_embedding(cfg_, bound_, x_t, t);
}

double cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("cosine of differently shaped vectors");
  const double na = l2_norm(a), nb = l2_norm(b);
  if (!(na > 0.0 && nb > 0.0)) throw std::invalid_argument("cosine of a zero vector");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

double Embedder::prompt_similarity(const Tokens& tokens, const Tensor& image) const {
  return cosine_similarity(embed_text(tokens), embed_image_noised(image, 0));
}

Checkpoint Embedder::to_checkpoint() const {
  Checkpoint ck;
  ck.kind = "EMB";
  ck.header = {{"embedder", cfg_.to_json()}, {"schedule", spec_}};
  ck.params = params_;
  return ck;
}

Embedder Embedder::from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != "EMB") throw std::invalid_argument("expected an embedder checkpoint, got kind " + ck.kind);
  return Embedder(EmbedderConfig::from_json(ck.header.at("embedder")), ck.params,
                  ck.header.at("schedule").get<ScheduleSpec>());
}

namespace {

std::vector<std::size_t> pick_batch(const std::map<Tokens, std::vector<std::size_t>>& groups, std::size_t n_items,
                                    std::size_t size, RngStream& rng) {
  std::vector<const std::vector<std::size_t>*> order;
  for (const auto& [_, idx] : groups) order.push_back(&idx);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<std::size_t> batch;
  for (std::size_t i = 0; i < size; ++i) {
    if (i < order.size()) {
      const auto& idx = *order[i];
      batch.push_back(idx[rng.below(idx.size())]);
    } else {
      batch.push_back(rng.below(n_items));
    }
  }
  return batch;
}

}  // namespace

EmbedderTrainResult train_embedder(const EmbedderConfig& cfg, const CaptionedData& data, const ScheduleSpec& schedule,
                                   const OptimizerConfig& opt, RngStream& rng) {
  if (opt.batch_size < 2) throw std::invalid_argument("contrastive training needs batch size >= 2");
  if (data.images.empty() || data.images.size() != data.captions.size()) {
    throw std::invalid_argument("captioned data must be nonempty with one caption per image");
  }
  const Schedule sched = build_schedule(schedule);
  std::map<Tokens, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < data.captions.size(); ++i) groups[data.captions[i]].push_back(i);

  EmbedderTrainResult result;
  ParamSet params = init_embedder(cfg, rng);
  Adam adam(opt);
  for (int step = 0; step < opt.steps; ++step) {
    try {
      const auto batch = pick_batch(groups, data.images.size(), static_cast<std::size_t>(opt.batch_size), rng);
      const BoundParams p = params.bind();
      std::vector<Var> imgs, txts;
      for (std::size_t i : batch) {
        const int t = static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.steps()) + 1));
        const Tensor noise = gaussian(data.images[i].shape(), rng);
        const Tensor x = t == 0 ? data.images[i] : q_marginal(data.images[i], t, sched, noise);
        imgs.push_back(image_embedding(cfg, p, Var::constant(x), t));
        txts.push_back(text_embedding(cfg, p, data.captions[i]));
      }
      const Var loss = contrastive_loss(ad::stack(imgs), ad::stack(txts), cfg.temperature);
      result.losses.push_back(loss.value().item());
      const ad::Gradients grads = ad::backward(loss);
      std::map<std::string, Tensor> g;
      for (const auto& [name, v] : p.vars()) g.emplace(name, grads.of(v));
      adam.step(params, std::move(g));
    } catch (const NumericError& e) {
      throw NumericError("embedder training diverged at step " + std::to_string(step + 1) + ": " + e.what());
    }
  }
  result.params = std::move(params);
  return result;
}

}  // namespace mgad
