#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "mgad/checkpoint.hpp"
#include "mgad/datasets.hpp"
#include "mgad/error.hpp"
#include "mgad/image_io.hpp"
#include "mgad/training.hpp"

namespace mgad::cli {

using nlohmann::json;

namespace {

// ---- JSON helpers ----

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw std::invalid_argument("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read(const json& j, const char* key, T& into) {
  if (!j.contains(key)) return;
  try {
    into = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config key '") + key + "': " + e.what());
  }
}

std::vector<std::string> split_words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

ScheduleSpec schedule_from(const json& j) {
  reject_unknown(j, {"profile", "steps", "beta_start", "beta_end", "respaced_steps"}, "schedule");
  ScheduleSpec s;
  read(j, "profile", s.profile);
  read(j, "steps", s.steps);
  read(j, "beta_start", s.beta_start);
  read(j, "beta_end", s.beta_end);
  read(j, "respaced_steps", s.respaced_steps);
  return s;
}

std::string grad_target_name(GradTarget t) { return t == GradTarget::X0 ? "x0" : "xt"; }

GradTarget parse_grad_target(const std::string& s) {
  if (s == "xt") return GradTarget::Xt;
  if (s == "x0") return GradTarget::X0;
  throw std::invalid_argument("grad_target must be 'xt' or 'x0', got '" + s + "'");
}

std::string sampler_name(SamplerSpec::Kind k) { return k == SamplerSpec::Kind::Ddim ? "ddim" : "ddpm"; }

SamplerSpec::Kind parse_sampler(const std::string& s) {
  if (s == "ddpm") return SamplerSpec::Kind::Ddpm;
  if (s == "ddim") return SamplerSpec::Kind::Ddim;
  throw std::invalid_argument("sampler kind must be 'ddpm' or 'ddim', got '" + s + "'");
}

void check_task(const std::string& task) {
  if (task != "gaussian1d" && task != "gaussian2d" && task != "shapes16") {
    throw std::invalid_argument("unknown task '" + task + "'");
  }
}

Shape task_shape(const std::string& task) {
  if (task == "gaussian1d") return {1};
  if (task == "gaussian2d") return {2};
  return {3, 16, 16};
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw std::invalid_argument(std::string(what) + " path is required");
  if (!std::filesystem::exists(path)) throw std::invalid_argument(std::string(what) + " not found: " + path);
}

std::string numbered(const char* stem, std::size_t i, const std::string& ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%03zu.", stem, i);
  return buf + ext;
}

}  // namespace

// ---- RunConfig ----

RunConfig run_config_from_json(const json& j) {
  reject_unknown(j,
                 {"task", "seed", "samples", "out", "denoiser", "dataset", "embedder", "schedule", "sampler", "guidance",
                  "prompt", "trace", "threads", "format", "resolved"},
                 "run config");
  RunConfig c;
  read(j, "task", c.task);
  if (j.contains("seed")) {
    std::uint64_t seed = 0;
    read(j, "seed", seed);
    c.seed = seed;
  }
  read(j, "samples", c.samples);
  read(j, "out", c.out);
  read(j, "denoiser", c.denoiser);
  read(j, "dataset", c.dataset);
  read(j, "embedder", c.embedder);
  if (j.contains("schedule")) c.schedule = schedule_from(j.at("schedule"));
  if (j.contains("sampler")) {
    const json& s = j.at("sampler");
    reject_unknown(s, {"kind", "steps", "eta"}, "sampler");
    std::string kind = sampler_name(c.sampler.kind);
    read(s, "kind", kind);
    c.sampler.kind = parse_sampler(kind);
    read(s, "steps", c.sampler.steps);
    read(s, "eta", c.sampler.eta);
  }
  if (j.contains("guidance")) {
    const json& g = j.at("guidance");
    reject_unknown(g, {"s_cfg", "s_guid", "w1", "w2", "lambda_tv", "tau_discard", "grad_target", "noise_prompt"},
                   "guidance");
    read(g, "s_cfg", c.guidance.s_cfg);
    read(g, "s_guid", c.guidance.s_guid);
    read(g, "w1", c.guidance.w1);
    read(g, "w2", c.guidance.w2);
    read(g, "lambda_tv", c.guidance.lambda_tv);
    read(g, "tau_discard", c.guidance.tau_discard);
    std::string target = grad_target_name(c.guidance.grad_target);
    read(g, "grad_target", target);
    c.guidance.grad_target = parse_grad_target(target);
    read(g, "noise_prompt", c.guidance.noise_prompt);
  }
  if (j.contains("prompt")) {
    const json& p = j.at("prompt");
    reject_unknown(p, {"text", "image", "label", "adaptive_discard"}, "prompt");
    if (p.contains("text")) {
      if (p.at("text").is_string()) {
        c.prompt.text = split_words(p.at("text").get<std::string>());
      } else {
        read(p, "text", c.prompt.text);
      }
    }
    read(p, "image", c.prompt.image);
    read(p, "label", c.prompt.label);
    read(p, "adaptive_discard", c.prompt.adaptive_discard);
  }
  read(j, "trace", c.trace);
  read(j, "threads", c.threads);
  read(j, "format", c.format);
  return c;
}

json run_config_to_json(const RunConfig& c) {
  json j;
  j["task"] = c.task;
  if (c.seed) j["seed"] = *c.seed;
  j["samples"] = c.samples;
  j["out"] = c.out;
  j["denoiser"] = c.denoiser;
  j["dataset"] = c.dataset;
  j["embedder"] = c.embedder;
  if (c.schedule) j["schedule"] = *c.schedule;
  j["sampler"] = {{"kind", sampler_name(c.sampler.kind)}, {"steps", c.sampler.steps}, {"eta", c.sampler.eta}};
  j["guidance"] = {{"s_cfg", c.guidance.s_cfg},
                   {"s_guid", c.guidance.s_guid},
                   {"w1", c.guidance.w1},
                   {"w2", c.guidance.w2},
                   {"lambda_tv", c.guidance.lambda_tv},
                   {"tau_discard", c.guidance.tau_discard},
                   {"grad_target", grad_target_name(c.guidance.grad_target)},
                   {"noise_prompt", c.guidance.noise_prompt}};
  j["prompt"] = {{"text", c.prompt.text},
                 {"image", c.prompt.image},
                 {"label", c.prompt.label},
                 {"adaptive_discard", c.prompt.adaptive_discard}};
  j["trace"] = c.trace;
  j["threads"] = c.threads;
  j["format"] = c.format;
  return j;
}

// ---- resolution of a run config into live objects ----

namespace {

struct Resolved {
  RunConfig cfg;  // with schedule filled in
  std::optional<Dataset> dataset;
  std::unique_ptr<EpsModel> model;
  std::unique_ptr<Schedule> schedule;
  std::optional<Embedder> embedder;
  Shape shape;
  bool image_task = false;
  Conditioning cond;
  ModalityFlags active{false, false};
};

Resolved resolve(const RunConfig& in) {
  Resolved r;
  r.cfg = in;
  RunConfig& c = r.cfg;
  if (!c.seed) throw std::invalid_argument("a seed is required (config key 'seed' or --seed)");
  check_task(c.task);
  if (c.samples < 1) throw std::invalid_argument("samples must be >= 1");
  if (c.format != "png" && c.format != "ppm") throw std::invalid_argument("format must be 'png' or 'ppm'");
  c.guidance.validate();
  r.shape = task_shape(c.task);
  r.image_task = c.task == "shapes16";

  if (!c.embedder.empty()) {
    require_file(c.embedder, "embedder checkpoint");
    r.embedder.emplace(Embedder::from_checkpoint(load_checkpoint(c.embedder)));
  }
  if (c.denoiser == "analytic") {
    require_file(c.dataset, "dataset");
    r.dataset = load_dataset(c.dataset);
    if (r.dataset->task != c.task) {
      throw std::invalid_argument("dataset task '" + r.dataset->task + "' differs from config task '" + c.task + "'");
    }
    if (r.image_task) {
      r.model = std::make_unique<AnalyticDenoiser>(empirical_mixture(r.dataset->items, r.dataset->labels));
    } else {
      r.model = std::make_unique<AnalyticDenoiser>(r.dataset->mixture);
    }
    if (!c.schedule) c.schedule = r.embedder ? r.embedder->schedule_spec() : ScheduleSpec{};
  } else {
    require_file(c.denoiser, "denoiser checkpoint");
    LoadedDenoiser den = denoiser_from_checkpoint(load_checkpoint(c.denoiser));
    if (den.net->input_shape() != r.shape) {
      throw std::invalid_argument("denoiser input " + shape_string(den.net->input_shape()) + " does not fit task " +
                                  c.task);
    }
    if (c.schedule && !(*c.schedule == den.schedule)) {
      throw std::invalid_argument("config schedule is incompatible with the denoiser checkpoint's schedule");
    }
    c.schedule = den.schedule;
    r.model = std::make_unique<NetworkDenoiser>(den.net, den.params);
  }
  r.schedule = std::make_unique<Schedule>(build_schedule(*c.schedule));

  const bool has_text = !c.prompt.text.empty();
  const bool has_image = !c.prompt.image.empty();
  if (has_image) require_file(c.prompt.image, "prompt image");
  if ((has_text || has_image) && !r.image_task) {
    throw std::invalid_argument("text and image prompts need the shapes16 task");
  }
  if ((has_text || has_image) && c.guidance.s_guid > 0.0 && !r.embedder) {
    throw std::invalid_argument("prompt guidance needs an embedder checkpoint");
  }
  if (has_text || has_image) {
    MultimodalPrompt p;
    if (has_text) p.text = tokenize(c.prompt.text);
    if (has_image) p.image = from_image8(load_image(c.prompt.image));
    if (has_image && p.image->shape() != r.shape) {
      throw std::invalid_argument("prompt image must be 16x16 RGB, got " + shape_string(p.image->shape()));
    }
    if (has_text && has_image && c.prompt.adaptive_discard && r.embedder) {
      const ModalityFlags f =
          adaptive_prompt_discard(p.text, *p.image, c.guidance.w1, c.guidance.w2, c.guidance.tau_discard, *r.embedder);
      p.use_text = f.text;
      p.use_image = f.image;
    }
    r.cond = Conditioning::multimodal(p, c.prompt.label);
    r.active = {r.cond.text_active(), r.cond.image_active()};
  } else if (c.prompt.label != kNullLabel) {
    r.cond = Conditioning::with_label(c.prompt.label);
  }
  return r;
}

std::vector<SampleRun> make_runs(const Resolved& r) {
  std::vector<SampleRun> runs;
  for (int i = 0; i < r.cfg.samples; ++i) {
    SampleRun run;
    run.schedule = r.schedule.get();
    run.model = r.model.get();
    run.cond = r.cond;
    run.guidance = r.cfg.guidance;
    run.embedder = r.embedder ? &*r.embedder : nullptr;
    run.sampler = r.cfg.sampler;
    run.shape = r.shape;
    run.seed = *r.cfg.seed;
    run.stream = static_cast<std::uint64_t>(i);
    run.trace = r.cfg.trace;
    run.clamp = r.image_task;
    runs.push_back(std::move(run));
  }
  return runs;
}

void write_samples(const Resolved& r, const std::vector<Tensor>& samples, const std::vector<SampleResult>& results,
                   const std::filesystem::path& dir, json& files) {
  if (r.image_task) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const std::string name = numbered("sample", i, r.cfg.format);
      save_image(to_image8(samples[i]), dir / name);
      files.push_back(name);
    }
    const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(samples.size()))));
    const std::string grid = "grid." + r.cfg.format;
    save_image(to_image8(compose_grid(samples, cols)), dir / grid);
    files.push_back(grid);
  } else {
    json rows = json::array();
    for (const auto& x : samples) rows.push_back(std::vector<double>(x.data().begin(), x.data().end()));
    write_file(dir / "samples.json", json{{"task", r.cfg.task}, {"samples", rows}}.dump() + "\n");
    files.push_back("samples.json");
  }
  if (r.cfg.trace) {
    for (std::size_t i = 0; i < results.size(); ++i) {
      std::ostringstream os;
      write_trace(os, results[i].trace);
      const std::string name = numbered("trace", i, "jsonl");
      write_file(dir / name, os.str());
      files.push_back(name);
    }
  }
}

}  // namespace

SampleOutput run_sample(const RunConfig& cfg, bool write) {
  const Resolved r = resolve(cfg);
  SampleOutput out;
  out.active = r.active;
  const auto t0 = std::chrono::steady_clock::now();
  out.results = sample_batch(make_runs(r), r.cfg.threads);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (const auto& res : out.results) out.samples.push_back(res.x0);

  out.manifest = run_config_to_json(r.cfg);
  json resolved = {{"sample_shape", r.shape},
                   {"schedule_steps", r.schedule->steps()},
                   {"sampling_steps", r.cfg.sampler.steps == 0 ? r.schedule->steps() : r.cfg.sampler.steps},
                   {"active_text", r.active.text},
                   {"active_image", r.active.image},
                   {"denoiser_label", r.cond.label}};
  if (write) {
    const std::filesystem::path dir = r.cfg.out;
    json files = json::array();
    write_samples(r, out.samples, out.results, dir, files);
    resolved["files"] = files;
    out.manifest["resolved"] = resolved;
    write_file(dir / "manifest.json", out.manifest.dump(2) + "\n");
  } else {
    out.manifest["resolved"] = resolved;
  }
  return out;
}

// ---- training ----

namespace {

TrainConfig train_defaults(const std::string& kind) {
  TrainConfig c;
  c.kind = kind;
  if (kind == "embedder") {
    c.opt.batch_size = 8;
    c.opt.lr = 2e-3;
  } else if (kind != "denoiser") {
    throw std::invalid_argument("train kind must be 'denoiser' or 'embedder', got '" + kind + "'");
  }
  return c;
}

}  // namespace

TrainConfig train_config_from_json(const json& j) {
  reject_unknown(j,
                 {"kind", "dataset", "out", "seed", "schedule", "steps", "batch_size", "lr", "grad_clip", "p_uncond",
                  "hidden", "depth", "base_width", "embed_dim", "embed_width"},
                 "train config");
  std::string kind = "denoiser";
  read(j, "kind", kind);
  TrainConfig c = train_defaults(kind);
  read(j, "dataset", c.dataset);
  read(j, "out", c.out);
  if (j.contains("seed")) {
    std::uint64_t seed = 0;
    read(j, "seed", seed);
    c.seed = seed;
  }
  if (j.contains("schedule")) c.schedule = schedule_from(j.at("schedule"));
  read(j, "steps", c.opt.steps);
  read(j, "batch_size", c.opt.batch_size);
  read(j, "lr", c.opt.lr);
  read(j, "grad_clip", c.opt.grad_clip);
  read(j, "p_uncond", c.p_uncond);
  read(j, "hidden", c.hidden);
  read(j, "depth", c.depth);
  read(j, "base_width", c.base_width);
  read(j, "embed_dim", c.embed_dim);
  read(j, "embed_width", c.embed_width);
  return c;
}

json train_config_to_json(const TrainConfig& c) {
  json j = {{"kind", c.kind},         {"dataset", c.dataset},          {"out", c.out},
            {"schedule", c.schedule}, {"steps", c.opt.steps},          {"batch_size", c.opt.batch_size},
            {"lr", c.opt.lr},         {"grad_clip", c.opt.grad_clip},  {"p_uncond", c.p_uncond},
            {"hidden", c.hidden},     {"depth", c.depth},              {"base_width", c.base_width},
            {"embed_dim", c.embed_dim}, {"embed_width", c.embed_width}};
  if (c.seed) j["seed"] = *c.seed;
  return j;
}

void run_train(const TrainConfig& c) {
  if (!c.seed) throw std::invalid_argument("a seed is required (config key 'seed' or --seed)");
  if (c.out.empty()) throw std::invalid_argument("an output checkpoint path is required");
  if (c.opt.steps < 1 || c.opt.batch_size < 1) throw std::invalid_argument("steps and batch_size must be >= 1");
  require_file(c.dataset, "dataset");
  const Dataset data = load_dataset(c.dataset);
  RngStream rng(*c.seed, 0);
  std::vector<double> losses;

  if (c.kind == "denoiser") {
    const Schedule sched = build_schedule(c.schedule);
    int vocab = 1;
    for (int l : data.labels) vocab = std::max(vocab, l + 1);
    std::shared_ptr<const EpsNetwork> net;
    if (data.task == "shapes16") {
      UNetConfig u;
      u.base_width = c.base_width;
      u.vocab = vocab;
      net = std::make_shared<UNet>(u);
    } else {
      net = std::make_shared<MlpNet>(MlpConfig{data.items.at(0).size(), c.hidden, c.depth, 32, vocab});
    }
    const LabeledData ld{data.items, data.labels};
    TrainResult res = train_denoiser(*net, net->init(rng), ld, sched, c.p_uncond, c.opt, rng);
    save_checkpoint(denoiser_checkpoint(*net, res.params, c.schedule), c.out);
    losses = std::move(res.losses);
  } else {
    if (data.task != "shapes16" || data.captions.size() != data.items.size()) {
      throw std::invalid_argument("embedder training needs a captioned shapes16 dataset");
    }
    EmbedderConfig ec;
    ec.dim = c.embed_dim;
    ec.width = c.embed_width;
    ec.vocab = shape_vocabulary().size();
    const CaptionedData cd{data.items, data.captions};
    EmbedderTrainResult res = train_embedder(ec, cd, c.schedule, c.opt, rng);
    save_checkpoint(Embedder(ec, res.params, c.schedule).to_checkpoint(), c.out);
    losses = std::move(res.losses);
  }
  std::ostringstream log;
  log.precision(17);
  for (double l : losses) log << l << '\n';
  write_file(c.out + ".loss.txt", log.str());
}

// ---- ablation ----

namespace {

double gaussian_w1(const Dataset& d, const std::vector<Tensor>& samples) {
  const MixtureParams& mix = d.mixture;
  const std::size_t dim = mix.means.at(0).size();
  double acc = 0.0;
  for (std::size_t c = 0; c < dim; ++c) {
    std::vector<double> xs, means, sds;
    for (const auto& s : samples) xs.push_back(s[c]);
    for (std::size_t k = 0; k < mix.size(); ++k) {
      means.push_back(mix.means[k][c]);
      sds.push_back(std::sqrt(mix.variances[k]));
    }
    acc += wasserstein1_gaussian_mixture(xs, mix.weights, means, sds);
  }
  return acc / static_cast<double>(dim);
}

std::string cell_name(const json& cell) {
  std::string s;
  for (const auto& [k, v] : cell.items()) s += (s.empty() ? "" : "_") + k + "=" + v.dump();
  return s;
}

}  // namespace

std::vector<AblateRow> run_ablate(const std::string& sweep, const RunConfig& base, std::vector<double> grid, bool write) {
  std::vector<json> cells;
  if (sweep == "mgs") {
    if (grid.empty()) grid = {0.0, 500.0, 5000.0, 50000.0};
    for (double v : grid) cells.push_back({{"s_guid", v}});
  } else if (sweep == "steps") {
    if (grid.empty()) {
      const Resolved probe = resolve(base);
      grid = {10.0, 50.0, 200.0, static_cast<double>(probe.schedule->steps())};
    }
    for (double v : grid) cells.push_back({{"steps", static_cast<int>(v)}});
  } else if (sweep == "balance") {
    if (grid.empty()) grid = {0.0, 0.5, 1.0};
    for (double a : grid) {
      for (double b : grid) {
        if (a == 0.0 && b == 0.0) continue;
        cells.push_back({{"w1", a}, {"w2", b}});
      }
    }
  } else {
    throw std::invalid_argument("unknown sweep '" + sweep + "' (mgs | steps | balance)");
  }
  if (cells.empty()) throw std::invalid_argument("ablation grid is empty");

  std::vector<AblateRow> rows;
  json report_rows = json::array();
  std::ostringstream table;
  table << "cell\tdiversity\tw1\tguidance\tms_per_step\n";
  for (const json& cell : cells) {
    RunConfig c = base;
    if (cell.contains("s_guid")) c.guidance.s_guid = cell["s_guid"].get<double>();
    if (cell.contains("steps")) c.sampler.steps = cell["steps"].get<int>();
    if (cell.contains("w1")) c.guidance.w1 = cell["w1"].get<double>();
    if (cell.contains("w2")) c.guidance.w2 = cell["w2"].get<double>();
    c.trace = true;
    const Resolved r = resolve(c);
    const SampleOutput out = run_sample(c, false);

    AblateRow row;
    row.cell = cell;
    if (r.image_task) {
      if (out.samples.size() >= 2) row.diversity = diversity_report(out.samples).mean_pairwise_dhash;
    } else {
      row.w1 = gaussian_w1(*r.dataset, out.samples);
    }
    double g = 0.0;
    std::size_t steps = 0;
    for (const auto& res : out.results) {
      if (!res.trace.empty()) g += res.trace.back().guidance;
      steps += res.trace.size();
    }
    row.guidance = g / static_cast<double>(out.results.size());
    row.ms_per_step = steps ? 1000.0 * out.seconds / static_cast<double>(steps) : 0.0;
    rows.push_back(row);

    json jr = {{"cell", cell}, {"guidance", row.guidance}, {"ms_per_step", row.ms_per_step}};
    jr["diversity"] = row.diversity ? json(*row.diversity) : json(nullptr);
    jr["w1"] = row.w1 ? json(*row.w1) : json(nullptr);
    report_rows.push_back(jr);
    table << cell_name(cell) << '\t' << (row.diversity ? std::to_string(*row.diversity) : "-") << '\t'
          << (row.w1 ? std::to_string(*row.w1) : "-") << '\t' << row.guidance << '\t' << row.ms_per_step << '\n';
    if (write && r.image_task) {
      const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(out.samples.size()))));
      save_image(to_image8(compose_grid(out.samples, cols)),
                 std::filesystem::path(base.out) / ("grid_" + cell_name(cell) + "." + base.format));
    }
  }
  if (write) {
    const std::filesystem::path dir = base.out;
    json report = {{"sweep", sweep}, {"base", run_config_to_json(base)}, {"rows", report_rows}};
    write_file(dir / "report.json", report.dump(2) + "\n");
    write_file(dir / "report.txt", table.str());
  }
  return rows;
}

// ---- evaluation ----

DiversityReport run_evaluate(const std::filesystem::path& dir, const std::filesystem::path& out) {
  if (!std::filesystem::is_directory(dir)) throw std::invalid_argument("not a directory: " + dir.string());
  std::vector<std::filesystem::path> paths;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto ext = e.path().extension();
    const bool grid = e.path().filename().string().rfind("grid", 0) == 0;
    if (e.is_regular_file() && !grid && (ext == ".png" || ext == ".ppm")) paths.push_back(e.path());
  }
  std::sort(paths.begin(), paths.end());
  if (paths.size() < 2) throw std::invalid_argument("evaluate needs at least 2 images in " + dir.string());
  std::vector<Tensor> images;
  for (const auto& p : paths) images.push_back(from_image8(load_image(p)));
  const DiversityReport rep = diversity_report(images);
  if (!out.empty()) {
    write_file(out.string() + ".txt", rep.to_text());
    write_file(out.string() + ".json", rep.to_json().dump(2) + "\n");
  }
  return rep;
}

// ---- command line ----

namespace {

json load_json_file(const std::string& path) {
  if (path.empty()) return json::object();
  require_file(path, "config file");
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config " + path + " is not valid JSON: " + e.what());
  }
}

struct RunFlags {
  std::string config, task, out, denoiser, dataset, embedder, sampler, grad_target, text, image, format;
  std::uint64_t seed = 0;
  int samples = 0, steps = 0, label = 0, T = 0;
  double eta = 0, s_cfg = 0, s_guid = 0, w1 = 0, w2 = 0, lambda_tv = 0, tau = 0;
  unsigned threads = 0;
  bool trace = false, no_discard = false, clean_prompt = false;
};

void add_run_flags(CLI::App* app, RunFlags& f) {
  app->add_option("--config", f.config, "JSON run config");
  app->add_option("--task", f.task, "gaussian1d | gaussian2d | shapes16");
  app->add_option("--seed", f.seed, "RNG seed (required)");
  app->add_option("--samples", f.samples, "number of chains");
  app->add_option("--out", f.out, "output directory");
  app->add_option("--denoiser", f.denoiser, "'analytic' or a denoiser checkpoint");
  app->add_option("--dataset", f.dataset, "dataset file");
  app->add_option("--embedder", f.embedder, "embedder checkpoint");
  app->add_option("--T", f.T, "schedule length for analytic denoisers");
  app->add_option("--sampler", f.sampler, "ddpm | ddim");
  app->add_option("--steps", f.steps, "respaced sampling steps (0 = all)");
  app->add_option("--eta", f.eta, "DDIM eta");
  app->add_option("--s-cfg", f.s_cfg, "classifier-free guidance scale");
  app->add_option("--s-guid", f.s_guid, "multimodal guidance scale");
  app->add_option("--w1", f.w1, "text weight");
  app->add_option("--w2", f.w2, "image weight");
  app->add_option("--lambda-tv", f.lambda_tv, "TV weight");
  app->add_option("--tau", f.tau, "prompt discarding threshold");
  app->add_option("--grad-target", f.grad_target, "xt | x0");
  app->add_flag("--clean-prompt", f.clean_prompt, "encode the prompt image clean at t = 0");
  app->add_option("--text", f.text, "caption, e.g. \"red square\"");
  app->add_option("--prompt-image", f.image, "prompt image (PNG/PPM, 16x16)");
  app->add_option("--label", f.label, "denoiser conditioning label");
  app->add_flag("--no-discard", f.no_discard, "disable adaptive prompt discarding");
  app->add_flag("--trace", f.trace, "write per-step traces");
  app->add_option("--threads", f.threads, "worker threads (0 = all cores)");
  app->add_option("--format", f.format, "png | ppm");
}

RunConfig build_run_config(CLI::App* app, const RunFlags& f) {
  RunConfig c = run_config_from_json(load_json_file(f.config));
  auto given = [&](const char* name) { return app->count(name) > 0; };
  if (given("--task")) c.task = f.task;
  if (given("--seed")) c.seed = f.seed;
  if (given("--samples")) c.samples = f.samples;
  if (given("--out")) c.out = f.out;
  if (given("--denoiser")) c.denoiser = f.denoiser;
  if (given("--dataset")) c.dataset = f.dataset;
  if (given("--embedder")) c.embedder = f.embedder;
  if (given("--T")) {
    ScheduleSpec s = c.schedule.value_or(ScheduleSpec{});
    s.steps = f.T;
    c.schedule = s;
  }
  if (given("--sampler")) c.sampler.kind = parse_sampler(f.sampler);
  if (given("--steps")) c.sampler.steps = f.steps;
  if (given("--eta")) c.sampler.eta = f.eta;
  if (given("--s-cfg")) c.guidance.s_cfg = f.s_cfg;
  if (given("--s-guid")) c.guidance.s_guid = f.s_guid;
  if (given("--w1")) c.guidance.w1 = f.w1;
  if (given("--w2")) c.guidance.w2 = f.w2;
  if (given("--lambda-tv")) c.guidance.lambda_tv = f.lambda_tv;
  if (given("--tau")) c.guidance.tau_discard = f.tau;
  if (given("--grad-target")) c.guidance.grad_target = parse_grad_target(f.grad_target);
  if (f.clean_prompt) c.guidance.noise_prompt = false;
  if (given("--text")) c.prompt.text = split_words(f.text);
  if (given("--prompt-image")) c.prompt.image = f.image;
  if (given("--label")) c.prompt.label = f.label;
  if (f.no_discard) c.prompt.adaptive_discard = false;
  if (f.trace) c.trace = true;
  if (given("--threads")) c.threads = f.threads;
  if (given("--format")) c.format = f.format;
  return c;
}

std::vector<double> parse_grid(const std::string& s) {
  std::vector<double> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw std::invalid_argument("bad grid value '" + item + "'");
    }
  }
  if (out.empty()) throw std::invalid_argument("ablation grid is empty");
  return out;
}

int dispatch(const std::vector<std::string>& args) {
  CLI::App app{"Multimodal guided diffusion toolkit"};
  app.require_subcommand(1);

  // make-dataset
  std::string md_task, md_out, md_mixture, md_images;
  std::size_t md_n = 0;
  std::uint64_t md_seed = 0;
  auto* md = app.add_subcommand("make-dataset", "synthesise a toy dataset");
  md->add_option("--task", md_task, "gaussian1d | gaussian2d | shapes16")->required();
  md->add_option("--n", md_n, "number of items")->required();
  md->add_option("--seed", md_seed, "RNG seed")->required();
  md->add_option("--out", md_out, "dataset file")->required();
  md->add_option("--mixture", md_mixture, "mixture parameter file (Gaussian tasks)");
  md->add_option("--images", md_images, "also export shapes16 images here");

  // train
  std::string tr_kind, tr_config, tr_dataset, tr_out;
  std::uint64_t tr_seed = 0;
  int tr_steps = 0, tr_batch = 0, tr_T = 0;
  double tr_lr = 0, tr_p_uncond = 0, tr_b0 = 0, tr_b1 = 0;
  auto* tr = app.add_subcommand("train", "train a denoiser or an embedder");
  tr->add_option("kind", tr_kind, "denoiser | embedder")->required();
  tr->add_option("--config", tr_config, "JSON train config");
  tr->add_option("--dataset", tr_dataset, "dataset file");
  tr->add_option("--out", tr_out, "checkpoint path");
  tr->add_option("--seed", tr_seed, "RNG seed (required)");
  tr->add_option("--steps", tr_steps, "optimizer steps");
  tr->add_option("--batch", tr_batch, "batch size");
  tr->add_option("--lr", tr_lr, "learning rate");
  tr->add_option("--p-uncond", tr_p_uncond, "null-label dropout probability");
  tr->add_option("--T", tr_T, "diffusion steps");
  tr->add_option("--beta-start", tr_b0, "first beta");
  tr->add_option("--beta-end", tr_b1, "last beta");

  // sample
  RunFlags sf;
  auto* sp = app.add_subcommand("sample", "guided sampling");
  add_run_flags(sp, sf);

  // ablate
  RunFlags af;
  std::string ab_sweep, ab_grid;
  auto* ab = app.add_subcommand("ablate", "parameter sweeps");
  ab->add_option("sweep", ab_sweep, "mgs | steps | balance")->required();
  ab->add_option("--grid", ab_grid, "comma-separated grid values");
  add_run_flags(ab, af);

  // evaluate
  std::string ev_dir, ev_out;
  auto* ev = app.add_subcommand("evaluate", "dHash diversity of a directory of images");
  ev->add_option("dir", ev_dir, "image directory")->required();
  ev->add_option("--out", ev_out, "report path prefix (default <dir>/diversity)");

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (md->parsed()) {
    RngStream rng(md_seed, 0);
    std::optional<MixtureParams> mix;
    if (!md_mixture.empty()) mix = mixture_from_json(load_json_file(md_mixture));
    const Dataset d = make_dataset(md_task, md_n, rng, mix ? &*mix : nullptr);
    save_dataset(d, md_out);
    if (d.task != "shapes16") {
      std::filesystem::path p = md_out;
      p.replace_extension(".mixture.json");
      write_file(p, mixture_to_json(d.mixture).dump(2) + "\n");
    } else if (!md_images.empty()) {
      for (std::size_t i = 0; i < d.items.size(); ++i) {
        save_image(to_image8(d.items[i]), std::filesystem::path(md_images) / numbered("item", i, "png"));
      }
    }
    std::cout << "wrote " << d.items.size() << " items to " << md_out << "\n";
  } else if (tr->parsed()) {
    json j = load_json_file(tr_config);
    if (j.contains("kind") && j["kind"] != tr_kind) throw std::invalid_argument("train kind differs from config kind");
    j["kind"] = tr_kind;
    TrainConfig c = train_config_from_json(j);
    if (tr->count("--dataset")) c.dataset = tr_dataset;
    if (tr->count("--out")) c.out = tr_out;
    if (tr->count("--seed")) c.seed = tr_seed;
    if (tr->count("--steps")) c.opt.steps = tr_steps;
    if (tr->count("--batch")) c.opt.batch_size = tr_batch;
    if (tr->count("--lr")) c.opt.lr = tr_lr;
    if (tr->count("--p-uncond")) c.p_uncond = tr_p_uncond;
    if (tr->count("--T")) c.schedule.steps = tr_T;
    if (tr->count("--beta-start")) c.schedule.beta_start = tr_b0;
    if (tr->count("--beta-end")) c.schedule.beta_end = tr_b1;
    run_train(c);
    std::cout << "wrote " << c.out << "\n";
  } else if (sp->parsed()) {
    const SampleOutput out = run_sample(build_run_config(sp, sf));
    std::cout << "wrote " << out.samples.size() << " samples to " << out.manifest["out"].get<std::string>() << "\n";
  } else if (ab->parsed()) {
    const RunConfig base = build_run_config(ab, af);
    const auto rows = run_ablate(ab_sweep, base, ab_grid.empty() ? std::vector<double>{} : parse_grid(ab_grid));
    std::cout << "wrote " << rows.size() << " rows to " << (std::filesystem::path(base.out) / "report.txt").string()
              << "\n";
  } else if (ev->parsed()) {
    const std::filesystem::path out = ev_out.empty() ? std::filesystem::path(ev_dir) / "diversity" : std::filesystem::path(ev_out);
    std::cout << run_evaluate(ev_dir, out).to_text();
  }
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  try {
    return dispatch(args);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "i/o failure: " << e.what() << "\n";
    return 4;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "i/o failure: " << e.what() << "\n";
    return 4;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::out_of_range& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace mgad::cli
