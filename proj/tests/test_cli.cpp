#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <numeric>

#include "commands.hpp"
#include "mgad/checkpoint.hpp"
#include "mgad/datasets.hpp"

using namespace mgad;
using namespace mgad::cli;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mgad_cli_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run(std::vector<std::string> args) { return run_cli(args); }

std::string s(const fs::path& p) { return p.string(); }

// A small shapes16 dataset plus a briefly trained embedder, shared by the
// prompt-driven cases.
struct ShapesFixture {
  fs::path dir, data, emb;
  ShapesFixture() {
    dir = scratch("shapes");
    data = dir / "shapes.json";
    emb = dir / "emb.ck";
    REQUIRE(run({"make-dataset", "--task", "shapes16", "--n", "64", "--seed", "7", "--out", s(data), "--images",
                 s(dir / "imgs")}) == 0);
    REQUIRE(run({"train", "embedder", "--dataset", s(data), "--out", s(emb), "--seed", "11", "--steps", "30", "--T",
                 "200", "--beta-start", "0.0005", "--beta-end", "0.1"}) == 0);
  }
};

const ShapesFixture& shapes() {
  static const ShapesFixture f;
  return f;
}

std::vector<std::string> listing(const fs::path& dir) {
  std::vector<std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) out.push_back(e.path().filename().string());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST_CASE("make-dataset is deterministic and captions are colour + shape") {
  const fs::path dir = scratch("make");
  for (const char* name : {"a.json", "b.json"}) {
    REQUIRE(run({"make-dataset", "--task", "shapes16", "--n", "24", "--seed", "3", "--out", s(dir / name)}) == 0);
  }
  CHECK(read_file(dir / "a.json") == read_file(dir / "b.json"));
  const Dataset d = load_dataset(dir / "a.json");
  REQUIRE(d.captions.size() == 24);
  for (std::size_t i = 0; i < d.captions.size(); ++i) {
    REQUIRE(d.captions[i].size() == 2);
    CHECK(d.captions[i][0] < kShapeColors);
    CHECK(d.captions[i][1] >= kShapeColors);
    CHECK(caption_label(d.captions[i]) == d.labels[i]);
  }

  REQUIRE(run({"make-dataset", "--task", "gaussian2d", "--n", "50", "--seed", "3", "--out", s(dir / "g.json")}) == 0);
  CHECK(fs::exists(dir / "g.mixture.json"));
  CHECK(load_dataset(dir / "g.json").items.size() == 50);
}

TEST_CASE("manifest records defaults for omitted guidance settings") {
  const fs::path dir = scratch("defaults");
  REQUIRE(run({"make-dataset", "--task", "gaussian1d", "--n", "10", "--seed", "1", "--out", s(dir / "g.json")}) == 0);
  REQUIRE(run({"sample", "--task", "gaussian1d", "--dataset", s(dir / "g.json"), "--seed", "4", "--samples", "3",
               "--T", "50", "--out", s(dir / "out")}) == 0);
  const auto m = nlohmann::json::parse(read_file(dir / "out" / "manifest.json"));
  CHECK(m["guidance"]["s_guid"].get<double>() == 5000.0);
  CHECK(m["guidance"]["lambda_tv"].get<double>() == 300.0);
  CHECK(m["guidance"]["w1"].get<double>() == 1.0);
  CHECK(m["guidance"]["w2"].get<double>() == 1.0);
  CHECK(m["guidance"]["s_cfg"].get<double>() == 1.0);
  CHECK(m["seed"].get<std::uint64_t>() == 4);
  CHECK(m["schedule"]["steps"].get<int>() == 50);
  const auto samples = nlohmann::json::parse(read_file(dir / "out" / "samples.json"));
  CHECK(samples["samples"].size() == 3);
}

TEST_CASE("text prompt with w2 = 0 and no image runs") {
  const auto& f = shapes();
  const fs::path out = scratch("w2zero");
  REQUIRE(run({"sample", "--dataset", s(f.data), "--embedder", s(f.emb), "--seed", "2", "--samples", "2", "--steps",
               "10", "--text", "blue circle", "--w2", "0", "--lambda-tv", "0", "--out", s(out)}) == 0);
  CHECK(listing(out) == std::vector<std::string>{"grid.png", "manifest.json", "sample_000.png", "sample_001.png"});
  const auto m = nlohmann::json::parse(read_file(out / "manifest.json"));
  CHECK(m["resolved"]["active_text"].get<bool>());
  CHECK_FALSE(m["resolved"]["active_image"].get<bool>());
}

TEST_CASE("sampling from a manifest regenerates byte-identical files") {
  const auto& f = shapes();
  const fs::path a = scratch("regen_a"), b = scratch("regen_b");
  REQUIRE(run({"sample", "--dataset", s(f.data), "--embedder", s(f.emb), "--seed", "9", "--samples", "3", "--steps",
               "10", "--text", "red square", "--prompt-image", s(f.dir / "imgs" / "item_000.png"), "--trace", "--out",
               s(a)}) == 0);
  REQUIRE(run({"sample", "--config", s(a / "manifest.json"), "--out", s(b)}) == 0);
  const auto files = listing(a);
  CHECK(files == listing(b));
  for (const auto& name : files) {
    if (name == "manifest.json") continue;
    CHECK_MESSAGE(read_file(a / name) == read_file(b / name), name);
  }
}

TEST_CASE("retraining is byte-identical and logs one loss per step") {
  const fs::path dir = scratch("train");
  REQUIRE(run({"make-dataset", "--task", "gaussian2d", "--n", "1000", "--seed", "4", "--out", s(dir / "g.json")}) == 0);
  for (const char* name : {"a.ck", "b.ck"}) {
    REQUIRE(run({"train", "denoiser", "--dataset", s(dir / "g.json"), "--out", s(dir / name), "--seed", "5", "--steps",
                 "300", "--T", "100"}) == 0);
  }
  CHECK(read_file(dir / "a.ck") == read_file(dir / "b.ck"));
  CHECK(read_file(dir / "a.ck.loss.txt") == read_file(dir / "b.ck.loss.txt"));

  std::ifstream in(dir / "a.ck.loss.txt");
  std::vector<double> losses;
  for (double v; in >> v;) losses.push_back(v);
  REQUIRE(losses.size() == 300);
  const auto mean = [](auto first, auto last) { return std::accumulate(first, last, 0.0) / (last - first); };
  const double head = mean(losses.begin(), losses.begin() + 50);
  const double tail = mean(losses.end() - 50, losses.end());
  // Frozen from one run of this exact configuration: head 0.429, tail 0.225.
  CHECK(tail < 0.30);
  CHECK(tail < head);

  // The trained checkpoint samples through the CLI; a mismatched T is refused.
  CHECK(run({"sample", "--task", "gaussian2d", "--denoiser", s(dir / "a.ck"), "--seed", "1", "--samples", "2", "--out",
             s(dir / "s")}) == 0);
  CHECK(run({"sample", "--task", "gaussian2d", "--denoiser", s(dir / "a.ck"), "--seed", "1", "--T", "50", "--out",
             s(dir / "s")}) == 2);
}

TEST_CASE("ablation grids have the expected number of rows") {
  const auto& f = shapes();
  const fs::path out = scratch("ablate");
  RunConfig base;
  base.seed = 1;
  base.samples = 2;
  base.dataset = s(f.data);
  base.embedder = s(f.emb);
  base.prompt.text = {"green", "square"};
  base.sampler.steps = 5;
  base.guidance.lambda_tv = 0.0;
  base.out = s(out);

  const auto mgs = run_ablate("mgs", base, {});
  REQUIRE(mgs.size() == 4);
  CHECK(mgs[0].cell["s_guid"].get<double>() == 0.0);
  CHECK(mgs[3].cell["s_guid"].get<double>() == 50000.0);
  for (const auto& row : mgs) CHECK(row.diversity.has_value());

  base.prompt.image = s(f.dir / "imgs" / "item_001.png");
  base.prompt.adaptive_discard = false;
  const auto bal = run_ablate("balance", base, {}, false);
  REQUIRE(bal.size() == 8);
  for (const auto& row : bal) {
    const bool both_zero = row.cell["w1"].get<double>() == 0.0 && row.cell["w2"].get<double>() == 0.0;
    CHECK_FALSE(both_zero);
  }
  CHECK(fs::exists(out / "report.json"));
  CHECK(fs::exists(out / "report.txt"));

  CHECK_THROWS_AS(run_ablate("nonsense", base, {}, false), std::invalid_argument);
}

TEST_CASE("step sweep on the Gaussian task improves W1 with more steps") {
  const fs::path dir = scratch("steps");
  REQUIRE(run({"make-dataset", "--task", "gaussian1d", "--n", "10", "--seed", "2", "--out", s(dir / "g.json")}) == 0);
  RunConfig base;
  base.task = "gaussian1d";
  base.seed = 7;
  base.samples = 3000;
  base.dataset = s(dir / "g.json");
  base.out = s(dir / "out");
  const auto rows = run_ablate("steps", base, {10, 50, 200}, false);
  REQUIRE(rows.size() == 3);
  for (const auto& r : rows) REQUIRE(r.w1.has_value());
  CHECK(*rows[0].w1 > *rows[1].w1);
  CHECK(*rows[1].w1 > *rows[2].w1);
}

TEST_CASE("evaluate reports zero diversity for identical images") {
  const auto& f = shapes();
  const fs::path dir = scratch("evaluate");
  for (int i = 0; i < 5; ++i) {
    fs::copy_file(f.dir / "imgs" / "item_003.png", dir / ("copy_" + std::to_string(i) + ".png"));
  }
  const DiversityReport rep = run_evaluate(dir, dir / "report");
  CHECK(rep.mean_pairwise_dhash == 0.0);
  CHECK(rep.pair_count == 10);
  CHECK(fs::exists(dir / "report.txt"));
  CHECK(fs::exists(dir / "report.json"));

  const fs::path one = scratch("evaluate_one");
  fs::copy_file(f.dir / "imgs" / "item_000.png", one / "a.png");
  CHECK(run({"evaluate", s(one)}) == 2);
}

TEST_CASE("exit codes") {
  const fs::path dir = scratch("exit");
  REQUIRE(run({"make-dataset", "--task", "gaussian1d", "--n", "10", "--seed", "1", "--out", s(dir / "g.json")}) == 0);
  const std::string data = s(dir / "g.json");

  CHECK(run({}) == 2);
  CHECK(run({"sample", "--no-such-flag"}) == 2);
  CHECK(run({"sample", "--task", "gaussian1d", "--dataset", data}) == 2);  // no seed
  CHECK(run({"sample", "--task", "gaussian1d", "--dataset", s(dir / "missing.json"), "--seed", "1"}) == 2);
  CHECK(run({"sample", "--task", "gaussian9", "--dataset", data, "--seed", "1"}) == 2);
  CHECK(run({"sample", "--task", "gaussian1d", "--dataset", data, "--seed", "1", "--text", "red square"}) == 2);

  write_file(dir / "typo.json", R"({"task": "gaussian1d", "sed": 1})");
  CHECK(run({"sample", "--config", s(dir / "typo.json")}) == 2);
  write_file(dir / "broken.json", "{oops");
  CHECK(run({"sample", "--config", s(dir / "broken.json")}) == 2);

  write_file(dir / "afile", "");
  CHECK(run({"sample", "--task", "gaussian1d", "--dataset", data, "--seed", "1", "--samples", "2", "--T", "20", "--out",
             s(dir / "afile" / "sub")}) == 4);

  write_file(dir / "bad.json", R"({"grad_clip": 0, "lr": 1e12})");
  REQUIRE(run({"make-dataset", "--task", "gaussian2d", "--n", "200", "--seed", "1", "--out", s(dir / "g2.json")}) == 0);
  CHECK(run({"train", "denoiser", "--config", s(dir / "bad.json"), "--dataset", s(dir / "g2.json"), "--out",
             s(dir / "bad.ck"), "--seed", "1", "--steps", "50", "--T", "100"}) == 3);
}

TEST_CASE("run config JSON round trip") {
  RunConfig c;
  c.seed = 12;
  c.task = "gaussian2d";
  c.schedule = ScheduleSpec{"cosine", 300, 1e-4, 0.02, 0};
  c.sampler.kind = SamplerSpec::Kind::Ddim;
  c.sampler.steps = 30;
  c.guidance.grad_target = GradTarget::X0;
  c.prompt.text = {"red", "circle"};
  const auto j = run_config_to_json(c);
  CHECK(run_config_to_json(run_config_from_json(j)) == j);

  auto with_string = j;
  with_string["prompt"]["text"] = "red circle";
  CHECK(run_config_from_json(with_string).prompt.text == c.prompt.text);

  auto bad = j;
  bad["guidance"]["grad_target"] = "z";
  CHECK_THROWS_AS(run_config_from_json(bad), std::invalid_argument);
  bad = j;
  bad["sampler"]["kind"] = "euler";
  CHECK_THROWS_AS(run_config_from_json(bad), std::invalid_argument);
}
