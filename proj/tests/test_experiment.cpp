#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "compil/experiment.hpp"
#include "compil/metrics.hpp"

using namespace compil;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config(const std::string& out_dir) {
  ExperimentConfig cfg;
  cfg.method = "full";
  cfg.data_mode = "synthetic";
  cfg.dataset.n_states = 3;
  cfg.dataset.n_objects = 2;
  cfg.dataset.samples_per_composition = 6;
  cfg.dataset.image_side = 16;
  cfg.dataset.noise_level = 0.05;
  cfg.dataset.seed = 5;
  cfg.split.top_k = 4;
  cfg.split.n_tasks = 2;
  cfg.split.policy = SplitPolicy::random_partition;
  cfg.split.seed = 1;
  cfg.backbone.image_side = 16;
  cfg.backbone.patch_side = 8;
  cfg.backbone.embed_dim = 32;
  cfg.backbone.n_layers = 1;
  cfg.backbone.n_heads = 2;
  cfg.backbone.mlp_ratio = 2.0;
  cfg.backbone.max_prompt_tokens = 16;
  cfg.backbone.seed = 11;
  cfg.model.pool_size = 4;
  cfg.model.prompt_len = 2;
  cfg.model.top_k = 2;
  cfg.train.epochs = 1;
  cfg.train.batch_size = 8;
  cfg.train.learning_rate = 3e-3;
  cfg.train.mu = 0.2;
  cfg.train.weights.alpha = 0.05;
  cfg.train.weights.beta = 0.3;
  cfg.train.weights.lambda1 = 0.1;
  cfg.train.weights.lambda2 = 1e-4;
  cfg.train.weights.lambda3 = 0.5;
  cfg.seeds = {1, 2};
  cfg.output_dir = out_dir;
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("config json round trip, overrides, and field errors") {
  auto cfg = tiny_config("runs/test");
  auto j = cfg.to_json();
  auto back = ExperimentConfig::from_json(j);
  CHECK(back.to_json() == j);

  SUBCASE("unknown fields are rejected with their path") {
    j["train"]["learning_rat"] = 0.1;
    CHECK_THROWS_WITH_AS(ExperimentConfig::from_json(j),
                         doctest::Contains("train.learning_rat"), std::invalid_argument);
  }
  SUBCASE("type errors carry the field path") {
    j["train"]["epochs"] = "three";
    CHECK_THROWS_WITH_AS(ExperimentConfig::from_json(j), doctest::Contains("train.epochs"),
                         std::invalid_argument);
  }
  SUBCASE("set-style overrides") {
    auto doc = ExperimentConfig::apply_override(cfg.to_json(), "train.epochs=9");
    doc = ExperimentConfig::apply_override(std::move(doc), "ablation.fusion=mean");
    auto c2 = ExperimentConfig::from_json(doc);
    CHECK(c2.train.epochs == 9);
    CHECK(c2.model.ablation.fusion == FusionMode::mean);
    CHECK_THROWS_AS(ExperimentConfig::apply_override(cfg.to_json(), "no-equals"),
                    std::invalid_argument);
  }
  SUBCASE("method presets change the switch block") {
    auto c2 = ExperimentConfig::from_json(cfg.to_json());
    c2.apply_method("single_pool");
    CHECK_FALSE(c2.model.ablation.pool_state);
    CHECK(c2.model.ablation.fusion == FusionMode::mean);
    CHECK(c2.train.mu == 0.0);
    CHECK(c2.method == "single_pool");
    CHECK_THROWS_AS(c2.apply_method("bogus"), std::invalid_argument);
  }
  SUBCASE("pools must include the composition pool") {
    auto doc = cfg.to_json();
    doc["ablation"]["pools"] = "so";
    CHECK_THROWS_WITH_AS(ExperimentConfig::from_json(doc), doctest::Contains("ablation.pools"),
                         std::invalid_argument);
  }
}

TEST_CASE("run_experiment produces the full artifact set and is replayable") {
  const std::string dir = "runs/exp_test";
  fs::remove_all(dir);
  auto cfg = tiny_config(dir);
  auto bundle = run_experiment(cfg);
  REQUIRE(bundle.runs.size() == 2);

  // structural: 2 seed directories with matrices, summary, checkpoint
  for (std::uint64_t seed : {1ull, 2ull}) {
    const fs::path sd = fs::path(dir) / ("seed_" + std::to_string(seed));
    CHECK(fs::exists(sd / "accuracy_composition.csv"));
    CHECK(fs::exists(sd / "accuracy_state.csv"));
    CHECK(fs::exists(sd / "accuracy_object.csv"));
    CHECK(fs::exists(sd / "summary.json"));
    CHECK(fs::exists(sd / "checkpoint_final.bin"));
    CHECK(fs::exists(sd / "train_log.jsonl"));
  }
  CHECK(fs::exists(fs::path(dir) / "aggregate.csv"));
  CHECK(fs::exists(fs::path(dir) / "resolved_config.json"));
  CHECK(fs::exists(fs::path(dir) / "tasks.json"));

  // every reported number is recomputable from the persisted matrices
  auto m = AccuracyMatrix::load_csv((fs::path(dir) / "seed_1/accuracy_composition.csv").string());
  nlohmann::json sj;
  std::ifstream sin(fs::path(dir) / "seed_1/summary.json");
  sin >> sj;
  CHECK(sj["avg_acc"].get<double>() == doctest::Approx(100.0 * avg_acc(m)).epsilon(1e-9));

  SUBCASE("identical configs and seeds reproduce bit-identical result tables") {
    const std::string dir2 = "runs/exp_test_replay";
    fs::remove_all(dir2);
    auto cfg2 = tiny_config(dir2);
    run_experiment(cfg2);
    CHECK(slurp(fs::path(dir) / "aggregate.csv") == slurp(fs::path(dir2) / "aggregate.csv"));
    for (const char* f :
         {"accuracy_composition.csv", "accuracy_state.csv", "accuracy_object.csv",
          "summary.json"})
      CHECK(slurp(fs::path(dir) / "seed_1" / f) == slurp(fs::path(dir2) / "seed_1" / f));
    fs::remove_all(dir2);
  }

  SUBCASE("export-features emits one row per test sample with 2D feature columns") {
    const std::string out_csv = (fs::path(dir) / "features.csv").string();
    export_features(cfg, (fs::path(dir) / "seed_1/checkpoint_final.bin").string(), "test",
                    out_csv);
    std::ifstream in(out_csv);
    std::string header;
    std::getline(in, header);
    int cols = 1;
    for (char c : header) cols += c == ',' ? 1 : 0;
    CHECK(cols == 5 + 2 * cfg.backbone.embed_dim);
    int rows = 0;
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) ++rows;
    // 6 samples per composition, 4 compositions, train fraction 0.8 -> 2 test each
    CHECK(rows == 8);
  }

  fs::remove_all(dir);
}

TEST_CASE("ablation sweep produces one labeled bundle per switch value") {
  const std::string dir = "runs/ablate_test";
  fs::remove_all(dir);
  auto cfg = tiny_config(dir);
  cfg.seeds = {1};
  auto bundles = run_ablation(cfg, {{"fusion", {"mean", "gem"}}});
  REQUIRE(bundles.size() == 2);
  CHECK(bundles[0].label == "fusion=mean");
  CHECK(bundles[1].label == "fusion=gem");
  CHECK(fs::exists(fs::path(dir) / "fusion-mean/aggregate.csv"));
  CHECK(fs::exists(fs::path(dir) / "fusion-gem/aggregate.csv"));
  CHECK(fs::exists(fs::path(dir) / "ablation_report.csv"));
  fs::remove_all(dir);
}

TEST_CASE("report aggregates mean and sample std") {
  ResultBundle bundle;
  bundle.label = "demo";
  for (double acc : {50.0, 60.0, 70.0}) {
    RunSummary r;
    r.avg_acc = acc;
    r.state_acc = acc;
    r.object_acc = acc;
    r.hm = acc;
    bundle.runs.push_back(r);
  }
  const std::string dir = "runs/report_test";
  fs::create_directories(dir);
  write_report({bundle}, dir + "/report.csv", dir + "/report.txt");
  auto csv = slurp(dir + "/report.csv");
  CHECK(csv.find("demo,3,60.000000,10.000000") != std::string::npos);
  CHECK_THROWS_AS(write_report({}, dir + "/x.csv", dir + "/x.txt"), std::invalid_argument);
  fs::remove_all(dir);
}
