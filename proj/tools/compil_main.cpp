// Experiment front door: dataset generation, protocol splitting, incremental
// training and evaluation, ablation sweeps, feature export, and result tables.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "compil/experiment.hpp"
#include "compil/metrics.hpp"

namespace fs = std::filesystem;
using namespace compil;

namespace {

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(part);
  return out;
}

// preset/defaults -> config file -> --set overrides -> explicit flags
struct ConfigArgs {
  std::string config_path;
  std::string preset;
  std::string method;
  std::vector<std::string> overrides;
  std::string seeds;
  std::string output;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON experiment config");
    cmd->add_option("--preset", preset,
                    "named preset: synthetic-benchmark, split-clothing, "
                    "split-ut-zappos-5, split-ut-zappos-10");
    cmd->add_option("--method", method, "method preset: full, sim, single_pool");
    cmd->add_option("--set", overrides, "override a config field, e.g. train.epochs=3")
        ->take_all();
    cmd->add_option("--seeds", seeds, "comma-separated run seeds, e.g. 1,2,3");
    cmd->add_option("--output", output, "output directory");
  }

  ExperimentConfig resolve() const {
    nlohmann::json doc =
        preset.empty() ? ExperimentConfig{}.to_json() : ExperimentConfig::preset(preset).to_json();
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw std::runtime_error("cannot open config " + config_path);
      nlohmann::json file_doc;
      in >> file_doc;
      doc.merge_patch(file_doc);
    }
    if (!method.empty()) {
      // patch the method's switch bundle into the document so later --set
      // overrides can still refine it
      auto bundled = ExperimentConfig::from_json(doc);
      bundled.apply_method(method);
      auto bundled_doc = bundled.to_json();
      doc["method"] = method;
      doc["ablation"] = bundled_doc["ablation"];
      doc["train"]["mu"] = bundled_doc["train"]["mu"];
    }
    for (const auto& o : overrides) doc = ExperimentConfig::apply_override(std::move(doc), o);
    if (!seeds.empty()) {
      std::vector<std::uint64_t> parsed;
      for (const auto& s : split_commas(seeds)) parsed.push_back(std::stoull(s));
      doc["seeds"] = parsed;
    }
    if (!output.empty()) doc["output_dir"] = output;
    auto cfg = ExperimentConfig::from_json(doc);
    cfg.validate();
    return cfg;
  }
};

void print_bundle(const ResultBundle& bundle) {
  auto stat = [&](auto field) {
    std::vector<double> v;
    for (const auto& r : bundle.runs) v.push_back(field(r));
    return mean_std(v);
  };
  const auto avg = stat([](const RunSummary& r) { return r.avg_acc; });
  const auto ftt = stat([](const RunSummary& r) { return r.forgetting; });
  const auto sta = stat([](const RunSummary& r) { return r.state_acc; });
  const auto obj = stat([](const RunSummary& r) { return r.object_acc; });
  const auto hm = stat([](const RunSummary& r) { return r.hm; });
  std::printf("%-20s  AvgAcc %.2f+-%.2f  FTT %.2f+-%.2f  State %.2f+-%.2f  "
              "Object %.2f+-%.2f  HM %.2f+-%.2f\n",
              bundle.label.c_str(), avg.mean, avg.stddev, ftt.mean, ftt.stddev, sta.mean,
              sta.stddev, obj.mean, obj.stddev, hm.mean, hm.stddev);
}

int cmd_generate_data(const std::string& out_dir, DatasetSpec spec) {
  auto store = PixelStore::create(out_dir);
  auto rows = synthesize(spec, store);
  write_metadata_csv((fs::path(out_dir) / "metadata.csv").string(), rows);
  std::printf("wrote %zu samples (%d states x %d objects) to %s\n", rows.size(), spec.n_states,
              spec.n_objects, out_dir.c_str());
  return 0;
}

int cmd_split(const std::string& metadata_path, SplitOptions opt, const std::string& policy,
              const std::string& out_path) {
  opt.policy = split_policy_from_string(policy);
  auto rows = read_metadata_csv(metadata_path);
  auto result = build_splits(rows, opt);
  auto report = validate_protocol(result.sequence, result.registry);
  write_task_sequence_json(out_path, result.sequence, result.registry);
  std::printf("%d compositions (%d states, %d objects) over %d tasks -> %s\n",
              result.registry.n_compositions(), result.registry.n_states(),
              result.registry.n_objects(), result.sequence.n_tasks(), out_path.c_str());
  for (int s = 0; s < result.registry.n_states(); ++s)
    std::printf("  state %-12s in %d task(s)\n", result.registry.state_name(s).c_str(),
                report.state_task_counts[static_cast<std::size_t>(s)]);
  for (int o = 0; o < result.registry.n_objects(); ++o)
    std::printf("  object %-11s in %d task(s)\n", result.registry.object_name(o).c_str(),
                report.object_task_counts[static_cast<std::size_t>(o)]);
  if (!report.ok) {
    for (const auto& v : report.violations) std::fprintf(stderr, "violation: %s\n", v.c_str());
    return 1;
  }
  return 0;
}

int cmd_evaluate(const ExperimentConfig& cfg, const std::string& checkpoint,
                 const std::string& split_name) {
  ExperimentConfig local = cfg;
  local.validate();
  auto rows = local.data_mode == "synthetic"
                  ? std::vector<MetadataRow>{}
                  : read_metadata_csv(local.metadata_path);
  PixelStore store;
  if (local.data_mode == "synthetic") {
    // reuse the training run's rendered data when present, else re-render
    const std::string data_dir = (fs::path(local.output_dir) / "data").string();
    if (fs::exists(fs::path(data_dir) / "manifest.csv")) {
      store = PixelStore::open(data_dir);
      rows = read_metadata_csv((fs::path(data_dir) / "metadata.csv").string());
    } else {
      store = PixelStore::create(data_dir);
      rows = synthesize(local.dataset, store);
    }
  } else {
    store = PixelStore::open(local.pixel_root);
  }
  auto split = build_splits(rows, local.split);
  auto st = restore_checkpoint<float>(checkpoint, split.registry);

  std::vector<double> comp_row, state_row, obj_row;
  for (int t = 0; t < st.tasks_trained && t < split.sequence.n_tasks(); ++t) {
    const auto& task = split.sequence.tasks[static_cast<std::size_t>(t)];
    auto samples = load_samples<float>(
        split, store, split_name == "train" ? task.train_samples : task.test_samples);
    auto counts = evaluate_samples(st, samples, split.registry, local.train.mu);
    comp_row.push_back(counts.comp_acc());
    state_row.push_back(counts.state_acc());
    obj_row.push_back(counts.object_acc());
    std::printf("task %d: composition %.4f  state %.4f  object %.4f  (n=%d)\n", t,
                counts.comp_acc(), counts.state_acc(), counts.object_acc(), counts.n);
  }
  const auto mean_of = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  };
  const double state_pct = 100.0 * mean_of(state_row);
  const double obj_pct = 100.0 * mean_of(obj_row);
  std::printf("mean over tasks: AvgAcc %.2f  State %.2f  Object %.2f  HM %.2f\n",
              100.0 * mean_of(comp_row), state_pct, obj_pct,
              harmonic_mean(state_pct, obj_pct));
  return 0;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& out_dir) {
  std::vector<ResultBundle> bundles;
  for (const auto& dir : inputs) {
    ResultBundle bundle;
    bundle.label = fs::path(dir).filename().string();
    for (auto const& entry : fs::directory_iterator(dir)) {
      if (!entry.is_directory()) continue;
      const auto name = entry.path().filename().string();
      if (name.rfind("seed_", 0) != 0) continue;
      std::ifstream in(entry.path() / "summary.json");
      if (!in) continue;
      nlohmann::json sj;
      in >> sj;
      RunSummary run;
      run.seed = sj.value("seed", 0ull);
      run.avg_acc = sj.value("avg_acc", 0.0);
      run.forgetting = sj.value("forgetting", 0.0);
      run.state_acc = sj.value("state", 0.0);
      run.object_acc = sj.value("object", 0.0);
      run.hm = sj.value("hm", 0.0);
      bundle.runs.push_back(run);
    }
    std::sort(bundle.runs.begin(), bundle.runs.end(),
              [](const RunSummary& a, const RunSummary& b) { return a.seed < b.seed; });
    if (bundle.runs.empty())
      throw std::runtime_error("report: no seed summaries under " + dir);
    bundles.push_back(std::move(bundle));
  }
  fs::create_directories(out_dir);
  write_report(bundles, (fs::path(out_dir) / "report.csv").string(),
               (fs::path(out_dir) / "report.txt").string());
  for (const auto& b : bundles) print_bundle(b);
  std::printf("report written to %s\n", out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"compositional incremental learning laboratory"};
  app.require_subcommand(1);

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "render a synthetic compositional dataset");
  DatasetSpec spec;
  std::string gen_out = "data";
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--states", spec.n_states, "number of states (fill colors)");
  gen->add_option("--objects", spec.n_objects, "number of objects (shapes)");
  gen->add_option("--samples", spec.samples_per_composition, "samples per composition");
  gen->add_option("--side", spec.image_side, "image side in pixels");
  gen->add_option("--noise", spec.noise_level, "noise level in [0,1]");
  gen->add_option("--seed", spec.seed, "generation seed");

  // split
  auto* sp = app.add_subcommand("split", "build and validate a protocol split");
  std::string sp_metadata, sp_policy = "random-partition", sp_out = "tasks.json";
  SplitOptions sp_opt;
  sp->add_option("--metadata", sp_metadata, "metadata csv")->required();
  sp->add_option("--top-k", sp_opt.top_k, "compositions to keep");
  sp->add_option("--n-tasks", sp_opt.n_tasks, "number of tasks");
  sp->add_option("--policy", sp_policy, "random-partition | count-sorted");
  sp->add_option("--seed", sp_opt.seed, "partition seed");
  sp->add_option("--train-fraction", sp_opt.train_fraction, "train split fraction");
  sp->add_option("--out", sp_out, "task-sequence json path");

  // train
  auto* tr = app.add_subcommand("train", "run the incremental experiment for every seed");
  ConfigArgs tr_args;
  tr_args.attach(tr);

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint on the protocol splits");
  ConfigArgs ev_args;
  std::string ev_checkpoint, ev_split = "test";
  ev_args.attach(ev);
  ev->add_option("--checkpoint", ev_checkpoint, "checkpoint file")->required();
  ev->add_option("--split", ev_split, "test | train");

  // ablate
  auto* ab = app.add_subcommand("ablate", "sweep ablation axes and report");
  ConfigArgs ab_args;
  std::vector<std::string> ab_axes;
  ab_args.attach(ab);
  ab->add_option("--axis", ab_axes, "axis sweep, e.g. fusion=max,mean,gem")->take_all();

  // export-features
  auto* ex = app.add_subcommand("export-features", "dump per-sample features to csv");
  ConfigArgs ex_args;
  std::string ex_checkpoint, ex_split = "test", ex_out = "features.csv";
  ex_args.attach(ex);
  ex->add_option("--checkpoint", ex_checkpoint, "checkpoint file")->required();
  ex->add_option("--split", ex_split, "test | train");
  ex->add_option("--out", ex_out, "output csv");

  // report
  auto* rp = app.add_subcommand("report", "aggregate result directories into tables");
  std::vector<std::string> rp_inputs;
  std::string rp_out = "report";
  rp->add_option("--inputs", rp_inputs, "result directories")->required()->take_all();
  rp->add_option("--out", rp_out, "report output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_generate_data(gen_out, spec);
    if (sp->parsed()) return cmd_split(sp_metadata, sp_opt, sp_policy, sp_out);
    if (tr->parsed()) {
      auto bundle = run_experiment(tr_args.resolve());
      print_bundle(bundle);
      return 0;
    }
    if (ev->parsed()) return cmd_evaluate(ev_args.resolve(), ev_checkpoint, ev_split);
    if (ab->parsed()) {
      std::map<std::string, std::vector<std::string>> axes;
      for (const auto& axis : ab_axes) {
        const auto eq = axis.find('=');
        if (eq == std::string::npos)
          throw std::invalid_argument("axis '" + axis + "' is not name=v1,v2");
        axes[axis.substr(0, eq)] = split_commas(axis.substr(eq + 1));
      }
      auto bundles = run_ablation(ab_args.resolve(), axes);
      for (const auto& b : bundles) print_bundle(b);
      return 0;
    }
    if (ex->parsed()) {
      export_features(ex_args.resolve(), ex_checkpoint, ex_split, ex_out);
      std::printf("features written to %s\n", ex_out.c_str());
      return 0;
    }
    if (rp->parsed()) return cmd_report(rp_inputs, rp_out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
