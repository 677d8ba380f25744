#include "compil/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "compil/metrics.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace compil {

namespace {

[[noreturn]] void field_error(const std::string& path, const std::string& what) {
  throw std::invalid_argument("config field '" + path + "': " + what);
}

void check_keys(const json& j, const std::string& section,
                const std::set<std::string>& allowed) {
  if (!j.is_object()) field_error(section, "expected an object");
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key))
      field_error(section + "." + key, "unknown field");
}

template <typename T>
T read_field(const json& j, const std::string& section, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    field_error(section + "." + key, e.what());
  }
}

json weights_to_json(const LossWeights& w) {
  return json{{"alpha", w.alpha},     {"beta", w.beta},       {"lambda1", w.lambda1},
              {"lambda2", w.lambda2}, {"lambda3", w.lambda3}, {"rce_floor", w.rce_floor}};
}

std::string format_double(double v, const char* fmt) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), fmt, v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// config serialization
// ---------------------------------------------------------------------------

json ExperimentConfig::to_json() const {
  json j;
  j["method"] = method;
  j["data"] = {{"mode", data_mode},
               {"n_states", dataset.n_states},
               {"n_objects", dataset.n_objects},
               {"samples_per_composition", dataset.samples_per_composition},
               {"image_side", dataset.image_side},
               {"noise_level", dataset.noise_level},
               {"seed", dataset.seed},
               {"metadata_path", metadata_path},
               {"pixel_root", pixel_root}};
  j["split"] = {{"top_k", split.top_k},
                {"n_tasks", split.n_tasks},
                {"policy", to_string(split.policy)},
                {"seed", split.seed},
                {"train_fraction", split.train_fraction}};
  j["backbone"] = {{"image_side", backbone.image_side},
                   {"patch_side", backbone.patch_side},
                   {"channels", backbone.channels},
                   {"embed_dim", backbone.embed_dim},
                   {"n_layers", backbone.n_layers},
                   {"n_heads", backbone.n_heads},
                   {"mlp_ratio", backbone.mlp_ratio},
                   {"max_prompt_tokens", backbone.max_prompt_tokens},
                   {"seed", backbone.seed}};
  j["model"] = {{"pool_size", model.pool_size},
                {"prompt_len", model.prompt_len},
                {"top_k", model.top_k},
                {"eta_init", model.eta_init}};
  j["ablation"] = {{"pools", model.ablation.pools_label()},
                   {"injection", to_string(model.ablation.injection)},
                   {"fusion", to_string(model.ablation.fusion)},
                   {"use_rce", model.ablation.use_rce},
                   {"use_inter", model.ablation.use_inter},
                   {"use_intra", model.ablation.use_intra}};
  j["train"] = {{"epochs", train.epochs},
                {"batch_size", train.batch_size},
                {"learning_rate", train.learning_rate},
                {"beta1", train.beta1},
                {"beta2", train.beta2},
                {"adam_eps", train.adam_eps},
                {"mu", train.mu},
                {"weights", weights_to_json(train.weights)}};
  j["dd"] = {{"theta_thre", dd.theta_thre}, {"epsilon", dd.epsilon}};
  j["seeds"] = seeds;
  j["output_dir"] = output_dir;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  check_keys(j, "config",
             {"method", "data", "split", "backbone", "model", "ablation", "train", "dd",
              "seeds", "output_dir"});
  ExperimentConfig cfg;
  // the method is a label; its switch bundle is applied by apply_method at
  // resolution time, never implicitly here, so explicit fields stay exact
  cfg.method = read_field<std::string>(j, "config", "method", cfg.method);

  if (j.contains("data")) {
    const auto& d = j.at("data");
    check_keys(d, "data",
               {"mode", "n_states", "n_objects", "samples_per_composition", "image_side",
                "noise_level", "seed", "metadata_path", "pixel_root"});
    cfg.data_mode = read_field<std::string>(d, "data", "mode", cfg.data_mode);
    cfg.dataset.n_states = read_field<int>(d, "data", "n_states", cfg.dataset.n_states);
    cfg.dataset.n_objects = read_field<int>(d, "data", "n_objects", cfg.dataset.n_objects);
    cfg.dataset.samples_per_composition = read_field<int>(
        d, "data", "samples_per_composition", cfg.dataset.samples_per_composition);
    cfg.dataset.image_side = read_field<int>(d, "data", "image_side", cfg.dataset.image_side);
    cfg.dataset.noise_level =
        read_field<double>(d, "data", "noise_level", cfg.dataset.noise_level);
    cfg.dataset.seed = read_field<std::uint64_t>(d, "data", "seed", cfg.dataset.seed);
    cfg.metadata_path = read_field<std::string>(d, "data", "metadata_path", cfg.metadata_path);
    cfg.pixel_root = read_field<std::string>(d, "data", "pixel_root", cfg.pixel_root);
  }
  if (j.contains("split")) {
    const auto& s = j.at("split");
    check_keys(s, "split", {"top_k", "n_tasks", "policy", "seed", "train_fraction"});
    cfg.split.top_k = read_field<int>(s, "split", "top_k", cfg.split.top_k);
    cfg.split.n_tasks = read_field<int>(s, "split", "n_tasks", cfg.split.n_tasks);
    if (s.contains("policy"))
      cfg.split.policy =
          split_policy_from_string(read_field<std::string>(s, "split", "policy", ""));
    cfg.split.seed = read_field<std::uint64_t>(s, "split", "seed", cfg.split.seed);
    cfg.split.train_fraction =
        read_field<double>(s, "split", "train_fraction", cfg.split.train_fraction);
  }
  if (j.contains("backbone")) {
    const auto& b = j.at("backbone");
    check_keys(b, "backbone",
               {"image_side", "patch_side", "channels", "embed_dim", "n_layers", "n_heads",
                "mlp_ratio", "max_prompt_tokens", "seed"});
    cfg.backbone.image_side = read_field<int>(b, "backbone", "image_side", cfg.backbone.image_side);
    cfg.backbone.patch_side = read_field<int>(b, "backbone", "patch_side", cfg.backbone.patch_side);
    cfg.backbone.channels = read_field<int>(b, "backbone", "channels", cfg.backbone.channels);
    cfg.backbone.embed_dim = read_field<int>(b, "backbone", "embed_dim", cfg.backbone.embed_dim);
    cfg.backbone.n_layers = read_field<int>(b, "backbone", "n_layers", cfg.backbone.n_layers);
    cfg.backbone.n_heads = read_field<int>(b, "backbone", "n_heads", cfg.backbone.n_heads);
    cfg.backbone.mlp_ratio = read_field<double>(b, "backbone", "mlp_ratio", cfg.backbone.mlp_ratio);
    cfg.backbone.max_prompt_tokens =
        read_field<int>(b, "backbone", "max_prompt_tokens", cfg.backbone.max_prompt_tokens);
    cfg.backbone.seed = read_field<std::uint64_t>(b, "backbone", "seed", cfg.backbone.seed);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, "model", {"pool_size", "prompt_len", "top_k", "eta_init"});
    cfg.model.pool_size = read_field<int>(m, "model", "pool_size", cfg.model.pool_size);
    cfg.model.prompt_len = read_field<int>(m, "model", "prompt_len", cfg.model.prompt_len);
    cfg.model.top_k = read_field<int>(m, "model", "top_k", cfg.model.top_k);
    cfg.model.eta_init = read_field<double>(m, "model", "eta_init", cfg.model.eta_init);
  }
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    check_keys(a, "ablation", {"pools", "injection", "fusion", "use_rce", "use_inter",
                               "use_intra"});
    if (a.contains("pools")) {
      const auto pools = read_field<std::string>(a, "ablation", "pools", "cso");
      if (pools.find('c') == std::string::npos)
        field_error("ablation.pools", "the composition pool cannot be disabled");
      for (char ch : pools)
        if (ch != 'c' && ch != 's' && ch != 'o')
          field_error("ablation.pools", std::string("unknown pool '") + ch + "'");
      cfg.model.ablation.pool_state = pools.find('s') != std::string::npos;
      cfg.model.ablation.pool_object = pools.find('o') != std::string::npos;
    }
    if (a.contains("injection"))
      cfg.model.ablation.injection =
          injection_from_string(read_field<std::string>(a, "ablation", "injection", ""));
    if (a.contains("fusion"))
      cfg.model.ablation.fusion =
          fusion_from_string(read_field<std::string>(a, "ablation", "fusion", ""));
    cfg.model.ablation.use_rce =
        read_field<bool>(a, "ablation", "use_rce", cfg.model.ablation.use_rce);
    cfg.model.ablation.use_inter =
        read_field<bool>(a, "ablation", "use_inter", cfg.model.ablation.use_inter);
    cfg.model.ablation.use_intra =
        read_field<bool>(a, "ablation", "use_intra", cfg.model.ablation.use_intra);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_keys(t, "train", {"epochs", "batch_size", "learning_rate", "beta1", "beta2",
                            "adam_eps", "mu", "weights"});
    cfg.train.epochs = read_field<int>(t, "train", "epochs", cfg.train.epochs);
    cfg.train.batch_size = read_field<int>(t, "train", "batch_size", cfg.train.batch_size);
    cfg.train.learning_rate =
        read_field<double>(t, "train", "learning_rate", cfg.train.learning_rate);
    cfg.train.beta1 = read_field<double>(t, "train", "beta1", cfg.train.beta1);
    cfg.train.beta2 = read_field<double>(t, "train", "beta2", cfg.train.beta2);
    cfg.train.adam_eps = read_field<double>(t, "train", "adam_eps", cfg.train.adam_eps);
    cfg.train.mu = read_field<double>(t, "train", "mu", cfg.train.mu);
    if (t.contains("weights")) {
      const auto& w = t.at("weights");
      check_keys(w, "train.weights",
                 {"alpha", "beta", "lambda1", "lambda2", "lambda3", "rce_floor"});
      cfg.train.weights.alpha = read_field<double>(w, "train.weights", "alpha", 0.0);
      cfg.train.weights.beta = read_field<double>(w, "train.weights", "beta", 0.0);
      cfg.train.weights.lambda1 = read_field<double>(w, "train.weights", "lambda1", 0.0);
      cfg.train.weights.lambda2 = read_field<double>(w, "train.weights", "lambda2", 0.0);
      cfg.train.weights.lambda3 = read_field<double>(w, "train.weights", "lambda3", 0.0);
      cfg.train.weights.rce_floor = read_field<double>(w, "train.weights", "rce_floor", -4.0);
    }
  }
  if (j.contains("dd")) {
    const auto& d = j.at("dd");
    check_keys(d, "dd", {"theta_thre", "epsilon"});
    cfg.dd.theta_thre = read_field<double>(d, "dd", "theta_thre", cfg.dd.theta_thre);
    cfg.dd.epsilon = read_field<double>(d, "dd", "epsilon", cfg.dd.epsilon);
  }
  if (j.contains("seeds")) {
    try {
      cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    } catch (const json::exception& e) {
      field_error("seeds", e.what());
    }
    if (cfg.seeds.empty()) field_error("seeds", "need at least one seed");
  }
  cfg.output_dir = read_field<std::string>(j, "config", "output_dir", cfg.output_dir);
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  return from_json(j);
}

void ExperimentConfig::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write config " + path);
  out << to_json().dump(2) << "\n";
}

json ExperimentConfig::apply_override(json doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw std::invalid_argument("override '" + assignment + "' is not key.path=value");
  const std::string path = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);

  json* node = &doc;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) throw std::invalid_argument("override '" + assignment + "': empty key");
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];

  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::exception&) {
    parsed = value;  // plain strings need no quotes on the command line
  }
  (*node)[parts.back()] = parsed;
  return doc;
}

void ExperimentConfig::validate() const {
  if (data_mode != "synthetic" && data_mode != "metadata")
    field_error("data.mode", "must be 'synthetic' or 'metadata'");
  if (data_mode == "synthetic") dataset.validate();
  if (data_mode == "metadata" && metadata_path.empty())
    field_error("data.metadata_path", "required in metadata mode");
  backbone.validate();
  model.validate();
  train.validate();
  dd.validate();
  if (seeds.empty()) field_error("seeds", "need at least one seed");
  if (output_dir.empty()) field_error("output_dir", "must not be empty");
}

// ---------------------------------------------------------------------------
// presets and methods
// ---------------------------------------------------------------------------

void ExperimentConfig::apply_method(const std::string& name) {
  auto& ab = model.ablation;
  if (name == "full") {
    ab.pool_state = true;
    ab.pool_object = true;
    ab.injection = InjectionMode::object_to_state;
    ab.fusion = FusionMode::gem;
    ab.use_rce = true;
    ab.use_inter = true;
    ab.use_intra = true;
  } else if (name == "sim") {
    // multi-pool prompt learning + GeM fusion only, trained with plain CE
    ab.pool_state = true;
    ab.pool_object = true;
    ab.injection = InjectionMode::none;
    ab.fusion = FusionMode::gem;
    ab.use_rce = false;
    ab.use_inter = false;
    ab.use_intra = false;
  } else if (name == "single_pool") {
    // the learning-to-prompt style comparator: one pool, mean fusion, CE
    ab.pool_state = false;
    ab.pool_object = false;
    ab.injection = InjectionMode::none;
    ab.fusion = FusionMode::mean;
    ab.use_rce = false;
    ab.use_inter = false;
    ab.use_intra = false;
    train.mu = 0.0;  // no primitive heads to fuse at inference
  } else {
    throw std::invalid_argument("unknown method '" + name + "'");
  }
  method = name;
}

std::vector<std::string> ExperimentConfig::preset_names() {
  return {"synthetic-benchmark", "split-clothing", "split-ut-zappos-5", "split-ut-zappos-10"};
}

ExperimentConfig ExperimentConfig::preset(const std::string& name) {
  ExperimentConfig cfg;
  cfg.backbone.image_side = 32;
  cfg.backbone.patch_side = 8;
  cfg.backbone.embed_dim = 64;
  cfg.backbone.n_layers = 4;
  cfg.backbone.n_heads = 4;
  cfg.backbone.mlp_ratio = 2.0;
  cfg.backbone.max_prompt_tokens = 64;
  cfg.backbone.seed = 7;

  if (name == "synthetic-benchmark") {
    cfg.data_mode = "synthetic";
    cfg.dataset.n_states = 6;
    cfg.dataset.n_objects = 5;
    cfg.dataset.samples_per_composition = 40;
    cfg.dataset.image_side = 32;
    cfg.dataset.noise_level = 0.05;
    cfg.dataset.seed = 20240601;
    cfg.split.top_k = 25;
    cfg.split.n_tasks = 5;
    cfg.split.policy = SplitPolicy::random_partition;
    cfg.split.seed = 3;
    cfg.model.pool_size = 10;
    cfg.model.prompt_len = 4;
    cfg.model.top_k = 3;
    cfg.train.epochs = 5;
    cfg.train.batch_size = 16;
    cfg.train.learning_rate = 5e-3;
    cfg.train.mu = 0.3;
    cfg.train.weights.alpha = 0.05;
    cfg.train.weights.beta = 0.5;
    cfg.train.weights.lambda1 = 0.1;
    cfg.train.weights.lambda2 = 1e-4;
    cfg.train.weights.lambda3 = 0.5;
    cfg.seeds = {1, 2, 3};
    cfg.output_dir = "runs/synthetic-benchmark";
    return cfg;
  }

  // paper-protocol presets; metadata and pixels must be supplied
  cfg.data_mode = "metadata";
  cfg.model.pool_size = 20;
  cfg.model.prompt_len = 5;
  cfg.model.top_k = 5;
  cfg.train.batch_size = 16;
  cfg.seeds = {1, 2, 3};
  if (name == "split-clothing") {
    cfg.split.top_k = 35;
    cfg.split.n_tasks = 5;
    cfg.split.policy = SplitPolicy::random_partition;
    cfg.train.epochs = 25;
    cfg.train.learning_rate = 0.03;
    cfg.train.mu = 0.5;
    cfg.train.weights.alpha = 0.006;
    cfg.train.weights.beta = 0.3;
    cfg.train.weights.lambda1 = 0.1;
    cfg.train.weights.lambda2 = 1e-7;
    cfg.train.weights.lambda3 = 0.1;
    cfg.output_dir = "runs/split-clothing";
    return cfg;
  }
  if (name == "split-ut-zappos-5") {
    cfg.split.top_k = 80;
    cfg.split.n_tasks = 5;
    cfg.split.policy = SplitPolicy::count_sorted;
    cfg.train.epochs = 10;
    cfg.train.learning_rate = 0.02;
    cfg.train.mu = 0.02;
    cfg.train.weights.alpha = 0.01;
    cfg.train.weights.beta = 0.7;
    cfg.train.weights.lambda1 = 1.0;
    cfg.train.weights.lambda2 = 3e-6;
    cfg.train.weights.lambda3 = 0.7;
    cfg.output_dir = "runs/split-ut-zappos-5";
    return cfg;
  }
  if (name == "split-ut-zappos-10") {
    cfg.split.top_k = 80;
    cfg.split.n_tasks = 10;
    cfg.split.policy = SplitPolicy::count_sorted;
    cfg.train.epochs = 3;
    cfg.train.learning_rate = 0.03;
    cfg.train.mu = 0.03;
    cfg.train.weights.alpha = 0.05;
    cfg.train.weights.beta = 0.4;
    cfg.train.weights.lambda1 = 0.5;
    cfg.train.weights.lambda2 = 1e-7;
    cfg.train.weights.lambda3 = 0.1;
    cfg.output_dir = "runs/split-ut-zappos-10";
    return cfg;
  }
  throw std::invalid_argument("unknown preset '" + name + "'");
}

// ---------------------------------------------------------------------------
// running experiments
// ---------------------------------------------------------------------------

namespace {

struct PreparedData {
  SplitResult split;
  PixelStore store;
};

PreparedData prepare_data(const ExperimentConfig& cfg) {
  PreparedData out;
  std::vector<MetadataRow> metadata;
  if (cfg.data_mode == "synthetic") {
    const std::string data_dir = (fs::path(cfg.output_dir) / "data").string();
    out.store = PixelStore::create(data_dir);
    metadata = synthesize(cfg.dataset, out.store);
    write_metadata_csv((fs::path(data_dir) / "metadata.csv").string(), metadata);
  } else {
    metadata = read_metadata_csv(cfg.metadata_path);
    out.store = PixelStore::open(cfg.pixel_root);
  }
  out.split = build_splits(metadata, cfg.split);
  auto report = validate_protocol(out.split.sequence, out.split.registry);
  if (!report.ok) {
    std::string msg = "protocol validation failed:";
    for (const auto& v : report.violations) msg += "\n  " + v;
    throw std::runtime_error(msg);
  }
  return out;
}

void write_train_log(std::ofstream& out, const TaskLog& log) {
  for (const auto& e : log.epochs) {
    json line{{"task", log.task},          {"epoch", e.epoch},
              {"loss", e.loss},            {"sce", e.sce},
              {"inter", e.inter},          {"intra", e.intra},
              {"surrogate", e.surrogate},  {"wall_seconds", e.wall_seconds}};
    out << line.dump() << "\n";
  }
}

RunSummary run_one_seed(const ExperimentConfig& cfg, const PreparedData& data,
                        std::shared_ptr<const FrozenEncoder<float>> encoder,
                        std::uint64_t seed, const std::string& seed_dir) {
  fs::create_directories(seed_dir);
  ModelConfig mc = cfg.model;
  mc.seed = derive_seed(seed, 0xA0DE1);
  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(seed, 0x7EA14);

  auto st = ModelState<float>::init(mc, data.split.registry, encoder);
  const std::uint64_t backbone_checksum = encoder->checksum();
  const int n_tasks = data.split.sequence.n_tasks();

  AccuracyMatrix m_comp(n_tasks), m_state(n_tasks), m_obj(n_tasks);
  std::vector<std::vector<LoadedSample<float>>> test_splits;
  std::ofstream log_out(fs::path(seed_dir) / "train_log.jsonl");

  for (int t = 0; t < n_tasks; ++t) {
    auto task = load_task_data<float>(data.split, data.store, t);
    auto log = train_task(st, task, tc, cfg.dd);
    write_train_log(log_out, log);
    test_splits.push_back(std::move(task.test));
    if (encoder->checksum() != backbone_checksum)
      throw std::runtime_error("backbone freeze invariant violated");

    std::vector<double> row_c, row_s, row_o;
    for (int i = 0; i <= t; ++i) {
      auto counts = evaluate_samples(st, test_splits[static_cast<std::size_t>(i)],
                                     data.split.registry, tc.mu);
      row_c.push_back(counts.comp_acc());
      row_s.push_back(counts.state_acc());
      row_o.push_back(counts.object_acc());
    }
    m_comp.append_row(row_c);
    m_state.append_row(row_s);
    m_obj.append_row(row_o);
  }

  m_comp.save_csv((fs::path(seed_dir) / "accuracy_composition.csv").string());
  m_state.save_csv((fs::path(seed_dir) / "accuracy_state.csv").string());
  m_obj.save_csv((fs::path(seed_dir) / "accuracy_object.csv").string());
  save_checkpoint(st, (fs::path(seed_dir) / "checkpoint_final.bin").string());

  RunSummary summary;
  summary.seed = seed;
  summary.avg_acc = 100.0 * avg_acc(m_comp);
  summary.forgetting = n_tasks >= 2 ? 100.0 * forgetting(m_comp) : 0.0;
  summary.state_acc = 100.0 * avg_acc(m_state);
  summary.object_acc = 100.0 * avg_acc(m_obj);
  summary.hm = harmonic_mean(summary.state_acc, summary.object_acc);

  json sj{{"seed", seed},
          {"avg_acc", summary.avg_acc},
          {"forgetting", summary.forgetting},
          {"state", summary.state_acc},
          {"object", summary.object_acc},
          {"hm", summary.hm}};
  std::ofstream sout(fs::path(seed_dir) / "summary.json");
  sout << sj.dump(2) << "\n";
  return summary;
}

json aggregate_json(const ResultBundle& bundle) {
  auto collect = [&](auto field) {
    std::vector<double> v;
    for (const auto& r : bundle.runs) v.push_back(field(r));
    return mean_std(v);
  };
  const auto avg = collect([](const RunSummary& r) { return r.avg_acc; });
  const auto ftt = collect([](const RunSummary& r) { return r.forgetting; });
  const auto sta = collect([](const RunSummary& r) { return r.state_acc; });
  const auto obj = collect([](const RunSummary& r) { return r.object_acc; });
  const auto hm = collect([](const RunSummary& r) { return r.hm; });
  return json{{"label", bundle.label},
              {"n_runs", bundle.runs.size()},
              {"avg_acc", {{"mean", avg.mean}, {"std", avg.stddev}}},
              {"forgetting", {{"mean", ftt.mean}, {"std", ftt.stddev}}},
              {"state", {{"mean", sta.mean}, {"std", sta.stddev}}},
              {"object", {{"mean", obj.mean}, {"std", obj.stddev}}},
              {"hm", {{"mean", hm.mean}, {"std", hm.stddev}}}};
}

void write_aggregate_csv(const std::vector<ResultBundle>& bundles, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "label,n_runs,avg_acc_mean,avg_acc_std,forgetting_mean,forgetting_std,"
         "state_mean,state_std,object_mean,object_std,hm_mean,hm_std\n";
  for (const auto& b : bundles) {
    const json a = aggregate_json(b);
    out << b.label << "," << b.runs.size();
    for (const char* key : {"avg_acc", "forgetting", "state", "object", "hm"})
      out << "," << format_double(a[key]["mean"].get<double>(), "%.6f") << ","
          << format_double(a[key]["std"].get<double>(), "%.6f");
    out << "\n";
  }
}

}  // namespace

ResultBundle run_experiment(const ExperimentConfig& config) {
  ExperimentConfig cfg = config;
  cfg.validate();

  fs::create_directories(cfg.output_dir);
  cfg.save((fs::path(cfg.output_dir) / "resolved_config.json").string());

  auto data = prepare_data(cfg);
  write_task_sequence_json((fs::path(cfg.output_dir) / "tasks.json").string(), data.split.sequence,
                           data.split.registry);
  auto encoder = std::make_shared<const FrozenEncoder<float>>(cfg.backbone);

  ResultBundle bundle;
  bundle.label = cfg.method;
  for (std::uint64_t seed : cfg.seeds) {
    const std::string seed_dir =
        (fs::path(cfg.output_dir) / ("seed_" + std::to_string(seed))).string();
    bundle.runs.push_back(run_one_seed(cfg, data, encoder, seed, seed_dir));
  }

  write_aggregate_csv({bundle}, (fs::path(cfg.output_dir) / "aggregate.csv").string());
  std::ofstream aj(fs::path(cfg.output_dir) / "aggregate.json");
  aj << aggregate_json(bundle).dump(2) << "\n";
  return bundle;
}

std::vector<ResultBundle> run_ablation(
    const ExperimentConfig& base, const std::map<std::string, std::vector<std::string>>& axes) {
  if (axes.empty()) throw std::invalid_argument("ablate: no axes given");
  for (const auto& [axis, values] : axes) {
    static const std::set<std::string> known{"pools", "injection", "fusion",
                                             "rce", "inter", "intra", "method"};
    if (!known.count(axis)) throw std::invalid_argument("ablate: unknown axis '" + axis + "'");
    if (values.empty()) throw std::invalid_argument("ablate: axis '" + axis + "' has no values");
  }

  std::vector<std::pair<std::string, ExperimentConfig>> variants{{"", base}};
  for (const auto& [axis, values] : axes) {
    std::vector<std::pair<std::string, ExperimentConfig>> next;
    for (const auto& [label, cfg] : variants)
      for (const auto& value : values) {
        ExperimentConfig v = cfg;
        if (axis == "method") {
          v.apply_method(value);
        } else if (axis == "pools") {
          if (value.find('c') == std::string::npos)
            throw std::invalid_argument("ablate: pools must include 'c'");
          v.model.ablation.pool_state = value.find('s') != std::string::npos;
          v.model.ablation.pool_object = value.find('o') != std::string::npos;
          if (!(v.model.ablation.pool_state && v.model.ablation.pool_object))
            v.model.ablation.injection = InjectionMode::none;
        } else if (axis == "injection") {
          v.model.ablation.injection = injection_from_string(value);
        } else if (axis == "fusion") {
          v.model.ablation.fusion = fusion_from_string(value);
        } else if (axis == "rce") {
          v.model.ablation.use_rce = value == "on" || value == "true";
        } else if (axis == "inter") {
          v.model.ablation.use_inter = value == "on" || value == "true";
        } else if (axis == "intra") {
          v.model.ablation.use_intra = value == "on" || value == "true";
        }
        const std::string tag = axis + "=" + value;
        next.push_back({label.empty() ? tag : label + "," + tag, v});
      }
    variants = std::move(next);
  }

  std::vector<ResultBundle> bundles;
  for (auto& [label, cfg] : variants) {
    std::string dir_label = label;
    std::replace(dir_label.begin(), dir_label.end(), ',', '_');
    std::replace(dir_label.begin(), dir_label.end(), '=', '-');
    cfg.output_dir = (fs::path(base.output_dir) / dir_label).string();
    auto bundle = run_experiment(cfg);
    bundle.label = label;
    bundles.push_back(std::move(bundle));
  }
  write_report(bundles, (fs::path(base.output_dir) / "ablation_report.csv").string(),
               (fs::path(base.output_dir) / "ablation_report.txt").string());
  return bundles;
}

void write_report(const std::vector<ResultBundle>& bundles, const std::string& csv_path,
                  const std::string& txt_path) {
  if (bundles.empty()) throw std::invalid_argument("report: empty result bundle");
  for (const auto& b : bundles)
    if (b.runs.empty()) throw std::invalid_argument("report: bundle '" + b.label + "' has no runs");
  write_aggregate_csv(bundles, csv_path);

  std::ofstream out(txt_path);
  if (!out) throw std::runtime_error("cannot write " + txt_path);
  char line[256];
  std::snprintf(line, sizeof(line), "%-28s %5s %16s %16s %16s %16s %16s\n", "label", "runs",
                "AvgAcc", "FTT", "State", "Object", "HM");
  out << line;
  for (const auto& b : bundles) {
    const json a = aggregate_json(b);
    auto cell = [&](const char* key) {
      char buf[40];
      std::snprintf(buf, sizeof(buf), "%.2f+-%.2f", a[key]["mean"].get<double>(),
                    a[key]["std"].get<double>());
      return std::string(buf);
    };
    std::snprintf(line, sizeof(line), "%-28s %5zu %16s %16s %16s %16s %16s\n", b.label.c_str(),
                  b.runs.size(), cell("avg_acc").c_str(), cell("forgetting").c_str(),
                  cell("state").c_str(), cell("object").c_str(), cell("hm").c_str());
    out << line;
  }
}

void export_features(const ExperimentConfig& config, const std::string& checkpoint_path,
                     const std::string& split_name, const std::string& out_csv) {
  if (split_name != "test" && split_name != "train")
    throw std::invalid_argument("export-features: split must be 'test' or 'train'");
  ExperimentConfig cfg = config;
  cfg.validate();
  auto data = prepare_data(cfg);
  auto st = restore_checkpoint<float>(checkpoint_path, data.split.registry);

  std::vector<int> sample_indices;
  for (const auto& task : data.split.sequence.tasks) {
    const auto& src = split_name == "test" ? task.test_samples : task.train_samples;
    sample_indices.insert(sample_indices.end(), src.begin(), src.end());
  }
  auto samples = load_samples<float>(data.split, data.store, sample_indices);

  std::ofstream out(out_csv);
  if (!out) throw std::runtime_error("cannot write " + out_csv);
  const int d = st.encoder->config().embed_dim;
  out << "sample_id,state,object,composition,predicted_composition";
  for (int i = 0; i < d; ++i) out << ",cls_" << i;
  for (int i = 0; i < d; ++i) out << ",comp_" << i;
  out << "\n";

  Tape<float> tape;
  tape.set_recording(false);
  const auto& reg = data.split.registry;
  for (const auto& s : samples) {
    auto fwd = model_forward(tape, s.image, st);
    auto pred = predict(tape, s.image, st, reg, cfg.train.mu);
    out << s.sample_id << "," << reg.state_name(s.state) << "," << reg.object_name(s.object)
        << "," << reg.composition_name(s.composition) << ","
        << reg.composition_name(pred.composition);
    for (std::size_t i = 0; i < fwd.cls_feature.numel(); ++i)
      out << "," << format_double(static_cast<double>(fwd.cls_feature[i]), "%.6g");
    for (std::size_t i = 0; i < fwd.comp_feature.numel(); ++i)
      out << "," << format_double(static_cast<double>(fwd.comp_feature[i]), "%.6g");
    out << "\n";
  }
}

}  // namespace compil
