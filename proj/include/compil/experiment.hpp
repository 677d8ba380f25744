#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "compil/backbone.hpp"
#include "compil/dataset.hpp"
#include "compil/losses.hpp"
#include "compil/model.hpp"
#include "compil/trainer.hpp"

namespace compil {

// Full experiment description: data source, protocol split, backbone, model,
// training, ablation switches, seeds, output directory. Serializes to/from
// the JSON config file; command-line overrides are applied on top.
struct ExperimentConfig {
  std::string method = "full";  // full | sim | single_pool

  std::string data_mode = "synthetic";  // synthetic | metadata
  DatasetSpec dataset;
  std::string metadata_path;  // metadata mode only
  std::string pixel_root;     // metadata mode only

  SplitOptions split;
  BackboneConfig backbone;
  ModelConfig model;
  TrainConfig train;
  DDConfig dd;

  std::vector<std::uint64_t> seeds{0};
  std::string output_dir = "runs/out";

  static ExperimentConfig preset(const std::string& name);
  static std::vector<std::string> preset_names();

  // Applies a named method's ablation switches (full / sim / single_pool).
  void apply_method(const std::string& name);

  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::string& path);
  void save(const std::string& path) const;

  // "key.path=value" override onto the JSON form, with field-level errors.
  static nlohmann::json apply_override(nlohmann::json doc, const std::string& assignment);
};

struct RunSummary {
  std::uint64_t seed = 0;
  // percent scale, matching the usual reporting convention
  double avg_acc = 0, forgetting = 0, state_acc = 0, object_acc = 0, hm = 0;
};

struct ResultBundle {
  std::string label;  // method or ablation-variant label
  std::vector<RunSummary> runs;
};

// Builds (or opens) the dataset, constructs the protocol split, then runs the
// full incremental sequence once per seed, writing accuracy matrices, a
// summary, a train log, and a final checkpoint under output_dir/seed_<s>/,
// plus an aggregate table across seeds.
ResultBundle run_experiment(const ExperimentConfig& cfg);

// Runs one experiment per variant (cartesian product over the axes) under
// output_dir/<variant-label>/ and writes a combined report.
// Axis names: pools, injection, fusion, rce, inter, intra, method.
std::vector<ResultBundle> run_ablation(const ExperimentConfig& base,
                                       const std::map<std::string, std::vector<std::string>>& axes);

// Mean +- sample std table over bundles; writes CSV and an aligned text table.
void write_report(const std::vector<ResultBundle>& bundles, const std::string& csv_path,
                  const std::string& txt_path);

// One row per sample of the chosen split ("test" or "train"): id, true
// labels, predicted composition, then the class-token and composition-block
// feature vectors (width 2D).
void export_features(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                     const std::string& split_name, const std::string& out_csv);

}  // namespace compil
