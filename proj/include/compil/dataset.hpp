#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "compil/registry.hpp"
#include "compil/tensor.hpp"

namespace compil {

// One metadata line: sample_id, state, object, optional pixel path.
struct MetadataRow {
  std::string sample_id;
  std::string state;
  std::string object;
  std::string pixel_path;
};

std::vector<MetadataRow> read_metadata_csv(const std::string& path);
void write_metadata_csv(const std::string& path, const std::vector<MetadataRow>& rows);

// Synthetic dataset recipe: states render as fill colors, objects as shape
// masks. Stands in for real image datasets while keeping the state/object
// factor structure exact (labels are recoverable from the recipe).
struct DatasetSpec {
  int n_states = 6;
  int n_objects = 5;
  int samples_per_composition = 40;
  int image_side = 32;
  double noise_level = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

int max_synthetic_states();
int max_synthetic_objects();
const std::string& synthetic_state_name(int color_id);
const std::string& synthetic_object_name(int shape_id);

// Deterministic renderer for one sample; everything derives from
// (shape_id, color_id, noise_seed). Pixels are 8-bit RGB, row-major HWC.
std::vector<std::uint8_t> render_sample(int shape_id, int color_id, std::uint64_t noise_seed,
                                        int side, double noise_level);
// The object mask alone (1 inside the shape); shares the jitter stream with
// render_sample, so equal (shape_id, noise_seed) means an identical mask.
std::vector<std::uint8_t> render_mask(int shape_id, std::uint64_t noise_seed, int side);

// Directory of raw RGB files plus a manifest (sample id -> file, width, height).
class PixelStore {
 public:
  static PixelStore create(const std::string& dir);
  static PixelStore open(const std::string& dir);

  void put(const std::string& sample_id, const std::vector<std::uint8_t>& rgb, int width,
           int height);
  std::vector<std::uint8_t> get(const std::string& sample_id, int& width, int& height) const;
  bool contains(const std::string& sample_id) const { return index_.count(sample_id) != 0; }
  std::size_t size() const { return index_.size(); }
  void write_manifest() const;
  const std::string& dir() const { return dir_; }

 private:
  struct Entry {
    std::string file;
    int width = 0;
    int height = 0;
  };
  std::string dir_;
  std::map<std::string, Entry> index_;
};

// Renders every composition of the spec into the pixel store and returns the
// metadata table. Deterministic per (spec.seed, sample index).
std::vector<MetadataRow> synthesize(const DatasetSpec& spec, PixelStore& store);

// Raw RGB bytes -> [C, side, side] tensor in [0, 1].
template <typename T>
Tensor<T> image_from_rgb(const std::vector<std::uint8_t>& rgb, int width, int height) {
  Tensor<T> out = Tensor<T>::zeros({3, height, width});
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c)
        out[(static_cast<std::size_t>(c) * height + y) * width + x] =
            static_cast<T>(rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]) / T(255);
  return out;
}

// ---------------------------------------------------------------------------
// composition-incremental protocol
// ---------------------------------------------------------------------------

enum class SplitPolicy { random_partition, count_sorted };

SplitPolicy split_policy_from_string(const std::string& s);
std::string to_string(SplitPolicy p);

struct SplitOptions {
  int top_k = 25;
  int n_tasks = 5;
  SplitPolicy policy = SplitPolicy::random_partition;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
};

struct SampleRef {
  std::string sample_id;
  int composition = -1;  // registry index
  std::string pixel_path;
};

struct Task {
  std::vector<int> compositions;   // registry indices, disjoint across tasks
  std::vector<int> train_samples;  // indices into SplitResult::samples
  std::vector<int> test_samples;
};

struct TaskSequence {
  std::vector<Task> tasks;
  int n_tasks() const { return static_cast<int>(tasks.size()); }
};

struct SplitResult {
  LabelRegistry registry;          // over the kept compositions only
  std::vector<SampleRef> samples;  // samples of kept compositions
  TaskSequence sequence;
};

// Ranks compositions by descending image count (ties by name), keeps the top
// top_k, partitions them into n_tasks disjoint tasks per the policy, and
// splits each composition's samples into train/test.
SplitResult build_splits(const std::vector<MetadataRow>& metadata, const SplitOptions& options);

struct ProtocolReport {
  bool ok = true;
  std::vector<std::string> violations;
  std::vector<int> state_task_counts;   // tasks touching each state
  std::vector<int> object_task_counts;  // tasks touching each object
  int n_recurring_primitives() const;
};

// Asserts composition disjointness and full coverage; reports how often each
// primitive recurs across tasks (recurrence is permitted, not required).
ProtocolReport validate_protocol(const TaskSequence& seq, const LabelRegistry& registry);

// Structured-text export listing tasks and composition names.
void write_task_sequence_json(const std::string& path, const TaskSequence& seq,
                              const LabelRegistry& registry);

}  // namespace compil
