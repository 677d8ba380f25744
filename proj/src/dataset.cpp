#include "compil/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "compil/rng.hpp"

namespace fs = std::filesystem;

namespace compil {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Hue-distinct colors first: per-token normalization inside the encoder
// discounts pure brightness, so achromatic fills (gray, black, white) are the
// hardest states and sit at the end of the palette.
const std::vector<std::string> kStateNames = {
    "red",  "green",  "blue", "yellow", "magenta", "cyan",  "orange", "purple",
    "teal", "pink",   "lime", "brown",  "navy",    "olive", "gray",   "black"};

const std::vector<std::array<std::uint8_t, 3>> kStateColors = {
    {230, 50, 50},   {50, 190, 70},   {40, 80, 230},   {240, 220, 50},
    {220, 60, 220},  {60, 215, 215},  {240, 140, 40},  {140, 60, 200},
    {40, 140, 140},  {245, 150, 190}, {170, 230, 60},  {140, 90, 40},
    {30, 40, 120},   {130, 130, 40},  {128, 128, 128}, {35, 35, 35}};

const std::vector<std::string> kObjectNames = {
    "circle", "square", "triangle", "diamond", "ring", "cross",
    "bars",   "checker", "saltire", "ell",     "tee",  "frame"};

struct Jitter {
  double cx, cy, r;
};

// The jitter draw happens before any color- or noise-dependent draw so the
// mask is a function of (shape_id, noise_seed) only.
Jitter draw_jitter(std::mt19937_64& rng, int side) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Jitter j;
  j.cx = side * (0.5 + 0.12 * (unit(rng) * 2.0 - 1.0));
  j.cy = side * (0.5 + 0.12 * (unit(rng) * 2.0 - 1.0));
  j.r = side * (0.28 + 0.08 * unit(rng));
  return j;
}

bool inside_shape(int shape_id, const Jitter& j, int x, int y) {
  const double dx = x + 0.5 - j.cx;
  const double dy = y + 0.5 - j.cy;
  const double r = j.r;
  switch (shape_id) {
    case 0:  // circle
      return dx * dx + dy * dy <= r * r;
    case 1:  // square
      return std::abs(dx) <= r * 0.85 && std::abs(dy) <= r * 0.85;
    case 2:  // triangle, apex up
      return dy >= -r && dy <= r * 0.8 &&
             std::abs(dx) <= (dy + r) * 0.55;
    case 3:  // diamond
      return std::abs(dx) + std::abs(dy) <= r * 1.15;
    case 4: {  // ring
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r);
    }
    case 5:  // cross
      return (std::abs(dx) <= r * 0.3 && std::abs(dy) <= r) ||
             (std::abs(dy) <= r * 0.3 && std::abs(dx) <= r);
    case 6:  // horizontal bars
      return std::abs(dx) <= r * 0.9 && std::abs(dy) <= r &&
             (static_cast<int>(std::floor((dy + r) / (r * 0.5))) % 2 == 0);
    case 7:  // checkerboard
      return std::abs(dx) <= r && std::abs(dy) <= r &&
             ((static_cast<int>(std::floor((dx + r) / (r * 0.5))) +
               static_cast<int>(std::floor((dy + r) / (r * 0.5)))) % 2 == 0);
    case 8:  // saltire (X)
      return std::abs(dx) <= r && std::abs(dy) <= r &&
             (std::abs(dx - dy) <= r * 0.4 || std::abs(dx + dy) <= r * 0.4);
    case 9:  // L
      return (dx >= -r && dx <= -r * 0.35 && std::abs(dy) <= r) ||
             (dy >= r * 0.35 && dy <= r && std::abs(dx) <= r);
    case 10:  // T
      return (dy >= -r && dy <= -r * 0.35 && std::abs(dx) <= r) ||
             (std::abs(dx) <= r * 0.3 && dy <= r && dy >= -r);
    case 11: {  // frame
      const bool outer = std::abs(dx) <= r && std::abs(dy) <= r;
      const bool inner = std::abs(dx) <= r * 0.55 && std::abs(dy) <= r * 0.55;
      return outer && !inner;
    }
    default:
      throw std::invalid_argument("render: unknown shape id " + std::to_string(shape_id));
  }
}

}  // namespace

void DatasetSpec::validate() const {
  if (n_states < 1 || n_states > max_synthetic_states())
    throw std::invalid_argument("dataset spec: n_states outside [1," +
                                std::to_string(max_synthetic_states()) + "]");
  if (n_objects < 1 || n_objects > max_synthetic_objects())
    throw std::invalid_argument("dataset spec: n_objects outside [1," +
                                std::to_string(max_synthetic_objects()) + "]");
  if (samples_per_composition < 1)
    throw std::invalid_argument("dataset spec: samples_per_composition must be positive");
  if (image_side < 16)
    throw std::invalid_argument("dataset spec: image side below 16 cannot render shapes");
  if (noise_level < 0 || noise_level > 1)
    throw std::invalid_argument("dataset spec: noise level outside [0,1]");
}

int max_synthetic_states() { return static_cast<int>(kStateNames.size()); }
int max_synthetic_objects() { return static_cast<int>(kObjectNames.size()); }

const std::string& synthetic_state_name(int color_id) {
  return kStateNames.at(static_cast<std::size_t>(color_id));
}
const std::string& synthetic_object_name(int shape_id) {
  return kObjectNames.at(static_cast<std::size_t>(shape_id));
}

std::vector<std::uint8_t> render_mask(int shape_id, std::uint64_t noise_seed, int side) {
  if (side < 16) throw std::invalid_argument("render: image side below 16");
  std::mt19937_64 rng(noise_seed);
  const Jitter j = draw_jitter(rng, side);
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(side) * side, 0);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x)
      mask[static_cast<std::size_t>(y) * side + x] =
          inside_shape(shape_id, j, x, y) ? 1 : 0;
  return mask;
}

std::vector<std::uint8_t> render_sample(int shape_id, int color_id, std::uint64_t noise_seed,
                                        int side, double noise_level) {
  if (side < 16) throw std::invalid_argument("render: image side below 16");
  if (color_id < 0 || color_id >= max_synthetic_states())
    throw std::invalid_argument("render: unknown color id " + std::to_string(color_id));
  std::mt19937_64 rng(noise_seed);
  const Jitter j = draw_jitter(rng, side);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto& fill = kStateColors[static_cast<std::size_t>(color_id)];
  const double bg = 30.0;

  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(side) * side * 3);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const bool in = inside_shape(shape_id, j, x, y);
      const double wobble = 1.0 + noise_level * (unit(rng) * 2.0 - 1.0);
      for (int c = 0; c < 3; ++c) {
        const double base = in ? static_cast<double>(fill[static_cast<std::size_t>(c)]) : bg;
        const double v = base * wobble + noise_level * 40.0 * (unit(rng) * 2.0 - 1.0);
        rgb[(static_cast<std::size_t>(y) * side + x) * 3 + c] =
            static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
      }
    }
  return rgb;
}

// ---------------------------------------------------------------------------
// metadata io
// ---------------------------------------------------------------------------

std::vector<MetadataRow> read_metadata_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open metadata file " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": empty metadata file");
  auto header = split_csv_line(trim(line));
  if (header.size() < 3 || trim(header[0]) != "sample_id" || trim(header[1]) != "state" ||
      trim(header[2]) != "object")
    throw std::runtime_error(path + ": expected header sample_id,state,object[,pixel_path]");
  std::vector<MetadataRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty()) continue;
    auto fields = split_csv_line(t);
    if (fields.size() < 3)
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": expected 3+ fields");
    MetadataRow row;
    row.sample_id = trim(fields[0]);
    row.state = trim(fields[1]);
    row.object = trim(fields[2]);
    if (fields.size() > 3) row.pixel_path = trim(fields[3]);
    if (row.sample_id.empty() || row.state.empty() || row.object.empty())
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": empty field");
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_metadata_csv(const std::string& path, const std::vector<MetadataRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write metadata file " + path);
  out << "sample_id,state,object,pixel_path\n";
  for (const auto& r : rows)
    out << r.sample_id << "," << r.state << "," << r.object << "," << r.pixel_path << "\n";
  if (!out) throw std::runtime_error("failed writing " + path);
}

// ---------------------------------------------------------------------------
// pixel store
// ---------------------------------------------------------------------------

PixelStore PixelStore::create(const std::string& dir) {
  fs::create_directories(dir);
  PixelStore store;
  store.dir_ = dir;
  return store;
}

PixelStore PixelStore::open(const std::string& dir) {
  PixelStore store;
  store.dir_ = dir;
  const std::string manifest = (fs::path(dir) / "manifest.csv").string();
  std::ifstream in(manifest);
  if (!in) throw std::runtime_error("cannot open pixel store manifest " + manifest);
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    const std::string t = trim(line);
    if (t.empty()) continue;
    auto fields = split_csv_line(t);
    if (fields.size() != 4) throw std::runtime_error(manifest + ": malformed row '" + t + "'");
    Entry e;
    e.file = trim(fields[1]);
    e.width = std::stoi(fields[2]);
    e.height = std::stoi(fields[3]);
    store.index_[trim(fields[0])] = e;
  }
  return store;
}

void PixelStore::put(const std::string& sample_id, const std::vector<std::uint8_t>& rgb,
                     int width, int height) {
  if (rgb.size() != static_cast<std::size_t>(width) * height * 3)
    throw std::invalid_argument("pixel store: byte count does not match dimensions");
  Entry e;
  e.file = sample_id + ".rgb";
  e.width = width;
  e.height = height;
  std::ofstream out(fs::path(dir_) / e.file, std::ios::binary);
  if (!out) throw std::runtime_error("pixel store: cannot write " + e.file);
  out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  index_[sample_id] = e;
}

std::vector<std::uint8_t> PixelStore::get(const std::string& sample_id, int& width,
                                          int& height) const {
  auto it = index_.find(sample_id);
  if (it == index_.end())
    throw std::runtime_error("pixel store: unknown sample '" + sample_id + "'");
  width = it->second.width;
  height = it->second.height;
  std::ifstream in(fs::path(dir_) / it->second.file, std::ios::binary);
  if (!in) throw std::runtime_error("pixel store: cannot read " + it->second.file);
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(width) * height * 3);
  in.read(reinterpret_cast<char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!in) throw std::runtime_error("pixel store: truncated file " + it->second.file);
  return rgb;
}

void PixelStore::write_manifest() const {
  const std::string manifest = (fs::path(dir_) / "manifest.csv").string();
  std::ofstream out(manifest);
  if (!out) throw std::runtime_error("cannot write " + manifest);
  out << "sample_id,file,width,height\n";
  for (const auto& [id, e] : index_)
    out << id << "," << e.file << "," << e.width << "," << e.height << "\n";
}

// ---------------------------------------------------------------------------
// synthesis
// ---------------------------------------------------------------------------

std::vector<MetadataRow> synthesize(const DatasetSpec& spec, PixelStore& store) {
  spec.validate();
  std::vector<MetadataRow> rows;
  std::uint64_t sample_index = 0;
  for (int s = 0; s < spec.n_states; ++s)
    for (int o = 0; o < spec.n_objects; ++o)
      for (int i = 0; i < spec.samples_per_composition; ++i, ++sample_index) {
        MetadataRow row;
        row.state = kStateNames[static_cast<std::size_t>(s)];
        row.object = kObjectNames[static_cast<std::size_t>(o)];
        char suffix[16];
        std::snprintf(suffix, sizeof(suffix), "%05llu",
                      static_cast<unsigned long long>(sample_index));
        row.sample_id = row.state + "_" + row.object + "_" + suffix;
        const std::uint64_t noise_seed = derive_seed(spec.seed, sample_index);
        auto rgb = render_sample(o, s, noise_seed, spec.image_side, spec.noise_level);
        store.put(row.sample_id, rgb, spec.image_side, spec.image_side);
        row.pixel_path = row.sample_id + ".rgb";
        rows.push_back(std::move(row));
      }
  store.write_manifest();
  return rows;
}

// ---------------------------------------------------------------------------
// protocol construction
// ---------------------------------------------------------------------------

SplitPolicy split_policy_from_string(const std::string& s) {
  if (s == "random-partition" || s == "random_partition") return SplitPolicy::random_partition;
  if (s == "count-sorted" || s == "count_sorted") return SplitPolicy::count_sorted;
  throw std::invalid_argument("unknown split policy '" + s + "'");
}

std::string to_string(SplitPolicy p) {
  return p == SplitPolicy::random_partition ? "random-partition" : "count-sorted";
}

SplitResult build_splits(const std::vector<MetadataRow>& metadata, const SplitOptions& opt) {
  if (opt.top_k < 1) throw std::invalid_argument("build_splits: top_k must be positive");
  if (opt.n_tasks < 1) throw std::invalid_argument("build_splits: n_tasks must be positive");
  if (opt.n_tasks > opt.top_k)
    throw std::invalid_argument("build_splits: more tasks than compositions");
  if (!(opt.train_fraction > 0.0) || !(opt.train_fraction < 1.0))
    throw std::invalid_argument("build_splits: train_fraction must lie in (0,1)");

  // count images per composition
  std::map<std::string, std::pair<std::pair<std::string, std::string>, int>> counts;
  for (const auto& row : metadata) {
    auto& slot = counts[LabelRegistry::make_composition_name(row.state, row.object)];
    slot.first = {row.state, row.object};
    slot.second += 1;
  }
  if (static_cast<int>(counts.size()) < opt.top_k)
    throw std::invalid_argument("build_splits: only " + std::to_string(counts.size()) +
                                " distinct compositions, need top_k=" +
                                std::to_string(opt.top_k));

  // rank by descending count, ties by composition name (map order is by name)
  struct Ranked {
    std::string name;
    std::pair<std::string, std::string> pair;
    int count;
  };
  std::vector<Ranked> ranked;
  for (const auto& [name, v] : counts) ranked.push_back({name, v.first, v.second});
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Ranked& a, const Ranked& b) { return a.count > b.count; });
  ranked.resize(static_cast<std::size_t>(opt.top_k));
  for (const auto& r : ranked)
    if (r.count == 0)
      throw std::invalid_argument("build_splits: composition '" + r.name + "' has no samples");

  std::vector<std::pair<std::string, std::string>> kept_pairs;
  for (const auto& r : ranked) kept_pairs.push_back(r.pair);

  SplitResult result;
  result.registry = LabelRegistry::from_pairs(kept_pairs);

  // samples of kept compositions, in metadata order
  std::vector<std::vector<int>> samples_by_comp(static_cast<std::size_t>(opt.top_k));
  for (const auto& row : metadata) {
    const int c = result.registry.find_composition(row.state, row.object);
    if (c < 0) continue;
    SampleRef ref;
    ref.sample_id = row.sample_id;
    ref.composition = c;
    ref.pixel_path = row.pixel_path;
    samples_by_comp[static_cast<std::size_t>(c)].push_back(
        static_cast<int>(result.samples.size()));
    result.samples.push_back(std::move(ref));
  }

  // partition composition indices into tasks
  std::vector<int> order(static_cast<std::size_t>(opt.top_k));
  std::iota(order.begin(), order.end(), 0);
  if (opt.policy == SplitPolicy::random_partition) {
    std::mt19937_64 rng(derive_seed(opt.seed, 0x5717));
    std::shuffle(order.begin(), order.end(), rng);
  }
  const int base = opt.top_k / opt.n_tasks;
  const int extra = opt.top_k % opt.n_tasks;  // earliest tasks take one extra
  result.sequence.tasks.resize(static_cast<std::size_t>(opt.n_tasks));
  std::size_t cursor = 0;
  for (int t = 0; t < opt.n_tasks; ++t) {
    const int take = base + (t < extra ? 1 : 0);
    auto& task = result.sequence.tasks[static_cast<std::size_t>(t)];
    for (int i = 0; i < take; ++i) task.compositions.push_back(order[cursor++]);
  }

  // per-composition train/test split, seeded per composition
  for (int c = 0; c < opt.top_k; ++c) {
    auto ids = samples_by_comp[static_cast<std::size_t>(c)];
    std::mt19937_64 rng(derive_seed(opt.seed, 0x7e57, static_cast<std::uint64_t>(c)));
    std::shuffle(ids.begin(), ids.end(), rng);
    const int n = static_cast<int>(ids.size());
    const int n_train = std::max(1, static_cast<int>(std::floor(opt.train_fraction * n)));
    int owner = -1;
    for (int t = 0; t < opt.n_tasks; ++t) {
      const auto& comps = result.sequence.tasks[static_cast<std::size_t>(t)].compositions;
      if (std::find(comps.begin(), comps.end(), c) != comps.end()) owner = t;
    }
    auto& task = result.sequence.tasks[static_cast<std::size_t>(owner)];
    for (int i = 0; i < n; ++i) {
      if (i < n_train)
        task.train_samples.push_back(ids[static_cast<std::size_t>(i)]);
      else
        task.test_samples.push_back(ids[static_cast<std::size_t>(i)]);
    }
  }
  for (auto& task : result.sequence.tasks) {
    std::sort(task.train_samples.begin(), task.train_samples.end());
    std::sort(task.test_samples.begin(), task.test_samples.end());
  }
  return result;
}

int ProtocolReport::n_recurring_primitives() const {
  int n = 0;
  for (int c : state_task_counts) n += c > 1 ? 1 : 0;
  for (int c : object_task_counts) n += c > 1 ? 1 : 0;
  return n;
}

ProtocolReport validate_protocol(const TaskSequence& seq, const LabelRegistry& registry) {
  ProtocolReport report;
  std::vector<int> owner(static_cast<std::size_t>(registry.n_compositions()), -1);
  for (int t = 0; t < seq.n_tasks(); ++t)
    for (int c : seq.tasks[static_cast<std::size_t>(t)].compositions) {
      if (c < 0 || c >= registry.n_compositions()) {
        report.ok = false;
        report.violations.push_back("task " + std::to_string(t) +
                                    " references unknown composition index " +
                                    std::to_string(c));
        continue;
      }
      if (owner[static_cast<std::size_t>(c)] >= 0) {
        report.ok = false;
        report.violations.push_back(
            "composition '" + registry.composition_name(c) + "' appears in task " +
            std::to_string(owner[static_cast<std::size_t>(c)]) + " and task " +
            std::to_string(t));
      } else {
        owner[static_cast<std::size_t>(c)] = t;
      }
    }
  for (int c = 0; c < registry.n_compositions(); ++c)
    if (owner[static_cast<std::size_t>(c)] < 0) {
      report.ok = false;
      report.violations.push_back("composition '" + registry.composition_name(c) +
                                  "' missing from every task");
    }

  report.state_task_counts.assign(static_cast<std::size_t>(registry.n_states()), 0);
  report.object_task_counts.assign(static_cast<std::size_t>(registry.n_objects()), 0);
  for (const auto& task : seq.tasks) {
    std::set<int> states, objects;
    for (int c : task.compositions) {
      if (c < 0 || c >= registry.n_compositions()) continue;
      states.insert(registry.composition(c).state);
      objects.insert(registry.composition(c).object);
    }
    for (int s : states) report.state_task_counts[static_cast<std::size_t>(s)] += 1;
    for (int o : objects) report.object_task_counts[static_cast<std::size_t>(o)] += 1;
  }
  return report;
}

void write_task_sequence_json(const std::string& path, const TaskSequence& seq,
                              const LabelRegistry& registry) {
  nlohmann::json doc;
  doc["n_tasks"] = seq.n_tasks();
  doc["tasks"] = nlohmann::json::array();
  for (int t = 0; t < seq.n_tasks(); ++t) {
    const auto& task = seq.tasks[static_cast<std::size_t>(t)];
    nlohmann::json jt;
    jt["index"] = t;
    jt["compositions"] = nlohmann::json::array();
    for (int c : task.compositions) jt["compositions"].push_back(registry.composition_name(c));
    jt["n_train"] = task.train_samples.size();
    jt["n_test"] = task.test_samples.size();
    doc["tasks"].push_back(jt);
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << doc.dump(2) << "\n";
}

}  // namespace compil
