#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "compil/dataset.hpp"
#include "compil/losses.hpp"
#include "compil/model.hpp"
#include "compil/registry.hpp"

namespace compil {

struct TrainConfig {
  int epochs = 5;
  int batch_size = 16;
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  LossWeights weights;
  double mu = 0.5;  // inference-time primitive fusion weight
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1 || batch_size < 1)
      throw std::invalid_argument("train config: epochs and batch_size must be positive");
    if (!(learning_rate > 0)) throw std::invalid_argument("train config: bad learning rate");
    if (mu < 0) throw std::invalid_argument("train config: mu must be non-negative");
    weights.validate();
  }
};

template <typename T>
struct LoadedSample {
  std::string sample_id;
  Tensor<T> image;
  int composition = -1;
  int state = -1;
  int object = -1;
};

// Only the current task's data ever reaches train_task; the interface is what
// enforces the rehearsal-free contract.
template <typename T>
struct TaskData {
  int task_index = -1;
  std::vector<int> compositions;
  std::vector<LoadedSample<T>> train;
  std::vector<LoadedSample<T>> test;
};

template <typename T>
std::vector<LoadedSample<T>> load_samples(const SplitResult& split, const PixelStore& store,
                                          const std::vector<int>& sample_indices) {
  std::vector<LoadedSample<T>> out;
  out.reserve(sample_indices.size());
  for (int idx : sample_indices) {
    const auto& ref = split.samples.at(static_cast<std::size_t>(idx));
    LoadedSample<T> s;
    s.sample_id = ref.sample_id;
    s.composition = ref.composition;
    const auto c = split.registry.composition(ref.composition);
    s.state = c.state;
    s.object = c.object;
    int w = 0, h = 0;
    auto rgb = store.get(ref.sample_id, w, h);
    s.image = image_from_rgb<T>(rgb, w, h);
    out.push_back(std::move(s));
  }
  return out;
}

template <typename T>
TaskData<T> load_task_data(const SplitResult& split, const PixelStore& store, int task_index) {
  const auto& task = split.sequence.tasks.at(static_cast<std::size_t>(task_index));
  TaskData<T> data;
  data.task_index = task_index;
  data.compositions = task.compositions;
  data.train = load_samples<T>(split, store, task.train_samples);
  data.test = load_samples<T>(split, store, task.test_samples);
  return data;
}

struct EpochLog {
  int epoch = 0;
  double loss = 0;
  double sce = 0, inter = 0, intra = 0, surrogate = 0;
  double wall_seconds = 0;
};

struct TaskLog {
  int task = 0;
  std::vector<EpochLog> epochs;
};

namespace detail {

// Sum of dd terms over the pools that exist: pairwise across pools for the
// inter term, self-pairs with diagonal suppression for the intra term.
template <typename T>
std::pair<std::optional<Tensor<T>>, std::optional<Tensor<T>>> pool_regularizers(
    Tape<T>& tape, ModelState<T>& st, const DDConfig& dd_cfg, bool want_inter, bool want_intra) {
  std::vector<const PromptPool<T>*> pools{&st.pool_c};
  if (st.pool_s) pools.push_back(&*st.pool_s);
  if (st.pool_o) pools.push_back(&*st.pool_o);

  std::optional<Tensor<T>> inter, intra;
  if (want_inter && pools.size() >= 2) {
    Tensor<T> acc = Tensor<T>::scalar(T(0));
    for (std::size_t i = 0; i < pools.size(); ++i)
      for (std::size_t j = i + 1; j < pools.size(); ++j)
        acc = add(tape, acc, dd_loss(tape, pools[i]->prompts, pools[j]->prompts, dd_cfg, false));
    inter = acc;
  }
  if (want_intra) {
    Tensor<T> acc = Tensor<T>::scalar(T(0));
    for (const auto* pool : pools)
      acc = add(tape, acc, dd_loss(tape, pool->prompts, pool->prompts, dd_cfg, true));
    intra = acc;
  }
  return {inter, intra};
}

}  // namespace detail

// One sample's loss stack given a shared forward result and the (shared)
// pool regularizers for the batch.
template <typename T>
Tensor<T> sample_loss(Tape<T>& tape, ModelState<T>& st, const ForwardResult<T>& fwd,
                      const LoadedSample<T>& sample, const std::vector<std::uint8_t>& task_mask,
                      const std::optional<Tensor<T>>& inter, const std::optional<Tensor<T>>& intra,
                      const LossWeights& weights, EpochLog* accum = nullptr) {
  LossWeights w = weights;
  if (!st.cfg.ablation.use_rce) w.alpha = 0.0;
  LossParts<T> parts;
  parts.inter = inter;
  parts.intra = intra;
  parts.surrogate = surrogate_loss(tape, fwd.surrogate);
  parts.sce_c = sce_loss(tape, mask_logits(tape, fwd.logits_c, task_mask), sample.composition, w);
  if (st.pool_s) parts.sce_s = sce_loss(tape, fwd.logits_s, sample.state, w);
  if (st.pool_o) parts.sce_o = sce_loss(tape, fwd.logits_o, sample.object, w);
  if (accum) {
    accum->surrogate += static_cast<double>(parts.surrogate->value());
    accum->sce += static_cast<double>(parts.sce_c->value()) +
                  w.beta * ((parts.sce_s ? static_cast<double>(parts.sce_s->value()) : 0.0) +
                            (parts.sce_o ? static_cast<double>(parts.sce_o->value()) : 0.0));
  }
  return total_loss(tape, parts, w);
}

// Optimizes the total loss over the task's training split with Adam.
// Composition logits outside the current task are masked to -inf; primitive
// heads train unmasked (primitives recur). The backbone is untouched.
template <typename T>
TaskLog train_task(ModelState<T>& st, const TaskData<T>& task, const TrainConfig& cfg,
                   const DDConfig& dd_cfg = DDConfig{}) {
  cfg.validate();
  if (task.train.empty()) throw std::invalid_argument("train_task: empty task");
  for (int c : task.compositions) {
    if (c < 0 || c >= st.n_compositions)
      throw std::invalid_argument("train_task: composition index out of range");
    if (st.seen_compositions[static_cast<std::size_t>(c)])
      throw std::invalid_argument("train_task: composition " + std::to_string(c) +
                                  " was already trained (protocol violation)");
  }

  std::vector<std::uint8_t> task_mask(static_cast<std::size_t>(st.n_compositions), 0);
  for (int c : task.compositions) task_mask[static_cast<std::size_t>(c)] = 1;
  for (const auto& s : task.train)
    if (!task_mask[static_cast<std::size_t>(s.composition)])
      throw std::invalid_argument("train_task: sample labeled outside the task");

  st.reset_optimizer();
  auto params = st.trainable_params();
  const auto& ab = st.cfg.ablation;

  TaskLog log;
  log.task = task.task_index;
  std::mt19937_64 rng(derive_seed(cfg.seed, 0x7A5F, static_cast<std::uint64_t>(task.task_index)));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<int> order(task.train.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    EpochLog elog;
    elog.epoch = epoch;
    double loss_sum = 0;
    int n_batches = 0;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      Tape<T> tape;
      auto [inter, intra] = detail::pool_regularizers(tape, st, dd_cfg, ab.use_inter,
                                                      ab.use_intra);
      std::vector<Tensor<T>> sample_losses;
      for (std::size_t i = start; i < stop; ++i) {
        const auto& sample = task.train[static_cast<std::size_t>(order[i])];
        auto fwd = model_forward(tape, sample.image, st);
        sample_losses.push_back(
            sample_loss(tape, st, fwd, sample, task_mask, inter, intra, cfg.weights, &elog));
      }
      Tensor<T> batch_loss = sample_losses.front();
      for (std::size_t i = 1; i < sample_losses.size(); ++i)
        batch_loss = add(tape, batch_loss, sample_losses[i]);
      batch_loss = mul_scalar(tape, batch_loss, T(1) / static_cast<T>(sample_losses.size()));

      const double loss_val = static_cast<double>(batch_loss.value());
      if (!std::isfinite(loss_val))
        throw std::runtime_error("train_task: non-finite loss at task " +
                                 std::to_string(task.task_index) + " epoch " +
                                 std::to_string(epoch) + " batch " +
                                 std::to_string(n_batches));
      st.zero_grads();
      tape.backward(batch_loss);

      // Adam step
      st.adam_step += 1;
      const T lr = static_cast<T>(cfg.learning_rate);
      const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
      const T eps = static_cast<T>(cfg.adam_eps);
      const T bc1 = T(1) - static_cast<T>(std::pow(cfg.beta1, st.adam_step));
      const T bc2 = T(1) - static_cast<T>(std::pow(cfg.beta2, st.adam_step));
      for (std::size_t p = 0; p < params.size(); ++p) {
        auto& tensor = params[p].tensor;
        if (!tensor.has_grad()) continue;
        auto g = tensor.grad_view();
        auto& m = st.adam_m[p];
        auto& v = st.adam_v[p];
        auto vals = tensor.values();
        for (std::size_t i = 0; i < vals.size(); ++i) {
          m[i] = b1 * m[i] + (T(1) - b1) * g[i];
          v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
          vals[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
        }
      }
      st.zero_grads();

      loss_sum += loss_val;
      n_batches += 1;
      if (inter) elog.inter += static_cast<double>(inter->value());
      if (intra) elog.intra += static_cast<double>(intra->value());
    }

    elog.loss = loss_sum / n_batches;
    elog.inter /= n_batches;
    elog.intra /= n_batches;
    elog.sce /= static_cast<double>(order.size());
    elog.surrogate /= static_cast<double>(order.size());
    elog.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.epochs.push_back(elog);
  }

  for (int c : task.compositions) st.seen_compositions[static_cast<std::size_t>(c)] = 1;
  st.tasks_trained += 1;
  return log;
}

// ---------------------------------------------------------------------------
// inference
// ---------------------------------------------------------------------------

// p_final(c|x) = p(c|x) + mu * (p(s_c|x) + p(o_c|x)) over the seen classes.
// Pure so the hand-evaluated probability example can drive it directly.
inline std::vector<double> fuse_probabilities(const std::vector<double>& comp_probs,
                                              const std::vector<double>& state_probs,
                                              const std::vector<double>& object_probs,
                                              const LabelRegistry& registry,
                                              const std::vector<std::uint8_t>& seen, double mu) {
  if (mu < 0) throw std::invalid_argument("fuse_probabilities: mu must be non-negative");
  if (comp_probs.size() != static_cast<std::size_t>(registry.n_compositions()))
    throw std::invalid_argument("fuse_probabilities: composition width mismatch");
  std::vector<double> out(comp_probs.size(), -std::numeric_limits<double>::infinity());
  for (std::size_t c = 0; c < comp_probs.size(); ++c) {
    if (!seen[c]) continue;
    const auto comp = registry.composition(static_cast<int>(c));
    out[c] = comp_probs[c] +
             mu * (state_probs[static_cast<std::size_t>(comp.state)] +
                   object_probs[static_cast<std::size_t>(comp.object)]);
  }
  return out;
}

struct Prediction {
  int composition = -1;
  int state = -1;
  int object = -1;
  std::vector<double> final_scores;  // -inf on unseen compositions
};

// Composition probabilities are softmaxed over classes seen so far; primitive
// probabilities come from their heads over the full vocabularies, or are
// marginalized from the composition posterior when a pool is ablated away.
template <typename T>
Prediction predict(Tape<T>& tape, const Tensor<T>& image, ModelState<T>& st,
                   const LabelRegistry& registry, double mu) {
  if (mu < 0) throw std::invalid_argument("predict: mu must be non-negative");
  if (st.tasks_trained == 0) throw std::invalid_argument("predict: no task trained yet");
  if (registry.digest() != st.registry_digest)
    throw std::invalid_argument("predict: registry does not match the model");
  NoGradGuard<T> guard(tape);
  auto fwd = model_forward(tape, image, st);

  auto to_probs = [&](const Tensor<T>& logits) {
    auto p = softmax_rows(tape, logits);
    return std::vector<double>(p.values().begin(), p.values().end());
  };
  auto comp_probs = to_probs(mask_logits(tape, fwd.logits_c, st.seen_compositions));

  std::vector<double> state_probs, object_probs;
  if (st.pool_s) {
    state_probs = to_probs(fwd.logits_s);
  } else {
    state_probs.assign(static_cast<std::size_t>(registry.n_states()), 0.0);
    for (int c = 0; c < registry.n_compositions(); ++c)
      if (st.seen_compositions[static_cast<std::size_t>(c)])
        state_probs[static_cast<std::size_t>(registry.composition(c).state)] +=
            comp_probs[static_cast<std::size_t>(c)];
  }
  if (st.pool_o) {
    object_probs = to_probs(fwd.logits_o);
  } else {
    object_probs.assign(static_cast<std::size_t>(registry.n_objects()), 0.0);
    for (int c = 0; c < registry.n_compositions(); ++c)
      if (st.seen_compositions[static_cast<std::size_t>(c)])
        object_probs[static_cast<std::size_t>(registry.composition(c).object)] +=
            comp_probs[static_cast<std::size_t>(c)];
  }

  Prediction pred;
  pred.final_scores =
      fuse_probabilities(comp_probs, state_probs, object_probs, registry,
                         st.seen_compositions, mu);
  pred.composition = static_cast<int>(
      std::max_element(pred.final_scores.begin(), pred.final_scores.end()) -
      pred.final_scores.begin());
  pred.state = static_cast<int>(std::max_element(state_probs.begin(), state_probs.end()) -
                                state_probs.begin());
  pred.object = static_cast<int>(std::max_element(object_probs.begin(), object_probs.end()) -
                                 object_probs.begin());
  return pred;
}

struct EvalCounts {
  int n = 0;
  int comp_correct = 0;
  int state_correct = 0;
  int object_correct = 0;

  double comp_acc() const { return n ? static_cast<double>(comp_correct) / n : 0.0; }
  double state_acc() const { return n ? static_cast<double>(state_correct) / n : 0.0; }
  double object_acc() const { return n ? static_cast<double>(object_correct) / n : 0.0; }
};

template <typename T>
EvalCounts evaluate_samples(ModelState<T>& st, const std::vector<LoadedSample<T>>& samples,
                            const LabelRegistry& registry, double mu) {
  EvalCounts counts;
  Tape<T> tape;
  tape.set_recording(false);
  for (const auto& s : samples) {
    auto pred = predict(tape, s.image, st, registry, mu);
    counts.n += 1;
    counts.comp_correct += pred.composition == s.composition ? 1 : 0;
    counts.state_correct += pred.state == s.state ? 1 : 0;
    counts.object_correct += pred.object == s.object ? 1 : 0;
  }
  return counts;
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

namespace detail {

inline void put_bytes(std::ofstream& out, const void* p, std::size_t n) {
  out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void get_bytes(std::ifstream& in, void* p, std::size_t n, const char* what) {
  in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!in) throw std::runtime_error(std::string("checkpoint: truncated while reading ") + what);
}

}  // namespace detail

inline constexpr std::uint32_t checkpoint_version = 1;

// Byte-exact snapshot of everything trainable plus the optimizer moments and
// task cursor. The frozen backbone is reconstructed from its config and seed.
template <typename T>
void save_checkpoint(ModelState<T>& st, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  out.write("CPK1", 4);
  const std::uint32_t version = checkpoint_version;
  const std::uint8_t dtype = sizeof(T);
  detail::put_bytes(out, &version, 4);
  detail::put_bytes(out, &dtype, 1);
  detail::put_bytes(out, &st.registry_digest, 8);

  const auto& mc = st.cfg;
  const std::int32_t mc_fields[3] = {mc.pool_size, mc.prompt_len, mc.top_k};
  detail::put_bytes(out, mc_fields, sizeof(mc_fields));
  detail::put_bytes(out, &mc.eta_init, 8);
  const std::uint8_t ab_fields[7] = {
      mc.ablation.pool_state, mc.ablation.pool_object,
      static_cast<std::uint8_t>(mc.ablation.injection),
      static_cast<std::uint8_t>(mc.ablation.fusion),
      mc.ablation.use_rce, mc.ablation.use_inter, mc.ablation.use_intra};
  detail::put_bytes(out, ab_fields, sizeof(ab_fields));
  detail::put_bytes(out, &mc.seed, 8);

  const auto& bc = st.encoder->config();
  const std::int32_t bc_fields[8] = {bc.image_side, bc.patch_side, bc.channels, bc.embed_dim,
                                     bc.n_layers, bc.n_heads, bc.max_prompt_tokens, 0};
  detail::put_bytes(out, bc_fields, sizeof(bc_fields));
  detail::put_bytes(out, &bc.mlp_ratio, 8);
  detail::put_bytes(out, &bc.seed, 8);

  const std::int32_t dims[3] = {st.n_states, st.n_objects, st.n_compositions};
  detail::put_bytes(out, dims, sizeof(dims));
  const std::int32_t tasks = st.tasks_trained;
  detail::put_bytes(out, &tasks, 4);
  detail::put_bytes(out, st.seen_compositions.data(), st.seen_compositions.size());
  const std::int64_t astep = st.adam_step;
  detail::put_bytes(out, &astep, 8);

  auto params = st.trainable_params();
  const std::uint32_t n_params = static_cast<std::uint32_t>(params.size());
  detail::put_bytes(out, &n_params, 4);
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto& name = params[p].name;
    const std::uint16_t len = static_cast<std::uint16_t>(name.size());
    detail::put_bytes(out, &len, 2);
    detail::put_bytes(out, name.data(), name.size());
    const std::uint64_t numel = params[p].tensor.numel();
    detail::put_bytes(out, &numel, 8);
    detail::put_bytes(out, params[p].tensor.values().data(), numel * sizeof(T));
    detail::put_bytes(out, st.adam_m[p].data(), numel * sizeof(T));
    detail::put_bytes(out, st.adam_v[p].data(), numel * sizeof(T));
  }
  if (!out) throw std::runtime_error("checkpoint: failed writing " + path);
}

template <typename T>
ModelState<T> restore_checkpoint(const std::string& path, const LabelRegistry& registry) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[4];
  detail::get_bytes(in, magic, 4, "magic");
  if (std::string(magic, 4) != "CPK1")
    throw std::runtime_error("checkpoint: " + path + " is not a checkpoint file");
  std::uint32_t version = 0;
  detail::get_bytes(in, &version, 4, "version");
  if (version != checkpoint_version)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  std::uint8_t dtype = 0;
  detail::get_bytes(in, &dtype, 1, "dtype");
  if (dtype != sizeof(T))
    throw std::runtime_error("checkpoint: precision mismatch (stored " +
                             std::to_string(int(dtype) * 8) + "-bit)");
  std::uint64_t digest = 0;
  detail::get_bytes(in, &digest, 8, "registry digest");
  if (digest != registry.digest())
    throw std::runtime_error(
        "checkpoint: registry digest mismatch; this checkpoint was trained against a "
        "different label registry");

  ModelConfig mc;
  std::int32_t mc_fields[3];
  detail::get_bytes(in, mc_fields, sizeof(mc_fields), "model config");
  mc.pool_size = mc_fields[0];
  mc.prompt_len = mc_fields[1];
  mc.top_k = mc_fields[2];
  detail::get_bytes(in, &mc.eta_init, 8, "eta init");
  std::uint8_t ab_fields[7];
  detail::get_bytes(in, ab_fields, sizeof(ab_fields), "ablation switches");
  mc.ablation.pool_state = ab_fields[0] != 0;
  mc.ablation.pool_object = ab_fields[1] != 0;
  mc.ablation.injection = static_cast<InjectionMode>(ab_fields[2]);
  mc.ablation.fusion = static_cast<FusionMode>(ab_fields[3]);
  mc.ablation.use_rce = ab_fields[4] != 0;
  mc.ablation.use_inter = ab_fields[5] != 0;
  mc.ablation.use_intra = ab_fields[6] != 0;
  detail::get_bytes(in, &mc.seed, 8, "model seed");

  BackboneConfig bc;
  std::int32_t bc_fields[8];
  detail::get_bytes(in, bc_fields, sizeof(bc_fields), "backbone config");
  bc.image_side = bc_fields[0];
  bc.patch_side = bc_fields[1];
  bc.channels = bc_fields[2];
  bc.embed_dim = bc_fields[3];
  bc.n_layers = bc_fields[4];
  bc.n_heads = bc_fields[5];
  bc.max_prompt_tokens = bc_fields[6];
  detail::get_bytes(in, &bc.mlp_ratio, 8, "mlp ratio");
  detail::get_bytes(in, &bc.seed, 8, "backbone seed");

  std::int32_t dims[3];
  detail::get_bytes(in, dims, sizeof(dims), "registry dims");
  if (dims[0] != registry.n_states() || dims[1] != registry.n_objects() ||
      dims[2] != registry.n_compositions())
    throw std::runtime_error("checkpoint: registry dimensions mismatch");

  auto st = ModelState<T>::init(mc, registry, std::make_shared<FrozenEncoder<T>>(bc));
  std::int32_t tasks = 0;
  detail::get_bytes(in, &tasks, 4, "task cursor");
  st.tasks_trained = tasks;
  detail::get_bytes(in, st.seen_compositions.data(), st.seen_compositions.size(), "seen mask");
  std::int64_t astep = 0;
  detail::get_bytes(in, &astep, 8, "adam step");
  st.adam_step = astep;

  auto params = st.trainable_params();
  std::uint32_t n_params = 0;
  detail::get_bytes(in, &n_params, 4, "parameter count");
  if (n_params != params.size())
    throw std::runtime_error("checkpoint: parameter count mismatch");
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::uint16_t len = 0;
    detail::get_bytes(in, &len, 2, "parameter name");
    std::string name(len, '\0');
    detail::get_bytes(in, name.data(), len, "parameter name");
    if (name != params[p].name)
      throw std::runtime_error("checkpoint: parameter order mismatch at '" + name + "'");
    std::uint64_t numel = 0;
    detail::get_bytes(in, &numel, 8, "parameter size");
    if (numel != params[p].tensor.numel())
      throw std::runtime_error("checkpoint: parameter size mismatch at '" + name + "'");
    detail::get_bytes(in, params[p].tensor.values().data(), numel * sizeof(T), name.c_str());
    detail::get_bytes(in, st.adam_m[p].data(), numel * sizeof(T), "adam m");
    detail::get_bytes(in, st.adam_v[p].data(), numel * sizeof(T), "adam v");
  }
  return st;
}

}  // namespace compil
