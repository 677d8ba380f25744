#pragma once

#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "compil/backbone.hpp"
#include "compil/gradcheck.hpp"
#include "compil/losses.hpp"
#include "compil/prompts.hpp"
#include "compil/registry.hpp"

namespace compil {

enum class InjectionMode { none, object_to_state, state_to_object };
enum class FusionMode { mean, max, gem };

InjectionMode injection_from_string(const std::string& s);
FusionMode fusion_from_string(const std::string& s);
std::string to_string(InjectionMode m);
std::string to_string(FusionMode m);

inline InjectionMode injection_from_string(const std::string& s) {
  if (s == "none") return InjectionMode::none;
  if (s == "o2s" || s == "object-to-state") return InjectionMode::object_to_state;
  if (s == "s2o" || s == "state-to-object") return InjectionMode::state_to_object;
  throw std::invalid_argument("unknown injection mode '" + s + "'");
}

inline FusionMode fusion_from_string(const std::string& s) {
  if (s == "mean") return FusionMode::mean;
  if (s == "max") return FusionMode::max;
  if (s == "gem") return FusionMode::gem;
  throw std::invalid_argument("unknown fusion mode '" + s + "'");
}

inline std::string to_string(InjectionMode m) {
  switch (m) {
    case InjectionMode::none: return "none";
    case InjectionMode::object_to_state: return "o2s";
    case InjectionMode::state_to_object: return "s2o";
  }
  return "?";
}

inline std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::mean: return "mean";
    case FusionMode::max: return "max";
    case FusionMode::gem: return "gem";
  }
  return "?";
}

// Which optional machinery is active. The composition pool is always on.
struct AblationSwitches {
  bool pool_state = true;
  bool pool_object = true;
  InjectionMode injection = InjectionMode::object_to_state;
  FusionMode fusion = FusionMode::gem;
  bool use_rce = true;
  bool use_inter = true;
  bool use_intra = true;

  void validate() const {
    if (injection == InjectionMode::object_to_state && !(pool_object && pool_state))
      throw std::invalid_argument(
          "ablation: object-to-state injection needs both primitive pools");
    if (injection == InjectionMode::state_to_object && !(pool_object && pool_state))
      throw std::invalid_argument(
          "ablation: state-to-object injection needs both primitive pools");
  }

  std::string pools_label() const {
    std::string s = "c";
    if (pool_state) s += "s";
    if (pool_object) s += "o";
    return s;
  }
};

struct ModelConfig {
  int pool_size = 20;   // M
  int prompt_len = 5;   // L
  int top_k = 5;        // k
  double eta_init = 3.0;
  AblationSwitches ablation;
  std::uint64_t seed = 0;

  void validate() const {
    if (pool_size < 1 || prompt_len < 1)
      throw std::invalid_argument("model: pool_size and prompt_len must be positive");
    if (top_k < 1 || top_k > pool_size)
      throw std::invalid_argument("model: top_k must lie in [1, pool_size]");
    ablation.validate();
  }
};

// Everything trainable plus bookkeeping: three prompt pools, the injection
// projections, per-pool GeM exponents, the classifier heads, the frozen
// encoder reference, optimizer moments, and the task cursor. The composition
// head spans the full registry from the start; training masks the logits of
// classes outside the current task.
template <typename T>
struct ModelState {
  ModelConfig cfg;
  std::shared_ptr<const FrozenEncoder<T>> encoder;

  int n_states = 0;
  int n_objects = 0;
  int n_compositions = 0;
  std::uint64_t registry_digest = 0;

  PromptPool<T> pool_c;
  std::optional<PromptPool<T>> pool_s, pool_o;
  std::optional<InjectionWeights<T>> injection;
  std::optional<GemParam<T>> gem_c, gem_s, gem_o;

  Tensor<T> head_c_w, head_c_b;
  Tensor<T> head_s_w, head_s_b;  // present iff pool_s
  Tensor<T> head_o_w, head_o_b;  // present iff pool_o

  int tasks_trained = 0;
  std::vector<std::uint8_t> seen_compositions;

  // Adam slots aligned with trainable_params(); reset at each task boundary.
  std::vector<std::vector<T>> adam_m, adam_v;
  long adam_step = 0;

  static ModelState init(const ModelConfig& config, const LabelRegistry& registry,
                         std::shared_ptr<const FrozenEncoder<T>> enc) {
    config.validate();
    if (!enc) throw std::invalid_argument("model: null encoder");
    ModelState st;
    st.cfg = config;
    st.encoder = std::move(enc);
    st.n_states = registry.n_states();
    st.n_objects = registry.n_objects();
    st.n_compositions = registry.n_compositions();
    st.registry_digest = registry.digest();
    st.seen_compositions.assign(static_cast<std::size_t>(st.n_compositions), 0);

    const int d = st.encoder->config().embed_dim;
    const int L = config.prompt_len, M = config.pool_size;
    if (3 * L > st.encoder->config().max_prompt_tokens)
      throw std::invalid_argument("model: 3*prompt_len exceeds backbone max_prompt_tokens");

    st.pool_c = PromptPool<T>::seeded(PoolTag::composition, M, L, d,
                                      derive_seed(config.seed, 1));
    const auto& ab = config.ablation;
    if (ab.pool_state)
      st.pool_s = PromptPool<T>::seeded(PoolTag::state, M, L, d, derive_seed(config.seed, 2));
    if (ab.pool_object)
      st.pool_o = PromptPool<T>::seeded(PoolTag::object, M, L, d, derive_seed(config.seed, 3));
    if (ab.injection != InjectionMode::none)
      st.injection = InjectionWeights<T>::seeded(d, derive_seed(config.seed, 4));
    if (ab.fusion == FusionMode::gem) {
      st.gem_c = GemParam<T>::with_eta(config.eta_init);
      if (ab.pool_state) st.gem_s = GemParam<T>::with_eta(config.eta_init);
      if (ab.pool_object) st.gem_o = GemParam<T>::with_eta(config.eta_init);
    }

    std::mt19937_64 rng(derive_seed(config.seed, 5));
    const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
    auto make_head = [&](int n_out, Tensor<T>& w, Tensor<T>& b) {
      w = Tensor<T>::zeros({d, n_out}, true);
      fill_uniform(w, rng, -bound, bound);
      b = Tensor<T>::zeros({n_out}, true);
    };
    make_head(st.n_compositions, st.head_c_w, st.head_c_b);
    if (ab.pool_state) make_head(st.n_states, st.head_s_w, st.head_s_b);
    if (ab.pool_object) make_head(st.n_objects, st.head_o_w, st.head_o_b);

    st.reset_optimizer();
    return st;
  }

  std::vector<NamedParam<T>> trainable_params() {
    std::vector<NamedParam<T>> out;
    auto add_pool = [&out](const char* name, PromptPool<T>& pool) {
      for (int i = 0; i < pool.size(); ++i)
        out.push_back({std::string(name) + ".prompt" + std::to_string(i),
                       pool.prompts[static_cast<std::size_t>(i)]});
      for (int i = 0; i < pool.size(); ++i)
        out.push_back({std::string(name) + ".key" + std::to_string(i),
                       pool.keys[static_cast<std::size_t>(i)]});
    };
    add_pool("pool_c", pool_c);
    if (pool_s) add_pool("pool_s", *pool_s);
    if (pool_o) add_pool("pool_o", *pool_o);
    if (injection) {
      out.push_back({"inject.wq", injection->wq});
      out.push_back({"inject.wk", injection->wk});
      out.push_back({"inject.wv", injection->wv});
    }
    if (gem_c) out.push_back({"gem_c.raw", gem_c->raw});
    if (gem_s) out.push_back({"gem_s.raw", gem_s->raw});
    if (gem_o) out.push_back({"gem_o.raw", gem_o->raw});
    out.push_back({"head_c.w", head_c_w});
    out.push_back({"head_c.b", head_c_b});
    if (pool_s) {
      out.push_back({"head_s.w", head_s_w});
      out.push_back({"head_s.b", head_s_b});
    }
    if (pool_o) {
      out.push_back({"head_o.w", head_o_w});
      out.push_back({"head_o.b", head_o_b});
    }
    return out;
  }

  void reset_optimizer() {
    auto params = trainable_params();
    adam_m.clear();
    adam_v.clear();
    for (auto& p : params) {
      adam_m.emplace_back(p.tensor.numel(), T(0));
      adam_v.emplace_back(p.tensor.numel(), T(0));
    }
    adam_step = 0;
  }

  void zero_grads() {
    for (auto& p : trainable_params()) p.tensor.zero_grad();
  }
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits_c, logits_s, logits_o;  // [1, n]; primitive ones empty if pool absent
  SelectionResult sel_c, sel_s, sel_o;
  Tensor<T> query;        // q(x), off-graph
  Tensor<T> query_state;  // the query that drove state selection (on-graph if injected)
  Tensor<T> fused_c, fused_s, fused_o;
  Tensor<T> cls_feature;   // class-token row of the extended encoding
  Tensor<T> comp_feature;  // mean of the composition prompt block
  std::vector<NamespaceSelection<T>> surrogate;  // per present namespace
};

// Full forward pass: query extraction, per-pool top-k selection (object and
// composition from q, state from the injected query), fusion, prompt
// prepending in [P_c; P_s; P_o; x_e] order, frozen encoding, per-block mean
// reduction, classifier heads.
template <typename T>
ForwardResult<T> model_forward(Tape<T>& tape, const Tensor<T>& image, ModelState<T>& st) {
  const auto& ab = st.cfg.ablation;
  const int L = st.cfg.prompt_len;
  const int d = st.encoder->config().embed_dim;

  ForwardResult<T> res;
  res.query = st.encoder->extract_query(tape, image);
  auto x_e = st.encoder->embed(tape, image);

  auto gather = [&](const PromptPool<T>& pool, const SelectionResult& sel) {
    std::vector<Tensor<T>> chosen;
    for (int i : sel.indices) chosen.push_back(pool.prompts[static_cast<std::size_t>(i)]);
    return chosen;
  };
  auto fuse = [&](const std::vector<Tensor<T>>& chosen, const std::optional<GemParam<T>>& gem) {
    switch (ab.fusion) {
      case FusionMode::mean: return fuse_mean(tape, chosen);
      case FusionMode::max: return fuse_max(tape, chosen);
      case FusionMode::gem: return gem_fuse(tape, chosen, gem->effective_eta(tape));
    }
    throw std::logic_error("unreachable fusion mode");
  };
  auto keys_of = [&](const PromptPool<T>& pool, const SelectionResult& sel) {
    std::vector<Tensor<T>> keys;
    for (int i : sel.indices) keys.push_back(pool.keys[static_cast<std::size_t>(i)]);
    return keys;
  };

  // composition pool always selects with the raw query
  res.sel_c = select_topk(st.pool_c, res.query, st.cfg.top_k);
  res.fused_c = fuse(gather(st.pool_c, res.sel_c), st.gem_c);
  res.surrogate.push_back({res.query, keys_of(st.pool_c, res.sel_c)});

  Tensor<T> query_object = res.query;
  res.query_state = res.query;

  if (ab.injection == InjectionMode::state_to_object && st.pool_s) {
    // reversed guidance: fuse state prompts first, inject into object query
    res.sel_s = select_topk(*st.pool_s, res.query_state, st.cfg.top_k);
    res.fused_s = fuse(gather(*st.pool_s, res.sel_s), st.gem_s);
    res.surrogate.push_back({res.query_state, keys_of(*st.pool_s, res.sel_s)});
    query_object = inject_object(tape, res.query, res.fused_s, *st.injection);
  }

  if (st.pool_o) {
    res.sel_o = select_topk(*st.pool_o, query_object, st.cfg.top_k);
    res.fused_o = fuse(gather(*st.pool_o, res.sel_o), st.gem_o);
    res.surrogate.push_back({query_object, keys_of(*st.pool_o, res.sel_o)});
  }

  if (st.pool_s && ab.injection != InjectionMode::state_to_object) {
    if (ab.injection == InjectionMode::object_to_state)
      res.query_state = inject_object(tape, res.query, res.fused_o, *st.injection);
    res.sel_s = select_topk(*st.pool_s, res.query_state, st.cfg.top_k);
    res.fused_s = fuse(gather(*st.pool_s, res.sel_s), st.gem_s);
    res.surrogate.push_back({res.query_state, keys_of(*st.pool_s, res.sel_s)});
  }

  // extended sequence in fixed block order, skipping absent pools
  std::vector<Tensor<T>> blocks{res.fused_c};
  if (st.pool_s) blocks.push_back(res.fused_s);
  if (st.pool_o) blocks.push_back(res.fused_o);
  const int n_prompt_rows = static_cast<int>(blocks.size()) * L;
  blocks.push_back(x_e);
  auto encoded = st.encoder->encode_extended(tape, concat_rows(tape, blocks), n_prompt_rows);

  int row = 0;
  auto block_mean = [&](Tensor<T>& out) {
    out = mean_axis0(tape, slice_rows(tape, encoded, row, row + L));
    row += L;
  };
  Tensor<T> feat_c, feat_s, feat_o;
  block_mean(feat_c);
  if (st.pool_s) block_mean(feat_s);
  if (st.pool_o) block_mean(feat_o);
  res.comp_feature = feat_c;
  res.cls_feature = reshape(tape, slice_rows(tape, encoded, row, row + 1), {d});

  auto head = [&](const Tensor<T>& feat, const Tensor<T>& w, const Tensor<T>& b) {
    return add_rowvec(tape, matmul(tape, reshape(tape, feat, {1, d}), w), b);
  };
  res.logits_c = head(feat_c, st.head_c_w, st.head_c_b);
  if (st.pool_s) res.logits_s = head(feat_s, st.head_s_w, st.head_s_b);
  if (st.pool_o) res.logits_o = head(feat_o, st.head_o_w, st.head_o_b);
  return res;
}

// Adds 0 to allowed logits and -inf to the rest; masked classes get exactly
// zero probability and zero gradient.
template <typename T>
Tensor<T> mask_logits(Tape<T>& tape, const Tensor<T>& logits,
                      const std::vector<std::uint8_t>& allowed) {
  if (logits.numel() != allowed.size())
    throw std::invalid_argument("mask_logits: mask length mismatch");
  Tensor<T> mask = Tensor<T>::zeros(logits.shape());
  for (std::size_t i = 0; i < allowed.size(); ++i)
    mask[i] = allowed[i] ? T(0) : -std::numeric_limits<T>::infinity();
  return add(tape, logits, mask);
}

}  // namespace compil
