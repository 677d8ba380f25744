#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "compil/ops.hpp"
#include "compil/rng.hpp"
#include "compil/tensor.hpp"

namespace compil {

enum class PoolTag { composition, state, object };

inline const char* pool_tag_name(PoolTag t) {
  switch (t) {
    case PoolTag::composition: return "composition";
    case PoolTag::state: return "state";
    case PoolTag::object: return "object";
  }
  return "?";
}

// M trainable prompts of shape [L,D] plus M matching keys of shape [D].
template <typename T>
struct PromptPool {
  PoolTag tag = PoolTag::composition;
  int prompt_len = 0;
  int embed_dim = 0;
  std::vector<Tensor<T>> prompts;
  std::vector<Tensor<T>> keys;

  int size() const { return static_cast<int>(prompts.size()); }

  // Prompt tokens start at patch-token scale so the image content keeps a
  // meaningful share of the residual stream through the frozen encoder; keys
  // start uniform on [-1, 1] (selection is scale-free).
  static constexpr double prompt_init_scale = 0.1;

  static PromptPool seeded(PoolTag tag, int pool_size, int prompt_len, int embed_dim,
                           std::uint64_t seed) {
    if (pool_size <= 0 || prompt_len <= 0 || embed_dim <= 0)
      throw std::invalid_argument("prompt pool: non-positive dimension");
    PromptPool p;
    p.tag = tag;
    p.prompt_len = prompt_len;
    p.embed_dim = embed_dim;
    std::mt19937_64 rng(seed);
    for (int i = 0; i < pool_size; ++i) {
      auto t = Tensor<T>::zeros({prompt_len, embed_dim}, true);
      fill_uniform(t, rng, static_cast<T>(-prompt_init_scale),
                   static_cast<T>(prompt_init_scale));
      p.prompts.push_back(t);
    }
    for (int i = 0; i < pool_size; ++i) {
      auto k = Tensor<T>::zeros({embed_dim}, true);
      fill_uniform(k, rng, T(-1), T(1));
      p.keys.push_back(k);
    }
    return p;
  }
};

struct SelectionResult {
  std::vector<int> indices;           // strictly distinct, similarity-ranked
  std::vector<double> similarities;   // non-increasing, in [-1, 1]
};

// Top-k keys by cosine similarity to the query; ties break toward the lowest
// index. The ranking itself is outside the graph: keys learn only through
// the surrogate loss.
template <typename T>
SelectionResult select_topk(const PromptPool<T>& pool, const Tensor<T>& query, int k) {
  const int m = pool.size();
  if (k < 1 || k > m)
    throw std::invalid_argument("select_topk: k=" + std::to_string(k) + " outside [1," +
                                std::to_string(m) + "]");
  if (query.numel() != static_cast<std::size_t>(pool.embed_dim))
    throw std::invalid_argument("select_topk: query length mismatch");
  double qnorm = 0;
  for (const T v : query.values()) {
    if (!std::isfinite(static_cast<double>(v)))
      throw std::invalid_argument("select_topk: non-finite query");
    qnorm += static_cast<double>(v) * static_cast<double>(v);
  }
  qnorm = std::sqrt(qnorm);
  if (qnorm == 0.0) throw std::invalid_argument("select_topk: zero-norm query");

  std::vector<double> sims(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    const auto key = pool.keys[static_cast<std::size_t>(i)].values();
    double d = 0, n = 0;
    for (std::size_t j = 0; j < key.size(); ++j) {
      d += static_cast<double>(key[j]) * static_cast<double>(query[j]);
      n += static_cast<double>(key[j]) * static_cast<double>(key[j]);
    }
    const double denom = qnorm * std::max(std::sqrt(n), 1e-12);
    sims[static_cast<std::size_t>(i)] = d / denom;
  }

  std::vector<int> order(static_cast<std::size_t>(m));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return sims[static_cast<std::size_t>(a)] >
                                              sims[static_cast<std::size_t>(b)]; });
  SelectionResult out;
  out.indices.assign(order.begin(), order.begin() + k);
  for (int i : out.indices) out.similarities.push_back(sims[static_cast<std::size_t>(i)]);
  return out;
}

// W_Q, W_K, W_V of the object-injection cross-attention, all [D,D].
template <typename T>
struct InjectionWeights {
  Tensor<T> wq, wk, wv;

  static InjectionWeights seeded(int embed_dim, std::uint64_t seed) {
    InjectionWeights w;
    std::mt19937_64 rng(seed);
    const double s = 1.0 / std::sqrt(static_cast<double>(embed_dim));
    for (Tensor<T>* t : {&w.wq, &w.wk, &w.wv}) {
      *t = Tensor<T>::zeros({embed_dim, embed_dim}, true);
      fill_uniform(*t, rng, static_cast<T>(-s), static_cast<T>(s));
    }
    return w;
  }
};

// Single-head cross attention of the query over the fused object prompt:
// q_s = Softmax(q W_Q (P W_K)^T / sqrt(D)) P W_V. Gradients flow into the
// projections and into the fused prompt; there is no stop-gradient.
template <typename T>
Tensor<T> inject_object(Tape<T>& tape, const Tensor<T>& query, const Tensor<T>& fused_prompt,
                        const InjectionWeights<T>& w) {
  detail::require_rank2("inject_object", fused_prompt);
  const int d = fused_prompt.cols();
  if (query.numel() != static_cast<std::size_t>(d) || w.wq.shape() != Shape{d, d} ||
      w.wk.shape() != Shape{d, d} || w.wv.shape() != Shape{d, d})
    throw std::invalid_argument("inject_object: dimension mismatch");
  auto q_row = reshape(tape, query, {1, d});
  auto qw = matmul(tape, q_row, w.wq);
  auto kw = matmul(tape, fused_prompt, w.wk);
  auto vw = matmul(tape, fused_prompt, w.wv);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
  auto attn = softmax_rows(tape, mul_scalar(tape, matmul(tape, qw, transpose(tape, kw)), scale));
  return reshape(tape, matmul(tape, attn, vw), {d});
}

// Learnable GeM exponent: eta = clamp(1 + softplus(raw), 1, 10). Always >= 1,
// initialized at eta = 3.
template <typename T>
struct GemParam {
  Tensor<T> raw;

  static constexpr double eta_min = 1.0;
  static constexpr double eta_max = 10.0;

  static GemParam with_eta(double eta0) {
    if (eta0 <= eta_min || eta0 > eta_max)
      throw std::invalid_argument("gem: initial eta must lie in (1, 10]");
    GemParam g;
    // invert 1 + softplus: raw = log(exp(eta0 - 1) - 1)
    g.raw = Tensor<T>::scalar(static_cast<T>(std::log(std::expm1(eta0 - 1.0))), true);
    return g;
  }

  static GemParam defaults() { return with_eta(3.0); }

  Tensor<T> effective_eta(Tape<T>& tape) const {
    return clamp(tape, add_scalar(tape, softplus(tape, raw), T(1)),
                 static_cast<T>(eta_min), static_cast<T>(eta_max));
  }
};

// Generalized-mean fusion of the selected prompts with signed powers:
// sign(m)|m|^(1/eta) of m = (1/k) sum sign(P)|P|^eta. eta = 1 is mean
// pooling; large eta approaches elementwise max on non-negative inputs.
// Differentiable in both the prompts and eta.
template <typename T>
Tensor<T> gem_fuse(Tape<T>& tape, const std::vector<Tensor<T>>& selected, const Tensor<T>& eta) {
  if (selected.empty()) throw std::invalid_argument("gem_fuse: empty selection");
  if (eta.numel() != 1) throw std::invalid_argument("gem_fuse: eta must be scalar");
  if (static_cast<double>(eta[0]) < 1.0)
    throw std::invalid_argument("gem_fuse: eta must be >= 1");
  for (const auto& p : selected) detail::require_same_shape("gem_fuse", selected.front(), p);

  Tensor<T> acc = spow(tape, selected.front(), eta);
  for (std::size_t i = 1; i < selected.size(); ++i)
    acc = add(tape, acc, spow(tape, selected[i], eta));
  auto mean = mul_scalar(tape, acc, T(1) / static_cast<T>(selected.size()));
  auto inv_eta = div(tape, Tensor<T>::scalar(T(1)), eta);
  return spow(tape, mean, inv_eta);
}

template <typename T>
Tensor<T> fuse_mean(Tape<T>& tape, const std::vector<Tensor<T>>& selected) {
  if (selected.empty()) throw std::invalid_argument("fuse_mean: empty selection");
  Tensor<T> acc = selected.front();
  for (std::size_t i = 1; i < selected.size(); ++i) acc = add(tape, acc, selected[i]);
  return mul_scalar(tape, acc, T(1) / static_cast<T>(selected.size()));
}

template <typename T>
Tensor<T> fuse_max(Tape<T>& tape, const std::vector<Tensor<T>>& selected) {
  if (selected.empty()) throw std::invalid_argument("fuse_max: empty selection");
  return max_list(tape, selected);
}

}  // namespace compil
