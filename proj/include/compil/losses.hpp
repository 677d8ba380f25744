#pragma once

#include <cmath>
#include <iostream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include "compil/ops.hpp"
#include "compil/prompts.hpp"
#include "compil/tensor.hpp"

namespace compil {

struct DDConfig {
  double theta_thre = M_PI / 2.0;  // minimum pairwise angle, radians
  double epsilon = 1e-6;           // norm floor in the angle computation

  void validate() const {
    if (!(theta_thre > 0.0) || theta_thre > M_PI)
      throw std::invalid_argument("dd loss: theta_thre must lie in (0, pi]");
    if (!(epsilon > 0.0)) throw std::invalid_argument("dd loss: epsilon must be positive");
  }
};

struct LossWeights {
  double alpha = 0.0;      // RCE weight inside SCE
  double beta = 0.0;       // primitive SCE weight
  double lambda1 = 0.0;    // inter-pool discrepancy
  double lambda2 = 0.0;    // intra-pool diversity
  double lambda3 = 0.0;    // surrogate
  double rce_floor = -4.0; // substituted for log 0 in the reverse term

  void validate() const {
    if (alpha < 0 || beta < 0 || lambda1 < 0 || lambda2 < 0 || lambda3 < 0)
      throw std::invalid_argument("loss weights must be non-negative");
    if (!(rce_floor < 0)) throw std::invalid_argument("rce_floor must be negative");
  }
};

// Directional decoupled loss between two pools of M prompts each:
// (2/(M(M-1))) * sum over the full n,m grid of max(0, theta_thre - theta_nm),
// where theta_nm is the angle between flattened prompts n and m. When both
// arguments are the same pool, the diagonal n = m contributes zero.
template <typename T>
Tensor<T> dd_loss(Tape<T>& tape, const std::vector<Tensor<T>>& pool_a,
                  const std::vector<Tensor<T>>& pool_b, const DDConfig& cfg, bool same_pool) {
  cfg.validate();
  const int m = static_cast<int>(pool_a.size());
  if (static_cast<int>(pool_b.size()) != m)
    throw std::invalid_argument("dd_loss: pools must have equal size");
  if (m < 2) {
    std::clog << "dd_loss: pool of size " << m << " has no prompt pairs, returning 0\n";
    return Tensor<T>::scalar(T(0));
  }

  auto stack = [&](const std::vector<Tensor<T>>& pool) {
    std::vector<Tensor<T>> rows;
    rows.reserve(pool.size());
    for (const auto& p : pool)
      rows.push_back(reshape(tape, p, {1, static_cast<int>(p.numel())}));
    auto flat = concat_rows(tape, rows);
    auto inv_norms = pow_const(tape, row_norms_clamped(tape, flat, static_cast<T>(cfg.epsilon)),
                               T(-1));
    return scale_rows(tape, flat, inv_norms);
  };

  auto cosines = matmul(tape, stack(pool_a), transpose(tape, stack(pool_b)));
  auto theta = acos_clamped(tape, cosines);
  auto hinge = relu(tape, add_scalar(tape, mul_scalar(tape, theta, T(-1)),
                                     static_cast<T>(cfg.theta_thre)));
  if (same_pool) {
    Tensor<T> mask = Tensor<T>::full({m, m}, T(1));
    for (int i = 0; i < m; ++i) mask[static_cast<std::size_t>(i) * m + i] = T(0);
    hinge = mul(tape, hinge, mask);
  }
  const T prefactor = static_cast<T>(2.0 / (static_cast<double>(m) * (m - 1)));
  return mul_scalar(tape, sum_all(tape, hinge), prefactor);
}

// L_inter = dd(s,o) + dd(s,c) + dd(o,c); L_intra = dd(s,s) + dd(o,o) + dd(c,c)
// with diagonal suppression on the intra terms.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> inter_intra(Tape<T>& tape, const PromptPool<T>& state_pool,
                                            const PromptPool<T>& object_pool,
                                            const PromptPool<T>& comp_pool,
                                            const DDConfig& cfg) {
  if (state_pool.size() != object_pool.size() || state_pool.size() != comp_pool.size())
    throw std::invalid_argument("inter_intra: pools must have equal size");
  auto inter = add(tape, dd_loss(tape, state_pool.prompts, object_pool.prompts, cfg, false),
                   add(tape, dd_loss(tape, state_pool.prompts, comp_pool.prompts, cfg, false),
                       dd_loss(tape, object_pool.prompts, comp_pool.prompts, cfg, false)));
  auto intra = add(tape, dd_loss(tape, state_pool.prompts, state_pool.prompts, cfg, true),
                   add(tape, dd_loss(tape, object_pool.prompts, object_pool.prompts, cfg, true),
                       dd_loss(tape, comp_pool.prompts, comp_pool.prompts, cfg, true)));
  return {inter, intra};
}

// One namespace's contribution to the surrogate: the query that drove the
// selection (kept on-graph so the injected state query backpropagates) and
// the selected keys.
template <typename T>
struct NamespaceSelection {
  Tensor<T> query;
  std::vector<Tensor<T>> keys;
};

// Sum over namespaces and selected keys of the cosine distance
// 1 - cos(q_w, K_w^si); pulls the selected keys toward their queries.
template <typename T>
Tensor<T> surrogate_loss(Tape<T>& tape, const std::vector<NamespaceSelection<T>>& selections,
                         T eps = T(1e-6)) {
  if (selections.empty()) throw std::invalid_argument("surrogate_loss: no selections");
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (const auto& sel : selections) {
    if (sel.keys.empty()) throw std::invalid_argument("surrogate_loss: empty selection");
    for (const auto& key : sel.keys) {
      auto dist = add_scalar(tape, mul_scalar(tape, cosine_sim(tape, sel.query, key, eps), T(-1)),
                             T(1));
      total = add(tape, total, dist);
    }
  }
  return total;
}

// Symmetric cross entropy over one head's logits: CE + alpha * RCE, where the
// reverse term substitutes rce_floor for log 0 on the non-target classes,
// collapsing to RCE = -rce_floor * (1 - p_label).
template <typename T>
Tensor<T> sce_loss(Tape<T>& tape, const Tensor<T>& logits, int label, const LossWeights& w) {
  w.validate();
  const auto [rows, n_classes] = detail::as_rows("sce_loss", logits);
  if (rows != 1) throw std::invalid_argument("sce_loss: expected a single logit row");
  if (n_classes < 2) throw std::invalid_argument("sce_loss: needs at least two classes");
  if (label < 0 || label >= n_classes)
    throw std::invalid_argument("sce_loss: label " + std::to_string(label) + " out of range");
  for (std::size_t i = 0; i < logits.numel(); ++i) {
    const double v = static_cast<double>(logits[i]);
    // -inf marks classes masked out of the prediction space; anything else
    // non-finite is a numerical fault.
    if (std::isnan(v) || v == std::numeric_limits<double>::infinity())
      throw std::invalid_argument("sce_loss: non-finite logits");
  }
  if (!std::isfinite(static_cast<double>(logits[static_cast<std::size_t>(label)])))
    throw std::invalid_argument("sce_loss: label logit is masked or non-finite");

  auto ce = mul_scalar(tape, pick(tape, log_softmax_rows(tape, logits),
                                  static_cast<std::size_t>(label)), T(-1));
  if (w.alpha == 0.0) return ce;
  auto p_label = pick(tape, softmax_rows(tape, logits), static_cast<std::size_t>(label));
  auto rce = mul_scalar(tape, add_scalar(tape, mul_scalar(tape, p_label, T(-1)), T(1)),
                        static_cast<T>(-w.rce_floor));
  return add(tape, ce, mul_scalar(tape, rce, static_cast<T>(w.alpha)));
}

template <typename T>
struct LossParts {
  std::optional<Tensor<T>> inter, intra, surrogate;
  std::optional<Tensor<T>> sce_c, sce_s, sce_o;
};

// lambda1*L_inter + lambda2*L_intra + lambda3*L_sur + L_sce_c
// + beta*(L_sce_s + L_sce_o); absent parts contribute zero.
template <typename T>
Tensor<T> total_loss(Tape<T>& tape, const LossParts<T>& parts, const LossWeights& w) {
  w.validate();
  Tensor<T> total = Tensor<T>::scalar(T(0));
  auto accumulate = [&](const std::optional<Tensor<T>>& part, double weight) {
    if (part && weight != 0.0)
      total = add(tape, total, mul_scalar(tape, *part, static_cast<T>(weight)));
  };
  accumulate(parts.inter, w.lambda1);
  accumulate(parts.intra, w.lambda2);
  accumulate(parts.surrogate, w.lambda3);
  accumulate(parts.sce_c, 1.0);
  accumulate(parts.sce_s, w.beta);
  accumulate(parts.sce_o, w.beta);
  return total;
}

}  // namespace compil
