#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "compil/gradcheck.hpp"
#include "compil/prompts.hpp"
#include "compil/rng.hpp"

using namespace compil;

namespace {

using D = double;

// Independent ranking oracle: full argsort over all M cosine similarities.
std::vector<int> argsort_topk_oracle(const PromptPool<D>& pool, const Tensor<D>& q, int k) {
  std::vector<double> sims(static_cast<std::size_t>(pool.size()));
  double qn = 0;
  for (auto v : q.values()) qn += v * v;
  qn = std::sqrt(qn);
  for (int i = 0; i < pool.size(); ++i) {
    double d = 0, n = 0;
    const auto key = pool.keys[static_cast<std::size_t>(i)].values();
    for (std::size_t j = 0; j < key.size(); ++j) {
      d += key[j] * q[j];
      n += key[j] * key[j];
    }
    sims[static_cast<std::size_t>(i)] = d / (qn * std::sqrt(n));
  }
  std::vector<int> order(sims.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return sims[static_cast<std::size_t>(a)] > sims[static_cast<std::size_t>(b)];
  });
  order.resize(static_cast<std::size_t>(k));
  return order;
}

}  // namespace

TEST_CASE("pool construction invariants") {
  auto pool = PromptPool<float>::seeded(PoolTag::state, 8, 3, 16, 5);
  CHECK(pool.size() == 8);
  CHECK(pool.prompts.size() == pool.keys.size());
  for (const auto& p : pool.prompts) CHECK(p.shape() == Shape{3, 16});
  for (const auto& k : pool.keys) CHECK(k.shape() == Shape{16});
  for (const auto& p : pool.prompts) CHECK(p.requires_grad());
}

TEST_CASE("select_topk basics") {
  // orthogonal one-hot keys make similarities exact
  auto pool = PromptPool<D>::seeded(PoolTag::object, 4, 2, 8, 1);
  for (int i = 0; i < 4; ++i) {
    auto& key = pool.keys[static_cast<std::size_t>(i)];
    for (auto& v : key.values()) v = 0;
    key[static_cast<std::size_t>(i)] = 1.0;
  }
  auto q = Tensor<D>::zeros({8});
  q[2] = 1.0;

  SUBCASE("query aligned with key 2") {
    auto sel = select_topk(pool, q, 1);
    CHECK(sel.indices == std::vector<int>{2});
    CHECK(sel.similarities[0] == doctest::Approx(1.0));
  }
  SUBCASE("identical keys fall back to lowest indices") {
    for (int i = 0; i < 4; ++i) {
      auto& key = pool.keys[static_cast<std::size_t>(i)];
      for (std::size_t j = 0; j < key.numel(); ++j) key[j] = 0.5;
    }
    auto sel = select_topk(pool, q, 3);
    CHECK(sel.indices == std::vector<int>{0, 1, 2});
  }
  SUBCASE("zero-norm query rejected") {
    CHECK_THROWS_AS(select_topk(pool, Tensor<D>::zeros({8}), 1), std::invalid_argument);
  }
  SUBCASE("k out of range rejected") {
    CHECK_THROWS_AS(select_topk(pool, q, 0), std::invalid_argument);
    CHECK_THROWS_AS(select_topk(pool, q, 5), std::invalid_argument);
  }
}

TEST_CASE("select_topk matches the argsort oracle on random pools") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 25; ++trial) {
    auto pool = PromptPool<D>::seeded(PoolTag::composition, 20, 2, 12, rng());
    auto q = Tensor<D>::zeros({12});
    fill_uniform(q, rng, -1.0, 1.0);
    auto sel = select_topk(pool, q, 5);
    CHECK(sel.indices == argsort_topk_oracle(pool, q, 5));
    for (std::size_t i = 1; i < sel.similarities.size(); ++i)
      CHECK(sel.similarities[i] <= sel.similarities[i - 1]);
  }
  // full selection is a permutation of all indices
  auto pool = PromptPool<D>::seeded(PoolTag::composition, 20, 2, 12, 4);
  auto q = Tensor<D>::zeros({12});
  fill_uniform(q, rng, -1.0, 1.0);
  auto sel = select_topk(pool, q, 20);
  auto sorted = sel.indices;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 20; ++i) CHECK(sorted[static_cast<std::size_t>(i)] == i);
}

TEST_CASE("inject_object") {
  const int d = 6;
  InjectionWeights<D> ident;
  for (Tensor<D>* w : {&ident.wq, &ident.wk, &ident.wv}) {
    *w = Tensor<D>::zeros({d, d}, true);
    for (int i = 0; i < d; ++i) (*w)[static_cast<std::size_t>(i) * d + i] = 1.0;
  }
  std::mt19937_64 rng(3);
  auto q = Tensor<D>::zeros({d}, true);
  fill_uniform(q, rng, -1.0, 1.0);

  SUBCASE("single prompt row with identity weights returns that row") {
    auto p = Tensor<D>::zeros({1, d}, true);
    fill_uniform(p, rng, -1.0, 1.0);
    Tape<D> tape;
    auto out = inject_object(tape, q, p, ident);
    CHECK(out.shape() == Shape{d});
    for (int j = 0; j < d; ++j)
      CHECK(out[static_cast<std::size_t>(j)] == doctest::Approx(p[static_cast<std::size_t>(j)]));
  }

  SUBCASE("two rows with identity weights match the hand-evaluated formula") {
    auto p = Tensor<D>::from({2, d}, {0.5, -1.0, 0.25, 2.0, 0.0, -0.5,
                                      1.5, 0.75, -0.25, -1.0, 0.5, 1.0}, true);
    Tape<D> tape;
    auto out = inject_object(tape, q, p, ident);
    // direct 64-bit evaluation of the cross-attention formula
    double s0 = 0, s1 = 0;
    for (int j = 0; j < d; ++j) {
      s0 += q[static_cast<std::size_t>(j)] * p[static_cast<std::size_t>(j)];
      s1 += q[static_cast<std::size_t>(j)] * p[static_cast<std::size_t>(d + j)];
    }
    s0 /= std::sqrt(double(d));
    s1 /= std::sqrt(double(d));
    const double mx = std::max(s0, s1);
    const double e0 = std::exp(s0 - mx), e1 = std::exp(s1 - mx);
    const double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
    for (int j = 0; j < d; ++j) {
      const double expect = a0 * p[static_cast<std::size_t>(j)] +
                            a1 * p[static_cast<std::size_t>(d + j)];
      CHECK(out[static_cast<std::size_t>(j)] == doctest::Approx(expect).epsilon(1e-12));
    }
  }

  SUBCASE("output is a D-vector for any prompt length") {
    for (int L : {1, 2, 5}) {
      auto p = Tensor<D>::zeros({L, d}, true);
      fill_uniform(p, rng, -1.0, 1.0);
      Tape<D> tape;
      CHECK(inject_object(tape, q, p, ident).shape() == Shape{d});
    }
  }

  SUBCASE("shape mismatch rejected") {
    Tape<D> tape;
    auto p = Tensor<D>::zeros({2, d + 1}, true);
    CHECK_THROWS_AS(inject_object(tape, q, p, ident), std::invalid_argument);
  }

  SUBCASE("gradients match finite differences") {
    auto w = InjectionWeights<D>::seeded(d, 11);
    auto p = Tensor<D>::zeros({3, d}, true);
    fill_uniform(p, rng, -1.0, 1.0);
    std::vector<NamedParam<D>> leaves{{"q", q}, {"p", p}, {"wq", w.wq}, {"wk", w.wk},
                                      {"wv", w.wv}};
    auto report = check_gradients<D>(leaves, [&](Tape<D>& tape) {
      auto out = inject_object(tape, q, p, w);
      auto probe = Tensor<D>::from({d}, {0.3, -0.7, 0.9, 0.1, -0.2, 0.5});
      return dot(tape, out, probe);
    }, 1e-6, 1e-5);
    for (const auto& e : report.entries) {
      INFO(e.name << " rel err " << e.max_rel_err);
      CHECK(e.pass);
    }
  }
}

TEST_CASE("gem_fuse limits and oracle values") {
  Tape<D> tape;
  auto a = Tensor<D>::from({1, 1}, {1.0}, true);
  auto b = Tensor<D>::from({1, 1}, {3.0}, true);

  SUBCASE("eta = 1 is mean pooling") {
    auto out = gem_fuse(tape, {a, b}, Tensor<D>::scalar(1.0));
    CHECK(out.value() == doctest::Approx(2.0).epsilon(1e-13));
  }
  SUBCASE("eta = 2 gives sqrt(5) on {1,3}") {
    auto out = gem_fuse(tape, {a, b}, Tensor<D>::scalar(2.0));
    CHECK(out.value() == doctest::Approx(std::sqrt(5.0)).epsilon(1e-12));
  }
  SUBCASE("eta = 64 approaches the max") {
    // direct evaluation: ((1 + 3^64)/2)^(1/64) = 3 * 2^(-1/64)
    const double oracle = 3.0 * std::pow(2.0, -1.0 / 64.0);
    auto out = gem_fuse(tape, {a, b}, Tensor<D>::scalar(64.0));
    CHECK(out.value() == doctest::Approx(oracle).epsilon(1e-12));
    CHECK(std::abs(out.value() - 3.0) / 3.0 < 0.011);  // within ~1% of the max limit
  }
  SUBCASE("empty selection rejected") {
    CHECK_THROWS_AS(gem_fuse(tape, std::vector<Tensor<D>>{}, Tensor<D>::scalar(2.0)),
                    std::invalid_argument);
  }
  SUBCASE("eta below one rejected") {
    CHECK_THROWS_AS(gem_fuse(tape, {a, b}, Tensor<D>::scalar(0.5)), std::invalid_argument);
  }
}

TEST_CASE("gem_fuse properties on random prompts") {
  std::mt19937_64 rng(123);
  Tape<D> tape;
  tape.set_recording(false);

  for (int trial = 0; trial < 200; ++trial) {
    const int k = 1 + static_cast<int>(rng() % 4);
    std::vector<Tensor<D>> sel;
    for (int i = 0; i < k; ++i) {
      auto t = Tensor<D>::zeros({2, 3}, true);
      fill_uniform(t, rng, -2.0, 2.0);
      sel.push_back(t);
    }
    const double eta = 1.0 + 9.0 * (static_cast<double>(rng() % 1000) / 1000.0);
    auto eta_t = Tensor<D>::scalar(eta);

    // identical prompts come back unchanged
    std::vector<Tensor<D>> same(static_cast<std::size_t>(k), sel[0]);
    auto fused_same = gem_fuse(tape, same, eta_t);
    for (std::size_t i = 0; i < fused_same.numel(); ++i)
      CHECK(fused_same[i] == doctest::Approx(sel[0][i]).epsilon(1e-9));

    // permutation invariance
    auto fused = gem_fuse(tape, sel, eta_t);
    auto shuffled = sel;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    auto fused_perm = gem_fuse(tape, shuffled, eta_t);
    for (std::size_t i = 0; i < fused.numel(); ++i)
      CHECK(fused[i] == doctest::Approx(fused_perm[i]).epsilon(1e-12));

    // on non-negative inputs: min <= gem <= max, monotone in eta
    for (auto& t : sel)
      for (auto& v : t.values()) v = std::abs(v);
    auto low = gem_fuse(tape, sel, Tensor<D>::scalar(eta));
    auto high = gem_fuse(tape, sel, Tensor<D>::scalar(eta + 1.0));
    for (std::size_t i = 0; i < low.numel(); ++i) {
      double mn = sel[0][i], mx = sel[0][i];
      for (const auto& t : sel) {
        mn = std::min(mn, t[i]);
        mx = std::max(mx, t[i]);
      }
      CHECK(low[i] >= mn - 1e-12);
      CHECK(low[i] <= mx + 1e-12);
      CHECK(high[i] >= low[i] - 1e-10);
    }
  }
}

TEST_CASE("gem parameter stays in range and starts at three") {
  auto gp = GemParam<D>::defaults();
  Tape<D> tape;
  CHECK(gp.effective_eta(tape).value() == doctest::Approx(3.0).epsilon(1e-12));
  gp.raw[0] = 100.0;  // drive the raw parameter far positive
  CHECK(gp.effective_eta(tape).value() == doctest::Approx(10.0));
  gp.raw[0] = -100.0;
  CHECK(gp.effective_eta(tape).value() >= 1.0);
}

TEST_CASE("gem gradients flow to prompts and eta") {
  std::mt19937_64 rng(5);
  auto p1 = Tensor<D>::zeros({2, 2}, true);
  auto p2 = Tensor<D>::zeros({2, 2}, true);
  fill_uniform(p1, rng, 0.3, 2.0);
  fill_uniform(p2, rng, 0.3, 2.0);
  auto gp = GemParam<D>::with_eta(2.5);
  std::vector<NamedParam<D>> leaves{{"p1", p1}, {"p2", p2}, {"raw", gp.raw}};
  auto report = check_gradients<D>(leaves, [&](Tape<D>& tape) {
    auto fused = gem_fuse(tape, {p1, p2}, gp.effective_eta(tape));
    return mean_all(tape, fused);
  }, 1e-6, 1e-5);
  for (const auto& e : report.entries) {
    INFO(e.name << " rel err " << e.max_rel_err);
    CHECK(e.pass);
  }
}
