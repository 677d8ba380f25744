#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "compil/tensor.hpp"

namespace compil {

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::size_t worst_index = 0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool all_pass = true;

  const GradCheckEntry* worst() const {
    const GradCheckEntry* w = nullptr;
    for (const auto& e : entries)
      if (!w || e.max_rel_err > w->max_rel_err) w = &e;
    return w;
  }
};

// Compares tape gradients against central finite differences, leaf by leaf.
// loss_fn must rebuild the forward from the current leaf values on the given
// tape and return the scalar loss. Gradients below grad_floor in both routes
// count as matching (the relative error of two near-zero numbers is noise).
template <typename T>
GradCheckReport check_gradients(std::vector<NamedParam<T>>& leaves,
                                const std::function<Tensor<T>(Tape<T>&)>& loss_fn,
                                double step, double tolerance,
                                double grad_floor = 1e-8) {
  if (!(step > 0)) throw std::invalid_argument("check_gradients: step must be positive");
  if (!(tolerance > 0)) throw std::invalid_argument("check_gradients: tolerance must be positive");

  for (auto& leaf : leaves) {
    if (!leaf.tensor.requires_grad())
      throw std::invalid_argument("check_gradients: leaf '" + leaf.name +
                                  "' does not require grad");
    leaf.tensor.zero_grad();
  }

  Tape<T> tape;
  Tensor<T> loss = loss_fn(tape);
  if (loss.numel() != 1)
    throw std::invalid_argument("check_gradients: loss_fn must return a scalar");
  tape.backward(loss);

  std::vector<std::vector<T>> analytic;
  analytic.reserve(leaves.size());
  for (auto& leaf : leaves) {
    leaf.tensor.ensure_grad();
    analytic.emplace_back(leaf.tensor.grad().begin(), leaf.tensor.grad().end());
  }

  const auto eval = [&]() -> double {
    Tape<T> t;
    t.set_recording(false);
    return static_cast<double>(loss_fn(t).value());
  };

  GradCheckReport report;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& tensor = leaves[li].tensor;
    GradCheckEntry entry;
    entry.name = leaves[li].name;
    for (std::size_t i = 0; i < tensor.numel(); ++i) {
      const T saved = tensor[i];
      tensor[i] = saved + static_cast<T>(step);
      const double fp = eval();
      tensor[i] = saved - static_cast<T>(step);
      const double fm = eval();
      tensor[i] = saved;

      const double fd = (fp - fm) / (2.0 * step);
      const double an = static_cast<double>(analytic[li][i]);
      const double abs_err = std::abs(an - fd);
      const double scale = std::max(std::abs(an), std::abs(fd));
      const double rel = scale < grad_floor ? (abs_err < grad_floor ? 0.0 : abs_err / grad_floor)
                                            : abs_err / scale;
      if (rel > entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.worst_index = i;
      }
      entry.max_abs_err = std::max(entry.max_abs_err, abs_err);
    }
    entry.pass = entry.max_rel_err < tolerance;
    report.all_pass = report.all_pass && entry.pass;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace compil
