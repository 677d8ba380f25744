#pragma once

#include <string>
#include <vector>

namespace compil {

// Lower-triangular accuracy grid: entry (t, i) is the accuracy on task i's
// test split measured after training task t, defined for i <= t. One matrix
// per label space (composition, state, object).
class AccuracyMatrix {
 public:
  explicit AccuracyMatrix(int n_tasks);

  int n_tasks() const { return n_tasks_; }
  int n_rows() const { return static_cast<int>(rows_.size()); }

  // Appends the evaluation row after training task n_rows(); the row must
  // hold one accuracy per task seen so far.
  void append_row(const std::vector<double>& accuracies);

  double at(int after_task, int task) const;
  bool complete() const { return n_rows() == n_tasks_; }

  void save_csv(const std::string& path) const;
  static AccuracyMatrix load_csv(const std::string& path);

 private:
  int n_tasks_;
  std::vector<std::vector<double>> rows_;
};

// Mean of the final row: (1/N) sum_i a[N][i]. Requires the final row.
double avg_acc(const AccuracyMatrix& m);

// Standard forgetting measure: mean over all but the last task of the gap
// between the best earlier accuracy and the final accuracy,
// (1/(N-1)) sum_i (max_{t in [i, N-1)} a[t][i] - a[N-1][i]). Requires N >= 2.
double forgetting(const AccuracyMatrix& m);

// 2so/(s+o); arguments on a consistent scale ([0,1] or percent). 0 when both 0.
double harmonic_mean(double state_acc, double object_acc);

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation (n-1), 0 for a single value
};

MeanStd mean_std(const std::vector<double>& values);

}  // namespace compil
