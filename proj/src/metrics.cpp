#include "compil/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace compil {

AccuracyMatrix::AccuracyMatrix(int n_tasks) : n_tasks_(n_tasks) {
  if (n_tasks < 1) throw std::invalid_argument("accuracy matrix: need at least one task");
}

void AccuracyMatrix::append_row(const std::vector<double>& accuracies) {
  if (n_rows() >= n_tasks_)
    throw std::invalid_argument("accuracy matrix: all rows already filled");
  if (static_cast<int>(accuracies.size()) != n_rows() + 1)
    throw std::invalid_argument("accuracy matrix: row after task " + std::to_string(n_rows()) +
                                " must have " + std::to_string(n_rows() + 1) + " entries");
  for (double a : accuracies)
    if (a < 0.0 || a > 1.0)
      throw std::invalid_argument("accuracy matrix: accuracy outside [0,1]");
  rows_.push_back(accuracies);
}

double AccuracyMatrix::at(int after_task, int task) const {
  if (after_task < 0 || after_task >= n_rows() || task < 0 || task > after_task)
    throw std::invalid_argument("accuracy matrix: cell (" + std::to_string(after_task) + "," +
                                std::to_string(task) + ") is outside the lower triangle");
  return rows_[static_cast<std::size_t>(after_task)][static_cast<std::size_t>(task)];
}

void AccuracyMatrix::save_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "after_task";
  for (int i = 0; i < n_tasks_; ++i) out << ",task" << i;
  out << "\n";
  char buf[40];
  for (int t = 0; t < n_rows(); ++t) {
    out << t;
    for (int i = 0; i < n_tasks_; ++i) {
      out << ",";
      if (i <= t) {
        std::snprintf(buf, sizeof(buf), "%.12g", at(t, i));
        out << buf;
      }
    }
    out << "\n";
  }
  if (!out) throw std::runtime_error("failed writing " + path);
}

AccuracyMatrix AccuracyMatrix::load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": empty file");
  int n_cols = 0;
  for (char c : line) n_cols += c == ',' ? 1 : 0;
  if (n_cols < 1) throw std::runtime_error(path + ": malformed header");
  AccuracyMatrix m(n_cols);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::getline(ss, field, ',');  // after_task index
    std::vector<double> row;
    while (std::getline(ss, field, ','))
      if (!field.empty()) row.push_back(std::stod(field));
    m.append_row(row);
  }
  return m;
}

double avg_acc(const AccuracyMatrix& m) {
  if (!m.complete())
    throw std::invalid_argument("avg_acc: final evaluation row is incomplete");
  const int n = m.n_tasks();
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += m.at(n - 1, i);
  return sum / n;
}

double forgetting(const AccuracyMatrix& m) {
  const int n = m.n_tasks();
  if (n < 2) throw std::invalid_argument("forgetting: needs at least two tasks");
  if (!m.complete()) throw std::invalid_argument("forgetting: matrix is incomplete");
  double sum = 0.0;
  for (int i = 0; i < n - 1; ++i) {
    double best = m.at(i, i);
    for (int t = i; t < n - 1; ++t) best = std::max(best, m.at(t, i));
    sum += best - m.at(n - 1, i);
  }
  return sum / (n - 1);
}

double harmonic_mean(double state_acc, double object_acc) {
  if (state_acc < 0.0 || object_acc < 0.0)
    throw std::invalid_argument("harmonic_mean: negative input");
  if (state_acc == 0.0 && object_acc == 0.0) return 0.0;
  return 2.0 * state_acc * object_acc / (state_acc + object_acc);
}

MeanStd mean_std(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("mean_std: no values");
  MeanStd out;
  for (double v : values) out.mean += v;
  out.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return out;
}

}  // namespace compil
