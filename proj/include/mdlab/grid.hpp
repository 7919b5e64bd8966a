#pragma once

#include <span>
#include <stdexcept>
#include <vector>

namespace mdlab {

// L x V table of per-position categorical weights. Freshly produced by a
// denoiser every row sums to 1; reweighting transforms may leave rows
// unnormalized but all entries stay >= 0. The MASK column is structurally
// absent: V covers content tokens + EOS only.
class ProbGrid {
 public:
  ProbGrid() = default;
  ProbGrid(int rows, int cols)
      : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows) * cols, 0.0) {
    if (rows < 1 || cols < 1) throw std::invalid_argument("ProbGrid: bad shape");
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }

  double at(int i, int v) const { return data_[idx(i, v)]; }
  double& at(int i, int v) { return data_[idx(i, v)]; }

  std::span<const double> row(int i) const { return {data_.data() + idx(i, 0), static_cast<size_t>(cols_)}; }
  std::span<double> row(int i) { return {data_.data() + idx(i, 0), static_cast<size_t>(cols_)}; }

  double row_sum(int i) const {
    double s = 0.0;
    for (double w : row(i)) s += w;
    return s;
  }

  double total() const {
    double s = 0.0;
    for (double w : data_) s += w;
    return s;
  }

 private:
  size_t idx(int i, int v) const {
    if (i < 0 || i >= rows_ || v < 0 || v >= cols_) throw std::out_of_range("ProbGrid: index");
    return static_cast<size_t>(i) * cols_ + v;
  }

  int rows_ = 0, cols_ = 0;
  std::vector<double> data_;
};

}  // namespace mdlab
