#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "incdet/util.hpp"

namespace incdet {

// Dense row-major double tensor with a shared buffer. Shapes are small
// (rank <= 4); reshapes alias the buffer, clone() copies it.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);
  Tensor(std::vector<int> shape, std::vector<double> data);

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double v);
  static Tensor scalar(double v) { return full({1}, v); }

  bool defined() const { return static_cast<bool>(data_); }
  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const;

  double* data() { return data_->data(); }
  const double* data() const { return data_->data(); }

  double& operator[](std::int64_t i) { return (*data_)[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }

  double& at(int i, int j) { return (*data_)[static_cast<std::size_t>(i) * dim(1) + j]; }
  double at(int i, int j) const { return (*data_)[static_cast<std::size_t>(i) * dim(1) + j]; }
  double& at(int c, int h, int w) {
    return (*data_)[(static_cast<std::size_t>(c) * dim(1) + h) * dim(2) + w];
  }
  double at(int c, int h, int w) const {
    return (*data_)[(static_cast<std::size_t>(c) * dim(1) + h) * dim(2) + w];
  }

  Tensor reshaped(std::vector<int> new_shape) const;  // aliases the buffer
  Tensor clone() const;

  void fill(double v);
  void add_(const Tensor& other, double scale = 1.0);  // this += scale * other
  void scale_(double s);
  double sum() const;
  double abs_max() const;
  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool equals(const Tensor& other) const;  // exact elementwise

 private:
  std::vector<int> shape_;
  std::shared_ptr<std::vector<double>> data_;
};

}  // namespace incdet
