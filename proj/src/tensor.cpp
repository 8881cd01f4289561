#include "incdet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace incdet {

namespace {
std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    check(d >= 0, "tensor dimension must be non-negative");
    n *= d;
  }
  return n;
}
}  // namespace

Tensor::Tensor(std::vector<int> shape)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<double>>(static_cast<std::size_t>(shape_numel(shape_)), 0.0)) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data) : shape_(std::move(shape)) {
  check(shape_numel(shape_) == static_cast<std::int64_t>(data.size()), "tensor shape/data size mismatch");
  data_ = std::make_shared<std::vector<double>>(std::move(data));
}

Tensor Tensor::full(std::vector<int> shape, double v) {
  Tensor t(std::move(shape));
  t.fill(v);
  return t;
}

std::int64_t Tensor::numel() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

Tensor Tensor::reshaped(std::vector<int> new_shape) const {
  check(defined(), "reshape of undefined tensor");
  check(shape_numel(new_shape) == numel(), "reshape changes element count");
  Tensor t;
  t.shape_ = std::move(new_shape);
  t.data_ = data_;
  return t;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape_ = shape_;
  if (data_) t.data_ = std::make_shared<std::vector<double>>(*data_);
  return t;
}

void Tensor::fill(double v) { std::fill(data_->begin(), data_->end(), v); }

void Tensor::add_(const Tensor& other, double scale) {
  check(numel() == other.numel(), "add_: size mismatch");
  double* d = data();
  const double* o = other.data();
  const std::int64_t n = numel();
  for (std::int64_t i = 0; i < n; ++i) d[i] += scale * o[i];
}

void Tensor::scale_(double s) {
  for (double& v : *data_) v *= s;
}

double Tensor::sum() const {
  return std::accumulate(data_->begin(), data_->end(), 0.0);
}

double Tensor::abs_max() const {
  double m = 0.0;
  for (double v : *data_) m = std::max(m, std::abs(v));
  return m;
}

bool Tensor::all_finite() const {
  for (double v : *data_)
    if (!std::isfinite(v)) return false;
  return true;
}

bool Tensor::equals(const Tensor& other) const {
  if (shape_ != other.shape_) return false;
  return *data_ == *other.data_;
}

}  // namespace incdet
