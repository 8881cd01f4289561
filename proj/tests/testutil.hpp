#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "incdet/tensor.hpp"

namespace incdet::testutil {

// Central finite difference of a scalar function w.r.t. one coordinate.
inline double central_diff(const std::function<double()>& f, double& x, double h) {
  const double x0 = x;
  x = x0 + h;
  const double fp = f();
  x = x0 - h;
  const double fm = f();
  x = x0;
  return (fp - fm) / (2 * h);
}

struct GradCheckResult {
  double max_err = 0.0;
  std::int64_t worst_index = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool ok(double tol) const { return max_err <= tol; }
};

// Compares analytic gradients against central differences over every entry
// of `values`. Error is relative with an absolute floor so near-zero
// gradients do not blow up the ratio.
inline GradCheckResult check_gradient(const std::function<double()>& f, Tensor& values,
                                      const Tensor& analytic, double h = 1e-3,
                                      double floor_scale = 1e-4) {
  GradCheckResult r;
  for (std::int64_t i = 0; i < values.numel(); ++i) {
    const double num = central_diff(f, values[i], h);
    const double ana = analytic[i];
    const double err = std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), floor_scale});
    if (err > r.max_err) {
      r.max_err = err;
      r.worst_index = i;
      r.analytic_at_worst = ana;
      r.numeric_at_worst = num;
    }
  }
  return r;
}

inline Tensor random_tensor(std::vector<int> shape, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
  return t;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    auto base = std::filesystem::temp_directory_path();
    for (int i = 0; i < 10000; ++i) {
      auto p = base / (tag + "_" + std::to_string(i));
      std::error_code ec;
      if (std::filesystem::create_directories(p, ec)) {
        path_ = p;
        return;
      }
    }
    throw std::runtime_error("TempDir: could not create directory");
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace incdet::testutil
