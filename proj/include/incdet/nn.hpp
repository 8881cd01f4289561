#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "incdet/autodiff.hpp"
#include "incdet/tensor.hpp"

namespace incdet::nn {

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  bool frozen = false;
  int index = -1;

  void zero_grad() { grad.fill(0.0); }
};

using ParamPtr = std::shared_ptr<Param>;

// Owns parameters in creation order; indices are stable and used to route
// per-graph gradients back to the right accumulator.
class ParamRegistry {
 public:
  ParamPtr create(const std::string& name, Tensor init);
  const std::vector<ParamPtr>& all() const { return params_; }
  ParamPtr at(int index) const { return params_[static_cast<std::size_t>(index)]; }
  std::size_t size() const { return params_.size(); }

 private:
  std::vector<ParamPtr> params_;
};

inline ad::Var pvar(ad::Graph& g, const Param& p) {
  return g.param_leaf(p.index, p.value, !p.frozen);
}

Tensor he_normal(std::vector<int> shape, int fan_in, std::mt19937_64& rng);

struct Conv2d {
  ParamPtr w, b;
  int stride = 1, pad = 1;

  Conv2d() = default;
  Conv2d(ParamRegistry& reg, const std::string& name, int cin, int cout, int ksize, int stride,
         std::mt19937_64& rng);
  ad::Var forward(ad::Graph& g, ad::Var x) const {
    return g.conv2d(x, pvar(g, *w), pvar(g, *b), stride, pad);
  }
};

struct GroupNorm {
  ParamPtr gamma, beta;
  int groups = 1;

  GroupNorm() = default;
  GroupNorm(ParamRegistry& reg, const std::string& name, int channels);
  ad::Var forward(ad::Graph& g, ad::Var x) const {
    return g.group_norm(x, pvar(g, *gamma), pvar(g, *beta), groups);
  }
};

struct Linear {
  ParamPtr w, b;

  Linear() = default;
  Linear(ParamRegistry& reg, const std::string& name, int in, int out, std::mt19937_64& rng);
  ad::Var forward(ad::Graph& g, ad::Var x) const {
    return g.linear(x, pvar(g, *w), pvar(g, *b));
  }
};

// Plain SGD with momentum. Frozen parameters are refused at registration.
class SgdMomentum {
 public:
  explicit SgdMomentum(double momentum = 0.9) : momentum_(momentum) {}

  void add(const ParamPtr& p);
  void add_all(const std::vector<ParamPtr>& params);  // skips frozen
  void step(double lr);
  void zero_grads();
  std::size_t size() const { return params_.size(); }

 private:
  double momentum_;
  std::vector<ParamPtr> params_;
  std::vector<Tensor> velocity_;
};

}  // namespace incdet::nn
