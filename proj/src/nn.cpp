#include "incdet/nn.hpp"

#include <cmath>

namespace incdet::nn {

ParamPtr ParamRegistry::create(const std::string& name, Tensor init) {
  auto p = std::make_shared<Param>();
  p->name = name;
  p->value = std::move(init);
  p->grad = Tensor::zeros(p->value.shape());
  p->index = static_cast<int>(params_.size());
  params_.push_back(p);
  return p;
}

Tensor he_normal(std::vector<int> shape, int fan_in, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = dist(rng);
  return t;
}

Conv2d::Conv2d(ParamRegistry& reg, const std::string& name, int cin, int cout, int ksize,
               int stride_, std::mt19937_64& rng)
    : stride(stride_), pad(ksize / 2) {
  w = reg.create(name + ".w", he_normal({cout, cin, ksize, ksize}, cin * ksize * ksize, rng));
  b = reg.create(name + ".b", Tensor::zeros({cout}));
}

GroupNorm::GroupNorm(ParamRegistry& reg, const std::string& name, int channels) {
  gamma = reg.create(name + ".gamma", Tensor::full({channels}, 1.0));
  beta = reg.create(name + ".beta", Tensor::zeros({channels}));
  if (channels % 8 == 0)
    groups = 8;
  else if (channels % 4 == 0)
    groups = 4;
  else if (channels % 2 == 0)
    groups = 2;
  else
    groups = 1;
}

Linear::Linear(ParamRegistry& reg, const std::string& name, int in, int out, std::mt19937_64& rng) {
  w = reg.create(name + ".w", he_normal({out, in}, in, rng));
  b = reg.create(name + ".b", Tensor::zeros({out}));
}

void SgdMomentum::add(const ParamPtr& p) {
  check(!p->frozen, "optimizer: refusing frozen parameter " + p->name);
  params_.push_back(p);
  velocity_.push_back(Tensor::zeros(p->value.shape()));
}

void SgdMomentum::add_all(const std::vector<ParamPtr>& params) {
  for (const auto& p : params)
    if (!p->frozen) add(p);
}

void SgdMomentum::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Param& p = *params_[i];
    Tensor& v = velocity_[i];
    const std::int64_t n = p.value.numel();
    for (std::int64_t k = 0; k < n; ++k) {
      v[k] = momentum_ * v[k] + p.grad[k];
      p.value[k] -= lr * v[k];
    }
  }
}

void SgdMomentum::zero_grads() {
  for (auto& p : params_) p->zero_grad();
}

}  // namespace incdet::nn
