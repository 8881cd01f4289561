#include "incdet/autodiff.hpp"

#include <random>

#include "doctest.h"
#include "testutil.hpp"

using namespace incdet;
using incdet::testutil::check_gradient;
using incdet::testutil::random_tensor;

namespace {

Tensor grad_of_input(const std::function<ad::Var(ad::Graph&, ad::Var)>& build, const Tensor& input) {
  ad::Graph g;
  ad::Var x = g.leaf(input, true);
  ad::Var loss = build(g, x);
  g.backward(loss);
  return x->grad.defined() ? x->grad : Tensor::zeros(input.shape());
}

double value_of(const std::function<ad::Var(ad::Graph&, ad::Var)>& build, const Tensor& input) {
  ad::Graph g;
  ad::Var x = g.leaf(input, false);
  ad::Var loss = build(g, x);
  return loss->value[0];
}

void expect_grad_matches(const std::function<ad::Var(ad::Graph&, ad::Var)>& build, Tensor input,
                         double h = 1e-4, double tol = 1e-6) {
  Tensor analytic = grad_of_input(build, input);
  auto f = [&] { return value_of(build, input); };
  auto r = check_gradient(f, input, analytic, h);
  INFO("worst index ", r.worst_index, " analytic ", r.analytic_at_worst, " numeric ",
       r.numeric_at_worst);
  CHECK(r.max_err <= tol);
}

}  // namespace

TEST_CASE("add/sub/mul/scale gradients") {
  std::mt19937_64 rng(7);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({3, 4}, rng);
  expect_grad_matches(
      [&](ad::Graph& g, ad::Var x) {
        ad::Var y = g.constant(b);
        return g.sum(g.mul(g.add(x, y), g.sub(x, y)));
      },
      a);
  expect_grad_matches([&](ad::Graph& g, ad::Var x) { return g.scale(g.sum(g.mul(x, x)), 0.5); }, a);
}

TEST_CASE("mul with repeated operand accumulates both paths") {
  Tensor a({2}, {3.0, -2.0});
  ad::Graph g;
  ad::Var x = g.leaf(a, true);
  ad::Var y = g.sum(g.mul(x, x));
  g.backward(y);
  CHECK(x->grad[0] == doctest::Approx(6.0));
  CHECK(x->grad[1] == doctest::Approx(-4.0));
}

TEST_CASE("relu gradient") {
  std::mt19937_64 rng(11);
  Tensor a = random_tensor({5, 5}, rng, -1.0, 1.0);
  // keep values away from the kink
  for (std::int64_t i = 0; i < a.numel(); ++i)
    if (std::abs(a[i]) < 0.05) a[i] = 0.1;
  expect_grad_matches([&](ad::Graph& g, ad::Var x) { return g.sum(g.mul(g.relu(x), g.relu(x))); },
                      a);
}

TEST_CASE("sqrt and recip scalar gradients") {
  Tensor a({1}, {2.37});
  expect_grad_matches(
      [&](ad::Graph& g, ad::Var x) { return g.recip_scalar(g.sqrt_scalar(g.sum(g.mul(x, x)))); },
      a);
}

TEST_CASE("sum_channels and mul_spatial gradients") {
  std::mt19937_64 rng(13);
  Tensor x = random_tensor({3, 2, 4}, rng);
  expect_grad_matches(
      [&](ad::Graph& g, ad::Var v) {
        ad::Var att = g.sum_channels(g.mul(v, v));
        ad::Var weighted = g.mul_spatial(att, v);
        return g.sum(g.mul(weighted, weighted));
      },
      x);
}

TEST_CASE("scale_by gradient through both operands") {
  std::mt19937_64 rng(17);
  Tensor x = random_tensor({4}, rng, 0.5, 1.5);
  expect_grad_matches(
      [&](ad::Graph& g, ad::Var v) {
        ad::Var n = g.sqrt_scalar(g.sum(g.mul(v, v)));
        return g.sum(g.scale_by(g.recip_scalar(n), v));
      },
      x);
}

TEST_CASE("reshape and gather gradients") {
  std::mt19937_64 rng(19);
  Tensor x = random_tensor({2, 6}, rng);
  expect_grad_matches(
      [&](ad::Graph& g, ad::Var v) {
        ad::Var r = g.reshape(v, {3, 4});
        ad::Var picked = g.gather(r, {0, 5, 5, 11});
        return g.sum(g.mul(picked, picked));
      },
      x);
}

TEST_CASE("conv2d gradients for input, weight and bias") {
  std::mt19937_64 rng(23);
  Tensor x = random_tensor({2, 5, 6}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5);
  Tensor b = random_tensor({3}, rng, -0.2, 0.2);

  auto loss_with = [&](const Tensor& xv, const Tensor& wv, const Tensor& bv, bool grads,
                       Tensor* gx, Tensor* gw, Tensor* gb) {
    ad::Graph g;
    ad::Var xn = g.leaf(xv, grads);
    ad::Var wn = g.leaf(wv, grads);
    ad::Var bn = g.leaf(bv, grads);
    ad::Var y = g.conv2d(xn, wn, bn, 2, 1);
    ad::Var loss = g.sum(g.mul(y, y));
    if (grads) {
      g.backward(loss);
      *gx = xn->grad;
      *gw = wn->grad;
      *gb = bn->grad;
    }
    return loss->value[0];
  };

  Tensor gx, gw, gb;
  loss_with(x, w, b, true, &gx, &gw, &gb);

  auto fx = [&] { return loss_with(x, w, b, false, nullptr, nullptr, nullptr); };
  CHECK(check_gradient(fx, x, gx, 1e-4).max_err <= 1e-6);
  CHECK(check_gradient(fx, w, gw, 1e-4).max_err <= 1e-6);
  CHECK(check_gradient(fx, b, gb, 1e-4).max_err <= 1e-6);
}

TEST_CASE("conv2d output shape") {
  ad::Graph g;
  ad::Var x = g.constant(Tensor::zeros({3, 16, 16}));
  ad::Var w = g.constant(Tensor::zeros({8, 3, 3, 3}));
  ad::Var b = g.constant(Tensor::zeros({8}));
  ad::Var y = g.conv2d(x, w, b, 2, 1);
  CHECK(y->value.shape() == std::vector<int>{8, 8, 8});
}

TEST_CASE("group_norm gradients") {
  std::mt19937_64 rng(29);
  Tensor x = random_tensor({4, 3, 3}, rng);
  Tensor gamma = random_tensor({4}, rng, 0.5, 1.5);
  Tensor beta = random_tensor({4}, rng, -0.3, 0.3);

  auto loss_with = [&](bool grads, Tensor* gx, Tensor* gg, Tensor* gb) {
    ad::Graph g;
    ad::Var xn = g.leaf(x, grads);
    ad::Var gn = g.leaf(gamma, grads);
    ad::Var bn = g.leaf(beta, grads);
    ad::Var y = g.group_norm(xn, gn, bn, 2);
    ad::Var w = g.relu(y);
    ad::Var loss = g.sum(g.mul(w, y));
    if (grads) {
      g.backward(loss);
      *gx = xn->grad;
      *gg = gn->grad;
      *gb = bn->grad;
    }
    return loss->value[0];
  };

  Tensor gx, gg, gb;
  loss_with(true, &gx, &gg, &gb);
  auto f = [&] { return loss_with(false, nullptr, nullptr, nullptr); };
  CHECK(check_gradient(f, x, gx, 1e-5).max_err <= 1e-5);
  CHECK(check_gradient(f, gamma, gg, 1e-5).max_err <= 1e-5);
  CHECK(check_gradient(f, beta, gb, 1e-5).max_err <= 1e-5);
}

TEST_CASE("linear gradients") {
  std::mt19937_64 rng(31);
  Tensor x = random_tensor({3, 4}, rng);
  Tensor w = random_tensor({2, 4}, rng);
  Tensor b = random_tensor({2}, rng);
  auto loss_with = [&](bool grads, Tensor* gx, Tensor* gw, Tensor* gb) {
    ad::Graph g;
    ad::Var xn = g.leaf(x, grads);
    ad::Var wn = g.leaf(w, grads);
    ad::Var bn = g.leaf(b, grads);
    ad::Var y = g.linear(xn, wn, bn);
    ad::Var loss = g.sum(g.mul(y, y));
    if (grads) {
      g.backward(loss);
      *gx = xn->grad;
      *gw = wn->grad;
      *gb = bn->grad;
    }
    return loss->value[0];
  };
  Tensor gx, gw, gb;
  loss_with(true, &gx, &gw, &gb);
  auto f = [&] { return loss_with(false, nullptr, nullptr, nullptr); };
  CHECK(check_gradient(f, x, gx, 1e-4).max_err <= 1e-6);
  CHECK(check_gradient(f, w, gw, 1e-4).max_err <= 1e-6);
  CHECK(check_gradient(f, b, gb, 1e-4).max_err <= 1e-6);
}

TEST_CASE("roi_avg_pool gradient and degenerate rect") {
  std::mt19937_64 rng(37);
  Tensor x = random_tensor({2, 8, 8}, rng);
  std::vector<GridRect> rects = {{0, 0, 5, 6}, {2, 3, 3, 4}, {1, 1, 1, 1}};  // last is empty
  expect_grad_matches(
      [&](ad::Graph& g, ad::Var v) {
        ad::Var p = g.roi_avg_pool(v, rects, 4, 4);
        return g.sum(g.mul(p, p));
      },
      x);
  ad::Graph g;
  ad::Var p = g.roi_avg_pool(g.constant(x), rects, 4, 4);
  for (int j = 0; j < 2 * 16; ++j) CHECK(p->value.at(2, j) == 0.0);
}

TEST_CASE("softmax cross entropy gradient and value") {
  std::mt19937_64 rng(41);
  Tensor logits = random_tensor({4, 3}, rng);
  std::vector<int> labels = {0, 2, 1, 2};
  auto loss_with = [&](bool grads, Tensor* gl) {
    ad::Graph g;
    ad::Var l = g.leaf(logits, grads);
    ad::Var loss = g.softmax_cross_entropy(l, labels);
    if (grads) {
      g.backward(loss);
      *gl = l->grad;
    }
    return loss->value[0];
  };
  Tensor gl;
  loss_with(true, &gl);
  auto f = [&] { return loss_with(false, nullptr); };
  CHECK(check_gradient(f, logits, gl, 1e-5).max_err <= 1e-6);

  // uniform logits -> loss = log(K)
  ad::Graph g;
  ad::Var l = g.constant(Tensor::zeros({2, 4}));
  CHECK(g.softmax_cross_entropy(l, {1, 3})->value[0] == doctest::Approx(std::log(4.0)));
}

TEST_CASE("bce_with_logits gradient") {
  std::mt19937_64 rng(43);
  Tensor logits = random_tensor({6}, rng, -2.0, 2.0);
  Tensor targets({6}, {1, 0, 1, 1, 0, 0});
  auto loss_with = [&](bool grads, Tensor* gl) {
    ad::Graph g;
    ad::Var l = g.leaf(logits, grads);
    ad::Var loss = g.bce_with_logits(l, targets);
    if (grads) {
      g.backward(loss);
      *gl = l->grad;
    }
    return loss->value[0];
  };
  Tensor gl;
  loss_with(true, &gl);
  auto f = [&] { return loss_with(false, nullptr); };
  CHECK(check_gradient(f, logits, gl, 1e-5).max_err <= 1e-6);
}

TEST_CASE("smooth_l1 gradient, zero at exact match, both regimes") {
  Tensor target({2, 2}, {1.0, -2.0, 0.5, 3.0});
  {
    ad::Graph g;
    ad::Var p = g.leaf(target.clone(), true);
    ad::Var loss = g.smooth_l1(p, target, 1.0);
    CHECK(loss->value[0] == 0.0);
  }
  std::mt19937_64 rng(47);
  Tensor pred = random_tensor({2, 2}, rng, -4.0, 4.0);
  // keep away from |d| == beta kink
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const double d = std::abs(pred[i] - target[i]);
    if (std::abs(d - 1.0) < 0.05) pred[i] += 0.2;
  }
  auto loss_with = [&](bool grads, Tensor* gp) {
    ad::Graph g;
    ad::Var p = g.leaf(pred, grads);
    ad::Var loss = g.smooth_l1(p, target, 1.0);
    if (grads) {
      g.backward(loss);
      *gp = p->grad;
    }
    return loss->value[0];
  };
  Tensor gp;
  loss_with(true, &gp);
  auto f = [&] { return loss_with(false, nullptr); };
  CHECK(check_gradient(f, pred, gp, 1e-5).max_err <= 1e-6);
}

TEST_CASE("no gradient flows into constants") {
  Tensor a({2}, {1.0, 2.0});
  ad::Graph g;
  ad::Var x = g.leaf(a, true);
  ad::Var c = g.constant(a);
  ad::Var loss = g.sum(g.mul(x, c));
  g.backward(loss);
  CHECK(x->grad.defined());
  CHECK_FALSE(c->grad.defined());
}

TEST_CASE("param_leaf memoizes per graph and reports gradients") {
  Tensor a({2}, {1.0, 2.0});
  ad::Graph g;
  ad::Var x1 = g.param_leaf(5, a, true);
  ad::Var x2 = g.param_leaf(5, a, true);
  CHECK(x1 == x2);
  ad::Var loss = g.sum(g.mul(x1, x2));
  g.backward(loss);
  int seen = 0;
  g.for_each_param_grad([&](int idx, const Tensor& grad) {
    ++seen;
    CHECK(idx == 5);
    CHECK(grad[0] == doctest::Approx(2.0));
    CHECK(grad[1] == doctest::Approx(4.0));
  });
  CHECK(seen == 1);
}
