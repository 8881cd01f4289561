#include "incdet/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>

namespace incdet::ad {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

Var Graph::make(Tensor value, std::vector<Var> parents, std::function<void()> backprop) {
  bool rg = false;
  for (Var p : parents) rg = rg || p->requires_grad;
  nodes_.emplace_back();
  Node& n = nodes_.back();
  n.value = std::move(value);
  n.requires_grad = rg;
  if (rg) n.backprop = std::move(backprop);
  return &n;
}

Tensor& Graph::grad_of(Var v) {
  if (!v->grad.defined()) v->grad = Tensor::zeros(v->value.shape());
  return v->grad;
}

Var Graph::leaf(const Tensor& v, bool requires_grad, int param_index) {
  nodes_.emplace_back();
  Node& n = nodes_.back();
  n.value = v;
  n.requires_grad = requires_grad;
  n.param_index = param_index;
  return &n;
}

Var Graph::param_leaf(int param_index, const Tensor& value, bool requires_grad) {
  auto it = param_leaves_.find(param_index);
  if (it != param_leaves_.end()) return it->second;
  Var v = leaf(value, requires_grad, param_index);
  param_leaves_.emplace(param_index, v);
  return v;
}

Var Graph::add(Var a, Var b) {
  check(a->value.same_shape(b->value), "add: shape mismatch");
  Tensor out = a->value.clone();
  out.add_(b->value);
  Var r = make(std::move(out), {a, b}, nullptr);
  r->backprop = [this, a, b, r] {
    if (a->requires_grad) grad_of(a).add_(r->grad);
    if (b->requires_grad) grad_of(b).add_(r->grad);
  };
  return r;
}

Var Graph::sub(Var a, Var b) {
  check(a->value.same_shape(b->value), "sub: shape mismatch");
  Tensor out = a->value.clone();
  out.add_(b->value, -1.0);
  Var r = make(std::move(out), {a, b}, nullptr);
  r->backprop = [this, a, b, r] {
    if (a->requires_grad) grad_of(a).add_(r->grad);
    if (b->requires_grad) grad_of(b).add_(r->grad, -1.0);
  };
  return r;
}

Var Graph::mul(Var a, Var b) {
  check(a->value.same_shape(b->value), "mul: shape mismatch");
  const std::int64_t n = a->value.numel();
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < n; ++i) out[i] = a->value[i] * b->value[i];
  Var r = make(std::move(out), {a, b}, nullptr);
  r->backprop = [this, a, b, r, n] {
    if (a->requires_grad) {
      Tensor& ga = grad_of(a);
      for (std::int64_t i = 0; i < n; ++i) ga[i] += r->grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      Tensor& gb = grad_of(b);
      for (std::int64_t i = 0; i < n; ++i) gb[i] += r->grad[i] * a->value[i];
    }
  };
  return r;
}

Var Graph::scale(Var a, double s) {
  Tensor out = a->value.clone();
  out.scale_(s);
  Var r = make(std::move(out), {a}, nullptr);
  r->backprop = [this, a, r, s] {
    if (a->requires_grad) grad_of(a).add_(r->grad, s);
  };
  return r;
}

Var Graph::relu(Var a) {
  const std::int64_t n = a->value.numel();
  Tensor out(a->value.shape());
  for (std::int64_t i = 0; i < n; ++i) out[i] = a->value[i] > 0 ? a->value[i] : 0.0;
  Var r = make(std::move(out), {a}, nullptr);
  r->backprop = [this, a, r, n] {
    if (!a->requires_grad) return;
    Tensor& ga = grad_of(a);
    for (std::int64_t i = 0; i < n; ++i)
      if (a->value[i] > 0) ga[i] += r->grad[i];
  };
  return r;
}

Var Graph::sqrt_scalar(Var a) {
  check(a->value.numel() == 1, "sqrt_scalar: expected scalar");
  const double v = a->value[0];
  check(v >= 0, "sqrt_scalar: negative input");
  Tensor out = Tensor::scalar(std::sqrt(v));
  Var r = make(std::move(out), {a}, nullptr);
  r->backprop = [this, a, r] {
    if (!a->requires_grad) return;
    const double s = r->value[0];
    check(s > 0, "sqrt_scalar: gradient undefined at zero");
    grad_of(a)[0] += r->grad[0] * 0.5 / s;
  };
  return r;
}

Var Graph::recip_scalar(Var a) {
  check(a->value.numel() == 1, "recip_scalar: expected scalar");
  const double v = a->value[0];
  check(v != 0, "recip_scalar: division by zero");
  Var r = make(Tensor::scalar(1.0 / v), {a}, nullptr);
  r->backprop = [this, a, r] {
    if (!a->requires_grad) return;
    const double inv = r->value[0];
    grad_of(a)[0] -= r->grad[0] * inv * inv;
  };
  return r;
}

Var Graph::sum(Var a) {
  Var r = make(Tensor::scalar(a->value.sum()), {a}, nullptr);
  r->backprop = [this, a, r] {
    if (!a->requires_grad) return;
    Tensor& ga = grad_of(a);
    const double g = r->grad[0];
    const std::int64_t n = ga.numel();
    for (std::int64_t i = 0; i < n; ++i) ga[i] += g;
  };
  return r;
}

Var Graph::sum_channels(Var a) {
  check(a->value.ndim() == 3, "sum_channels: expected [C,H,W]");
  const int c = a->value.dim(0), h = a->value.dim(1), w = a->value.dim(2);
  Tensor out({h, w});
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  for (int ci = 0; ci < c; ++ci) {
    const double* src = a->value.data() + ci * hw;
    double* dst = out.data();
    for (std::int64_t i = 0; i < hw; ++i) dst[i] += src[i];
  }
  Var r = make(std::move(out), {a}, nullptr);
  r->backprop = [this, a, r, c, hw] {
    if (!a->requires_grad) return;
    Tensor& ga = grad_of(a);
    for (int ci = 0; ci < c; ++ci) {
      double* dst = ga.data() + ci * hw;
      const double* g = r->grad.data();
      for (std::int64_t i = 0; i < hw; ++i) dst[i] += g[i];
    }
  };
  return r;
}

Var Graph::mul_spatial(Var map, Var x) {
  check(x->value.ndim() == 3 && map->value.ndim() == 2, "mul_spatial: expected [H,W] and [C,H,W]");
  check(map->value.dim(0) == x->value.dim(1) && map->value.dim(1) == x->value.dim(2),
        "mul_spatial: spatial shape mismatch");
  const int c = x->value.dim(0);
  const std::int64_t hw = static_cast<std::int64_t>(x->value.dim(1)) * x->value.dim(2);
  Tensor out(x->value.shape());
  for (int ci = 0; ci < c; ++ci) {
    const double* xs = x->value.data() + ci * hw;
    const double* m = map->value.data();
    double* dst = out.data() + ci * hw;
    for (std::int64_t i = 0; i < hw; ++i) dst[i] = m[i] * xs[i];
  }
  Var r = make(std::move(out), {map, x}, nullptr);
  r->backprop = [this, map, x, r, c, hw] {
    if (map->requires_grad) {
      Tensor& gm = grad_of(map);
      for (int ci = 0; ci < c; ++ci) {
        const double* g = r->grad.data() + ci * hw;
        const double* xs = x->value.data() + ci * hw;
        for (std::int64_t i = 0; i < hw; ++i) gm[i] += g[i] * xs[i];
      }
    }
    if (x->requires_grad) {
      Tensor& gx = grad_of(x);
      const double* m = map->value.data();
      for (int ci = 0; ci < c; ++ci) {
        const double* g = r->grad.data() + ci * hw;
        double* dst = gx.data() + ci * hw;
        for (std::int64_t i = 0; i < hw; ++i) dst[i] += g[i] * m[i];
      }
    }
  };
  return r;
}

Var Graph::scale_by(Var scalar, Var x) {
  check(scalar->value.numel() == 1, "scale_by: expected scalar");
  const double s = scalar->value[0];
  Tensor out = x->value.clone();
  out.scale_(s);
  Var r = make(std::move(out), {scalar, x}, nullptr);
  r->backprop = [this, scalar, x, r, s] {
    if (scalar->requires_grad) {
      double acc = 0;
      const std::int64_t n = x->value.numel();
      for (std::int64_t i = 0; i < n; ++i) acc += r->grad[i] * x->value[i];
      grad_of(scalar)[0] += acc;
    }
    if (x->requires_grad) grad_of(x).add_(r->grad, s);
  };
  return r;
}

Var Graph::reshape(Var a, std::vector<int> shape) {
  Var r = make(a->value.reshaped(std::move(shape)), {a}, nullptr);
  r->backprop = [this, a, r] {
    if (a->requires_grad) grad_of(a).add_(r->grad);  // flat add, same numel
  };
  return r;
}

Var Graph::gather(Var a, std::vector<std::int64_t> idx) {
  const std::int64_t total = a->value.numel();
  Tensor out({static_cast<int>(idx.size())});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    check(idx[i] >= 0 && idx[i] < total, "gather: index out of range");
    out[static_cast<std::int64_t>(i)] = a->value[idx[i]];
  }
  auto ids = std::make_shared<std::vector<std::int64_t>>(std::move(idx));
  Var r = make(std::move(out), {a}, nullptr);
  r->backprop = [this, a, r, ids] {
    if (!a->requires_grad) return;
    Tensor& ga = grad_of(a);
    for (std::size_t i = 0; i < ids->size(); ++i)
      ga[(*ids)[i]] += r->grad[static_cast<std::int64_t>(i)];
  };
  return r;
}

namespace {

// im2col for [Cin,H,W] -> [Cin*kh*kw, Ho*Wo]
void im2col(const Tensor& x, int kh, int kw, int stride, int pad, RowMat& cols, int ho, int wo) {
  const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  cols.resize(cin * kh * kw, ho * wo);
  for (int c = 0; c < cin; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const int row = (c * kh + ki) * kw + kj;
        double* dst = cols.data() + static_cast<std::int64_t>(row) * (ho * wo);
        for (int oi = 0; oi < ho; ++oi) {
          const int ii = oi * stride - pad + ki;
          if (ii < 0 || ii >= h) {
            std::fill(dst + oi * wo, dst + (oi + 1) * wo, 0.0);
            continue;
          }
          const double* src = x.data() + (static_cast<std::int64_t>(c) * h + ii) * w;
          for (int oj = 0; oj < wo; ++oj) {
            const int jj = oj * stride - pad + kj;
            dst[oi * wo + oj] = (jj < 0 || jj >= w) ? 0.0 : src[jj];
          }
        }
      }
    }
  }
}

void col2im_accum(const RowMat& cols, Tensor& dx, int kh, int kw, int stride, int pad, int ho, int wo) {
  const int cin = dx.dim(0), h = dx.dim(1), w = dx.dim(2);
  for (int c = 0; c < cin; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const int row = (c * kh + ki) * kw + kj;
        const double* src = cols.data() + static_cast<std::int64_t>(row) * (ho * wo);
        for (int oi = 0; oi < ho; ++oi) {
          const int ii = oi * stride - pad + ki;
          if (ii < 0 || ii >= h) continue;
          double* dst = dx.data() + (static_cast<std::int64_t>(c) * h + ii) * w;
          for (int oj = 0; oj < wo; ++oj) {
            const int jj = oj * stride - pad + kj;
            if (jj >= 0 && jj < w) dst[jj] += src[oi * wo + oj];
          }
        }
      }
    }
  }
}

}  // namespace

Var Graph::conv2d(Var x, Var w, Var b, int stride, int pad) {
  check(x->value.ndim() == 3 && w->value.ndim() == 4, "conv2d: expected [Cin,H,W] and [Cout,Cin,kh,kw]");
  const int cin = x->value.dim(0), h = x->value.dim(1), wd = x->value.dim(2);
  const int cout = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
  check(w->value.dim(1) == cin, "conv2d: channel mismatch");
  check(b->value.numel() == cout, "conv2d: bias size mismatch");
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  check(ho > 0 && wo > 0, "conv2d: empty output");

  auto cols = std::make_shared<RowMat>();
  im2col(x->value, kh, kw, stride, pad, *cols, ho, wo);

  const int k = cin * kh * kw;
  CMapRM wmat(w->value.data(), cout, k);
  Tensor out({cout, ho, wo});
  MapRM omat(out.data(), cout, ho * wo);
  omat.noalias() = wmat * (*cols);
  for (int c = 0; c < cout; ++c) omat.row(c).array() += b->value[c];

  Var r = make(std::move(out), {x, w, b}, nullptr);
  r->backprop = [this, x, w, b, r, cols, cout, k, kh, kw, stride, pad, ho, wo] {
    CMapRM g(r->grad.data(), cout, ho * wo);
    if (b->requires_grad) {
      Tensor& gb = grad_of(b);
      for (int c = 0; c < cout; ++c) gb[c] += g.row(c).sum();
    }
    if (w->requires_grad) {
      Tensor& gw = grad_of(w);
      MapRM gwm(gw.data(), cout, k);
      gwm.noalias() += g * cols->transpose();
    }
    if (x->requires_grad) {
      CMapRM wmat(w->value.data(), cout, k);
      RowMat dcols = wmat.transpose() * g;
      Tensor& gx = grad_of(x);
      col2im_accum(dcols, gx, kh, kw, stride, pad, ho, wo);
    }
  };
  return r;
}

Var Graph::group_norm(Var x, Var gamma, Var beta, int groups, double eps) {
  check(x->value.ndim() == 3, "group_norm: expected [C,H,W]");
  const int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
  check(c % groups == 0, "group_norm: channels not divisible by groups");
  check(gamma->value.numel() == c && beta->value.numel() == c, "group_norm: affine size mismatch");
  const int gc = c / groups;
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  const std::int64_t m = gc * hw;

  Tensor out({c, h, w});
  auto xhat = std::make_shared<Tensor>(Tensor::zeros({c, h, w}));
  auto inv_std = std::make_shared<std::vector<double>>(groups, 0.0);

  for (int g = 0; g < groups; ++g) {
    const double* xs = x->value.data() + g * m;
    double mean = 0;
    for (std::int64_t i = 0; i < m; ++i) mean += xs[i];
    mean /= static_cast<double>(m);
    double var = 0;
    for (std::int64_t i = 0; i < m; ++i) {
      const double d = xs[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(m);
    const double istd = 1.0 / std::sqrt(var + eps);
    (*inv_std)[g] = istd;
    double* xh = xhat->data() + g * m;
    double* o = out.data() + g * m;
    for (std::int64_t i = 0; i < m; ++i) {
      xh[i] = (xs[i] - mean) * istd;
      const int ch = g * gc + static_cast<int>(i / hw);
      o[i] = gamma->value[ch] * xh[i] + beta->value[ch];
    }
  }

  Var r = make(std::move(out), {x, gamma, beta}, nullptr);
  r->backprop = [this, x, gamma, beta, r, xhat, inv_std, groups, gc, hw, m] {
    const int c = x->value.dim(0);
    if (beta->requires_grad) {
      Tensor& gb = grad_of(beta);
      for (int ch = 0; ch < c; ++ch) {
        const double* g = r->grad.data() + ch * hw;
        double acc = 0;
        for (std::int64_t i = 0; i < hw; ++i) acc += g[i];
        gb[ch] += acc;
      }
    }
    if (gamma->requires_grad) {
      Tensor& gg = grad_of(gamma);
      for (int ch = 0; ch < c; ++ch) {
        const double* g = r->grad.data() + ch * hw;
        const double* xh = xhat->data() + ch * hw;
        double acc = 0;
        for (std::int64_t i = 0; i < hw; ++i) acc += g[i] * xh[i];
        gg[ch] += acc;
      }
    }
    if (x->requires_grad) {
      Tensor& gx = grad_of(x);
      for (int g = 0; g < groups; ++g) {
        const double* gr = r->grad.data() + g * m;
        const double* xh = xhat->data() + g * m;
        double sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (std::int64_t i = 0; i < m; ++i) {
          const int ch = g * gc + static_cast<int>(i / hw);
          const double dxh = gr[i] * gamma->value[ch];
          sum_dxhat += dxh;
          sum_dxhat_xhat += dxh * xh[i];
        }
        const double istd = (*inv_std)[g];
        double* dst = gx.data() + g * m;
        const double inv_m = 1.0 / static_cast<double>(m);
        for (std::int64_t i = 0; i < m; ++i) {
          const int ch = g * gc + static_cast<int>(i / hw);
          const double dxh = gr[i] * gamma->value[ch];
          dst[i] += istd * (dxh - inv_m * sum_dxhat - xh[i] * inv_m * sum_dxhat_xhat);
        }
      }
    }
  };
  return r;
}

Var Graph::linear(Var x, Var w, Var b) {
  check(x->value.ndim() == 2 && w->value.ndim() == 2, "linear: expected [N,D] and [O,D]");
  const int n = x->value.dim(0), d = x->value.dim(1), o = w->value.dim(0);
  check(w->value.dim(1) == d, "linear: dimension mismatch");
  check(b->value.numel() == o, "linear: bias size mismatch");
  Tensor out({n, o});
  CMapRM xm(x->value.data(), n, d);
  CMapRM wm(w->value.data(), o, d);
  MapRM om(out.data(), n, o);
  om.noalias() = xm * wm.transpose();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < o; ++j) out.at(i, j) += b->value[j];

  Var r = make(std::move(out), {x, w, b}, nullptr);
  r->backprop = [this, x, w, b, r, n, d, o] {
    CMapRM g(r->grad.data(), n, o);
    if (b->requires_grad) {
      Tensor& gb = grad_of(b);
      for (int j = 0; j < o; ++j) gb[j] += g.col(j).sum();
    }
    if (w->requires_grad) {
      MapRM gw(grad_of(w).data(), o, d);
      CMapRM xm(x->value.data(), n, d);
      gw.noalias() += g.transpose() * xm;
    }
    if (x->requires_grad) {
      MapRM gx(grad_of(x).data(), n, d);
      CMapRM wm(w->value.data(), o, d);
      gx.noalias() += g * wm;
    }
  };
  return r;
}

namespace {
struct PoolBin {
  int lo, hi;
};
inline PoolBin pool_bin(int start, int extent, int bins, int b) {
  PoolBin r;
  r.lo = start + static_cast<int>(std::floor(static_cast<double>(b) * extent / bins));
  r.hi = start + static_cast<int>(std::ceil(static_cast<double>(b + 1) * extent / bins));
  if (r.hi <= r.lo) r.hi = r.lo + 1;
  return r;
}
}  // namespace

Var Graph::roi_avg_pool(Var x, const std::vector<GridRect>& rects, int out_h, int out_w) {
  check(x->value.ndim() == 3, "roi_avg_pool: expected [C,H,W]");
  const int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
  const int nr = static_cast<int>(rects.size());
  const int feat = c * out_h * out_w;
  Tensor out({nr, feat});
  auto rcopy = std::make_shared<std::vector<GridRect>>(rects);
  for (int ri = 0; ri < nr; ++ri) {
    const GridRect& rect = rects[static_cast<std::size_t>(ri)];
    if (rect.empty()) continue;  // zero features for degenerate rects
    check(rect.r1 >= 0 && rect.c1 >= 0 && rect.r2 <= h && rect.c2 <= w, "roi_avg_pool: rect out of grid");
    for (int bi = 0; bi < out_h; ++bi) {
      const PoolBin rb = pool_bin(rect.r1, rect.rows(), out_h, bi);
      for (int bj = 0; bj < out_w; ++bj) {
        const PoolBin cb = pool_bin(rect.c1, rect.cols(), out_w, bj);
        const double inv = 1.0 / ((rb.hi - rb.lo) * (cb.hi - cb.lo));
        for (int ci = 0; ci < c; ++ci) {
          double acc = 0;
          for (int i = rb.lo; i < rb.hi; ++i)
            for (int j = cb.lo; j < cb.hi; ++j) acc += x->value.at(ci, i, j);
          out.at(ri, (ci * out_h + bi) * out_w + bj) = acc * inv;
        }
      }
    }
  }
  Var r = make(std::move(out), {x}, nullptr);
  r->backprop = [this, x, r, rcopy, c, out_h, out_w] {
    if (!x->requires_grad) return;
    Tensor& gx = grad_of(x);
    for (int ri = 0; ri < static_cast<int>(rcopy->size()); ++ri) {
      const GridRect& rect = (*rcopy)[static_cast<std::size_t>(ri)];
      if (rect.empty()) continue;
      for (int bi = 0; bi < out_h; ++bi) {
        const PoolBin rb = pool_bin(rect.r1, rect.rows(), out_h, bi);
        for (int bj = 0; bj < out_w; ++bj) {
          const PoolBin cb = pool_bin(rect.c1, rect.cols(), out_w, bj);
          const double inv = 1.0 / ((rb.hi - rb.lo) * (cb.hi - cb.lo));
          for (int ci = 0; ci < c; ++ci) {
            const double g = r->grad.at(ri, (ci * out_h + bi) * out_w + bj) * inv;
            for (int i = rb.lo; i < rb.hi; ++i)
              for (int j = cb.lo; j < cb.hi; ++j) gx.at(ci, i, j) += g;
          }
        }
      }
    }
  };
  return r;
}

Var Graph::softmax_cross_entropy(Var logits, const std::vector<int>& labels) {
  check(logits->value.ndim() == 2, "softmax_ce: expected [N,K]");
  const int n = logits->value.dim(0), k = logits->value.dim(1);
  check(static_cast<int>(labels.size()) == n, "softmax_ce: label count mismatch");
  auto probs = std::make_shared<Tensor>(Tensor::zeros({n, k}));
  double loss = 0;
  for (int i = 0; i < n; ++i) {
    check(labels[static_cast<std::size_t>(i)] >= 0 && labels[static_cast<std::size_t>(i)] < k,
          "softmax_ce: label out of range");
    double mx = logits->value.at(i, 0);
    for (int j = 1; j < k; ++j) mx = std::max(mx, logits->value.at(i, j));
    double z = 0;
    for (int j = 0; j < k; ++j) z += std::exp(logits->value.at(i, j) - mx);
    const double logz = std::log(z);
    for (int j = 0; j < k; ++j) probs->at(i, j) = std::exp(logits->value.at(i, j) - mx) / z;
    loss += logz - (logits->value.at(i, labels[static_cast<std::size_t>(i)]) - mx);
  }
  loss /= n;
  auto lcopy = std::make_shared<std::vector<int>>(labels);
  Var r = make(Tensor::scalar(loss), {logits}, nullptr);
  r->backprop = [this, logits, r, probs, lcopy, n, k] {
    if (!logits->requires_grad) return;
    Tensor& g = grad_of(logits);
    const double s = r->grad[0] / n;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j)
        g.at(i, j) += s * (probs->at(i, j) - (j == (*lcopy)[static_cast<std::size_t>(i)] ? 1.0 : 0.0));
  };
  return r;
}

Var Graph::bce_with_logits(Var logits, const Tensor& targets) {
  check(logits->value.numel() == targets.numel(), "bce: size mismatch");
  const std::int64_t n = logits->value.numel();
  check(n > 0, "bce: empty input");
  double loss = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double z = logits->value[i];
    const double t = targets[i];
    loss += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
  }
  loss /= static_cast<double>(n);
  Tensor tcopy = targets.clone();
  Var r = make(Tensor::scalar(loss), {logits}, nullptr);
  r->backprop = [this, logits, r, tcopy, n] {
    if (!logits->requires_grad) return;
    Tensor& g = grad_of(logits);
    const double s = r->grad[0] / static_cast<double>(n);
    for (std::int64_t i = 0; i < n; ++i) {
      const double sig = 1.0 / (1.0 + std::exp(-logits->value[i]));
      g[i] += s * (sig - tcopy[i]);
    }
  };
  return r;
}

Var Graph::smooth_l1(Var pred, const Tensor& target, double beta) {
  check(pred->value.numel() == target.numel(), "smooth_l1: size mismatch");
  check(beta > 0, "smooth_l1: beta must be positive");
  const std::int64_t n = pred->value.numel();
  double loss = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = pred->value[i] - target[i];
    const double a = std::abs(d);
    loss += a < beta ? 0.5 * d * d / beta : a - 0.5 * beta;
  }
  Tensor tcopy = target.clone();
  Var r = make(Tensor::scalar(loss), {pred}, nullptr);
  r->backprop = [this, pred, r, tcopy, beta, n] {
    if (!pred->requires_grad) return;
    Tensor& g = grad_of(pred);
    const double s = r->grad[0];
    for (std::int64_t i = 0; i < n; ++i) {
      const double d = pred->value[i] - tcopy[i];
      g[i] += s * std::clamp(d / beta, -1.0, 1.0);
    }
  };
  return r;
}

void Graph::backward(Var loss) {
  check(loss->value.numel() == 1, "backward: loss must be scalar");
  check(loss->requires_grad, "backward: loss does not require grad");
  grad_of(loss)[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->grad.defined() && it->backprop) it->backprop();
  }
}

void Graph::for_each_param_grad(const std::function<void(int, const Tensor&)>& fn) const {
  for (const auto& [index, var] : param_leaves_) {
    if (var->grad.defined()) fn(index, var->grad);
  }
}

}  // namespace incdet::ad
