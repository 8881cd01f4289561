#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <unordered_map>
#include <vector>

#include "incdet/boxes.hpp"
#include "incdet/tensor.hpp"

namespace incdet::ad {

// Reverse-mode tape. One Graph per forward pass; ops execute eagerly and
// record a backprop closure. Node pointers stay valid for the graph's
// lifetime (deque storage).
struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily during backward
  bool requires_grad = false;
  int param_index = -1;  // >= 0 marks a parameter leaf
  std::function<void()> backprop;
};

using Var = Node*;

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var leaf(const Tensor& v, bool requires_grad = false, int param_index = -1);
  Var constant(const Tensor& v) { return leaf(v, false); }

  // Returns a memoized leaf for the given parameter index so each parameter
  // appears once per graph.
  Var param_leaf(int param_index, const Tensor& value, bool requires_grad);

  // elementwise / scalar
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  Var relu(Var a);
  Var sqrt_scalar(Var a);   // [1] -> [1]
  Var recip_scalar(Var a);  // [1] -> [1]

  // reductions and broadcasts
  Var sum(Var a);                    // -> [1]
  Var sum_channels(Var a);           // [C,H,W] -> [H,W]
  Var mul_spatial(Var map, Var x);   // [H,W] x [C,H,W] -> [C,H,W]
  Var scale_by(Var scalar, Var x);   // [1] x any -> same as x

  // shape / indexing
  Var reshape(Var a, std::vector<int> shape);
  Var gather(Var a, std::vector<std::int64_t> idx);  // flat gather -> [n]

  // neural net ops
  Var conv2d(Var x, Var w, Var b, int stride, int pad);
  Var group_norm(Var x, Var gamma, Var beta, int groups, double eps = 1e-5);
  Var linear(Var x, Var w, Var b);  // [N,D] x [O,D] -> [N,O]
  Var roi_avg_pool(Var x, const std::vector<GridRect>& rects, int out_h, int out_w);

  // losses (scalar outputs)
  Var softmax_cross_entropy(Var logits, const std::vector<int>& labels);  // mean
  Var bce_with_logits(Var logits, const Tensor& targets);                 // mean
  Var smooth_l1(Var pred, const Tensor& target, double beta = 1.0);       // sum

  void backward(Var loss);

  // Visits every parameter leaf that received a gradient.
  void for_each_param_grad(const std::function<void(int, const Tensor&)>& fn) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  Var make(Tensor value, std::vector<Var> parents, std::function<void()> backprop);
  Tensor& grad_of(Var v);

  std::deque<Node> nodes_;
  std::unordered_map<int, Var> param_leaves_;
};

}  // namespace incdet::ad
