#pragma once

// Internal op machinery shared by translation units that define
// differentiable primitives. Not installed.

#include <span>
#include <utility>

#include "spvit/tensor.hpp"

namespace spvit::detail {

struct OpAccess {
  static bool in_graph(const Graph& g, const Tensor& t) {
    return t.node_ >= 0 && t.graph_epoch_ == g.epoch();
  }

  static bool tracked(const Graph& g, const Tensor& t) {
    return t.requires_grad_ || in_graph(g, t);
  }

  /// Node id of an operand, interning a leaf for requires_grad tensors
  /// that are not yet on the tape. -1 marks a constant.
  static int arg_node(Graph& g, const Tensor& t) {
    if (in_graph(g, t)) return t.node_;
    if (t.requires_grad_) return g.leaf_node(t);
    return -1;
  }

  static void record(Graph& g, Tensor& out, Graph::BackwardFn fn) {
    out.node_ = g.add_node(out.numel(), std::move(fn));
    out.graph_epoch_ = g.epoch();
    out.requires_grad_ = true;
  }

  static std::span<double> grad_buffer(Graph& g, int node) {
    return g.grad_buffer(node);
  }

  /// Reshape-style construction sharing the source storage (no re-scan).
  static Tensor share_data(const Tensor& src, Shape shape) {
    Tensor t;
    t.data_ = src.data_;
    t.shape_ = std::move(shape);
    return t;
  }
};

}  // namespace spvit::detail
