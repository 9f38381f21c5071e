#include "spvit/tensor.hpp"

#include <Eigen/Core>

#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>

#include "op_access.hpp"

namespace spvit {

namespace {

using detail::OpAccess;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<const RowMat>;
using MutMatMap = Eigen::Map<RowMat>;
using ArrMap = Eigen::Map<const Eigen::ArrayXd>;
using MutArrMap = Eigen::Map<Eigen::ArrayXd>;

thread_local Graph* g_current = nullptr;
std::atomic<std::uint64_t> g_next_epoch{1};

MatMap mat(const Tensor& t) {
  return MatMap(t.data().data(), t.rows(), t.cols());
}

ArrMap arr(const Tensor& t) {
  return ArrMap(t.data().data(), t.numel());
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, std::int64_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + " tensor, got " +
                         shape_str(t.shape()));
  }
}

std::int64_t outer_numel(const Shape& s, int axis) {
  std::int64_t n = 1;
  for (int i = 0; i < axis; ++i) n *= s[static_cast<std::size_t>(i)];
  return n;
}

std::int64_t inner_numel(const Shape& s, int axis) {
  std::int64_t n = 1;
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i)
    n *= s[i];
  return n;
}

}  // namespace

// --- shape helpers ---------------------------------------------------------

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  out += "]";
  return out;
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    if (d <= 0) {
      throw DimensionError("shape dimensions must be positive, got " +
                           shape_str(s));
    }
    n *= d;
  }
  return n;
}

// --- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape shape, Vec values, bool requires_grad)
    : shape_(std::move(shape)), requires_grad_(requires_grad) {
  const std::int64_t n = shape_numel(shape_);
  if (n != static_cast<std::int64_t>(values.size())) {
    throw DimensionError("tensor data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape_));
  }
  if (!ArrMap(values.data(), n).allFinite()) {
    throw std::invalid_argument("tensor values must be finite (NaN/Inf rejected)");
  }
  data_ = std::make_shared<const Vec>(std::move(values));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor(Shape{}, Vec{v}, requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  const std::int64_t n = shape_numel(shape);
  return Tensor(std::move(shape), Vec(static_cast<std::size_t>(n), v),
                requires_grad);
}

std::int64_t Tensor::numel() const {
  if (!data_) return 0;
  return static_cast<std::int64_t>(data_->size());
}

std::int64_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw IndexError("axis " + std::to_string(axis) + " out of range for " +
                     shape_str(shape_));
  }
  return shape_[axis];
}

std::int64_t Tensor::rows() const {
  if (rank() != 2) throw DimensionError("rows(): tensor is not rank-2: " + shape_str(shape_));
  return shape_[0];
}

std::int64_t Tensor::cols() const {
  if (rank() != 2) throw DimensionError("cols(): tensor is not rank-2: " + shape_str(shape_));
  return shape_[1];
}

Tensor Tensor::detached(bool requires_grad) const {
  Tensor t;
  t.data_ = data_;
  t.shape_ = shape_;
  t.requires_grad_ = requires_grad;
  return t;
}

double Tensor::value() const {
  if (numel() != 1) {
    throw ContractError("value(): tensor has " + std::to_string(numel()) +
                        " elements, expected 1");
  }
  return (*data_)[0];
}

double Tensor::at(std::int64_t i) const {
  if (!data_ || i < 0 || i >= numel()) {
    throw IndexError("flat index " + std::to_string(i) + " out of range");
  }
  return (*data_)[static_cast<std::size_t>(i)];
}

double Tensor::at(std::int64_t i, std::int64_t j) const {
  if (rank() != 2 || i < 0 || j < 0 || i >= shape_[0] || j >= shape_[1]) {
    throw IndexError("index (" + std::to_string(i) + ", " + std::to_string(j) +
                     ") out of range for " + shape_str(shape_));
  }
  return (*data_)[static_cast<std::size_t>(i * shape_[1] + j)];
}

std::span<const double> Tensor::data() const {
  if (!data_) throw ContractError("tensor is empty");
  return {data_->data(), data_->size()};
}

// --- Gradients ---------------------------------------------------------------

bool Gradients::contains(const Tensor& param) const {
  return grads_.count(param.id()) > 0;
}

const Tensor& Gradients::at(const Tensor& param) const {
  auto it = grads_.find(param.id());
  if (it == grads_.end()) {
    throw ContractError("no gradient recorded for parameter " +
                        shape_str(param.shape()));
  }
  return it->second;
}

// --- Graph -------------------------------------------------------------------

Graph::Graph() : epoch_(g_next_epoch.fetch_add(1)) {}

Graph::~Graph() = default;

Graph::Recording::Recording(Graph& g) : prev_(g_current) { g_current = &g; }

Graph::Recording::~Recording() { g_current = prev_; }

Graph* Graph::current() noexcept { return g_current; }

int Graph::add_node(std::int64_t numel, BackwardFn fn) {
  nodes_.push_back(Node{numel, std::move(fn)});
  return static_cast<int>(nodes_.size()) - 1;
}

int Graph::leaf_node(const Tensor& param) {
  auto it = leaf_index_.find(param.id());
  if (it != leaf_index_.end()) return it->second;
  const int id = add_node(param.numel(), nullptr);
  leaf_index_.emplace(param.id(), id);
  leaves_.emplace_back(param, id);
  return id;
}

std::span<double> Graph::grad_buffer(int node) {
  auto& buf = grad_bufs_[static_cast<std::size_t>(node)];
  if (buf.empty()) {
    buf.assign(static_cast<std::size_t>(nodes_[static_cast<std::size_t>(node)].numel), 0.0);
  }
  return buf;
}

Gradients Graph::backward(const Tensor& loss) {
  if (loss.empty() || loss.node_ < 0 || loss.graph_epoch_ != epoch_) {
    throw ContractError("backward: loss was not recorded on this graph");
  }
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got " +
                        shape_str(loss.shape()));
  }
  grad_bufs_.assign(nodes_.size(), {});
  grad_bufs_[static_cast<std::size_t>(loss.node_)].assign(1, 1.0);
  for (int i = loss.node_; i >= 0; --i) {
    auto& buf = grad_bufs_[static_cast<std::size_t>(i)];
    if (buf.empty()) continue;
    auto& node = nodes_[static_cast<std::size_t>(i)];
    if (node.backward) {
      node.backward(*this, std::span<const double>(buf));
      buf.clear();
      buf.shrink_to_fit();
    }
  }
  Gradients out;
  out.grads_.reserve(leaves_.size());
  for (auto& [param, node] : leaves_) {
    auto& buf = grad_bufs_[static_cast<std::size_t>(node)];
    if (buf.empty()) buf.assign(static_cast<std::size_t>(param.numel()), 0.0);
    out.grads_.emplace(param.id(), Tensor(param.shape(), std::move(buf)));
  }
  grad_bufs_.clear();
  return out;
}

// --- primitive ops -----------------------------------------------------------

namespace {

Tensor make(Shape shape, Vec values) {
  return Tensor(std::move(shape), std::move(values));
}

/// Records out on the active graph when any operand is connected to it.
template <typename MakeBackward>
void maybe_record(Tensor& out, std::initializer_list<const Tensor*> inputs,
                  MakeBackward&& make_backward) {
  Graph* g = Graph::current();
  if (!g) return;
  bool connected = false;
  for (const Tensor* t : inputs) connected = connected || OpAccess::tracked(*g, *t);
  if (!connected) return;
  OpAccess::record(*g, out, make_backward(*g));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Vec v(static_cast<std::size_t>(a.numel()));
  MutArrMap(v.data(), a.numel()) = arr(a) + arr(b);
  Tensor out = make(a.shape(), std::move(v));
  maybe_record(out, {&a, &b}, [&](Graph& g) {
    const int pa = OpAccess::arg_node(g, a);
    const int pb = OpAccess::arg_node(g, b);
    return [pa, pb](Graph& gg, std::span<const double> gout) {
      ArrMap go(gout.data(), static_cast<std::int64_t>(gout.size()));
      if (pa >= 0) {
        auto buf = OpAccess::grad_buffer(gg, pa);
        MutArrMap(buf.data(), static_cast<std::int64_t>(buf.size())) += go;
      }
      if (pb >= 0) {
        auto buf = OpAccess::grad_buffer(gg, pb);
        MutArrMap(buf.data(), static_cast<std::int64_t>(buf.size())) += go;
      }
    };
  });
  return out;
}

Tensor subtract(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "subtract");
  Vec v(static_cast<std::size_t>(a.numel()));
  MutArrMap(v.data(), a.numel()) = arr(a) - arr(b);
  Tensor out = make(a.shape(), std::move(v));
  maybe_record(out, {&a, &b}, [&](Graph& g) {
    const int pa = OpAccess::arg_node(g, a);
    const int pb = OpAccess::arg_node(g, b);
    return [pa, pb](Graph& gg, std::span<const double> gout) {
      ArrMap go(gout.data(), static_cast<std::int64_t>(gout.size()));
      if (pa >= 0) {
        auto buf = OpAccess::grad_buffer(gg, pa);
        MutArrMap(buf.data(), static_cast<std::int64_t>(buf.size())) += go;
      }
      if (pb >= 0) {
        auto buf = OpAccess::grad_buffer(gg, pb);
        MutArrMap(buf.data(), static_cast<std::int64_t>(buf.size())) -= go;
      }
    };
  });
  return out;
}

Tensor multiply(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "multiply");
  Vec v(static_cast<std::size_t>(a.numel()));
  MutArrMap(v.data(), a.numel()) = arr(a) * arr(b);
  Tensor out = make(a.shape(), std::move(v));
  maybe_record(out, {&a, &b}, [&](Graph& g) {
    const int pa = OpAccess::arg_node(g, a);
    const int pb = OpAccess::arg_node(g, b);
    return [a, b, pa, pb](Graph& gg, std::span<const double> gout) {
      ArrMap go(gout.data(), static_cast<std::int64_t>(gout.size()));
      if (pa >= 0) {
        auto buf = OpAccess::grad_buffer(gg, pa);
        MutArrMap(buf.data(), static_cast<std::int64_t>(buf.size())) += go * arr(b);
      }
      if (pb >= 0) {
        auto buf = OpAccess::grad_buffer(gg, pb);
        MutArrMap(buf.data(), static_cast<std::int64_t>(buf.size())) += go * arr(a);
      }
    };
  });
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  Vec v(static_cast<std::size_t>(x.numel()));
  MutArrMap(v.data(), x.numel()) = arr(x) * factor;
  Tensor out = make(x.shape(), std::move(v));
  maybe_record(out, {&x}, [&](Graph& g) {
    const int px = OpAccess::arg_node(g, x);
    return [px, factor](Graph& gg, std::span<const double> gout) {
      if (px < 0) return;
      auto buf = OpAccess::grad_buffer(gg, px);
      MutArrMap(buf.data(), static_cast<std::int64_t>(buf.size())) +=
          ArrMap(gout.data(), static_cast<std::int64_t>(gout.size())) * factor;
    };
  });
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree: " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::int64_t m = a.rows(), k = a.cols(), n = b.cols();
  Vec v(static_cast<std::size_t>(m * n));
  MutMatMap(v.data(), m, n).noalias() = mat(a) * mat(b);
  Tensor out = make({m, n}, std::move(v));
  maybe_record(out, {&a, &b}, [&](Graph& g) {
    const int pa = OpAccess::arg_node(g, a);
    const int pb = OpAccess::arg_node(g, b);
    return [a, b, pa, pb, m, k, n](Graph& gg, std::span<const double> gout) {
      MatMap go(gout.data(), m, n);
      if (pa >= 0) {
        auto buf = OpAccess::grad_buffer(gg, pa);
        MutMatMap(buf.data(), m, k).noalias() += go * mat(b).transpose();
      }
      if (pb >= 0) {
        auto buf = OpAccess::grad_buffer(gg, pb);
        MutMatMap(buf.data(), k, n).noalias() += mat(a).transpose() * go;
      }
    };
  });
  return out;
}

Tensor transpose(const Tensor& x) {
  require_rank(x, 2, "transpose");
  const std::int64_t m = x.rows(), n = x.cols();
  Vec v(static_cast<std::size_t>(m * n));
  MutMatMap(v.data(), n, m) = mat(x).transpose();
  Tensor out = make({n, m}, std::move(v));
  maybe_record(out, {&x}, [&](Graph& g) {
    const int px = OpAccess::arg_node(g, x);
    return [px, m, n](Graph& gg, std::span<const double> gout) {
      if (px < 0) return;
      auto buf = OpAccess::grad_buffer(gg, px);
      MutMatMap(buf.data(), m, n) += MatMap(gout.data(), n, m).transpose();
    };
  });
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  const std::int64_t n = shape_numel(shape);
  if (n != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) +
                         " as " + shape_str(shape));
  }
  Tensor out = OpAccess::share_data(x, std::move(shape));
  maybe_record(out, {&x}, [&](Graph& g) {
    const int px = OpAccess::arg_node(g, x);
    return [px](Graph& gg, std::span<const double> gout) {
      if (px < 0) return;
      auto buf = OpAccess::grad_buffer(gg, px);
      MutArrMap(buf.data(), static_cast<std::int64_t>(buf.size())) +=
          ArrMap(gout.data(), static_cast<std::int64_t>(gout.size()));
    };
  });
  return out;
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no input tensors");
  const Shape& first = parts[0].shape();
  const auto rank = static_cast<int>(first.size());
  if (axis < 0 || axis >= rank) {
    throw DimensionError("concat: axis " + std::to_string(axis) +
                         " out of range for " + shape_str(first));
  }
  Shape out_shape = first;
  out_shape[static_cast<std::size_t>(axis)] = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != rank) {
      throw DimensionError("concat: rank mismatch " + shape_str(first) +
                           " vs " + shape_str(p.shape()));
    }
    for (int d = 0; d < rank; ++d) {
      if (d != axis && p.shape()[static_cast<std::size_t>(d)] != first[static_cast<std::size_t>(d)]) {
        throw DimensionError("concat: shape mismatch off axis: " +
                             shape_str(first) + " vs " + shape_str(p.shape()));
      }
    }
    out_shape[static_cast<std::size_t>(axis)] += p.dim(static_cast<std::size_t>(axis));
  }

  const std::int64_t outer = outer_numel(first, axis);
  const std::int64_t inner = inner_numel(first, axis);
  std::vector<std::int64_t> chunk(parts.size());
  std::int64_t out_chunk = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    chunk[p] = parts[p].dim(static_cast<std::size_t>(axis)) * inner;
    out_chunk += chunk[p];
  }

  Vec v(static_cast<std::size_t>(outer * out_chunk));
  for (std::int64_t o = 0; o < outer; ++o) {
    std::int64_t off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const double* src = parts[p].data().data() + o * chunk[p];
      std::copy(src, src + chunk[p], v.data() + o * out_chunk + off);
      off += chunk[p];
    }
  }
  Tensor out = make(std::move(out_shape), std::move(v));

  Graph* g = Graph::current();
  if (g) {
    bool connected = false;
    for (const Tensor& p : parts) connected = connected || OpAccess::tracked(*g, p);
    if (connected) {
      std::vector<int> pid(parts.size());
      for (std::size_t p = 0; p < parts.size(); ++p) pid[p] = OpAccess::arg_node(*g, parts[p]);
      OpAccess::record(*g, out,
                       [pid, chunk, outer, out_chunk](Graph& gg, std::span<const double> gout) {
                         std::int64_t off = 0;
                         for (std::size_t p = 0; p < pid.size(); ++p) {
                           if (pid[p] >= 0) {
                             auto buf = OpAccess::grad_buffer(gg, pid[p]);
                             for (std::int64_t o = 0; o < outer; ++o) {
                               MutArrMap(buf.data() + o * chunk[p], chunk[p]) +=
                                   ArrMap(gout.data() + o * out_chunk + off, chunk[p]);
                             }
                           }
                           off += chunk[p];
                         }
                       });
    }
  }
  return out;
}

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t count) {
  const auto rank = static_cast<int>(x.rank());
  if (axis < 0 || axis >= rank) {
    throw DimensionError("slice: axis " + std::to_string(axis) +
                         " out of range for " + shape_str(x.shape()));
  }
  const std::int64_t extent = x.dim(static_cast<std::size_t>(axis));
  if (start < 0 || count < 1 || start + count > extent) {
    throw IndexError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of bounds for axis of size " +
                     std::to_string(extent));
  }
  const std::int64_t outer = outer_numel(x.shape(), axis);
  const std::int64_t inner = inner_numel(x.shape(), axis);
  const std::int64_t src_chunk = extent * inner;
  const std::int64_t dst_chunk = count * inner;
  const std::int64_t off = start * inner;

  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = count;
  Vec v(static_cast<std::size_t>(outer * dst_chunk));
  for (std::int64_t o = 0; o < outer; ++o) {
    const double* src = x.data().data() + o * src_chunk + off;
    std::copy(src, src + dst_chunk, v.data() + o * dst_chunk);
  }
  Tensor out = make(std::move(out_shape), std::move(v));
  maybe_record(out, {&x}, [&](Graph& g) {
    const int px = OpAccess::arg_node(g, x);
    return [px, outer, src_chunk, dst_chunk, off](Graph& gg, std::span<const double> gout) {
      if (px < 0) return;
      auto buf = OpAccess::grad_buffer(gg, px);
      for (std::int64_t o = 0; o < outer; ++o) {
        MutArrMap(buf.data() + o * src_chunk + off, dst_chunk) +=
            ArrMap(gout.data() + o * dst_chunk, dst_chunk);
      }
    };
  });
  return out;
}

Tensor block2d(const Tensor& x, std::int64_t row, std::int64_t nrows,
               std::int64_t col, std::int64_t ncols) {
  require_rank(x, 2, "block2d");
  if (row < 0 || col < 0 || nrows < 1 || ncols < 1 || row + nrows > x.rows() ||
      col + ncols > x.cols()) {
    throw IndexError("block2d: block (" + std::to_string(row) + "," +
                     std::to_string(col) + ")+" + std::to_string(nrows) + "x" +
                     std::to_string(ncols) + " out of bounds for " +
                     shape_str(x.shape()));
  }
  Vec v(static_cast<std::size_t>(nrows * ncols));
  MutMatMap(v.data(), nrows, ncols) = mat(x).block(row, col, nrows, ncols);
  Tensor out = make({nrows, ncols}, std::move(v));
  maybe_record(out, {&x}, [&](Graph& g) {
    const int px = OpAccess::arg_node(g, x);
    const std::int64_t m = x.rows(), n = x.cols();
    return [px, m, n, row, nrows, col, ncols](Graph& gg, std::span<const double> gout) {
      if (px < 0) return;
      auto buf = OpAccess::grad_buffer(gg, px);
      MutMatMap(buf.data(), m, n).block(row, col, nrows, ncols) +=
          MatMap(gout.data(), nrows, ncols);
    };
  });
  return out;
}

Tensor add_bias_rows(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_bias_rows");
  require_rank(bias, 1, "add_bias_rows");
  if (bias.numel() != x.cols()) {
    throw DimensionError("add_bias_rows: bias length " + shape_str(bias.shape()) +
                         " does not match columns of " + shape_str(x.shape()));
  }
  const std::int64_t m = x.rows(), n = x.cols();
  Vec v(static_cast<std::size_t>(m * n));
  MutMatMap(v.data(), m, n) = mat(x);
  MutMatMap(v.data(), m, n).rowwise() +=
      Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), n);
  Tensor out = make({m, n}, std::move(v));
  maybe_record(out, {&x, &bias}, [&](Graph& g) {
    const int px = OpAccess::arg_node(g, x);
    const int pb = OpAccess::arg_node(g, bias);
    return [px, pb, m, n](Graph& gg, std::span<const double> gout) {
      MatMap go(gout.data(), m, n);
      if (px >= 0) {
        auto buf = OpAccess::grad_buffer(gg, px);
        MutMatMap(buf.data(), m, n) += go;
      }
      if (pb >= 0) {
        auto buf = OpAccess::grad_buffer(gg, pb);
        Eigen::Map<Eigen::RowVectorXd>(buf.data(), n) += go.colwise().sum();
      }
    };
  });
  return out;
}

Tensor sum(const Tensor& x) {
  Tensor out = Tensor::scalar(arr(x).sum());
  maybe_record(out, {&x}, [&](Graph& g) {
    const int px = OpAccess::arg_node(g, x);
    return [px](Graph& gg, std::span<const double> gout) {
      if (px < 0) return;
      auto buf = OpAccess::grad_buffer(gg, px);
      MutArrMap(buf.data(), static_cast<std::int64_t>(buf.size())) += gout[0];
    };
  });
  return out;
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.numel());
  Tensor out = Tensor::scalar(arr(x).sum() / n);
  maybe_record(out, {&x}, [&](Graph& g) {
    const int px = OpAccess::arg_node(g, x);
    return [px, n](Graph& gg, std::span<const double> gout) {
      if (px < 0) return;
      auto buf = OpAccess::grad_buffer(gg, px);
      MutArrMap(buf.data(), static_cast<std::int64_t>(buf.size())) += gout[0] / n;
    };
  });
  return out;
}

Tensor tanh(const Tensor& x) {
  Vec v(static_cast<std::size_t>(x.numel()));
  MutArrMap(v.data(), x.numel()) = arr(x).tanh();
  Tensor out = make(x.shape(), std::move(v));
  maybe_record(out, {&x}, [&](Graph& g) {
    const int px = OpAccess::arg_node(g, x);
    const Tensor y = out.detached();
    return [px, y](Graph& gg, std::span<const double> gout) {
      if (px < 0) return;
      auto buf = OpAccess::grad_buffer(gg, px);
      MutArrMap(buf.data(), static_cast<std::int64_t>(buf.size())) +=
          ArrMap(gout.data(), static_cast<std::int64_t>(gout.size())) *
          (1.0 - arr(y).square());
    };
  });
  return out;
}

Tensor log(const Tensor& x) {
  Vec v(static_cast<std::size_t>(x.numel()));
  MutArrMap(v.data(), x.numel()) = arr(x).log();
  Tensor out = make(x.shape(), std::move(v));  // non-positive inputs fail the finite guard
  maybe_record(out, {&x}, [&](Graph& g) {
    const int px = OpAccess::arg_node(g, x);
    return [px, x](Graph& gg, std::span<const double> gout) {
      if (px < 0) return;
      auto buf = OpAccess::grad_buffer(gg, px);
      MutArrMap(buf.data(), static_cast<std::int64_t>(buf.size())) +=
          ArrMap(gout.data(), static_cast<std::int64_t>(gout.size())) / arr(x);
    };
  });
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  require_rank(x, 2, "softmax_rows");
  const std::int64_t m = x.rows(), n = x.cols();
  Vec v(static_cast<std::size_t>(m * n));
  MatMap in = mat(x);
  MutMatMap y(v.data(), m, n);
  for (std::int64_t r = 0; r < m; ++r) {
    const double mx = in.row(r).maxCoeff();
    y.row(r) = (in.row(r).array() - mx).exp();
    y.row(r) /= y.row(r).sum();
  }
  Tensor out = make({m, n}, std::move(v));
  maybe_record(out, {&x}, [&](Graph& g) {
    const int px = OpAccess::arg_node(g, x);
    const Tensor yv = out.detached();
    return [px, yv, m, n](Graph& gg, std::span<const double> gout) {
      if (px < 0) return;
      auto buf = OpAccess::grad_buffer(gg, px);
      MatMap go(gout.data(), m, n);
      MatMap yy(yv.data().data(), m, n);
      MutMatMap dx(buf.data(), m, n);
      for (std::int64_t r = 0; r < m; ++r) {
        const double dot = (go.row(r).array() * yy.row(r).array()).sum();
        dx.row(r).array() += yy.row(r).array() * (go.row(r).array() - dot);
      }
    };
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  if (x.rank() < 1) throw DimensionError("layer_norm: input must have rank >= 1");
  require_rank(gamma, 1, "layer_norm");
  require_rank(beta, 1, "layer_norm");
  if (eps <= 0) throw ConfigError("layer_norm: eps must be positive");
  const std::int64_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: feature size mismatch: x " +
                         shape_str(x.shape()) + ", gamma " +
                         shape_str(gamma.shape()) + ", beta " +
                         shape_str(beta.shape()));
  }
  const std::int64_t rows = x.numel() / d;
  Vec xhat(static_cast<std::size_t>(rows * d));
  Vec inv_std(static_cast<std::size_t>(rows));
  Vec v(static_cast<std::size_t>(rows * d));
  MatMap in(x.data().data(), rows, d);
  MutMatMap xh(xhat.data(), rows, d);
  MutMatMap y(v.data(), rows, d);
  ArrMap ga = arr(gamma);
  ArrMap be = arr(beta);
  for (std::int64_t r = 0; r < rows; ++r) {
    const double mu = in.row(r).mean();
    const double var = (in.row(r).array() - mu).square().sum() / static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = inv;
    xh.row(r) = (in.row(r).array() - mu) * inv;
    y.row(r) = xh.row(r).array() * ga.transpose() + be.transpose();
  }
  Tensor out = make(x.shape(), std::move(v));
  maybe_record(out, {&x, &gamma, &beta}, [&](Graph& g) {
    const int px = OpAccess::arg_node(g, x);
    const int pg = OpAccess::arg_node(g, gamma);
    const int pb = OpAccess::arg_node(g, beta);
    auto xh_saved = std::make_shared<Vec>(std::move(xhat));
    auto inv_saved = std::make_shared<Vec>(std::move(inv_std));
    return [px, pg, pb, gamma, xh_saved, inv_saved, rows, d](
               Graph& gg, std::span<const double> gout) {
      MatMap go(gout.data(), rows, d);
      MatMap xhm(xh_saved->data(), rows, d);
      ArrMap ga = arr(gamma);
      if (px >= 0) {
        auto buf = OpAccess::grad_buffer(gg, px);
        MutMatMap dx(buf.data(), rows, d);
        for (std::int64_t r = 0; r < rows; ++r) {
          Eigen::ArrayXd gxh = go.row(r).array().transpose() * ga;
          const double m1 = gxh.mean();
          const double m2 = (gxh * xhm.row(r).array().transpose()).mean();
          dx.row(r).array() +=
              ((gxh - m1 - xhm.row(r).array().transpose() * m2) *
               (*inv_saved)[static_cast<std::size_t>(r)])
                  .transpose();
        }
      }
      if (pg >= 0) {
        auto buf = OpAccess::grad_buffer(gg, pg);
        MutArrMap dg(buf.data(), d);
        dg += (go.array() * xhm.array()).colwise().sum().transpose();
      }
      if (pb >= 0) {
        auto buf = OpAccess::grad_buffer(gg, pb);
        MutArrMap db(buf.data(), d);
        db += go.array().colwise().sum().transpose();
      }
    };
  });
  return out;
}

namespace {
constexpr double kGeluCoef = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
  Vec v(static_cast<std::size_t>(x.numel()));
  ArrMap xi = arr(x);
  MutArrMap(v.data(), x.numel()) =
      0.5 * xi * (1.0 + (kGeluCoef * (xi + kGeluCubic * xi.cube())).tanh());
  Tensor out = make(x.shape(), std::move(v));
  maybe_record(out, {&x}, [&](Graph& g) {
    const int px = OpAccess::arg_node(g, x);
    return [px, x](Graph& gg, std::span<const double> gout) {
      if (px < 0) return;
      auto buf = OpAccess::grad_buffer(gg, px);
      ArrMap xi = arr(x);
      Eigen::ArrayXd th = (kGeluCoef * (xi + kGeluCubic * xi.cube())).tanh();
      Eigen::ArrayXd deriv =
          0.5 * (1.0 + th) +
          0.5 * xi * (1.0 - th.square()) * kGeluCoef * (1.0 + 3.0 * kGeluCubic * xi.square());
      MutArrMap(buf.data(), static_cast<std::int64_t>(buf.size())) +=
          ArrMap(gout.data(), static_cast<std::int64_t>(gout.size())) * deriv;
    };
  });
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy");
  const std::int64_t b = logits.rows(), c = logits.cols();
  if (static_cast<std::int64_t>(labels.size()) != b) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(b) + " logit rows");
  }
  for (int lab : labels) {
    if (lab < 0 || lab >= c) {
      throw IndexError("cross_entropy: label " + std::to_string(lab) +
                       " out of range for " + std::to_string(c) + " classes");
    }
  }
  MatMap in = mat(logits);
  Vec probs(static_cast<std::size_t>(b * c));
  MutMatMap pm(probs.data(), b, c);
  double total = 0.0;
  for (std::int64_t r = 0; r < b; ++r) {
    const double mx = in.row(r).maxCoeff();
    pm.row(r) = (in.row(r).array() - mx).exp();
    const double denom = pm.row(r).sum();
    pm.row(r) /= denom;
    total += (mx + std::log(denom)) - in(r, labels[static_cast<std::size_t>(r)]);
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(b));
  maybe_record(out, {&logits}, [&](Graph& g) {
    const int pl = OpAccess::arg_node(g, logits);
    auto probs_saved = std::make_shared<Vec>(std::move(probs));
    std::vector<int> labs(labels.begin(), labels.end());
    return [pl, probs_saved, labs, b, c](Graph& gg, std::span<const double> gout) {
      if (pl < 0) return;
      auto buf = OpAccess::grad_buffer(gg, pl);
      const double scale = gout[0] / static_cast<double>(b);
      MutMatMap dl(buf.data(), b, c);
      MatMap pm(probs_saved->data(), b, c);
      dl += pm * scale;
      for (std::int64_t r = 0; r < b; ++r) {
        dl(r, labs[static_cast<std::size_t>(r)]) -= scale;
      }
    };
  });
  return out;
}

// --- finite differences ------------------------------------------------------

std::vector<double> finite_diff_grad_at(
    const std::function<double(const Tensor&)>& f, const Tensor& p, double step,
    std::span<const std::int64_t> coords) {
  if (step <= 0) throw ContractError("finite_diff_grad: step must be positive");
  Vec base(p.data().begin(), p.data().end());
  std::vector<double> out;
  out.reserve(coords.size());
  for (std::int64_t c : coords) {
    if (c < 0 || c >= p.numel()) {
      throw IndexError("finite_diff_grad: coordinate " + std::to_string(c) +
                       " out of range");
    }
    const auto i = static_cast<std::size_t>(c);
    const double v = base[i];
    base[i] = v + step;
    const double fp = f(Tensor(p.shape(), base));
    base[i] = v - step;
    const double fm = f(Tensor(p.shape(), base));
    base[i] = v;
    out.push_back((fp - fm) / (2.0 * step));
  }
  return out;
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& p, double step) {
  std::vector<std::int64_t> coords(static_cast<std::size_t>(p.numel()));
  for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = static_cast<std::int64_t>(i);
  const std::vector<double> grad = finite_diff_grad_at(f, p, step, coords);
  return Tensor(p.shape(), Vec(grad.begin(), grad.end()));
}

double rel_err(double a, double b, double floor) {
  if (!std::isfinite(a) || !std::isfinite(b)) {
    return std::numeric_limits<double>::infinity();
  }
  const double denom = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / denom;
}

}  // namespace spvit
