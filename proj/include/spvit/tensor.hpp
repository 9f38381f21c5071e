#pragma once

#include <cstdint>
#include <cstdlib>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "spvit/errors.hpp"

namespace spvit {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

/// 64-byte-aligned allocator. Eigen peels vectorized reductions according
/// to the runtime pointer alignment, so identical data at different
/// addresses can round differently; pinning every numeric buffer to one
/// alignment keeps results bitwise reproducible across runs.
template <typename T>
struct AlignedAllocator {
  using value_type = T;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    void* p = nullptr;
    if (posix_memalign(&p, 64, std::max<std::size_t>(n, 1) * sizeof(T)) != 0) {
      throw std::bad_alloc();
    }
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t) noexcept { std::free(p); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
  template <typename U>
  bool operator!=(const AlignedAllocator<U>&) const {
    return false;
  }
};

/// Backing storage of every Tensor and gradient buffer.
using Vec = std::vector<double, AlignedAllocator<double>>;

namespace detail {
struct OpAccess;
}

class Graph;

/// Dense row-major tensor of 64-bit floats. Immutable after construction;
/// copies share storage. Construction rejects NaN/Inf payloads.
class Tensor {
 public:
  /// Empty handle; using it in any operation throws. Exists so Tensor can
  /// sit in containers before being assigned.
  Tensor() = default;

  Tensor(Shape shape, Vec values, bool requires_grad = false);

  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);

  bool empty() const noexcept { return data_ == nullptr; }
  const Shape& shape() const { return shape_; }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
  std::int64_t numel() const;
  std::int64_t dim(std::size_t axis) const;
  std::int64_t rows() const;  // rank-2 only
  std::int64_t cols() const;  // rank-2 only

  bool requires_grad() const noexcept { return requires_grad_; }
  /// Same storage, detached from any recorded graph.
  Tensor detached(bool requires_grad = false) const;

  double value() const;  // single-element tensors
  double at(std::int64_t i) const;
  double at(std::int64_t i, std::int64_t j) const;
  std::span<const double> data() const;

  /// Stable identity of the underlying storage; keys Gradients entries.
  const void* id() const noexcept { return data_.get(); }

 private:
  friend class Graph;
  friend struct detail::OpAccess;

  std::shared_ptr<const Vec> data_;
  Shape shape_;
  bool requires_grad_ = false;
  int node_ = -1;             // index into the recording graph's tape
  std::uint64_t graph_epoch_ = 0;
};

/// Gradients keyed by parameter identity (Tensor::id()).
class Gradients {
 public:
  bool contains(const Tensor& param) const;
  const Tensor& at(const Tensor& param) const;
  std::size_t size() const noexcept { return grads_.size(); }

 private:
  friend class Graph;
  std::unordered_map<const void*, Tensor> grads_;
};

/// Append-only tape of recorded operations. Operands always precede their
/// consumers, so reverse id order is a reverse topological order and the
/// backward sweep visits each node exactly once, in a fixed sequence.
///
/// One graph is recorded per forward pass and freed after backward().
/// Single-threaded ownership: recording binds the graph to the current
/// thread via Graph::Recording.
class Graph {
 public:
  Graph();
  ~Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// RAII scope that makes this graph the recording target on this thread.
  class Recording {
   public:
    explicit Recording(Graph& g);
    ~Recording();
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;

   private:
    Graph* prev_;
  };

  static Graph* current() noexcept;

  /// Reverse sweep from a scalar loss. Returns one gradient tensor per
  /// requires_grad leaf that participated in the forward pass; leaves the
  /// loss does not depend on get zeros. Accumulation order is the tape
  /// order, so results are bitwise deterministic.
  Gradients backward(const Tensor& loss);

  std::size_t node_count() const noexcept { return nodes_.size(); }
  std::uint64_t epoch() const noexcept { return epoch_; }

 private:
  friend struct detail::OpAccess;

  using BackwardFn = std::function<void(Graph&, std::span<const double>)>;

  struct Node {
    std::int64_t numel = 0;
    BackwardFn backward;  // null for leaves
  };

  int add_node(std::int64_t numel, BackwardFn fn);
  int leaf_node(const Tensor& param);
  std::span<double> grad_buffer(int node);

  std::vector<Node> nodes_;
  std::vector<Vec> grad_bufs_;
  std::unordered_map<const void*, int> leaf_index_;
  std::vector<std::pair<Tensor, int>> leaves_;  // insertion order
  std::uint64_t epoch_;
};

// --- differentiable primitives -------------------------------------------
// Each op computes eagerly; when a Graph is recording and an operand is
// connected to it (or requires grad), a node with the matching backward
// rule is appended to the tape.

Tensor add(const Tensor& a, const Tensor& b);
Tensor subtract(const Tensor& a, const Tensor& b);
Tensor multiply(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& x, double factor);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t count);
/// Rectangular block of a rank-2 tensor.
Tensor block2d(const Tensor& x, std::int64_t row, std::int64_t nrows,
               std::int64_t col, std::int64_t ncols);
/// x[r, :] + bias for every row r; bias is rank-1 of length x.cols().
Tensor add_bias_rows(const Tensor& x, const Tensor& bias);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor log(const Tensor& x);
/// Row-wise softmax with max subtraction; rows sum to 1 within 1e-12.
Tensor softmax_rows(const Tensor& x);
/// Normalizes over the last dimension with population variance:
/// gamma * (x - mu) / sqrt(var + eps) + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps);
/// tanh-form GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(const Tensor& x);
/// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) {
  return subtract(a, b);
}
inline Tensor operator*(const Tensor& a, const Tensor& b) {
  return multiply(a, b);
}
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

// --- finite-difference oracle --------------------------------------------

/// Central-difference gradient of f at p: (f(p + h e_i) - f(p - h e_i)) / 2h
/// per element. Test oracle; f must evaluate without recording.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& p, double step);

/// Same, restricted to the given flat coordinates of p.
std::vector<double> finite_diff_grad_at(
    const std::function<double(const Tensor&)>& f, const Tensor& p,
    double step, std::span<const std::int64_t> coords);

/// Guarded relative error used by gradient checks:
/// |a - b| / max(|a|, |b|, floor).
double rel_err(double a, double b, double floor);

}  // namespace spvit
