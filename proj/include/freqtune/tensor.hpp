#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "freqtune/error.hpp"

namespace freqtune {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

/// Strict mode rejects non-finite operands in every primitive. Off by default;
/// tests switch it on.
inline std::atomic<bool>& strict_numerics_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}
inline void set_strict_numerics(bool on) { strict_numerics_flag().store(on); }
inline bool strict_numerics() { return strict_numerics_flag().load(); }

namespace detail {

template <typename Scalar>
struct TensorNode {
  Shape shape;
  // Row-major storage: rows = product of all leading dims, cols = last dim.
  Matrix<Scalar> value;
  Matrix<Scalar> grad;
  bool requires_grad = false;

  bool has_grad() const { return grad.size() == value.size() && value.size() > 0; }

  template <typename Derived>
  void accumulate(const Eigen::MatrixBase<Derived>& delta) {
    if (!requires_grad) return;
    if (!has_grad())
      grad = delta;
    else
      grad += delta;
  }
};

inline std::pair<Index, Index> storage_dims(const Shape& shape) {
  if (shape.empty()) return {1, 1};
  const Index cols = shape.back();
  Index rows = 1;
  for (std::size_t i = 0; i + 1 < shape.size(); ++i) rows *= shape[i];
  return {rows, cols};
}

}  // namespace detail

/// Dense tensor handle with optional gradient tracking.
///
/// Copies share the underlying node, so a parameter held in two places
/// accumulates one gradient. Storage is a row-major Eigen matrix whose column
/// count is the last dimension of `shape`; rank-0 and rank-1 tensors are a
/// single row.
template <typename Scalar>
class Tensor {
 public:
  using Node = detail::TensorNode<Scalar>;

  Tensor() = default;

  static Tensor from_matrix(Matrix<Scalar> value, bool requires_grad = false) {
    Shape shape{value.rows(), value.cols()};
    return Tensor(std::move(shape), std::move(value), requires_grad);
  }

  static Tensor from_values(Shape shape, const std::vector<Scalar>& data,
                            bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<Index>(data.size()))
      throw ShapeError("tensor: shape " + shape_string(shape) + " holds " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    const auto [rows, cols] = detail::storage_dims(shape);
    Matrix<Scalar> value(rows, cols);
    std::copy(data.begin(), data.end(), value.data());
    return Tensor(std::move(shape), std::move(value), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto [rows, cols] = detail::storage_dims(shape);
    return Tensor(std::move(shape), Matrix<Scalar>::Zero(rows, cols), requires_grad);
  }

  static Tensor scalar(Scalar v, bool requires_grad = false) {
    Matrix<Scalar> value(1, 1);
    value(0, 0) = v;
    return Tensor(Shape{}, std::move(value), requires_grad);
  }

  /// Internal constructor used by primitives; `value` must already match
  /// the storage layout of `shape`.
  Tensor(Shape shape, Matrix<Scalar> value, bool requires_grad)
      : node_(std::make_shared<Node>()) {
    const auto [rows, cols] = detail::storage_dims(shape);
    if (value.rows() != rows || value.cols() != cols)
      throw ShapeError("tensor: storage " + std::to_string(value.rows()) + "x" +
                       std::to_string(value.cols()) + " does not match shape " +
                       shape_string(shape));
    node_->shape = std::move(shape);
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index dim(Index i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index numel() const { return node_->value.size(); }

  const Matrix<Scalar>& value() const { return node_->value; }
  /// Direct mutation, for optimizers and initialisers. Never call while a
  /// tape that references this tensor is live.
  Matrix<Scalar>& mutable_value() { return node_->value; }

  std::vector<Scalar> data() const {
    return std::vector<Scalar>(node_->value.data(), node_->value.data() + node_->value.size());
  }

  Scalar item() const {
    if (numel() != 1)
      throw ShapeError("item: tensor of shape " + shape_string(shape()) + " is not a scalar");
    return node_->value(0, 0);
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_->has_grad(); }
  const Matrix<Scalar>& grad() const {
    if (!has_grad()) throw UsageError("grad: tensor has no populated gradient");
    return node_->grad;
  }
  void zero_grad() { node_->grad.resize(0, 0); }

  /// Detached copy of the value (no gradient tracking, fresh node).
  Tensor detach() const { return Tensor(shape(), value(), false); }

  const std::shared_ptr<Node>& node() const { return node_; }

  friend bool same_node(const Tensor& a, const Tensor& b) { return a.node_ == b.node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Ordered record of executed primitives for reverse-mode differentiation.
///
/// Primitives record onto the tape that is active on the calling thread
/// (see `Tape::Scope`). With no active tape nothing is recorded, which is how
/// evaluation runs.
template <typename Scalar>
class Tape {
 public:
  using NodePtr = std::shared_ptr<detail::TensorNode<Scalar>>;

  struct Entry {
    std::string_view op;
    std::vector<NodePtr> inputs;
    NodePtr output;
    std::function<void(const Matrix<Scalar>&)> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Makes `tape` the recording target for the current thread for the
  /// lifetime of the scope.
  class Scope {
   public:
    explicit Scope(Tape& tape) : previous_(active_) { active_ = &tape; }
    ~Scope() { active_ = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  static Tape* active() { return active_; }

  void record(Entry entry) {
    entries_.push_back(std::move(entry));
    consumed_ = false;
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::vector<Entry>& entries() const { return entries_; }

  /// Replays backward rules in reverse execution order, seeding d loss / d loss = 1.
  void backward(const Tensor<Scalar>& loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw UsageError("backward: loss must be a scalar, got shape " +
                       (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
    if (entries_.empty()) throw UsageError("backward: tape is empty");
    if (consumed_)
      throw UsageError("backward: tape already consumed; run a new forward pass first");
    if (!loss.requires_grad()) throw UsageError("backward: loss does not require grad");

    auto& seed = loss.node()->grad;
    if (loss.node()->has_grad())
      seed(0, 0) += Scalar{1};
    else
      seed = Matrix<Scalar>::Ones(1, 1);

    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (!it->output->has_grad()) continue;  // not reachable from the loss
      it->backward(it->output->grad);
    }
    consumed_ = true;
  }

  /// Drops all entries, releasing intermediate tensors.
  void clear() {
    entries_.clear();
    consumed_ = false;
  }

 private:
  std::vector<Entry> entries_;
  bool consumed_ = false;
  static inline thread_local Tape* active_ = nullptr;
};

}  // namespace freqtune
