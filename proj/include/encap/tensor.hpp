#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "encap/error.hpp"

namespace encap {

enum class DType : std::uint8_t { f32, f64 };

const char* dtype_name(DType dt);

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

/// Calls fn.template operator()<T>() with T matching the runtime dtype.
template <class Fn>
decltype(auto) dispatch(DType dt, Fn&& fn) {
  if (dt == DType::f32) return fn.template operator()<float>();
  return fn.template operator()<double>();
}

using Storage = std::variant<std::vector<float>, std::vector<double>>;

struct TensorImpl;

/// One recorded operation. Nodes are ordered by a global sequence number so
/// sorting by it descending yields a reverse topological order of the graph.
struct Node {
  const char* name = "";
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(TensorImpl& out)> backward;
  bool released = false;
};

struct TensorImpl {
  Shape shape;
  DType dtype = DType::f64;
  Storage data;
  std::optional<Storage> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;

  template <class T>
  std::vector<T>& vec() {
    return std::get<std::vector<T>>(data);
  }
  template <class T>
  const std::vector<T>& vec() const {
    return std::get<std::vector<T>>(data);
  }
};

struct BackwardOptions {
  /// Keep the graph so backward can run again; otherwise a second call throws.
  bool retain_graph = false;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(const Shape& shape, DType dt = DType::f64);
  static Tensor ones(const Shape& shape, DType dt = DType::f64);
  static Tensor full(const Shape& shape, double value, DType dt = DType::f64);
  static Tensor scalar(double value, DType dt = DType::f64);
  static Tensor from(std::vector<double> values, const Shape& shape, DType dt = DType::f64);
  template <class T>
  static Tensor from_storage(std::vector<T> values, const Shape& shape);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t dim() const { return static_cast<std::int64_t>(impl_->shape.size()); }
  std::int64_t size(std::int64_t axis) const;
  std::int64_t numel() const { return shape_numel(impl_->shape); }
  DType dtype() const { return impl_->dtype; }

  template <class T>
  std::span<T> data() {
    return std::span<T>(impl_->vec<T>());
  }
  template <class T>
  std::span<const T> data() const {
    return std::span<const T>(impl_->vec<T>());
  }

  std::vector<double> to_vector() const;
  double item() const;
  double at(std::initializer_list<std::int64_t> index) const;
  void set(std::initializer_list<std::int64_t> index, double value);
  /// Overwrites the values in place; does not touch the graph.
  void assign(const std::vector<double>& values);
  void copy_from(const Tensor& other);

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);
  bool is_leaf() const { return !impl_->grad_fn; }
  /// Accumulated gradient as a graph-free tensor; undefined when none.
  Tensor grad() const;
  void zero_grad();

  Tensor detach() const;
  Tensor clone() const;
  Tensor to(DType dt) const;

  void backward(BackwardOptions opts = {}) const;

  TensorImpl& impl() const { return *impl_; }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Disables graph recording in its scope.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

/// When on, every op checks its output (and, during backward, the gradients it
/// produces) for NaN/inf and throws NumericError naming the op.
class AnomalyGuard {
 public:
  AnomalyGuard();
  ~AnomalyGuard();
  AnomalyGuard(const AnomalyGuard&) = delete;
  AnomalyGuard& operator=(const AnomalyGuard&) = delete;

 private:
  bool prev_;
};

bool anomaly_enabled();

namespace detail {

bool needs_grad(const TensorImpl& t);

template <class T>
std::span<T> grad_buffer(TensorImpl& t) {
  if (!t.grad) t.grad = std::vector<T>(static_cast<std::size_t>(shape_numel(t.shape)), T(0));
  return std::span<T>(std::get<std::vector<T>>(*t.grad));
}

template <class T>
std::span<const T> grad_of(const TensorImpl& t) {
  return std::span<const T>(std::get<std::vector<T>>(*t.grad));
}

void check_finite(const char* op, const TensorImpl& t);

std::uint64_t next_seq();

/// Wraps a freshly computed buffer into a tensor and, when any input needs a
/// gradient, records a node whose backward receives dL/d(output).
template <class T>
Tensor record(const char* name, Shape shape, std::vector<T> values,
              std::initializer_list<Tensor> inputs,
              std::function<void(std::span<const T>)> backward) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->dtype = dtype_of<T>();
  impl->data = std::move(values);
  if (anomaly_enabled()) check_finite(name, *impl);
  if (grad_enabled() && backward) {
    bool any = false;
    for (const auto& in : inputs) any = any || needs_grad(in.impl());
    if (any) {
      auto node = std::make_shared<Node>();
      node->name = name;
      node->seq = next_seq();
      for (const auto& in : inputs) node->inputs.push_back(in.impl_ptr());
      node->backward = [bw = std::move(backward)](TensorImpl& out) {
        bw(grad_of<T>(out));
      };
      impl->grad_fn = std::move(node);
      impl->requires_grad = true;
    }
  }
  return Tensor(std::move(impl));
}

}  // namespace detail

template <class T>
Tensor Tensor::from_storage(std::vector<T> values, const Shape& shape) {
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
    throw ShapeError("element count " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->dtype = dtype_of<T>();
  impl->data = std::move(values);
  return Tensor(std::move(impl));
}

}  // namespace encap
