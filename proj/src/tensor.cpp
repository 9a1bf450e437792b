#include "encap/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace encap {

namespace {

thread_local bool t_grad_enabled = true;
thread_local bool t_anomaly = false;

std::int64_t flat_index(const Shape& shape, std::initializer_list<std::int64_t> index) {
  if (index.size() != shape.size())
    throw ShapeError("index rank " + std::to_string(index.size()) + " vs tensor rank " +
                     std::to_string(shape.size()));
  std::int64_t flat = 0;
  std::size_t d = 0;
  for (auto i : index) {
    if (i < 0 || i >= shape[d]) throw ShapeError("index out of range");
    flat = flat * shape[d] + i;
    ++d;
  }
  return flat;
}

}  // namespace

const char* dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::full(const Shape& shape, double value, DType dt) {
  for (auto e : shape)
    if (e <= 0) throw ShapeError("extents must be positive: " + shape_str(shape));
  return dispatch(dt, [&]<class T>() {
    return from_storage<T>(std::vector<T>(static_cast<std::size_t>(shape_numel(shape)),
                                          static_cast<T>(value)),
                           shape);
  });
}

Tensor Tensor::zeros(const Shape& shape, DType dt) { return full(shape, 0.0, dt); }
Tensor Tensor::ones(const Shape& shape, DType dt) { return full(shape, 1.0, dt); }
Tensor Tensor::scalar(double value, DType dt) { return full({1}, value, dt); }

Tensor Tensor::from(std::vector<double> values, const Shape& shape, DType dt) {
  if (dt == DType::f64) return from_storage<double>(std::move(values), shape);
  return from_storage<float>(std::vector<float>(values.begin(), values.end()), shape);
}

std::int64_t Tensor::size(std::int64_t axis) const {
  const auto r = dim();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis out of range");
  return impl_->shape[static_cast<std::size_t>(axis)];
}

std::vector<double> Tensor::to_vector() const {
  return dispatch(dtype(), [&]<class T>() {
    const auto& v = impl_->vec<T>();
    return std::vector<double>(v.begin(), v.end());
  });
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return dispatch(dtype(), [&]<class T>() { return static_cast<double>(impl_->vec<T>()[0]); });
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
  const auto flat = flat_index(shape(), index);
  return dispatch(dtype(), [&]<class T>() {
    return static_cast<double>(impl_->vec<T>()[static_cast<std::size_t>(flat)]);
  });
}

void Tensor::set(std::initializer_list<std::int64_t> index, double value) {
  const auto flat = flat_index(shape(), index);
  dispatch(dtype(), [&]<class T>() {
    impl_->vec<T>()[static_cast<std::size_t>(flat)] = static_cast<T>(value);
  });
}

void Tensor::assign(const std::vector<double>& values) {
  if (static_cast<std::int64_t>(values.size()) != numel())
    throw ShapeError("assign: element count mismatch");
  dispatch(dtype(), [&]<class T>() {
    auto& v = impl_->vec<T>();
    std::transform(values.begin(), values.end(), v.begin(),
                   [](double x) { return static_cast<T>(x); });
  });
}

void Tensor::copy_from(const Tensor& other) {
  if (other.shape() != shape())
    throw ShapeError("copy_from: " + shape_str(other.shape()) + " vs " + shape_str(shape()));
  dispatch(dtype(), [&]<class T>() {
    auto& dst = impl_->vec<T>();
    dispatch(other.dtype(), [&]<class U>() {
      const auto& src = other.impl().vec<U>();
      std::transform(src.begin(), src.end(), dst.begin(),
                     [](U x) { return static_cast<T>(x); });
    });
  });
}

Tensor& Tensor::set_requires_grad(bool on) {
  if (impl_->grad_fn && !on) throw ContractError("cannot clear requires_grad on a non-leaf");
  impl_->requires_grad = on;
  return *this;
}

Tensor Tensor::grad() const {
  if (!impl_->grad) return {};
  return std::visit(
      [&](const auto& g) {
        using V = std::decay_t<decltype(g)>;
        return from_storage<typename V::value_type>(g, shape());
      },
      *impl_->grad);
}

void Tensor::zero_grad() { impl_->grad.reset(); }

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->dtype = impl_->dtype;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const { return detach(); }

Tensor Tensor::to(DType dt) const {
  if (dt == dtype()) return *this;
  auto out = zeros(shape(), dt);
  out.copy_from(*this);
  return out;
}

void Tensor::backward(BackwardOptions opts) const {
  if (numel() != 1)
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(shape()));
  if (!impl_->requires_grad)
    throw ContractError("backward on a tensor that does not require grad");

  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<TensorImpl*> stack{impl_.get()};
  while (!stack.empty()) {
    auto* t = stack.back();
    stack.pop_back();
    if (!seen.insert(t).second) continue;
    if (!t->grad_fn) continue;
    if (t->grad_fn->released)
      throw ContractError(
          "backward through a graph that was already freed; pass retain_graph to reuse it");
    order.push_back(t);
    for (const auto& in : t->grad_fn->inputs) stack.push_back(in.get());
  }
  std::sort(order.begin(), order.end(), [](const TensorImpl* a, const TensorImpl* b) {
    return a->grad_fn->seq > b->grad_fn->seq;
  });

  dispatch(dtype(), [&]<class T>() { detail::grad_buffer<T>(*impl_)[0] += T(1); });

  for (auto* t : order) {
    if (!t->grad) continue;
    auto& node = *t->grad_fn;
    node.backward(*t);
    if (t_anomaly) {
      for (const auto& in : node.inputs) {
        if (!in->grad) continue;
        std::visit(
            [&](const auto& g) {
              for (auto x : g)
                if (!std::isfinite(x))
                  throw NumericError(node.name, std::string("backward of '") + node.name +
                                                    "' produced a non-finite gradient");
            },
            *in->grad);
      }
    }
    t->grad.reset();
  }

  if (!opts.retain_graph) {
    // Dropping a node's closures may free upstream tensors still listed in order.
    std::vector<std::shared_ptr<TensorImpl>> keep;
    for (auto* t : order)
      keep.insert(keep.end(), t->grad_fn->inputs.begin(), t->grad_fn->inputs.end());
    for (auto* t : order) {
      auto& node = *t->grad_fn;
      node.backward = nullptr;
      node.inputs.clear();
      node.released = true;
    }
  }
}

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }
bool grad_enabled() { return t_grad_enabled; }

AnomalyGuard::AnomalyGuard() : prev_(t_anomaly) { t_anomaly = true; }
AnomalyGuard::~AnomalyGuard() { t_anomaly = prev_; }
bool anomaly_enabled() { return t_anomaly; }

namespace detail {

bool needs_grad(const TensorImpl& t) { return t.requires_grad || static_cast<bool>(t.grad_fn); }

void check_finite(const char* op, const TensorImpl& t) {
  std::visit(
      [&](const auto& v) {
        for (auto x : v)
          if (!std::isfinite(x))
            throw NumericError(op, std::string("op '") + op + "' produced a non-finite value");
      },
      t.data);
}

std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

}  // namespace detail

}  // namespace encap
