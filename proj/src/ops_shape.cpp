#include <algorithm>
#include <numeric>

#include "encap/ops.hpp"
#include "ops_internal.hpp"

namespace encap {

using detail::wants;

Tensor sum(const Tensor& x) {
  return dispatch(x.dtype(), [&]<class T>() {
    const auto X = x.data<T>();
    T s = 0;
    for (auto v : X) s += v;
    return detail::record<T>("sum", Shape{1}, std::vector<T>{s}, {x},
                             [x](std::span<const T> g) {
                               auto gx = detail::grad_buffer<T>(x.impl());
                               for (auto& v : gx) v += g[0];
                             });
  });
}

Tensor sum(const Tensor& x, std::int64_t axis, bool keepdim) {
  axis = detail::normalize_axis(axis, x.dim());
  const auto sp = detail::split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + axis);
    if (out_shape.empty()) out_shape = {1};
  }
  return dispatch(x.dtype(), [&]<class T>() {
    const auto X = x.data<T>();
    std::vector<T> out(static_cast<std::size_t>(sp.outer * sp.inner), T(0));
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t k = 0; k < sp.n; ++k) {
        const T* src = X.data() + (o * sp.n + k) * sp.inner;
        T* dst = out.data() + o * sp.inner;
        for (std::int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
      }
    return detail::record<T>("sum_axis", out_shape, std::move(out), {x},
                             [x, sp](std::span<const T> g) {
                               auto gx = detail::grad_buffer<T>(x.impl());
                               for (std::int64_t o = 0; o < sp.outer; ++o)
                                 for (std::int64_t k = 0; k < sp.n; ++k) {
                                   T* dst = gx.data() + (o * sp.n + k) * sp.inner;
                                   const T* src = g.data() + o * sp.inner;
                                   for (std::int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
                                 }
                             });
  });
}

Tensor mean(const Tensor& x) { return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor mean(const Tensor& x, std::int64_t axis, bool keepdim) {
  const auto n = x.size(axis);
  return mul_scalar(sum(x, axis, keepdim), 1.0 / static_cast<double>(n));
}

Tensor reshape(const Tensor& x, Shape shape) {
  std::int64_t known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one inferred extent");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) {
    if (known <= 0 || x.numel() % known != 0)
      throw ShapeError("reshape: cannot infer extent for " + shape_str(x.shape()));
    shape[static_cast<std::size_t>(infer)] = x.numel() / known;
  }
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return dispatch(x.dtype(), [&]<class T>() {
    const auto X = x.data<T>();
    return detail::record<T>("reshape", shape, std::vector<T>(X.begin(), X.end()), {x},
                             [x](std::span<const T> g) {
                               auto gx = detail::grad_buffer<T>(x.impl());
                               for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                             });
  });
}

namespace {

// Maps each output flat index of a permutation to its input flat index.
std::vector<std::int64_t> permutation_gather(const Shape& in, const std::vector<std::int64_t>& dims,
                                             Shape& out) {
  const std::size_t r = in.size();
  std::vector<std::int64_t> in_strides(r, 1);
  for (std::size_t d = r - 1; d-- > 0;) in_strides[d] = in_strides[d + 1] * in[d + 1];
  out.resize(r);
  std::vector<std::int64_t> st(r);
  for (std::size_t d = 0; d < r; ++d) {
    out[d] = in[static_cast<std::size_t>(dims[d])];
    st[d] = in_strides[static_cast<std::size_t>(dims[d])];
  }
  const auto n = shape_numel(in);
  std::vector<std::int64_t> src(static_cast<std::size_t>(n));
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t off = 0;
  for (std::int64_t o = 0; o < n; ++o) {
    src[static_cast<std::size_t>(o)] = off;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += st[d];
      if (idx[d] < out[d]) break;
      off -= st[d] * out[d];
      idx[d] = 0;
    }
  }
  return src;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<std::int64_t>& dims_in) {
  const auto r = x.dim();
  if (static_cast<std::int64_t>(dims_in.size()) != r) throw ShapeError("permute: rank mismatch");
  std::vector<std::int64_t> dims(dims_in.size());
  std::vector<bool> used(static_cast<std::size_t>(r), false);
  for (std::size_t i = 0; i < dims.size(); ++i) {
    dims[i] = detail::normalize_axis(dims_in[i], r);
    if (used[static_cast<std::size_t>(dims[i])]) throw ShapeError("permute: repeated axis");
    used[static_cast<std::size_t>(dims[i])] = true;
  }
  Shape out_shape;
  auto src = permutation_gather(x.shape(), dims, out_shape);
  return dispatch(x.dtype(), [&]<class T>() {
    const auto X = x.data<T>();
    std::vector<T> out(src.size());
    for (std::size_t o = 0; o < src.size(); ++o) out[o] = X[src[o]];
    return detail::record<T>("permute", out_shape, std::move(out), {x},
                             [x, src = std::move(src)](std::span<const T> g) {
                               auto gx = detail::grad_buffer<T>(x.impl());
                               for (std::size_t o = 0; o < src.size(); ++o) gx[src[o]] += g[o];
                             });
  });
}

Tensor transpose(const Tensor& x, std::int64_t a, std::int64_t b) {
  std::vector<std::int64_t> dims(static_cast<std::size_t>(x.dim()));
  std::iota(dims.begin(), dims.end(), 0);
  a = detail::normalize_axis(a, x.dim());
  b = detail::normalize_axis(b, x.dim());
  std::swap(dims[a], dims[b]);
  return permute(x, dims);
}

Tensor narrow(const Tensor& x, std::int64_t axis, std::int64_t start, std::int64_t length) {
  axis = detail::normalize_axis(axis, x.dim());
  const auto sp = detail::split_axis(x.shape(), axis);
  if (start < 0 || length <= 0 || start + length > sp.n)
    throw ShapeError("narrow: range out of bounds");
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  return dispatch(x.dtype(), [&]<class T>() {
    const auto X = x.data<T>();
    std::vector<T> out(static_cast<std::size_t>(sp.outer * length * sp.inner));
    for (std::int64_t o = 0; o < sp.outer; ++o)
      std::copy_n(X.data() + (o * sp.n + start) * sp.inner, length * sp.inner,
                  out.data() + o * length * sp.inner);
    return detail::record<T>("narrow", out_shape, std::move(out), {x},
                             [x, sp, start, length](std::span<const T> g) {
                               auto gx = detail::grad_buffer<T>(x.impl());
                               for (std::int64_t o = 0; o < sp.outer; ++o) {
                                 T* dst = gx.data() + (o * sp.n + start) * sp.inner;
                                 const T* src = g.data() + o * length * sp.inner;
                                 for (std::int64_t i = 0; i < length * sp.inner; ++i)
                                   dst[i] += src[i];
                               }
                             });
  });
}

Tensor concat(const std::vector<Tensor>& xs, std::int64_t axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  axis = detail::normalize_axis(axis, xs[0].dim());
  Shape out_shape = xs[0].shape();
  std::int64_t total = 0;
  for (const auto& t : xs) {
    detail::same_dtype(xs[0], t, "concat");
    if (t.dim() != xs[0].dim()) throw ShapeError("concat: rank mismatch");
    for (std::int64_t d = 0; d < t.dim(); ++d)
      if (d != axis && t.shape()[d] != out_shape[d])
        throw ShapeError("concat: " + shape_str(t.shape()) + " vs " + shape_str(out_shape));
    total += t.shape()[axis];
  }
  out_shape[axis] = total;
  const auto sp = detail::split_axis(out_shape, axis);
  return dispatch(xs[0].dtype(), [&]<class T>() {
    std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)));
    std::vector<std::int64_t> offsets;
    std::int64_t at = 0;
    for (const auto& t : xs) {
      const auto X = t.data<T>();
      const auto len = t.shape()[axis];
      for (std::int64_t o = 0; o < sp.outer; ++o)
        std::copy_n(X.data() + o * len * sp.inner, len * sp.inner,
                    out.data() + (o * total + at) * sp.inner);
      offsets.push_back(at);
      at += len;
    }
    auto node_inputs = xs;
    auto rec = detail::record<T>("concat", out_shape, std::move(out), {}, {});
    if (!grad_enabled()) return rec;
    bool any = false;
    for (const auto& t : xs) any = any || wants(t);
    if (!any) return rec;
    auto node = std::make_shared<Node>();
    node->name = "concat";
    node->seq = detail::next_seq();
    for (const auto& t : xs) node->inputs.push_back(t.impl_ptr());
    node->backward = [xs = std::move(node_inputs), offsets, sp, total, axis](TensorImpl& outi) {
      const auto g = detail::grad_of<T>(outi);
      for (std::size_t k = 0; k < xs.size(); ++k) {
        if (!wants(xs[k])) continue;
        auto gx = detail::grad_buffer<T>(xs[k].impl());
        const auto len = xs[k].shape()[axis];
        for (std::int64_t o = 0; o < sp.outer; ++o) {
          const T* src = g.data() + (o * total + offsets[k]) * sp.inner;
          T* dst = gx.data() + o * len * sp.inner;
          for (std::int64_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
        }
      }
    };
    rec.impl().grad_fn = std::move(node);
    rec.impl().requires_grad = true;
    return rec;
  });
}

}  // namespace encap
