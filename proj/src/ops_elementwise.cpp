#include <cmath>
#include <thread>

#include "encap/kernels.hpp"
#include "encap/ops.hpp"
#include "ops_internal.hpp"

namespace encap {

namespace detail {

int thread_count() {
  static const int n = [] {
    if (const char* env = std::getenv("ENCAP_THREADS")) {
      const int v = std::atoi(env);
      if (v >= 1) return v;
    }
    return 1;
  }();
  return n;
}

void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
  const std::int64_t workers = std::min<std::int64_t>(thread_count(), n);
  if (workers <= 1) {
    if (n > 0) fn(0, n);
    return;
  }
  std::vector<std::jthread> pool;
  const std::int64_t chunk = (n + workers - 1) / workers;
  for (std::int64_t w = 1; w < workers; ++w) {
    const auto b = w * chunk;
    const auto e = std::min(n, b + chunk);
    if (b < e) pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(0, std::min(n, chunk));
}

}  // namespace detail

namespace {

using detail::wants;

struct Broadcast {
  Shape out;
  std::vector<std::int64_t> sa, sb;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Broadcast p;
  p.out.assign(r, 1);
  p.sa.assign(r, 0);
  p.sb.assign(r, 0);
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::int64_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1)
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcast-compatible");
    p.out[i] = std::max(ea, eb);
  }
  std::int64_t stride_a = 1, stride_b = 1;
  for (std::size_t k = r; k-- > 0;) {
    const std::int64_t ea = k < r - a.size() ? 1 : a[k - (r - a.size())];
    const std::int64_t eb = k < r - b.size() ? 1 : b[k - (r - b.size())];
    p.sa[k] = ea == 1 ? 0 : stride_a;
    p.sb[k] = eb == 1 ? 0 : stride_b;
    stride_a *= ea;
    stride_b *= eb;
  }
  return p;
}

// f(out_index, a_index, b_index) over every output element.
template <class F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  const std::size_t r = p.out.size();
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  const std::int64_t inner = p.out[r - 1];
  const std::int64_t sa_in = p.sa[r - 1], sb_in = p.sb[r - 1];
  const std::int64_t total = shape_numel(p.out);
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t o = 0; o < total; o += inner) {
    for (std::int64_t j = 0; j < inner; ++j) f(o + j, ia + j * sa_in, ib + j * sb_in);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += p.sa[d];
      ib += p.sb[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.sa[d] * p.out[d];
      ib -= p.sb[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

enum class BinOp { add, sub, mul, div };

const char* binop_name(BinOp op) {
  switch (op) {
    case BinOp::add: return "add";
    case BinOp::sub: return "sub";
    case BinOp::mul: return "mul";
    case BinOp::div: return "div";
  }
  return "?";
}

Tensor binary(const Tensor& a, const Tensor& b, BinOp op) {
  const char* name = binop_name(op);
  detail::same_dtype(a, b, name);
  return dispatch(a.dtype(), [&]<class T>() {
    const auto A = a.data<T>();
    const auto B = b.data<T>();
    const bool same = a.shape() == b.shape();
    auto p = same ? Broadcast{a.shape(), {}, {}} : plan_broadcast(a.shape(), b.shape(), name);
    std::vector<T> out(static_cast<std::size_t>(shape_numel(p.out)));
    auto apply = [op](T x, T y) {
      switch (op) {
        case BinOp::add: return x + y;
        case BinOp::sub: return x - y;
        case BinOp::mul: return x * y;
        case BinOp::div: return x / y;
      }
      return T(0);
    };
    if (same) {
      const auto n = static_cast<std::int64_t>(out.size());
      if (op == BinOp::mul) {
        kernels::vmul(n, A.data(), B.data(), out.data());
      } else {
        for (std::int64_t i = 0; i < n; ++i) out[i] = apply(A[i], B[i]);
      }
    } else {
      for_each_broadcast(p, [&](std::int64_t io, std::int64_t ia, std::int64_t ib) {
        out[io] = apply(A[ia], B[ib]);
      });
    }
    Shape out_shape = p.out;
    return detail::record<T>(
        name, std::move(out_shape), std::move(out), {a, b},
        [a, b, op, same, p = std::move(p)](std::span<const T> g) {
          const bool ga_on = wants(a), gb_on = wants(b);
          const auto A = a.data<T>();
          const auto B = b.data<T>();
          std::span<T> ga, gb;
          if (ga_on) ga = detail::grad_buffer<T>(a.impl());
          if (gb_on) gb = detail::grad_buffer<T>(b.impl());
          auto step = [&](std::int64_t io, std::int64_t ia, std::int64_t ib) {
            const T gi = g[io];
            switch (op) {
              case BinOp::add:
                if (ga_on) ga[ia] += gi;
                if (gb_on) gb[ib] += gi;
                break;
              case BinOp::sub:
                if (ga_on) ga[ia] += gi;
                if (gb_on) gb[ib] -= gi;
                break;
              case BinOp::mul:
                if (ga_on) ga[ia] += gi * B[ib];
                if (gb_on) gb[ib] += gi * A[ia];
                break;
              case BinOp::div:
                if (ga_on) ga[ia] += gi / B[ib];
                if (gb_on) gb[ib] -= gi * A[ia] / (B[ib] * B[ib]);
                break;
            }
          };
          if (same) {
            const auto n = static_cast<std::int64_t>(g.size());
            for (std::int64_t i = 0; i < n; ++i) step(i, i, i);
          } else {
            for_each_broadcast(p, step);
          }
        });
  });
}

// Unary op whose derivative is expressed through input x and output y.
template <class Fwd, class Deriv>
Tensor unary(const char* name, const Tensor& x, Fwd fwd, Deriv deriv) {
  return dispatch(x.dtype(), [&]<class T>() {
    const auto X = x.data<T>();
    std::vector<T> out(X.size());
    for (std::size_t i = 0; i < X.size(); ++i) out[i] = static_cast<T>(fwd(X[i]));
    std::vector<T> saved = out;
    return detail::record<T>(name, x.shape(), std::move(out), {x},
                             [x, deriv, y = std::move(saved)](std::span<const T> g) {
                               auto gx = detail::grad_buffer<T>(x.impl());
                               const auto X = x.data<T>();
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 gx[i] += g[i] * static_cast<T>(deriv(X[i], y[i]));
                             });
  });
}

void require_nonnegative(const Tensor& x, const char* op) {
  dispatch(x.dtype(), [&]<class T>() {
    for (auto v : x.data<T>())
      if (v < T(0))
        throw DomainError(std::string(op) + " of negative value " + std::to_string(v));
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::mul); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::div); }

Tensor add_scalar(const Tensor& x, double c) {
  return unary("add_scalar", x, [c](auto v) { return v + c; }, [](auto, auto) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double c) {
  return unary("mul_scalar", x, [c](auto v) { return v * c; }, [c](auto, auto) { return c; });
}

Tensor neg(const Tensor& x) {
  return unary("neg", x, [](auto v) { return -v; }, [](auto, auto) { return -1.0; });
}

Tensor relu(const Tensor& x) {
  return unary("relu", x, [](auto v) { return v > 0 ? v : decltype(v)(0); },
               [](auto v, auto) { return v > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x,
      [](auto v) {
        using T = decltype(v);
        if (v >= 0) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](auto, auto y) { return y * (1 - y); });
}

Tensor exp(const Tensor& x) {
  return unary("exp", x, [](auto v) { return std::exp(v); }, [](auto, auto y) { return y; });
}

Tensor log(const Tensor& x) {
  require_nonnegative(x, "log");
  return unary("log", x, [](auto v) { return std::log(v); },
               [](auto v, auto) { return 1.0 / static_cast<double>(v); });
}

Tensor sqrt(const Tensor& x) {
  require_nonnegative(x, "sqrt");
  return unary("sqrt", x, [](auto v) { return std::sqrt(v); },
               [](auto, auto y) { return 0.5 / static_cast<double>(y); });
}

Tensor square(const Tensor& x) {
  return unary("square", x, [](auto v) { return v * v; }, [](auto v, auto) { return 2.0 * v; });
}

Tensor clamp_min(const Tensor& x, double lo) {
  return unary("clamp_min", x,
               [lo](auto v) {
                 using T = decltype(v);
                 return v > static_cast<T>(lo) ? v : static_cast<T>(lo);
               },
               [lo](auto v, auto) {
                 using T = decltype(v);
                 return v > static_cast<T>(lo) ? 1.0 : 0.0;
               });
}

}  // namespace encap
