#include <cmath>
#include <limits>

#include "encap/ops.hpp"
#include "ops_internal.hpp"

namespace encap {

using detail::wants;

Tensor softmax(const Tensor& x, std::int64_t axis) {
  axis = detail::normalize_axis(axis, x.dim());
  const auto sp = detail::split_axis(x.shape(), axis);
  return dispatch(x.dtype(), [&]<class T>() {
    const auto X = x.data<T>();
    std::vector<T> y(X.size());
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t i = 0; i < sp.inner; ++i) {
        const auto base = o * sp.n * sp.inner + i;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::int64_t k = 0; k < sp.n; ++k) mx = std::max(mx, X[base + k * sp.inner]);
        T s = 0;
        for (std::int64_t k = 0; k < sp.n; ++k) {
          const T e = std::exp(X[base + k * sp.inner] - mx);
          y[base + k * sp.inner] = e;
          s += e;
        }
        for (std::int64_t k = 0; k < sp.n; ++k) y[base + k * sp.inner] /= s;
      }
    std::vector<T> saved = y;
    return detail::record<T>(
        "softmax", x.shape(), std::move(y), {x}, [x, sp, y = std::move(saved)](std::span<const T> g) {
          auto gx = detail::grad_buffer<T>(x.impl());
          for (std::int64_t o = 0; o < sp.outer; ++o)
            for (std::int64_t i = 0; i < sp.inner; ++i) {
              const auto base = o * sp.n * sp.inner + i;
              T dotv = 0;
              for (std::int64_t k = 0; k < sp.n; ++k)
                dotv += g[base + k * sp.inner] * y[base + k * sp.inner];
              for (std::int64_t k = 0; k < sp.n; ++k) {
                const auto at = base + k * sp.inner;
                gx[at] += y[at] * (g[at] - dotv);
              }
            }
        });
  });
}

Tensor logsumexp(const Tensor& x, std::int64_t axis, bool keepdim) {
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
    std::vector<T> out(static_cast<std::size_t>(sp.outer * sp.inner));
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t i = 0; i < sp.inner; ++i) {
        const auto base = o * sp.n * sp.inner + i;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::int64_t k = 0; k < sp.n; ++k) mx = std::max(mx, X[base + k * sp.inner]);
        T s = 0;
        for (std::int64_t k = 0; k < sp.n; ++k) s += std::exp(X[base + k * sp.inner] - mx);
        out[o * sp.inner + i] = mx + std::log(s);
      }
    std::vector<T> saved = out;
    return detail::record<T>(
        "logsumexp", out_shape, std::move(out), {x},
        [x, sp, lse = std::move(saved)](std::span<const T> g) {
          auto gx = detail::grad_buffer<T>(x.impl());
          const auto X = x.data<T>();
          for (std::int64_t o = 0; o < sp.outer; ++o)
            for (std::int64_t i = 0; i < sp.inner; ++i) {
              const auto base = o * sp.n * sp.inner + i;
              const T gi = g[o * sp.inner + i];
              const T l = lse[o * sp.inner + i];
              for (std::int64_t k = 0; k < sp.n; ++k)
                gx[base + k * sp.inner] += gi * std::exp(X[base + k * sp.inner] - l);
            }
        });
  });
}

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                 Tensor& running_var, BatchNormArgs args) {
  if (x.dim() < 2) throw ShapeError("batchnorm expects at least 2-D input");
  const auto C = x.size(1);
  for (const Tensor* p : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var})
    if (p->numel() != C)
      throw ShapeError("batchnorm: parameter length " + std::to_string(p->numel()) +
                       " does not match channel extent " + std::to_string(C));
  detail::same_dtype(x, gamma, "batchnorm");
  detail::same_dtype(x, beta, "batchnorm");
  const auto sp = detail::split_axis(x.shape(), 1);  // outer = N, n = C, inner = spatial
  const auto count = sp.outer * sp.inner;
  return dispatch(x.dtype(), [&]<class T>() {
    const auto X = x.data<T>();
    const auto G = gamma.data<T>();
    const auto Bt = beta.data<T>();
    std::vector<T> mean_c(static_cast<std::size_t>(C)), inv_std(static_cast<std::size_t>(C));
    if (args.training) {
      auto rm = running_mean.data<T>();
      auto rv = running_var.data<T>();
      for (std::int64_t c = 0; c < C; ++c) {
        double s = 0;
        for (std::int64_t o = 0; o < sp.outer; ++o) {
          const T* p = X.data() + (o * C + c) * sp.inner;
          for (std::int64_t i = 0; i < sp.inner; ++i) s += p[i];
        }
        const double mu = s / static_cast<double>(count);
        double v = 0;
        for (std::int64_t o = 0; o < sp.outer; ++o) {
          const T* p = X.data() + (o * C + c) * sp.inner;
          for (std::int64_t i = 0; i < sp.inner; ++i) v += (p[i] - mu) * (p[i] - mu);
        }
        const double var = v / static_cast<double>(count);
        mean_c[c] = static_cast<T>(mu);
        inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + args.eps));
        const double unbiased = count > 1 ? v / static_cast<double>(count - 1) : var;
        rm[c] = static_cast<T>((1 - args.momentum) * rm[c] + args.momentum * mu);
        rv[c] = static_cast<T>((1 - args.momentum) * rv[c] + args.momentum * unbiased);
      }
    } else {
      const auto rm = running_mean.data<T>();
      const auto rv = running_var.data<T>();
      for (std::int64_t c = 0; c < C; ++c) {
        mean_c[c] = rm[c];
        inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[c]) + args.eps));
      }
    }
    std::vector<T> xhat(X.size()), y(X.size());
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t c = 0; c < C; ++c) {
        const auto base = (o * C + c) * sp.inner;
        for (std::int64_t i = 0; i < sp.inner; ++i) {
          const T h = (X[base + i] - mean_c[c]) * inv_std[c];
          xhat[base + i] = h;
          y[base + i] = G[c] * h + Bt[c];
        }
      }
    const bool training = args.training;
    // The graph only depends on the affine parameters, never on running stats.
    return detail::record<T>(
        "batchnorm", x.shape(), std::move(y), {x, gamma, beta},
        [x, gamma, beta, sp, C, count, training, xhat = std::move(xhat),
         inv_std = std::move(inv_std)](std::span<const T> g) {
          const auto G = gamma.data<T>();
          std::vector<double> sum_g(static_cast<std::size_t>(C), 0.0),
              sum_gh(static_cast<std::size_t>(C), 0.0);
          for (std::int64_t o = 0; o < sp.outer; ++o)
            for (std::int64_t c = 0; c < C; ++c) {
              const auto base = (o * C + c) * sp.inner;
              for (std::int64_t i = 0; i < sp.inner; ++i) {
                sum_g[c] += g[base + i];
                sum_gh[c] += g[base + i] * xhat[base + i];
              }
            }
          if (wants(gamma)) {
            auto gg = detail::grad_buffer<T>(gamma.impl());
            for (std::int64_t c = 0; c < C; ++c) gg[c] += static_cast<T>(sum_gh[c]);
          }
          if (wants(beta)) {
            auto gb = detail::grad_buffer<T>(beta.impl());
            for (std::int64_t c = 0; c < C; ++c) gb[c] += static_cast<T>(sum_g[c]);
          }
          if (!wants(x)) return;
          auto gx = detail::grad_buffer<T>(x.impl());
          const double inv_count = 1.0 / static_cast<double>(count);
          for (std::int64_t o = 0; o < sp.outer; ++o)
            for (std::int64_t c = 0; c < C; ++c) {
              const auto base = (o * C + c) * sp.inner;
              const T scale = G[c] * inv_std[c];
              if (training) {
                const T mg = static_cast<T>(sum_g[c] * inv_count);
                const T mgh = static_cast<T>(sum_gh[c] * inv_count);
                for (std::int64_t i = 0; i < sp.inner; ++i)
                  gx[base + i] += scale * (g[base + i] - mg - xhat[base + i] * mgh);
              } else {
                for (std::int64_t i = 0; i < sp.inner; ++i) gx[base + i] += scale * g[base + i];
              }
            }
        });
  });
}

Tensor squash(const Tensor& x, std::int64_t axis, double eps) {
  axis = detail::normalize_axis(axis, x.dim());
  const auto sp = detail::split_axis(x.shape(), axis);
  return dispatch(x.dtype(), [&]<class T>() {
    const auto X = x.data<T>();
    const auto groups = sp.outer * sp.inner;
    std::vector<T> y(X.size());
    // Per capsule: scale = n2 / ((1 + n2) sqrt(n2 + eps)) and d(scale)/d(n2).
    std::vector<T> scale(static_cast<std::size_t>(groups)), dscale(static_cast<std::size_t>(groups));
    for (std::int64_t o = 0; o < sp.outer; ++o)
      for (std::int64_t i = 0; i < sp.inner; ++i) {
        const auto base = o * sp.n * sp.inner + i;
        double n2 = 0;
        for (std::int64_t k = 0; k < sp.n; ++k) {
          const double v = X[base + k * sp.inner];
          n2 += v * v;
        }
        const double root = std::sqrt(n2 + eps);
        const double den = (1 + n2) * root;
        const double s = n2 / den;
        const double dden = root + (1 + n2) * 0.5 / root;
        const auto gidx = o * sp.inner + i;
        scale[gidx] = static_cast<T>(s);
        dscale[gidx] = static_cast<T>((den - n2 * dden) / (den * den));
        for (std::int64_t k = 0; k < sp.n; ++k)
          y[base + k * sp.inner] = static_cast<T>(s * X[base + k * sp.inner]);
      }
    return detail::record<T>(
        "squash", x.shape(), std::move(y), {x},
        [x, sp, scale = std::move(scale), dscale = std::move(dscale)](std::span<const T> g) {
          auto gx = detail::grad_buffer<T>(x.impl());
          const auto X = x.data<T>();
          for (std::int64_t o = 0; o < sp.outer; ++o)
            for (std::int64_t i = 0; i < sp.inner; ++i) {
              const auto base = o * sp.n * sp.inner + i;
              const auto gidx = o * sp.inner + i;
              T xg = 0;
              for (std::int64_t k = 0; k < sp.n; ++k)
                xg += X[base + k * sp.inner] * g[base + k * sp.inner];
              const T coeff = 2 * dscale[gidx] * xg;
              for (std::int64_t k = 0; k < sp.n; ++k) {
                const auto at = base + k * sp.inner;
                gx[at] += scale[gidx] * g[at] + coeff * X[at];
              }
            }
        });
  });
}

}  // namespace encap
