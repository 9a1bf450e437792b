#include <algorithm>

#include "encap/kernels.hpp"
#include "encap/ops.hpp"
#include "ops_internal.hpp"

namespace encap {

using detail::wants;

Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::same_dtype(a, b, "matmul");
  if (a.dim() != 2 || b.dim() != 2) throw ShapeError("matmul expects 2-D operands");
  const auto m = a.size(0), k = a.size(1), n = b.size(1);
  if (b.size(0) != k)
    throw ShapeError("matmul: inner extents differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  return dispatch(a.dtype(), [&]<class T>() {
    std::vector<T> out(static_cast<std::size_t>(m * n));
    kernels::gemm(false, false, m, n, k, T(1), a.data<T>().data(), k, b.data<T>().data(), n, T(0),
                  out.data(), n);
    return detail::record<T>("matmul", Shape{m, n}, std::move(out), {a, b},
                             [a, b, m, n, k](std::span<const T> g) {
                               if (wants(a))
                                 kernels::gemm(false, true, m, k, n, T(1), g.data(), n,
                                               b.data<T>().data(), n, T(1),
                                               detail::grad_buffer<T>(a.impl()).data(), k);
                               if (wants(b))
                                 kernels::gemm(true, false, k, n, m, T(1), a.data<T>().data(), k,
                                               g.data(), n, T(1),
                                               detail::grad_buffer<T>(b.impl()).data(), n);
                             });
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  detail::same_dtype(a, b, "bmm");
  if (a.dim() != 3 || b.dim() != 3) throw ShapeError("bmm expects 3-D operands");
  const auto batch = a.size(0), m = a.size(1), k = a.size(2), n = b.size(2);
  if (b.size(0) != batch || b.size(1) != k)
    throw ShapeError("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  return dispatch(a.dtype(), [&]<class T>() {
    std::vector<T> out(static_cast<std::size_t>(batch * m * n));
    const T* A = a.data<T>().data();
    const T* B = b.data<T>().data();
    detail::parallel_for(batch, [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t i = lo; i < hi; ++i)
        kernels::gemm(false, false, m, n, k, T(1), A + i * m * k, k, B + i * k * n, n, T(0),
                      out.data() + i * m * n, n);
    });
    return detail::record<T>(
        "bmm", Shape{batch, m, n}, std::move(out), {a, b},
        [a, b, batch, m, n, k](std::span<const T> g) {
          const T* A = a.data<T>().data();
          const T* B = b.data<T>().data();
          T* ga = wants(a) ? detail::grad_buffer<T>(a.impl()).data() : nullptr;
          T* gb = wants(b) ? detail::grad_buffer<T>(b.impl()).data() : nullptr;
          detail::parallel_for(batch, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t i = lo; i < hi; ++i) {
              if (ga)
                kernels::gemm(false, true, m, k, n, T(1), g.data() + i * m * n, n, B + i * k * n,
                              n, T(1), ga + i * m * k, k);
              if (gb)
                kernels::gemm(true, false, k, n, m, T(1), A + i * m * k, k, g.data() + i * m * n,
                              n, T(1), gb + i * k * n, n);
            }
          });
        });
  });
}

namespace {

struct ConvGeom {
  std::int64_t channels;  // per group, image side
  std::int64_t h, w;      // image extent
  std::int64_t k, stride, pad;
  std::int64_t oh, ow;    // column grid extent
  bool identity() const { return k == 1 && stride == 1 && pad == 0; }
  std::int64_t rows() const { return channels * k * k; }
  std::int64_t cols() const { return oh * ow; }
};

template <class T>
void im2col(const T* img, const ConvGeom& g, T* col) {
  for (std::int64_t c = 0; c < g.channels; ++c)
    for (std::int64_t ky = 0; ky < g.k; ++ky)
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        T* dst = col + ((c * g.k + ky) * g.k + kx) * g.cols();
        const T* src = img + c * g.h * g.w;
        for (std::int64_t oy = 0; oy < g.oh; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          T* row = dst + oy * g.ow;
          if (iy < 0 || iy >= g.h) {
            std::fill(row, row + g.ow, T(0));
            continue;
          }
          for (std::int64_t ox = 0; ox < g.ow; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            row[ox] = (ix >= 0 && ix < g.w) ? src[iy * g.w + ix] : T(0);
          }
        }
      }
}

template <class T>
void col2im(const T* col, const ConvGeom& g, T* img) {
  for (std::int64_t c = 0; c < g.channels; ++c)
    for (std::int64_t ky = 0; ky < g.k; ++ky)
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        const T* src = col + ((c * g.k + ky) * g.k + kx) * g.cols();
        T* dst = img + c * g.h * g.w;
        for (std::int64_t oy = 0; oy < g.oh; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          const T* row = src + oy * g.ow;
          for (std::int64_t ox = 0; ox < g.ow; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) dst[iy * g.w + ix] += row[ox];
          }
        }
      }
}

void check_groups(std::int64_t cin, std::int64_t cout, std::int64_t groups, const char* op) {
  if (groups < 1 || cin % groups != 0 || cout % groups != 0)
    throw ConfigError(std::string(op) + ": channels " + std::to_string(cin) + "->" +
                      std::to_string(cout) + " not divisible by groups " +
                      std::to_string(groups));
}

// Splits the batch into per-thread chunks; returns the chunk count.
std::int64_t chunk_count(std::int64_t batch) {
  return std::max<std::int64_t>(1, std::min<std::int64_t>(detail::thread_count(), batch));
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, Conv2dArgs args) {
  detail::same_dtype(x, w, "conv2d");
  if (x.dim() != 4 || w.dim() != 4) throw ShapeError("conv2d expects 4-D input and weight");
  if (args.stride < 1 || args.pad < 0) throw ConfigError("conv2d: invalid stride/pad");
  const auto B = x.size(0), cin = x.size(1), H = x.size(2), W = x.size(3);
  const auto cout = w.size(0), k = w.size(2);
  if (w.size(3) != k) throw ShapeError("conv2d: kernel must be square");
  check_groups(cin, cout, args.groups, "conv2d");
  const auto cin_g = cin / args.groups, cout_g = cout / args.groups;
  if (w.size(1) != cin_g)
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " does not match input " +
                     shape_str(x.shape()) + " with groups " + std::to_string(args.groups));
  const auto oh = (H + 2 * args.pad - k) / args.stride + 1;
  const auto ow = (W + 2 * args.pad - k) / args.stride + 1;
  if (H + 2 * args.pad < k || W + 2 * args.pad < k || oh <= 0 || ow <= 0)
    throw ShapeError("conv2d: kernel larger than padded input");
  const ConvGeom geom{cin_g, H, W, k, args.stride, args.pad, oh, ow};
  const auto groups = args.groups;

  return dispatch(x.dtype(), [&]<class T>() {
    std::vector<T> out(static_cast<std::size_t>(B * cout * oh * ow));
    const T* X = x.data<T>().data();
    const T* Wt = w.data<T>().data();
    const auto K = geom.rows(), N = geom.cols();
    detail::parallel_for(B, [&](std::int64_t lo, std::int64_t hi) {
      std::vector<T> col(geom.identity() ? 0 : static_cast<std::size_t>(K * N));
      for (std::int64_t b = lo; b < hi; ++b)
        for (std::int64_t gi = 0; gi < groups; ++gi) {
          const T* img = X + (b * cin + gi * cin_g) * H * W;
          const T* src = img;
          if (!geom.identity()) {
            im2col(img, geom, col.data());
            src = col.data();
          }
          kernels::gemm(false, false, cout_g, N, K, T(1), Wt + gi * cout_g * K, K, src, N, T(0),
                        out.data() + (b * cout + gi * cout_g) * N, N);
        }
    });
    return detail::record<T>(
        "conv2d", Shape{B, cout, oh, ow}, std::move(out), {x, w},
        [x, w, geom, B, cin, cout, groups, cin_g, cout_g](std::span<const T> g) {
          const T* X = x.data<T>().data();
          const T* Wt = w.data<T>().data();
          const auto K = geom.rows(), N = geom.cols();
          const auto HW = geom.h * geom.w;
          T* gx = wants(x) ? detail::grad_buffer<T>(x.impl()).data() : nullptr;
          T* gw = wants(w) ? detail::grad_buffer<T>(w.impl()).data() : nullptr;
          const auto chunks = chunk_count(B);
          const auto per = (B + chunks - 1) / chunks;
          std::vector<std::vector<T>> partial(
              static_cast<std::size_t>(gw && chunks > 1 ? chunks : 0));
          for (auto& p : partial) p.assign(static_cast<std::size_t>(w.numel()), T(0));
          detail::parallel_for(chunks, [&](std::int64_t c0, std::int64_t c1) {
            std::vector<T> col(static_cast<std::size_t>(K * N));
            for (std::int64_t c = c0; c < c1; ++c) {
              T* gw_dst = gw ? (chunks > 1 ? partial[c].data() : gw) : nullptr;
              for (std::int64_t b = c * per; b < std::min(B, (c + 1) * per); ++b)
                for (std::int64_t gi = 0; gi < groups; ++gi) {
                  const T* gout = g.data() + (b * cout + gi * cout_g) * N;
                  if (gw_dst) {
                    const T* img = X + (b * cin + gi * cin_g) * HW;
                    const T* src = img;
                    if (!geom.identity()) {
                      im2col(img, geom, col.data());
                      src = col.data();
                    }
                    kernels::gemm(false, true, cout_g, K, N, T(1), gout, N, src, N, T(1),
                                  gw_dst + gi * cout_g * K, K);
                  }
                  if (gx) {
                    T* dimg = gx + (b * cin + gi * cin_g) * HW;
                    if (geom.identity()) {
                      kernels::gemm(true, false, K, N, cout_g, T(1), Wt + gi * cout_g * K, K,
                                    gout, N, T(1), dimg, N);
                    } else {
                      kernels::gemm(true, false, K, N, cout_g, T(1), Wt + gi * cout_g * K, K,
                                    gout, N, T(0), col.data(), N);
                      col2im(col.data(), geom, dimg);
                    }
                  }
                }
            }
          });
          for (const auto& p : partial)
            for (std::size_t i = 0; i < p.size(); ++i) gw[i] += p[i];
        });
  });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, ConvTranspose2dArgs args) {
  detail::same_dtype(x, w, "conv_transpose2d");
  if (x.dim() != 4 || w.dim() != 4)
    throw ShapeError("conv_transpose2d expects 4-D input and weight");
  if (args.stride < 1 || args.pad < 0 || args.output_padding < 0 ||
      args.output_padding >= args.stride)
    throw ConfigError("conv_transpose2d: invalid stride/pad/output_padding");
  const auto B = x.size(0), cin = x.size(1), H = x.size(2), W = x.size(3);
  const auto k = w.size(2);
  if (w.size(3) != k) throw ShapeError("conv_transpose2d: kernel must be square");
  if (w.size(0) != cin)
    throw ShapeError("conv_transpose2d: weight " + shape_str(w.shape()) + " vs input " +
                     shape_str(x.shape()));
  const auto cout = w.size(1) * args.groups;
  check_groups(cin, cout, args.groups, "conv_transpose2d");
  const auto cin_g = cin / args.groups, cout_g = cout / args.groups;
  const auto oh = (H - 1) * args.stride - 2 * args.pad + k + args.output_padding;
  const auto ow = (W - 1) * args.stride - 2 * args.pad + k + args.output_padding;
  if (oh <= 0 || ow <= 0) throw ShapeError("conv_transpose2d: empty output");
  // Geometry of the conv2d this op is the adjoint of: image = output, grid = input.
  const ConvGeom geom{cout_g, oh, ow, k, args.stride, args.pad, H, W};
  const auto groups = args.groups;

  return dispatch(x.dtype(), [&]<class T>() {
    std::vector<T> out(static_cast<std::size_t>(B * cout * oh * ow), T(0));
    const T* X = x.data<T>().data();
    const T* Wt = w.data<T>().data();
    const auto K = geom.rows(), N = geom.cols();
    detail::parallel_for(B, [&](std::int64_t lo, std::int64_t hi) {
      std::vector<T> col(static_cast<std::size_t>(K * N));
      for (std::int64_t b = lo; b < hi; ++b)
        for (std::int64_t gi = 0; gi < groups; ++gi) {
          T* dst = out.data() + (b * cout + gi * cout_g) * oh * ow;
          const T* src = X + (b * cin + gi * cin_g) * N;
          if (geom.identity()) {
            kernels::gemm(true, false, K, N, cin_g, T(1), Wt + gi * cin_g * K, K, src, N, T(0),
                          dst, N);
          } else {
            kernels::gemm(true, false, K, N, cin_g, T(1), Wt + gi * cin_g * K, K, src, N, T(0),
                          col.data(), N);
            col2im(col.data(), geom, dst);
          }
        }
    });
    return detail::record<T>(
        "conv_transpose2d", Shape{B, cout, oh, ow}, std::move(out), {x, w},
        [x, w, geom, B, cin, cout, groups, cin_g, cout_g](std::span<const T> g) {
          const T* X = x.data<T>().data();
          const T* Wt = w.data<T>().data();
          const auto K = geom.rows(), N = geom.cols();
          const auto OHW = geom.h * geom.w;
          T* gx = wants(x) ? detail::grad_buffer<T>(x.impl()).data() : nullptr;
          T* gw = wants(w) ? detail::grad_buffer<T>(w.impl()).data() : nullptr;
          const auto chunks = chunk_count(B);
          const auto per = (B + chunks - 1) / chunks;
          std::vector<std::vector<T>> partial(
              static_cast<std::size_t>(gw && chunks > 1 ? chunks : 0));
          for (auto& p : partial) p.assign(static_cast<std::size_t>(w.numel()), T(0));
          detail::parallel_for(chunks, [&](std::int64_t c0, std::int64_t c1) {
            std::vector<T> col(static_cast<std::size_t>(K * N));
            for (std::int64_t c = c0; c < c1; ++c) {
              T* gw_dst = gw ? (chunks > 1 ? partial[c].data() : gw) : nullptr;
              for (std::int64_t b = c * per; b < std::min(B, (c + 1) * per); ++b)
                for (std::int64_t gi = 0; gi < groups; ++gi) {
                  const T* gimg = g.data() + (b * cout + gi * cout_g) * OHW;
                  const T* src = gimg;
                  if (!geom.identity()) {
                    im2col(gimg, geom, col.data());
                    src = col.data();
                  }
                  if (gx)
                    kernels::gemm(false, false, cin_g, N, K, T(1), Wt + gi * cin_g * K, K, src, N,
                                  T(1), gx + (b * cin + gi * cin_g) * N, N);
                  if (gw_dst)
                    kernels::gemm(false, true, cin_g, K, N, T(1), X + (b * cin + gi * cin_g) * N,
                                  N, src, N, T(1), gw_dst + gi * cin_g * K, K);
                }
            }
          });
          for (const auto& p : partial)
            for (std::size_t i = 0; i < p.size(); ++i) gw[i] += p[i];
        });
  });
}

}  // namespace encap
