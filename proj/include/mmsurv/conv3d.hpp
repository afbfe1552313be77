#pragma once

#include <array>

#include "mmsurv/autodiff.hpp"

namespace mmsurv {

/// Naive is the reference implementation; Im2col lowers each sample to a
/// K x M column matrix and runs the convolution as a GEMM. Both paths must
/// agree to tight tolerance (covered by tests).
enum class ConvImpl { Naive, Im2col };

using Triple = std::array<int64_t, 3>;

struct Conv3dDims {
  int64_t n, c, d, h, w;       // input
  int64_t f, kd, kh, kw;       // filters
  int64_t od, oh, ow;          // output spatial
  Triple stride, pad;
};

inline Conv3dDims conv3d_dims(const Shape& x, const Shape& wt, const Shape& b, Triple stride,
                              Triple pad) {
  if (x.size() != 5 || wt.size() != 5 || b.size() != 1)
    throw ShapeError("conv3d: expected x[N,C,D,H,W], w[F,C,kD,kH,kW], b[F]");
  Conv3dDims dd{};
  dd.n = x[0]; dd.c = x[1]; dd.d = x[2]; dd.h = x[3]; dd.w = x[4];
  dd.f = wt[0]; dd.kd = wt[2]; dd.kh = wt[3]; dd.kw = wt[4];
  dd.stride = stride; dd.pad = pad;
  if (wt[1] != dd.c)
    throw ShapeError("conv3d: channel mismatch, input has " + std::to_string(dd.c) +
                     " channels but weight expects " + std::to_string(wt[1]));
  if (b[0] != dd.f) throw ShapeError("conv3d: bias length must equal filter count");
  for (int i = 0; i < 3; ++i)
    if (stride[i] < 1 || pad[i] < 0) throw ShapeError("conv3d: stride must be >=1 and padding >=0");
  dd.od = (dd.d + 2 * pad[0] - dd.kd) / stride[0] + 1;
  dd.oh = (dd.h + 2 * pad[1] - dd.kh) / stride[1] + 1;
  dd.ow = (dd.w + 2 * pad[2] - dd.kw) / stride[2] + 1;
  if (dd.d + 2 * pad[0] < dd.kd || dd.h + 2 * pad[1] < dd.kh || dd.w + 2 * pad[2] < dd.kw ||
      dd.od <= 0 || dd.oh <= 0 || dd.ow <= 0)
    throw ShapeError("conv3d: non-positive output dims for input " + shape_str(x) +
                     " with kernel " + shape_str(wt));
  return dd;
}

namespace detail {

template <class Scalar>
void conv3d_forward_naive(const Conv3dDims& dd, const Scalar* x, const Scalar* wt,
                          const Scalar* b, Scalar* out) {
  const int64_t in_hw = dd.h * dd.w, in_chw = dd.c * dd.d * in_hw;
  const int64_t k_vol = dd.kd * dd.kh * dd.kw;
  for (int64_t n = 0; n < dd.n; ++n)
    for (int64_t f = 0; f < dd.f; ++f)
      for (int64_t od = 0; od < dd.od; ++od)
        for (int64_t oh = 0; oh < dd.oh; ++oh)
          for (int64_t ow = 0; ow < dd.ow; ++ow) {
            Scalar acc = b[f];
            for (int64_t c = 0; c < dd.c; ++c)
              for (int64_t kd = 0; kd < dd.kd; ++kd) {
                const int64_t id = od * dd.stride[0] + kd - dd.pad[0];
                if (id < 0 || id >= dd.d) continue;
                for (int64_t kh = 0; kh < dd.kh; ++kh) {
                  const int64_t ih = oh * dd.stride[1] + kh - dd.pad[1];
                  if (ih < 0 || ih >= dd.h) continue;
                  for (int64_t kw = 0; kw < dd.kw; ++kw) {
                    const int64_t iw = ow * dd.stride[2] + kw - dd.pad[2];
                    if (iw < 0 || iw >= dd.w) continue;
                    acc += x[n * in_chw + c * dd.d * in_hw + id * in_hw + ih * dd.w + iw] *
                           wt[(f * dd.c + c) * k_vol + (kd * dd.kh + kh) * dd.kw + kw];
                  }
                }
              }
            out[(((n * dd.f + f) * dd.od + od) * dd.oh + oh) * dd.ow + ow] = acc;
          }
}

template <class Scalar>
void conv3d_backward_naive(const Conv3dDims& dd, const Scalar* x, const Scalar* wt,
                           const Scalar* dout, Scalar* dx, Scalar* dwt, Scalar* db) {
  const int64_t in_hw = dd.h * dd.w, in_chw = dd.c * dd.d * in_hw;
  const int64_t k_vol = dd.kd * dd.kh * dd.kw;
  for (int64_t n = 0; n < dd.n; ++n)
    for (int64_t f = 0; f < dd.f; ++f)
      for (int64_t od = 0; od < dd.od; ++od)
        for (int64_t oh = 0; oh < dd.oh; ++oh)
          for (int64_t ow = 0; ow < dd.ow; ++ow) {
            const Scalar go = dout[(((n * dd.f + f) * dd.od + od) * dd.oh + oh) * dd.ow + ow];
            db[f] += go;
            for (int64_t c = 0; c < dd.c; ++c)
              for (int64_t kd = 0; kd < dd.kd; ++kd) {
                const int64_t id = od * dd.stride[0] + kd - dd.pad[0];
                if (id < 0 || id >= dd.d) continue;
                for (int64_t kh = 0; kh < dd.kh; ++kh) {
                  const int64_t ih = oh * dd.stride[1] + kh - dd.pad[1];
                  if (ih < 0 || ih >= dd.h) continue;
                  for (int64_t kw = 0; kw < dd.kw; ++kw) {
                    const int64_t iw = ow * dd.stride[2] + kw - dd.pad[2];
                    if (iw < 0 || iw >= dd.w) continue;
                    const int64_t xi = n * in_chw + c * dd.d * in_hw + id * in_hw + ih * dd.w + iw;
                    const int64_t wi = (f * dd.c + c) * k_vol + (kd * dd.kh + kh) * dd.kw + kw;
                    dx[xi] += go * wt[wi];
                    dwt[wi] += go * x[xi];
                  }
                }
              }
          }
}

// Column matrix layout: K = C*kD*kH*kW rows, M = oD*oH*oW columns, row-major.
template <class Scalar>
void im2col(const Conv3dDims& dd, const Scalar* x_sample, Scalar* col) {
  const int64_t in_hw = dd.h * dd.w;
  const int64_t m = dd.od * dd.oh * dd.ow;
  int64_t r = 0;
  for (int64_t c = 0; c < dd.c; ++c)
    for (int64_t kd = 0; kd < dd.kd; ++kd)
      for (int64_t kh = 0; kh < dd.kh; ++kh)
        for (int64_t kw = 0; kw < dd.kw; ++kw, ++r) {
          Scalar* dst = col + r * m;
          int64_t mi = 0;
          for (int64_t od = 0; od < dd.od; ++od) {
            const int64_t id = od * dd.stride[0] + kd - dd.pad[0];
            const bool d_ok = id >= 0 && id < dd.d;
            for (int64_t oh = 0; oh < dd.oh; ++oh) {
              const int64_t ih = oh * dd.stride[1] + kh - dd.pad[1];
              const bool h_ok = ih >= 0 && ih < dd.h;
              for (int64_t ow = 0; ow < dd.ow; ++ow, ++mi) {
                const int64_t iw = ow * dd.stride[2] + kw - dd.pad[2];
                dst[mi] = (d_ok && h_ok && iw >= 0 && iw < dd.w)
                              ? x_sample[c * dd.d * in_hw + id * in_hw + ih * dd.w + iw]
                              : Scalar(0);
              }
            }
          }
        }
}

template <class Scalar>
void col2im_add(const Conv3dDims& dd, const Scalar* col, Scalar* dx_sample) {
  const int64_t in_hw = dd.h * dd.w;
  const int64_t m = dd.od * dd.oh * dd.ow;
  int64_t r = 0;
  for (int64_t c = 0; c < dd.c; ++c)
    for (int64_t kd = 0; kd < dd.kd; ++kd)
      for (int64_t kh = 0; kh < dd.kh; ++kh)
        for (int64_t kw = 0; kw < dd.kw; ++kw, ++r) {
          const Scalar* src = col + r * m;
          int64_t mi = 0;
          for (int64_t od = 0; od < dd.od; ++od) {
            const int64_t id = od * dd.stride[0] + kd - dd.pad[0];
            const bool d_ok = id >= 0 && id < dd.d;
            for (int64_t oh = 0; oh < dd.oh; ++oh) {
              const int64_t ih = oh * dd.stride[1] + kh - dd.pad[1];
              const bool h_ok = ih >= 0 && ih < dd.h;
              for (int64_t ow = 0; ow < dd.ow; ++ow, ++mi) {
                const int64_t iw = ow * dd.stride[2] + kw - dd.pad[2];
                if (d_ok && h_ok && iw >= 0 && iw < dd.w)
                  dx_sample[c * dd.d * in_hw + id * in_hw + ih * dd.w + iw] += src[mi];
              }
            }
          }
        }
}

}  // namespace detail

/// Direct 3D cross-correlation. Output spatial dims follow
/// out = floor((in + 2*pad - kernel) / stride) + 1.
template <class Scalar>
Tensor<Scalar> conv3d(Graph<Scalar>& g, const Tensor<Scalar>& x, const Tensor<Scalar>& w,
                      const Tensor<Scalar>& b, Triple stride, Triple pad,
                      ConvImpl impl = ConvImpl::Im2col) {
  const Conv3dDims dd = conv3d_dims(x.shape(), w.shape(), b.shape(), stride, pad);
  Tensor<Scalar> out = Tensor<Scalar>::zeros({dd.n, dd.f, dd.od, dd.oh, dd.ow});
  out.set_requires_grad(x.requires_grad() || w.requires_grad() || b.requires_grad());

  const int64_t k = dd.c * dd.kd * dd.kh * dd.kw;
  const int64_t m = dd.od * dd.oh * dd.ow;
  const int64_t in_sample = dd.c * dd.d * dd.h * dd.w;

  if (impl == ConvImpl::Naive) {
    detail::conv3d_forward_naive(dd, x.data(), w.data(), b.data(), out.data());
  } else {
    std::vector<Scalar> col(static_cast<size_t>(k * m));
    ConstRowMatMap<Scalar> wm(w.data(), dd.f, k);
    for (int64_t n = 0; n < dd.n; ++n) {
      detail::im2col(dd, x.data() + n * in_sample, col.data());
      ConstRowMatMap<Scalar> cm(col.data(), k, m);
      RowMatMap<Scalar> om(out.data() + n * dd.f * m, dd.f, m);
      om.noalias() = wm * cm;
      for (int64_t f = 0; f < dd.f; ++f) om.row(f).array() += b.data()[f];
    }
  }

  g.record({x, w, b, out}, [x, w, b, out, dd, impl, k, m, in_sample]() {
    auto dx = detail::adj(x);
    auto dw = detail::adj(w);
    auto db = detail::adj(b);
    auto dout = detail::adj(out);
    if (impl == ConvImpl::Naive) {
      detail::conv3d_backward_naive(dd, x.data(), w.data(), dout.data(), dx.data(), dw.data(),
                                    db.data());
      return;
    }
    std::vector<Scalar> col(static_cast<size_t>(k * m));
    std::vector<Scalar> dcol(static_cast<size_t>(k * m));
    ConstRowMatMap<Scalar> wm(w.data(), dd.f, k);
    RowMatMap<Scalar> dwm(dw.data(), dd.f, k);
    for (int64_t n = 0; n < dd.n; ++n) {
      detail::im2col(dd, x.data() + n * in_sample, col.data());
      ConstRowMatMap<Scalar> cm(col.data(), k, m);
      ConstRowMatMap<Scalar> dom(dout.data() + n * dd.f * m, dd.f, m);
      dwm.noalias() += dom * cm.transpose();
      RowMatMap<Scalar> dcm(dcol.data(), k, m);
      dcm.noalias() = wm.transpose() * dom;
      detail::col2im_add(dd, dcol.data(), dx.data() + n * in_sample);
      for (int64_t f = 0; f < dd.f; ++f) db[static_cast<size_t>(f)] += dom.row(f).sum();
    }
  });
  return out;
}

}  // namespace mmsurv
