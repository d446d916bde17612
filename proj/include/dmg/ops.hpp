// Differentiable tensor ops. Every op validates shapes, runs its forward
// pass, and (when a tape is supplied and some input wants gradients)
// records a closure that scatters gradient contributions back into its
// inputs. All reductions accumulate in double with a fixed iteration order.
#pragma once

#include <cmath>
#include <cstring>

#include "dmg/gemm.hpp"
#include "dmg/tape.hpp"
#include "dmg/tensor.hpp"

namespace dmg {

namespace detail {

template <class T>
bool taping(Tape<T>* tape, std::initializer_list<const Tensor<T>*> inputs) {
  if (!tape) return false;
  for (const Tensor<T>* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Unrolls a (cin, h, w) image into the (cin*k*k) x (h*w) patch matrix for a
// stride-1, same-padded k x k convolution. Out-of-range taps become zeros.
template <class T>
void im2col(const T* x, int64_t cin, int64_t h, int64_t w, int64_t k, T* cols) {
  int64_t pad = (k - 1) / 2;
  int64_t plane = h * w;
  int64_t row = 0;
  for (int64_t ci = 0; ci < cin; ++ci) {
    for (int64_t ky = 0; ky < k; ++ky) {
      for (int64_t kx = 0; kx < k; ++kx, ++row) {
        T* dst = cols + row * plane;
        const T* src = x + ci * plane;
        int64_t shift = kx - pad;
        int64_t lo = std::max<int64_t>(0, -shift);
        int64_t hi = std::min<int64_t>(w, w - shift);
        for (int64_t oy = 0; oy < h; ++oy) {
          int64_t iy = oy + ky - pad;
          T* drow = dst + oy * w;
          if (iy < 0 || iy >= h) {
            std::memset(drow, 0, w * sizeof(T));
            continue;
          }
          const T* srow = src + iy * w;
          for (int64_t ox = 0; ox < lo; ++ox) drow[ox] = T(0);
          if (hi > lo) std::memcpy(drow + lo, srow + lo + shift, (hi - lo) * sizeof(T));
          for (int64_t ox = hi; ox < w; ++ox) drow[ox] = T(0);
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds patch-matrix gradients back into the image.
template <class T>
void col2im_add(const T* cols, int64_t cin, int64_t h, int64_t w, int64_t k, T* dx) {
  int64_t pad = (k - 1) / 2;
  int64_t plane = h * w;
  int64_t row = 0;
  for (int64_t ci = 0; ci < cin; ++ci) {
    for (int64_t ky = 0; ky < k; ++ky) {
      for (int64_t kx = 0; kx < k; ++kx, ++row) {
        const T* src = cols + row * plane;
        T* dst = dx + ci * plane;
        int64_t shift = kx - pad;
        int64_t lo = std::max<int64_t>(0, -shift);
        int64_t hi = std::min<int64_t>(w, w - shift);
        for (int64_t oy = 0; oy < h; ++oy) {
          int64_t iy = oy + ky - pad;
          if (iy < 0 || iy >= h) continue;
          const T* srow = src + oy * w;
          T* drow = dst + iy * w;
          for (int64_t ox = lo; ox < hi; ++ox) drow[ox + shift] += srow[ox];
        }
      }
    }
  }
}

}  // namespace detail

// 2-D convolution, stride 1, same padding. x: (B, Cin, H, W); w: (Cout, Cin,
// k, k) with odd k; b: (1, Cout, 1, 1). Bias rows seed the output so the
// GEMM accumulates straight onto them.
template <class T>
Tensor<T> conv2d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const Shape4& xs = x.shape();
  const Shape4& ws = w.shape();
  require(ws.h == ws.w && ws.h % 2 == 1,
          "conv2d: kernel must be square with odd size, got " + ws.str());
  require(ws.c == xs.c, "conv2d: weight expects " + std::to_string(ws.c) + " input channels, got " +
                            xs.str());
  require_shape(b.shape(), Shape4{1, ws.b, 1, 1}, "conv2d bias");
  int64_t k = ws.h, cin = xs.c, cout = ws.b, h = xs.h, wd = xs.w;
  int64_t kk = cin * k * k, n = h * wd;
  Tensor<T> out = Tensor<T>::uninit(Shape4{xs.b, cout, h, wd});

  const T* xp = x.data();
  const T* wp = w.data();
  const T* bp = b.data();
  T* op = out.data();
  ThreadPool::instance().for_each_chunk(xs.b, [&](int64_t bb, int64_t be) {
    T* cols = k > 1 ? scratch_buffer<T>(0, kk * n) : nullptr;
    for (int64_t bi = bb; bi < be; ++bi) {
      const T* img = xp + bi * cin * n;
      const T* cptr = img;
      if (k > 1) {
        detail::im2col(img, cin, h, wd, k, cols);
        cptr = cols;
      }
      T* omat = op + bi * cout * n;
      for (int64_t co = 0; co < cout; ++co) {
        T bias = bp[co];
        T* orow = omat + co * n;
        for (int64_t i = 0; i < n; ++i) orow[i] = bias;
      }
      gemm_nn(wp, cptr, omat, cout, n, kk, true);
    }
  });

  if (detail::taping(tape, {&x, &w, &b})) {
    out.set_requires_grad(true);
    auto xh = x.handle(), wh = w.handle(), bh = b.handle(), oh = out.handle();
    tape->record(out, [xh, wh, bh, oh, k, cin, cout, h, wd, kk, n]() {
      if (oh->grad.empty()) return;
      const T* dy = oh->grad.data();
      int64_t batch = oh->shape.b;
      if (bh->requires_grad) {
        bh->ensure_grad();
        for (int64_t co = 0; co < cout; ++co) {
          double acc = 0.0;
          for (int64_t bi = 0; bi < batch; ++bi) {
            acc += sum64(dy + (bi * cout + co) * n, n);
          }
          bh->grad[static_cast<size_t>(co)] += static_cast<T>(acc);
        }
      }
      if (wh->requires_grad) {
        wh->ensure_grad();
        T* cols = k > 1 ? scratch_buffer<T>(0, kk * n) : nullptr;
        for (int64_t bi = 0; bi < batch; ++bi) {
          const T* img = xh->values.data() + bi * cin * n;
          const T* cptr = img;
          if (k > 1) {
            detail::im2col(img, cin, h, wd, k, cols);
            cptr = cols;
          }
          gemm_nt(dy + bi * cout * n, cptr, wh->grad.data(), cout, kk, n, true);
        }
      }
      if (xh->requires_grad) {
        xh->ensure_grad();
        T* wt = scratch_buffer<T>(1, kk * cout);
        transpose(wh->values.data(), cout, kk, wt);
        T* dcols = k > 1 ? scratch_buffer<T>(2, kk * n) : nullptr;
        for (int64_t bi = 0; bi < batch; ++bi) {
          T* dximg = xh->grad.data() + bi * cin * n;
          if (k == 1) {
            gemm_nn(wt, dy + bi * cout * n, dximg, kk, n, cout, true);
          } else {
            gemm_nn(wt, dy + bi * cout * n, dcols, kk, n, cout, false);
            detail::col2im_add(dcols, cin, h, wd, k, dximg);
          }
        }
      }
    });
  }
  return out;
}

namespace detail {

// Scatter for the transposed convolution: cols holds (Cout*16) x (Hin*Win)
// contributions; output pixel (2*iy + ky - 1, 2*ix + kx - 1) collects them.
template <class T>
void scatter_upconv(const T* cols, int64_t cout, int64_t hin, int64_t win, T* y) {
  int64_t hout = hin * 2, wout = win * 2, nin = hin * win;
  int64_t row = 0;
  for (int64_t co = 0; co < cout; ++co) {
    T* plane = y + co * hout * wout;
    for (int64_t ky = 0; ky < 4; ++ky) {
      for (int64_t kx = 0; kx < 4; ++kx, ++row) {
        const T* src = cols + row * nin;
        int64_t sy = ky - 1, sx = kx - 1;
        for (int64_t iy = 0; iy < hin; ++iy) {
          int64_t oy = 2 * iy + sy;
          if (oy < 0 || oy >= hout) continue;
          const T* srow = src + iy * win;
          T* drow = plane + oy * wout;
          int64_t lo = sx < 0 ? 1 : 0;
          int64_t hi = (2 * (win - 1) + sx < wout) ? win : win - 1;
          for (int64_t ix = lo; ix < hi; ++ix) drow[2 * ix + sx] += srow[ix];
        }
      }
    }
  }
}

// Gather adjoint of scatter_upconv.
template <class T>
void gather_upconv(const T* dy, int64_t cout, int64_t hin, int64_t win, T* dcols) {
  int64_t hout = hin * 2, wout = win * 2, nin = hin * win;
  int64_t row = 0;
  for (int64_t co = 0; co < cout; ++co) {
    const T* plane = dy + co * hout * wout;
    for (int64_t ky = 0; ky < 4; ++ky) {
      for (int64_t kx = 0; kx < 4; ++kx, ++row) {
        T* dst = dcols + row * nin;
        int64_t sy = ky - 1, sx = kx - 1;
        for (int64_t iy = 0; iy < hin; ++iy) {
          int64_t oy = 2 * iy + sy;
          T* drow = dst + iy * win;
          if (oy < 0 || oy >= hout) {
            std::memset(drow, 0, win * sizeof(T));
            continue;
          }
          const T* srow = plane + oy * wout;
          for (int64_t ix = 0; ix < win; ++ix) {
            int64_t ox = 2 * ix + sx;
            drow[ix] = (ox < 0 || ox >= wout) ? T(0) : srow[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Transposed convolution, kernel 4, stride 2, padding 1; doubles the
// spatial size. x: (B, Cin, H, W); w: (Cin, Cout, 4, 4); b: (1, Cout, 1, 1).
template <class T>
Tensor<T> transpose_conv2d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w,
                           const Tensor<T>& b) {
  const Shape4& xs = x.shape();
  const Shape4& ws = w.shape();
  require(ws.h == 4 && ws.w == 4, "transpose_conv2d: kernel must be 4x4, got " + ws.str());
  require(ws.b == xs.c, "transpose_conv2d: weight expects " + std::to_string(ws.b) +
                            " input channels, got " + xs.str());
  int64_t cin = xs.c, cout = ws.c, hin = xs.h, win = xs.w;
  require_shape(b.shape(), Shape4{1, cout, 1, 1}, "transpose_conv2d bias");
  int64_t nin = hin * win, k2 = cout * 16;
  Tensor<T> out = Tensor<T>::uninit(Shape4{xs.b, cout, hin * 2, win * 2});

  T* wt = scratch_buffer<T>(1, k2 * cin);
  transpose(w.data(), cin, k2, wt);

  const T* xp = x.data();
  const T* bp = b.data();
  T* op = out.data();
  int64_t nout = nin * 4;
  ThreadPool::instance().for_each_chunk(xs.b, [&](int64_t bb, int64_t be) {
    T* cols = scratch_buffer<T>(0, k2 * nin);
    for (int64_t bi = bb; bi < be; ++bi) {
      gemm_nn(wt, xp + bi * cin * nin, cols, k2, nin, cin, false);
      T* omat = op + bi * cout * nout;
      for (int64_t co = 0; co < cout; ++co) {
        T bias = bp[co];
        T* orow = omat + co * nout;
        for (int64_t i = 0; i < nout; ++i) orow[i] = bias;
      }
      detail::scatter_upconv(cols, cout, hin, win, omat);
    }
  });

  if (detail::taping(tape, {&x, &w, &b})) {
    out.set_requires_grad(true);
    auto xh = x.handle(), wh = w.handle(), bh = b.handle(), oh = out.handle();
    tape->record(out, [xh, wh, bh, oh, cin, cout, hin, win, nin, nout, k2]() {
      if (oh->grad.empty()) return;
      const T* dy = oh->grad.data();
      int64_t batch = oh->shape.b;
      if (bh->requires_grad) {
        bh->ensure_grad();
        for (int64_t co = 0; co < cout; ++co) {
          double acc = 0.0;
          for (int64_t bi = 0; bi < batch; ++bi) {
            acc += sum64(dy + (bi * cout + co) * nout, nout);
          }
          bh->grad[static_cast<size_t>(co)] += static_cast<T>(acc);
        }
      }
      T* dcols = scratch_buffer<T>(0, k2 * nin);
      for (int64_t bi = 0; bi < batch; ++bi) {
        detail::gather_upconv(dy + bi * cout * nout, cout, hin, win, dcols);
        if (wh->requires_grad) {
          wh->ensure_grad();
          gemm_nt(xh->values.data() + bi * cin * nin, dcols, wh->grad.data(), cin, k2, nin, true);
        }
        if (xh->requires_grad) {
          xh->ensure_grad();
          gemm_nn(wh->values.data(), dcols, xh->grad.data() + bi * cin * nin, cin, nin, k2, true);
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> relu(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::uninit(x.shape());
  const T* xp = x.data();
  T* op = out.data();
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) op[i] = xp[i] > T(0) ? xp[i] : T(0);
  if (detail::taping(tape, {&x})) {
    out.set_requires_grad(true);
    auto xh = x.handle(), oh = out.handle();
    tape->record(out, [xh, oh, n]() {
      if (oh->grad.empty() || !xh->requires_grad) return;
      xh->ensure_grad();
      const T* dy = oh->grad.data();
      const T* xv = xh->values.data();
      T* dx = xh->grad.data();
      for (int64_t i = 0; i < n; ++i) dx[i] += xv[i] > T(0) ? dy[i] : T(0);
    });
  }
  return out;
}

template <class T>
Tensor<T> sigmoid(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::uninit(x.shape());
  const T* xp = x.data();
  T* op = out.data();
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) {
    T v = xp[i];
    if (v >= T(0)) {
      op[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      T e = std::exp(v);
      op[i] = e / (T(1) + e);
    }
  }
  if (detail::taping(tape, {&x})) {
    out.set_requires_grad(true);
    auto xh = x.handle(), oh = out.handle();
    tape->record(out, [xh, oh, n]() {
      if (oh->grad.empty() || !xh->requires_grad) return;
      xh->ensure_grad();
      const T* dy = oh->grad.data();
      const T* y = oh->values.data();
      T* dx = xh->grad.data();
      for (int64_t i = 0; i < n; ++i) dx[i] += dy[i] * y[i] * (T(1) - y[i]);
    });
  }
  return out;
}

// 2x2 max pooling, stride 2. Ties resolve to the first maximum in row-major
// window order, and the gradient follows the same element.
template <class T>
Tensor<T> maxpool2x2(Tape<T>* tape, const Tensor<T>& x) {
  const Shape4& xs = x.shape();
  require(xs.h % 2 == 0 && xs.w % 2 == 0,
          "maxpool2x2: spatial dims must be even, got " + xs.str());
  Shape4 os{xs.b, xs.c, xs.h / 2, xs.w / 2};
  Tensor<T> out = Tensor<T>::uninit(os);
  auto picks = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(os.numel()));
  const T* xp = x.data();
  T* op = out.data();
  uint8_t* pk = picks->data();
  int64_t planes = xs.b * xs.c;
  for (int64_t pl = 0; pl < planes; ++pl) {
    const T* in = xp + pl * xs.plane();
    T* o = op + pl * os.plane();
    uint8_t* p = pk + pl * os.plane();
    for (int64_t oy = 0; oy < os.h; ++oy) {
      const T* r0 = in + (2 * oy) * xs.w;
      const T* r1 = r0 + xs.w;
      for (int64_t ox = 0; ox < os.w; ++ox) {
        T cand[4] = {r0[2 * ox], r0[2 * ox + 1], r1[2 * ox], r1[2 * ox + 1]};
        int best = 0;
        for (int i = 1; i < 4; ++i) {
          if (cand[i] > cand[best]) best = i;
        }
        o[oy * os.w + ox] = cand[best];
        p[oy * os.w + ox] = static_cast<uint8_t>(best);
      }
    }
  }
  if (detail::taping(tape, {&x})) {
    out.set_requires_grad(true);
    auto xh = x.handle(), oh = out.handle();
    tape->record(out, [xh, oh, picks, xs, os]() {
      if (oh->grad.empty() || !xh->requires_grad) return;
      xh->ensure_grad();
      const T* dy = oh->grad.data();
      T* dx = xh->grad.data();
      const uint8_t* pk = picks->data();
      int64_t planes = xs.b * xs.c;
      for (int64_t pl = 0; pl < planes; ++pl) {
        const T* d = dy + pl * os.plane();
        T* g = dx + pl * xs.plane();
        const uint8_t* p = pk + pl * os.plane();
        for (int64_t oy = 0; oy < os.h; ++oy) {
          for (int64_t ox = 0; ox < os.w; ++ox) {
            int pick = p[oy * os.w + ox];
            int64_t iy = 2 * oy + pick / 2, ix = 2 * ox + pick % 2;
            g[iy * xs.w + ix] += d[oy * os.w + ox];
          }
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> concat_channels(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  const Shape4& as = a.shape();
  const Shape4& bs = b.shape();
  require(as.b == bs.b && as.h == bs.h && as.w == bs.w,
          "concat_channels: non-channel dims differ, " + as.str() + " vs " + bs.str());
  Shape4 os{as.b, as.c + bs.c, as.h, as.w};
  Tensor<T> out = Tensor<T>::uninit(os);
  int64_t plane = as.plane();
  for (int64_t bi = 0; bi < as.b; ++bi) {
    std::memcpy(out.data() + bi * os.c * plane, a.data() + bi * as.c * plane,
                static_cast<size_t>(as.c * plane) * sizeof(T));
    std::memcpy(out.data() + (bi * os.c + as.c) * plane, b.data() + bi * bs.c * plane,
                static_cast<size_t>(bs.c * plane) * sizeof(T));
  }
  if (detail::taping(tape, {&a, &b})) {
    out.set_requires_grad(true);
    auto ah = a.handle(), bh = b.handle(), oh = out.handle();
    tape->record(out, [ah, bh, oh, plane]() {
      if (oh->grad.empty()) return;
      int64_t ca = ah->shape.c, cb = bh->shape.c, cc = ca + cb;
      const T* dy = oh->grad.data();
      for (int64_t bi = 0; bi < oh->shape.b; ++bi) {
        if (ah->requires_grad) {
          ah->ensure_grad();
          T* da = ah->grad.data() + bi * ca * plane;
          const T* src = dy + bi * cc * plane;
          for (int64_t i = 0; i < ca * plane; ++i) da[i] += src[i];
        }
        if (bh->requires_grad) {
          bh->ensure_grad();
          T* db = bh->grad.data() + bi * cb * plane;
          const T* src = dy + (bi * cc + ca) * plane;
          for (int64_t i = 0; i < cb * plane; ++i) db[i] += src[i];
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_shape(b.shape(), a.shape(), "add");
  Tensor<T> out = Tensor<T>::uninit(a.shape());
  const T* ap = a.data();
  const T* bp = b.data();
  T* op = out.data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i];
  if (detail::taping(tape, {&a, &b})) {
    out.set_requires_grad(true);
    auto ah = a.handle(), bh = b.handle(), oh = out.handle();
    tape->record(out, [ah, bh, oh, n]() {
      if (oh->grad.empty()) return;
      const T* dy = oh->grad.data();
      if (ah->requires_grad) {
        ah->ensure_grad();
        T* da = ah->grad.data();
        for (int64_t i = 0; i < n; ++i) da[i] += dy[i];
      }
      if (bh->requires_grad) {
        bh->ensure_grad();
        T* db = bh->grad.data();
        for (int64_t i = 0; i < n; ++i) db[i] += dy[i];
      }
    });
  }
  return out;
}

// Elementwise product. b may either match a's shape or be a single-channel
// map (B, 1, H, W) broadcast across a's channels, which is how attention
// coefficients scale a skip tensor.
template <class T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  const Shape4& as = a.shape();
  const Shape4& bs = b.shape();
  bool broadcast = bs.c == 1 && as.c > 1;
  require((bs == as) || (broadcast && bs.b == as.b && bs.h == as.h && bs.w == as.w),
          "mul: shapes " + as.str() + " and " + bs.str() + " are incompatible");
  Tensor<T> out = Tensor<T>::uninit(as);
  const T* ap = a.data();
  const T* bp = b.data();
  T* op = out.data();
  int64_t plane = as.plane();
  for (int64_t bi = 0; bi < as.b; ++bi) {
    for (int64_t c = 0; c < as.c; ++c) {
      const T* arow = ap + (bi * as.c + c) * plane;
      const T* brow = broadcast ? bp + bi * plane : bp + (bi * as.c + c) * plane;
      T* orow = op + (bi * as.c + c) * plane;
      for (int64_t i = 0; i < plane; ++i) orow[i] = arow[i] * brow[i];
    }
  }
  if (detail::taping(tape, {&a, &b})) {
    out.set_requires_grad(true);
    auto ah = a.handle(), bh = b.handle(), oh = out.handle();
    tape->record(out, [ah, bh, oh, broadcast, plane]() {
      if (oh->grad.empty()) return;
      const Shape4& as2 = ah->shape;
      const T* dy = oh->grad.data();
      const T* av = ah->values.data();
      const T* bv = bh->values.data();
      if (ah->requires_grad) {
        ah->ensure_grad();
        T* da = ah->grad.data();
        for (int64_t bi = 0; bi < as2.b; ++bi) {
          for (int64_t c = 0; c < as2.c; ++c) {
            int64_t off = (bi * as2.c + c) * plane;
            const T* brow = broadcast ? bv + bi * plane : bv + off;
            for (int64_t i = 0; i < plane; ++i) da[off + i] += dy[off + i] * brow[i];
          }
        }
      }
      if (bh->requires_grad) {
        bh->ensure_grad();
        T* db = bh->grad.data();
        for (int64_t bi = 0; bi < as2.b; ++bi) {
          for (int64_t c = 0; c < as2.c; ++c) {
            int64_t off = (bi * as2.c + c) * plane;
            T* brow = broadcast ? db + bi * plane : db + off;
            for (int64_t i = 0; i < plane; ++i) brow[i] += dy[off + i] * av[off + i];
          }
        }
      }
    });
  }
  return out;
}

// Per-channel batch normalization. Train mode normalizes with biased batch
// statistics and folds them into the running estimates; eval mode applies
// the stored estimates. Statistics accumulate in double per channel.
template <class T>
Tensor<T> batch_norm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, std::vector<T>& run_mean, std::vector<T>& run_var,
                     bool train, T momentum = T(0.9), T eps = T(1e-5)) {
  const Shape4& xs = x.shape();
  int64_t c = xs.c;
  require_shape(gamma.shape(), Shape4{1, c, 1, 1}, "batch_norm gamma");
  require_shape(beta.shape(), Shape4{1, c, 1, 1}, "batch_norm beta");
  require(static_cast<int64_t>(run_mean.size()) == c &&
              static_cast<int64_t>(run_var.size()) == c,
          "batch_norm: running stats sized for " + std::to_string(run_mean.size()) +
              " channels, tensor has " + std::to_string(c));
  int64_t plane = xs.plane();
  int64_t n = xs.b * plane;
  require(n > 0, "batch_norm: empty batch");

  auto mu = std::make_shared<std::vector<double>>(static_cast<size_t>(c));
  auto inv = std::make_shared<std::vector<double>>(static_cast<size_t>(c));
  const T* xp = x.data();
  for (int64_t ci = 0; ci < c; ++ci) {
    double m, v;
    if (train) {
      double s = 0.0;
      for (int64_t bi = 0; bi < xs.b; ++bi) s += sum64(xp + (bi * c + ci) * plane, plane);
      m = s / static_cast<double>(n);
      double sq = 0.0;
      for (int64_t bi = 0; bi < xs.b; ++bi) {
        sq += sumsq_dev64(xp + (bi * c + ci) * plane, plane, m);
      }
      v = sq / static_cast<double>(n);
      run_mean[static_cast<size_t>(ci)] =
          momentum * run_mean[static_cast<size_t>(ci)] + (T(1) - momentum) * static_cast<T>(m);
      run_var[static_cast<size_t>(ci)] =
          momentum * run_var[static_cast<size_t>(ci)] + (T(1) - momentum) * static_cast<T>(v);
    } else {
      m = static_cast<double>(run_mean[static_cast<size_t>(ci)]);
      v = static_cast<double>(run_var[static_cast<size_t>(ci)]);
    }
    (*mu)[static_cast<size_t>(ci)] = m;
    (*inv)[static_cast<size_t>(ci)] = 1.0 / std::sqrt(v + static_cast<double>(eps));
  }

  Tensor<T> out = Tensor<T>::uninit(xs);
  T* op = out.data();
  const T* gp = gamma.data();
  const T* bp = beta.data();
  for (int64_t bi = 0; bi < xs.b; ++bi) {
    for (int64_t ci = 0; ci < c; ++ci) {
      int64_t off = (bi * c + ci) * plane;
      double a = static_cast<double>(gp[ci]) * (*inv)[static_cast<size_t>(ci)];
      T fa = static_cast<T>(a);
      T fb = static_cast<T>(static_cast<double>(bp[ci]) - a * (*mu)[static_cast<size_t>(ci)]);
      for (int64_t i = 0; i < plane; ++i) op[off + i] = fa * xp[off + i] + fb;
    }
  }

  if (detail::taping(tape, {&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    auto xh = x.handle(), gh = gamma.handle(), bh = beta.handle(), oh = out.handle();
    tape->record(out, [xh, gh, bh, oh, mu, inv, train, c, plane, n]() {
      if (oh->grad.empty()) return;
      const Shape4& xs2 = xh->shape;
      const T* dy = oh->grad.data();
      const T* xv = xh->values.data();
      for (int64_t ci = 0; ci < c; ++ci) {
        double m = (*mu)[static_cast<size_t>(ci)];
        double iv = (*inv)[static_cast<size_t>(ci)];
        double s1 = 0.0, s2 = 0.0;
        for (int64_t bi = 0; bi < xs2.b; ++bi) {
          int64_t off = (bi * c + ci) * plane;
          s1 += sum64(dy + off, plane);
          s2 += dot_dev64(dy + off, xv + off, plane, m);
        }
        s2 *= iv;
        if (gh->requires_grad) {
          gh->ensure_grad();
          gh->grad[static_cast<size_t>(ci)] += static_cast<T>(s2);
        }
        if (bh->requires_grad) {
          bh->ensure_grad();
          bh->grad[static_cast<size_t>(ci)] += static_cast<T>(s1);
        }
        if (xh->requires_grad) {
          xh->ensure_grad();
          T* dx = xh->grad.data();
          double g = static_cast<double>(gh->values[static_cast<size_t>(ci)]);
          if (train) {
            // dx = g*iv*(dy - s1/n - xhat*s2/n) rearranged into one fma pass
            // over dy and one over (x - m).
            double a = g * iv;
            T fa = static_cast<T>(a);
            T fc = static_cast<T>(-a * iv * (s2 / static_cast<double>(n)));
            T fb = static_cast<T>(-a * (s1 / static_cast<double>(n)));
            T fm = static_cast<T>(m);
            for (int64_t bi = 0; bi < xs2.b; ++bi) {
              int64_t off = (bi * c + ci) * plane;
              for (int64_t i = 0; i < plane; ++i) {
                dx[off + i] += fa * dy[off + i] + fc * (xv[off + i] - fm) + fb;
              }
            }
          } else {
            T fa = static_cast<T>(g * iv);
            for (int64_t bi = 0; bi < xs2.b; ++bi) {
              int64_t off = (bi * c + ci) * plane;
              for (int64_t i = 0; i < plane; ++i) dx[off + i] += fa * dy[off + i];
            }
          }
        }
      }
    });
  }
  return out;
}

// Channel-wise softmax with max subtraction, applied independently at every
// (batch, y, x) position.
template <class T>
Tensor<T> softmax_channels(Tape<T>* tape, const Tensor<T>& x) {
  const Shape4& xs = x.shape();
  Tensor<T> out = Tensor<T>::uninit(xs);
  const T* xp = x.data();
  T* op = out.data();
  int64_t c = xs.c, plane = xs.plane();
  for (int64_t bi = 0; bi < xs.b; ++bi) {
    const T* xb = xp + bi * c * plane;
    T* ob = op + bi * c * plane;
    for (int64_t i = 0; i < plane; ++i) {
      T mx = xb[i];
      for (int64_t ci = 1; ci < c; ++ci) mx = std::max(mx, xb[ci * plane + i]);
      T denom = T(0);
      for (int64_t ci = 0; ci < c; ++ci) {
        T e = std::exp(xb[ci * plane + i] - mx);
        ob[ci * plane + i] = e;
        denom += e;
      }
      T invd = T(1) / denom;
      for (int64_t ci = 0; ci < c; ++ci) ob[ci * plane + i] *= invd;
    }
  }
  if (detail::taping(tape, {&x})) {
    out.set_requires_grad(true);
    auto xh = x.handle(), oh = out.handle();
    tape->record(out, [xh, oh, c, plane]() {
      if (oh->grad.empty() || !xh->requires_grad) return;
      xh->ensure_grad();
      const T* dy = oh->grad.data();
      const T* p = oh->values.data();
      T* dx = xh->grad.data();
      for (int64_t bi = 0; bi < oh->shape.b; ++bi) {
        int64_t base = bi * c * plane;
        for (int64_t i = 0; i < plane; ++i) {
          T dot = T(0);
          for (int64_t ci = 0; ci < c; ++ci) {
            int64_t at = base + ci * plane + i;
            dot += dy[at] * p[at];
          }
          for (int64_t ci = 0; ci < c; ++ci) {
            int64_t at = base + ci * plane + i;
            dx[at] += p[at] * (dy[at] - dot);
          }
        }
      }
    });
  }
  return out;
}

// Weighted categorical cross-entropy over labeled pixels. target is one-hot
// per pixel; an all-zero pixel is unlabeled and contributes nothing. The
// loss is sum(w_c * -log(clamp(p_c))) / sum(w_c) over labeled pixels, with
// probabilities clamped to [1e-7, 1]. Empty class_weights means all ones.
template <class T>
Tensor<T> cross_entropy(Tape<T>* tape, const Tensor<T>& probs, const Tensor<T>& target,
                        const std::vector<double>& class_weights = {}) {
  const Shape4& ps = probs.shape();
  require_shape(target.shape(), ps, "cross_entropy target");
  require(class_weights.empty() || static_cast<int64_t>(class_weights.size()) == ps.c,
          "cross_entropy: class_weights must have one entry per channel");
  constexpr double kClampLo = 1e-7;
  int64_t c = ps.c, plane = ps.plane();
  const T* pp = probs.data();
  const T* tp = target.data();
  double acc = 0.0, wsum = 0.0;
  for (int64_t bi = 0; bi < ps.b; ++bi) {
    int64_t base = bi * c * plane;
    for (int64_t i = 0; i < plane; ++i) {
      for (int64_t ci = 0; ci < c; ++ci) {
        double y = static_cast<double>(tp[base + ci * plane + i]);
        if (y <= 0.0) continue;
        double wc = class_weights.empty() ? 1.0 : class_weights[static_cast<size_t>(ci)];
        double p = std::min(1.0, std::max(kClampLo, static_cast<double>(pp[base + ci * plane + i])));
        acc += wc * y * -std::log(p);
        wsum += wc * y;
      }
    }
  }
  require(wsum > 0.0, "cross_entropy: target has no labeled pixels");
  Tensor<T> out(Shape4{1, 1, 1, 1}, static_cast<T>(acc / wsum));
  if (detail::taping(tape, {&probs})) {
    out.set_requires_grad(true);
    auto ph = probs.handle(), th = target.handle(), oh = out.handle();
    tape->record(out, [ph, th, oh, class_weights, wsum, c, plane]() {
      if (oh->grad.empty() || !ph->requires_grad) return;
      ph->ensure_grad();
      double g = static_cast<double>(oh->grad[0]);
      const T* pv = ph->values.data();
      const T* tv = th->values.data();
      T* dp = ph->grad.data();
      for (int64_t bi = 0; bi < ph->shape.b; ++bi) {
        int64_t base = bi * c * plane;
        for (int64_t i = 0; i < plane; ++i) {
          for (int64_t ci = 0; ci < c; ++ci) {
            int64_t at = base + ci * plane + i;
            double y = static_cast<double>(tv[at]);
            if (y <= 0.0) continue;
            double p = static_cast<double>(pv[at]);
            if (p < kClampLo || p > 1.0) continue;  // flat region of the clamp
            double wc = class_weights.empty() ? 1.0 : class_weights[static_cast<size_t>(ci)];
            dp[at] += static_cast<T>(-g * wc * y / (p * wsum));
          }
        }
      }
    });
  }
  return out;
}

// Mean over all elements, as a scalar tensor. Accumulates in double,
// left to right.
template <class T>
Tensor<T> reduce_mean(Tape<T>* tape, const Tensor<T>& x) {
  int64_t n = x.numel();
  Tensor<T> out(Shape4{1, 1, 1, 1}, static_cast<T>(mean64(x.data(), n)));
  if (detail::taping(tape, {&x})) {
    out.set_requires_grad(true);
    auto xh = x.handle(), oh = out.handle();
    tape->record(out, [xh, oh, n]() {
      if (oh->grad.empty() || !xh->requires_grad) return;
      xh->ensure_grad();
      T g = static_cast<T>(static_cast<double>(oh->grad[0]) / static_cast<double>(n));
      T* dx = xh->grad.data();
      for (int64_t i = 0; i < n; ++i) dx[i] += g;
    });
  }
  return out;
}

// Builds a one-hot (B, n_classes, H, W) target from per-pixel labels.
// ignore_value marks unlabeled pixels, which stay all-zero.
template <class T>
Tensor<T> one_hot(const std::vector<uint8_t>& labels, int64_t b, int64_t h, int64_t w,
                  int64_t n_classes, uint8_t ignore_value = 255) {
  require(static_cast<int64_t>(labels.size()) == b * h * w,
          "one_hot: label count does not match requested shape");
  Tensor<T> out(Shape4{b, n_classes, h, w});
  T* op = out.data();
  int64_t plane = h * w;
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t i = 0; i < plane; ++i) {
      uint8_t lab = labels[static_cast<size_t>(bi * plane + i)];
      if (lab == ignore_value) continue;
      require(lab < n_classes, "one_hot: label " + std::to_string(int(lab)) + " out of range");
      op[(bi * n_classes + lab) * plane + i] = T(1);
    }
  }
  return out;
}

}  // namespace dmg
