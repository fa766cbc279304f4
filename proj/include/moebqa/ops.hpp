// Copyright (c) 2026, the moebqa authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "moebqa/rng.hpp"
#include "moebqa/tensor.hpp"

// Reverse-mode primitives. Every op validates shapes, computes the forward
// value, rejects non-finite results naming itself, and (when a tape is given
// and an input carries gradient) records a closure that accumulates into the
// inputs' grad buffers. tape == nullptr runs pure inference.

namespace moebqa {

namespace detail {

template <typename T>
inline void axpy_n(T* __restrict__ y, T alpha, const T* __restrict__ x,
                   int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// C[M,N] += A[M,K] * B[K,N]. Row-major throughout; the k-by-4 unroll keeps
// the C row in registers across four B rows and vectorizes cleanly.
template <typename T>
inline void gemm_accum(const T* __restrict__ a, const T* __restrict__ b,
                       T* __restrict__ c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    T* ci = c + i * n;
    int64_t p = 0;
    for (; p + 4 <= k; p += 4) {
      const T a0 = ai[p], a1 = ai[p + 1], a2 = ai[p + 2], a3 = ai[p + 3];
      const T* b0 = b + p * n;
      const T* b1 = b0 + n;
      const T* b2 = b1 + n;
      const T* b3 = b2 + n;
      for (int64_t j = 0; j < n; ++j) {
        ci[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
      }
    }
    for (; p < k; ++p) axpy_n(ci, ai[p], b + p * n, n);
  }
}

template <typename T>
inline std::vector<T> transposed(const T* src, int64_t rows, int64_t cols) {
  std::vector<T> out(static_cast<size_t>(rows * cols));
  for (int64_t i = 0; i < rows; ++i) {
    for (int64_t j = 0; j < cols; ++j) out[static_cast<size_t>(j * rows + i)] = src[i * cols + j];
  }
  return out;
}

template <typename T>
inline bool track(Tape<T>* tape, bool any_requires) {
  return tape != nullptr && any_requires;
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  const int ra = a.shape().rank();
  const int rb = b.shape().rank();
  if (ra < 1 || rb < 1) {
    throw DimensionError("matmul requires rank>=1 operands, got " +
                         a.shape().str() + " x " + b.shape().str());
  }
  const int64_t m = (ra == 1) ? 1 : a.shape().rows();
  const int64_t k = (ra == 1) ? a.shape().dim(0) : a.shape().cols();
  const int64_t kb = (rb == 1) ? b.shape().dim(0) : b.shape().rows();
  const int64_t n = (rb == 1) ? 1 : b.shape().cols();
  if (k != kb) {
    throw DimensionError("matmul inner dimensions disagree: " +
                         a.shape().str() + " x " + b.shape().str());
  }

  Shape out_shape;
  if (ra == 2 && rb == 2) {
    out_shape = Shape(m, n);
  } else if (ra == 2) {
    out_shape = Shape(m);
  } else if (rb == 2) {
    out_shape = Shape(n);
  }  // 1x1 -> scalar

  Tensor<T> out(out_shape);
  detail::gemm_accum(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  check_finite("matmul", out);

  if (detail::track(tape, a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    tape->watch(a);
    tape->watch(b);
    tape->watch_output(out);
    tape->record("matmul", [a, b, out, m, k, n]() mutable {
      const T* go = out.grad().data();
      const T* ad = a.data().data();
      const T* bd = b.data().data();
      if (a.requires_grad()) {
        // dA += dC * B^T
        auto bt = detail::transposed(bd, k, n);
        detail::gemm_accum(go, bt.data(), a.grad().data(), m, n, k);
      }
      if (b.requires_grad()) {
        // dB += A^T * dC
        auto at = detail::transposed(ad, m, k);
        detail::gemm_accum(at.data(), go, b.grad().data(), k, m, n);
      }
    });
  }
  return out;
}

// Same shape, or matrix + row vector broadcast over rows.
template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  const bool same = a.shape() == b.shape();
  const bool row_bcast = !same && a.shape().rank() == 2 &&
                         b.shape().rank() == 1 &&
                         a.shape().cols() == b.shape().dim(0);
  if (!same && !row_bcast) {
    throw DimensionError("add shapes incompatible: " + a.shape().str() +
                         " vs " + b.shape().str());
  }
  Tensor<T> out(a.shape());
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  T* od = out.data().data();
  if (same) {
    for (int64_t i = 0; i < a.numel(); ++i) od[i] = ad[i] + bd[i];
  } else {
    const int64_t rows = a.shape().rows();
    const int64_t nb = b.numel();
    for (int64_t r = 0; r < rows; ++r) {
      for (int64_t c = 0; c < nb; ++c) od[r * nb + c] = ad[r * nb + c] + bd[c];
    }
  }
  check_finite("add", out);

  if (detail::track(tape, a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    tape->watch(a);
    tape->watch(b);
    tape->watch_output(out);
    tape->record("add", [a, b, out, same]() mutable {
      const T* go = out.grad().data();
      if (a.requires_grad()) {
        T* ga = a.grad().data();
        for (int64_t i = 0; i < a.numel(); ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        T* gb = b.grad().data();
        if (same) {
          for (int64_t i = 0; i < b.numel(); ++i) gb[i] += go[i];
        } else {
          const int64_t rows = a.shape().rows();
          const int64_t nb = b.numel();
          for (int64_t r = 0; r < rows; ++r) {
            for (int64_t c = 0; c < nb; ++c) gb[c] += go[r * nb + c];
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& x, double c) {
  Tensor<T> out(x.shape());
  const T* xd = x.data().data();
  T* od = out.data().data();
  const T tc = static_cast<T>(c);
  for (int64_t i = 0; i < x.numel(); ++i) od[i] = xd[i] * tc;
  check_finite("scale", out);
  if (detail::track(tape, x.requires_grad())) {
    out.set_requires_grad(true);
    tape->watch(x);
    tape->watch_output(out);
    tape->record("scale", [x, out, tc]() mutable {
      const T* go = out.grad().data();
      T* gx = x.grad().data();
      for (int64_t i = 0; i < x.numel(); ++i) gx[i] += go[i] * tc;
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_const(Tape<T>* tape, const Tensor<T>& x, double c) {
  Tensor<T> out(x.shape());
  const T* xd = x.data().data();
  T* od = out.data().data();
  const T tc = static_cast<T>(c);
  for (int64_t i = 0; i < x.numel(); ++i) od[i] = xd[i] + tc;
  check_finite("add_const", out);
  if (detail::track(tape, x.requires_grad())) {
    out.set_requires_grad(true);
    tape->watch(x);
    tape->watch_output(out);
    tape->record("add_const", [x, out]() mutable {
      const T* go = out.grad().data();
      T* gx = x.grad().data();
      for (int64_t i = 0; i < x.numel(); ++i) gx[i] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul shapes differ: " + a.shape().str() + " vs " +
                         b.shape().str());
  }
  Tensor<T> out(a.shape());
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  T* od = out.data().data();
  for (int64_t i = 0; i < a.numel(); ++i) od[i] = ad[i] * bd[i];
  check_finite("mul", out);
  if (detail::track(tape, a.requires_grad() || b.requires_grad())) {
    out.set_requires_grad(true);
    tape->watch(a);
    tape->watch(b);
    tape->watch_output(out);
    tape->record("mul", [a, b, out]() mutable {
      const T* go = out.grad().data();
      const T* ad = a.data().data();
      const T* bd = b.data().data();
      if (a.requires_grad()) {
        T* ga = a.grad().data();
        for (int64_t i = 0; i < a.numel(); ++i) ga[i] += go[i] * bd[i];
      }
      if (b.requires_grad()) {
        T* gb = b.grad().data();
        for (int64_t i = 0; i < b.numel(); ++i) gb[i] += go[i] * ad[i];
      }
    });
  }
  return out;
}

// x * s where s is a scalar tensor on the tape (gate weighting).
template <typename T>
Tensor<T> scale_by(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& s) {
  if (s.shape().rank() != 0) {
    throw DimensionError("scale_by requires a scalar multiplier, got " +
                         s.shape().str());
  }
  Tensor<T> out(x.shape());
  const T sv = s.data()[0];
  const T* xd = x.data().data();
  T* od = out.data().data();
  for (int64_t i = 0; i < x.numel(); ++i) od[i] = xd[i] * sv;
  check_finite("scale_by", out);
  if (detail::track(tape, x.requires_grad() || s.requires_grad())) {
    out.set_requires_grad(true);
    tape->watch(x);
    tape->watch(s);
    tape->watch_output(out);
    tape->record("scale_by", [x, s, out]() mutable {
      const T* go = out.grad().data();
      const T sv = s.data()[0];
      const T* xd = x.data().data();
      if (x.requires_grad()) {
        T* gx = x.grad().data();
        for (int64_t i = 0; i < x.numel(); ++i) gx[i] += go[i] * sv;
      }
      if (s.requires_grad()) {
        T acc = T(0);
        for (int64_t i = 0; i < x.numel(); ++i) acc += go[i] * xd[i];
        s.grad()[0] += acc;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(Tape<T>* tape, const Tensor<T>& x) {
  if (x.shape().rank() != 2) {
    throw DimensionError("transpose requires rank 2, got " + x.shape().str());
  }
  const int64_t r = x.shape().rows();
  const int64_t c = x.shape().cols();
  Tensor<T> out(Shape(c, r));
  const T* xd = x.data().data();
  T* od = out.data().data();
  for (int64_t i = 0; i < r; ++i) {
    for (int64_t j = 0; j < c; ++j) od[j * r + i] = xd[i * c + j];
  }
  if (detail::track(tape, x.requires_grad())) {
    out.set_requires_grad(true);
    tape->watch(x);
    tape->watch_output(out);
    tape->record("transpose", [x, out, r, c]() mutable {
      const T* go = out.grad().data();
      T* gx = x.grad().data();
      for (int64_t i = 0; i < r; ++i) {
        for (int64_t j = 0; j < c; ++j) gx[i * c + j] += go[j * r + i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(Tape<T>* tape, const Tensor<T>& x, Shape shape) {
  if (shape.numel() != x.numel()) {
    throw DimensionError("reshape " + x.shape().str() + " -> " + shape.str() +
                         " changes element count");
  }
  Tensor<T> out(shape, std::vector<T>(x.data().begin(), x.data().end()));
  if (detail::track(tape, x.requires_grad())) {
    out.set_requires_grad(true);
    tape->watch(x);
    tape->watch_output(out);
    tape->record("reshape", [x, out]() mutable {
      const T* go = out.grad().data();
      T* gx = x.grad().data();
      for (int64_t i = 0; i < x.numel(); ++i) gx[i] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_rows(Tape<T>* tape, const Tensor<T>& x, int64_t r0, int64_t r1) {
  if (x.shape().rank() != 2) {
    throw DimensionError("slice_rows requires rank 2, got " + x.shape().str());
  }
  if (r0 < 0 || r1 > x.shape().rows() || r0 >= r1) {
    throw DimensionError("slice_rows range [" + std::to_string(r0) + "," +
                         std::to_string(r1) + ") invalid for " + x.shape().str());
  }
  const int64_t c = x.shape().cols();
  Tensor<T> out(Shape(r1 - r0, c));
  std::copy_n(x.data().data() + r0 * c, (r1 - r0) * c, out.data().data());
  if (detail::track(tape, x.requires_grad())) {
    out.set_requires_grad(true);
    tape->watch(x);
    tape->watch_output(out);
    tape->record("slice_rows", [x, out, r0, c]() mutable {
      const T* go = out.grad().data();
      T* gx = x.grad().data();
      for (int64_t i = 0; i < out.numel(); ++i) gx[r0 * c + i] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_cols(Tape<T>* tape, const Tensor<T>& x, int64_t c0, int64_t c1) {
  if (x.shape().rank() != 2) {
    throw DimensionError("slice_cols requires rank 2, got " + x.shape().str());
  }
  if (c0 < 0 || c1 > x.shape().cols() || c0 >= c1) {
    throw DimensionError("slice_cols range [" + std::to_string(c0) + "," +
                         std::to_string(c1) + ") invalid for " + x.shape().str());
  }
  const int64_t rows = x.shape().rows();
  const int64_t cols = x.shape().cols();
  const int64_t w = c1 - c0;
  Tensor<T> out(Shape(rows, w));
  const T* xd = x.data().data();
  T* od = out.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    std::copy_n(xd + r * cols + c0, w, od + r * w);
  }
  if (detail::track(tape, x.requires_grad())) {
    out.set_requires_grad(true);
    tape->watch(x);
    tape->watch_output(out);
    tape->record("slice_cols", [x, out, c0, cols, w, rows]() mutable {
      const T* go = out.grad().data();
      T* gx = x.grad().data();
      for (int64_t r = 0; r < rows; ++r) {
        for (int64_t j = 0; j < w; ++j) gx[r * cols + c0 + j] += go[r * w + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_cols(Tape<T>* tape, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of zero tensors");
  const int64_t rows = parts[0].shape().rows();
  int64_t total = 0;
  bool any_grad = false;
  for (const auto& p : parts) {
    if (p.shape().rank() != 2 || p.shape().rows() != rows) {
      throw DimensionError("concat_cols parts disagree on rows");
    }
    total += p.shape().cols();
    any_grad = any_grad || p.requires_grad();
  }
  Tensor<T> out(Shape(rows, total));
  T* od = out.data().data();
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t w = p.shape().cols();
    const T* pd = p.data().data();
    for (int64_t r = 0; r < rows; ++r) {
      std::copy_n(pd + r * w, w, od + r * total + off);
    }
    off += w;
  }
  if (detail::track(tape, any_grad)) {
    out.set_requires_grad(true);
    for (const auto& p : parts) tape->watch(p);
    tape->watch_output(out);
    tape->record("concat_cols", [parts, out, rows, total]() mutable {
      const T* go = out.grad().data();
      int64_t off = 0;
      for (auto& p : parts) {
        const int64_t w = p.shape().cols();
        if (p.requires_grad()) {
          T* gp = p.grad().data();
          for (int64_t r = 0; r < rows; ++r) {
            for (int64_t j = 0; j < w; ++j) gp[r * w + j] += go[r * total + off + j];
          }
        }
        off += w;
      }
    });
  }
  return out;
}

// Scalars -> rank-1 vector.
template <typename T>
Tensor<T> stack(Tape<T>* tape, const std::vector<Tensor<T>>& scalars) {
  if (scalars.empty()) throw DimensionError("stack of zero scalars");
  bool any_grad = false;
  Tensor<T> out(Shape(static_cast<int64_t>(scalars.size())));
  for (size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i].shape().rank() != 0) {
      throw DimensionError("stack expects scalars, got " +
                           scalars[i].shape().str());
    }
    out.data()[i] = scalars[i].data()[0];
    any_grad = any_grad || scalars[i].requires_grad();
  }
  if (detail::track(tape, any_grad)) {
    out.set_requires_grad(true);
    for (const auto& s : scalars) tape->watch(s);
    tape->watch_output(out);
    tape->record("stack", [scalars, out]() mutable {
      const T* go = out.grad().data();
      for (size_t i = 0; i < scalars.size(); ++i) {
        if (scalars[i].requires_grad()) scalars[i].grad()[0] += go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> pick(Tape<T>* tape, const Tensor<T>& x, int64_t index) {
  if (x.shape().rank() != 1) {
    throw DimensionError("pick requires rank 1, got " + x.shape().str());
  }
  if (index < 0 || index >= x.shape().dim(0)) {
    throw DimensionError("pick index " + std::to_string(index) +
                         " out of range for " + x.shape().str());
  }
  Tensor<T> out = Tensor<T>::scalar(x.at(index));
  if (detail::track(tape, x.requires_grad())) {
    out.set_requires_grad(true);
    tape->watch(x);
    tape->watch_output(out);
    tape->record("pick", [x, out, index]() mutable {
      x.grad()[static_cast<size_t>(index)] += out.grad()[0];
    });
  }
  return out;
}

// Max-subtracted softmax over the last dimension; rank 1 or 2.
template <typename T>
Tensor<T> softmax_lastdim(Tape<T>* tape, const Tensor<T>& x) {
  if (x.shape().rank() < 1 || x.shape().last_dim() < 1) {
    throw DimensionError("softmax_lastdim requires a non-empty last dimension, got " +
                         x.shape().str());
  }
  const int64_t d = x.shape().last_dim();
  const int64_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  const T* xd = x.data().data();
  T* od = out.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = xd + r * d;
    T* orow = od + r * d;
    T mx = xr[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    T sum = T(0);
    for (int64_t j = 0; j < d; ++j) {
      orow[j] = std::exp(xr[j] - mx);
      sum += orow[j];
    }
    for (int64_t j = 0; j < d; ++j) orow[j] /= sum;
  }
  check_finite("softmax_lastdim", out);
  if (detail::track(tape, x.requires_grad())) {
    out.set_requires_grad(true);
    tape->watch(x);
    tape->watch_output(out);
    tape->record("softmax_lastdim", [x, out, rows, d]() mutable {
      const T* go = out.grad().data();
      const T* od = out.data().data();
      T* gx = x.grad().data();
      for (int64_t r = 0; r < rows; ++r) {
        const T* y = od + r * d;
        const T* gy = go + r * d;
        T inner = T(0);
        for (int64_t j = 0; j < d; ++j) inner += y[j] * gy[j];
        for (int64_t j = 0; j < d; ++j) gx[r * d + j] += y[j] * (gy[j] - inner);
      }
    });
  }
  return out;
}

// Per-row normalization with population variance, then affine gain/bias.
template <typename T>
Tensor<T> layer_norm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, double eps) {
  if (eps <= 0) throw ConfigError("layer_norm eps must be positive");
  const int64_t d = x.shape().last_dim();
  if (gain.shape().rank() != 1 || gain.shape().dim(0) != d ||
      bias.shape().rank() != 1 || bias.shape().dim(0) != d) {
    throw DimensionError("layer_norm gain/bias must be rank-1 of length " +
                         std::to_string(d));
  }
  const int64_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  std::vector<T> inv_std(static_cast<size_t>(rows));
  std::vector<T> means(static_cast<size_t>(rows));
  const T* xd = x.data().data();
  const T* gd = gain.data().data();
  const T* bd = bias.data().data();
  T* od = out.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = xd + r * d;
    T mean = T(0);
    for (int64_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<T>(d);
    T var = T(0);
    for (int64_t j = 0; j < d; ++j) {
      const T t = xr[j] - mean;
      var += t * t;
    }
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    means[static_cast<size_t>(r)] = mean;
    inv_std[static_cast<size_t>(r)] = is;
    for (int64_t j = 0; j < d; ++j) {
      od[r * d + j] = (xr[j] - mean) * is * gd[j] + bd[j];
    }
  }
  check_finite("layer_norm", out);
  if (detail::track(tape, x.requires_grad() || gain.requires_grad() ||
                              bias.requires_grad())) {
    out.set_requires_grad(true);
    tape->watch(x);
    tape->watch(gain);
    tape->watch(bias);
    tape->watch_output(out);
    tape->record("layer_norm",
                 [x, gain, bias, out, rows, d, means, inv_std]() mutable {
      const T* go = out.grad().data();
      const T* xd = x.data().data();
      const T* gd = gain.data().data();
      for (int64_t r = 0; r < rows; ++r) {
        const T mean = means[static_cast<size_t>(r)];
        const T is = inv_std[static_cast<size_t>(r)];
        const T* gy = go + r * d;
        const T* xr = xd + r * d;
        if (gain.requires_grad() || bias.requires_grad()) {
          T* gg = gain.requires_grad() ? gain.grad().data() : nullptr;
          T* gb = bias.requires_grad() ? bias.grad().data() : nullptr;
          for (int64_t j = 0; j < d; ++j) {
            const T xhat = (xr[j] - mean) * is;
            if (gg) gg[j] += gy[j] * xhat;
            if (gb) gb[j] += gy[j];
          }
        }
        if (x.requires_grad()) {
          T* gx = x.grad().data();
          // dxhat = gy * gain; dx = is*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
          T sum_dxhat = T(0);
          T sum_dxhat_xhat = T(0);
          for (int64_t j = 0; j < d; ++j) {
            const T xhat = (xr[j] - mean) * is;
            const T dxhat = gy[j] * gd[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
          }
          const T inv_d = T(1) / static_cast<T>(d);
          for (int64_t j = 0; j < d; ++j) {
            const T xhat = (xr[j] - mean) * is;
            const T dxhat = gy[j] * gd[j];
            gx[r * d + j] +=
                is * (dxhat - sum_dxhat * inv_d - xhat * sum_dxhat_xhat * inv_d);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* xd = x.data().data();
  T* od = out.data().data();
  const T inv_sqrt2 = static_cast<T>(1.0 / std::numbers::sqrt2);
  for (int64_t i = 0; i < x.numel(); ++i) {
    od[i] = static_cast<T>(0.5) * xd[i] *
            (T(1) + std::erf(xd[i] * inv_sqrt2));
  }
  check_finite("gelu", out);
  if (detail::track(tape, x.requires_grad())) {
    out.set_requires_grad(true);
    tape->watch(x);
    tape->watch_output(out);
    tape->record("gelu", [x, out, inv_sqrt2]() mutable {
      const T* go = out.grad().data();
      const T* xd = x.data().data();
      T* gx = x.grad().data();
      const T inv_sqrt2pi = static_cast<T>(1.0 / std::sqrt(2.0 * std::numbers::pi));
      for (int64_t i = 0; i < x.numel(); ++i) {
        const T cdf = static_cast<T>(0.5) * (T(1) + std::erf(xd[i] * inv_sqrt2));
        const T pdf = inv_sqrt2pi * std::exp(static_cast<T>(-0.5) * xd[i] * xd[i]);
        gx[i] += go[i] * (cdf + xd[i] * pdf);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> tanh_op(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* xd = x.data().data();
  T* od = out.data().data();
  for (int64_t i = 0; i < x.numel(); ++i) od[i] = std::tanh(xd[i]);
  check_finite("tanh", out);
  if (detail::track(tape, x.requires_grad())) {
    out.set_requires_grad(true);
    tape->watch(x);
    tape->watch_output(out);
    tape->record("tanh", [x, out]() mutable {
      const T* go = out.grad().data();
      const T* od = out.data().data();
      T* gx = x.grad().data();
      for (int64_t i = 0; i < x.numel(); ++i) {
        gx[i] += go[i] * (T(1) - od[i] * od[i]);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> log_op(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* xd = x.data().data();
  T* od = out.data().data();
  for (int64_t i = 0; i < x.numel(); ++i) od[i] = std::log(xd[i]);
  check_finite("log", out);
  if (detail::track(tape, x.requires_grad())) {
    out.set_requires_grad(true);
    tape->watch(x);
    tape->watch_output(out);
    tape->record("log", [x, out]() mutable {
      const T* go = out.grad().data();
      const T* xd = x.data().data();
      T* gx = x.grad().data();
      for (int64_t i = 0; i < x.numel(); ++i) gx[i] += go[i] / xd[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(Tape<T>* tape, const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  check_finite("sum", out);
  if (detail::track(tape, x.requires_grad())) {
    out.set_requires_grad(true);
    tape->watch(x);
    tape->watch_output(out);
    tape->record("sum", [x, out]() mutable {
      const T g = out.grad()[0];
      T* gx = x.grad().data();
      for (int64_t i = 0; i < x.numel(); ++i) gx[i] += g;
    });
  }
  return out;
}

// Arithmetic mean of rows [start, end) of a [T,D] matrix.
template <typename T>
Tensor<T> mean_over_span(Tape<T>* tape, const Tensor<T>& x, int64_t start,
                         int64_t end) {
  if (x.shape().rank() != 2) {
    throw DimensionError("mean_over_span requires rank 2, got " +
                         x.shape().str());
  }
  if (start == end) {
    throw SpanError("mean_over_span: empty span at " + std::to_string(start));
  }
  if (start < 0 || end > x.shape().rows() || start > end) {
    throw SpanError("mean_over_span: span [" + std::to_string(start) + "," +
                    std::to_string(end) + ") outside " + x.shape().str());
  }
  const int64_t d = x.shape().cols();
  const int64_t len = end - start;
  Tensor<T> out{Shape(d)};
  const T* xd = x.data().data();
  T* od = out.data().data();
  for (int64_t r = start; r < end; ++r) {
    for (int64_t j = 0; j < d; ++j) od[j] += xd[r * d + j];
  }
  const T inv = T(1) / static_cast<T>(len);
  for (int64_t j = 0; j < d; ++j) od[j] *= inv;
  check_finite("mean_over_span", out);
  if (detail::track(tape, x.requires_grad())) {
    out.set_requires_grad(true);
    tape->watch(x);
    tape->watch_output(out);
    tape->record("mean_over_span", [x, out, start, end, d, inv]() mutable {
      const T* go = out.grad().data();
      T* gx = x.grad().data();
      for (int64_t r = start; r < end; ++r) {
        for (int64_t j = 0; j < d; ++j) gx[r * d + j] += go[j] * inv;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> embedding_lookup(Tape<T>* tape, const Tensor<T>& table,
                           const std::vector<int>& ids) {
  if (table.shape().rank() != 2) {
    throw DimensionError("embedding table must be rank 2, got " +
                         table.shape().str());
  }
  const int64_t v = table.shape().rows();
  const int64_t d = table.shape().cols();
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw InputError("embedding id " + std::to_string(id) +
                       " out of range [0," + std::to_string(v) + ")");
    }
  }
  Tensor<T> out(Shape(static_cast<int64_t>(ids.size()), d));
  const T* td = table.data().data();
  T* od = out.data().data();
  for (size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(td + static_cast<int64_t>(ids[i]) * d, d,
                od + static_cast<int64_t>(i) * d);
  }
  if (detail::track(tape, table.requires_grad())) {
    out.set_requires_grad(true);
    tape->watch(table);
    tape->watch_output(out);
    tape->record("embedding_lookup", [table, out, ids, d]() mutable {
      const T* go = out.grad().data();
      T* gt = table.grad().data();
      for (size_t i = 0; i < ids.size(); ++i) {
        detail::axpy_n(gt + static_cast<int64_t>(ids[i]) * d, T(1),
                       go + static_cast<int64_t>(i) * d, d);
      }
    });
  }
  return out;
}

// Inverted dropout with a counter-based mask: the mask depends only on
// (seed, call_site, step, element), so repeated evaluation at the same step
// is deterministic and finite differences see a fixed mask. Identity when
// p == 0 or not training.
template <typename T>
Tensor<T> dropout(Tape<T>* tape, const Tensor<T>& x, double p, uint64_t seed,
                  uint64_t call_site, uint64_t step, bool training) {
  if (p < 0.0 || p >= 1.0) {
    throw ConfigError("dropout probability must be in [0,1), got " +
                      std::to_string(p));
  }
  if (!training || p == 0.0) return x;
  Tensor<T> out(x.shape());
  const T inv_keep = static_cast<T>(1.0 / (1.0 - p));
  const T* xd = x.data().data();
  T* od = out.data().data();
  auto keep = std::make_shared<std::vector<uint8_t>>(
      static_cast<size_t>(x.numel()));
  for (int64_t i = 0; i < x.numel(); ++i) {
    const bool k =
        dropout_uniform(seed, call_site, step, static_cast<uint64_t>(i)) >= p;
    (*keep)[static_cast<size_t>(i)] = k ? 1 : 0;
    od[i] = k ? xd[i] * inv_keep : T(0);
  }
  check_finite("dropout", out);
  if (detail::track(tape, x.requires_grad())) {
    out.set_requires_grad(true);
    tape->watch(x);
    tape->watch_output(out);
    tape->record("dropout", [x, out, keep, inv_keep]() mutable {
      const T* go = out.grad().data();
      T* gx = x.grad().data();
      for (int64_t i = 0; i < x.numel(); ++i) {
        if ((*keep)[static_cast<size_t>(i)]) gx[i] += go[i] * inv_keep;
      }
    });
  }
  return out;
}

}  // namespace moebqa
