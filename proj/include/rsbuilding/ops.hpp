#pragma once

// Differentiable tensor operations. Spatial tensors use HWC layout
// ([height, width, channels]); convolution kernels are [kh, kw, cin, cout].

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "rsbuilding/tensor.hpp"

namespace rsb::ops {

namespace detail {

inline void require(bool ok, const std::string& message) {
  if (!ok) throw ShapeError(message);
}

template <Real T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <Real T>
void require_rank(const char* op, const Tensor<T>& x, std::size_t rank) {
  require(x.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                                shape_str(x.shape()));
}

// Elementwise map y = f(x) with dy/dx = df(x, y).
template <Real T, typename F, typename DF>
Tensor<T> unary(const char* op, const Tensor<T>& x, F f, DF df) {
  const auto xs = x.data();
  std::vector<T> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
  return make_result<T>(op, x.shape(), std::move(out), {&x}, [df](rsb::detail::Node<T>& self) {
    auto* gx = parent_grad(self, 0);
    if (!gx) return;
    const auto& xv = self.parents[0]->data;
    for (std::size_t i = 0; i < xv.size(); ++i) (*gx)[i] += self.grad[i] * df(xv[i], self.data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise suite

template <Real T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  const auto as = a.data();
  const auto bs = b.data();
  std::vector<T> out(as.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] + bs[i];
  return make_result<T>("add", a.shape(), std::move(out), {&a, &b}, [](rsb::detail::Node<T>& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (auto* g = parent_grad(self, p)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

template <Real T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  const auto as = a.data();
  const auto bs = b.data();
  std::vector<T> out(as.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] - bs[i];
  return make_result<T>("sub", a.shape(), std::move(out), {&a, &b}, [](rsb::detail::Node<T>& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

template <Real T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  const auto as = a.data();
  const auto bs = b.data();
  std::vector<T> out(as.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] * bs[i];
  return make_result<T>("mul", a.shape(), std::move(out), {&a, &b}, [](rsb::detail::Node<T>& self) {
    const auto& av = self.parents[0]->data;
    const auto& bv = self.parents[1]->data;
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (auto* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

template <Real T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return detail::unary<T>("scale", x, [factor](T v) { return v * factor; },
                          [factor](T, T) { return factor; });
}

template <Real T>
Tensor<T> add_scalar(const Tensor<T>& x, T offset) {
  return detail::unary<T>("add_scalar", x, [offset](T v) { return v + offset; },
                          [](T, T) { return T(1); });
}

template <Real T>
Tensor<T> neg(const Tensor<T>& x) {
  return scale(x, T(-1));
}

template <Real T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary<T>("relu", x, [](T v) { return v > T(0) ? v : T(0); },
                          [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

// Exact (erf-based) GELU.
template <Real T>
Tensor<T> gelu(const Tensor<T>& x) {
  return detail::unary<T>(
      "gelu", x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2))); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * T(std::numbers::sqrt2 / 2)));
        const T pdf = std::exp(T(-0.5) * v * v) * T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
        return cdf + v * pdf;
      });
}

template <Real T>
T sigmoid_value(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <Real T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary<T>("sigmoid", x, [](T v) { return sigmoid_value(v); },
                          [](T, T y) { return y * (T(1) - y); });
}

// d|x|/dx taken as 0 at x == 0.
template <Real T>
Tensor<T> abs(const Tensor<T>& x) {
  return detail::unary<T>("abs", x, [](T v) { return std::abs(v); },
                          [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

// Gradient passes where lo <= x <= hi, zero outside.
template <Real T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return detail::unary<T>("clamp", x, [lo, hi](T v) { return std::clamp(v, lo, hi); },
                          [lo, hi](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

template <Real T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary<T>("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <Real T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary<T>("log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

// x[..., n] + v[n], broadcasting v over all leading positions.
template <Real T>
Tensor<T> add_lastdim(const Tensor<T>& x, const Tensor<T>& v) {
  detail::require(v.rank() == 1 && x.rank() >= 1 && x.shape().back() == v.dim(0),
                  "add_lastdim: cannot broadcast " + shape_str(v.shape()) + " over " +
                      shape_str(x.shape()));
  const std::size_t n = v.dim(0);
  const auto xs = x.data();
  const auto vs = v.data();
  std::vector<T> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); i += n)
    for (std::size_t j = 0; j < n; ++j) out[i + j] = xs[i + j] + vs[j];
  return make_result<T>("add_lastdim", x.shape(), std::move(out), {&x, &v},
                        [n](rsb::detail::Node<T>& self) {
                          if (auto* g = parent_grad(self, 0)) {
                            for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
                          }
                          if (auto* g = parent_grad(self, 1)) {
                            for (std::size_t i = 0; i < self.grad.size(); i += n)
                              for (std::size_t j = 0; j < n; ++j) (*g)[j] += self.grad[i + j];
                          }
                        });
}

// ---------------------------------------------------------------------------
// Structural operations

template <Real T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require(numel(shape) == x.numel(),
                  "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_result<T>("reshape", std::move(shape), std::move(out), {&x}, [](rsb::detail::Node<T>& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

template <Real T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::require_rank("transpose", x, 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  const auto xs = x.data();
  std::vector<T> out(xs.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = xs[r * cols + c];
  return make_result<T>("transpose", Shape{cols, rows}, std::move(out), {&x},
                        [rows, cols](rsb::detail::Node<T>& self) {
                          if (auto* g = parent_grad(self, 0)) {
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t c = 0; c < cols; ++c)
                                (*g)[r * cols + c] += self.grad[c * rows + r];
                          }
                        });
}

namespace detail {
// (outer, axis, inner) decomposition of a row-major shape around `axis`.
inline void split_shape(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace detail

template <Real T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  detail::require(!parts.empty(), "concat: no inputs");
  const Shape& first = parts.front().shape();
  detail::require(axis < first.size(), "concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    detail::require(s.size() == first.size(), "concat: rank mismatch");
    const std::size_t along = s[axis];
    s[axis] = first[axis];
    detail::require(s == first, "concat: incompatible shapes " + shape_str(first) + " and " +
                                    shape_str(p.shape()));
    out_shape[axis] += along;
  }
  std::size_t outer = 0, inner = 0;
  detail::split_shape(first, axis, outer, inner);
  const std::size_t out_row = out_shape[axis] * inner;
  std::vector<T> out(numel(out_shape));
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(axis) * inner;
    const auto ps = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(ps.begin() + o * w, w, out.begin() + o * out_row + offset);
    widths.push_back(w);
    offset += w;
  }
  return make_result<T>("concat", out_shape, std::move(out), parts,
                        [widths, outer, out_row](rsb::detail::Node<T>& self) {
                          std::size_t off = 0;
                          for (std::size_t p = 0; p < widths.size(); ++p) {
                            if (auto* g = parent_grad(self, p)) {
                              for (std::size_t o = 0; o < outer; ++o)
                                for (std::size_t i = 0; i < widths[p]; ++i)
                                  (*g)[o * widths[p] + i] += self.grad[o * out_row + off + i];
                            }
                            off += widths[p];
                          }
                        });
}

// Sub-range [start, start + length) along `axis`.
template <Real T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  detail::require(axis < x.rank() && start + length <= x.dim(axis) && length > 0,
                  "slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                      ") invalid for axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  std::size_t outer = 0, inner = 0;
  detail::split_shape(x.shape(), axis, outer, inner);
  const std::size_t in_row = x.dim(axis) * inner;
  const std::size_t w = length * inner;
  const std::size_t off = start * inner;
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  const auto xs = x.data();
  std::vector<T> out(outer * w);
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(xs.begin() + o * in_row + off, w, out.begin() + o * w);
  return make_result<T>("slice", std::move(out_shape), std::move(out), {&x},
                        [outer, in_row, w, off](rsb::detail::Node<T>& self) {
                          if (auto* g = parent_grad(self, 0)) {
                            for (std::size_t o = 0; o < outer; ++o)
                              for (std::size_t i = 0; i < w; ++i) (*g)[o * in_row + off + i] += self.grad[o * w + i];
                          }
                        });
}

// Splits along `axis` into consecutive pieces of the given sizes.
template <Real T>
std::vector<Tensor<T>> split(const Tensor<T>& x, std::size_t axis, const std::vector<std::size_t>& sizes) {
  std::size_t total = 0;
  for (auto s : sizes) total += s;
  detail::require(axis < x.rank() && total == x.dim(axis),
                  "split: sizes do not cover axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  std::vector<Tensor<T>> parts;
  std::size_t start = 0;
  for (auto s : sizes) {
    parts.push_back(slice(x, axis, start, s));
    start += s;
  }
  return parts;
}

// ---------------------------------------------------------------------------
// Reductions

template <Real T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  return make_result<T>("sum", Shape{}, std::vector<T>{total}, {&x}, [](rsb::detail::Node<T>& self) {
    if (auto* g = parent_grad(self, 0)) {
      for (auto& v : *g) v += self.grad[0];
    }
  });
}

template <Real T>
Tensor<T> mean(const Tensor<T>& x) {
  const T n = static_cast<T>(x.numel());
  T total = T(0);
  for (T v : x.data()) total += v;
  return make_result<T>("mean", Shape{}, std::vector<T>{total / n}, {&x}, [n](rsb::detail::Node<T>& self) {
    if (auto* g = parent_grad(self, 0)) {
      const T d = self.grad[0] / n;
      for (auto& v : *g) v += d;
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

// [m x k] * [k x n] -> [m x n]
template <Real T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                  "matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const T* A = a.data().data();
  const T* B = b.data().data();
  std::vector<T> out(m * n, T(0));
  T* C = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = A[i * k + p];
      const T* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return make_result<T>("matmul", Shape{m, n}, std::move(out), {&a, &b}, [m, k, n](rsb::detail::Node<T>& self) {
    const T* A = self.parents[0]->data.data();
    const T* B = self.parents[1]->data.data();
    const T* G = self.grad.data();
    if (auto* ga = parent_grad(self, 0)) {  // dA = dC * B^T
      T* GA = ga->data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T* grow = G + i * n;
          const T* brow = B + p * n;
          T acc = T(0);
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          GA[i * k + p] += acc;
        }
    }
    if (auto* gb = parent_grad(self, 1)) {  // dB = A^T * dC
      T* GB = gb->data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T av = A[i * k + p];
          const T* grow = G + i * n;
          T* gbrow = GB + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
    }
  });
}

// x[..., k] * W[k x n] + b[n], applied over every leading position.
template <Real T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::require(x.rank() >= 1 && weight.rank() == 2 && x.shape().back() == weight.dim(0),
                  "linear: input " + shape_str(x.shape()) + " does not match weight " +
                      shape_str(weight.shape()));
  const std::size_t k = weight.dim(0);
  const std::size_t rows = x.numel() / k;
  Tensor<T> flat = x.rank() == 2 ? x : reshape(x, Shape{rows, k});
  Tensor<T> y = add_lastdim(matmul(flat, weight), bias);
  if (x.rank() == 2) return y;
  Shape out = x.shape();
  out.back() = weight.dim(1);
  return reshape(y, std::move(out));
}

// ---------------------------------------------------------------------------
// Normalization

// Softmax over the last dimension, with per-row max subtraction.
template <Real T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  detail::require(x.rank() >= 1 && x.shape().back() >= 1, "softmax_lastdim: empty last dimension");
  const std::size_t n = x.shape().back();
  const auto xs = x.data();
  std::vector<T> out(xs.size());
  for (std::size_t r = 0; r < xs.size(); r += n) {
    T mx = xs[r];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xs[r + j]);
    T total = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      out[r + j] = std::exp(xs[r + j] - mx);
      total += out[r + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[r + j] /= total;
  }
  return make_result<T>("softmax_lastdim", x.shape(), std::move(out), {&x}, [n](rsb::detail::Node<T>& self) {
    auto* g = parent_grad(self, 0);
    if (!g) return;
    const auto& y = self.data;
    for (std::size_t r = 0; r < y.size(); r += n) {
      T dot = T(0);
      for (std::size_t j = 0; j < n; ++j) dot += self.grad[r + j] * y[r + j];
      for (std::size_t j = 0; j < n; ++j) (*g)[r + j] += y[r + j] * (self.grad[r + j] - dot);
    }
  });
}

// Normalizes each last-dimension vector to zero mean / unit variance
// (biased variance), then applies gain and bias.
template <Real T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  detail::require(x.rank() >= 1 && gain.rank() == 1 && bias.rank() == 1 &&
                      gain.dim(0) == x.shape().back() && bias.dim(0) == x.shape().back(),
                  "layer_norm: gain/bias " + shape_str(gain.shape()) + " do not match input " +
                      shape_str(x.shape()));
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  const auto xs = x.data();
  const auto gs = gain.data();
  const auto bs = bias.data();
  std::vector<T> out(xs.size());
  std::vector<T> xhat(xs.size());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xs.data() + r * n;
    T mu = T(0);
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<T>(n);
    T var = T(0);
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(n);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (row[j] - mu) * rs;
      xhat[r * n + j] = h;
      out[r * n + j] = h * gs[j] + bs[j];
    }
  }
  return make_result<T>(
      "layer_norm", x.shape(), std::move(out), {&x, &gain, &bias},
      [n, rows, xhat = std::move(xhat), rstd = std::move(rstd)](rsb::detail::Node<T>& self) {
        const auto& gv = self.parents[1]->data;
        const T* G = self.grad.data();
        if (auto* gg = parent_grad(self, 1)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) (*gg)[j] += G[r * n + j] * xhat[r * n + j];
        }
        if (auto* gb = parent_grad(self, 2)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) (*gb)[j] += G[r * n + j];
        }
        if (auto* gx = parent_grad(self, 0)) {
          const T inv_n = T(1) / static_cast<T>(n);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_dh = T(0), mean_dh_h = T(0);
            for (std::size_t j = 0; j < n; ++j) {
              const T dh = G[r * n + j] * gv[j];
              mean_dh += dh;
              mean_dh_h += dh * xhat[r * n + j];
            }
            mean_dh *= inv_n;
            mean_dh_h *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
              const T dh = G[r * n + j] * gv[j];
              (*gx)[r * n + j] += rstd[r] * (dh - mean_dh - xhat[r * n + j] * mean_dh_h);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Spatial operations (HWC)

// Stride-1 cross-correlation (kernel not flipped). 1x1 kernels use no
// padding, 3x3 kernels use one pixel of zero padding ("same").
template <Real T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, int stride = 1) {
  if (kernel.rank() != 4 || kernel.dim(0) != kernel.dim(1) || (kernel.dim(0) != 1 && kernel.dim(0) != 3)) {
    throw ConfigError("conv2d: unsupported kernel shape " + shape_str(kernel.shape()) +
                      " (only 1x1 and 3x3 are supported)");
  }
  if (stride != 1) throw ConfigError("conv2d: only stride 1 is supported");
  detail::require(x.rank() == 3 && x.dim(2) == kernel.dim(2),
                  "conv2d: input " + shape_str(x.shape()) + " does not match kernel " + shape_str(kernel.shape()));
  const std::size_t h = x.dim(0), w = x.dim(1), cin = x.dim(2), cout = kernel.dim(3);
  const std::size_t ks = kernel.dim(0);
  const std::ptrdiff_t pad = ks == 3 ? 1 : 0;
  const T* X = x.data().data();
  const T* K = kernel.data().data();
  std::vector<T> out(h * w * cout, T(0));
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t xx = 0; xx < w; ++xx) {
      T* op = out.data() + (y * w + xx) * cout;
      for (std::size_t dy = 0; dy < ks; ++dy) {
        const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + dy) - pad;
        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t dx = 0; dx < ks; ++dx) {
          const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + dx) - pad;
          if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
          const T* ip = X + (static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * cin;
          const T* kp = K + (dy * ks + dx) * cin * cout;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const T a = ip[ci];
            const T* krow = kp + ci * cout;
            for (std::size_t co = 0; co < cout; ++co) op[co] += a * krow[co];
          }
        }
      }
    }
  return make_result<T>(
      "conv2d", Shape{h, w, cout}, std::move(out), {&x, &kernel},
      [h, w, cin, cout, ks, pad](rsb::detail::Node<T>& self) {
        const T* X = self.parents[0]->data.data();
        const T* K = self.parents[1]->data.data();
        const T* G = self.grad.data();
        auto* gx = parent_grad(self, 0);
        auto* gk = parent_grad(self, 1);
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t xx = 0; xx < w; ++xx) {
            const T* gp = G + (y * w + xx) * cout;
            for (std::size_t dy = 0; dy < ks; ++dy) {
              const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + dy) - pad;
              if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t dx = 0; dx < ks; ++dx) {
                const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xx + dx) - pad;
                if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
                const std::size_t in_off = (static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * cin;
                const std::size_t k_off = (dy * ks + dx) * cin * cout;
                for (std::size_t ci = 0; ci < cin; ++ci) {
                  const T* krow = K + k_off + ci * cout;
                  if (gx) {
                    T acc = T(0);
                    for (std::size_t co = 0; co < cout; ++co) acc += gp[co] * krow[co];
                    (*gx)[in_off + ci] += acc;
                  }
                  if (gk) {
                    const T a = X[in_off + ci];
                    T* gkrow = gk->data() + k_off + ci * cout;
                    for (std::size_t co = 0; co < cout; ++co) gkrow[co] += a * gp[co];
                  }
                }
              }
            }
          }
      });
}

// 2x2 kernel, stride 2: every input pixel writes its own 2x2 output block,
// out[2i+a, 2j+b, co] = sum_ci x[i, j, ci] * k[a, b, ci, co].
template <Real T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const Tensor<T>& kernel, int stride = 2) {
  if (stride != 2 || kernel.rank() != 4 || kernel.dim(0) != 2 || kernel.dim(1) != 2) {
    throw ConfigError("transposed_conv2d: only 2x2 kernels with stride 2 are supported, got " +
                      shape_str(kernel.shape()));
  }
  detail::require(x.rank() == 3 && x.dim(2) == kernel.dim(2),
                  "transposed_conv2d: input " + shape_str(x.shape()) + " does not match kernel " +
                      shape_str(kernel.shape()));
  const std::size_t h = x.dim(0), w = x.dim(1), cin = x.dim(2), cout = kernel.dim(3);
  const std::size_t ow = 2 * w;
  const T* X = x.data().data();
  const T* K = kernel.data().data();
  std::vector<T> out(4 * h * w * cout, T(0));
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const T* ip = X + (i * w + j) * cin;
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t b = 0; b < 2; ++b) {
          T* op = out.data() + ((2 * i + a) * ow + 2 * j + b) * cout;
          const T* kp = K + (a * 2 + b) * cin * cout;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const T v = ip[ci];
            const T* krow = kp + ci * cout;
            for (std::size_t co = 0; co < cout; ++co) op[co] += v * krow[co];
          }
        }
    }
  return make_result<T>(
      "transposed_conv2d", Shape{2 * h, ow, cout}, std::move(out), {&x, &kernel},
      [h, w, cin, cout, ow](rsb::detail::Node<T>& self) {
        const T* X = self.parents[0]->data.data();
        const T* K = self.parents[1]->data.data();
        const T* G = self.grad.data();
        auto* gx = parent_grad(self, 0);
        auto* gk = parent_grad(self, 1);
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j)
            for (std::size_t a = 0; a < 2; ++a)
              for (std::size_t b = 0; b < 2; ++b) {
                const T* gp = G + ((2 * i + a) * ow + 2 * j + b) * cout;
                const std::size_t k_off = (a * 2 + b) * cin * cout;
                for (std::size_t ci = 0; ci < cin; ++ci) {
                  if (gx) {
                    const T* krow = K + k_off + ci * cout;
                    T acc = T(0);
                    for (std::size_t co = 0; co < cout; ++co) acc += gp[co] * krow[co];
                    (*gx)[(i * w + j) * cin + ci] += acc;
                  }
                  if (gk) {
                    const T v = X[(i * w + j) * cin + ci];
                    T* gkrow = gk->data() + k_off + ci * cout;
                    for (std::size_t co = 0; co < cout; ++co) gkrow[co] += v * gp[co];
                  }
                }
              }
      });
}

// 2x2 window, stride 2. Ties go to the first maximal element in row-major
// window order, and so does the gradient.
template <Real T>
Tensor<T> max_pool2d(const Tensor<T>& x) {
  detail::require(x.rank() == 3 && x.dim(0) % 2 == 0 && x.dim(1) % 2 == 0,
                  "max_pool2d: spatial dims of " + shape_str(x.shape()) + " must be divisible by 2");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const std::size_t oh = h / 2, ow = w / 2;
  const auto xs = x.data();
  std::vector<T> out(oh * ow * c);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j)
      for (std::size_t ch = 0; ch < c; ++ch) {
        std::size_t best = ((2 * i) * w + 2 * j) * c + ch;
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t b = 0; b < 2; ++b) {
            const std::size_t idx = ((2 * i + a) * w + 2 * j + b) * c + ch;
            if (xs[idx] > xs[best]) best = idx;
          }
        const std::size_t o = (i * ow + j) * c + ch;
        out[o] = xs[best];
        argmax[o] = best;
      }
  return make_result<T>("max_pool2d", Shape{oh, ow, c}, std::move(out), {&x},
                        [argmax = std::move(argmax)](rsb::detail::Node<T>& self) {
                          if (auto* g = parent_grad(self, 0)) {
                            for (std::size_t o = 0; o < argmax.size(); ++o) (*g)[argmax[o]] += self.grad[o];
                          }
                        });
}

namespace detail {
// Half-pixel-center sampling (align_corners = false): output index o reads
// source coordinate (o + 0.5) * in / out - 0.5, clamped at the borders.
struct AxisSampling {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

inline AxisSampling axis_sampling(std::size_t in, std::size_t out) {
  AxisSampling s;
  s.lo.resize(out);
  s.hi.resize(out);
  s.frac.resize(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    s.lo[o] = i0;
    s.hi[o] = std::min(i0 + 1, in - 1);
    s.frac[o] = src - static_cast<double>(i0);
  }
  return s;
}
}  // namespace detail

template <Real T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require(x.rank() == 3 && out_h >= 1 && out_w >= 1,
                  "bilinear_resize: expected HWC input and positive output size, got " + shape_str(x.shape()));
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (h == out_h && w == out_w) {
    return make_result<T>("bilinear_resize", x.shape(), std::vector<T>(x.data().begin(), x.data().end()), {&x},
                          [](rsb::detail::Node<T>& self) {
                            if (auto* g = parent_grad(self, 0))
                              for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
                          });
  }
  auto ys = detail::axis_sampling(h, out_h);
  auto xsamp = detail::axis_sampling(w, out_w);
  const T* X = x.data().data();
  std::vector<T> out(out_h * out_w * c);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const T fy = static_cast<T>(ys.frac[oy]);
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const T fx = static_cast<T>(xsamp.frac[ox]);
      const T w00 = (T(1) - fy) * (T(1) - fx), w01 = (T(1) - fy) * fx;
      const T w10 = fy * (T(1) - fx), w11 = fy * fx;
      const T* p00 = X + (ys.lo[oy] * w + xsamp.lo[ox]) * c;
      const T* p01 = X + (ys.lo[oy] * w + xsamp.hi[ox]) * c;
      const T* p10 = X + (ys.hi[oy] * w + xsamp.lo[ox]) * c;
      const T* p11 = X + (ys.hi[oy] * w + xsamp.hi[ox]) * c;
      T* op = out.data() + (oy * out_w + ox) * c;
      for (std::size_t ch = 0; ch < c; ++ch)
        op[ch] = w00 * p00[ch] + w01 * p01[ch] + w10 * p10[ch] + w11 * p11[ch];
    }
  }
  return make_result<T>(
      "bilinear_resize", Shape{out_h, out_w, c}, std::move(out), {&x},
      [ys = std::move(ys), xsamp = std::move(xsamp), w, c, out_h, out_w](rsb::detail::Node<T>& self) {
        auto* g = parent_grad(self, 0);
        if (!g) return;
        T* GX = g->data();
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const T fy = static_cast<T>(ys.frac[oy]);
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const T fx = static_cast<T>(xsamp.frac[ox]);
            const T w00 = (T(1) - fy) * (T(1) - fx), w01 = (T(1) - fy) * fx;
            const T w10 = fy * (T(1) - fx), w11 = fy * fx;
            const T* gp = self.grad.data() + (oy * out_w + ox) * c;
            T* p00 = GX + (ys.lo[oy] * w + xsamp.lo[ox]) * c;
            T* p01 = GX + (ys.lo[oy] * w + xsamp.hi[ox]) * c;
            T* p10 = GX + (ys.hi[oy] * w + xsamp.lo[ox]) * c;
            T* p11 = GX + (ys.hi[oy] * w + xsamp.hi[ox]) * c;
            for (std::size_t ch = 0; ch < c; ++ch) {
              p00[ch] += w00 * gp[ch];
              p01[ch] += w01 * gp[ch];
              p10[ch] += w10 * gp[ch];
              p11[ch] += w11 * gp[ch];
            }
          }
        }
      });
}

// [H, W, C] -> [(H/p)*(W/p), p*p*C]; patches in row-major grid order, each
// flattened as (row, col, channel).
template <Real T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t patch) {
  detail::require(image.rank() == 3 && patch > 0 && image.dim(0) % patch == 0 && image.dim(1) % patch == 0,
                  "patchify: image " + shape_str(image.shape()) + " is not divisible into " +
                      std::to_string(patch) + "x" + std::to_string(patch) + " patches");
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  const std::size_t gh = h / patch, gw = w / patch, row = patch * c;
  const std::size_t plen = patch * row;
  const auto xs = image.data();
  std::vector<T> out(xs.size());
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx)
      for (std::size_t py = 0; py < patch; ++py)
        std::copy_n(xs.begin() + ((gy * patch + py) * w + gx * patch) * c, row,
                    out.begin() + (gy * gw + gx) * plen + py * row);
  return make_result<T>("patchify", Shape{gh * gw, plen}, std::move(out), {&image},
                        [gh, gw, patch, row, plen, w, c](rsb::detail::Node<T>& self) {
                          auto* g = parent_grad(self, 0);
                          if (!g) return;
                          for (std::size_t gy = 0; gy < gh; ++gy)
                            for (std::size_t gx = 0; gx < gw; ++gx)
                              for (std::size_t py = 0; py < patch; ++py)
                                for (std::size_t i = 0; i < row; ++i)
                                  (*g)[((gy * patch + py) * w + gx * patch) * c + i] +=
                                      self.grad[(gy * gw + gx) * plen + py * row + i];
                        });
}

}  // namespace rsb::ops
