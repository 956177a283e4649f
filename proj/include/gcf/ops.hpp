#pragma once

// Differentiable operations. Every op validates shapes, computes its output
// eagerly and registers a backward rule on the tape.

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "gcf/errors.hpp"
#include "gcf/tensor.hpp"

namespace gcf::ops {

namespace detail {

template <class T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <class T>
void require_rank(const char* op, const Tensor<T>& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape()));
  }
}

inline std::size_t pooled_extent(const char* op, std::size_t in, std::size_t window, std::size_t stride) {
  if (window == 0 || stride == 0) throw ShapeError(std::string(op) + ": window and stride must be positive");
  if (in < window) {
    throw ShapeError(std::string(op) + ": window " + std::to_string(window) + " larger than input extent " +
                     std::to_string(in));
  }
  return (in - window) / stride + 1;
}

}  // namespace detail

template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return tape.record("add", {a, b}, Tensor<T>(a.shape(), std::move(out)),
                     [](std::span<const T> g, std::span<std::span<T>> gi) {
                       for (auto& dst : gi) {
                         if (dst.empty()) continue;
                         for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                       }
                     });
}

template <class T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return tape.record("mul", {a, b}, Tensor<T>(a.shape(), std::move(out)),
                     [a, b](std::span<const T> g, std::span<std::span<T>> gi) {
                       if (!gi[0].empty())
                         for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * b[i];
                       if (!gi[1].empty())
                         for (std::size_t i = 0; i < g.size(); ++i) gi[1][i] += g[i] * a[i];
                     });
}

template <class T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T factor) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return tape.record("scale", {a}, Tensor<T>(a.shape(), std::move(out)),
                     [factor](std::span<const T> g, std::span<std::span<T>> gi) {
                       for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * factor;
                     });
}

template <class T>
Tensor<T> add_scalar(Tape<T>& tape, const Tensor<T>& a, T value) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + value;
  return tape.record("add_scalar", {a}, Tensor<T>(a.shape(), std::move(out)),
                     [](std::span<const T> g, std::span<std::span<T>> gi) {
                       for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                     });
}

template <class T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a) {
  T total = 0;
  for (auto v : a.data()) total += v;
  return tape.record("sum", {a}, Tensor<T>::scalar(total),
                     [](std::span<const T> g, std::span<std::span<T>> gi) {
                       for (auto& v : gi[0]) v += g[0];
                     });
}

template <class T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& a) {
  return scale(tape, sum(tape, a), T(1) / static_cast<T>(a.size()));
}

// c = a * b for a[m x k], b[k x n].
template <class T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> c(m * n, T(0));
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t t = 0; t < k; ++t) {
      const T av = A[i * k + t];
      if (av == T(0)) continue;
      const T* brow = &B[t * n];
      T* crow = &c[i * n];
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return tape.record("matmul", {a, b}, Tensor<T>({m, n}, std::move(c)),
                     [a, b, m, k, n](std::span<const T> g, std::span<std::span<T>> gi) {
                       auto A = a.data();
                       auto B = b.data();
                       if (!gi[0].empty()) {  // dA = dC * B^T
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t t = 0; t < k; ++t) {
                             T acc = 0;
                             for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * B[t * n + j];
                             gi[0][i * k + t] += acc;
                           }
                       }
                       if (!gi[1].empty()) {  // dB = A^T * dC
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t t = 0; t < k; ++t) {
                             const T av = A[i * k + t];
                             for (std::size_t j = 0; j < n; ++j) gi[1][t * n + j] += av * g[i * n + j];
                           }
                       }
                     });
}

template <class T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& a) {
  detail::require_rank("transpose", a, 2);
  const std::size_t r = a.dim(0), c = a.dim(1);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  return tape.record("transpose", {a}, Tensor<T>({c, r}, std::move(out)),
                     [r, c](std::span<const T> g, std::span<std::span<T>> gi) {
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j) gi[0][i * c + j] += g[j * r + i];
                     });
}

// Copies the data into a new shape with the same element count.
template <class T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return tape.record("reshape", {a}, Tensor<T>(std::move(shape), std::move(out)),
                     [](std::span<const T> g, std::span<std::span<T>> gi) {
                       for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                     });
}

template <class T>
Tensor<T> flatten(Tape<T>& tape, const Tensor<T>& a) {
  return reshape(tape, a, {a.size()});
}

namespace detail {
// Splits a shape around `axis` into (outer, extent, inner) block sizes.
inline void axis_blocks(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace detail

template <class T>
Tensor<T> concat(Tape<T>& tape, const std::vector<Tensor<T>>& parts, std::size_t axis = 0) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_str(ref));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw ShapeError("concat: rank mismatch " + shape_str(ref) + " vs " + shape_str(p.shape()));
    for (std::size_t d = 0; d < ref.size(); ++d) {
      if (d != axis && p.dim(d) != ref[d])
        throw ShapeError("concat: shape mismatch " + shape_str(ref) + " vs " + shape_str(p.shape()));
    }
    out_shape[axis] += p.dim(axis);
  }
  std::size_t outer, inner;
  detail::axis_blocks(ref, axis, outer, inner);
  const std::size_t out_row = out_shape[axis] * inner;
  std::vector<T> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t block = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.data().begin() + o * block, block, out.begin() + o * out_row + offset);
    offset += block;
  }
  std::vector<std::size_t> blocks;
  for (const auto& p : parts) blocks.push_back(p.dim(axis) * inner);
  return tape.record("concat", parts, Tensor<T>(out_shape, std::move(out)),
                     [outer, out_row, offsets, blocks](std::span<const T> g, std::span<std::span<T>> gi) {
                       for (std::size_t p = 0; p < gi.size(); ++p) {
                         if (gi[p].empty()) continue;
                         for (std::size_t o = 0; o < outer; ++o)
                           for (std::size_t j = 0; j < blocks[p]; ++j)
                             gi[p][o * blocks[p] + j] += g[o * out_row + offsets[p] + j];
                       }
                     });
}

// Elements [begin, end) along `axis`.
template <class T>
Tensor<T> slice(Tape<T>& tape, const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= a.rank() || begin >= end || end > a.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " invalid for " + shape_str(a.shape()));
  }
  std::size_t outer, inner;
  detail::axis_blocks(a.shape(), axis, outer, inner);
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  const std::size_t in_row = a.dim(axis) * inner;
  const std::size_t block = (end - begin) * inner;
  const std::size_t start = begin * inner;
  std::vector<T> out(outer * block);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(a.data().begin() + o * in_row + start, block, out.begin() + o * block);
  return tape.record("slice", {a}, Tensor<T>(out_shape, std::move(out)),
                     [outer, in_row, block, start](std::span<const T> g, std::span<std::span<T>> gi) {
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t j = 0; j < block; ++j) gi[0][o * in_row + start + j] += g[o * block + j];
                     });
}

// Gradient at exactly zero is zero.
template <class T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
  std::vector<T> out(x.size());
  T margin = std::numeric_limits<T>::infinity();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = x[i] > T(0) ? x[i] : T(0);
    margin = std::min(margin, std::abs(x[i]));
  }
  if (tape.enabled()) tape.observe_kink(margin);
  return tape.record("relu", {x}, Tensor<T>(x.shape(), std::move(out)),
                     [x](std::span<const T> g, std::span<std::span<T>> gi) {
                       for (std::size_t i = 0; i < g.size(); ++i)
                         if (x[i] > T(0)) gi[0][i] += g[i];
                     });
}

// Softmax over a vector, shifted by the maximum for overflow safety.
template <class T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x) {
  if (x.rank() != 1) throw ShapeError("softmax: expected a vector, got " + shape_str(x.shape()));
  const T peak = *std::max_element(x.data().begin(), x.data().end());
  std::vector<T> y(x.size());
  T denom = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = std::exp(x[i] - peak);
    denom += y[i];
  }
  for (auto& v : y) v /= denom;
  Tensor<T> out(x.shape(), std::move(y));
  return tape.record("softmax", {x}, out, [out](std::span<const T> g, std::span<std::span<T>> gi) {
    T dot = 0;
    for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * out[i];
    for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += out[i] * (g[i] - dot);
  });
}

// Cross-correlation of input[C_in x H x W] with kernels[C_out x C_in x k x k].
// `bias`, when defined, holds one value per output channel.
template <class T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding) {
  detail::require_rank("conv2d", input, 3);
  detail::require_rank("conv2d", kernels, 4);
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const std::size_t cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  const std::size_t cout = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  if (kernels.dim(1) != cin) {
    throw ShapeError("conv2d: kernels " + shape_str(kernels.shape()) + " do not match input " +
                     shape_str(input.shape()));
  }
  if (h + 2 * padding < kh || w + 2 * padding < kw) {
    throw ShapeError("conv2d: kernel " + shape_str(kernels.shape()) + " larger than padded input " +
                     shape_str(input.shape()) + " with padding " + std::to_string(padding));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(cout) +
                     " output channels");
  }
  const std::size_t oh = (h + 2 * padding - kh) / stride + 1;
  const std::size_t ow = (w + 2 * padding - kw) / stride + 1;
  const auto pad = static_cast<std::ptrdiff_t>(padding);

  // Valid output range [lo, hi) along one axis for kernel tap `kpos`.
  auto valid = [pad, stride](std::size_t kpos, std::size_t extent, std::size_t out_extent, std::size_t& lo,
                             std::size_t& hi) {
    lo = out_extent;
    hi = 0;
    for (std::size_t o = 0; o < out_extent; ++o) {
      const auto src = static_cast<std::ptrdiff_t>(o * stride + kpos) - pad;
      if (src >= 0 && src < static_cast<std::ptrdiff_t>(extent)) {
        lo = std::min(lo, o);
        hi = o + 1;
      }
    }
  };
  std::vector<std::size_t> ylo(kh), yhi(kh), xlo(kw), xhi(kw);
  for (std::size_t k = 0; k < kh; ++k) valid(k, h, oh, ylo[k], yhi[k]);
  for (std::size_t k = 0; k < kw; ++k) valid(k, w, ow, xlo[k], xhi[k]);

  std::vector<T> out(cout * oh * ow, T(0));
  auto X = input.data();
  auto K = kernels.data();
  for (std::size_t o = 0; o < cout; ++o) {
    T* dst = &out[o * oh * ow];
    if (has_bias) std::fill(dst, dst + oh * ow, bias[o]);
    for (std::size_t c = 0; c < cin; ++c) {
      const T* src = &X[c * h * w];
      for (std::size_t ky = 0; ky < kh; ++ky)
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const T wv = K[((o * cin + c) * kh + ky) * kw + kx];
          for (std::size_t y = ylo[ky]; y < yhi[ky]; ++y) {
            const std::size_t sy = y * stride + ky - padding;
            const T* srow = src + sy * w;
            T* drow = dst + y * ow;
            for (std::size_t x = xlo[kx]; x < xhi[kx]; ++x) drow[x] += wv * srow[x * stride + kx - padding];
          }
        }
    }
  }

  std::vector<Tensor<T>> inputs{input, kernels};
  if (has_bias) inputs.push_back(bias);
  return tape.record(
      "conv2d", std::move(inputs), Tensor<T>({cout, oh, ow}, std::move(out)),
      [=](std::span<const T> g, std::span<std::span<T>> gi) {
        auto X = input.data();
        auto K = kernels.data();
        for (std::size_t o = 0; o < cout; ++o) {
          const T* go = &g[o * oh * ow];
          if (has_bias && !gi[2].empty()) {
            T acc = 0;
            for (std::size_t i = 0; i < oh * ow; ++i) acc += go[i];
            gi[2][o] += acc;
          }
          for (std::size_t c = 0; c < cin; ++c) {
            const T* src = &X[c * h * w];
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const std::size_t kidx = ((o * cin + c) * kh + ky) * kw + kx;
                const T wv = K[kidx];
                T acc = 0;
                for (std::size_t y = ylo[ky]; y < yhi[ky]; ++y) {
                  const std::size_t sy = y * stride + ky - padding;
                  const T* grow = go + y * ow;
                  const T* srow = src + sy * w;
                  if (!gi[0].empty()) {
                    T* dxrow = &gi[0][c * h * w + sy * w];
                    for (std::size_t x = xlo[kx]; x < xhi[kx]; ++x) {
                      const std::size_t sx = x * stride + kx - padding;
                      acc += grow[x] * srow[sx];
                      dxrow[sx] += wv * grow[x];
                    }
                  } else {
                    for (std::size_t x = xlo[kx]; x < xhi[kx]; ++x) acc += grow[x] * srow[x * stride + kx - padding];
                  }
                }
                if (!gi[1].empty()) gi[1][kidx] += acc;
              }
          }
        }
      });
}

template <class T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& kernels, std::size_t stride,
                 std::size_t padding) {
  return conv2d(tape, input, kernels, Tensor<T>{}, stride, padding);
}

// Max over window x window patches of a [C x H x W] tensor. Ties resolve to the
// first maximal element in row-major window order. Windows whose maximum is
// exactly zero (dead relu outputs) are not reported as kinks; the producing
// relu already reports them.
template <class T>
Tensor<T> maxpool2d(Tape<T>& tape, const Tensor<T>& x, std::size_t window, std::size_t stride) {
  detail::require_rank("maxpool2d", x, 3);
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t oh = detail::pooled_extent("maxpool2d", h, window, stride);
  const std::size_t ow = detail::pooled_extent("maxpool2d", w, window, stride);
  std::vector<T> out(c * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  T margin = std::numeric_limits<T>::infinity();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xo = 0; xo < ow; ++xo) {
        std::size_t best = ch * h * w + (y * stride) * w + xo * stride;
        T best_v = x[best];
        T runner = -std::numeric_limits<T>::infinity();
        for (std::size_t wy = 0; wy < window; ++wy)
          for (std::size_t wx = 0; wx < window; ++wx) {
            if (wy == 0 && wx == 0) continue;
            const std::size_t idx = ch * h * w + (y * stride + wy) * w + xo * stride + wx;
            if (x[idx] > best_v) {
              runner = best_v;
              best_v = x[idx];
              best = idx;
            } else {
              runner = std::max(runner, x[idx]);
            }
          }
        const std::size_t o = (ch * oh + y) * ow + xo;
        out[o] = best_v;
        argmax[o] = best;
        if (window > 1 && best_v != T(0)) margin = std::min(margin, best_v - runner);
      }
  if (tape.enabled()) tape.observe_kink(margin);
  return tape.record("maxpool2d", {x}, Tensor<T>({c, oh, ow}, std::move(out)),
                     [argmax = std::move(argmax)](std::span<const T> g, std::span<std::span<T>> gi) {
                       for (std::size_t i = 0; i < g.size(); ++i) gi[0][argmax[i]] += g[i];
                     });
}

// Mean over window_h x window_w patches of a [C x H x W] tensor.
template <class T>
Tensor<T> avgpool2d(Tape<T>& tape, const Tensor<T>& x, std::size_t window_h, std::size_t window_w,
                    std::size_t stride_h, std::size_t stride_w) {
  detail::require_rank("avgpool2d", x, 3);
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t oh = detail::pooled_extent("avgpool2d", h, window_h, stride_h);
  const std::size_t ow = detail::pooled_extent("avgpool2d", w, window_w, stride_w);
  const T inv = T(1) / static_cast<T>(window_h * window_w);
  std::vector<T> out(c * oh * ow, T(0));
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xo = 0; xo < ow; ++xo) {
        T acc = 0;
        for (std::size_t wy = 0; wy < window_h; ++wy)
          for (std::size_t wx = 0; wx < window_w; ++wx)
            acc += x[ch * h * w + (y * stride_h + wy) * w + xo * stride_w + wx];
        out[(ch * oh + y) * ow + xo] = acc * inv;
      }
  return tape.record("avgpool2d", {x}, Tensor<T>({c, oh, ow}, std::move(out)),
                     [=](std::span<const T> g, std::span<std::span<T>> gi) {
                       for (std::size_t ch = 0; ch < c; ++ch)
                         for (std::size_t y = 0; y < oh; ++y)
                           for (std::size_t xo = 0; xo < ow; ++xo) {
                             const T v = g[(ch * oh + y) * ow + xo] * inv;
                             for (std::size_t wy = 0; wy < window_h; ++wy)
                               for (std::size_t wx = 0; wx < window_w; ++wx)
                                 gi[0][ch * h * w + (y * stride_h + wy) * w + xo * stride_w + wx] += v;
                           }
                     });
}

template <class T>
Tensor<T> avgpool2d(Tape<T>& tape, const Tensor<T>& x, std::size_t window, std::size_t stride) {
  return avgpool2d(tape, x, window, window, stride, stride);
}

// y = W x + b for W[out x in], x[in], b[out].
template <class T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& weight, const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() != 1) throw ShapeError("linear: expected a vector input, got " + shape_str(x.shape()));
  auto col = reshape(tape, x, {x.size(), 1});
  auto y = matmul(tape, weight, col);
  return add(tape, reshape(tape, y, {weight.dim(0)}), bias);
}

}  // namespace gcf::ops
