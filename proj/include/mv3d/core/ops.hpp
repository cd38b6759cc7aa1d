#pragma once

// Differentiable operations over Tape variables. Matrix ops take rank-2 operands; elementwise
// ops accept any shape; softmax and layer_norm act on the last axis.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "mv3d/core/tape.hpp"

namespace mv3d {

namespace kernel {

// C[m x n] += A[m x k] * B[k x n]
template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
template <class T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C[m x n] += A[k x m]^T * B[k x n]
template <class T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T(0)) continue;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace kernel

namespace detail {

template <class T>
void require_rank2(const BasicTensor<T>& t, const char* op) {
  MV3D_REQUIRE(t.rank() == 2, std::string(op) + " expects a rank-2 operand, got " + shape_str(t.shape()));
}

template <class T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  MV3D_REQUIRE(a.shape() == b.shape(), std::string(op) + " shape mismatch " + shape_str(a.shape()) +
                                           " vs " + shape_str(b.shape()));
}

template <class T>
void add_into(BasicTensor<T>& dst, const BasicTensor<T>& src, T scale = T(1)) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

inline std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

}  // namespace detail

/// [m x k] . [k x n]
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require_rank2(av, "matmul");
  detail::require_rank2(bv, "matmul");
  MV3D_REQUIRE(av.cols() == bv.rows(),
               "matmul inner dims differ: " + shape_str(av.shape()) + " . " + shape_str(bv.shape()));
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  BasicTensor<T> out({m, n});
  kernel::gemm_nn(m, n, k, av.data().data(), bv.data().data(), out.data().data());
  return a.tape->record(
      std::move(out), {a, b},
      [a, b, m, n, k](Tape<T>& tp, const BasicTensor<T>& g) {
        if (tp.tracked(a))
          kernel::gemm_nt(m, k, n, g.data().data(), tp.value(b).data().data(),
                          tp.grad_buffer(a).data().data());
        if (tp.tracked(b))
          kernel::gemm_tn(k, n, m, tp.value(a).data().data(), g.data().data(),
                          tp.grad_buffer(b).data().data());
      },
      "matmul");
}

/// [m x k] . [n x k]^T, the layout of a linear layer with weight [out x in].
template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require_rank2(av, "matmul_nt");
  detail::require_rank2(bv, "matmul_nt");
  MV3D_REQUIRE(av.cols() == bv.cols(), "matmul_nt inner dims differ: " + shape_str(av.shape()) +
                                           " . " + shape_str(bv.shape()) + "^T");
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  BasicTensor<T> out({m, n});
  kernel::gemm_nt(m, n, k, av.data().data(), bv.data().data(), out.data().data());
  return a.tape->record(
      std::move(out), {a, b},
      [a, b, m, n, k](Tape<T>& tp, const BasicTensor<T>& g) {
        if (tp.tracked(a))
          kernel::gemm_nn(m, k, n, g.data().data(), tp.value(b).data().data(),
                          tp.grad_buffer(a).data().data());
        if (tp.tracked(b))
          kernel::gemm_tn(n, k, m, g.data().data(), tp.value(a).data().data(),
                          tp.grad_buffer(b).data().data());
      },
      "matmul_nt");
}

template <class T>
Var<T> transpose(Var<T> a) {
  const auto& av = a.value();
  detail::require_rank2(av, "transpose");
  const std::size_t m = av.rows(), n = av.cols();
  BasicTensor<T> out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return a.tape->record(
      std::move(out), {a},
      [a, m, n](Tape<T>& tp, const BasicTensor<T>& g) {
        auto& ga = tp.grad_buffer(a);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
      },
      "transpose");
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require_same_shape(av, bv, "add");
  BasicTensor<T> out = av;
  detail::add_into(out, bv);
  return a.tape->record(
      std::move(out), {a, b},
      [a, b](Tape<T>& tp, const BasicTensor<T>& g) {
        if (tp.tracked(a)) detail::add_into(tp.grad_buffer(a), g);
        if (tp.tracked(b)) detail::add_into(tp.grad_buffer(b), g);
      },
      "add");
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require_same_shape(av, bv, "sub");
  BasicTensor<T> out = av;
  detail::add_into(out, bv, T(-1));
  return a.tape->record(
      std::move(out), {a, b},
      [a, b](Tape<T>& tp, const BasicTensor<T>& g) {
        if (tp.tracked(a)) detail::add_into(tp.grad_buffer(a), g);
        if (tp.tracked(b)) detail::add_into(tp.grad_buffer(b), g, T(-1));
      },
      "sub");
}

/// Elementwise product.
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require_same_shape(av, bv, "mul");
  BasicTensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape->record(
      std::move(out), {a, b},
      [a, b](Tape<T>& tp, const BasicTensor<T>& g) {
        const auto& av = tp.value(a);
        const auto& bv = tp.value(b);
        if (tp.tracked(a)) {
          auto& ga = tp.grad_buffer(a);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (tp.tracked(b)) {
          auto& gb = tp.grad_buffer(b);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
      },
      "mul");
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.vec()) v *= s;
  return a.tape->record(
      std::move(out), {a},
      [a, s](Tape<T>& tp, const BasicTensor<T>& g) { detail::add_into(tp.grad_buffer(a), g, s); },
      "scale");
}

/// Adds a length-n vector to every row of an [m x n] matrix.
template <class T>
Var<T> add_rowvec(Var<T> a, Var<T> bias) {
  const auto& av = a.value();
  const auto& bv = bias.value();
  detail::require_rank2(av, "add_rowvec");
  MV3D_REQUIRE(bv.size() == av.cols(), "add_rowvec bias length " + std::to_string(bv.size()) +
                                           " vs cols " + std::to_string(av.cols()));
  const std::size_t m = av.rows(), n = av.cols();
  BasicTensor<T> out = av;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  return a.tape->record(
      std::move(out), {a, bias},
      [a, bias, m, n](Tape<T>& tp, const BasicTensor<T>& g) {
        if (tp.tracked(a)) detail::add_into(tp.grad_buffer(a), g);
        if (tp.tracked(bias)) {
          auto& gb = tp.grad_buffer(bias);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        }
      },
      "add_rowvec");
}

/// Numerically stable softmax over the last axis.
template <class T>
Var<T> softmax(Var<T> a) {
  const auto& av = a.value();
  const std::size_t n = detail::last_dim(av.shape());
  MV3D_REQUIRE(n > 0, "softmax over an empty axis");
  const std::size_t rows = av.size() / n;
  BasicTensor<T> out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data().data() + r * n;
    T* y = out.data().data() + r * n;
    T mx = *std::max_element(x, x + n);
    T sum = 0;
    for (std::size_t j = 0; j < n; ++j) sum += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= sum;
  }
  BasicTensor<T> saved = out;
  return a.tape->record(
      std::move(out), {a},
      [a, rows, n, y = std::move(saved)](Tape<T>& tp, const BasicTensor<T>& g) {
        auto& ga = tp.grad_buffer(a);
        for (std::size_t r = 0; r < rows; ++r) {
          T dot = 0;
          for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
          for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
        }
      },
      "softmax");
}

/// Layer normalization over the last axis with per-feature gain and bias.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  const auto& xv = x.value();
  const std::size_t n = detail::last_dim(xv.shape());
  MV3D_REQUIRE(gain.value().size() == n && bias.value().size() == n,
               "layer_norm gain/bias length must equal the last axis (" + std::to_string(n) + ")");
  const std::size_t rows = xv.size() / n;
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  BasicTensor<T> out(xv.shape());
  BasicTensor<T> xhat(xv.shape());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data().data() + r * n;
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= T(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= T(n);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (xr[j] - mean) * inv_std[r];
      xhat[r * n + j] = h;
      out[r * n + j] = h * gv[j] + bv[j];
    }
  }
  return x.tape->record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          Tape<T>& tp, const BasicTensor<T>& g) {
        const auto& gv = tp.value(gain);
        if (tp.tracked(gain)) {
          auto& gg = tp.grad_buffer(gain);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) gg[j] += g[r * n + j] * xhat[r * n + j];
        }
        if (tp.tracked(bias)) {
          auto& gb = tp.grad_buffer(bias);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
        }
        if (tp.tracked(x)) {
          auto& gx = tp.grad_buffer(x);
          for (std::size_t r = 0; r < rows; ++r) {
            T mean_gh = 0, mean_ghx = 0;
            for (std::size_t j = 0; j < n; ++j) {
              const T gh = g[r * n + j] * gv[j];
              mean_gh += gh;
              mean_ghx += gh * xhat[r * n + j];
            }
            mean_gh /= T(n);
            mean_ghx /= T(n);
            for (std::size_t j = 0; j < n; ++j) {
              const T gh = g[r * n + j] * gv[j];
              gx[r * n + j] += inv_std[r] * (gh - mean_gh - xhat[r * n + j] * mean_ghx);
            }
          }
        }
      },
      "layer_norm");
}

/// GELU, tanh approximation.
template <class T>
Var<T> gelu(Var<T> a) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = T(0.044715);
  const auto& av = a.value();
  BasicTensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) {
    const T x = av[i];
    out[i] = T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x)));
  }
  return a.tape->record(
      std::move(out), {a},
      [a](Tape<T>& tp, const BasicTensor<T>& g) {
        const auto& av = tp.value(a);
        auto& ga = tp.grad_buffer(a);
        for (std::size_t i = 0; i < av.size(); ++i) {
          const T x = av[i];
          const T th = std::tanh(c * (x + k * x * x * x));
          const T d = T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * c * (T(1) + T(3) * k * x * x);
          ga[i] += g[i] * d;
        }
      },
      "gelu");
}

template <class T>
Var<T> silu(Var<T> a) {
  const auto& av = a.value();
  BasicTensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] / (T(1) + std::exp(-av[i]));
  return a.tape->record(
      std::move(out), {a},
      [a](Tape<T>& tp, const BasicTensor<T>& g) {
        const auto& av = tp.value(a);
        auto& ga = tp.grad_buffer(a);
        for (std::size_t i = 0; i < av.size(); ++i) {
          const T s = T(1) / (T(1) + std::exp(-av[i]));
          ga[i] += g[i] * s * (T(1) + av[i] * (T(1) - s));
        }
      },
      "silu");
}

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
  BasicTensor<T> out = a.value();
  MV3D_REQUIRE(shape_size(shape) == out.size(),
               "reshape " + shape_str(out.shape()) + " -> " + shape_str(shape) + " changes size");
  out.reshape_inplace(std::move(shape));
  return a.tape->record(
      std::move(out), {a},
      [a](Tape<T>& tp, const BasicTensor<T>& g) {
        auto& ga = tp.grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      },
      "reshape");
}

namespace detail {
// Splits a shape around `axis` into (outer, extent, inner) strides.
inline void axis_split(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}
}  // namespace detail

/// Concatenate along `axis`; all other extents must agree.
template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  MV3D_REQUIRE(!parts.empty(), "concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  MV3D_REQUIRE(axis < s0.size(), "concat axis out of range");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    MV3D_REQUIRE(s.size() == s0.size(), "concat rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      MV3D_REQUIRE(i == axis || s[i] == s0[i],
                   "concat off-axis extent mismatch " + shape_str(s) + " vs " + shape_str(s0));
    out_shape[axis] += s[axis];
  }
  std::size_t outer, inner;
  detail::axis_split(out_shape, axis, outer, inner);
  const std::size_t out_row = out_shape[axis] * inner;
  BasicTensor<T> out(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const auto& pv = p.value();
    const std::size_t chunk = pv.shape()[axis] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.data().data() + o * chunk, chunk, out.data().data() + o * out_row + off);
    off += chunk;
  }
  return parts[0].tape->record(
      std::move(out), parts,
      [parts, offsets, outer, inner, out_row, axis](Tape<T>& tp, const BasicTensor<T>& g) {
        for (std::size_t k = 0; k < parts.size(); ++k) {
          if (!tp.tracked(parts[k])) continue;
          auto& gp = tp.grad_buffer(parts[k]);
          const std::size_t chunk = gp.shape()[axis] * inner;
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t j = 0; j < chunk; ++j) gp[o * chunk + j] += g[o * out_row + offsets[k] + j];
        }
      },
      "concat");
}

/// Half-open range [begin, end) along `axis`.
template <class T>
Var<T> slice(Var<T> a, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto& av = a.value();
  MV3D_REQUIRE(axis < av.rank(), "slice axis out of range");
  MV3D_REQUIRE(begin <= end && end <= av.shape()[axis],
               "slice range [" + std::to_string(begin) + "," + std::to_string(end) + ") out of " +
                   shape_str(av.shape()));
  std::size_t outer, inner;
  detail::axis_split(av.shape(), axis, outer, inner);
  Shape out_shape = av.shape();
  out_shape[axis] = end - begin;
  const std::size_t in_row = av.shape()[axis] * inner;
  const std::size_t chunk = (end - begin) * inner;
  BasicTensor<T> out(out_shape);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(av.data().data() + o * in_row + begin * inner, chunk, out.data().data() + o * chunk);
  return a.tape->record(
      std::move(out), {a},
      [a, outer, in_row, chunk, off = begin * inner](Tape<T>& tp, const BasicTensor<T>& g) {
        auto& ga = tp.grad_buffer(a);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < chunk; ++j) ga[o * in_row + off + j] += g[o * chunk + j];
      },
      "slice");
}

/// Gathers rows of an [m x n] matrix; repeated indices accumulate in the gradient.
template <class T>
Var<T> take_rows(Var<T> a, std::vector<std::size_t> indices) {
  const auto& av = a.value();
  detail::require_rank2(av, "take_rows");
  const std::size_t n = av.cols();
  BasicTensor<T> out({indices.size(), n});
  for (std::size_t r = 0; r < indices.size(); ++r) {
    MV3D_REQUIRE(indices[r] < av.rows(), "take_rows index " + std::to_string(indices[r]) + " out of range");
    std::copy_n(av.data().data() + indices[r] * n, n, out.data().data() + r * n);
  }
  return a.tape->record(
      std::move(out), {a},
      [a, n, indices = std::move(indices)](Tape<T>& tp, const BasicTensor<T>& g) {
        auto& ga = tp.grad_buffer(a);
        for (std::size_t r = 0; r < indices.size(); ++r)
          for (std::size_t j = 0; j < n; ++j) ga[indices[r] * n + j] += g[r * n + j];
      },
      "take_rows");
}

/// Flat gather: out[i] = a[index[i]], reshaped to `shape`. Used for patch layout permutations.
template <class T>
Var<T> gather(Var<T> a, std::vector<std::size_t> index, Shape shape) {
  const auto& av = a.value();
  MV3D_REQUIRE(shape_size(shape) == index.size(), "gather index count does not match output shape");
  BasicTensor<T> out(std::move(shape));
  for (std::size_t i = 0; i < index.size(); ++i) {
    MV3D_REQUIRE(index[i] < av.size(), "gather index out of range");
    out[i] = av[index[i]];
  }
  return a.tape->record(
      std::move(out), {a},
      [a, index = std::move(index)](Tape<T>& tp, const BasicTensor<T>& g) {
        auto& ga = tp.grad_buffer(a);
        for (std::size_t i = 0; i < index.size(); ++i) ga[index[i]] += g[i];
      },
      "gather");
}

template <class T>
Var<T> sum(Var<T> a) {
  T s = 0;
  for (const T& v : a.value().data()) s += v;
  return a.tape->record(
      BasicTensor<T>::scalar(s), {a},
      [a](Tape<T>& tp, const BasicTensor<T>& g) {
        auto& ga = tp.grad_buffer(a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
      },
      "sum");
}

template <class T>
Var<T> mean(Var<T> a) {
  const std::size_t n = a.value().size();
  MV3D_REQUIRE(n > 0, "mean of empty tensor");
  return scale(sum(a), T(1) / T(n));
}

/// Mean of squared differences, the velocity-regression objective.
template <class T>
Var<T> mse(Var<T> pred, Var<T> target) {
  const auto& pv = pred.value();
  const auto& tv = target.value();
  detail::require_same_shape(pv, tv, "mse");
  const std::size_t n = pv.size();
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += (pv[i] - tv[i]) * (pv[i] - tv[i]);
  return pred.tape->record(
      BasicTensor<T>::scalar(s / T(n)), {pred, target},
      [pred, target, n](Tape<T>& tp, const BasicTensor<T>& g) {
        const auto& pv = tp.value(pred);
        const auto& tv = tp.value(target);
        const T c = T(2) * g[0] / T(n);
        if (tp.tracked(pred)) {
          auto& gp = tp.grad_buffer(pred);
          for (std::size_t i = 0; i < n; ++i) gp[i] += c * (pv[i] - tv[i]);
        }
        if (tp.tracked(target)) {
          auto& gt = tp.grad_buffer(target);
          for (std::size_t i = 0; i < n; ++i) gt[i] -= c * (pv[i] - tv[i]);
        }
      },
      "mse");
}

/// Rotates consecutive feature pairs (2i, 2i+1) of each row of x [L x d] by per-row angles
/// given as cos/sin tables of shape [L x d/2]. This is the kernel behind rotary encoding.
template <class T>
Var<T> rotate_pairs(Var<T> x, const BasicTensor<T>& cos_tab, const BasicTensor<T>& sin_tab) {
  const auto& xv = x.value();
  detail::require_rank2(xv, "rotate_pairs");
  const std::size_t L = xv.rows(), d = xv.cols();
  MV3D_REQUIRE(d % 2 == 0, "rotate_pairs needs an even feature width");
  MV3D_REQUIRE(cos_tab.shape() == (Shape{L, d / 2}) && sin_tab.shape() == (Shape{L, d / 2}),
               "rotate_pairs table shape must be [L x d/2]");
  BasicTensor<T> out(xv.shape());
  for (std::size_t r = 0; r < L; ++r)
    for (std::size_t i = 0; i < d / 2; ++i) {
      const T c = cos_tab[r * (d / 2) + i], s = sin_tab[r * (d / 2) + i];
      const T x0 = xv[r * d + 2 * i], x1 = xv[r * d + 2 * i + 1];
      out[r * d + 2 * i] = x0 * c - x1 * s;
      out[r * d + 2 * i + 1] = x0 * s + x1 * c;
    }
  return x.tape->record(
      std::move(out), {x},
      [x, L, d, cos_tab, sin_tab](Tape<T>& tp, const BasicTensor<T>& g) {
        auto& gx = tp.grad_buffer(x);
        for (std::size_t r = 0; r < L; ++r)
          for (std::size_t i = 0; i < d / 2; ++i) {
            const T c = cos_tab[r * (d / 2) + i], s = sin_tab[r * (d / 2) + i];
            const T g0 = g[r * d + 2 * i], g1 = g[r * d + 2 * i + 1];
            gx[r * d + 2 * i] += g0 * c + g1 * s;
            gx[r * d + 2 * i + 1] += -g0 * s + g1 * c;
          }
      },
      "rotate_pairs");
}

}  // namespace mv3d
