#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "protestlens/tensor.hpp"

namespace protestlens {

inline constexpr double kLayerNormEps = 1e-5;

namespace detail {

// c[m*n] += a[m*k] * b[k*n]
template <typename T>
void mm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
           std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m*k] += a[m*n] * b[k*n]^T
template <typename T>
void mm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t n,
           std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * n;
    T* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T acc = T(0);
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// c[k*n] += a[m*k]^T * b[m*n]
template <typename T>
void mm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
           std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
bool record_many(const char* op, const std::vector<Tensor<T>>& inputs,
                 Tensor<T>& output, std::function<void()> backward) {
  GradientTape<T>* tape = GradientTape<T>::active();
  if (!tape) return false;
  bool tracked = false;
  for (const Tensor<T>& in : inputs) {
    if (in.requires_grad()) {
      tracked = true;
      break;
    }
  }
  if (!tracked) return false;
  output.set_requires_grad(true);
  TapeNode<T> node;
  node.op = op;
  node.inputs.reserve(inputs.size());
  for (const Tensor<T>& in : inputs) node.inputs.push_back(in.impl());
  node.output = output.impl();
  node.backward = std::move(backward);
  tape->record(std::move(node));
  return true;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add shape mismatch: " + shape_to_string(a.shape()) +
                     " vs " + shape_to_string(b.shape()));
  }
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  detail::record_if_tracked<T>("add", {a, b}, out, [ai, bi, oi] {
    const auto& g = *oi->grad;
    if (ai->requires_grad) detail::add_into<T>(*ai->grad, g);
    if (bi->requires_grad) detail::add_into<T>(*bi->grad, g);
  });
  return out;
}

/// x [... x C] + bias [C], broadcast over every leading axis.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (bias.rank() != 1 || x.rank() < 1 ||
      x.shape().back() != bias.dim(0)) {
    throw ShapeError("add_bias shape mismatch: " + shape_to_string(x.shape()) +
                     " vs " + shape_to_string(bias.shape()));
  }
  const std::size_t c = bias.dim(0);
  const std::size_t rows = x.numel() / c;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xv = x.data(), bv = bias.data();
  auto ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < c; ++j) ov[r * c + j] = xv[r * c + j] + bv[j];
  }
  auto xi = x.impl(), bi = bias.impl(), oi = out.impl();
  detail::record_if_tracked<T>("add_bias", {x, bias}, out, [xi, bi, oi, rows, c] {
    const auto& g = *oi->grad;
    if (xi->requires_grad) detail::add_into<T>(*xi->grad, g);
    if (bi->requires_grad) {
      auto& bg = *bi->grad;
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < c; ++j) bg[j] += g[r * c + j];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul shape mismatch: " + shape_to_string(a.shape()) +
                     " vs " + shape_to_string(b.shape()));
  }
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  detail::record_if_tracked<T>("mul", {a, b}, out, [ai, bi, oi] {
    const auto& g = *oi->grad;
    if (ai->requires_grad) {
      auto& ag = *ai->grad;
      for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * bi->values[i];
    }
    if (bi->requires_grad) {
      auto& bg = *bi->grad;
      for (std::size_t i = 0; i < g.size(); ++i) bg[i] += g[i] * ai->values[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * factor;
  auto xi = x.impl(), oi = out.impl();
  detail::record_if_tracked<T>("scale", {x}, out, [xi, oi, factor] {
    const auto& g = *oi->grad;
    auto& xg = *xi->grad;
    for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i] * factor;
  });
  return out;
}

/// Matrix product. Supported rank pairs: (2,2); (3,3) with equal batch
/// dims; (3,2) broadcasting the right factor over the batch.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  auto mismatch = [&]() -> ShapeError {
    return ShapeError("matmul shape mismatch: " + shape_to_string(as) +
                      " vs " + shape_to_string(bs));
  };

  std::size_t batch = 1, m = 0, k = 0, n = 0;
  bool batched_b = false;
  if (as.size() == 2 && bs.size() == 2) {
    m = as[0]; k = as[1]; n = bs[1];
    if (bs[0] != k) throw mismatch();
  } else if (as.size() == 3 && bs.size() == 3) {
    if (as[0] != bs[0] || bs[1] != as[2]) throw mismatch();
    batch = as[0]; m = as[1]; k = as[2]; n = bs[2];
    batched_b = true;
  } else if (as.size() == 3 && bs.size() == 2) {
    if (bs[0] != as[2]) throw mismatch();
    batch = as[0]; m = as[1]; k = as[2]; n = bs[1];
  } else {
    throw mismatch();
  }

  Shape out_shape = (as.size() == 2) ? Shape{m, n} : Shape{batch, m, n};
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  T* op = out.data().data();
  for (std::size_t t = 0; t < batch; ++t) {
    detail::mm_nn(ap + t * m * k, bp + (batched_b ? t * k * n : 0),
                  op + t * m * n, m, k, n);
  }

  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  detail::record_if_tracked<T>(
      "matmul", {a, b}, out, [ai, bi, oi, batch, m, k, n, batched_b] {
        const T* g = oi->grad->data();
        const T* av = ai->values.data();
        const T* bv = bi->values.data();
        for (std::size_t t = 0; t < batch; ++t) {
          const T* gt = g + t * m * n;
          const T* at = av + t * m * k;
          const T* bt = bv + (batched_b ? t * k * n : 0);
          if (ai->requires_grad) {
            detail::mm_nt(gt, bt, ai->grad->data() + t * m * k, m, n, k);
          }
          if (bi->requires_grad) {
            detail::mm_tn(at, gt, bi->grad->data() + (batched_b ? t * k * n : 0),
                          m, k, n);
          }
        }
      });
  return out;
}

/// Numerically stable softmax along `axis` (max subtraction per fiber).
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError("softmax axis " + std::to_string(axis) +
                     " out of range for shape " + shape_to_string(x.shape()));
  }
  const std::size_t len = x.dim(axis);
  if (len == 0) {
    throw ShapeError("softmax over empty axis " + std::to_string(axis) +
                     " of shape " + shape_to_string(x.shape()));
  }
  std::size_t inner = 1, outer = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);

  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = xv[base];
      for (std::size_t i = 1; i < len; ++i)
        mx = std::max(mx, xv[base + i * inner]);
      T sum = T(0);
      for (std::size_t i = 0; i < len; ++i) {
        const T e = std::exp(xv[base + i * inner] - mx);
        ov[base + i * inner] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (std::size_t i = 0; i < len; ++i) ov[base + i * inner] *= inv;
    }
  }

  auto xi = x.impl(), oi = out.impl();
  detail::record_if_tracked<T>(
      "softmax", {x}, out, [xi, oi, outer, inner, len] {
        const auto& g = *oi->grad;
        const auto& y = oi->values;
        auto& xg = *xi->grad;
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            T dot = T(0);
            for (std::size_t i = 0; i < len; ++i) {
              const std::size_t at = base + i * inner;
              dot += g[at] * y[at];
            }
            for (std::size_t i = 0; i < len; ++i) {
              const std::size_t at = base + i * inner;
              xg[at] += y[at] * (g[at] - dot);
            }
          }
        }
      });
  return out;
}

/// LayerNorm over the last axis with population variance (divide by N).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps) {
  if (eps <= T(0)) {
    throw ValueError("layer_norm eps must be > 0, got " + std::to_string(eps));
  }
  if (x.rank() < 1 || gamma.rank() != 1 || beta.rank() != 1 ||
      gamma.dim(0) != x.shape().back() || beta.dim(0) != x.shape().back()) {
    throw ShapeError("layer_norm shape mismatch: x " +
                     shape_to_string(x.shape()) + ", gamma " +
                     shape_to_string(gamma.shape()) + ", beta " +
                     shape_to_string(beta.shape()));
  }
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.numel() / c;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  auto xv = x.data(), gv = gamma.data(), bv = beta.data();
  auto ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * c;
    T mean = T(0);
    for (std::size_t j = 0; j < c; ++j) mean += row[j];
    mean /= T(c);
    T var = T(0);
    for (std::size_t j = 0; j < c; ++j) {
      const T d = row[j] - mean;
      var += d * d;
    }
    var /= T(c);
    const T istd = T(1) / std::sqrt(var + eps);
    inv_std[r] = istd;
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (row[j] - mean) * istd;
      xhat[r * c + j] = h;
      ov[r * c + j] = gv[j] * h + bv[j];
    }
  }

  auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl();
  detail::record_if_tracked<T>(
      "layer_norm", {x, gamma, beta}, out,
      [xi, gi, bi, oi, rows, c, xhat = std::move(xhat),
       inv_std = std::move(inv_std)] {
        const auto& g = *oi->grad;
        const auto& gv = gi->values;
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t base = r * c;
          if (gi->requires_grad) {
            auto& gg = *gi->grad;
            for (std::size_t j = 0; j < c; ++j)
              gg[j] += g[base + j] * xhat[base + j];
          }
          if (bi->requires_grad) {
            auto& bg = *bi->grad;
            for (std::size_t j = 0; j < c; ++j) bg[j] += g[base + j];
          }
          if (xi->requires_grad) {
            T mean_dh = T(0), mean_dh_h = T(0);
            for (std::size_t j = 0; j < c; ++j) {
              const T dh = g[base + j] * gv[j];
              mean_dh += dh;
              mean_dh_h += dh * xhat[base + j];
            }
            mean_dh /= T(c);
            mean_dh_h /= T(c);
            auto& xg = *xi->grad;
            for (std::size_t j = 0; j < c; ++j) {
              const T dh = g[base + j] * gv[j];
              xg[base + j] +=
                  inv_std[r] * (dh - mean_dh - xhat[base + j] * mean_dh_h);
            }
          }
        }
      });
  return out;
}

/// Exact-erf GELU: x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    const double v = static_cast<double>(xv[i]);
    ov[i] = static_cast<T>(v * 0.5 * (1.0 + std::erf(v * kInvSqrt2)));
  }
  auto xi = x.impl(), oi = out.impl();
  detail::record_if_tracked<T>("gelu", {x}, out, [xi, oi] {
    const auto& g = *oi->grad;
    auto& xg = *xi->grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = static_cast<double>(xi->values[i]);
      const double phi = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      xg[i] += g[i] * static_cast<T>(phi + v * pdf);
    }
  });
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
  auto xi = x.impl(), oi = out.impl();
  detail::record_if_tracked<T>("relu", {x}, out, [xi, oi] {
    const auto& g = *oi->grad;
    auto& xg = *xi->grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xi->values[i] > T(0)) xg[i] += g[i];
    }
  });
  return out;
}

template <typename T>
T sigmoid_value(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = sigmoid_value(xv[i]);
  auto xi = x.impl(), oi = out.impl();
  detail::record_if_tracked<T>("sigmoid", {x}, out, [xi, oi] {
    const auto& g = *oi->grad;
    const auto& y = oi->values;
    auto& xg = *xi->grad;
    for (std::size_t i = 0; i < g.size(); ++i)
      xg[i] += g[i] * y[i] * (T(1) - y[i]);
  });
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  auto xi = x.impl(), oi = out.impl();
  detail::record_if_tracked<T>("sum_all", {x}, out, [xi, oi] {
    const T g = (*oi->grad)[0];
    auto& xg = *xi->grad;
    for (T& v : xg) v += g;
  });
  return out;
}

/// Mean over rows: [N x C] -> [1 x C].
template <typename T>
Tensor<T> row_mean(const Tensor<T>& x) {
  if (x.rank() != 2) {
    throw ShapeError("row_mean expects rank-2 input, got " +
                     shape_to_string(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1);
  Tensor<T> out = Tensor<T>::zeros({1, c});
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < c; ++j) ov[j] += xv[r * c + j];
  }
  const T inv = T(1) / T(n);
  for (std::size_t j = 0; j < c; ++j) ov[j] *= inv;
  auto xi = x.impl(), oi = out.impl();
  detail::record_if_tracked<T>("row_mean", {x}, out, [xi, oi, n, c, inv] {
    const auto& g = *oi->grad;
    auto& xg = *xi->grad;
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < c; ++j) xg[r * c + j] += g[j] * inv;
    }
  });
  return out;
}

/// Row extraction: [N x C] -> [1 x C].
template <typename T>
Tensor<T> take_row(const Tensor<T>& x, std::size_t row) {
  if (x.rank() != 2) {
    throw ShapeError("take_row expects rank-2 input, got " +
                     shape_to_string(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (row >= n) {
    throw IndexError("take_row index " + std::to_string(row) +
                     " out of range for " + std::to_string(n) + " rows");
  }
  Tensor<T> out = Tensor<T>::zeros({1, c});
  auto xv = x.data();
  auto ov = out.data();
  std::copy(xv.begin() + row * c, xv.begin() + (row + 1) * c, ov.begin());
  auto xi = x.impl(), oi = out.impl();
  detail::record_if_tracked<T>("take_row", {x}, out, [xi, oi, row, c] {
    const auto& g = *oi->grad;
    auto& xg = *xi->grad;
    for (std::size_t j = 0; j < c; ++j) xg[row * c + j] += g[j];
  });
  return out;
}

/// Stack rank-2 tensors with equal column counts along axis 0.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ValueError("concat_rows of zero tensors");
  const std::size_t c = parts[0].rank() == 2 ? parts[0].dim(1) : 0;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != c) {
      throw ShapeError("concat_rows expects rank-2 parts with " +
                       std::to_string(c) + " columns, got " +
                       shape_to_string(p.shape()));
    }
    total += p.dim(0);
  }
  Tensor<T> out = Tensor<T>::zeros({total, c});
  auto ov = out.data();
  std::size_t at = 0;
  for (const auto& p : parts) {
    auto pv = p.data();
    std::copy(pv.begin(), pv.end(), ov.begin() + at);
    at += pv.size();
  }
  std::vector<std::shared_ptr<TensorImpl<T>>> impls;
  impls.reserve(parts.size());
  for (const auto& p : parts) impls.push_back(p.impl());
  auto oi = out.impl();
  detail::record_many<T>("concat_rows", parts, out, [impls, oi] {
    const auto& g = *oi->grad;
    std::size_t at = 0;
    for (const auto& pi : impls) {
      const std::size_t n = pi->values.size();
      if (pi->requires_grad) {
        auto& pg = *pi->grad;
        for (std::size_t i = 0; i < n; ++i) pg[i] += g[at + i];
      }
      at += n;
    }
  });
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (numel(new_shape) != x.numel()) {
    throw ShapeError("reshape " + shape_to_string(x.shape()) + " -> " +
                     shape_to_string(new_shape) + " changes element count");
  }
  Tensor<T> out = Tensor<T>::from(std::move(new_shape),
                                  std::vector<T>(x.data().begin(), x.data().end()));
  auto xi = x.impl(), oi = out.impl();
  detail::record_if_tracked<T>("reshape", {x}, out, [xi, oi] {
    detail::add_into<T>(*xi->grad, *oi->grad);
  });
  return out;
}

/// Split the channel axis into heads.
/// rank 2: [L x C]     -> [h x L x C/h]
/// rank 3: [N x T x C] -> [N x h x T x C/h]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  const std::size_t c = x.shape().back();
  if (heads == 0 || c % heads != 0) {
    throw ShapeError("split_heads: " + std::to_string(heads) +
                     " heads do not divide channel dim of " +
                     shape_to_string(x.shape()));
  }
  const std::size_t dh = c / heads;
  Shape out_shape;
  std::size_t batch = 1, len = 0;
  if (x.rank() == 2) {
    len = x.dim(0);
    out_shape = {heads, len, dh};
  } else if (x.rank() == 3) {
    batch = x.dim(0);
    len = x.dim(1);
    out_shape = {batch, heads, len, dh};
  } else {
    throw ShapeError("split_heads expects rank 2 or 3, got " +
                     shape_to_string(x.shape()));
  }
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t src = (b * len + i) * c + h * dh;
        const std::size_t dst = ((b * heads + h) * len + i) * dh;
        std::copy(xv.begin() + src, xv.begin() + src + dh, ov.begin() + dst);
      }
    }
  }
  auto xi = x.impl(), oi = out.impl();
  detail::record_if_tracked<T>(
      "split_heads", {x}, out, [xi, oi, batch, heads, len, dh, c] {
        const auto& g = *oi->grad;
        auto& xg = *xi->grad;
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < len; ++i) {
              const std::size_t src = (b * len + i) * c + h * dh;
              const std::size_t dst = ((b * heads + h) * len + i) * dh;
              for (std::size_t k = 0; k < dh; ++k) xg[src + k] += g[dst + k];
            }
          }
        }
      });
  return out;
}

/// Inverse of split_heads.
/// rank 3: [h x L x dh]     -> [L x h*dh]
/// rank 4: [N x h x T x dh] -> [N x T x h*dh]
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  std::size_t batch = 1, heads = 0, len = 0, dh = 0;
  Shape out_shape;
  if (x.rank() == 3) {
    heads = x.dim(0); len = x.dim(1); dh = x.dim(2);
    out_shape = {len, heads * dh};
  } else if (x.rank() == 4) {
    batch = x.dim(0); heads = x.dim(1); len = x.dim(2); dh = x.dim(3);
    out_shape = {batch, len, heads * dh};
  } else {
    throw ShapeError("merge_heads expects rank 3 or 4, got " +
                     shape_to_string(x.shape()));
  }
  const std::size_t c = heads * dh;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t src = ((b * heads + h) * len + i) * dh;
        const std::size_t dst = (b * len + i) * c + h * dh;
        std::copy(xv.begin() + src, xv.begin() + src + dh, ov.begin() + dst);
      }
    }
  }
  auto xi = x.impl(), oi = out.impl();
  detail::record_if_tracked<T>(
      "merge_heads", {x}, out, [xi, oi, batch, heads, len, dh, c] {
        const auto& g = *oi->grad;
        auto& xg = *xi->grad;
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < len; ++i) {
              const std::size_t src = ((b * heads + h) * len + i) * dh;
              const std::size_t dst = (b * len + i) * c + h * dh;
              for (std::size_t k = 0; k < dh; ++k) xg[src + k] += g[dst + k];
            }
          }
        }
      });
  return out;
}

/// Inverted dropout. Identity (same handle) when not training or p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, T p, bool training, std::mt19937& rng) {
  if (p < T(0) || p >= T(1)) {
    throw ValueError("dropout probability must be in [0, 1), got " +
                     std::to_string(p));
  }
  if (!training || p == T(0)) return x;
  std::vector<T> mask(x.numel());
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  const T scale_up = T(1) / (T(1) - p);
  for (T& m : mask) m = keep(rng) ? scale_up : T(0);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * mask[i];
  auto xi = x.impl(), oi = out.impl();
  detail::record_if_tracked<T>("dropout", {x}, out,
                               [xi, oi, mask = std::move(mask)] {
                                 const auto& g = *oi->grad;
                                 auto& xg = *xi->grad;
                                 for (std::size_t i = 0; i < g.size(); ++i)
                                   xg[i] += g[i] * mask[i];
                               });
  return out;
}

/// Mean negative log-softmax of the true class, log-sum-exp stabilized.
/// Optional per-class weights follow the usual convention: the weighted
/// sum is divided by the sum of the selected weights, so weights of all
/// ones reproduce the unweighted mean bit for bit.
template <typename T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits,
                               const std::vector<std::size_t>& targets,
                               const std::vector<T>& class_weights = {}) {
  if (logits.rank() != 2) {
    throw ShapeError("cross_entropy_logits expects [batch x classes], got " +
                     shape_to_string(logits.shape()));
  }
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (targets.size() != batch) {
    throw ShapeError("cross_entropy_logits: " + std::to_string(targets.size()) +
                     " targets for batch of " + std::to_string(batch));
  }
  if (!class_weights.empty() && class_weights.size() != classes) {
    throw ShapeError("cross_entropy_logits: " +
                     std::to_string(class_weights.size()) +
                     " class weights for " + std::to_string(classes) +
                     " classes");
  }
  for (std::size_t t : targets) {
    if (t >= classes) {
      throw IndexError("cross_entropy_logits target " + std::to_string(t) +
                       " out of range [0, " + std::to_string(classes) + ")");
    }
  }

  std::vector<T> probs(batch * classes);
  std::vector<T> row_weight(batch, T(1));
  auto lv = logits.data();
  T loss = T(0), weight_sum = T(0);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = lv.data() + b * classes;
    T mx = row[0];
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
    T sum = T(0);
    for (std::size_t c = 0; c < classes; ++c) {
      const T e = std::exp(row[c] - mx);
      probs[b * classes + c] = e;
      sum += e;
    }
    const T inv = T(1) / sum;
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] *= inv;
    const T lse = mx + std::log(sum);
    const T w = class_weights.empty() ? T(1) : class_weights[targets[b]];
    row_weight[b] = w;
    loss += w * (lse - row[targets[b]]);
    weight_sum += w;
  }
  loss /= weight_sum;

  Tensor<T> out = Tensor<T>::scalar(loss);
  auto li = logits.impl(), oi = out.impl();
  detail::record_if_tracked<T>(
      "cross_entropy_logits", {logits}, out,
      [li, oi, batch, classes, targets, probs = std::move(probs),
       row_weight = std::move(row_weight), weight_sum] {
        const T g = (*oi->grad)[0];
        auto& lg = *li->grad;
        for (std::size_t b = 0; b < batch; ++b) {
          const T f = g * row_weight[b] / weight_sum;
          for (std::size_t c = 0; c < classes; ++c) {
            T d = probs[b * classes + c];
            if (c == targets[b]) d -= T(1);
            lg[b * classes + c] += f * d;
          }
        }
      });
  return out;
}

/// Per-element sigmoid binary cross entropy with a {0,1} mask; the loss is
/// the mean over unmasked elements. Targets may be soft values in [0,1].
template <typename T>
Tensor<T> bce_with_logits_masked(const Tensor<T>& logits,
                                 const Tensor<T>& targets,
                                 const Tensor<T>& mask) {
  if (logits.shape() != targets.shape() || logits.shape() != mask.shape()) {
    throw ShapeError("bce_with_logits shape mismatch: logits " +
                     shape_to_string(logits.shape()) + ", targets " +
                     shape_to_string(targets.shape()) + ", mask " +
                     shape_to_string(mask.shape()));
  }
  auto lv = logits.data(), tv = targets.data(), mv = mask.data();
  T count = T(0);
  for (T m : mv) count += m;
  if (count <= T(0)) {
    throw ValueError("bce_with_logits: every target is masked out");
  }
  T loss = T(0);
  for (std::size_t i = 0; i < lv.size(); ++i) {
    if (mv[i] == T(0)) continue;
    const T z = lv[i];
    const T l = std::max(z, T(0)) - z * tv[i] + std::log1p(std::exp(-std::abs(z)));
    loss += l;
  }
  loss /= count;

  Tensor<T> out = Tensor<T>::scalar(loss);
  auto li = logits.impl(), ti = targets.impl(), mi = mask.impl(),
       oi = out.impl();
  detail::record_if_tracked<T>(
      "bce_with_logits", {logits, targets, mask}, out, [li, ti, mi, oi, count] {
        const T g = (*oi->grad)[0] / count;
        auto& lg = *li->grad;
        for (std::size_t i = 0; i < lg.size(); ++i) {
          if (mi->values[i] == T(0)) continue;
          lg[i] += g * (sigmoid_value(li->values[i]) - ti->values[i]);
        }
      });
  return out;
}

}  // namespace protestlens
