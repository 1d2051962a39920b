#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "protestlens/ops.hpp"
#include "protestlens/tensor.hpp"

namespace protestlens {

inline constexpr double kCosineNormFloor = 1e-12;

struct VisionModelConfig {
  std::size_t image_size = 64;
  std::size_t patch_size = 4;
  std::size_t window = 4;
  std::size_t embed_dim = 32;
  std::vector<std::size_t> depths = {2, 2};
  std::vector<std::size_t> heads = {2, 4};
  std::vector<std::string> attribute_heads = {"protest", "violence", "sign",
                                              "police"};
  double tau_min = 0.01;
  std::size_t cpb_hidden = 32;
  double dropout = 0.0;

  std::size_t n_stages() const { return depths.size(); }
  std::size_t grid_at(std::size_t stage) const {
    return (image_size / patch_size) >> stage;
  }
  std::size_t channels_at(std::size_t stage) const {
    return embed_dim << stage;
  }

  void validate() const {
    if (patch_size == 0 || image_size % patch_size != 0) {
      throw ConfigError("vision config: image_size " + std::to_string(image_size) +
                        " not divisible by patch_size " + std::to_string(patch_size));
    }
    if (depths.empty() || depths.size() != heads.size()) {
      throw ConfigError("vision config: depths and heads must be equal-length and non-empty");
    }
    if (window < 2) throw ConfigError("vision config: window must be >= 2");
    if (tau_min <= 0.0) throw ConfigError("vision config: tau_min must be > 0");
    if (dropout < 0.0 || dropout >= 1.0) {
      throw ConfigError("vision config: dropout must lie in [0, 1)");
    }
    std::size_t grid = image_size / patch_size;
    for (std::size_t s = 0; s < depths.size(); ++s) {
      if (depths[s] == 0) throw ConfigError("vision config: stage depth must be >= 1");
      if (grid % window != 0) {
        throw ConfigError("vision config: stage " + std::to_string(s) + " grid " +
                          std::to_string(grid) + " not divisible by window " +
                          std::to_string(window));
      }
      if (channels_at(s) % heads[s] != 0) {
        throw ConfigError("vision config: stage " + std::to_string(s) + " channels " +
                          std::to_string(channels_at(s)) + " not divisible by " +
                          std::to_string(heads[s]) + " heads");
      }
      if (s + 1 < depths.size()) {
        if (grid % 2 != 0) {
          throw ConfigError("vision config: grid " + std::to_string(grid) +
                            " cannot be halved before stage " + std::to_string(s + 1));
        }
        grid /= 2;
      }
    }
    bool has_protest = false;
    for (const std::string& a : attribute_heads) has_protest |= (a == "protest");
    if (!has_protest) {
      throw ConfigError("vision config: attribute_heads must include 'protest'");
    }
  }
};

inline void to_json(nlohmann::json& j, const VisionModelConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size},
                     {"patch_size", c.patch_size},
                     {"window", c.window},
                     {"embed_dim", c.embed_dim},
                     {"depths", c.depths},
                     {"heads", c.heads},
                     {"attribute_heads", c.attribute_heads},
                     {"tau_min", c.tau_min},
                     {"cpb_hidden", c.cpb_hidden},
                     {"dropout", c.dropout}};
}

inline void from_json(const nlohmann::json& j, VisionModelConfig& c) {
  j.at("image_size").get_to(c.image_size);
  j.at("patch_size").get_to(c.patch_size);
  j.at("window").get_to(c.window);
  j.at("embed_dim").get_to(c.embed_dim);
  j.at("depths").get_to(c.depths);
  j.at("heads").get_to(c.heads);
  if (j.contains("attribute_heads")) j.at("attribute_heads").get_to(c.attribute_heads);
  if (j.contains("tau_min")) j.at("tau_min").get_to(c.tau_min);
  if (j.contains("cpb_hidden")) j.at("cpb_hidden").get_to(c.cpb_hidden);
  if (j.contains("dropout")) j.at("dropout").get_to(c.dropout);
}

/// [Hg x Wg x C] -> [nWin x window^2 x C]; windows row-major over the
/// grid, tokens row-major within each window.
template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, std::size_t window) {
  if (x.rank() != 3 || window == 0 || x.dim(0) % window != 0 ||
      x.dim(1) % window != 0) {
    throw ShapeError("window_partition: grid " + shape_to_string(x.shape()) +
                     " not divisible into " + std::to_string(window) + "x" +
                     std::to_string(window) + " windows");
  }
  const std::size_t hg = x.dim(0), wg = x.dim(1), c = x.dim(2);
  const std::size_t wr = hg / window, wc = wg / window;
  Tensor<T> out = Tensor<T>::zeros({wr * wc, window * window, c});
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t r = 0; r < hg; ++r) {
    for (std::size_t col = 0; col < wg; ++col) {
      const std::size_t win = (r / window) * wc + (col / window);
      const std::size_t slot = (r % window) * window + (col % window);
      const std::size_t src = (r * wg + col) * c;
      const std::size_t dst = (win * window * window + slot) * c;
      std::copy(xv.begin() + src, xv.begin() + src + c, ov.begin() + dst);
    }
  }
  auto xi = x.impl(), oi = out.impl();
  detail::record_if_tracked<T>(
      "window_partition", {x}, out, [xi, oi, hg, wg, c, window, wc] {
        const auto& g = *oi->grad;
        auto& xg = *xi->grad;
        for (std::size_t r = 0; r < hg; ++r) {
          for (std::size_t col = 0; col < wg; ++col) {
            const std::size_t win = (r / window) * wc + (col / window);
            const std::size_t slot = (r % window) * window + (col % window);
            const std::size_t src = (r * wg + col) * c;
            const std::size_t dst = (win * window * window + slot) * c;
            for (std::size_t t = 0; t < c; ++t) xg[src + t] += g[dst + t];
          }
        }
      });
  return out;
}

/// Exact inverse of window_partition.
template <typename T>
Tensor<T> window_reverse(const Tensor<T>& wins, std::size_t hg, std::size_t wg) {
  if (wins.rank() != 3) {
    throw ShapeError("window_reverse expects [nWin x window^2 x C], got " +
                     shape_to_string(wins.shape()));
  }
  const std::size_t wsize = wins.dim(1);
  const std::size_t window = static_cast<std::size_t>(std::lround(std::sqrt(double(wsize))));
  if (window * window != wsize || hg % window != 0 || wg % window != 0 ||
      wins.dim(0) * wsize != hg * wg) {
    throw ShapeError("window_reverse: " + shape_to_string(wins.shape()) +
                     " does not tile a " + std::to_string(hg) + "x" +
                     std::to_string(wg) + " grid");
  }
  const std::size_t c = wins.dim(2);
  const std::size_t wc = wg / window;
  Tensor<T> out = Tensor<T>::zeros({hg, wg, c});
  auto xv = wins.data();
  auto ov = out.data();
  for (std::size_t r = 0; r < hg; ++r) {
    for (std::size_t col = 0; col < wg; ++col) {
      const std::size_t win = (r / window) * wc + (col / window);
      const std::size_t slot = (r % window) * window + (col % window);
      const std::size_t src = (win * wsize + slot) * c;
      const std::size_t dst = (r * wg + col) * c;
      std::copy(xv.begin() + src, xv.begin() + src + c, ov.begin() + dst);
    }
  }
  auto xi = wins.impl(), oi = out.impl();
  detail::record_if_tracked<T>(
      "window_reverse", {wins}, out, [xi, oi, hg, wg, c, window, wc, wsize] {
        const auto& g = *oi->grad;
        auto& xg = *xi->grad;
        for (std::size_t r = 0; r < hg; ++r) {
          for (std::size_t col = 0; col < wg; ++col) {
            const std::size_t win = (r / window) * wc + (col / window);
            const std::size_t slot = (r % window) * window + (col % window);
            const std::size_t src = (win * wsize + slot) * c;
            const std::size_t dst = (r * wg + col) * c;
            for (std::size_t t = 0; t < c; ++t) xg[src + t] += g[dst + t];
          }
        }
      });
  return out;
}

/// Torus roll: out[r][c] = in[(r+d) mod H][(c+d) mod W]. Displacement may
/// be negative; shifting by d then -d is the identity.
template <typename T>
Tensor<T> cyclic_shift(const Tensor<T>& x, std::ptrdiff_t displacement) {
  if (x.rank() != 3) {
    throw ShapeError("cyclic_shift expects [H x W x C], got " +
                     shape_to_string(x.shape()));
  }
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  auto wrap = [](std::ptrdiff_t v, std::size_t n) {
    const std::ptrdiff_t m = static_cast<std::ptrdiff_t>(n);
    return static_cast<std::size_t>(((v % m) + m) % m);
  };
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xv = x.data();
  auto ov = out.data();
  std::vector<std::size_t> src_of(h * w);
  for (std::size_t r = 0; r < h; ++r) {
    const std::size_t sr = wrap(static_cast<std::ptrdiff_t>(r) + displacement, h);
    for (std::size_t col = 0; col < w; ++col) {
      const std::size_t sc = wrap(static_cast<std::ptrdiff_t>(col) + displacement, w);
      src_of[r * w + col] = sr * w + sc;
      const std::size_t src = (sr * w + sc) * c;
      const std::size_t dst = (r * w + col) * c;
      std::copy(xv.begin() + src, xv.begin() + src + c, ov.begin() + dst);
    }
  }
  auto xi = x.impl(), oi = out.impl();
  detail::record_if_tracked<T>("cyclic_shift", {x}, out,
                               [xi, oi, c, src_of = std::move(src_of)] {
                                 const auto& g = *oi->grad;
                                 auto& xg = *xi->grad;
                                 for (std::size_t cell = 0; cell < src_of.size(); ++cell) {
                                   const std::size_t src = src_of[cell] * c;
                                   const std::size_t dst = cell * c;
                                   for (std::size_t t = 0; t < c; ++t)
                                     xg[src + t] += g[dst + t];
                                 }
                               });
  return out;
}

/// 2x2 neighborhood concatenation [Hg x Wg x C] -> [Hg/2 x Wg/2 x 4C] in
/// the order (0,0), (1,0), (0,1), (1,1).
template <typename T>
Tensor<T> space_to_depth_2x2(const Tensor<T>& x) {
  if (x.rank() != 3 || x.dim(0) % 2 != 0 || x.dim(1) % 2 != 0) {
    throw ShapeError("space_to_depth needs even grid dims, got " +
                     shape_to_string(x.shape()));
  }
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor<T> out = Tensor<T>::zeros({oh, ow, 4 * c});
  auto xv = x.data();
  auto ov = out.data();
  const std::size_t dr[4] = {0, 1, 0, 1};
  const std::size_t dc[4] = {0, 0, 1, 1};
  for (std::size_t r = 0; r < oh; ++r) {
    for (std::size_t col = 0; col < ow; ++col) {
      T* orow = ov.data() + (r * ow + col) * 4 * c;
      for (std::size_t q = 0; q < 4; ++q) {
        const std::size_t src = ((2 * r + dr[q]) * w + 2 * col + dc[q]) * c;
        std::copy(xv.begin() + src, xv.begin() + src + c, orow + q * c);
      }
    }
  }
  auto xi = x.impl(), oi = out.impl();
  detail::record_if_tracked<T>(
      "space_to_depth", {x}, out, [xi, oi, oh, ow, w, c] {
        const auto& g = *oi->grad;
        auto& xg = *xi->grad;
        const std::size_t dr[4] = {0, 1, 0, 1};
        const std::size_t dc[4] = {0, 0, 1, 1};
        for (std::size_t r = 0; r < oh; ++r) {
          for (std::size_t col = 0; col < ow; ++col) {
            const T* grow = g.data() + (r * ow + col) * 4 * c;
            for (std::size_t q = 0; q < 4; ++q) {
              const std::size_t dst = ((2 * r + dr[q]) * w + 2 * col + dc[q]) * c;
              for (std::size_t t = 0; t < c; ++t) xg[dst + t] += grow[q * c + t];
            }
          }
        }
      });
  return out;
}

/// Log-spaced relative coordinates for every displacement pair within a
/// window: sign(d) * log2(1+|d|) / log2(window), laid out as
/// [(2w-1)^2 x 2] with index (dr + w-1) * (2w-1) + (dc + w-1).
template <typename T>
Tensor<T> cpb_coordinate_table(std::size_t window) {
  const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(window);
  const std::size_t span = 2 * window - 1;
  const double denom = std::log2(static_cast<double>(window));
  Tensor<T> coords = Tensor<T>::zeros({span * span, 2});
  auto cv = coords.data();
  for (std::ptrdiff_t dr = -(w - 1); dr <= w - 1; ++dr) {
    for (std::ptrdiff_t dc = -(w - 1); dc <= w - 1; ++dc) {
      const std::size_t idx =
          static_cast<std::size_t>(dr + w - 1) * span + static_cast<std::size_t>(dc + w - 1);
      auto transform = [denom](std::ptrdiff_t d) {
        const double sign = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
        return static_cast<T>(sign * std::log2(1.0 + std::abs(double(d))) / denom);
      };
      cv[idx * 2 + 0] = transform(dr);
      cv[idx * 2 + 1] = transform(dc);
    }
  }
  return coords;
}

/// Expand a per-displacement table [(2w-1)^2 x heads] into the full bias
/// cube [heads x w^2 x w^2]; bias depends only on displacement, so the
/// gather makes translation invariance structural.
template <typename T>
Tensor<T> assemble_window_bias(const Tensor<T>& table, std::size_t window) {
  const std::size_t span = 2 * window - 1;
  if (table.rank() != 2 || table.dim(0) != span * span) {
    throw ShapeError("bias table " + shape_to_string(table.shape()) +
                     " does not cover displacements of a window-" +
                     std::to_string(window) + " grid");
  }
  const std::size_t heads = table.dim(1);
  const std::size_t wsize = window * window;
  std::vector<std::uint32_t> disp(wsize * wsize);
  for (std::size_t i = 0; i < wsize; ++i) {
    const std::ptrdiff_t ri = static_cast<std::ptrdiff_t>(i / window);
    const std::ptrdiff_t ci = static_cast<std::ptrdiff_t>(i % window);
    for (std::size_t j = 0; j < wsize; ++j) {
      const std::ptrdiff_t rj = static_cast<std::ptrdiff_t>(j / window);
      const std::ptrdiff_t cj = static_cast<std::ptrdiff_t>(j % window);
      const std::size_t idx =
          static_cast<std::size_t>(ri - rj + std::ptrdiff_t(window) - 1) * span +
          static_cast<std::size_t>(ci - cj + std::ptrdiff_t(window) - 1);
      disp[i * wsize + j] = static_cast<std::uint32_t>(idx);
    }
  }
  Tensor<T> out = Tensor<T>::zeros({heads, wsize, wsize});
  auto tv = table.data();
  auto ov = out.data();
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t p = 0; p < wsize * wsize; ++p) {
      ov[h * wsize * wsize + p] = tv[disp[p] * heads + h];
    }
  }
  auto ti = table.impl(), oi = out.impl();
  detail::record_if_tracked<T>(
      "assemble_window_bias", {table}, out,
      [ti, oi, heads, wsize, disp = std::move(disp)] {
        const auto& g = *oi->grad;
        auto& tg = *ti->grad;
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t p = 0; p < wsize * wsize; ++p) {
            tg[disp[p] * heads + h] += g[h * wsize * wsize + p];
          }
        }
      });
  return out;
}

/// Scaled cosine attention over windows. q/k/v are [nWin x heads x S x dh]
/// with S = window^2; log_tau is per-head, clamped so tau >= tau_min; bias
/// is [heads x S x S]; mask, when given, is additive [nWin x S x S] with 0
/// or -inf entries (wrapped-pair suppression after a cyclic shift).
template <typename T>
Tensor<T> cosine_window_attention(const Tensor<T>& q, const Tensor<T>& k,
                                  const Tensor<T>& v, const Tensor<T>& log_tau,
                                  const Tensor<T>& bias, const Tensor<T>* mask,
                                  T tau_min) {
  if (q.rank() != 4 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeError("cosine attention expects matching [nWin x heads x S x dh], got q " +
                     shape_to_string(q.shape()) + ", k " + shape_to_string(k.shape()) +
                     ", v " + shape_to_string(v.shape()));
  }
  const std::size_t nwin = q.dim(0), heads = q.dim(1), s = q.dim(2), dh = q.dim(3);
  if (log_tau.rank() != 1 || log_tau.dim(0) != heads) {
    throw ShapeError("log_tau shape " + shape_to_string(log_tau.shape()) +
                     " must be [" + std::to_string(heads) + "]");
  }
  if (bias.rank() != 3 || bias.dim(0) != heads || bias.dim(1) != s || bias.dim(2) != s) {
    throw ShapeError("bias shape " + shape_to_string(bias.shape()) +
                     " must be [heads x S x S] for S=" + std::to_string(s));
  }
  if (mask && (mask->rank() != 3 || mask->dim(0) != nwin || mask->dim(1) != s ||
               mask->dim(2) != s)) {
    throw ShapeError("shift mask shape " + shape_to_string(mask->shape()) +
                     " must be [nWin x S x S]");
  }
  if (tau_min <= T(0)) throw ValueError("cosine attention: tau_min must be > 0");

  const T floor = static_cast<T>(kCosineNormFloor);
  std::vector<T> tau(heads);
  std::vector<bool> clamped(heads);
  auto ltv = log_tau.data();
  for (std::size_t h = 0; h < heads; ++h) {
    const T raw = std::exp(ltv[h]);
    clamped[h] = raw < tau_min;
    tau[h] = clamped[h] ? tau_min : raw;
  }

  const std::size_t rows = nwin * heads * s;
  std::vector<T> qhat(q.numel()), khat(k.numel());
  std::vector<T> qnorm(rows), knorm(rows);
  auto normalize = [&](std::span<const T> src, std::vector<T>& dst,
                       std::vector<T>& norms) {
    for (std::size_t r = 0; r < rows; ++r) {
      const T* row = src.data() + r * dh;
      T sq = T(0);
      for (std::size_t t = 0; t < dh; ++t) sq += row[t] * row[t];
      const T n = std::max(std::sqrt(sq), floor);
      norms[r] = n;
      const T inv = T(1) / n;
      for (std::size_t t = 0; t < dh; ++t) dst[r * dh + t] = row[t] * inv;
    }
  };
  normalize(q.data(), qhat, qnorm);
  normalize(k.data(), khat, knorm);

  std::vector<T> cosines(nwin * heads * s * s);
  std::vector<T> attn(nwin * heads * s * s);
  Tensor<T> out = Tensor<T>::zeros(q.shape());
  auto vv = v.data(), bv = bias.data();
  auto ov = out.data();
  const T* mv = mask ? mask->data().data() : nullptr;
  std::vector<T> logits(s);
  for (std::size_t win = 0; win < nwin; ++win) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t plane = (win * heads + h) * s;
      const T inv_tau = T(1) / tau[h];
      for (std::size_t i = 0; i < s; ++i) {
        const T* qrow = qhat.data() + (plane + i) * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < s; ++j) {
          const T* krow = khat.data() + (plane + j) * dh;
          T c = T(0);
          for (std::size_t t = 0; t < dh; ++t) c += qrow[t] * krow[t];
          cosines[(plane + i) * s + j] = c;
          T l = c * inv_tau + bv[(h * s + i) * s + j];
          if (mv) l += mv[(win * s + i) * s + j];
          logits[j] = l;
          mx = std::max(mx, l);
        }
        T sum = T(0);
        for (std::size_t j = 0; j < s; ++j) {
          const T e = std::exp(logits[j] - mx);
          attn[(plane + i) * s + j] = e;
          sum += e;
        }
        const T inv = T(1) / sum;
        T* orow = ov.data() + (plane + i) * dh;
        for (std::size_t j = 0; j < s; ++j) {
          const T w = attn[(plane + i) * s + j] * inv;
          attn[(plane + i) * s + j] = w;
          const T* vrow = vv.data() + (plane + j) * dh;
          for (std::size_t t = 0; t < dh; ++t) orow[t] += w * vrow[t];
        }
      }
    }
  }

  auto qi = q.impl(), ki = k.impl(), vi = v.impl(), li = log_tau.impl(),
       bi = bias.impl(), oi = out.impl();
  std::vector<Tensor<T>> tracked = {q, k, v, log_tau, bias};
  detail::record_many<T>(
      "cosine_window_attention", tracked, out,
      [qi, ki, vi, li, bi, oi, nwin, heads, s, dh, tau, clamped,
       qhat = std::move(qhat), khat = std::move(khat), qnorm = std::move(qnorm),
       knorm = std::move(knorm), cosines = std::move(cosines),
       attn = std::move(attn)] {
        const auto& g = *oi->grad;
        const T floor = static_cast<T>(kCosineNormFloor);
        std::vector<T> dlogit(s);
        std::vector<T> dqhat(dh);
        std::vector<T> dkhat(s * dh);
        for (std::size_t win = 0; win < nwin; ++win) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t plane = (win * heads + h) * s;
            const T inv_tau = T(1) / tau[h];
            std::fill(dkhat.begin(), dkhat.end(), T(0));
            for (std::size_t i = 0; i < s; ++i) {
              const T* grow = g.data() + (plane + i) * dh;
              // softmax backward over the attention row
              T dot = T(0);
              for (std::size_t j = 0; j < s; ++j) {
                const T w = attn[(plane + i) * s + j];
                const T* vrow = vi->values.data() + (plane + j) * dh;
                T da = T(0);
                for (std::size_t t = 0; t < dh; ++t) da += grow[t] * vrow[t];
                if (vi->requires_grad) {
                  T* dvrow = vi->grad->data() + (plane + j) * dh;
                  for (std::size_t t = 0; t < dh; ++t) dvrow[t] += w * grow[t];
                }
                dlogit[j] = da;
                dot += w * da;
              }
              std::fill(dqhat.begin(), dqhat.end(), T(0));
              for (std::size_t j = 0; j < s; ++j) {
                const T w = attn[(plane + i) * s + j];
                const T dl = w * (dlogit[j] - dot);
                if (dl == T(0)) continue;
                if (bi->requires_grad) {
                  (*bi->grad)[(h * s + i) * s + j] += dl;
                }
                if (li->requires_grad && !clamped[h]) {
                  // d(cos/tau)/d(log tau) = -cos/tau with tau = exp(log tau)
                  (*li->grad)[h] -= dl * cosines[(plane + i) * s + j] * inv_tau;
                }
                const T dc = dl * inv_tau;
                const T* krow = khat.data() + (plane + j) * dh;
                for (std::size_t t = 0; t < dh; ++t) dqhat[t] += dc * krow[t];
                if (ki->requires_grad) {
                  const T* qrow = qhat.data() + (plane + i) * dh;
                  for (std::size_t t = 0; t < dh; ++t)
                    dkhat[j * dh + t] += dc * qrow[t];
                }
              }
              if (qi->requires_grad) {
                // through the normalization: dq = (dqhat - (dqhat.qhat) qhat)/n
                // when the norm cleared the floor, plain dqhat/floor when the
                // row sat below it (there qhat = q/floor is linear)
                const T* qrow = qhat.data() + (plane + i) * dh;
                const T n = qnorm[plane + i];
                T* dqrow = qi->grad->data() + (plane + i) * dh;
                if (n > floor) {
                  T proj = T(0);
                  for (std::size_t t = 0; t < dh; ++t) proj += dqhat[t] * qrow[t];
                  for (std::size_t t = 0; t < dh; ++t)
                    dqrow[t] += (dqhat[t] - proj * qrow[t]) / n;
                } else {
                  for (std::size_t t = 0; t < dh; ++t) dqrow[t] += dqhat[t] / n;
                }
              }
            }
            if (ki->requires_grad) {
              for (std::size_t j = 0; j < s; ++j) {
                const T* krow = khat.data() + (plane + j) * dh;
                const T n = knorm[plane + j];
                T* dkrow = ki->grad->data() + (plane + j) * dh;
                if (n > floor) {
                  T proj = T(0);
                  for (std::size_t t = 0; t < dh; ++t)
                    proj += dkhat[j * dh + t] * krow[t];
                  for (std::size_t t = 0; t < dh; ++t)
                    dkrow[t] += (dkhat[j * dh + t] - proj * krow[t]) / n;
                } else {
                  for (std::size_t t = 0; t < dh; ++t)
                    dkrow[t] += dkhat[j * dh + t] / n;
                }
              }
            }
          }
        }
      });
  return out;
}

/// Additive shift mask: 0 where two window slots came from the same image
/// region before the cyclic shift, -inf where the pair wrapped across a
/// boundary. Built in the shifted frame with the standard three-band
/// region labeling.
template <typename T>
Tensor<T> make_shift_mask(std::size_t hg, std::size_t wg, std::size_t window,
                          std::size_t shift) {
  std::vector<int> region(hg * wg, 0);
  auto band = [&](std::size_t v, std::size_t extent) {
    if (v < extent - window) return 0;
    if (v < extent - shift) return 1;
    return 2;
  };
  for (std::size_t r = 0; r < hg; ++r) {
    for (std::size_t c = 0; c < wg; ++c) {
      region[r * wg + c] = band(r, hg) * 3 + band(c, wg);
    }
  }
  const std::size_t wc = wg / window;
  const std::size_t wsize = window * window;
  const std::size_t nwin = (hg / window) * wc;
  std::vector<int> win_region(nwin * wsize);
  for (std::size_t r = 0; r < hg; ++r) {
    for (std::size_t c = 0; c < wg; ++c) {
      const std::size_t win = (r / window) * wc + (c / window);
      const std::size_t slot = (r % window) * window + (c % window);
      win_region[win * wsize + slot] = region[r * wg + c];
    }
  }
  Tensor<T> mask = Tensor<T>::zeros({nwin, wsize, wsize});
  auto mv = mask.data();
  const T neg_inf = -std::numeric_limits<T>::infinity();
  for (std::size_t win = 0; win < nwin; ++win) {
    for (std::size_t i = 0; i < wsize; ++i) {
      for (std::size_t j = 0; j < wsize; ++j) {
        if (win_region[win * wsize + i] != win_region[win * wsize + j]) {
          mv[(win * wsize + i) * wsize + j] = neg_inf;
        }
      }
    }
  }
  return mask;
}

template <typename T>
struct VisionBlockWeights {
  Tensor<T> wq, wk, wv, wo;
  Tensor<T> bq, bk, bv, bo;
  Tensor<T> log_tau;
  Tensor<T> cpb_w1, cpb_b1, cpb_w2, cpb_b2;
  Tensor<T> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  Tensor<T> w1, b1, w2, b2;

  static VisionBlockWeights init(std::size_t c, std::size_t heads,
                                 std::size_t cpb_hidden, std::mt19937& rng,
                                 T stddev) {
    VisionBlockWeights w;
    w.wq = Tensor<T>::randn({c, c}, rng, stddev);
    w.wk = Tensor<T>::randn({c, c}, rng, stddev);
    w.wv = Tensor<T>::randn({c, c}, rng, stddev);
    w.wo = Tensor<T>::randn({c, c}, rng, stddev);
    w.bq = Tensor<T>::zeros({c});
    w.bk = Tensor<T>::zeros({c});
    w.bv = Tensor<T>::zeros({c});
    w.bo = Tensor<T>::zeros({c});
    w.log_tau = Tensor<T>::zeros({heads});
    w.cpb_w1 = Tensor<T>::randn({2, cpb_hidden}, rng, stddev);
    w.cpb_b1 = Tensor<T>::zeros({cpb_hidden});
    w.cpb_w2 = Tensor<T>::randn({cpb_hidden, heads}, rng, stddev);
    w.cpb_b2 = Tensor<T>::zeros({heads});
    w.ln1_gamma = Tensor<T>::full({c}, T(1));
    w.ln1_beta = Tensor<T>::zeros({c});
    w.ln2_gamma = Tensor<T>::full({c}, T(1));
    w.ln2_beta = Tensor<T>::zeros({c});
    w.w1 = Tensor<T>::randn({c, 4 * c}, rng, stddev);
    w.b1 = Tensor<T>::zeros({4 * c});
    w.w2 = Tensor<T>::randn({4 * c, c}, rng, stddev);
    w.b2 = Tensor<T>::zeros({c});
    return w;
  }

  void collect(const std::string& prefix,
               std::vector<std::pair<std::string, Tensor<T>>>& out) const {
    out.emplace_back(prefix + ".attn.wq", wq);
    out.emplace_back(prefix + ".attn.wk", wk);
    out.emplace_back(prefix + ".attn.wv", wv);
    out.emplace_back(prefix + ".attn.wo", wo);
    out.emplace_back(prefix + ".attn.bq", bq);
    out.emplace_back(prefix + ".attn.bk", bk);
    out.emplace_back(prefix + ".attn.bv", bv);
    out.emplace_back(prefix + ".attn.bo", bo);
    out.emplace_back(prefix + ".attn.log_tau", log_tau);
    out.emplace_back(prefix + ".cpb.w1", cpb_w1);
    out.emplace_back(prefix + ".cpb.b1", cpb_b1);
    out.emplace_back(prefix + ".cpb.w2", cpb_w2);
    out.emplace_back(prefix + ".cpb.b2", cpb_b2);
    out.emplace_back(prefix + ".ln1.gamma", ln1_gamma);
    out.emplace_back(prefix + ".ln1.beta", ln1_beta);
    out.emplace_back(prefix + ".ln2.gamma", ln2_gamma);
    out.emplace_back(prefix + ".ln2.beta", ln2_beta);
    out.emplace_back(prefix + ".ffn.w1", w1);
    out.emplace_back(prefix + ".ffn.b1", b1);
    out.emplace_back(prefix + ".ffn.w2", w2);
    out.emplace_back(prefix + ".ffn.b2", b2);
  }
};

/// The log-spaced continuous position bias for one block:
/// MLP(2 -> hidden -> heads, ReLU) over transformed displacement
/// coordinates, expanded to [heads x w^2 x w^2].
template <typename T>
Tensor<T> log_cpb_bias(std::size_t window, const VisionBlockWeights<T>& w) {
  Tensor<T> coords = cpb_coordinate_table<T>(window);
  Tensor<T> hidden = relu(add_bias(matmul(coords, w.cpb_w1), w.cpb_b1));
  Tensor<T> table = add_bias(matmul(hidden, w.cpb_w2), w.cpb_b2);
  return assemble_window_bias(table, window);
}

/// Res-post-norm block: x + LN(attn(x)), then x + LN(mlp(x)). Odd blocks
/// run on the cyclically shifted grid with the wrap mask.
template <typename T>
Tensor<T> vision_block_forward(const Tensor<T>& x, const VisionBlockWeights<T>& w,
                               std::size_t heads, std::size_t window,
                               std::size_t shift, T tau_min,
                               const Tensor<T>* shift_mask) {
  const std::size_t hg = x.dim(0), wg = x.dim(1);
  const T eps = static_cast<T>(kLayerNormEps);

  Tensor<T> xs = shift > 0 ? cyclic_shift(x, static_cast<std::ptrdiff_t>(shift)) : x;
  Tensor<T> wins = window_partition(xs, window);
  Tensor<T> q = split_heads(add_bias(matmul(wins, w.wq), w.bq), heads);
  Tensor<T> k = split_heads(add_bias(matmul(wins, w.wk), w.bk), heads);
  Tensor<T> v = split_heads(add_bias(matmul(wins, w.wv), w.bv), heads);
  Tensor<T> bias = log_cpb_bias(window, w);
  Tensor<T> attn =
      cosine_window_attention(q, k, v, w.log_tau, bias, shift_mask, tau_min);
  Tensor<T> o = add_bias(matmul(merge_heads(attn), w.wo), w.bo);
  Tensor<T> grid = window_reverse(o, hg, wg);
  if (shift > 0) grid = cyclic_shift(grid, -static_cast<std::ptrdiff_t>(shift));
  Tensor<T> x1 = add(x, layer_norm(grid, w.ln1_gamma, w.ln1_beta, eps));

  Tensor<T> f = add_bias(matmul(x1, w.w1), w.b1);
  f = gelu(f);
  f = add_bias(matmul(f, w.w2), w.b2);
  return add(x1, layer_norm(f, w.ln2_gamma, w.ln2_beta, eps));
}

template <typename T>
struct VisionModel {
  VisionModelConfig config;
  Tensor<T> patch_w, patch_b;
  Tensor<T> patch_gamma, patch_beta;
  std::vector<std::vector<VisionBlockWeights<T>>> stages;
  std::vector<Tensor<T>> merge_w, merge_b;
  Tensor<T> final_gamma, final_beta;
  Tensor<T> head_w, head_b;

  static VisionModel init(const VisionModelConfig& config, std::uint32_t seed) {
    config.validate();
    VisionModel m;
    m.config = config;
    std::mt19937 rng(seed);
    const T stddev = T(0.02);
    const std::size_t p = config.patch_size;
    m.patch_w = Tensor<T>::randn({p * p * 3, config.embed_dim}, rng, stddev);
    m.patch_b = Tensor<T>::zeros({config.embed_dim});
    m.patch_gamma = Tensor<T>::full({config.embed_dim}, T(1));
    m.patch_beta = Tensor<T>::zeros({config.embed_dim});
    for (std::size_t s = 0; s < config.n_stages(); ++s) {
      const std::size_t c = config.channels_at(s);
      std::vector<VisionBlockWeights<T>> blocks;
      for (std::size_t b = 0; b < config.depths[s]; ++b) {
        blocks.push_back(VisionBlockWeights<T>::init(c, config.heads[s],
                                                     config.cpb_hidden, rng, stddev));
      }
      m.stages.push_back(std::move(blocks));
      if (s + 1 < config.n_stages()) {
        m.merge_w.push_back(Tensor<T>::randn({4 * c, 2 * c}, rng, stddev));
        m.merge_b.push_back(Tensor<T>::zeros({2 * c}));
      }
    }
    const std::size_t cf = config.channels_at(config.n_stages() - 1);
    m.final_gamma = Tensor<T>::full({cf}, T(1));
    m.final_beta = Tensor<T>::zeros({cf});
    m.head_w = Tensor<T>::randn({cf, config.attribute_heads.size()}, rng, stddev);
    m.head_b = Tensor<T>::zeros({config.attribute_heads.size()});
    return m;
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_params() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("patch.w", patch_w);
    out.emplace_back("patch.b", patch_b);
    out.emplace_back("patch.ln.gamma", patch_gamma);
    out.emplace_back("patch.ln.beta", patch_beta);
    for (std::size_t s = 0; s < stages.size(); ++s) {
      for (std::size_t b = 0; b < stages[s].size(); ++b) {
        stages[s][b].collect(
            "stages." + std::to_string(s) + ".blocks." + std::to_string(b), out);
      }
      if (s + 1 < stages.size()) {
        out.emplace_back("merge." + std::to_string(s) + ".w", merge_w[s]);
        out.emplace_back("merge." + std::to_string(s) + ".b", merge_b[s]);
      }
    }
    out.emplace_back("final_ln.gamma", final_gamma);
    out.emplace_back("final_ln.beta", final_beta);
    out.emplace_back("head.w", head_w);
    out.emplace_back("head.b", head_b);
    return out;
  }

  std::vector<Tensor<T>> params() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
  }

  void set_requires_grad(bool on) {
    for (auto& t : params()) t.set_requires_grad(on);
  }
};

/// Non-overlapping p x p x 3 patches flattened row-major (row, col,
/// channel) and linearly projected; token grid is row-major.
template <typename T>
Tensor<T> patch_embed(const Tensor<T>& pixels, const Tensor<T>& weight,
                      const Tensor<T>& bias, std::size_t patch_size) {
  if (pixels.rank() != 3 || pixels.dim(2) != 3) {
    throw ShapeError("patch_embed expects [H x W x 3] pixels, got " +
                     shape_to_string(pixels.shape()));
  }
  const std::size_t h = pixels.dim(0), w = pixels.dim(1);
  if (patch_size == 0 || h % patch_size != 0 || w % patch_size != 0) {
    throw ShapeError("patch_embed: " + shape_to_string(pixels.shape()) +
                     " not divisible into " + std::to_string(patch_size) +
                     "-pixel patches");
  }
  const std::size_t gh = h / patch_size, gw = w / patch_size;
  const std::size_t plen = patch_size * patch_size * 3;
  if (weight.rank() != 2 || weight.dim(0) != plen) {
    throw ShapeError("patch_embed weight " + shape_to_string(weight.shape()) +
                     " must have " + std::to_string(plen) + " input dims");
  }
  Tensor<T> patches = Tensor<T>::zeros({gh * gw, plen});
  auto pv = pixels.data();
  auto tv = patches.data();
  for (std::size_t gr = 0; gr < gh; ++gr) {
    for (std::size_t gc = 0; gc < gw; ++gc) {
      T* row = tv.data() + (gr * gw + gc) * plen;
      std::size_t at = 0;
      for (std::size_t pr = 0; pr < patch_size; ++pr) {
        const std::size_t src = ((gr * patch_size + pr) * w + gc * patch_size) * 3;
        for (std::size_t t = 0; t < patch_size * 3; ++t) row[at++] = pv[src + t];
      }
    }
  }
  return add_bias(matmul(patches, weight), bias);
}

/// Full backbone: patch embed -> stages of alternating regular/shifted
/// blocks with patch merges between stages -> final norm -> mean pool ->
/// per-attribute logits [1 x n_attributes].
template <typename T>
Tensor<T> vision_logits(const Tensor<T>& pixels, const VisionModel<T>& m) {
  const VisionModelConfig& cfg = m.config;
  const T eps = static_cast<T>(kLayerNormEps);
  const T tau_min = static_cast<T>(cfg.tau_min);
  std::size_t grid = cfg.image_size / cfg.patch_size;

  Tensor<T> tokens = patch_embed(pixels, m.patch_w, m.patch_b, cfg.patch_size);
  tokens = layer_norm(tokens, m.patch_gamma, m.patch_beta, eps);
  Tensor<T> x = reshape(tokens, {grid, grid, cfg.embed_dim});

  for (std::size_t s = 0; s < m.stages.size(); ++s) {
    const std::size_t shift_amt = cfg.window / 2;
    Tensor<T> mask;
    const bool any_shifted = cfg.depths[s] > 1 && shift_amt > 0 && grid > cfg.window;
    if (any_shifted) mask = make_shift_mask<T>(grid, grid, cfg.window, shift_amt);
    for (std::size_t b = 0; b < m.stages[s].size(); ++b) {
      const bool shifted = (b % 2 == 1) && shift_amt > 0 && grid > cfg.window;
      x = vision_block_forward(x, m.stages[s][b], cfg.heads[s], cfg.window,
                               shifted ? shift_amt : 0, tau_min,
                               shifted ? &mask : nullptr);
    }
    if (s + 1 < m.stages.size()) {
      Tensor<T> merged = space_to_depth_2x2(x);
      grid /= 2;
      Tensor<T> flat = reshape(merged, {grid * grid, 4 * cfg.channels_at(s)});
      flat = add_bias(matmul(flat, m.merge_w[s]), m.merge_b[s]);
      x = reshape(flat, {grid, grid, cfg.channels_at(s + 1)});
    }
  }

  const std::size_t cf = cfg.channels_at(cfg.n_stages() - 1);
  Tensor<T> flat = reshape(x, {grid * grid, cf});
  flat = layer_norm(flat, m.final_gamma, m.final_beta, eps);
  Tensor<T> pooled = row_mean(flat);
  return add_bias(matmul(pooled, m.head_w), m.head_b);
}

struct ImagePrediction {
  double protest = 0.0;
  std::vector<std::pair<std::string, double>> attributes;
};

/// Sigmoid per attribute head; every output lies strictly inside (0, 1).
inline ImagePrediction classify_image(const Tensor<float>& pixels,
                                      const VisionModel<float>& model) {
  Tensor<float> logits = vision_logits(pixels, model);
  auto lv = logits.data();
  ImagePrediction pred;
  for (std::size_t i = 0; i < model.config.attribute_heads.size(); ++i) {
    const double p = sigmoid_value(static_cast<double>(lv[i]));
    pred.attributes.emplace_back(model.config.attribute_heads[i], p);
    if (model.config.attribute_heads[i] == "protest") pred.protest = p;
  }
  return pred;
}

}  // namespace protestlens
