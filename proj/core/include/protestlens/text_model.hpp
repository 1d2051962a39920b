#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "protestlens/ops.hpp"
#include "protestlens/tensor.hpp"
#include "protestlens/vocab.hpp"

namespace protestlens {

struct TextModelConfig {
  std::size_t max_len = 512;
  std::size_t vocab_size = 30003;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t window = 64;
  std::vector<std::size_t> global_positions = {0};
  double dropout = 0.1;

  void validate() const {
    if (window % 2 != 0 || window < 2 || window >= max_len) {
      throw ConfigError("text config: window must be even and in [2, max_len), got window=" +
                        std::to_string(window) + " max_len=" + std::to_string(max_len));
    }
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
      throw ConfigError("text config: d_model " + std::to_string(d_model) +
                        " not divisible by n_heads " + std::to_string(n_heads));
    }
    if (n_layers == 0) throw ConfigError("text config: n_layers must be >= 1");
    if (vocab_size < 3) throw ConfigError("text config: vocab_size must cover the reserved tokens");
    if (dropout < 0.0 || dropout >= 1.0) {
      throw ConfigError("text config: dropout must lie in [0, 1)");
    }
    for (std::size_t p : global_positions) {
      if (p >= max_len) {
        throw ConfigError("text config: global position " + std::to_string(p) +
                          " outside [0, max_len)");
      }
    }
  }
};

inline void to_json(nlohmann::json& j, const TextModelConfig& c) {
  j = nlohmann::json{{"max_len", c.max_len},
                     {"vocab_size", c.vocab_size},
                     {"d_model", c.d_model},
                     {"n_heads", c.n_heads},
                     {"n_layers", c.n_layers},
                     {"window", c.window},
                     {"global_positions", c.global_positions},
                     {"dropout", c.dropout}};
}

inline void from_json(const nlohmann::json& j, TextModelConfig& c) {
  j.at("max_len").get_to(c.max_len);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("d_model").get_to(c.d_model);
  j.at("n_heads").get_to(c.n_heads);
  j.at("n_layers").get_to(c.n_layers);
  j.at("window").get_to(c.window);
  if (j.contains("global_positions")) j.at("global_positions").get_to(c.global_positions);
  if (j.contains("dropout")) j.at("dropout").get_to(c.dropout);
}

enum class TokenFlag : std::uint8_t { padding, local, global };

struct TokenSequence {
  std::vector<std::size_t> ids;
  std::vector<TokenFlag> flags;

  std::size_t size() const { return ids.size(); }

  void append_padding(std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) {
      ids.push_back(Vocabulary::kPad);
      flags.push_back(TokenFlag::padding);
    }
  }
};

/// CLS-prefixed encoding, truncated to max_len tokens total.
inline TokenSequence encode_text(const std::string& text, const Vocabulary& vocab,
                                 const TextModelConfig& config) {
  TokenSequence seq;
  seq.ids.push_back(Vocabulary::kCls);
  for (const std::string& tok : tokenize(text)) {
    if (seq.ids.size() >= config.max_len) break;
    seq.ids.push_back(vocab.token_to_id(tok));
  }
  seq.flags.assign(seq.ids.size(), TokenFlag::local);
  for (std::size_t p : config.global_positions) {
    if (p < seq.flags.size()) seq.flags[p] = TokenFlag::global;
  }
  return seq;
}

/// output[i] = tok_emb[ids[i]] + pos_emb[i], with gradient scattered back
/// into the touched table rows.
template <typename T>
Tensor<T> embed_sequence(const TokenSequence& seq, const Tensor<T>& tok_emb,
                         const Tensor<T>& pos_emb) {
  if (tok_emb.rank() != 2 || pos_emb.rank() != 2 ||
      tok_emb.dim(1) != pos_emb.dim(1)) {
    throw ShapeError("embed tables disagree: tok " + shape_to_string(tok_emb.shape()) +
                     ", pos " + shape_to_string(pos_emb.shape()));
  }
  const std::size_t len = seq.size();
  const std::size_t d = tok_emb.dim(1);
  if (len == 0) throw ValueError("embed_sequence: empty sequence");
  if (len > pos_emb.dim(0)) {
    throw ValueError("sequence length " + std::to_string(len) +
                     " exceeds max_len " + std::to_string(pos_emb.dim(0)));
  }
  for (std::size_t id : seq.ids) {
    if (id >= tok_emb.dim(0)) {
      throw VocabError("token id " + std::to_string(id) +
                       " outside embedding table of " +
                       std::to_string(tok_emb.dim(0)));
    }
  }
  Tensor<T> out = Tensor<T>::zeros({len, d});
  auto tv = tok_emb.data(), pv = pos_emb.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < len; ++i) {
    const T* trow = tv.data() + seq.ids[i] * d;
    const T* prow = pv.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) ov[i * d + j] = trow[j] + prow[j];
  }
  auto ti = tok_emb.impl(), pi = pos_emb.impl(), oi = out.impl();
  detail::record_if_tracked<T>(
      "embed_sequence", {tok_emb, pos_emb}, out, [ti, pi, oi, ids = seq.ids, d] {
        const auto& g = *oi->grad;
        for (std::size_t i = 0; i < ids.size(); ++i) {
          if (ti->requires_grad) {
            T* trow = ti->grad->data() + ids[i] * d;
            for (std::size_t j = 0; j < d; ++j) trow[j] += g[i * d + j];
          }
          if (pi->requires_grad) {
            T* prow = pi->grad->data() + i * d;
            for (std::size_t j = 0; j < d; ++j) prow[j] += g[i * d + j];
          }
        }
      });
  return out;
}

/// Banded attention over [heads x len x d_head]: token i attends to
/// non-padding j with |i-j| <= window/2, plus every global token; global
/// tokens attend everywhere. Memory is O(len * (window + n_global)) per
/// head; a dense masked path exists only in the test oracle.
template <typename T>
Tensor<T> sliding_window_attention(const Tensor<T>& q, const Tensor<T>& k,
                                   const Tensor<T>& v, std::size_t window,
                                   const std::vector<TokenFlag>& flags) {
  if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeError("attention expects matching [heads x len x d_head], got q " +
                     shape_to_string(q.shape()) + ", k " + shape_to_string(k.shape()) +
                     ", v " + shape_to_string(v.shape()));
  }
  if (window % 2 != 0 || window == 0) {
    throw ValueError("attention window must be even and positive, got " +
                     std::to_string(window));
  }
  const std::size_t heads = q.dim(0), len = q.dim(1), dh = q.dim(2);
  if (flags.size() != len) {
    throw ShapeError("attention flags length " + std::to_string(flags.size()) +
                     " != sequence length " + std::to_string(len));
  }
  if (!q.all_finite() || !k.all_finite() || !v.all_finite()) {
    throw NumericError("attention input contains NaN or Inf");
  }

  std::vector<std::size_t> globals;
  for (std::size_t j = 0; j < len; ++j) {
    if (flags[j] == TokenFlag::global) globals.push_back(j);
  }

  // Allowed key lists depend only on the query index, shared across heads.
  const std::size_t half = window / 2;
  std::vector<std::uint32_t> allowed;
  std::vector<std::size_t> row_off(len + 1, 0);
  for (std::size_t i = 0; i < len; ++i) {
    row_off[i] = allowed.size();
    if (flags[i] == TokenFlag::padding) continue;
    const bool i_global = flags[i] == TokenFlag::global;
    if (i_global) {
      for (std::size_t j = 0; j < len; ++j) {
        if (flags[j] != TokenFlag::padding) allowed.push_back(static_cast<std::uint32_t>(j));
      }
    } else {
      const std::size_t lo = i >= half ? i - half : 0;
      const std::size_t hi = std::min(len - 1, i + half);
      std::size_t gi = 0;
      for (std::size_t j = lo; j <= hi; ++j) {
        if (flags[j] == TokenFlag::padding) continue;
        while (gi < globals.size() && globals[gi] < j) {
          allowed.push_back(static_cast<std::uint32_t>(globals[gi++]));
        }
        if (gi < globals.size() && globals[gi] == j) ++gi;
        allowed.push_back(static_cast<std::uint32_t>(j));
      }
      while (gi < globals.size()) {
        allowed.push_back(static_cast<std::uint32_t>(globals[gi++]));
      }
    }
  }
  row_off[len] = allowed.size();

  const std::size_t total = allowed.size();
  std::vector<T> weights(heads * total);
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  Tensor<T> out = Tensor<T>::zeros(q.shape());
  auto qv = q.data(), kv = k.data(), vv = v.data();
  auto ov = out.data();
  std::vector<T> scores;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t plane = h * len * dh;
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t begin = row_off[i], end = row_off[i + 1];
      if (begin == end) continue;
      const T* qrow = qv.data() + plane + i * dh;
      scores.assign(end - begin, T(0));
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t a = begin; a < end; ++a) {
        const T* krow = kv.data() + plane + allowed[a] * dh;
        T s = T(0);
        for (std::size_t t = 0; t < dh; ++t) s += qrow[t] * krow[t];
        s *= inv_sqrt;
        scores[a - begin] = s;
        mx = std::max(mx, s);
      }
      T sum = T(0);
      for (T& s : scores) {
        s = std::exp(s - mx);
        sum += s;
      }
      const T inv = T(1) / sum;
      T* orow = ov.data() + plane + i * dh;
      for (std::size_t a = begin; a < end; ++a) {
        const T w = scores[a - begin] * inv;
        weights[h * total + a] = w;
        const T* vrow = vv.data() + plane + allowed[a] * dh;
        for (std::size_t t = 0; t < dh; ++t) orow[t] += w * vrow[t];
      }
    }
  }

  auto qi = q.impl(), ki = k.impl(), vi = v.impl(), oi = out.impl();
  detail::record_if_tracked<T>(
      "sliding_window_attention", {q, k, v}, out,
      [qi, ki, vi, oi, heads, len, dh, total, inv_sqrt,
       allowed = std::move(allowed), row_off = std::move(row_off),
       weights = std::move(weights)] {
        const auto& g = *oi->grad;
        std::vector<T> dscore;
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t plane = h * len * dh;
          for (std::size_t i = 0; i < len; ++i) {
            const std::size_t begin = row_off[i], end = row_off[i + 1];
            if (begin == end) continue;
            const T* grow = g.data() + plane + i * dh;
            const T* qrow = qi->values.data() + plane + i * dh;
            dscore.assign(end - begin, T(0));
            T dot = T(0);
            for (std::size_t a = begin; a < end; ++a) {
              const T w = weights[h * total + a];
              const T* vrow = vi->values.data() + plane + allowed[a] * dh;
              T da = T(0);
              for (std::size_t t = 0; t < dh; ++t) da += grow[t] * vrow[t];
              if (vi->requires_grad) {
                T* dvrow = vi->grad->data() + plane + allowed[a] * dh;
                for (std::size_t t = 0; t < dh; ++t) dvrow[t] += w * grow[t];
              }
              dscore[a - begin] = da;
              dot += w * da;
            }
            for (std::size_t a = begin; a < end; ++a) {
              const T w = weights[h * total + a];
              const T ds = w * (dscore[a - begin] - dot) * inv_sqrt;
              const T* krow = ki->values.data() + plane + allowed[a] * dh;
              if (qi->requires_grad) {
                T* dqrow = qi->grad->data() + plane + i * dh;
                for (std::size_t t = 0; t < dh; ++t) dqrow[t] += ds * krow[t];
              }
              if (ki->requires_grad) {
                T* dkrow = ki->grad->data() + plane + allowed[a] * dh;
                for (std::size_t t = 0; t < dh; ++t) dkrow[t] += ds * qrow[t];
              }
            }
          }
        }
      });
  return out;
}

template <typename T>
struct TextLayerWeights {
  Tensor<T> wq, wk, wv, wo;
  Tensor<T> bq, bk, bv, bo;
  Tensor<T> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  Tensor<T> w1, b1, w2, b2;

  static TextLayerWeights init(std::size_t d, std::mt19937& rng, T stddev) {
    TextLayerWeights w;
    w.wq = Tensor<T>::randn({d, d}, rng, stddev);
    w.wk = Tensor<T>::randn({d, d}, rng, stddev);
    w.wv = Tensor<T>::randn({d, d}, rng, stddev);
    w.wo = Tensor<T>::randn({d, d}, rng, stddev);
    w.bq = Tensor<T>::zeros({d});
    w.bk = Tensor<T>::zeros({d});
    w.bv = Tensor<T>::zeros({d});
    w.bo = Tensor<T>::zeros({d});
    w.ln1_gamma = Tensor<T>::full({d}, T(1));
    w.ln1_beta = Tensor<T>::zeros({d});
    w.ln2_gamma = Tensor<T>::full({d}, T(1));
    w.ln2_beta = Tensor<T>::zeros({d});
    w.w1 = Tensor<T>::randn({d, 4 * d}, rng, stddev);
    w.b1 = Tensor<T>::zeros({4 * d});
    w.w2 = Tensor<T>::randn({4 * d, d}, rng, stddev);
    w.b2 = Tensor<T>::zeros({d});
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

/// Pre-LayerNorm transformer block; zeroed wo/bo and w2/b2 make it the
/// identity through the residual path.
template <typename T>
Tensor<T> text_layer_forward(const Tensor<T>& x, const TextLayerWeights<T>& w,
                             const TextModelConfig& config,
                             const std::vector<TokenFlag>& flags, bool training,
                             std::mt19937& rng) {
  const T eps = static_cast<T>(kLayerNormEps);
  const T p = static_cast<T>(config.dropout);
  Tensor<T> a = layer_norm(x, w.ln1_gamma, w.ln1_beta, eps);
  Tensor<T> q = add_bias(matmul(a, w.wq), w.bq);
  Tensor<T> k = add_bias(matmul(a, w.wk), w.bk);
  Tensor<T> v = add_bias(matmul(a, w.wv), w.bv);
  Tensor<T> attn = sliding_window_attention(
      split_heads(q, config.n_heads), split_heads(k, config.n_heads),
      split_heads(v, config.n_heads), config.window, flags);
  Tensor<T> o = add_bias(matmul(merge_heads(attn), w.wo), w.bo);
  o = dropout(o, p, training, rng);
  Tensor<T> x1 = add(x, o);

  Tensor<T> f = layer_norm(x1, w.ln2_gamma, w.ln2_beta, eps);
  f = add_bias(matmul(f, w.w1), w.b1);
  f = gelu(f);
  f = add_bias(matmul(f, w.w2), w.b2);
  f = dropout(f, p, training, rng);
  return add(x1, f);
}

template <typename T>
struct TextModel {
  TextModelConfig config;
  Tensor<T> tok_emb, pos_emb;
  std::vector<TextLayerWeights<T>> layers;
  Tensor<T> final_gamma, final_beta;
  Tensor<T> head_w, head_b;

  static TextModel init(const TextModelConfig& config, std::uint32_t seed) {
    config.validate();
    TextModel m;
    m.config = config;
    std::mt19937 rng(seed);
    const T stddev = T(0.02);
    m.tok_emb = Tensor<T>::randn({config.vocab_size, config.d_model}, rng, stddev);
    m.pos_emb = Tensor<T>::randn({config.max_len, config.d_model}, rng, stddev);
    m.layers.reserve(config.n_layers);
    for (std::size_t i = 0; i < config.n_layers; ++i) {
      m.layers.push_back(TextLayerWeights<T>::init(config.d_model, rng, stddev));
    }
    m.final_gamma = Tensor<T>::full({config.d_model}, T(1));
    m.final_beta = Tensor<T>::zeros({config.d_model});
    m.head_w = Tensor<T>::randn({config.d_model, 2}, rng, stddev);
    m.head_b = Tensor<T>::zeros({2});
    return m;
  }

  std::vector<std::pair<std::string, Tensor<T>>> named_params() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("tok_emb", tok_emb);
    out.emplace_back("pos_emb", pos_emb);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      layers[i].collect("layers." + std::to_string(i), out);
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

/// Final-hidden-state forward: embeddings, every block, closing norm.
template <typename T>
Tensor<T> text_hidden(const TokenSequence& seq, const TextModel<T>& m,
                      bool training, std::mt19937& rng) {
  Tensor<T> x = embed_sequence(seq, m.tok_emb, m.pos_emb);
  x = dropout(x, static_cast<T>(m.config.dropout), training, rng);
  for (const TextLayerWeights<T>& layer : m.layers) {
    x = text_layer_forward(x, layer, m.config, seq.flags, training, rng);
  }
  return layer_norm(x, m.final_gamma, m.final_beta, static_cast<T>(kLayerNormEps));
}

/// Two-class logits [1 x 2] read from the CLS position.
template <typename T>
Tensor<T> text_logits(const TokenSequence& seq, const TextModel<T>& m,
                      bool training, std::mt19937& rng) {
  Tensor<T> h = text_hidden(seq, m, training, rng);
  Tensor<T> cls = take_row(h, 0);
  return add_bias(matmul(cls, m.head_w), m.head_b);
}

struct TextPrediction {
  std::string label;      // "protest" or "non-protest"
  double probability;     // probability of the protest class
};

/// Class index 1 is protest; ties resolve to non-protest.
inline TextPrediction classify_text(const std::string& text, const Vocabulary& vocab,
                                    const TextModel<float>& model) {
  TokenSequence seq = encode_text(text, vocab, model.config);
  std::mt19937 rng(0);
  Tensor<float> logits = text_logits(seq, model, /*training=*/false, rng);
  auto lv = logits.data();
  const double z0 = lv[0], z1 = lv[1];
  const double mx = std::max(z0, z1);
  const double e0 = std::exp(z0 - mx), e1 = std::exp(z1 - mx);
  const double p1 = e1 / (e0 + e1);
  TextPrediction pred;
  pred.probability = p1;
  pred.label = (z1 > z0) ? "protest" : "non-protest";
  return pred;
}

}  // namespace protestlens
