#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>

#include "oracles.hpp"
#include "protestlens/text_model.hpp"

using namespace protestlens;

namespace {

TextModelConfig toy_config() {
  TextModelConfig c;
  c.max_len = 32;
  c.vocab_size = 40;
  c.d_model = 16;
  c.n_heads = 4;
  c.n_layers = 2;
  c.window = 4;
  c.dropout = 0.0;
  return c;
}

std::vector<TokenFlag> band_flags(std::size_t len, std::size_t n_global,
                                  std::size_t n_padding = 0) {
  std::vector<TokenFlag> flags(len, TokenFlag::local);
  for (std::size_t i = 0; i < n_global; ++i) flags[i] = TokenFlag::global;
  for (std::size_t i = 0; i < n_padding; ++i) flags[len - 1 - i] = TokenFlag::padding;
  return flags;
}

double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  double mx = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    mx = std::max(mx, std::abs(double(a.data()[i]) - double(b.data()[i])));
  }
  return mx;
}

}  // namespace

TEST_CASE("config validation enforces the architectural invariants") {
  TextModelConfig c = toy_config();
  c.validate();
  c.window = 3;  // must be even
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = toy_config();
  c.window = c.max_len;  // must stay below max_len
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = toy_config();
  c.d_model = 18;  // not divisible by heads
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = toy_config();
  c.global_positions = {c.max_len};
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("encode_text prepends a global CLS and truncates") {
  TextModelConfig c = toy_config();
  Vocabulary v = build_vocabulary({"rally against rent hikes downtown"}, 10);
  TokenSequence seq = encode_text("Rally downtown!", v, c);
  REQUIRE(seq.size() == 3);
  CHECK(seq.ids[0] == Vocabulary::kCls);
  CHECK(seq.flags[0] == TokenFlag::global);
  CHECK(seq.flags[1] == TokenFlag::local);
  CHECK(seq.ids[1] == v.token_to_id("rally"));
  CHECK(seq.ids[2] == v.token_to_id("downtown"));

  std::string huge;
  for (int i = 0; i < 10000; ++i) huge += "rally ";
  TokenSequence trunc = encode_text(huge, v, c);
  CHECK(trunc.size() == c.max_len);

  TokenSequence empty = encode_text("", v, c);
  CHECK(empty.size() == 1);  // CLS-only sequence, no error
}

TEST_CASE("embed_sequence adds token and position rows") {
  Tensor<float> tok = Tensor<float>::from({4, 2}, {0, 0, 1, 10, 2, 20, 3, 30});
  Tensor<float> pos = Tensor<float>::from({6, 2}, {.1, .2, .3, .4, .5, .6, 0, 0, 0, 0, 0, 0});
  TokenSequence seq;
  seq.ids = {2, 5 % 4, 3};  // ids 2, 1, 3
  seq.flags = {TokenFlag::global, TokenFlag::local, TokenFlag::local};
  Tensor<float> e = embed_sequence(seq, tok, pos);
  REQUIRE(e.shape() == Shape{3, 2});
  CHECK(e.data()[0] == doctest::Approx(2.0 + 0.1));
  CHECK(e.data()[1] == doctest::Approx(20.0 + 0.2));
  CHECK(e.data()[2] == doctest::Approx(1.0 + 0.3));

  Tensor<float> zt = Tensor<float>::zeros({4, 2});
  Tensor<float> zp = Tensor<float>::zeros({6, 2});
  Tensor<float> z = embed_sequence(seq, zt, zp);
  for (float x : z.data()) CHECK(x == 0.0f);

  TokenSequence bad;
  bad.ids = {7};
  bad.flags = {TokenFlag::local};
  CHECK_THROWS_AS(embed_sequence(bad, tok, pos), VocabError);
}

TEST_CASE("single-token attention returns v") {
  Tensor<float> q = Tensor<float>::from({1, 1, 2}, {1, 2});
  Tensor<float> k = Tensor<float>::from({1, 1, 2}, {3, 4});
  Tensor<float> v = Tensor<float>::from({1, 1, 2}, {5, 6});
  Tensor<float> o = sliding_window_attention(q, k, v, 2, {TokenFlag::global});
  CHECK(o.data()[0] == doctest::Approx(5.0f));
  CHECK(o.data()[1] == doctest::Approx(6.0f));
}

TEST_CASE("wide window with no padding equals full dense attention") {
  std::mt19937 rng(21);
  const std::size_t len = 6;
  Tensor<float> q = oracles::randu<float>({2, len, 4}, rng);
  Tensor<float> k = oracles::randu<float>({2, len, 4}, rng);
  Tensor<float> v = oracles::randu<float>({2, len, 4}, rng);
  auto flags = band_flags(len, 0);
  Tensor<float> banded = sliding_window_attention(q, k, v, 2 * len, flags);
  Tensor<float> dense = oracles::dense_band_attention(q, k, v, 2 * len, flags);
  CHECK(max_abs_diff(banded, dense) < 1e-5);
}

TEST_CASE("banded attention equals the dense masked oracle") {
  std::mt19937 rng(22);
  for (std::size_t len : {5, 16, 33}) {
    for (std::size_t window : {2, 4, 8}) {
      auto flags = band_flags(len, 1, len > 8 ? 3 : 0);
      Tensor<float> q = oracles::randu<float>({2, len, 4}, rng);
      Tensor<float> k = oracles::randu<float>({2, len, 4}, rng);
      Tensor<float> v = oracles::randu<float>({2, len, 4}, rng);
      Tensor<float> got = sliding_window_attention(q, k, v, window, flags);
      Tensor<float> want = oracles::dense_band_attention(q, k, v, window, flags);
      CHECK(max_abs_diff(got, want) < 1e-5);
    }
  }
}

TEST_CASE("NaN input is rejected as a numeric error") {
  Tensor<float> q = Tensor<float>::from({1, 2, 2}, {1, 2, 3, 4});
  Tensor<float> bad = Tensor<float>::from({1, 2, 2}, {1, std::nanf(""), 3, 4});
  auto flags = band_flags(2, 1);
  CHECK_THROWS_AS(sliding_window_attention(bad, q, q, 2, flags), NumericError);
  CHECK_THROWS_AS(sliding_window_attention(q, bad, q, 2, flags), NumericError);
}

TEST_CASE("padding rows produce zero output and attract no attention") {
  std::mt19937 rng(23);
  const std::size_t len = 10, pad = 3;
  Tensor<float> q = oracles::randu<float>({2, len, 4}, rng);
  Tensor<float> k = oracles::randu<float>({2, len, 4}, rng);
  Tensor<float> v = oracles::randu<float>({2, len, 4}, rng);
  auto flags = band_flags(len, 1, pad);
  Tensor<float> out = sliding_window_attention(q, k, v, 4, flags);
  for (std::size_t h = 0; h < 2; ++h) {
    for (std::size_t i = len - pad; i < len; ++i) {
      for (std::size_t c = 0; c < 4; ++c) {
        CHECK(out.data()[(h * len + i) * 4 + c] == 0.0f);
      }
    }
  }
}

TEST_CASE("appending padding never changes non-padding outputs") {
  std::mt19937 rng(24);
  TextModelConfig c = toy_config();
  TextModel<float> m = TextModel<float>::init(c, 5);
  Vocabulary v = build_vocabulary({"crowd gathered downtown with banners"}, 10);

  TokenSequence seq = encode_text("crowd with banners", v, c);
  std::mt19937 fwd_rng(0);
  Tensor<float> base = text_hidden(seq, m, false, fwd_rng);

  TokenSequence padded = seq;
  padded.append_padding(6);
  Tensor<float> extended = text_hidden(padded, m, false, fwd_rng);

  double mx = 0.0;
  for (std::size_t i = 0; i < base.numel(); ++i) {
    mx = std::max(mx, std::abs(double(base.data()[i]) - double(extended.data()[i])));
  }
  CHECK(mx < 1e-6);
}

TEST_CASE("receptive field is bounded by layers times half-window") {
  // One layer, window 4, no globals: token i only sees j with |i-j| <= 2.
  TextModelConfig c = toy_config();
  c.n_layers = 1;
  c.global_positions = {};
  TextModel<float> m = TextModel<float>::init(c, 6);

  TokenSequence seq;
  const std::size_t len = 12;
  for (std::size_t i = 0; i < len; ++i) {
    seq.ids.push_back(3 + i % 8);
    seq.flags.push_back(TokenFlag::local);
  }
  std::mt19937 rng(0);
  Tensor<float> base = text_hidden(seq, m, false, rng);

  TokenSequence bumped = seq;
  bumped.ids[11] = 3 + (bumped.ids[11] - 3 + 1) % 8;  // perturb the last token
  Tensor<float> changed = text_hidden(bumped, m, false, rng);

  for (std::size_t i = 0; i + 2 < 11 - 2; ++i) {  // outside the receptive field
    for (std::size_t d = 0; d < c.d_model; ++d) {
      CHECK(base.data()[i * c.d_model + d] ==
            changed.data()[i * c.d_model + d]);
    }
  }
  double moved = 0.0;  // inside it, something must move
  for (std::size_t d = 0; d < c.d_model; ++d) {
    moved += std::abs(base.data()[11 * c.d_model + d] -
                      changed.data()[11 * c.d_model + d]);
  }
  CHECK(moved > 0.0);
}

TEST_CASE("perturbing CLS reaches every non-padding token in one layer") {
  TextModelConfig c = toy_config();
  c.n_layers = 1;
  TextModel<float> m = TextModel<float>::init(c, 7);

  TokenSequence seq;
  const std::size_t len = 14;
  seq.ids.push_back(Vocabulary::kCls);
  seq.flags.push_back(TokenFlag::global);
  for (std::size_t i = 1; i < len; ++i) {
    seq.ids.push_back(3 + i % 6);
    seq.flags.push_back(TokenFlag::local);
  }
  std::mt19937 rng(0);
  Tensor<float> base = text_hidden(seq, m, false, rng);

  // Perturb the CLS embedding row directly.
  for (std::size_t d = 0; d < c.d_model; ++d) {
    m.tok_emb.data()[Vocabulary::kCls * c.d_model + d] += 0.25f;
  }
  Tensor<float> changed = text_hidden(seq, m, false, rng);

  for (std::size_t i = 0; i < len; ++i) {
    double moved = 0.0;
    for (std::size_t d = 0; d < c.d_model; ++d) {
      moved += std::abs(base.data()[i * c.d_model + d] -
                        changed.data()[i * c.d_model + d]);
    }
    CHECK(moved > 0.0);
  }
}

TEST_CASE("zeroed output projections make the layer an identity") {
  TextModelConfig c = toy_config();
  c.n_layers = 1;
  TextModel<float> m = TextModel<float>::init(c, 8);
  TextLayerWeights<float>& layer = m.layers[0];
  for (Tensor<float>* t : {&layer.wo, &layer.bo, &layer.w2, &layer.b2}) {
    std::fill(t->data().begin(), t->data().end(), 0.0f);
  }
  std::mt19937 rng(30);
  Tensor<float> x = oracles::randu<float>({6, c.d_model}, rng);
  std::mt19937 fwd(0);
  Tensor<float> y = text_layer_forward(x, layer, c, band_flags(6, 1), false, fwd);
  REQUIRE(y.shape() == x.shape());
  CHECK(max_abs_diff(x, y) == 0.0);
}

TEST_CASE("zeroed classifier head gives probability one half") {
  TextModelConfig c = toy_config();
  TextModel<float> m = TextModel<float>::init(c, 9);
  std::fill(m.head_w.data().begin(), m.head_w.data().end(), 0.0f);
  std::fill(m.head_b.data().begin(), m.head_b.data().end(), 0.0f);
  Vocabulary v = build_vocabulary({"one two three four"}, 10);
  TextPrediction p = classify_text("one three", v, m);
  CHECK(p.probability == 0.5);
  CHECK(p.label == "non-protest");  // tie resolves away from protest
}

TEST_CASE("permuting vocabulary ids with matching embedding rows is invisible") {
  TextModelConfig c = toy_config();
  TextModel<float> m = TextModel<float>::init(c, 10);

  TokenSequence seq;
  seq.ids = {Vocabulary::kCls, 5, 9, 7, 5};
  seq.flags.assign(5, TokenFlag::local);
  seq.flags[0] = TokenFlag::global;
  std::mt19937 rng(0);
  Tensor<float> before = text_logits(seq, m, false, rng);

  // Swap ids 5 <-> 9 everywhere: in the sequence and in the embedding table.
  TextModel<float> permuted = m;
  permuted.tok_emb = Tensor<float>::from(
      m.tok_emb.shape(),
      std::vector<float>(m.tok_emb.data().begin(), m.tok_emb.data().end()));
  for (std::size_t d = 0; d < c.d_model; ++d) {
    std::swap(permuted.tok_emb.data()[5 * c.d_model + d],
              permuted.tok_emb.data()[9 * c.d_model + d]);
  }
  TokenSequence renamed = seq;
  for (auto& id : renamed.ids) {
    if (id == 5) id = 9;
    else if (id == 9) id = 5;
  }
  Tensor<float> after = text_logits(renamed, permuted, false, rng);
  CHECK(max_abs_diff(before, after) == 0.0);
}

TEST_CASE("ten thousand tokens truncate without error") {
  TextModelConfig c = toy_config();
  TextModel<float> m = TextModel<float>::init(c, 11);
  Vocabulary v = build_vocabulary({"crowd rally police street march"}, 10);
  std::string huge;
  for (int i = 0; i < 10000; ++i) huge += "rally crowd ";
  TextPrediction p = classify_text(huge, v, m);
  CHECK(p.probability > 0.0);
  CHECK(p.probability < 1.0);
}
