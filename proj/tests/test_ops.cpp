#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>

#include "protestlens/ops.hpp"

using namespace protestlens;

namespace {

template <typename E, typename F>
std::string thrown_message(F&& f) {
  try {
    f();
  } catch (const E& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("matmul matches hand-computed products") {
  Tensor<float> eye = Tensor<float>::from({2, 2}, {1, 0, 0, 1});
  Tensor<float> a = Tensor<float>::from({2, 2}, {1, 2, 3, 4});
  Tensor<float> id = matmul(eye, a);
  CHECK(std::vector<float>(id.data().begin(), id.data().end()) ==
        std::vector<float>{1, 2, 3, 4});

  Tensor<float> b = Tensor<float>::from({2, 2}, {5, 6, 7, 8});
  Tensor<float> c = matmul(a, b);
  CHECK(std::vector<float>(c.data().begin(), c.data().end()) ==
        std::vector<float>{19, 22, 43, 50});

  Tensor<float> row = Tensor<float>::full({1, 4}, 1.0f);
  Tensor<float> col = Tensor<float>::full({4, 1}, 1.0f);
  CHECK(matmul(row, col).item() == 4.0f);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor<float> a = Tensor<float>::zeros({2, 3});
  Tensor<float> b = Tensor<float>::zeros({2, 3});
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
  const std::string msg = thrown_message<ShapeError>([&] { matmul(a, b); });
  CHECK(msg.find("[2x3]") != std::string::npos);
}

TEST_CASE("batched matmul applies the shared right factor per batch") {
  std::mt19937 rng(3);
  Tensor<float> a = Tensor<float>::randn({3, 2, 4}, rng, 1.0f);
  Tensor<float> b = Tensor<float>::randn({4, 5}, rng, 1.0f);
  Tensor<float> c = matmul(a, b);
  REQUIRE(c.shape() == Shape{3, 2, 5});
  for (std::size_t n = 0; n < 3; ++n) {
    Tensor<float> slice = Tensor<float>::from(
        {2, 4}, std::vector<float>(a.data().begin() + n * 8, a.data().begin() + (n + 1) * 8));
    Tensor<float> want = matmul(slice, b);
    for (std::size_t i = 0; i < 10; ++i) {
      CHECK(c.data()[n * 10 + i] == doctest::Approx(want.data()[i]));
    }
  }
}

TEST_CASE("softmax frozen values and stability") {
  Tensor<double> sym = softmax(Tensor<double>::from({2}, {0, 0}), 0);
  CHECK(sym.data()[0] == doctest::Approx(0.5));

  Tensor<double> x = softmax(Tensor<double>::from({3}, {1, 2, 3}), 0);
  CHECK(x.data()[0] == doctest::Approx(0.09003057).epsilon(1e-6));
  CHECK(x.data()[1] == doctest::Approx(0.24472847).epsilon(1e-6));
  CHECK(x.data()[2] == doctest::Approx(0.66524096).epsilon(1e-6));

  Tensor<double> big = softmax(Tensor<double>::from({2}, {1000, 1000}), 0);
  CHECK(big.all_finite());
  CHECK(big.data()[0] == doctest::Approx(0.5));
}

TEST_CASE("softmax rows sum to one across axes and magnitudes") {
  std::mt19937 rng(5);
  for (double mag : {1.0, 100.0, 1000.0}) {
    Tensor<double> x = Tensor<double>::randn({4, 7}, rng, mag);
    for (std::size_t axis : {std::size_t(0), std::size_t(1)}) {
      Tensor<double> y = softmax(x, axis);
      const std::size_t outer = axis == 0 ? 7 : 4;
      const std::size_t n = axis == 0 ? 4 : 7;
      for (std::size_t o = 0; o < outer; ++o) {
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          sum += axis == 0 ? y.data()[i * 7 + o] : y.data()[o * 7 + i];
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("layer_norm frozen values") {
  Tensor<double> gamma = Tensor<double>::full({3}, 1.0);
  Tensor<double> beta = Tensor<double>::zeros({3});

  Tensor<double> flat = layer_norm(Tensor<double>::from({1, 3}, {5, 5, 5}), gamma, beta, 1e-12);
  for (double v : flat.data()) CHECK(v == doctest::Approx(0.0).epsilon(1e-9));

  // population variance 2/3, so (x - mean)/sqrt(var) = ±1.22474
  Tensor<double> r = layer_norm(Tensor<double>::from({1, 3}, {1, 2, 3}), gamma, beta, 1e-12);
  CHECK(r.data()[0] == doctest::Approx(-1.22474).epsilon(1e-5));
  CHECK(r.data()[1] == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(r.data()[2] == doctest::Approx(1.22474).epsilon(1e-5));

  Tensor<double> g0 = Tensor<double>::zeros({3});
  Tensor<double> b7 = Tensor<double>::full({3}, 7.0);
  Tensor<double> overridden =
      layer_norm(Tensor<double>::from({1, 3}, {0.3, -9, 4}), g0, b7, 1e-12);
  for (double v : overridden.data()) CHECK(v == 7.0);

  CHECK_THROWS_AS(layer_norm(flat, gamma, beta, 0.0), ValueError);
  CHECK_THROWS_AS(layer_norm(flat, gamma, beta, -1.0), ValueError);
}

TEST_CASE("layer_norm output has zero mean and unit variance per row") {
  std::mt19937 rng(9);
  Tensor<double> x = Tensor<double>::randn({5, 16}, rng, 3.0);
  Tensor<double> gamma = Tensor<double>::full({16}, 1.0);
  Tensor<double> beta = Tensor<double>::zeros({16});
  Tensor<double> y = layer_norm(x, gamma, beta, 1e-12);
  for (std::size_t r = 0; r < 5; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < 16; ++c) mean += y.data()[r * 16 + c];
    mean /= 16;
    for (std::size_t c = 0; c < 16; ++c) {
      const double d = y.data()[r * 16 + c] - mean;
      var += d * d;
    }
    var /= 16;
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("gelu frozen values against the erf reference") {
  auto ref = [](double v) { return v * 0.5 * (1.0 + std::erf(v / std::sqrt(2.0))); };
  Tensor<double> x = Tensor<double>::from({5}, {0.0, 1.0, -10.0, 0.5, -2.25});
  Tensor<double> y = gelu(x);
  CHECK(y.data()[0] == 0.0);
  CHECK(y.data()[1] == doctest::Approx(0.841345).epsilon(1e-6));
  CHECK(std::abs(y.data()[2]) < 1e-6);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(y.data()[i] == doctest::Approx(ref(x.data()[i])).epsilon(1e-9));
  }
}

TEST_CASE("cross entropy frozen values") {
  CHECK(cross_entropy_logits(Tensor<double>::from({1, 2}, {0, 0}), {0}).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-9));
  CHECK(cross_entropy_logits(Tensor<double>::from({1, 2}, {10, -10}), {0}).item() < 1e-4);
  CHECK(cross_entropy_logits(Tensor<double>::from({1, 3}, {1, 2, 3}), {2}).item() ==
        doctest::Approx(0.407606).epsilon(1e-6));
  CHECK_THROWS_AS(cross_entropy_logits(Tensor<double>::from({1, 3}, {1, 2, 3}), {3}),
                  IndexError);
}

TEST_CASE("cross entropy with unit class weights is bit-identical to none") {
  Tensor<double> logits = Tensor<double>::from({2, 2}, {0.3, -1.2, 2.0, 0.7});
  const double plain = cross_entropy_logits(logits, {0, 1}).item();
  const double weighted = cross_entropy_logits(logits, {0, 1}, {1.0, 1.0}).item();
  CHECK(plain == weighted);
}

TEST_CASE("masked binary cross entropy") {
  // Single unmasked cell: -(t log s + (1-t) log(1-s)), z = 0.4, t = 1.
  Tensor<double> z = Tensor<double>::from({1, 2}, {0.4, 123.0});
  Tensor<double> t = Tensor<double>::from({1, 2}, {1.0, 0.0});
  Tensor<double> keep = Tensor<double>::from({1, 2}, {1.0, 0.0});
  const double s = 1.0 / (1.0 + std::exp(-0.4));
  CHECK(bce_with_logits_masked(z, t, keep).item() ==
        doctest::Approx(-std::log(s)).epsilon(1e-9));

  Tensor<double> none = Tensor<double>::zeros({1, 2});
  CHECK_THROWS_AS(bce_with_logits_masked(z, t, none), ValueError);

  // Extreme logits stay finite thanks to the log1p form.
  Tensor<double> hot = Tensor<double>::from({1, 2}, {500.0, -500.0});
  Tensor<double> both = Tensor<double>::full({1, 2}, 1.0);
  CHECK(bce_with_logits_masked(hot, t, both).all_finite());
}

TEST_CASE("elementwise and structural ops") {
  Tensor<float> a = Tensor<float>::from({2, 2}, {1, 2, 3, 4});
  Tensor<float> b = Tensor<float>::from({2, 2}, {10, 20, 30, 40});
  CHECK(add(a, b).data()[3] == 44.0f);
  CHECK(mul(a, b).data()[2] == 90.0f);
  CHECK(scale(a, 2.0f).data()[1] == 4.0f);
  CHECK_THROWS_AS(add(a, Tensor<float>::zeros({3})), ShapeError);

  Tensor<float> bias = Tensor<float>::from({2}, {100, 200});
  Tensor<float> biased = add_bias(a, bias);
  CHECK(biased.data()[0] == 101.0f);
  CHECK(biased.data()[3] == 204.0f);

  CHECK(relu(Tensor<float>::from({3}, {-1, 0, 2})).data()[0] == 0.0f);
  CHECK(sigmoid(Tensor<float>::scalar(0.0f)).item() == 0.5f);
  CHECK(sigmoid_value(0.0) == 0.5);
  CHECK(sigmoid_value(40.0) == doctest::Approx(1.0));
  CHECK(sigmoid_value(-40.0) == doctest::Approx(0.0));

  CHECK(sum_all(a).item() == 10.0f);
  Tensor<float> means = row_mean(a);
  CHECK(means.shape() == Shape{1, 2});
  CHECK(means.data()[0] == 2.0f);  // column means over rows
  CHECK(means.data()[1] == 3.0f);

  Tensor<float> r1 = take_row(a, 1);
  CHECK(r1.shape() == Shape{1, 2});
  CHECK(r1.data()[0] == 3.0f);
  CHECK_THROWS_AS(take_row(a, 2), IndexError);

  Tensor<float> cat =
      concat_rows(std::vector<Tensor<float>>{take_row(a, 0), take_row(a, 1)});
  CHECK(cat.shape() == Shape{2, 2});
  CHECK(std::vector<float>(cat.data().begin(), cat.data().end()) ==
        std::vector<float>(a.data().begin(), a.data().end()));

  Tensor<float> flat = reshape(a, {4});
  CHECK(flat.shape() == Shape{4});
  CHECK_THROWS_AS(reshape(a, {5}), ShapeError);
}

TEST_CASE("split and merge heads invert each other") {
  std::mt19937 rng(2);
  Tensor<float> x = Tensor<float>::randn({6, 8}, rng, 1.0f);
  Tensor<float> heads = split_heads(x, 4);
  REQUIRE(heads.shape() == Shape{4, 6, 2});
  Tensor<float> back = merge_heads(heads);
  REQUIRE(back.shape() == Shape{6, 8});
  CHECK(std::vector<float>(back.data().begin(), back.data().end()) ==
        std::vector<float>(x.data().begin(), x.data().end()));
  CHECK_THROWS_AS(split_heads(x, 3), ShapeError);
}

TEST_CASE("dropout semantics") {
  std::mt19937 rng(7);
  Tensor<float> x = Tensor<float>::full({100}, 2.0f);

  Tensor<float> off = dropout(x, 0.0f, true, rng);
  CHECK(off.same_storage(x));
  Tensor<float> inference = dropout(x, 0.5f, false, rng);
  CHECK(inference.same_storage(x));

  Tensor<float> on = dropout(x, 0.5f, true, rng);
  CHECK_FALSE(on.same_storage(x));
  std::size_t zeros = 0;
  for (float v : on.data()) {
    const bool kept = v == doctest::Approx(4.0f);  // 2 / (1 - 0.5)
    const bool dropped = v == 0.0f;
    CHECK((kept || dropped));
    zeros += dropped;
  }
  CHECK(zeros > 20);
  CHECK(zeros < 80);

  CHECK_THROWS_AS(dropout(x, 1.0f, true, rng), ValueError);
  CHECK_THROWS_AS(dropout(x, -0.1f, true, rng), ValueError);
}

TEST_CASE("output shapes are functions of input shapes") {
  std::mt19937 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<std::size_t> dim(1, 6);
    const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
    Tensor<float> a = Tensor<float>::randn({m, k}, rng, 1.0f);
    Tensor<float> b = Tensor<float>::randn({k, n}, rng, 1.0f);
    CHECK(matmul(a, b).shape() == Shape{m, n});
    CHECK(softmax(a, 1).shape() == a.shape());
    CHECK(add(a, a).shape() == a.shape());
    CHECK(row_mean(a).shape() == Shape{1, k});
  }
}
