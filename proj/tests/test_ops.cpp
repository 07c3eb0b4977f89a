#include "doctest.h"
#include "test_util.hpp"

using namespace hat;
using hat::test::check_gradients;
using hat::test::random_tensor;

namespace {
Var<double> leaf(Shape s, Rng& rng) { return Var<double>(random_tensor<double>(std::move(s), rng), true); }
}  // namespace

TEST_CASE("gradients of dense ops") {
  Rng rng(11);
  auto x = leaf({2, 3, 4}, rng), W = leaf({5, 4}, rng), b = leaf({5}, rng);
  CHECK(check_gradients({x, W, b}, [&] { return ops::linear(x, W, b); }).rel_error < 1e-6);
  CHECK(check_gradients({x, W}, [&] { return ops::linear(x, W, Var<double>()); }).rel_error < 1e-6);

  auto img = leaf({2, 3, 5, 4}, rng), k = leaf({4, 3, 3, 3}, rng), kb = leaf({4}, rng);
  CHECK(check_gradients({img, k, kb}, [&] { return ops::conv2d(img, k, kb, 1, 1); }).rel_error < 1e-6);
  CHECK(check_gradients({img, k}, [&] { return ops::conv2d(img, k, Var<double>(), 2, 1); }).rel_error < 1e-6);

  auto a = leaf({3, 4}, rng), c = leaf({3, 4}, rng);
  CHECK(check_gradients({a, c}, [&] { return ops::add(a, ops::scale(c, 2.5)); }).rel_error < 1e-8);
  CHECK(check_gradients({a}, [&] { return ops::gelu(a); }).rel_error < 1e-6);
  CHECK(check_gradients({a}, [&] { return ops::l2_normalize_rows(a); }).rel_error < 1e-6);
  CHECK(check_gradients({a, c}, [&] { return ops::concat_features(a, c); }).rel_error < 1e-8);
}

TEST_CASE("gradients of normalization ops") {
  Rng rng(12);
  auto x = leaf({4, 3, 2, 2}, rng), g = leaf({3}, rng), b = leaf({3}, rng);
  ops::BatchNormState<double> st{Tensor<double>({3}), Tensor<double>({3}, 1.0)};
  CHECK(check_gradients({x, g, b}, [&] { return ops::batch_norm(x, g, b, st, true); }).rel_error < 1e-5);
  CHECK(check_gradients({x, g, b}, [&] { return ops::batch_norm(x, g, b, st, false); }).rel_error < 1e-6);

  auto t = leaf({2, 3, 6}, rng), lg = leaf({6}, rng), lb = leaf({6}, rng);
  CHECK(check_gradients({t, lg, lb}, [&] { return ops::layer_norm(t, lg, lb); }).rel_error < 1e-5);
}

TEST_CASE("gradients of spatial and token ops") {
  Rng rng(13);
  auto x = leaf({2, 3, 4, 6}, rng);
  CHECK(check_gradients({x}, [&] { return ops::relu(x); }).rel_error < 1e-6);
  CHECK(check_gradients({x}, [&] { return ops::max_pool(x, 2, 3); }).rel_error < 1e-6);
  CHECK(check_gradients({x}, [&] { return ops::upsample_bilinear(x, 7, 9); }).rel_error < 1e-6);
  CHECK(check_gradients({x}, [&] { return ops::global_avg_pool(x); }).rel_error < 1e-6);
  auto y = leaf({2, 2, 4, 6}, rng);
  CHECK(check_gradients({x, y}, [&] { return ops::concat_channels(x, y); }).rel_error < 1e-8);

  auto map = leaf({2, 4, 2, 3}, rng), cls = leaf({4}, rng), pos = leaf({7, 4}, rng);
  CHECK(check_gradients({map, cls, pos}, [&] { return ops::tokens_with_cls(map, cls, pos); }).rel_error < 1e-8);
  auto seq = leaf({2, 7, 4}, rng);
  CHECK(check_gradients({seq}, [&] { return ops::spatial_tokens_to_map(seq, 2, 3); }).rel_error < 1e-8);
  CHECK(check_gradients({seq}, [&] { return ops::select_token(seq, 0); }).rel_error < 1e-8);

  auto q = leaf({2, 5, 8}, rng), k = leaf({2, 5, 8}, rng), v = leaf({2, 5, 8}, rng);
  CHECK(check_gradients({q, k, v}, [&] { return ops::multi_head_attention(q, k, v, 2); }).rel_error < 1e-6);
}

TEST_CASE("layer norm output is standardized before the affine step") {
  Rng rng(14);
  auto x = Var<double>(random_tensor<double>({3, 5, 16}, rng, -4, 7));
  auto out = ops::layer_norm(x, Var<double>(Tensor<double>({16}, 1.0)), Var<double>(Tensor<double>({16})));
  for (int64_t t = 0; t < 15; ++t) {
    double mean = 0, var = 0;
    for (int64_t c = 0; c < 16; ++c) mean += out.value()[t * 16 + c];
    mean /= 16;
    for (int64_t c = 0; c < 16; ++c) var += std::pow(out.value()[t * 16 + c] - mean, 2);
    var /= 16;
    CHECK(mean == doctest::Approx(0).epsilon(1e-12).scale(1));
    CHECK(var == doctest::Approx(1).epsilon(1e-4));
  }
}

TEST_CASE("gelu asymptotics") {
  CHECK(ops::gelu_value(0.0) == 0.0);
  CHECK(ops::gelu_value(20.0) == doctest::Approx(20.0).epsilon(1e-12));
  CHECK(std::abs(ops::gelu_value(-20.0)) < 1e-12);
}

TEST_CASE("max pool picks the window maximum") {
  Rng rng(15);
  Tensor<float> t = random_tensor<float>({1, 2, 16, 8}, rng);
  auto out = ops::max_pool(Var<float>(t), 4, 4).value();
  REQUIRE(out.shape() == Shape{1, 2, 4, 2});
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t oy = 0; oy < 4; ++oy)
      for (int64_t ox = 0; ox < 2; ++ox) {
        float m = -1e30f;
        for (int64_t y = 0; y < 4; ++y)
          for (int64_t x = 0; x < 4; ++x) m = std::max(m, t.at({0, c, oy * 4 + y, ox * 4 + x}));
        CHECK(out.at({0, c, oy, ox}) == m);
      }
  CHECK_THROWS_AS(ops::max_pool(Var<float>(t), 3, 4), ConfigError);
}

TEST_CASE("bilinear upsampling uses half-pixel centres") {
  // 1-D 2 -> 4 with align_corners=false: sources at -0.25, 0.25, 0.75, 1.25.
  Tensor<double> t({1, 1, 1, 2}, std::vector<double>{0.0, 4.0});
  auto out = ops::upsample_bilinear(Var<double>(t), 1, 4).value();
  CHECK(out[0] == doctest::Approx(0.0));
  CHECK(out[1] == doctest::Approx(1.0));
  CHECK(out[2] == doctest::Approx(3.0));
  CHECK(out[3] == doctest::Approx(4.0));
}

TEST_CASE("no graph is recorded under NoGradGuard") {
  Rng rng(16);
  auto x = leaf({2, 3}, rng);
  NoGradGuard guard;
  auto y = ops::relu(x);
  CHECK_FALSE(y.requires_grad());
}
