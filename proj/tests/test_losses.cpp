#include "doctest.h"
#include "hat/losses.hpp"
#include "test_util.hpp"

using namespace hat;
using hat::test::check_gradients;
using hat::test::random_tensor;

TEST_CASE("id loss worked values") {
  for (double eps : {0.0, 0.1, 0.5}) {
    Var<double> uniform(Tensor<double>({3, 4}, 0.25));
    CHECK(id_loss(uniform, {0, 1, 3}, eps).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  Var<double> two(Tensor<double>({1, 2}, std::vector<double>{std::log(0.9), std::log(0.1)}));
  CHECK(id_loss(two, {0}, 0.1).item() == doctest::Approx(0.21522).epsilon(1e-4));
  CHECK(id_loss(two, {0}, 0.1).item() ==
        doctest::Approx(-(0.95 * std::log(0.9) + 0.05 * std::log(0.1))).epsilon(1e-12));
}

TEST_CASE("id loss without smoothing is cross-entropy") {
  Rng rng(1);
  Tensor<double> z = random_tensor<double>({5, 7}, rng, -3, 3);
  std::vector<int64_t> labels{0, 6, 2, 2, 4};
  double ref = 0;
  for (int64_t i = 0; i < 5; ++i) {
    double s = 0;
    for (int64_t j = 0; j < 7; ++j) s += std::exp(z.at({i, j}));
    ref -= z.at({i, labels[i]}) - std::log(s);
  }
  CHECK(std::abs(id_loss(Var<double>(z), labels, 0.0).item() - ref / 5) < 1e-7);
}

TEST_CASE("id loss falls as the true-class probability rises") {
  double last = 1e9;
  for (double p : {0.2, 0.4, 0.6, 0.8, 0.95}) {
    const double other = (1 - p) / 3;
    Var<double> z(Tensor<double>({1, 4}, std::vector<double>{std::log(p), std::log(other), std::log(other), std::log(other)}));
    const double l = id_loss(z, {0}, 0.1).item();
    CHECK(l >= 0);
    CHECK(l < last);
    last = l;
  }
  CHECK_THROWS_AS(id_loss(Var<double>(Tensor<double>({1, 3})), {3}, 0.1), InputError);
}

TEST_CASE("hinge arithmetic") {
  CHECK(hinge(1.0, 2.0, 0.3) == 0.0);
  CHECK(hinge(2.0, 1.5, 0.3) == doctest::Approx(0.8));
}

TEST_CASE("triplet loss on a separated 1-D batch is zero") {
  Var<double> e(Tensor<double>({4, 1}, std::vector<double>{0, 1, 10, 12}));
  CHECK(triplet_loss(e, {0, 0, 1, 1}, 0.3).item() == 0.0);
}

TEST_CASE("triplet loss needs PK structure") {
  Var<double> e(Tensor<double>({3, 1}, std::vector<double>{0, 1, 2}));
  CHECK_THROWS_AS(triplet_loss(e, {0, 0, 1}, 0.3), SamplingError);
  CHECK_THROWS_AS(triplet_loss(e, {0, 0, 0}, 0.3), SamplingError);
}

TEST_CASE("loss gradients") {
  Rng rng(2);
  Var<double> z(random_tensor<double>({4, 5}, rng, -2, 2), true);
  CHECK(check_gradients({z}, [&] { return id_loss(z, {0, 1, 4, 1}, 0.1); }).rel_error < 1e-6);
  Var<double> e(random_tensor<double>({6, 3}, rng), true);
  const std::vector<int64_t> labels{0, 0, 1, 1, 2, 2};
  auto r = check_gradients({e}, [&] { return triplet_loss(e, labels, 0.8); });
  CHECK(r.analytic_norm > 0);
  CHECK(r.rel_error < 1e-6);
  CHECK(check_gradients({e}, [&] { return triplet_loss(e, labels, 0.8, true); }).rel_error < 1e-6);
}

TEST_CASE("total loss composition and linearity in lambda") {
  Rng rng(3);
  const std::vector<int64_t> labels{0, 0, 1, 1};
  auto head = [&] {
    return HeadLossInput<double>{Var<double>(random_tensor<double>({4, 2}, rng)),
                                 Var<double>(random_tensor<double>({4, 3}, rng))};
  };
  HeadLossInput<double> main = head(), mfe = head();
  std::vector<HeadLossInput<double>> aux{head(), head(), head()};

  LossConfig cfg;
  cfg.lambda = 0;
  auto zero = total_loss<double>(main, aux, std::nullopt, labels, cfg);
  CHECK(zero.report.total == zero.report.id_loss + zero.report.triplet_loss);

  std::vector<double> totals;
  for (double lam : {0.0, 0.5, 1.0}) {
    cfg.lambda = lam;
    auto t = total_loss<double>(main, aux, mfe, labels, cfg);
    const double base = t.report.id_loss + t.report.triplet_loss + t.report.mfe_id_loss + t.report.mfe_triplet_loss;
    CHECK(t.report.total == doctest::Approx(base + lam * t.report.aux_total()).epsilon(1e-12));
    totals.push_back(t.report.total);
  }
  CHECK(totals[2] - totals[1] == doctest::Approx(totals[1] - totals[0]).epsilon(1e-10));

  // Three identical aux heads contributing a each add 1.5a at lambda 0.5.
  std::vector<HeadLossInput<double>> same{aux[0], aux[0], aux[0]};
  cfg.lambda = 0.5;
  auto t = total_loss<double>(main, same, std::nullopt, labels, cfg);
  const double a = t.report.aux_losses[0];
  CHECK(t.report.total - (t.report.id_loss + t.report.triplet_loss) == doctest::Approx(1.5 * a).epsilon(1e-12));
  CHECK(LossConfig{}.lambda == 0.5);
}
