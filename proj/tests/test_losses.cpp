#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "cvcorr/grad_check.hpp"
#include "cvcorr/losses.hpp"

using namespace cvcorr;
using D = Tensor<double>;

TEST_CASE("bce of a constant-half prediction is ln 2") {
  for (int n : {1, 4, 33}) {
    D pred({n, n}, 0.5);
    D gt({n, n}, 0.0);
    for (int i = 0; i < n; ++i) gt(i, i) = 1.0;  // any gt pattern works at p=0.5
    CHECK(std::abs(bce(pred, gt).item() - std::log(2.0)) <= 1e-6);
  }
}

TEST_CASE("bce hand value") {
  // -(log 0.8 + log 0.6)/2
  auto pred = D::from({2}, {0.8, 0.4});
  auto gt = D::from({2}, {1.0, 0.0});
  CHECK(bce(pred, gt).item() == doctest::Approx(-(std::log(0.8) + std::log(0.6)) / 2).epsilon(1e-12));
  CHECK(bce(pred, gt).item() == doctest::Approx(0.36698458754010023).epsilon(1e-9));
}

TEST_CASE("bce is finite at saturated predictions") {
  auto pred = D::from({2}, {0.0, 1.0});
  auto gt = D::from({2}, {1.0, 0.0});
  const double v = bce(pred, gt).item();
  CHECK(std::isfinite(v));
  CHECK(v == doctest::Approx(-std::log(1e-12)));
}

TEST_CASE("dice of a perfect binary match is exactly zero") {
  D m({8, 8}, 0.0);
  m(2, 3) = 1.0;
  m(2, 4) = 1.0;
  m(3, 3) = 1.0;
  CHECK(dice(m, m).item() == 0.0);
}

TEST_CASE("dice of two empty masks is exactly zero") {
  D z({8, 8}, 0.0);
  CHECK(dice(z, z).item() == 0.0);
}

TEST_CASE("dice of disjoint masks approaches one") {
  D a({4, 4}, 0.0), b({4, 4}, 0.0);
  a(0, 0) = 1.0;
  b(3, 3) = 1.0;
  CHECK(dice(a, b).item() == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("composite mask loss frozen value") {
  auto pred = D::from({2}, {0.8, 0.4});
  auto gt = D::from({2}, {1.0, 0.0});
  // bce = 0.36698459; dice = 1 - (1.6+1e-6)/(2.2+1e-6) = 0.27272686...
  const double total = mask_loss(pred, gt, 5.0).item();
  CHECK(std::abs(total - 1.7306) <= 1e-4);
}

TEST_CASE("total objective is linear in each lambda") {
  std::mt19937_64 rng(23);
  auto pred = cvcorr::detail::random_tensor<double>({6, 6}, rng, 0.05, 0.95);
  auto gt = cvcorr::detail::random_tensor<double>({6, 6}, rng, 0.0, 1.0);
  auto aux_pred = cvcorr::detail::random_tensor<double>({6, 6}, rng, 0.05, 0.95);
  auto cyc_pred = cvcorr::detail::random_tensor<double>({6, 6}, rng, 0.05, 0.95);
  auto src = cvcorr::detail::random_tensor<double>({6, 6}, rng, 0.0, 1.0);

  auto total = [&](double l_dice, double l_aux, double l_cycle, double l_dc) {
    auto t = mask_loss(pred, gt, l_dice);
    t = add(t, mul_scalar(aux_loss<double>({aux_pred}, gt, l_dice), l_aux));
    t = add(t, mul_scalar(cycle_loss(cyc_pred, src, l_dc), l_cycle));
    return t.item();
  };

  // second difference in each lambda vanishes
  for (int which = 0; which < 4; ++which) {
    double v[3];
    for (int s = 0; s < 3; ++s) {
      double l[4] = {5.0, 1.0, 10.0, 0.0};
      l[which] = 2.0 * s;  // 0, 2, 4
      v[s] = total(l[0], l[1], l[2], l[3]);
    }
    CHECK(std::abs((v[2] - v[1]) - (v[1] - v[0])) <= 1e-10);
  }
}

TEST_CASE("losses are invariant under a shared pixel permutation") {
  std::mt19937_64 rng(29);
  auto pred = cvcorr::detail::random_tensor<double>({5, 5}, rng, 0.05, 0.95);
  auto gt = cvcorr::detail::random_tensor<double>({5, 5}, rng, 0.0, 1.0);
  std::vector<int> perm(25);
  for (int i = 0; i < 25; ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  D pred2({5, 5}), gt2({5, 5});
  for (int i = 0; i < 25; ++i) {
    pred2.ptr()[i] = pred.ptr()[perm[i]];
    gt2.ptr()[i] = gt.ptr()[perm[i]];
  }
  CHECK(bce(pred2, gt2).item() == doctest::Approx(bce(pred, gt).item()).epsilon(1e-12));
  CHECK(dice(pred2, gt2).item() == doctest::Approx(dice(pred, gt).item()).epsilon(1e-12));
}

TEST_CASE("aux loss averages over layers") {
  std::mt19937_64 rng(31);
  auto a = cvcorr::detail::random_tensor<double>({4, 4}, rng, 0.1, 0.9);
  auto b = cvcorr::detail::random_tensor<double>({4, 4}, rng, 0.1, 0.9);
  auto gt = cvcorr::detail::random_tensor<double>({4, 4}, rng, 0.0, 1.0);
  const double la = mask_loss(a, gt, 5.0).item();
  const double lb = mask_loss(b, gt, 5.0).item();
  CHECK(aux_loss<double>({a, b}, gt, 5.0).item() == doctest::Approx(0.5 * (la + lb)));
  CHECK(aux_loss<double>({a}, gt, 5.0).item() == doctest::Approx(la));
}

TEST_CASE("bce gradient flows into both arguments") {
  auto res = grad_check<double>(
      [](std::vector<D>& in) { return bce(in[0], in[1]); },
      {D::from({4}, {0.3, 0.7, 0.5, 0.9}), D::from({4}, {0.2, 0.8, 0.4, 0.6})});
  CAPTURE(res.max_rel_err);
  CHECK(res.ok);
}

TEST_CASE("dice gradient flows into both arguments") {
  auto res = grad_check<double>(
      [](std::vector<D>& in) { return dice(in[0], in[1]); },
      {D::from({4}, {0.3, 0.7, 0.5, 0.9}), D::from({4}, {0.2, 0.8, 0.4, 0.6})});
  CAPTURE(res.max_rel_err);
  CHECK(res.ok);
}

TEST_CASE("full composite gradient check") {
  std::mt19937_64 rng(37);
  auto pred = cvcorr::detail::random_tensor<double>({3, 3}, rng, 0.1, 0.9);
  auto aux = cvcorr::detail::random_tensor<double>({3, 3}, rng, 0.1, 0.9);
  auto cyc = cvcorr::detail::random_tensor<double>({3, 3}, rng, 0.1, 0.9);
  auto gt = cvcorr::detail::random_tensor<double>({3, 3}, rng, 0.0, 1.0);
  auto src = cvcorr::detail::random_tensor<double>({3, 3}, rng, 0.0, 1.0);
  auto res = grad_check<double>(
      [](std::vector<D>& in) {
        auto t = mask_loss(in[0], in[3], 5.0);
        t = add(t, aux_loss<double>({in[1]}, in[3], 5.0));
        t = add(t, mul_scalar(cycle_loss(in[2], in[4], 5.0), 10.0));
        return t;
      },
      {pred, aux, cyc, gt, src});
  CAPTURE(res.max_rel_err);
  CHECK(res.ok);
}

TEST_CASE("cycle loss with zero dice weight is plain bce") {
  std::mt19937_64 rng(41);
  auto p = cvcorr::detail::random_tensor<double>({4, 4}, rng, 0.1, 0.9);
  auto s = cvcorr::detail::random_tensor<double>({4, 4}, rng, 0.0, 1.0);
  CHECK(cycle_loss(p, s, 0.0).item() == bce(p, s).item());
  CHECK(cycle_loss(p, s, 5.0).item() ==
        doctest::Approx(bce(p, s).item() + 5.0 * dice(p, s).item()));
}
