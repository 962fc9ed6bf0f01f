#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cvcorr/grad_check.hpp"
#include "cvcorr/tensor.hpp"

using namespace cvcorr;
using D = Tensor<double>;

TEST_CASE("construction and shape checks") {
  D t({2, 3}, 0.5);
  CHECK(t.size() == 6);
  CHECK(t(1, 2) == 0.5);
  CHECK_THROWS_AS(D::from({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
  CHECK_THROWS_AS(D::scalar(1.0).item() + D({2}, 0.0).item(), UsageError);
}

TEST_CASE("elementwise forward values") {
  auto a = D::from({2, 2}, {1, 2, 3, 4});
  auto b = D::from({2, 2}, {4, 3, 2, 1});
  auto s = add(a, b);
  for (int i = 0; i < 4; ++i) CHECK(s.ptr()[i] == 5.0);
  auto d = div(a, b);
  CHECK(d(0, 0) == doctest::Approx(0.25));
  auto m = mul(a, D::scalar(2.0));
  CHECK(m(1, 1) == 8.0);
  // scalar on the left broadcasts too
  auto m2 = mul(D::scalar(2.0), a);
  CHECK(m2(1, 1) == 8.0);
  CHECK_THROWS_AS(add(a, D({3, 2}, 0.0)), ShapeError);
}

TEST_CASE("sigmoid, log, relu, gelu reference points") {
  auto x = D::from({5}, {0.0, 1.0, -1.0, 30.0, -30.0});
  auto y = sigmoid(x);
  CHECK(y(0) == doctest::Approx(0.5));
  CHECK(y(1) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
  CHECK(y(3) == doctest::Approx(1.0));
  CHECK(y(4) == doctest::Approx(0.0));
  CHECK(std::isfinite(y(4)));

  auto l = log_clamped(D::from({3}, {1.0, std::exp(1.0), 0.0}), 1e-12);
  CHECK(l(0) == doctest::Approx(0.0));
  CHECK(l(1) == doctest::Approx(1.0));
  CHECK(l(2) == doctest::Approx(std::log(1e-12)));  // clamped, finite

  auto r = relu(D::from({3}, {-2.0, 0.0, 3.0}));
  CHECK(r(0) == 0.0);
  CHECK(r(2) == 3.0);

  // gelu(0)=0, gelu large ~ identity, gelu(-large) ~ 0
  auto g = gelu(D::from({3}, {0.0, 10.0, -10.0}));
  CHECK(g(0) == 0.0);
  CHECK(g(1) == doctest::Approx(10.0));
  CHECK(g(2) == doctest::Approx(0.0));
}

TEST_CASE("matmul hand values") {
  auto a = D::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto eye = D::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto p = matmul(a, eye);
  for (int i = 0; i < 6; ++i) CHECK(p.ptr()[i] == a.ptr()[i]);
  auto b = D::from({3, 2}, {7, 8, 9, 10, 11, 12});
  auto c = matmul(a, b);
  CHECK(c(0, 0) == 58.0);
  CHECK(c(0, 1) == 64.0);
  CHECK(c(1, 0) == 139.0);
  CHECK(c(1, 1) == 154.0);
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
}

TEST_CASE("shape ops round-trip") {
  auto a = D::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto r = reshape(a, {3, 2});
  CHECK(r(2, 1) == 6.0);
  CHECK_THROWS_AS(reshape(a, {4, 2}), ShapeError);
  auto t = transpose(a);
  CHECK(t.dim(0) == 3);
  CHECK(t(0, 1) == 4.0);
  auto s = slice_rows(a, 1, 2);
  CHECK(s.dim(0) == 1);
  CHECK(s(0, 0) == 4.0);
  auto cat = concat_rows<double>({slice_rows(a, 0, 1), slice_rows(a, 1, 2)});
  for (int i = 0; i < 6; ++i) CHECK(cat.ptr()[i] == a.ptr()[i]);
}

TEST_CASE("backward of sum is ones") {
  auto x = D::from({3}, {1.0, 2.0, 3.0}, true);
  Tape<double> tape;
  auto loss = sum_all(x);
  tape.backward(loss);
  for (int i = 0; i < 3; ++i) CHECK(x.grad()[i] == 1.0);
}

TEST_CASE("backward of sum(x*x) is 2x") {
  auto x = D::from({2}, {1.0, 2.0}, true);
  Tape<double> tape;
  auto loss = sum_all(mul(x, x));
  tape.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("shared subexpression accumulates like unrolled graph") {
  // y = s + s where s = sum(x); grad x should be 2 everywhere.
  auto x = D::from({4}, {0.5, -1.0, 2.0, 3.0}, true);
  {
    Tape<double> tape;
    auto s = sum_all(x);
    auto y = add(s, s);
    tape.backward(y);
    for (int i = 0; i < 4; ++i) CHECK(x.grad()[i] == 2.0);
  }
  // Same value from two independent constructions.
  auto x2 = D::from({4}, {0.5, -1.0, 2.0, 3.0}, true);
  {
    Tape<double> tape;
    auto y = add(sum_all(x2), sum_all(x2));
    tape.backward(y);
    for (int i = 0; i < 4; ++i) CHECK(x2.grad()[i] == 2.0);
  }
}

TEST_CASE("repeated backward accumulates leaf grads, intermediates reset") {
  auto x = D::from({2}, {3.0, 4.0}, true);
  Tape<double> tape;
  auto y = mul(x, x);
  auto loss = sum_all(y);
  tape.backward(loss);
  tape.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(12.0));  // 2 * 2x
  CHECK(x.grad()[1] == doctest::Approx(16.0));
}

TEST_CASE("no tape means no recording") {
  auto x = D::from({2}, {1.0, 2.0}, true);
  auto y = mul(x, x);  // outside any tape
  CHECK_FALSE(y.requires_grad());
  Tape<double> tape;
  auto z = mul(x, x);
  CHECK(z.requires_grad());
  CHECK(tape.size() == 1);
}

TEST_CASE("tapes nest and restore") {
  CHECK(Tape<double>::active() == nullptr);
  {
    Tape<double> outer;
    CHECK(Tape<double>::active() == &outer);
    {
      Tape<double> inner;
      CHECK(Tape<double>::active() == &inner);
    }
    CHECK(Tape<double>::active() == &outer);
  }
  CHECK(Tape<double>::active() == nullptr);
}

TEST_CASE("forward is bit-identical across repeats") {
  std::mt19937_64 rng(7);
  auto a = cvcorr::detail::random_tensor<double>({8, 8}, rng);
  auto b = cvcorr::detail::random_tensor<double>({8, 8}, rng);
  auto first = matmul(sigmoid(a), b);
  for (int rep = 0; rep < 3; ++rep) {
    auto again = matmul(sigmoid(a), b);
    for (int64_t i = 0; i < first.size(); ++i) CHECK(first.ptr()[i] == again.ptr()[i]);
  }
}

TEST_CASE("nan check mode flags division blowup") {
  set_nan_check(true);
  auto a = D::from({2}, {1.0, 1.0});
  auto z = D::from({2}, {0.0, 1.0});
  CHECK_THROWS_AS(div(a, z), NumericError);
  set_nan_check(false);
  auto q = div(a, z);  // silent inf when the mode is off
  CHECK(std::isinf(q(0)));
}

TEST_CASE("gradient of clamped log region is zero") {
  auto x = D::from({2}, {0.0, 2.0}, true);
  Tape<double> tape;
  auto loss = sum_all(log_clamped(x, 1e-12));
  tape.backward(loss);
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == doctest::Approx(0.5));
}

// Finite-difference checks over every registered op, several seeds each.
TEST_CASE("FD oracle: all core ops at 1e-6 relative tolerance") {
  for (const auto& chk : op_checks()) {
    CAPTURE(chk.name);
    for (uint64_t seed = 1; seed <= 10; ++seed) {
      CAPTURE(seed);
      auto res = chk.run(seed);
      CAPTURE(res.max_rel_err);
      CAPTURE(res.worst);
      CHECK(res.ok);
    }
  }
}

TEST_CASE("grad_check rejects a wrong gradient") {
  // Deliberately broken backward: forward x^2 but gradient reported as x.
  auto bad = [](std::vector<Tensor<double>>& in) {
    auto& x = in[0];
    Tensor<double> out(x.shape());
    for (int64_t i = 0; i < x.size(); ++i) out.ptr()[i] = x.ptr()[i] * x.ptr()[i];
    if (Tape<double>::active() && x.requires_grad()) {
      out.set_requires_grad(true);
      auto xn = x.node(), on = out.node();
      Tape<double>::active()->record("bad_square", on, [xn, on] {
        xn->ensure_grad();
        for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[i];  // missing 2x
      });
    }
    return sum_all(out);
  };
  auto x = D::from({3}, {1.0, 2.0, 3.0});
  auto res = grad_check<double>(bad, {x});
  CHECK_FALSE(res.ok);
}
