#pragma once

// Finite-difference gradient checking.
//
// The oracle: central differences on the tape-free forward pass,
//   df/dx_i ~ (f(x + h e_i) - f(x - h e_i)) / 2h,
// with h scaled per element. Analytic gradients come from one taped
// backward. Comparison is relative: |a - fd| <= tol * max(1, |a|, |fd|).
//
// A registry of named single-op checks backs the `grad-check` CLI verb;
// each entry perturbs every input element of a small random instance.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cvcorr/nn.hpp"
#include "cvcorr/tensor.hpp"

namespace cvcorr {

struct GradCheckResult {
  bool ok = true;
  double max_rel_err = 0.0;
  std::string worst;  // "input 1, element 17" style location
};

// f maps the inputs to a scalar tensor. Inputs are perturbed in place and
// restored. Every element of every input with requires_grad is checked.
template <typename S, typename F>
GradCheckResult grad_check(F f, std::vector<Tensor<S>> inputs, double tol = 1e-6) {
  // Analytic pass.
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape<S> tape;
    Tensor<S> loss = f(inputs);
    tape.backward(loss);
  }
  std::vector<std::vector<S>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) analytic.push_back(t.grad());

  // FD pass, tape-free.
  const double h_base = std::cbrt(std::numeric_limits<double>::epsilon());
  GradCheckResult res;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& t = inputs[ti];
    t.set_requires_grad(false);
    for (int64_t i = 0; i < t.size(); ++i) {
      const S x0 = t.ptr()[i];
      const double h = h_base * std::max(1.0, std::abs(static_cast<double>(x0)));
      t.ptr()[i] = x0 + static_cast<S>(h);
      const double fp = static_cast<double>(f(inputs).item());
      t.ptr()[i] = x0 - static_cast<S>(h);
      const double fm = static_cast<double>(f(inputs).item());
      t.ptr()[i] = x0;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = static_cast<double>(analytic[ti][static_cast<size_t>(i)]);
      const double rel = std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = "input " + std::to_string(ti) + ", element " + std::to_string(i);
      }
    }
    t.set_requires_grad(true);
  }
  res.ok = res.max_rel_err <= tol;
  return res;
}

// --- registry -------------------------------------------------------------

struct OpCheck {
  std::string name;
  std::function<GradCheckResult(uint64_t seed)> run;
};

namespace detail {

template <typename S>
Tensor<S> random_tensor(std::vector<int> shape, std::mt19937_64& rng, S lo = S(-1), S hi = S(1)) {
  std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
  Tensor<S> t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t.ptr()[i] = static_cast<S>(dist(rng));
  return t;
}

}  // namespace detail

// Reduce any tensor to a scalar with non-uniform weights so every output
// element influences the loss differently (a plain sum can hide transposed
// or permuted gradients).
template <typename S>
Tensor<S> weighted_probe(const Tensor<S>& t, uint64_t salt) {
  Tensor<S> w(t.shape());
  for (int64_t i = 0; i < w.size(); ++i)
    w.ptr()[i] = static_cast<S>(0.25 + hash_unit(hash_combine(salt, static_cast<uint64_t>(i))));
  return sum_all(mul(t, w));
}

// All registered single-op checks at 64-bit. Each returns a result for one
// random instance drawn from `seed`.
inline const std::vector<OpCheck>& op_checks() {
  using S = double;
  static const std::vector<OpCheck> checks = [] {
    std::vector<OpCheck> v;
    auto add_check = [&v](std::string name,
                          std::function<GradCheckResult(uint64_t)> run) {
      v.push_back(OpCheck{std::move(name), std::move(run)});
    };
    auto rng_for = [](uint64_t seed) { return std::mt19937_64(splitmix64(seed ^ 0x9e3779b9)); };

    add_check("add", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto a = detail::random_tensor<S>({3, 4}, rng);
      auto b = detail::random_tensor<S>({3, 4}, rng);
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) { return weighted_probe(add(in[0], in[1]), seed); },
          {a, b});
    });
    add_check("add_scalar_operand", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto a = detail::random_tensor<S>({3, 4}, rng);
      auto b = detail::random_tensor<S>({1}, rng);
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) { return weighted_probe(add(in[0], in[1]), seed); },
          {a, b});
    });
    add_check("sub", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto a = detail::random_tensor<S>({3, 4}, rng);
      auto b = detail::random_tensor<S>({3, 4}, rng);
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) { return weighted_probe(sub(in[0], in[1]), seed); },
          {a, b});
    });
    add_check("mul", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto a = detail::random_tensor<S>({3, 4}, rng);
      auto b = detail::random_tensor<S>({3, 4}, rng);
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) { return weighted_probe(mul(in[0], in[1]), seed); },
          {a, b});
    });
    add_check("mul_by_scalar_operand", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto a = detail::random_tensor<S>({3, 4}, rng);
      auto b = detail::random_tensor<S>({1}, rng, S(0.5), S(2));
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) { return weighted_probe(mul(in[0], in[1]), seed); },
          {a, b});
    });
    add_check("div", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto a = detail::random_tensor<S>({3, 4}, rng);
      auto b = detail::random_tensor<S>({3, 4}, rng, S(0.5), S(2.0));
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) { return weighted_probe(div(in[0], in[1]), seed); },
          {a, b});
    });
    add_check("div_by_scalar_operand", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto a = detail::random_tensor<S>({3, 4}, rng);
      auto b = detail::random_tensor<S>({1}, rng, S(0.5), S(2.0));
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) { return weighted_probe(div(in[0], in[1]), seed); },
          {a, b});
    });
    add_check("add_scalar", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto a = detail::random_tensor<S>({3, 4}, rng);
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) {
            return weighted_probe(add_scalar(in[0], S(0.7)), seed);
          },
          {a});
    });
    add_check("mul_scalar", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto a = detail::random_tensor<S>({3, 4}, rng);
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) {
            return weighted_probe(mul_scalar(in[0], S(-1.3)), seed);
          },
          {a});
    });
    add_check("rsub_scalar", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto a = detail::random_tensor<S>({3, 4}, rng);
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) {
            return weighted_probe(rsub_scalar(S(1), in[0]), seed);
          },
          {a});
    });
    add_check("sigmoid", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto a = detail::random_tensor<S>({4, 5}, rng, S(-3), S(3));
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) { return weighted_probe(sigmoid(in[0]), seed); },
          {a});
    });
    add_check("log", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto a = detail::random_tensor<S>({4, 5}, rng, S(0.05), S(2.0));
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) {
            return weighted_probe(log_clamped(in[0], S(1e-12)), seed);
          },
          {a});
    });
    add_check("relu", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto a = detail::random_tensor<S>({4, 5}, rng);
      // Keep elements away from the kink where FD is one-sided.
      for (int64_t i = 0; i < a.size(); ++i)
        if (std::abs(a.ptr()[i]) < 0.05) a.ptr()[i] += 0.1;
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) { return weighted_probe(relu(in[0]), seed); }, {a});
    });
    add_check("gelu", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto a = detail::random_tensor<S>({4, 5}, rng, S(-2.5), S(2.5));
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) { return weighted_probe(gelu(in[0]), seed); }, {a});
    });
    add_check("sum", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto a = detail::random_tensor<S>({6, 3}, rng);
      return grad_check<S>([](std::vector<Tensor<S>>& in) { return sum_all(in[0]); }, {a});
    });
    add_check("mean", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto a = detail::random_tensor<S>({6, 3}, rng);
      return grad_check<S>([](std::vector<Tensor<S>>& in) { return mean_all(in[0]); }, {a});
    });
    add_check("reshape", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto a = detail::random_tensor<S>({3, 8}, rng);
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) {
            return weighted_probe(reshape(in[0], {4, 6}), seed);
          },
          {a});
    });
    add_check("transpose", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto a = detail::random_tensor<S>({3, 5}, rng);
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) { return weighted_probe(transpose(in[0]), seed); },
          {a});
    });
    add_check("slice_rows", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto a = detail::random_tensor<S>({6, 4}, rng);
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) {
            return weighted_probe(slice_rows(in[0], 1, 4), seed);
          },
          {a});
    });
    add_check("concat_rows", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto a = detail::random_tensor<S>({2, 4}, rng);
      auto b = detail::random_tensor<S>({3, 4}, rng);
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) {
            return weighted_probe(concat_rows<S>({in[0], in[1]}), seed);
          },
          {a, b});
    });
    add_check("matmul", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto a = detail::random_tensor<S>({4, 3}, rng);
      auto b = detail::random_tensor<S>({3, 5}, rng);
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) {
            return weighted_probe(matmul(in[0], in[1]), seed);
          },
          {a, b});
    });
    add_check("add_rowvec", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto x = detail::random_tensor<S>({4, 6}, rng);
      auto b = detail::random_tensor<S>({6}, rng);
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) {
            return weighted_probe(add_rowvec(in[0], in[1]), seed);
          },
          {x, b});
    });
    add_check("conv2d", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto x = detail::random_tensor<S>({2, 6, 6}, rng);
      auto w = detail::random_tensor<S>({3, 2, 3, 3}, rng);
      auto b = detail::random_tensor<S>({3}, rng);
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) {
            return weighted_probe(conv2d(in[0], in[1], in[2], 1, 1), seed);
          },
          {x, w, b});
    });
    add_check("conv2d_strided", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto x = detail::random_tensor<S>({2, 7, 7}, rng);
      auto w = detail::random_tensor<S>({4, 2, 3, 3}, rng);
      auto b = detail::random_tensor<S>({4}, rng);
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) {
            return weighted_probe(conv2d(in[0], in[1], in[2], 2, 1), seed);
          },
          {x, w, b});
    });
    add_check("avg_pool2d", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto x = detail::random_tensor<S>({2, 8, 8}, rng);
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) { return weighted_probe(avg_pool2d(in[0], 2), seed); },
          {x});
    });
    add_check("bilinear_upsample", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto x = detail::random_tensor<S>({2, 4, 4}, rng);
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) {
            return weighted_probe(bilinear_upsample(in[0], 9, 9), seed);
          },
          {x});
    });
    add_check("layer_norm", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto x = detail::random_tensor<S>({5, 8}, rng);
      auto g = detail::random_tensor<S>({8}, rng, S(0.5), S(1.5));
      auto b = detail::random_tensor<S>({8}, rng);
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) {
            return weighted_probe(layer_norm(in[0], in[1], in[2]), seed);
          },
          {x, g, b});
    });
    add_check("softmax_attention", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto q = detail::random_tensor<S>({5, 8}, rng);
      auto k = detail::random_tensor<S>({5, 8}, rng);
      auto vv = detail::random_tensor<S>({5, 8}, rng);
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) {
            return weighted_probe(softmax_attention(in[0], in[1], in[2], 2), seed);
          },
          {q, k, vv});
    });
    add_check("normalize_mask", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto m = detail::random_tensor<S>({8, 8}, rng, S(0.05), S(1.0));
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) {
            return weighted_probe(normalize_mask(in[0], 2), seed);
          },
          {m});
    });
    add_check("pool_masked_feature", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto f = detail::random_tensor<S>({3, 4, 4}, rng);
      auto m = detail::random_tensor<S>({4, 4}, rng, S(0), S(1));
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) {
            return weighted_probe(pool_masked_feature(in[0], in[1]), seed);
          },
          {f, m});
    });
    add_check("cosine_rows", [rng_for](uint64_t seed) {
      auto rng = rng_for(seed);
      auto q = detail::random_tensor<S>({6}, rng, S(0.2), S(1.0));
      auto x = detail::random_tensor<S>({5, 6}, rng, S(0.2), S(1.0));
      return grad_check<S>(
          [seed](std::vector<Tensor<S>>& in) {
            return weighted_probe(cosine_rows(in[0], in[1]), seed);
          },
          {q, x});
    });
    return v;
  }();
  return checks;
}

}  // namespace cvcorr
