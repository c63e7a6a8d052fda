#include <cmath>
#include <random>

#include "doctest.h"
#include "hlora/tensor.hpp"

using namespace hlora;

TEST_CASE("matmul against identity") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor out = matmul(a, eye);
  CHECK(out.values() == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("softmax symmetry") {
  Tensor x = Tensor::from({1, 2}, {0.0, 0.0});
  Tensor s = softmax_rows(x);
  CHECK(s.values()[0] == doctest::Approx(0.5));
  CHECK(s.values()[1] == doctest::Approx(0.5));
}

TEST_CASE("l1 norm definition") {
  Tensor x = Tensor::from({2}, {0.5, -1.0});
  CHECK(l1_norm(x).item() == doctest::Approx(1.5));
}

TEST_CASE("shape mismatch names both shapes") {
  Tensor a = Tensor::from({2, 3}, std::vector<double>(6, 1.0));
  Tensor b = Tensor::from({2, 3}, std::vector<double>(6, 1.0));
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"),
                       std::invalid_argument);
}

TEST_CASE("backward of x*x at 3") {
  Tensor x = Tensor::scalar(3.0, true);
  backward(mul(x, x));
  CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("two backward sweeps accumulate additively") {
  Tensor x = Tensor::scalar(3.0, true);
  Tensor loss = mul(x, x);
  backward(loss);
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(12.0));
}

TEST_CASE("masked path carries zero gradient") {
  Tensor x = Tensor::from({2}, {5.0, 7.0}, true);
  Tensor m = Tensor::from({2}, {1.0, 0.0});
  backward(sum(mul(x, m)));
  CHECK(x.grad() == std::vector<double>{1.0, 0.0});
}

TEST_CASE("non-scalar loss rejected") {
  Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  CHECK_THROWS_AS(backward(x), std::invalid_argument);
}

TEST_CASE("gradient accumulation equals gradient of summed losses") {
  std::mt19937_64 rng(11);
  Tensor x = Tensor::randn({3, 3}, rng, 1.0, true);
  Tensor y = Tensor::randn({3, 3}, rng, 1.0);
  backward(sum(mul(x, y)));
  backward(mean(matmul(x, y)));
  auto acc = x.grad();

  Tensor x2 = x.clone();
  x2.set_requires_grad(true);
  backward(add(sum(mul(x2, y)), mean(matmul(x2, y))));
  auto joint = x2.grad();
  for (std::size_t i = 0; i < acc.size(); ++i)
    CHECK(acc[i] == doctest::Approx(joint[i]).epsilon(1e-12));
}

TEST_CASE("finite differences: quadratic") {
  Tensor x = Tensor::scalar(3.0, true);
  double err = finite_difference_check([&] { return mul(x, x); }, x, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("finite differences: constant function") {
  Tensor x = Tensor::scalar(3.0, true);
  Tensor c = Tensor::scalar(2.0);
  double err = finite_difference_check([&] { return scale(c, 1.0); }, x, 1e-5);
  CHECK(err == 0.0);
}

TEST_CASE("finite differences: tiny two-layer net cross-entropy") {
  std::mt19937_64 rng(5);
  Tensor w1 = Tensor::randn({4, 6}, rng, 0.5, true);
  Tensor w2 = Tensor::randn({6, 5}, rng, 0.5, true);
  Tensor x = Tensor::randn({3, 4}, rng, 1.0);
  std::vector<int> targets{0, 3, 2};
  auto f = [&] {
    return cross_entropy(matmul(silu(matmul(x, w1)), w2), targets);
  };
  CHECK(finite_difference_check(f, w1, 1e-5) < 1e-4);
  CHECK(finite_difference_check(f, w2, 1e-5) < 1e-4);
}

TEST_CASE("finite differences: every primitive on randomized small tensors") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 3; ++trial) {
    Tensor a = Tensor::randn({4, 5}, rng, 1.0, true);
    Tensor b = Tensor::randn({5, 4}, rng, 1.0);
    Tensor c = Tensor::randn({4, 5}, rng, 1.0);
    Tensor v = Tensor::randn({5}, rng, 1.0);
    std::vector<int> idx{1, 0, 3, 2};
    std::vector<int> ids{2, 0, 1, 3};
    auto check = [&](const std::function<Tensor()>& f) {
      CHECK(finite_difference_check(f, a, 1e-5) < 1e-4);
    };
    check([&] { return sum(matmul(a, b)); });
    check([&] { return mean(add(a, c)); });
    check([&] { return sum(sub(a, c)); });
    check([&] { return sum(mul(a, c)); });
    check([&] { return sum(scale(a, 1.7)); });
    check([&] { return sum(add_rowvec(a, v)); });
    check([&] { return sum(col_scale(a, v)); });
    check([&] { return sum(silu(a)); });
    check([&] { return sum(exp(scale(a, 0.3))); });
    check([&] { return mean(mul(softmax_rows(a), c)); });
    check([&] { return mean(mul(log_softmax_rows(a), c)); });
    check([&] { return mean(mul(causal_softmax_rows(a), c)); });
    check([&] { return mean(mul(layer_norm_rows(a), c)); });
    check([&] { return sum(transpose(a)); });
    check([&] { return sum(slice_rows(a, 1, 3)); });
    check([&] { return sum(slice_cols(a, 0, 2)); });
    check([&] { return sum(concat_cols({a, c})); });
    check([&] { return sum(gather_rows(a, idx)); });
    check([&] { return sum(embed_rows(a, ids)); });
    check([&] { return cross_entropy(a, idx); });
    check([&] { return sum(scalar_mul(a, Tensor::scalar(0.8, false))); });
  }
}

TEST_CASE("col_scale gradient w.r.t. the diagonal vector") {
  std::mt19937_64 rng(13);
  Tensor a = Tensor::randn({4, 5}, rng, 1.0);
  Tensor v = Tensor::randn({5}, rng, 1.0, true);
  CHECK(finite_difference_check([&] { return sum(col_scale(a, v)); }, v, 1e-5) <
        1e-4);
}

TEST_CASE("clip and minimum subgradients") {
  Tensor r = Tensor::scalar(1.5, true);
  backward(clip(r, 0.8, 1.2));
  CHECK(r.grad()[0] == 0.0);

  Tensor r2 = Tensor::scalar(1.0, true);
  backward(clip(r2, 0.8, 1.2));
  CHECK(r2.grad()[0] == 1.0);

  // ties route gradient to the first operand
  Tensor a = Tensor::scalar(2.0, true);
  Tensor b = Tensor::scalar(2.0, true);
  backward(minimum(a, b));
  CHECK(a.grad()[0] == 1.0);
  CHECK(b.grad()[0] == 0.0);
}

TEST_CASE("cross entropy ignores -1 targets") {
  Tensor logits = Tensor::from({2, 3}, {10, 0, 0, 0, 10, 0});
  double only_first = cross_entropy(logits, {0, -1}).item();
  Tensor row = Tensor::from({1, 3}, {10, 0, 0});
  CHECK(only_first == doctest::Approx(cross_entropy(row, {0}).item()));
  CHECK_THROWS_AS(cross_entropy(logits, {-1, -1}), std::invalid_argument);
}

TEST_CASE("causal softmax rows sum to one over the prefix") {
  std::mt19937_64 rng(3);
  Tensor a = Tensor::randn({5, 5}, rng, 2.0);
  Tensor p = causal_softmax_rows(a);
  for (std::size_t i = 0; i < 5; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
      if (j > i) CHECK(p(i, j) == 0.0);
      row += p(i, j);
    }
    CHECK(row == doctest::Approx(1.0));
  }
}

TEST_CASE("zero-extent tensors rejected") {
  CHECK_THROWS_AS(Tensor::from({0, 2}, {}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor::zeros({3, 0}), std::invalid_argument);
}
