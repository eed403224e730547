#include <doctest.h>

#include <cmath>
#include <random>

#include "cmal/tensor.hpp"

using namespace cmal;

namespace {

Tensor uniform(Shape shape, std::uint64_t seed, double lo = -2.0, double hi = 2.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

void check_close(const Tensor& t, const std::vector<double>& expect, double tol = 1e-12) {
  REQUIRE(t.numel() == expect.size());
  for (std::size_t i = 0; i < expect.size(); ++i) CHECK(t[i] == doctest::Approx(expect[i]).epsilon(tol));
}

}  // namespace

TEST_CASE("matmul by identity and by a permutation") {
  const Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  const Tensor m = Tensor::matrix(2, 2, {1, 2, 3, 4});
  check_close(matmul(eye, m), {1, 2, 3, 4});
  check_close(matmul(Tensor::matrix(2, 2, {1, 0, 0, 0}), Tensor::matrix(2, 2, {0, 1, 1, 0})), {0, 1, 0, 0});
}

TEST_CASE("matmul shape mismatch names both shapes") {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({2, 3});
  try {
    (void)matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
  }
}

TEST_CASE("softmax examples") {
  check_close(softmax(Tensor::matrix(1, 3, {0, 0, 0})), {1.0 / 3, 1.0 / 3, 1.0 / 3});
  const Tensor big = softmax(Tensor::matrix(1, 2, {1000, 0}));
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] >= 0.0);
  CHECK(big[1] < 1e-300);

  const Tensor s = softmax(Tensor::matrix(1, 3, {1, 2, 3}));
  const long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  for (int i = 0; i < 3; ++i) {
    CHECK(s[static_cast<std::size_t>(i)] == doctest::Approx(static_cast<double>(std::exp(i + 1.0L) / z)).epsilon(1e-14));
  }
}

TEST_CASE("softmax rows are positive and sum to one") {
  const Tensor x = uniform({6, 9}, 3, -30, 30);
  const Tensor s = softmax(x.detach());
  for (std::size_t r = 0; r < 6; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 9; ++c) {
      CHECK(s.at(r, c) > 0.0);
      total += s.at(r, c);
    }
    CHECK(std::abs(total - 1.0) <= 1e-12);
  }
}

TEST_CASE("log_softmax matches log of softmax") {
  const Tensor x = uniform({3, 5}, 4).detach();
  const Tensor a = log_softmax(x);
  const Tensor b = softmax(x);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == doctest::Approx(std::log(b[i])).epsilon(1e-12));
}

TEST_CASE("layer_norm examples") {
  const Tensor gain = Tensor::filled({2}, 1.0), bias = Tensor::filled({2}, 0.0);
  check_close(layer_norm(Tensor::matrix(1, 2, {5, 5}), gain, bias), {0, 0});
  const Tensor y = layer_norm(Tensor::matrix(1, 2, {1, 3}), gain, bias);
  const double s = 1.0 / std::sqrt(1.0 + 1e-5);
  check_close(y, {-s, s});
}

TEST_CASE("relu and embedding gather examples") {
  check_close(relu(Tensor::matrix(1, 3, {-1, 0, 2})), {0, 0, 2});
  const Tensor eye = Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const std::vector<std::int32_t> ids{0};
  check_close(embedding_gather(eye, ids), {1, 0, 0});
  const std::vector<std::int32_t> bad{3};
  CHECK_THROWS_AS((void)embedding_gather(eye, bad), std::out_of_range);
}

TEST_CASE("grad_check on simple functions") {
  const Tensor x = uniform({2, 3}, 5);
  CHECK(grad_check([](const Tensor& t) { return sum(t); }, x.clone()) < 1e-9);
  const Tensor w = uniform({2, 3}, 6).detach();
  CHECK(grad_check([&](const Tensor& t) { return sum(mul(softmax(t), w)); }, x.clone()) < 1e-6);
  CHECK_THROWS_AS((void)grad_check([](const Tensor& t) { return t; }, x.clone()), ShapeError);
  CHECK_THROWS_AS((void)grad_check([](const Tensor& t) { return sum(t); }, x.detach()), std::invalid_argument);
}

TEST_CASE("every op passes a finite-difference check") {
  const Tensor a = uniform({3, 4}, 11);
  const Tensor w = uniform({3, 4}, 12).detach();
  const Tensor b = uniform({4, 2}, 13);
  const Tensor v = uniform({4}, 14);
  const Tensor pos = uniform({3, 4}, 15, 0.2, 2.0);
  const Tensor w42 = uniform({3, 2}, 16).detach();
  const std::vector<std::int32_t> ids{1, 2, 0, 2, 1};
  const Tensor w54 = uniform({5, 4}, 17).detach();
  const std::vector<std::int32_t> picks{3, 0, 2};
  constexpr double tol = 1e-5;

  CHECK(grad_check([&](const Tensor& x) { return sum(mul(matmul(x, b.detach()), w42)); }, a.clone()) < tol);
  CHECK(grad_check([&](const Tensor& x) { return sum(mul(matmul(a.detach(), x), w42)); }, b.clone()) < tol);
  CHECK(grad_check([&](const Tensor& x) { return sum(mul(transpose(transpose(x)), w)); }, a.clone()) < tol);
  CHECK(grad_check([&](const Tensor& x) { return sum(mul(add(x, x), w)); }, a.clone()) < tol);
  CHECK(grad_check([&](const Tensor& x) { return sum(mul(add(a.detach(), x), w)); }, v.clone()) < tol);
  CHECK(grad_check([&](const Tensor& x) { return sum(mul(sub(w, x), x)); }, a.clone()) < tol);
  CHECK(grad_check([&](const Tensor& x) { return sum(mul(x, x)); }, a.clone()) < tol);
  CHECK(grad_check([&](const Tensor& x) { return sum(mul(scale(x, 3.0), w)); }, a.clone()) < tol);
  CHECK(grad_check([&](const Tensor& x) { return sum(mul(relu(x), w)); }, a.clone()) < tol);
  CHECK(grad_check([&](const Tensor& x) { return sum(mul(log(x), w)); }, pos.clone()) < tol);
  CHECK(grad_check([&](const Tensor& x) { return sum(mul(exp(x), w)); }, a.clone()) < tol);
  CHECK(grad_check([&](const Tensor& x) { return sum(mul(softmax(x, 0), w)); }, a.clone()) < tol);
  CHECK(grad_check([&](const Tensor& x) { return sum(mul(log_softmax(x, 1), w)); }, a.clone()) < tol);
  CHECK(grad_check([&](const Tensor& x) { return sum(mul(layer_norm(x, v.detach(), v.detach()), w)); }, a.clone()) <
        tol);
  CHECK(grad_check([&](const Tensor& x) { return sum(mul(layer_norm(a.detach(), x, v.detach()), w)); }, v.clone()) <
        tol);
  CHECK(grad_check([&](const Tensor& x) { return sum(mul(embedding_gather(x, ids), w54)); }, a.clone()) < tol);
  CHECK(grad_check([&](const Tensor& x) { return sum(mul(concat({x, x}, 0), concat({w, a.detach()}, 0))); },
                   a.clone()) < tol);
  CHECK(grad_check([&](const Tensor& x) { return sum(mul(slice(x, 0, 1, 2), slice(w, 0, 0, 2))); }, a.clone()) < tol);
  CHECK(grad_check([&](const Tensor& x) { return sum(pick(log_softmax(x), picks)); }, a.clone()) < tol);
  CHECK(grad_check([&](const Tensor& x) { return mean(mul(x, w)); }, a.clone()) < tol);
  CHECK(grad_check([&](const Tensor& x) { return sum(mul(mean_rows(x), mean_rows(w))); }, a.clone()) < tol);
}

TEST_CASE("bias add broadcasts over the last axis only") {
  const Tensor x = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  check_close(add(x, Tensor({3}, {10, 20, 30})), {11, 22, 33, 14, 25, 36});
  CHECK_THROWS_AS((void)add(x, Tensor({2}, {1, 2})), ShapeError);
  CHECK_THROWS_AS((void)mul(x, Tensor::zeros({3, 2})), ShapeError);
}

TEST_CASE("non-finite forward results are errors") {
  CHECK_THROWS_AS((void)log(Tensor::matrix(1, 2, {1.0, 0.0})), NonFiniteError);
  CHECK_THROWS_AS((void)exp(Tensor::matrix(1, 1, {1000.0})), NonFiniteError);
}

TEST_CASE("backward twice on one tape is rejected") {
  Tensor x = uniform({2, 2}, 21);
  Tape tape;
  TapeScope scope(tape);
  const Tensor y = sum(mul(x, x));
  CHECK(tape.size() > 0);
  tape.backward(y);
  CHECK(tape.consumed());
  CHECK_THROWS_AS(tape.backward(y), std::logic_error);
}

TEST_CASE("ops without an active tape are not recorded") {
  Tensor x = uniform({2, 2}, 22);
  Tape tape;
  {
    const Tensor y = sum(mul(x, x));
    CHECK(y.item() > 0.0);
  }
  CHECK(tape.size() == 0);
}

TEST_CASE("dropout at p=0 is the identity and its mask is exact under backward") {
  std::mt19937_64 rng(1);
  const Tensor x = uniform({3, 3}, 23);
  const Tensor y = dropout(x.detach(), 0.0, rng);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
  const Tensor w = uniform({3, 3}, 24).detach();
  CHECK(grad_check(
            [&](const Tensor& t) {
              rng.seed(9);
              return sum(mul(dropout(t, 0.5, rng), w));
            },
            x.clone()) < 1e-8);
}

TEST_CASE("clone is deep and detach drops the gradient flag") {
  Tensor x = Tensor::matrix(1, 2, {1, 2}, true);
  Tensor c = x.clone();
  c.data()[0] = 9;
  CHECK(x[0] == 1);
  CHECK_FALSE(x.detach().requires_grad());
}
