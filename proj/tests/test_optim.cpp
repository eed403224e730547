#include <doctest.h>

#include <cmath>

#include "cmal/optim.hpp"

using namespace cmal;

TEST_CASE("first Adam step moves each coordinate by lr against the gradient sign") {
  NamedParameters params{{"x", Tensor::matrix(1, 2, {1.0, -1.0}, true)}};
  Adam adam(params, AdamConfig{.lr = 0.1, .clip_norm = 0.0});
  Tensor& x = params[0].second;
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(mul(x, x)));
  }
  adam.step();
  CHECK(x[0] == doctest::Approx(0.9));
  CHECK(x[1] == doctest::Approx(-0.9));
  CHECK(adam.steps() == 1);
  CHECK(adam.last_grad_norm() == doctest::Approx(std::sqrt(8.0)));
}

TEST_CASE("Adam minimizes a quadratic") {
  NamedParameters params{{"x", Tensor::matrix(1, 3, {2.0, -3.0, 0.5}, true)}};
  Adam adam(params, AdamConfig{.lr = 0.05});
  Tensor& x = params[0].second;
  const Tensor target = Tensor::matrix(1, 3, {0.5, 0.25, -1.0});
  for (int i = 0; i < 2000; ++i) {
    x.zero_grad();
    Tape tape;
    TapeScope scope(tape);
    const Tensor d = sub(x, target);
    tape.backward(sum(mul(d, d)));
    adam.step();
  }
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(x[i] - target[i]) < 0.01);
}

TEST_CASE("warmup then inverse square root decay") {
  NamedParameters params{{"x", Tensor::matrix(1, 1, {0.0}, true)}};
  Adam adam(params, AdamConfig{.lr = 1.0, .schedule = LrSchedule::WarmupInvSqrt, .warmup_steps = 4});
  CHECK(adam.current_lr() == doctest::Approx(0.25));
  for (int i = 0; i < 3; ++i) adam.step();
  CHECK(adam.current_lr() == doctest::Approx(0.75));
  adam.step();
  CHECK(adam.current_lr() == doctest::Approx(1.0));
  for (int i = 0; i < 12; ++i) adam.step();
  CHECK(adam.current_lr() == doctest::Approx(0.5));
}

TEST_CASE("gradient clipping bounds the update direction norm") {
  NamedParameters params{{"x", Tensor::matrix(1, 2, {3.0, 4.0}, true)}};
  Adam adam(params, AdamConfig{.lr = 0.1, .clip_norm = 1.0});
  Tensor& x = params[0].second;
  Tape tape;
  TapeScope scope(tape);
  tape.backward(scale(sum(mul(x, x)), 100.0));
  adam.step();
  CHECK(adam.last_grad_norm() == doctest::Approx(1000.0));
  CHECK(x[0] == doctest::Approx(2.9));
}
