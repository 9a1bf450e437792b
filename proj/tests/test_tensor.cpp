#include <doctest.h>

#include "encap/gradcheck.hpp"
#include "encap/ops.hpp"
#include "test_support.hpp"

using namespace encap;
using testing_support::randn;

TEST_CASE("construction checks extents") {
  auto t = Tensor::from({1, 2, 3, 4, 5, 6}, {2, 3});
  CHECK(t.numel() == 6);
  CHECK(t.at({1, 2}) == 6);
  CHECK_THROWS_AS(Tensor::from({1, 2, 3}, {2, 2}), ShapeError);
  CHECK_THROWS_AS(Tensor::zeros({0, 2}), ShapeError);
}

TEST_CASE("backward of sum gives ones, of <x,x> gives 2x") {
  auto x = Tensor::from({1, -2, 3}, {3});
  x.set_requires_grad();
  sum(x).backward();
  CHECK(x.grad().to_vector() == std::vector<double>{1, 1, 1});
  x.zero_grad();
  sum(x * x).backward();
  CHECK(x.grad().to_vector() == std::vector<double>{2, -4, 6});
}

TEST_CASE("backward requires a scalar and a live graph") {
  auto x = Tensor::from({1, 2}, {2});
  x.set_requires_grad();
  auto y = x * x;
  CHECK_THROWS_AS(y.backward(), ContractError);
  auto l = sum(y);
  l.backward({.retain_graph = true});
  l.backward();
  CHECK(x.grad().to_vector() == std::vector<double>{4, 8});
  CHECK_THROWS_AS(l.backward(), ContractError);
}

TEST_CASE("shared subexpressions accumulate once per path") {
  auto x = Tensor::from({3}, {1});
  x.set_requires_grad();
  auto y = x * x;
  auto z = y + y * x;  // x^2 + x^3
  sum(z).backward();
  CHECK(x.grad().item() == doctest::Approx(2 * 3 + 3 * 9));
}

TEST_CASE("no-grad scope records nothing") {
  auto x = Tensor::from({1, 2}, {2});
  x.set_requires_grad();
  Tensor y;
  {
    NoGradGuard g;
    y = x * x;
  }
  CHECK(y.is_leaf());
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("anomaly mode names the op producing a non-finite value") {
  auto x = Tensor::from({0.0}, {1});
  AnomalyGuard a;
  try {
    (void)div(Tensor::from({1.0}, {1}), x);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(e.op() == "div");
  }
}

TEST_CASE("dtype conversion round trip") {
  auto x = Tensor::from({0.5, 1.25}, {2});
  auto f = x.to(DType::f32);
  CHECK(f.dtype() == DType::f32);
  CHECK(f.to(DType::f64).to_vector() == x.to_vector());
}
