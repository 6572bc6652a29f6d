#include <cmath>
#include <random>

#include "aquadiff/gradcheck.hpp"
#include "aquadiff/image.hpp"
#include "aquadiff/ops.hpp"
#include "doctest.h"

using namespace aquadiff;
using ad::Var;

namespace {

Var random_param(ad::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(ad::shape_size(shape));
  for (double& x : v) x = u(rng);
  return Var::parameter(std::move(shape), std::move(v));
}

// Projects onto a fixed random direction so every output element matters.
Var probe(const Var& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  std::vector<double> w(out.size());
  for (double& x : w) x = n(rng);
  return ad::sum(ad::mul(out, Var::constant(out.shape(), std::move(w))));
}

void expect_gradients(const char* name, const std::function<Var()>& f, const NamedParams& params) {
  const auto report = grad_check(f, params);
  INFO(name << "\n" << report.summary());
  CHECK(report.passed);
}

}  // namespace

TEST_CASE("leaf gradients accumulate across backward calls") {
  const Var x = Var::parameter({2}, {1.0, 2.0});
  const Var loss = ad::sum(ad::square(x));
  ad::backward(loss);
  CHECK(x.grad()[0] == 2.0);
  ad::backward(loss);
  CHECK(x.grad()[1] == 8.0);
  Var y = x;
  y.zero_grad();
  CHECK(x.grad()[0] == 0.0);
  CHECK_THROWS(ad::backward(x));
}

TEST_CASE("no-grad guard stops recording") {
  const Var x = Var::parameter({2}, {1.0, 2.0});
  {
    ad::NoGradGuard guard;
    CHECK_FALSE(ad::grad_enabled());
    const Var y = ad::square(x);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.value()[1] == 4.0);
  }
  CHECK(ad::grad_enabled());
  CHECK(ad::square(x).requires_grad());
}

TEST_CASE("constants carry no graph") {
  const Var c = Var::constant({3}, 1.0);
  const Var d = ad::add(c, c);
  CHECK_FALSE(d.requires_grad());
  CHECK(d.node()->parents.empty());
  CHECK_THROWS(Var::constant({2, 2}, std::vector<double>{1.0}));
}

TEST_CASE("elementwise ops") {
  const Var a = random_param({2, 3, 3}, 1);
  const Var b = random_param({2, 3, 3}, 2, 0.5, 1.5);
  const NamedParams p{{"a", a}, {"b", b}};
  expect_gradients("add", [&] { return probe(ad::add(a, b), 10); }, p);
  expect_gradients("sub", [&] { return probe(ad::sub(a, b), 11); }, p);
  expect_gradients("mul", [&] { return probe(ad::mul(a, b), 12); }, p);
  expect_gradients("div", [&] { return probe(ad::div(a, b), 13); }, p);
  expect_gradients("scale", [&] { return probe(ad::scale(a, -2.5), 14); }, p);
  expect_gradients("square", [&] { return probe(ad::square(a), 15); }, p);
  expect_gradients("abs", [&] { return probe(ad::abs(a), 16); }, p);
  expect_gradients("silu", [&] { return probe(ad::silu(a), 17); }, p);
  expect_gradients("relu", [&] { return probe(ad::relu(a), 18); }, p);
  expect_gradients("mean", [&] { return ad::mean(ad::mul(a, a)); }, p);
  expect_gradients("weighted_sum",
                   [&] { return ad::weighted_sum({ad::mean(a), ad::sum(ad::square(b))}, {0.5, 2.0}); }, p);
}

TEST_CASE("layer ops") {
  const Var x = random_param({4, 6, 6}, 3);
  const Var w = random_param({3, 4, 3, 3}, 4);
  const Var b = random_param({3}, 5);
  const NamedParams cp{{"x", x}, {"w", w}, {"b", b}};
  expect_gradients("conv", [&] { return probe(ad::conv2d(x, w, b, 1, 1), 20); }, cp);
  expect_gradients("conv stride", [&] { return probe(ad::conv2d(x, w, b, 2, 1), 21); }, cp);
  expect_gradients("conv circular",
                   [&] { return probe(ad::conv2d(x, w, b, 1, 1, ad::Padding::kCircular), 22); }, cp);

  const Var g = random_param({4}, 6, 0.5, 1.5);
  const Var beta = random_param({4}, 7);
  expect_gradients("group norm", [&] { return probe(ad::group_norm(x, g, beta, 2), 23); },
                   {{"x", x}, {"gamma", g}, {"beta", beta}});

  const Var lw = random_param({3, 5}, 8), lb = random_param({3}, 9), v = random_param({5}, 10);
  expect_gradients("linear", [&] { return probe(ad::linear(v, lw, lb), 24); }, {{"w", lw}, {"b", lb}, {"v", v}});

  const Var cb = random_param({4}, 11);
  const Var y = random_param({2, 6, 6}, 12);
  expect_gradients("channel bias", [&] { return probe(ad::add_channel_bias(x, cb), 25); }, {{"x", x}, {"v", cb}});
  expect_gradients("concat", [&] { return probe(ad::concat_channels({x, y}), 26); }, {{"x", x}, {"y", y}});
  expect_gradients("upsample", [&] { return probe(ad::upsample_nearest2x(x), 27); }, {{"x", x}});
  expect_gradients("pool", [&] { return probe(ad::avg_pool2x(x), 28); }, {{"x", x}});
  expect_gradients("resize", [&] { return probe(ad::resize_bilinear(x, 3, 4), 29); }, {{"x", x}});
  expect_gradients("filter", [&] { return probe(ad::filter_valid(x, {0.25, 0.5, 0.25}), 30); }, {{"x", x}});
  expect_gradients("rfft2", [&] { return probe(ad::rfft2_magnitude(ad::add_scalar(x, 0.3)), 31); }, {{"x", x}});
}

TEST_CASE("attention") {
  const Var q = random_param({4, 3, 2}, 40), k = random_param({4, 2, 2}, 41), v = random_param({6, 2, 2}, 42);
  const NamedParams p{{"q", q}, {"k", k}, {"v", v}};
  expect_gradients("one head", [&] { return probe(ad::attention(q, k, v, 1), 43); }, p);
  expect_gradients("two heads", [&] { return probe(ad::attention(q, k, v, 2), 44); }, p);
}

TEST_CASE("op values") {
  const Var x = Var::constant({1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  CHECK(ad::avg_pool2x(x).item() == 2.5);
  const Var up = ad::upsample_nearest2x(x);
  CHECK(up.shape() == ad::Shape{1, 4, 4});
  CHECK(up.value()[5] == 1.0);
  CHECK(up.value()[15] == 4.0);
  const Var mag = ad::rfft2_magnitude(x);
  CHECK(mag.shape() == ad::Shape{1, 2, 2});
  CHECK(mag.value()[0] == doctest::Approx(10.0));
  CHECK(mag.value()[1] == doctest::Approx(2.0));
  CHECK(mag.value()[2] == doctest::Approx(4.0));
  CHECK(mag.value()[3] == doctest::Approx(0.0));
  const Image img(2, 3, 3, 0.25);
  CHECK(ad::to_image(ad::from_image(img)) == img);
  CHECK_THROWS(ad::add(x, Var::constant({1, 2, 3}, 0.0)));
}
