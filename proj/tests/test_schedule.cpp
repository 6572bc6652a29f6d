#include <cmath>
#include <random>

#include "aquadiff/schedule.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace aquadiff;
using aquadiff::testing::max_abs_diff;
using aquadiff::testing::normal_image;
using aquadiff::testing::random_image;

TEST_CASE("linear schedule at T=2000") {
  const NoiseSchedule s = linear_schedule(2000, 1e-6, 1e-2);
  CHECK(s.steps() == 2000);
  CHECK(s.beta(1) == doctest::Approx(1e-6).epsilon(1e-12));
  CHECK(s.beta(2000) == doctest::Approx(1e-2).epsilon(1e-12));
  for (int t = 2; t <= 2000; ++t) {
    CHECK(s.gamma(t) < s.gamma(t - 1));
    CHECK(s.beta(t) - s.beta(t - 1) == doctest::Approx((1e-2 - 1e-6) / 1999).epsilon(1e-9));
  }
}

TEST_CASE("single step schedule") {
  const NoiseSchedule s = linear_schedule(1, 0.5, 0.5);
  CHECK(s.gamma(1) == 0.5);
  CHECK(s.gamma(0) == 1.0);
  CHECK(s.posterior_var(1) == 0.0);
}

TEST_CASE("cumulative product by hand") {
  const NoiseSchedule s = NoiseSchedule::from_betas({0.1, 0.2, 0.3});
  CHECK(s.gamma(1) == doctest::Approx(0.9).epsilon(1e-14));
  CHECK(s.gamma(2) == doctest::Approx(0.72).epsilon(1e-14));
  CHECK(s.gamma(3) == doctest::Approx(0.504).epsilon(1e-14));
  CHECK(s.alpha(2) == doctest::Approx(0.8));
  CHECK(s.posterior_var(2) == doctest::Approx(0.1 * 0.2 / 0.28).epsilon(1e-14));
}

TEST_CASE("posterior variance bounded by beta") {
  for (const auto& s : {linear_schedule(50, 1e-4, 0.2), linear_schedule(2000, 1e-6, 1e-2),
                        linear_schedule(50, 1e-4, 5e-2)}) {
    for (int t = 1; t <= s.steps(); ++t) {
      CHECK(s.posterior_var(t) >= 0.0);
      CHECK(s.posterior_var(t) <= s.beta(t));
      CHECK(s.beta(t) > 0.0);
      CHECK(s.beta(t) < 1.0);
    }
  }
}

TEST_CASE("terminal noise check") {
  CHECK(linear_schedule(50, 1e-4, 0.2).terminal_is_noise());
  CHECK_FALSE(linear_schedule(50, 1e-4, 5e-2).terminal_is_noise());
  CHECK(linear_schedule(2000, 1e-6, 1e-2).terminal_is_noise());
}

TEST_CASE("schedule argument errors") {
  CHECK_THROWS_AS(linear_schedule(0, 1e-4, 0.02), ParameterError);
  CHECK_THROWS_AS(linear_schedule(10, 0.0, 0.02), ParameterError);
  CHECK_THROWS_AS(linear_schedule(10, 0.1, 0.02), ParameterError);
  CHECK_THROWS_AS(linear_schedule(10, 0.1, 1.0), ParameterError);
  CHECK_THROWS_AS(NoiseSchedule::from_betas({}), ParameterError);
  const NoiseSchedule s = linear_schedule(10, 1e-4, 0.02);
  CHECK_THROWS_AS(s.beta(0), ParameterError);
  CHECK_THROWS_AS(s.gamma(11), ParameterError);
}

TEST_CASE("q_sample scalar case and its inverse") {
  const NoiseSchedule s = NoiseSchedule::from_betas({0.1, 0.2});
  const Image x0(2, 2, 3, 1.0), eps(2, 2, 3, 0.5);
  const Image xt = q_sample(x0, 2, eps, s);
  const double expect = std::sqrt(0.72) + std::sqrt(0.28) * 0.5;
  CHECK(expect == doctest::Approx(1.1131032).epsilon(1e-7));
  for (double v : xt.data()) CHECK(v == doctest::Approx(expect).epsilon(1e-14));
  const Image x0_hat = predict_x0(xt, eps, 2, s);
  for (double v : x0_hat.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-14));
  const Image from_value = predict_x0(Image(2, 2, 3, 1.1131032), eps, 2, s);
  for (double v : from_value.data()) {
    CHECK(v == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("q_sample near the no-noise limit") {
  const NoiseSchedule s = linear_schedule(10, 1e-7, 1e-2);
  const Image x0 = random_image(8, 8, 3, 3, -1.0, 1.0);
  CHECK(max_abs_diff(q_sample(x0, 1, normal_image(8, 8, 3, 4), s), x0) < 1e-3);
}

TEST_CASE("predict_x0 inverts q_sample and clamps on request") {
  const NoiseSchedule s = linear_schedule(50, 1e-4, 0.2);
  for (int t = 1; t <= 50; t += 7) {
    const Image x0 = random_image(6, 5, 3, t, -1.0, 1.0);
    const Image eps = normal_image(6, 5, 3, 100 + t);
    CHECK(max_abs_diff(predict_x0(q_sample(x0, t, eps, s), eps, t, s), x0) < 1e-5);
  }
  const Image far(2, 2, 3, 5.0);
  const Image clamped = predict_x0(far, Image(2, 2, 3), 3, s, true);
  for (double v : clamped.data()) CHECK(v == 1.0);
}

TEST_CASE("posterior mean forms agree") {
  const NoiseSchedule s = linear_schedule(50, 1e-4, 0.2);
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> pick(1, 50);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const int t = pick(rng);
    const Image xt = normal_image(4, 4, 3, rng());
    const Image eps = normal_image(4, 4, 3, rng());
    const Image a = posterior_mean_from_eps(xt, eps, t, s);
    const Image b = posterior_mean_from_x0(xt, predict_x0(xt, eps, t, s), t, s);
    worst = std::max(worst, max_abs_diff(a, b));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("zero noise estimate gives x_t over sqrt(alpha)") {
  const NoiseSchedule s = linear_schedule(5, 0.1, 0.3);
  const Image xt = random_image(3, 3, 3, 8, -1.0, 1.0);
  const Image mu = posterior_mean_from_eps(xt, Image(3, 3, 3), 4, s);
  for (std::size_t i = 0; i < mu.size(); ++i) {
    CHECK(mu.data()[i] == doctest::Approx(xt.data()[i] / std::sqrt(s.alpha(4))).epsilon(1e-14));
  }
}

TEST_CASE("reverse step noise handling") {
  const NoiseSchedule s = linear_schedule(10, 1e-3, 0.1);
  const Image xt = normal_image(4, 4, 3, 1), eps = normal_image(4, 4, 3, 2), z = normal_image(4, 4, 3, 3);
  const Image mean = posterior_mean_from_eps(xt, eps, 1, s);
  CHECK(reverse_step(xt, eps, 1, &z, s) == mean);
  CHECK(reverse_step(xt, eps, 5, nullptr, s) == posterior_mean_from_eps(xt, eps, 5, s));
  const Image noisy = reverse_step(xt, eps, 5, &z, s);
  const Image base = posterior_mean_from_eps(xt, eps, 5, s);
  const double sigma = std::sqrt(s.posterior_var(5));
  for (std::size_t i = 0; i < noisy.size(); ++i) {
    CHECK(noisy.data()[i] == doctest::Approx(base.data()[i] + sigma * z.data()[i]).epsilon(1e-14));
  }
}

TEST_CASE("reverse step variance matches the posterior") {
  const NoiseSchedule s = linear_schedule(50, 1e-4, 0.2);
  const int t = 20;
  const Image xt(1, 1, 1, 0.3), eps(1, 1, 1, -0.2);
  const double mean = posterior_mean_from_eps(xt, eps, t, s).at(0, 0);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n;
  const int draws = 200000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < draws; ++i) {
    const Image z(1, 1, 1, n(rng));
    const double v = reverse_step(xt, eps, t, &z, s).at(0, 0) - mean;
    sum += v;
    sq += v * v;
  }
  const double var = sq / draws - (sum / draws) * (sum / draws);
  CHECK(var == doctest::Approx(s.posterior_var(t)).epsilon(0.02));
}

TEST_CASE("oracle noise recovers x0 through the full chain") {
  const NoiseSchedule s = linear_schedule(50, 1e-4, 0.2);
  for (int k = 0; k < 10; ++k) {
    const Image x0 = random_image(16, 16, 3, 40 + k, -1.0, 1.0);
    std::mt19937_64 rng(900 + k);
    Image x = normal_image(16, 16, 3, rng());
    for (int t = 50; t >= 1; --t) {
      Image eps = x;
      const double g = s.gamma(t);
      for (std::size_t i = 0; i < eps.size(); ++i) {
        eps.data()[i] = (x.data()[i] - std::sqrt(g) * x0.data()[i]) / std::sqrt(1.0 - g);
      }
      const Image z = normal_image(16, 16, 3, rng());
      x = k % 2 ? reverse_step(x, eps, t, &z, s) : reverse_step_clamped(x, eps, t, &z, s);
    }
    CHECK(max_abs_diff(x, x0) < 1e-3);
  }
}
