#include "aquadiff/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace aquadiff {

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : beta_(std::move(betas)) {
  const std::size_t n = beta_.size();
  alpha_.resize(n);
  gamma_.resize(n);
  posterior_var_.resize(n);
  double prod = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double gamma_prev = prod;
    alpha_[i] = 1.0 - beta_[i];
    prod *= alpha_[i];
    gamma_[i] = prod;
    posterior_var_[i] = std::max(0.0, (1.0 - gamma_prev) * (1.0 - alpha_[i]) / (1.0 - prod));
  }
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  if (betas.empty()) throw ParameterError("schedule needs at least one step");
  for (double b : betas) {
    if (!(b > 0.0 && b < 1.0)) throw ParameterError("schedule betas must lie in (0, 1)");
  }
  return NoiseSchedule(std::move(betas));
}

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ParameterError("linear_schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ParameterError("linear_schedule: need 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
    betas[i] = beta_start + frac * (beta_end - beta_start);
  }
  return NoiseSchedule(std::move(betas));
}

void NoiseSchedule::check_step(int t) const {
  if (t < 1 || t > steps()) {
    throw ParameterError("timestep " + std::to_string(t) + " outside [1, " +
                         std::to_string(steps()) + "]");
  }
}

NoiseSchedule linear_schedule(int steps, double beta_start, double beta_end) {
  return NoiseSchedule::linear(steps, beta_start, beta_end);
}

namespace {

// out = a*x + b*y elementwise.
Image axpby(double a, const Image& x, double b, const Image& y) {
  Image out = x;
  auto o = out.data();
  const auto ys = y.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a * o[i] + b * ys[i];
  return out;
}

}  // namespace

Image q_sample(const Image& x0, int t, const Image& eps, const NoiseSchedule& sched) {
  require_same_shape(x0, eps, "q_sample");
  const double g = sched.gamma(t);
  return axpby(std::sqrt(g), x0, std::sqrt(1.0 - g), eps);
}

Image predict_x0(const Image& x_t, const Image& eps_hat, int t, const NoiseSchedule& sched,
                 bool clamp) {
  require_same_shape(x_t, eps_hat, "predict_x0");
  const double g = sched.gamma(t);
  if (!(g > 0.0)) throw ParameterError("predict_x0: gamma_t is zero");
  const double inv = 1.0 / std::sqrt(g);
  Image out = axpby(inv, x_t, -std::sqrt(1.0 - g) * inv, eps_hat);
  if (clamp) {
    for (double& v : out.data()) v = std::clamp(v, -1.0, 1.0);
  }
  return out;
}

Image posterior_mean_from_x0(const Image& x_t, const Image& x0_hat, int t,
                             const NoiseSchedule& sched) {
  require_same_shape(x_t, x0_hat, "posterior_mean");
  const double g = sched.gamma(t), g_prev = sched.gamma(t - 1), a = sched.alpha(t);
  const double c_x0 = std::sqrt(g_prev) * (1.0 - a) / (1.0 - g);
  const double c_xt = std::sqrt(a) * (1.0 - g_prev) / (1.0 - g);
  return axpby(c_x0, x0_hat, c_xt, x_t);
}

Image posterior_mean_from_eps(const Image& x_t, const Image& eps_hat, int t,
                              const NoiseSchedule& sched) {
  require_same_shape(x_t, eps_hat, "posterior_mean");
  const double g = sched.gamma(t), a = sched.alpha(t);
  const double inv = 1.0 / std::sqrt(a);
  return axpby(inv, x_t, -inv * (1.0 - a) / std::sqrt(1.0 - g), eps_hat);
}

namespace {

Image add_noise(Image mean, int t, const Image* noise_z, const NoiseSchedule& sched) {
  if (t > 1 && noise_z != nullptr) {
    require_same_shape(mean, *noise_z, "reverse_step");
    const double sigma = std::sqrt(sched.posterior_var(t));
    auto m = mean.data();
    const auto z = noise_z->data();
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += sigma * z[i];
  }
  return mean;
}

}  // namespace

Image reverse_step(const Image& x_t, const Image& eps_hat, int t, const Image* noise_z,
                   const NoiseSchedule& sched) {
  return add_noise(posterior_mean_from_eps(x_t, eps_hat, t, sched), t, noise_z, sched);
}

Image reverse_step_clamped(const Image& x_t, const Image& eps_hat, int t, const Image* noise_z,
                           const NoiseSchedule& sched) {
  const Image x0_hat = predict_x0(x_t, eps_hat, t, sched, /*clamp=*/true);
  return add_noise(posterior_mean_from_x0(x_t, x0_hat, t, sched), t, noise_z, sched);
}

}  // namespace aquadiff
