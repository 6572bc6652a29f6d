#pragma once

#include <optional>
#include <vector>

#include "aquadiff/image.hpp"

namespace aquadiff {

/// Variance schedule tables, indexed by step t = 1..T.
///
/// gamma(t) is the cumulative product of alpha up to t; gamma(0) = 1.
class NoiseSchedule {
 public:
  static NoiseSchedule linear(int steps, double beta_start, double beta_end);
  static NoiseSchedule from_betas(std::vector<double> betas);

  int steps() const { return static_cast<int>(beta_.size()); }
  double beta_start() const { return beta_.front(); }
  double beta_end() const { return beta_.back(); }

  double beta(int t) const { return beta_[index(t)]; }
  double alpha(int t) const { return alpha_[index(t)]; }
  double gamma(int t) const { return t == 0 ? 1.0 : gamma_[index(t)]; }
  double posterior_var(int t) const { return posterior_var_[index(t)]; }

  /// 1 - gamma(T) > threshold: x_T is close enough to N(0, I) to start sampling from noise.
  bool terminal_is_noise(double threshold = 0.99) const { return 1.0 - gamma_.back() > threshold; }

  void check_step(int t) const;

 private:
  explicit NoiseSchedule(std::vector<double> betas);
  std::size_t index(int t) const {
    check_step(t);
    return static_cast<std::size_t>(t - 1);
  }

  std::vector<double> beta_, alpha_, gamma_, posterior_var_;
};

NoiseSchedule linear_schedule(int steps, double beta_start, double beta_end);

/// x_t = sqrt(gamma_t) x0 + sqrt(1 - gamma_t) eps
Image q_sample(const Image& x0, int t, const Image& eps, const NoiseSchedule& sched);

/// x0 estimate from a noise estimate. Clamps to [-1, 1] when requested.
Image predict_x0(const Image& x_t, const Image& eps_hat, int t, const NoiseSchedule& sched,
                 bool clamp = false);

/// Posterior mean of q(x_{t-1} | x_t, x0) written in terms of an x0 estimate.
Image posterior_mean_from_x0(const Image& x_t, const Image& x0_hat, int t,
                             const NoiseSchedule& sched);

/// The same mean written in terms of a noise estimate.
Image posterior_mean_from_eps(const Image& x_t, const Image& eps_hat, int t,
                              const NoiseSchedule& sched);

/// x_{t-1} = mean(x_t, eps_hat) + sigma_t z. The noise term is skipped when z is
/// absent or t == 1.
Image reverse_step(const Image& x_t, const Image& eps_hat, int t, const Image* noise_z,
                   const NoiseSchedule& sched);

/// Ancestral step that takes the mean through a clamped x0 estimate; used by samplers.
Image reverse_step_clamped(const Image& x_t, const Image& eps_hat, int t, const Image* noise_z,
                           const NoiseSchedule& sched);

}  // namespace aquadiff
