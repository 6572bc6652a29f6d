#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "aquadiff/autodiff.hpp"

namespace aquadiff {

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-3;
  // Denominator floor for the relative error.
  double floor = 1e-6;
  // Probes whose one-sided slopes disagree by more than this fraction are
  // treated as straddling a kink and skipped.
  double kink_ratio = 0.05;
  // 0 probes every element; otherwise this many per tensor, always including
  // the element with the largest analytic gradient.
  std::size_t max_probes = 0;
  std::uint64_t seed = 0;
};

struct ParamCheck {
  std::string name;
  std::size_t probes = 0;
  std::size_t skipped = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;  // at worst_index
  double numeric = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  bool passed = true;
  double max_rel_error = 0.0;
  std::vector<ParamCheck> params;
  std::string summary() const;
};

using NamedParams = std::vector<std::pair<std::string, ad::Var>>;

/// Checks reverse-mode gradients of `loss` (rebuilt on every call from the
/// current parameter values) against central differences.
GradCheckReport grad_check(const std::function<ad::Var()>& loss, const NamedParams& params,
                           const GradCheckOptions& options = {});

/// Same check for a plain function with a caller-supplied gradient.
GradCheckReport grad_check(const std::function<double(std::span<const double>)>& f,
                           std::vector<double> x, std::span<const double> gradient,
                           const GradCheckOptions& options = {});

double relative_error(double analytic, double numeric, double floor);

}  // namespace aquadiff
