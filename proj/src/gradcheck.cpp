#include "aquadiff/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "aquadiff/image.hpp"

namespace aquadiff {

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os << (passed ? "PASS" : "FAIL") << " max_rel_error=" << max_rel_error << "\n";
  for (const ParamCheck& p : params) {
    os << "  " << (p.passed ? "ok  " : "FAIL") << " " << p.name << " probes=" << p.probes
       << " skipped=" << p.skipped << " rel=" << p.max_rel_error << " [" << p.worst_index
       << "] analytic=" << p.analytic << " numeric=" << p.numeric << "\n";
  }
  return os.str();
}

namespace {

std::vector<std::size_t> probe_indices(std::span<const double> grad, const GradCheckOptions& o,
                                       std::mt19937_64& rng) {
  std::vector<std::size_t> idx(grad.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (o.max_probes == 0 || o.max_probes >= idx.size()) return idx;
  const auto largest = static_cast<std::size_t>(
      std::max_element(grad.begin(), grad.end(),
                       [](double a, double b) { return std::abs(a) < std::abs(b); }) -
      grad.begin());
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(o.max_probes);
  if (std::find(idx.begin(), idx.end(), largest) == idx.end()) idx.back() = largest;
  std::sort(idx.begin(), idx.end());
  return idx;
}

double finite_or_throw(double v, const std::string& name, std::size_t i) {
  if (!std::isfinite(v)) {
    throw NonFiniteError("grad_check: non-finite loss while probing " + name + "[" +
                         std::to_string(i) + "]");
  }
  return v;
}

// One central-difference probe; returns false when the point is a kink.
bool probe(const std::function<double()>& eval, double& slot, double f0, const GradCheckOptions& o,
           const std::string& name, std::size_t i, double& numeric) {
  const double orig = slot;
  slot = orig + o.step;
  const double fp = finite_or_throw(eval(), name, i);
  slot = orig - o.step;
  const double fm = finite_or_throw(eval(), name, i);
  slot = orig;
  numeric = (fp - fm) / (2.0 * o.step);
  const double up = (fp - f0) / o.step;
  const double down = (f0 - fm) / o.step;
  return std::abs(up - down) <= o.kink_ratio * std::max({std::abs(up), std::abs(down), o.floor});
}

void record(ParamCheck& pc, std::size_t i, double analytic, double numeric, const GradCheckOptions& o) {
  const double rel = relative_error(analytic, numeric, o.floor);
  if (rel >= pc.max_rel_error) {
    pc.max_rel_error = rel;
    pc.worst_index = i;
    pc.analytic = analytic;
    pc.numeric = numeric;
  }
  if (!(rel < o.tolerance)) pc.passed = false;
}

void finish(GradCheckReport& r) {
  for (const ParamCheck& p : r.params) {
    r.passed = r.passed && p.passed;
    r.max_rel_error = std::max(r.max_rel_error, p.max_rel_error);
  }
}

}  // namespace

GradCheckReport grad_check(const std::function<ad::Var()>& loss, const NamedParams& params,
                           const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw ParameterError("grad_check: step must be > 0");
  for (const auto& [name, p] : params) {
    if (!p.requires_grad()) throw ParameterError("grad_check: " + name + " does not require grad");
    ad::Var handle = p;
    handle.zero_grad();
  }
  const ad::Var root = loss();
  const double f0 = finite_or_throw(root.item(), "<base point>", 0);
  ad::backward(root);

  std::mt19937_64 rng(options.seed);
  GradCheckReport report;
  auto eval = [&loss] { return loss().item(); };
  for (const auto& [name, p] : params) {
    const std::vector<double> grad(p.grad().begin(), p.grad().end());
    for (std::size_t i = 0; i < grad.size(); ++i) {
      if (!std::isfinite(grad[i])) {
        throw NonFiniteError("grad_check: non-finite gradient at " + name + "[" + std::to_string(i) + "]");
      }
    }
    ParamCheck pc;
    pc.name = name;
    ad::Var handle = p;
    auto values = handle.mutable_value();
    for (std::size_t i : probe_indices(grad, options, rng)) {
      double numeric = 0.0;
      if (!probe(eval, values[i], f0, options, name, i, numeric)) {
        ++pc.skipped;
        continue;
      }
      ++pc.probes;
      record(pc, i, grad[i], numeric, options);
    }
    report.params.push_back(pc);
  }
  finish(report);
  return report;
}

GradCheckReport grad_check(const std::function<double(std::span<const double>)>& f,
                           std::vector<double> x, std::span<const double> gradient,
                           const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw ParameterError("grad_check: step must be > 0");
  if (gradient.size() != x.size()) throw DimensionError("grad_check: gradient size mismatch");
  const double f0 = finite_or_throw(f(x), "x", 0);
  std::mt19937_64 rng(options.seed);
  GradCheckReport report;
  ParamCheck pc;
  pc.name = "x";
  auto eval = [&f, &x] { return f(x); };
  for (std::size_t i : probe_indices(gradient, options, rng)) {
    double numeric = 0.0;
    if (!probe(eval, x[i], f0, options, "x", i, numeric)) {
      ++pc.skipped;
      continue;
    }
    ++pc.probes;
    record(pc, i, gradient[i], numeric, options);
  }
  report.params.push_back(pc);
  finish(report);
  return report;
}

}  // namespace aquadiff
