#pragma once

#include <cmath>
#include <random>
#include <string>

#include "aquadiff/image.hpp"

namespace aquadiff::testing {

inline Image random_image(int h, int w, int c, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Image img(h, w, c);
  for (double& v : img.data()) v = u(rng);
  return img;
}

inline Image normal_image(int h, int w, int c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Image img(h, w, c);
  for (double& v : img.data()) v = n(rng);
  return img;
}

inline double max_abs_diff(const Image& a, const Image& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

inline std::string data_path(const std::string& name) { return std::string(AQUADIFF_TEST_DATA) + "/" + name; }

}  // namespace aquadiff::testing
