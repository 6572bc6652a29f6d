#include "aquadiff/degradation.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace aquadiff {

Image degrade(const Image& clean, const DegradationParams& params) {
  require_channels(clean, 3, "degrade");
  const Image& d = params.depth_map;
  if (d.height() != clean.height() || d.width() != clean.width() || d.channels() != 1) {
    throw DimensionError("degrade: depth map dimensions do not match image");
  }
  Image out(clean.height(), clean.width(), 3);
  const auto src = clean.data();
  const auto depth = d.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < depth.size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      const double transmission = std::exp(-params.eta[c] * depth[i]);
      const double v = src[3 * i + c] * transmission + params.background[c] * (1.0 - transmission);
      dst[3 * i + c] = std::clamp(v, 0.0, 1.0);
    }
  }
  return out;
}

DegradationParams sample_degradation(int height, int width, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto uniform = [&rng](double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  DegradationParams p;
  p.seed = seed;
  p.eta[0] = uniform(0.6, 1.2);
  p.eta[1] = uniform(0.2, 0.6);
  // The green and blue ranges overlap; cap blue so red >= green >= blue holds.
  p.eta[2] = uniform(0.05, std::min(0.3, p.eta[1]));
  p.background = {uniform(0.0, 0.15), uniform(0.3, 0.6), uniform(0.4, 0.7)};

  // Ramp in a random direction plus a few low-frequency waves, mapped to [0.5, 3].
  const double angle = uniform(0.0, 2.0 * std::numbers::pi);
  const double dx = std::cos(angle), dy = std::sin(angle);
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 3; ++i) {
    waves.push_back({uniform(-1.5, 1.5), uniform(-1.5, 1.5), uniform(0.0, 2.0 * std::numbers::pi),
                     uniform(0.05, 0.2)});
  }
  Image depth(height, width, 1);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double u = (x + 0.5) / width, v = (y + 0.5) / height;
      double s = 0.5 + 0.5 * ((u - 0.5) * dx + (v - 0.5) * dy) * std::numbers::sqrt2;
      for (const Wave& w : waves) {
        s += w.amp * std::sin(2.0 * std::numbers::pi * (w.fx * u + w.fy * v) + w.phase);
      }
      depth.at(y, x) = s;
    }
  }
  const auto [lo_it, hi_it] = std::minmax_element(depth.data().begin(), depth.data().end());
  const double lo = *lo_it, hi = *hi_it;
  const double span = hi > lo ? hi - lo : 1.0;
  for (double& v : depth.data()) v = 0.5 + 2.5 * (v - lo) / span;
  p.depth_map = std::move(depth);
  return p;
}

Image make_clean_scene(int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto uniform = [&rng](double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  Image img(size, size, 3);
  std::array<double, 3> c0, c1;
  for (int c = 0; c < 3; ++c) {
    c0[c] = uniform(0.2, 0.9);
    c1[c] = uniform(0.2, 0.9);
  }
  const double angle = uniform(0.0, 2.0 * std::numbers::pi);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double u = (x + 0.5) / size - 0.5, v = (y + 0.5) / size - 0.5;
      const double s = std::clamp(0.5 + (u * std::cos(angle) + v * std::sin(angle)), 0.0, 1.0);
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = (1.0 - s) * c0[c] + s * c1[c];
    }
  }
  const int shapes = 3 + static_cast<int>(rng() % 3);
  for (int k = 0; k < shapes; ++k) {
    std::array<double, 3> color;
    for (double& v : color) v = uniform(0.05, 1.0);
    const double cx = uniform(0.0, size), cy = uniform(0.0, size);
    const double r = uniform(0.1, 0.3) * size;
    const bool disc = (rng() & 1U) != 0;
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double px = x + 0.5 - cx, py = y + 0.5 - cy;
        const bool inside = disc ? px * px + py * py <= r * r
                                 : std::abs(px) <= r && std::abs(py) <= 0.6 * r;
        if (inside) {
          for (int c = 0; c < 3; ++c) img.at(y, x, c) = color[c];
        }
      }
    }
  }
  return img;
}

std::vector<SamplePair> make_dataset(int n, int size, std::uint64_t seed) {
  if (n < 1) throw ParameterError("make_dataset: n must be >= 1");
  if (size < 8) throw ParameterError("make_dataset: size must be >= 8");
  std::vector<std::uint64_t> seeds(2 * static_cast<std::size_t>(n));
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  for (auto& s : seeds) s = rng();
  std::vector<SamplePair> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    SamplePair pair;
    pair.clean = make_clean_scene(size, seeds[2 * i]);
    pair.params = sample_degradation(size, size, seeds[2 * i + 1]);
    pair.degraded = degrade(pair.clean, pair.params);
    out.push_back(std::move(pair));
  }
  return out;
}

}  // namespace aquadiff
