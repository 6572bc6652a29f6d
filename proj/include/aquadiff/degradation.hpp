#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "aquadiff/image.hpp"

namespace aquadiff {

struct DegradationParams {
  std::array<double, 3> eta{};         // per-channel attenuation, 1/distance
  std::array<double, 3> background{};  // ambient light, [0,1]
  Image depth_map;                     // single channel, >= 0
  std::uint64_t seed = 0;
};

/// Underwater formation model:
///   I(x) = B(x) exp(-eta d(x)) + J (1 - exp(-eta d(x)))
/// with B the clean scene and J the ambient light.
Image degrade(const Image& clean, const DegradationParams& params);

/// Random attenuation / ambient / depth for an image of the given size.
/// eta is ordered red >= green >= blue.
DegradationParams sample_degradation(int height, int width, std::uint64_t seed);

/// Procedural scene: colour gradients plus random discs and rectangles.
Image make_clean_scene(int size, std::uint64_t seed);

struct SamplePair {
  Image clean;
  Image degraded;
  DegradationParams params;
};

std::vector<SamplePair> make_dataset(int n, int size, std::uint64_t seed);

}  // namespace aquadiff
