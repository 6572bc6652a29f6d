#include "aquadiff/compensation.hpp"

#include <algorithm>
#include <cmath>

namespace aquadiff {

void CompensationParams::validate() const {
  if (!(kappa >= 0.0 && kappa <= 2.0) || !(lambda_b >= 0.0 && lambda_b <= 2.0)) {
    throw ParameterError("compensation strengths must lie in [0, 2]");
  }
  if (!(mask_threshold > 0.0 && mask_threshold < 1.0)) {
    throw ParameterError("mask_threshold must lie in (0, 1)");
  }
  if (!(blur_sigma_channels > 0.0) || !(mask_smooth_sigma > 0.0)) {
    throw ParameterError("compensation blur sigmas must be > 0");
  }
}

Mask build_mask(const Image& img, const CompensationParams& params) {
  require_channels(img, 3, "build_mask");
  params.validate();
  Image gray = to_grayscale(img);
  for (double& v : gray.data()) v = v > params.mask_threshold ? 0.0 : 1.0;
  Image smooth = gaussian_blur(gray, params.mask_smooth_sigma);
  for (double& v : smooth.data()) v = std::clamp(v, 0.0, 1.0);
  return Mask{std::move(smooth)};
}

LabImage compensate_lab(const Image& img, const Mask& mask, const CompensationParams& params) {
  require_channels(img, 3, "compensate_channels");
  params.validate();
  if (mask.values.height() != img.height() || mask.values.width() != img.width() ||
      mask.values.channels() != 1) {
    throw DimensionError("compensate_channels: mask dimensions do not match image");
  }
  LabImage lab = rgb_to_lab(img);
  const int h = img.height(), w = img.width();
  const Image blur_a = gaussian_blur(Image(h, w, 1, lab.a_star), params.blur_sigma_channels);
  const Image blur_b = gaussian_blur(Image(h, w, 1, lab.b_star), params.blur_sigma_channels);
  const auto m = mask.values.data();
  const auto ga = blur_a.data();
  const auto gb = blur_b.data();
  for (std::size_t i = 0; i < lab.L.size(); ++i) {
    lab.a_star[i] -= params.kappa * m[i] * ga[i];
    lab.b_star[i] -= params.lambda_b * m[i] * gb[i];
  }
  return lab;
}

Image compensate_channels(const Image& img, const Mask& mask, const CompensationParams& params) {
  return lab_to_rgb(compensate_lab(img, mask, params));
}

Image compensate_channels(const Image& img, const CompensationParams& params) {
  return compensate_channels(img, build_mask(img, params), params);
}

Image preprocess(const Image& degraded, const CompensationParams& params) {
  return compensate_channels(degraded, build_mask(degraded, params), params);
}

}  // namespace aquadiff
