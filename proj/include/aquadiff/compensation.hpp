#pragma once

#include "aquadiff/image.hpp"

namespace aquadiff {

/// Strengths and filter widths for Lab-space chroma compensation.
struct CompensationParams {
  double kappa = 0.7;             // a* strength
  double lambda_b = 0.7;          // b* strength
  double mask_threshold = 0.85;   // gray level above which the mask is zero
  double blur_sigma_channels = 10.0;
  double mask_smooth_sigma = 5.0;

  void validate() const;
};

/// Spatial weighting in [0,1]; zero over bright regions.
struct Mask {
  Image values;  // single channel
};

Mask build_mask(const Image& img, const CompensationParams& params);

/// Subtracts the masked, blurred a*/b* planes scaled by kappa / lambda_b.
Image compensate_channels(const Image& img, const Mask& mask, const CompensationParams& params);
Image compensate_channels(const Image& img, const CompensationParams& params);

/// Lab compensation planes before conversion back to RGB; exposed for tests.
LabImage compensate_lab(const Image& img, const Mask& mask, const CompensationParams& params);

/// Conditioning image for the denoiser: build_mask followed by compensate_channels.
Image preprocess(const Image& degraded, const CompensationParams& params);

}  // namespace aquadiff
