#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "aquadiff/autodiff.hpp"
#include "aquadiff/config_text.hpp"

namespace aquadiff {

struct LossConfig {
  std::vector<double> scales{0.5, 0.25};
  std::vector<int> feature_layers{2, 7, 16};
  std::vector<double> layer_weights{1.0, 1.0, 1.0};
  bool use_pixel = true;
  bool use_multiscale = true;
  bool use_perceptual = true;
  bool use_ssim = true;
  bool use_fft = true;
  int ssim_window = 11;
  double ssim_sigma = 1.5;
  double ssim_c1 = 1e-4;
  double ssim_c2 = 9e-4;
  std::uint64_t extractor_seed = 0;

  void validate() const;
  std::string to_text() const;
  static LossConfig from_map(const KeyValues& kv);
};

/// Fixed convolutional feature stack. Layer ids count every conv, ReLU and
/// pooling layer in order, so an id names the output of that layer.
class FeatureExtractor {
 public:
  enum class Kind { kConv, kRelu, kPool };
  struct Layer {
    Kind kind = Kind::kRelu;
    ad::Var weight;  // conv only: [out, in, k, k], constant
    ad::Var bias;
  };

  FeatureExtractor() = default;
  explicit FeatureExtractor(std::vector<Layer> layers);

  /// Three stages (8, 16, 32 channels; 2, 2, 4 convs) with seeded random
  /// weights, average pooling between stages.
  static FeatureExtractor default_stack(std::uint64_t seed);

  /// Builds a stack from named conv tensors "conv<id>.weight" / "conv<id>.bias";
  /// ids absent from the map are ReLUs, except ids listed in pool_ids.
  static FeatureExtractor from_tensors(const std::map<std::string, ad::Var>& tensors, int layer_count,
                                       const std::vector<int>& pool_ids);

  int layer_count() const { return static_cast<int>(layers_.size()); }
  const std::vector<Layer>& layers() const { return layers_; }

  /// Activations after each requested layer id. x: [3, H, W].
  std::map<int, ad::Var> features(const ad::Var& x, const std::vector<int>& ids) const;

 private:
  std::vector<Layer> layers_;
};

// All losses take [C, H, W] tensors in image space [0,1] and return a
// one-element tensor.

ad::Var pixel_l1(const ad::Var& x_hat, const ad::Var& x0);
/// Sum over scales of mean |D_s(x_hat) - D_s(x0)|.
ad::Var multiscale_l1(const ad::Var& x_hat, const ad::Var& x0, const std::vector<double>& scales);
ad::Var pixel_multiscale_l1(const ad::Var& x_hat, const ad::Var& x0, const LossConfig& config);
ad::Var perceptual_loss(const ad::Var& x_hat, const ad::Var& x0, const FeatureExtractor& extractor,
                        const LossConfig& config);
/// Mean SSIM over 'valid' Gaussian windows, channels averaged.
ad::Var ssim_index(const ad::Var& x, const ad::Var& y, const LossConfig& config);
ad::Var ssim_loss(const ad::Var& x_hat, const ad::Var& x0, const LossConfig& config);
ad::Var fft_magnitude_loss(const ad::Var& x_hat, const ad::Var& x0);

struct CdcBreakdown {
  ad::Var total;
  double pixel = 0.0;
  double multiscale = 0.0;
  double perceptual = 0.0;
  double ssim = 0.0;
  double fft = 0.0;
};

CdcBreakdown cdc_total(const ad::Var& x_hat, const ad::Var& x0, const FeatureExtractor& extractor,
                       const LossConfig& config);

}  // namespace aquadiff
