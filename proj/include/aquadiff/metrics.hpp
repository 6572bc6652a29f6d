#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "aquadiff/image.hpp"

namespace aquadiff {

constexpr double kPsnrCap = 99.0;

/// Peak 1.0; identical images give kPsnrCap.
double psnr(const Image& x, const Image& ref);

/// Gaussian-window SSIM (11 taps, sigma 1.5, C1 = 1e-4, C2 = 9e-4), 'valid'
/// windows, averaged over windows and channels.
double ssim_metric(const Image& x, const Image& ref);

struct UciqeParts {
  double chroma_std = 0.0;
  double luminance_contrast = 0.0;
  double mean_saturation = 0.0;
  double value = 0.0;
};
UciqeParts uciqe_parts(const Image& img);
double uciqe(const Image& img);

struct UiqmParts {
  double uicm = 0.0;
  double uism = 0.0;
  double uiconm = 0.0;
  double value = 0.0;
};
/// block: side of the EME / AMEE blocks.
UiqmParts uiqm_parts(const Image& img, int block = 8);
double uiqm(const Image& img, int block = 8);

struct MetricRow {
  std::string name;
  double uiqm = 0.0;
  double uciqe = 0.0;
  std::optional<double> psnr;
  std::optional<double> ssim;
};

struct MetricReport {
  std::vector<MetricRow> rows;
  MetricRow aggregate;
  bool has_reference = false;

  void add(MetricRow row);
  /// Recomputes the aggregate as the arithmetic mean of the rows.
  void finalize();
  /// Columns: name, uiqm, uciqe[, psnr, ssim]; last row is "mean".
  void write_csv(std::ostream& os) const;
};

MetricRow score_image(const std::string& name, const Image& img, const Image* reference);

}  // namespace aquadiff
