#pragma once

#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace aquadiff {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Row-major, channel-interleaved image of real samples.
///
/// RGB order for 3-channel images. Values are nominally in [0,1] but the
/// container does not enforce it: model-space images live in [-1,1].
class Image {
 public:
  Image() = default;
  Image(int height, int width, int channels, double fill = 0.0);
  Image(int height, int width, int channels, std::vector<double> data);

  int height() const { return height_; }
  int width() const { return width_; }
  int channels() const { return channels_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& at(int y, int x, int c = 0) {
    return data_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }
  double at(int y, int x, int c = 0) const {
    return data_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  bool same_shape(const Image& other) const {
    return height_ == other.height_ && width_ == other.width_ && channels_ == other.channels_;
  }

  /// Copies one channel out as a single-channel image.
  Image channel(int c) const;
  void set_channel(int c, const Image& plane);

  friend bool operator==(const Image&, const Image&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
};

/// CIELAB planes (D65). L in [0,100]; a*, b* signed.
struct LabImage {
  int height = 0;
  int width = 0;
  std::vector<double> L;
  std::vector<double> a_star;
  std::vector<double> b_star;
};

LabImage rgb_to_lab(const Image& img);
Image lab_to_rgb(const LabImage& lab);

// Single-pixel versions; rgb in [0,1].
void rgb_to_lab_pixel(const double rgb[3], double lab[3]);
void lab_to_rgb_pixel_unclamped(const double lab[3], double rgb[3]);

/// BT.601 luma.
Image to_grayscale(const Image& img);

/// Separable Gaussian, radius ceil(3 sigma), symmetric-reflect borders.
Image gaussian_blur(const Image& img, double sigma);
std::vector<double> gaussian_kernel(double sigma);
/// Normalized sampled Gaussian of odd length `size`.
std::vector<double> gaussian_window(int size, double sigma);

/// Bilinear resampling with half-pixel centres and edge clamping.
Image resize(const Image& img, int new_height, int new_width);

/// Source taps for one output coordinate of the bilinear resampler:
/// value = (1 - w1) * src[i0] + w1 * src[i1].
struct BilinearTap {
  int i0;
  int i1;
  double w1;
};
std::vector<BilinearTap> bilinear_taps(int in_size, int out_size);

void require_channels(const Image& img, int channels, const char* what);
void require_same_shape(const Image& a, const Image& b, const char* what);

Image read_png(const std::filesystem::path& path);
/// Values are clamped to [0,1] and quantized to 8 bits.
void write_png(const std::filesystem::path& path, const Image& img);

}  // namespace aquadiff
