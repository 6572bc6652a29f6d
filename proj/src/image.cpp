#include "aquadiff/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>

namespace aquadiff {

Image::Image(int height, int width, int channels, double fill)
    : height_(height), width_(width), channels_(channels) {
  if (height < 1 || width < 1 || channels < 1) {
    throw DimensionError("image dimensions must be positive");
  }
  data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
}

Image::Image(int height, int width, int channels, std::vector<double> data)
    : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
  if (height < 1 || width < 1 || channels < 1) {
    throw DimensionError("image dimensions must be positive");
  }
  if (data_.size() != static_cast<std::size_t>(height) * width * channels) {
    throw DimensionError("image data length does not match height*width*channels");
  }
}

Image Image::channel(int c) const {
  Image out(height_, width_, 1);
  const std::size_t n = static_cast<std::size_t>(height_) * width_;
  for (std::size_t i = 0; i < n; ++i) out.data_[i] = data_[i * channels_ + c];
  return out;
}

void Image::set_channel(int c, const Image& plane) {
  if (plane.height_ != height_ || plane.width_ != width_ || plane.channels_ != 1) {
    throw DimensionError("set_channel: plane shape mismatch");
  }
  const std::size_t n = static_cast<std::size_t>(height_) * width_;
  for (std::size_t i = 0; i < n; ++i) data_[i * channels_ + c] = plane.data_[i];
}

void require_channels(const Image& img, int channels, const char* what) {
  if (img.channels() != channels) {
    throw DimensionError(std::string(what) + ": expected " + std::to_string(channels) +
                         " channels, got " + std::to_string(img.channels()));
  }
}

void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(what) + ": image shapes differ");
  }
}

// ---------------------------------------------------------------------------
// Colour

namespace {

// sRGB primaries, D65.
constexpr double kRgbToXyz[3][3] = {{0.412453, 0.357580, 0.180423},
                                    {0.212671, 0.715160, 0.072169},
                                    {0.019334, 0.119193, 0.950227}};

struct XyzInverse {
  double m[3][3];
  double white[3];
  XyzInverse() {
    const auto& a = kRgbToXyz;
    const double det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) -
                       a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0]) +
                       a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    m[0][0] = (a[1][1] * a[2][2] - a[1][2] * a[2][1]) / det;
    m[0][1] = (a[0][2] * a[2][1] - a[0][1] * a[2][2]) / det;
    m[0][2] = (a[0][1] * a[1][2] - a[0][2] * a[1][1]) / det;
    m[1][0] = (a[1][2] * a[2][0] - a[1][0] * a[2][2]) / det;
    m[1][1] = (a[0][0] * a[2][2] - a[0][2] * a[2][0]) / det;
    m[1][2] = (a[0][2] * a[1][0] - a[0][0] * a[1][2]) / det;
    m[2][0] = (a[1][0] * a[2][1] - a[1][1] * a[2][0]) / det;
    m[2][1] = (a[0][1] * a[2][0] - a[0][0] * a[2][1]) / det;
    m[2][2] = (a[0][0] * a[1][1] - a[0][1] * a[1][0]) / det;
    // Reference white is the image of RGB (1,1,1) so neutrals have a*=b*=0.
    for (int i = 0; i < 3; ++i) white[i] = a[i][0] + a[i][1] + a[i][2];
  }
};

const XyzInverse& xyz_inverse() {
  static const XyzInverse inv;
  return inv;
}

double srgb_to_linear(double c) {
  return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}

double linear_to_srgb(double c) {
  if (c <= 0.0031308) return 12.92 * c;
  return 1.055 * std::pow(c, 1.0 / 2.4) - 0.055;
}

constexpr double kDelta = 6.0 / 29.0;

double lab_f(double t) {
  return t > kDelta * kDelta * kDelta ? std::cbrt(t) : t / (3.0 * kDelta * kDelta) + 4.0 / 29.0;
}

double lab_f_inv(double f) {
  return f > kDelta ? f * f * f : 3.0 * kDelta * kDelta * (f - 4.0 / 29.0);
}

}  // namespace

void rgb_to_lab_pixel(const double rgb[3], double lab[3]) {
  const auto& wp = xyz_inverse().white;
  double lin[3];
  for (int i = 0; i < 3; ++i) lin[i] = srgb_to_linear(rgb[i]);
  double f[3];
  for (int i = 0; i < 3; ++i) {
    const double v = kRgbToXyz[i][0] * lin[0] + kRgbToXyz[i][1] * lin[1] + kRgbToXyz[i][2] * lin[2];
    f[i] = lab_f(v / wp[i]);
  }
  lab[0] = 116.0 * f[1] - 16.0;
  lab[1] = 500.0 * (f[0] - f[1]);
  lab[2] = 200.0 * (f[1] - f[2]);
}

void lab_to_rgb_pixel_unclamped(const double lab[3], double rgb[3]) {
  const auto& inv = xyz_inverse();
  const double fy = (lab[0] + 16.0) / 116.0;
  const double fx = fy + lab[1] / 500.0;
  const double fz = fy - lab[2] / 200.0;
  const double xyz[3] = {inv.white[0] * lab_f_inv(fx), inv.white[1] * lab_f_inv(fy),
                         inv.white[2] * lab_f_inv(fz)};
  for (int i = 0; i < 3; ++i) {
    const double lin = inv.m[i][0] * xyz[0] + inv.m[i][1] * xyz[1] + inv.m[i][2] * xyz[2];
    rgb[i] = linear_to_srgb(lin);
  }
}

LabImage rgb_to_lab(const Image& img) {
  require_channels(img, 3, "rgb_to_lab");
  LabImage lab;
  lab.height = img.height();
  lab.width = img.width();
  const std::size_t n = static_cast<std::size_t>(img.height()) * img.width();
  lab.L.resize(n);
  lab.a_star.resize(n);
  lab.b_star.resize(n);
  const auto src = img.data();
  for (std::size_t i = 0; i < n; ++i) {
    double out[3];
    rgb_to_lab_pixel(&src[3 * i], out);
    lab.L[i] = out[0];
    lab.a_star[i] = out[1];
    lab.b_star[i] = out[2];
  }
  return lab;
}

Image lab_to_rgb(const LabImage& lab) {
  const std::size_t n = static_cast<std::size_t>(lab.height) * lab.width;
  if (lab.L.size() != n || lab.a_star.size() != n || lab.b_star.size() != n) {
    throw DimensionError("lab_to_rgb: plane sizes do not match dimensions");
  }
  Image out(lab.height, lab.width, 3);
  auto dst = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double in[3] = {lab.L[i], lab.a_star[i], lab.b_star[i]};
    double rgb[3];
    lab_to_rgb_pixel_unclamped(in, rgb);
    for (int c = 0; c < 3; ++c) {
      const double v = std::isfinite(rgb[c]) ? rgb[c] : 0.0;
      dst[3 * i + c] = std::clamp(v, 0.0, 1.0);
    }
  }
  return out;
}

Image to_grayscale(const Image& img) {
  require_channels(img, 3, "to_grayscale");
  Image out(img.height(), img.width(), 1);
  const auto src = img.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    dst[i] = 0.299 * src[3 * i] + 0.587 * src[3 * i + 1] + 0.114 * src[3 * i + 2];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Filtering

namespace {

// Symmetric reflection (edge sample repeated), valid for any offset.
int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

}  // namespace

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    throw ParameterError("gaussian_blur: sigma must be > 0");
  }
  return gaussian_window(2 * static_cast<int>(std::ceil(3.0 * sigma)) + 1, sigma);
}

std::vector<double> gaussian_window(int size, double sigma) {
  if (size < 1 || size % 2 == 0) throw ParameterError("gaussian_window: size must be odd");
  if (!(sigma > 0.0)) throw ParameterError("gaussian_window: sigma must be > 0");
  const int radius = size / 2;
  std::vector<double> k(size);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;
  return k;
}

Image gaussian_blur(const Image& img, double sigma) {
  const std::vector<double> k = gaussian_kernel(sigma);
  const int radius = static_cast<int>(k.size() / 2);
  const int h = img.height(), w = img.width(), ch = img.channels();

  Image tmp(h, w, ch);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (int j = -radius; j <= radius; ++j) {
          acc += k[j + radius] * img.at(y, reflect_index(x + j, w), c);
        }
        tmp.at(y, x, c) = acc;
      }
    }
  }
  Image out(h, w, ch);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < ch; ++c) {
        double acc = 0.0;
        for (int j = -radius; j <= radius; ++j) {
          acc += k[j + radius] * tmp.at(reflect_index(y + j, h), x, c);
        }
        out.at(y, x, c) = acc;
      }
    }
  }
  return out;
}

std::vector<BilinearTap> bilinear_taps(int in_size, int out_size) {
  std::vector<BilinearTap> taps(static_cast<std::size_t>(out_size));
  const double scale = static_cast<double>(in_size) / out_size;
  for (int i = 0; i < out_size; ++i) {
    const double f = std::clamp((i + 0.5) * scale - 0.5, 0.0, static_cast<double>(in_size - 1));
    const int i0 = static_cast<int>(f);
    taps[i] = {i0, std::min(i0 + 1, in_size - 1), f - i0};
  }
  return taps;
}

Image resize(const Image& img, int new_height, int new_width) {
  if (new_height < 1 || new_width < 1) {
    throw DimensionError("resize: target dimensions must be >= 1");
  }
  const int h = img.height(), w = img.width(), ch = img.channels();
  if (new_height == h && new_width == w) return img;
  const auto ty = bilinear_taps(h, new_height);
  const auto tx = bilinear_taps(w, new_width);
  Image out(new_height, new_width, ch);
  for (int y = 0; y < new_height; ++y) {
    const BilinearTap& a = ty[y];
    for (int x = 0; x < new_width; ++x) {
      const BilinearTap& b = tx[x];
      for (int c = 0; c < ch; ++c) {
        const double top = (1.0 - b.w1) * img.at(a.i0, b.i0, c) + b.w1 * img.at(a.i0, b.i1, c);
        const double bot = (1.0 - b.w1) * img.at(a.i1, b.i0, c) + b.w1 * img.at(a.i1, b.i1, c);
        out.at(y, x, c) = (1.0 - a.w1) * top + a.w1 * bot;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// PNG

Image read_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str())) {
    throw IoError("read_png: " + path.string() + ": " + png.message);
  }
  const bool gray = (png.format & PNG_FORMAT_FLAG_COLOR) == 0;
  png.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw IoError("read_png: " + path.string() + ": " + msg);
  }
  const int channels = gray ? 1 : 3;
  std::vector<double> data(buffer.size());
  std::transform(buffer.begin(), buffer.end(), data.begin(),
                 [](std::uint8_t v) { return v / 255.0; });
  return Image(static_cast<int>(png.height), static_cast<int>(png.width), channels,
               std::move(data));
}

void write_png(const std::filesystem::path& path, const Image& img) {
  if (img.channels() != 1 && img.channels() != 3) {
    throw DimensionError("write_png: only gray or RGB images are supported");
  }
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width());
  png.height = static_cast<png_uint_32>(img.height());
  png.format = img.channels() == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buffer(img.size());
  const auto src = img.data();
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    const double v = std::isfinite(src[i]) ? std::clamp(src[i], 0.0, 1.0) : 0.0;
    buffer[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, buffer.data(), 0, nullptr)) {
    throw IoError("write_png: " + path.string() + ": " + png.message);
  }
}

}  // namespace aquadiff
