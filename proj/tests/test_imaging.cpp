#include <cmath>
#include <filesystem>

#include "aquadiff/image.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace aquadiff;
using aquadiff::testing::max_abs_diff;
using aquadiff::testing::random_image;

namespace {

Image solid(int h, int w, double r, double g, double b) {
  Image img(h, w, 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      img.at(y, x, 0) = r;
      img.at(y, x, 1) = g;
      img.at(y, x, 2) = b;
    }
  return img;
}

Image permute(const Image& img) {
  Image out = img;
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, x, (c + 1) % 3);
  return out;
}

}  // namespace

TEST_CASE("rgb_to_lab fixed points") {
  const LabImage white = rgb_to_lab(solid(1, 1, 1, 1, 1));
  CHECK(white.L[0] == doctest::Approx(100.0).epsilon(1e-9));
  CHECK(std::abs(white.a_star[0]) < 0.01);
  CHECK(std::abs(white.b_star[0]) < 0.01);

  const LabImage black = rgb_to_lab(solid(1, 1, 0, 0, 0));
  CHECK(std::abs(black.L[0]) < 1e-12);
  CHECK(black.a_star[0] == 0.0);
  CHECK(black.b_star[0] == 0.0);

  // scikit-image rgb2lab of mid gray.
  const LabImage gray = rgb_to_lab(solid(1, 1, 0.5, 0.5, 0.5));
  CHECK(gray.L[0] == doctest::Approx(53.388964741114).epsilon(1e-9));
  CHECK(std::abs(gray.a_star[0]) < 1e-9);
  CHECK(std::abs(gray.b_star[0]) < 1e-9);

  CHECK_THROWS_AS(rgb_to_lab(Image(2, 2, 1)), DimensionError);
}

TEST_CASE("lab_to_rgb inverts rgb_to_lab on 1000 random pixels") {
  const Image img = random_image(20, 50, 3, 11);
  CHECK(max_abs_diff(lab_to_rgb(rgb_to_lab(img)), img) < 1e-3);

  const LabImage lab = rgb_to_lab(img);
  const LabImage back = rgb_to_lab(lab_to_rgb(lab));
  double worst = 0.0;
  for (std::size_t i = 0; i < lab.L.size(); ++i) {
    worst = std::max({worst, std::abs(back.L[i] - lab.L[i]), std::abs(back.a_star[i] - lab.a_star[i]),
                      std::abs(back.b_star[i] - lab.b_star[i])});
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("lab_to_rgb clamps out-of-gamut colours") {
  LabImage lab{1, 1, {100.0}, {0.0}, {0.0}};
  const Image w = lab_to_rgb(lab);
  for (int c = 0; c < 3; ++c) CHECK(w.at(0, 0, c) == doctest::Approx(1.0).epsilon(1e-3));

  lab = LabImage{1, 1, {50.0}, {80.0}, {0.0}};
  const Image out = lab_to_rgb(lab);
  for (int c = 0; c < 3; ++c) {
    CHECK(std::isfinite(out.at(0, 0, c)));
    CHECK(out.at(0, 0, c) >= 0.0);
    CHECK(out.at(0, 0, c) <= 1.0);
  }
  // Unclamped values from scikit-image lab2xyz followed by the sRGB matrix and transfer curve.
  const double in[3] = {50.0, 80.0, 0.0};
  double rgb[3];
  lab_to_rgb_pixel_unclamped(in, rgb);
  CHECK(rgb[0] == doctest::Approx(0.911308228257).epsilon(1e-3));
  CHECK(rgb[1] == doctest::Approx(-0.038677220205).epsilon(1e-3));
  CHECK(rgb[2] == doctest::Approx(0.478807905912).epsilon(1e-3));
  CHECK(out.at(0, 0, 1) == 0.0);
}

TEST_CASE("to_grayscale uses BT.601 weights") {
  CHECK(to_grayscale(solid(1, 1, 1, 1, 1)).at(0, 0) == doctest::Approx(1.0));
  CHECK(to_grayscale(solid(1, 1, 1, 0, 0)).at(0, 0) == doctest::Approx(0.299));
  CHECK(to_grayscale(solid(1, 1, 0, 1, 0)).at(0, 0) == doctest::Approx(0.587));
  const Image g = to_grayscale(solid(4, 5, 0.3, 0.3, 0.3));
  CHECK(g.channels() == 1);
  for (double v : g.data()) CHECK(v == doctest::Approx(0.3));
  CHECK_THROWS_AS(to_grayscale(Image(2, 2, 1)), DimensionError);
}

TEST_CASE("gaussian_blur") {
  SUBCASE("constant image is unchanged") {
    const Image c = solid(9, 13, 0.25, 0.5, 0.75);
    CHECK(max_abs_diff(gaussian_blur(c, 2.0), c) < 1e-12);
  }
  SUBCASE("impulse response is the sampled kernel") {
    const double sigma = 1.3;
    Image img(15, 15, 1, 0.0);
    img.at(7, 7) = 1.0;
    const Image out = gaussian_blur(img, sigma);
    const int r = static_cast<int>(std::ceil(3 * sigma));
    double norm = 0.0;
    for (int i = -r; i <= r; ++i) norm += std::exp(-0.5 * i * i / (sigma * sigma));
    for (int dy = -r; dy <= r; ++dy)
      for (int dx = -r; dx <= r; ++dx) {
        const double expect = std::exp(-0.5 * (dy * dy + dx * dx) / (sigma * sigma)) / (norm * norm);
        CHECK(out.at(7 + dy, 7 + dx) == doctest::Approx(expect).epsilon(1e-12));
      }
    CHECK(out.at(0, 0) == 0.0);
  }
  SUBCASE("semigroup: two blurs at s equal one at s*sqrt(2)") {
    const Image x = random_image(32, 32, 1, 5);
    const double s = 1.5;
    CHECK(max_abs_diff(gaussian_blur(gaussian_blur(x, s), s), gaussian_blur(x, s * std::sqrt(2.0))) < 1e-3);
  }
  SUBCASE("mean is preserved") {
    const Image x = random_image(24, 31, 3, 6);
    const Image y = gaussian_blur(x, 2.5);
    double a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      a += x.data()[i];
      b += y.data()[i];
    }
    CHECK(std::abs(a - b) / static_cast<double>(x.size()) < 1e-6);
  }
  SUBCASE("kernel wider than the image still reflects") {
    const Image x = random_image(3, 4, 1, 9);
    const Image y = gaussian_blur(x, 5.0);
    for (double v : y.data()) CHECK(std::isfinite(v));
  }
  CHECK_THROWS_AS(gaussian_blur(Image(4, 4, 1), 0.0), ParameterError);
  CHECK_THROWS_AS(gaussian_blur(Image(4, 4, 1), -1.0), ParameterError);
}

TEST_CASE("resize") {
  const Image x = random_image(7, 9, 3, 3);
  CHECK(resize(x, 7, 9) == x);
  const Image c = solid(6, 6, 0.2, 0.4, 0.6);
  CHECK(max_abs_diff(resize(c, 3, 11), solid(3, 11, 0.2, 0.4, 0.6)) < 1e-12);

  Image checker(2, 2, 1);
  checker.at(0, 0) = 1.0;
  checker.at(1, 1) = 1.0;
  CHECK(resize(checker, 1, 1).at(0, 0) == doctest::Approx(0.5));

  const Image up = resize(x, 17, 5);
  double lo = 1.0, hi = 0.0;
  for (double v : x.data()) lo = std::min(lo, v), hi = std::max(hi, v);
  for (double v : up.data()) {
    CHECK(v >= lo - 1e-12);
    CHECK(v <= hi + 1e-12);
  }
  CHECK_THROWS_AS(resize(x, 0, 3), DimensionError);
}

TEST_CASE("blur and resize commute with channel permutation") {
  const Image x = random_image(12, 10, 3, 21);
  CHECK(gaussian_blur(permute(x), 1.7) == permute(gaussian_blur(x, 1.7)));
  CHECK(resize(permute(x), 5, 7) == permute(resize(x, 5, 7)));
}

TEST_CASE("operations are pure") {
  const Image x = random_image(16, 16, 3, 4);
  CHECK(gaussian_blur(x, 2.0) == gaussian_blur(x, 2.0));
  CHECK(lab_to_rgb(rgb_to_lab(x)) == lab_to_rgb(rgb_to_lab(x)));
}

TEST_CASE("PNG round trip quantizes to 8 bits") {
  const auto dir = std::filesystem::temp_directory_path() / "aquadiff_png_test";
  std::filesystem::create_directories(dir);
  const Image rgb = random_image(5, 7, 3, 8);
  write_png(dir / "rgb.png", rgb);
  const Image back = read_png(dir / "rgb.png");
  CHECK(back.same_shape(rgb));
  CHECK(max_abs_diff(back, rgb) <= 0.5 / 255.0 + 1e-12);

  const Image gray = random_image(4, 4, 1, 9);
  write_png(dir / "gray.png", gray);
  CHECK(read_png(dir / "gray.png").channels() == 1);

  Image wild = rgb;
  wild.data()[0] = 3.0;
  wild.data()[1] = -2.0;
  write_png(dir / "wild.png", wild);
  const Image clamped = read_png(dir / "wild.png");
  CHECK(clamped.data()[0] == 1.0);
  CHECK(clamped.data()[1] == 0.0);

  CHECK_THROWS_AS(read_png(dir / "missing.png"), IoError);
  std::filesystem::remove_all(dir);
}
