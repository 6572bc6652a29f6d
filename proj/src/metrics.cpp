#include "aquadiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "aquadiff/loss.hpp"
#include "aquadiff/ops.hpp"

namespace aquadiff {

double psnr(const Image& x, const Image& ref) {
  require_same_shape(x, ref, "psnr");
  if (x.empty()) throw DimensionError("psnr: empty image");
  double se = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x.values()[i] - ref.values()[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(x.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

double ssim_metric(const Image& x, const Image& ref) {
  require_same_shape(x, ref, "ssim");
  return ssim_index(ad::from_image(x), ad::from_image(ref), LossConfig{}).item();
}

// ---------------------------------------------------------------------------
// UCIQE

namespace {

double population_std(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return std::sqrt(var / static_cast<double>(v.size()));
}

}  // namespace

UciqeParts uciqe_parts(const Image& img) {
  require_channels(img, 3, "uciqe");
  const LabImage lab = rgb_to_lab(img);
  const std::size_t n = lab.L.size();
  std::vector<double> chroma(n), lum(n);
  double sat = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    chroma[i] = std::hypot(lab.a_star[i], lab.b_star[i]) / 100.0;
    lum[i] = lab.L[i] / 100.0;
    const double r = img.values()[3 * i], g = img.values()[3 * i + 1], b = img.values()[3 * i + 2];
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    sat += mx > 0.0 ? (mx - mn) / mx : 0.0;
  }
  std::sort(lum.begin(), lum.end());
  const std::size_t k = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.01 * n)));
  double top = 0.0, bottom = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    bottom += lum[i];
    top += lum[n - 1 - i];
  }
  UciqeParts p;
  p.chroma_std = population_std(chroma);
  p.luminance_contrast = (top - bottom) / static_cast<double>(k);
  p.mean_saturation = sat / static_cast<double>(n);
  p.value = 0.4680 * p.chroma_std + 0.2745 * p.luminance_contrast + 0.2576 * p.mean_saturation;
  return p;
}

double uciqe(const Image& img) { return uciqe_parts(img).value; }

// ---------------------------------------------------------------------------
// UIQM

namespace {

// Mean with 10% trimmed from each tail; spread is measured about it over all samples.
void trimmed_stats(std::vector<double> v, double& mu, double& var) {
  std::sort(v.begin(), v.end());
  const std::size_t k = v.size();
  const auto lo = static_cast<std::size_t>(std::ceil(0.1 * k));
  const auto hi = static_cast<std::size_t>(std::floor(0.1 * k));
  mu = 0.0;
  for (std::size_t i = lo; i < k - hi; ++i) mu += v[i];
  mu /= static_cast<double>(k - lo - hi);
  var = 0.0;
  for (double x : v) var += (x - mu) * (x - mu);
  var /= static_cast<double>(k);
}

int reflect(int i, int n) {
  if (i < 0) return -i - 1;
  if (i >= n) return 2 * n - i - 1;
  return i;
}

// Sobel gradient magnitude with half-sample symmetric borders.
std::vector<double> sobel_magnitude(const Image& plane) {
  const int h = plane.height(), w = plane.width();
  std::vector<double> out(static_cast<std::size_t>(h) * w);
  auto px = [&](int y, int x) { return plane.at(reflect(y, h), reflect(x, w)); };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double gx = (px(y - 1, x + 1) + 2 * px(y, x + 1) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2 * px(y, x - 1) + px(y + 1, x - 1));
      const double gy = (px(y + 1, x - 1) + 2 * px(y + 1, x) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2 * px(y - 1, x) + px(y - 1, x + 1));
      out[static_cast<std::size_t>(y) * w + x] = std::hypot(gx, gy);
    }
  }
  return out;
}

// Blocks tile the top-left floor(H/b) x floor(W/b) region.
template <typename Fn>
void for_each_block(int h, int w, int block, Fn&& fn) {
  for (int by = 0; by + block <= h; by += block)
    for (int bx = 0; bx + block <= w; bx += block) fn(by, bx);
}

double eme(const std::vector<double>& v, int h, int w, int block) {
  const int k1 = w / block, k2 = h / block;
  double acc = 0.0;
  for_each_block(h, w, block, [&](int by, int bx) {
    double mx = -INFINITY, mn = INFINITY;
    for (int y = by; y < by + block; ++y)
      for (int x = bx; x < bx + block; ++x) {
        const double s = v[static_cast<std::size_t>(y) * w + x];
        mx = std::max(mx, s);
        mn = std::min(mn, s);
      }
    if (mn > 0.0 && mx > 0.0) acc += std::log(mx / mn);
  });
  return 2.0 / (k1 * k2) * acc;
}

double amee(const Image& img, int block) {
  const int h = img.height(), w = img.width();
  const int k1 = w / block, k2 = h / block;
  double acc = 0.0;
  for_each_block(h, w, block, [&](int by, int bx) {
    double mx = -INFINITY, mn = INFINITY;
    for (int y = by; y < by + block; ++y)
      for (int x = bx; x < bx + block; ++x)
        for (int c = 0; c < 3; ++c) {
          mx = std::max(mx, img.at(y, x, c));
          mn = std::min(mn, img.at(y, x, c));
        }
    const double top = mx - mn, bot = mx + mn;
    if (top != 0.0 && bot != 0.0) acc += (top / bot) * std::log(top / bot);
  });
  return -1.0 / (k1 * k2) * acc;
}

}  // namespace

UiqmParts uiqm_parts(const Image& img, int block) {
  require_channels(img, 3, "uiqm");
  if (block < 1 || img.height() < block || img.width() < block) {
    throw DimensionError("uiqm: image smaller than one " + std::to_string(block) + "px block");
  }
  const std::size_t n = static_cast<std::size_t>(img.height()) * img.width();
  std::vector<double> rg(n), yb(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = 255.0 * img.values()[3 * i], g = 255.0 * img.values()[3 * i + 1],
                 b = 255.0 * img.values()[3 * i + 2];
    rg[i] = r - g;
    yb[i] = 0.5 * (r + g) - b;
  }
  double mu_rg, var_rg, mu_yb, var_yb;
  trimmed_stats(rg, mu_rg, var_rg);
  trimmed_stats(yb, mu_yb, var_yb);

  UiqmParts p;
  p.uicm = -0.0268 * std::hypot(mu_rg, mu_yb) + 0.1586 * std::sqrt(var_rg + var_yb);

  const double lw[3] = {0.299, 0.587, 0.114};
  for (int c = 0; c < 3; ++c) {
    Image plane = img.channel(c);
    for (double& v : plane.values()) v *= 255.0;
    std::vector<double> edges = sobel_magnitude(plane);
    for (std::size_t i = 0; i < n; ++i) edges[i] *= plane.values()[i];
    p.uism += lw[c] * eme(edges, img.height(), img.width(), block);
  }
  p.uiconm = amee(img, block);
  p.value = 0.0282 * p.uicm + 0.2953 * p.uism + 3.5753 * p.uiconm;
  return p;
}

double uiqm(const Image& img, int block) { return uiqm_parts(img, block).value; }

// ---------------------------------------------------------------------------
// Reports

void MetricReport::add(MetricRow row) {
  if (!rows.empty() && row.psnr.has_value() != rows.front().psnr.has_value()) {
    throw ParameterError("metric report: rows disagree on reference columns");
  }
  has_reference = row.psnr.has_value();
  rows.push_back(std::move(row));
}

void MetricReport::finalize() {
  aggregate = MetricRow{"mean", 0.0, 0.0, {}, {}};
  if (rows.empty()) return;
  double psnr_sum = 0.0, ssim_sum = 0.0;
  for (const MetricRow& r : rows) {
    aggregate.uiqm += r.uiqm;
    aggregate.uciqe += r.uciqe;
    if (has_reference) {
      psnr_sum += *r.psnr;
      ssim_sum += *r.ssim;
    }
  }
  const double n = static_cast<double>(rows.size());
  aggregate.uiqm /= n;
  aggregate.uciqe /= n;
  if (has_reference) {
    aggregate.psnr = psnr_sum / n;
    aggregate.ssim = ssim_sum / n;
  }
}

void MetricReport::write_csv(std::ostream& os) const {
  const auto old = os.precision(10);
  os << "name,uiqm,uciqe" << (has_reference ? ",psnr,ssim" : "") << "\n";
  auto line = [&](const MetricRow& r) {
    os << r.name << "," << r.uiqm << "," << r.uciqe;
    if (has_reference) os << "," << r.psnr.value_or(0.0) << "," << r.ssim.value_or(0.0);
    os << "\n";
  };
  for (const MetricRow& r : rows) line(r);
  line(aggregate);
  os.precision(old);
}

MetricRow score_image(const std::string& name, const Image& img, const Image* reference) {
  MetricRow row;
  row.name = name;
  row.uiqm = uiqm(img);
  row.uciqe = uciqe(img);
  if (reference) {
    row.psnr = psnr(img, *reference);
    row.ssim = ssim_metric(img, *reference);
  }
  return row;
}

}  // namespace aquadiff
