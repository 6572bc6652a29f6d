#include "aquadiff/loss.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "aquadiff/image.hpp"
#include "aquadiff/ops.hpp"

namespace aquadiff {

using ad::Var;

void LossConfig::validate() const {
  for (double s : scales) {
    if (!(s > 0.0 && s < 1.0)) throw ParameterError("loss: scales must lie in (0,1)");
  }
  if (layer_weights.size() != feature_layers.size()) {
    throw ParameterError("loss: layer_weights and feature_layers differ in length");
  }
  for (double w : layer_weights) {
    if (!(w >= 0.0)) throw ParameterError("loss: layer weights must be >= 0");
  }
  if (ssim_window < 1 || ssim_window % 2 == 0) throw ParameterError("loss: ssim_window must be odd");
  if (!(ssim_sigma > 0.0) || !(ssim_c1 > 0.0) || !(ssim_c2 > 0.0)) {
    throw ParameterError("loss: ssim sigma and constants must be positive");
  }
}

std::string LossConfig::to_text() const {
  std::ostringstream os;
  os << "scales=" << join_doubles(scales) << "\n"
     << "feature_layers=" << join_ints(feature_layers) << "\n"
     << "layer_weights=" << join_doubles(layer_weights) << "\n"
     << "use_pixel=" << int{use_pixel} << "\n"
     << "use_multiscale=" << int{use_multiscale} << "\n"
     << "use_perceptual=" << int{use_perceptual} << "\n"
     << "use_ssim=" << int{use_ssim} << "\n"
     << "use_fft=" << int{use_fft} << "\n"
     << "ssim_window=" << ssim_window << "\n"
     << "ssim_sigma=" << format_double(ssim_sigma) << "\n"
     << "ssim_c1=" << format_double(ssim_c1) << "\n"
     << "ssim_c2=" << format_double(ssim_c2) << "\n"
     << "extractor_seed=" << extractor_seed << "\n";
  return os.str();
}

LossConfig LossConfig::from_map(const KeyValues& kv) {
  LossConfig c;
  read_value(kv, "scales", c.scales);
  read_value(kv, "feature_layers", c.feature_layers);
  if (kv.count("feature_layers") && !kv.count("layer_weights")) {
    c.layer_weights.assign(c.feature_layers.size(), 1.0);
  }
  read_value(kv, "layer_weights", c.layer_weights);
  read_value(kv, "use_pixel", c.use_pixel);
  read_value(kv, "use_multiscale", c.use_multiscale);
  read_value(kv, "use_perceptual", c.use_perceptual);
  read_value(kv, "use_ssim", c.use_ssim);
  read_value(kv, "use_fft", c.use_fft);
  read_value(kv, "ssim_window", c.ssim_window);
  read_value(kv, "ssim_sigma", c.ssim_sigma);
  read_value(kv, "ssim_c1", c.ssim_c1);
  read_value(kv, "ssim_c2", c.ssim_c2);
  read_value(kv, "extractor_seed", c.extractor_seed);
  return c;
}

// ---------------------------------------------------------------------------
// Feature extractor

FeatureExtractor::FeatureExtractor(std::vector<Layer> layers) : layers_(std::move(layers)) {
  for (const Layer& l : layers_) {
    if (l.kind == Kind::kConv && (!l.weight.defined() || l.weight.rank() != 4)) {
      throw ParameterError("feature extractor: conv layer without a 4-d kernel");
    }
  }
}

FeatureExtractor FeatureExtractor::default_stack(std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x5eedf00dULL);
  std::vector<Layer> layers;
  int in = 3;
  auto conv = [&](int out) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / (in * 9)));
    std::vector<double> w(static_cast<std::size_t>(out) * in * 9);
    for (double& v : w) v = dist(rng);
    Layer l;
    l.kind = Kind::kConv;
    l.weight = Var::constant({out, in, 3, 3}, std::move(w));
    l.bias = Var::constant({out}, 0.0);
    layers.push_back(std::move(l));
    layers.push_back(Layer{Kind::kRelu, {}, {}});
    in = out;
  };
  conv(8);
  conv(8);
  layers.push_back(Layer{Kind::kPool, {}, {}});
  conv(16);
  conv(16);
  layers.push_back(Layer{Kind::kPool, {}, {}});
  for (int i = 0; i < 4; ++i) conv(32);
  return FeatureExtractor(std::move(layers));
}

FeatureExtractor FeatureExtractor::from_tensors(const std::map<std::string, Var>& tensors,
                                                int layer_count, const std::vector<int>& pool_ids) {
  std::vector<Layer> layers;
  for (int id = 0; id < layer_count; ++id) {
    const std::string key = "conv" + std::to_string(id);
    if (auto it = tensors.find(key + ".weight"); it != tensors.end()) {
      Layer l;
      l.kind = Kind::kConv;
      l.weight = it->second.detach();
      if (auto b = tensors.find(key + ".bias"); b != tensors.end()) l.bias = b->second.detach();
      layers.push_back(std::move(l));
    } else if (std::find(pool_ids.begin(), pool_ids.end(), id) != pool_ids.end()) {
      layers.push_back(Layer{Kind::kPool, {}, {}});
    } else {
      layers.push_back(Layer{Kind::kRelu, {}, {}});
    }
  }
  return FeatureExtractor(std::move(layers));
}

std::map<int, Var> FeatureExtractor::features(const Var& x, const std::vector<int>& ids) const {
  int last = -1;
  for (int id : ids) {
    if (id < 0 || id >= layer_count()) {
      throw ParameterError("feature extractor: unknown layer id " + std::to_string(id));
    }
    last = std::max(last, id);
  }
  std::map<int, Var> out;
  Var h = x;
  for (int id = 0; id <= last; ++id) {
    const Layer& l = layers_[id];
    switch (l.kind) {
      case Kind::kConv:
        h = ad::conv2d(h, l.weight, l.bias, 1, l.weight.dim(2) / 2);
        break;
      case Kind::kRelu:
        h = ad::relu(h);
        break;
      case Kind::kPool:
        h = ad::avg_pool2x(h);
        break;
    }
    if (std::find(ids.begin(), ids.end(), id) != ids.end()) out[id] = h;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Terms

namespace {

void require_pair(const Var& a, const Var& b, const char* what) {
  if (a.rank() != 3 || a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": inputs must be [C,H,W] of equal shape, got " +
                         ad::shape_string(a.shape()) + " and " + ad::shape_string(b.shape()));
  }
}

}  // namespace

Var pixel_l1(const Var& x_hat, const Var& x0) {
  require_pair(x_hat, x0, "pixel_l1");
  return ad::mean(ad::abs(ad::sub(x_hat, x0)));
}

Var multiscale_l1(const Var& x_hat, const Var& x0, const std::vector<double>& scales) {
  require_pair(x_hat, x0, "multiscale_l1");
  Var total = Var::scalar(0.0);
  for (double s : scales) {
    const int h = std::max(1, static_cast<int>(std::floor(s * x0.dim(1))));
    const int w = std::max(1, static_cast<int>(std::floor(s * x0.dim(2))));
    const Var d = ad::sub(ad::resize_bilinear(x_hat, h, w), ad::resize_bilinear(x0, h, w));
    total = ad::add(total, ad::mean(ad::abs(d)));
  }
  return total;
}

Var pixel_multiscale_l1(const Var& x_hat, const Var& x0, const LossConfig& config) {
  return ad::add(pixel_l1(x_hat, x0), multiscale_l1(x_hat, x0, config.scales));
}

Var perceptual_loss(const Var& x_hat, const Var& x0, const FeatureExtractor& extractor,
                    const LossConfig& config) {
  require_pair(x_hat, x0, "perceptual_loss");
  if (config.layer_weights.size() != config.feature_layers.size()) {
    throw ParameterError("perceptual_loss: one weight per feature layer required");
  }
  const auto fa = extractor.features(x_hat, config.feature_layers);
  const auto fb = extractor.features(x0.detach(), config.feature_layers);
  std::vector<Var> terms;
  std::vector<double> weights;
  for (std::size_t i = 0; i < config.feature_layers.size(); ++i) {
    const int id = config.feature_layers[i];
    terms.push_back(ad::mean(ad::square(ad::sub(fa.at(id), fb.at(id)))));
    weights.push_back(config.layer_weights[i]);
  }
  if (terms.empty()) return Var::scalar(0.0);
  return ad::weighted_sum(terms, weights);
}

Var ssim_index(const Var& x, const Var& y, const LossConfig& config) {
  require_pair(x, y, "ssim");
  if (x.dim(1) < config.ssim_window || x.dim(2) < config.ssim_window) {
    throw DimensionError("ssim: image " + std::to_string(x.dim(1)) + "x" + std::to_string(x.dim(2)) +
                         " smaller than window " + std::to_string(config.ssim_window));
  }
  const std::vector<double> k = gaussian_window(config.ssim_window, config.ssim_sigma);
  const Var mx = ad::filter_valid(x, k);
  const Var my = ad::filter_valid(y, k);
  const Var mx2 = ad::square(mx), my2 = ad::square(my), mxy = ad::mul(mx, my);
  const Var vx = ad::sub(ad::filter_valid(ad::square(x), k), mx2);
  const Var vy = ad::sub(ad::filter_valid(ad::square(y), k), my2);
  const Var cxy = ad::sub(ad::filter_valid(ad::mul(x, y), k), mxy);
  const Var num = ad::mul(ad::add_scalar(ad::scale(mxy, 2.0), config.ssim_c1),
                          ad::add_scalar(ad::scale(cxy, 2.0), config.ssim_c2));
  const Var den = ad::mul(ad::add_scalar(ad::add(mx2, my2), config.ssim_c1),
                          ad::add_scalar(ad::add(vx, vy), config.ssim_c2));
  return ad::mean(ad::div(num, den));
}

Var ssim_loss(const Var& x_hat, const Var& x0, const LossConfig& config) {
  return ad::add_scalar(ad::scale(ssim_index(x_hat, x0, config), -1.0), 1.0);
}

Var fft_magnitude_loss(const Var& x_hat, const Var& x0) {
  require_pair(x_hat, x0, "fft_magnitude_loss");
  return ad::mean(ad::abs(ad::sub(ad::rfft2_magnitude(x_hat), ad::rfft2_magnitude(x0))));
}

CdcBreakdown cdc_total(const Var& x_hat, const Var& x0, const FeatureExtractor& extractor,
                       const LossConfig& config) {
  require_pair(x_hat, x0, "cdc_total");
  CdcBreakdown out;
  std::vector<Var> terms;
  auto take = [&terms](const Var& v, double& slot) {
    slot = v.item();
    terms.push_back(v);
  };
  if (config.use_pixel) take(pixel_l1(x_hat, x0), out.pixel);
  if (config.use_multiscale) take(multiscale_l1(x_hat, x0, config.scales), out.multiscale);
  if (config.use_perceptual) take(perceptual_loss(x_hat, x0, extractor, config), out.perceptual);
  if (config.use_ssim) take(ssim_loss(x_hat, x0, config), out.ssim);
  if (config.use_fft) take(fft_magnitude_loss(x_hat, x0), out.fft);
  out.total = Var::scalar(0.0);
  for (const Var& t : terms) out.total = ad::add(out.total, t);
  return out;
}

}  // namespace aquadiff
