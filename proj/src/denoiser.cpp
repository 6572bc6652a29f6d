#include "aquadiff/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "aquadiff/config_text.hpp"

namespace aquadiff {

using ad::Var;

// ---------------------------------------------------------------------------
// Configuration

bool DenoiserConfig::attention_at(int level) const {
  const int res = resolution_at(level);
  return std::find(attention_resolutions.begin(), attention_resolutions.end(), res) !=
         attention_resolutions.end();
}

bool DenoiserConfig::cross_attention_at(int level) const {
  if (cross_attn_levels.empty()) return attention_at(level);
  return std::find(cross_attn_levels.begin(), cross_attn_levels.end(), level) !=
         cross_attn_levels.end();
}

void DenoiserConfig::validate() const {
  if (base_channels < 4 || channel_multipliers.empty() || num_res_blocks < 1) {
    throw ParameterError("denoiser: base_channels >= 4, non-empty multipliers, >= 1 block required");
  }
  for (int m : channel_multipliers) {
    if (m < 1) throw ParameterError("denoiser: channel multipliers must be >= 1");
  }
  const int div = 1 << (levels() - 1);
  if (image_size < div || image_size % div != 0) {
    throw DimensionError("denoiser: image_size " + std::to_string(image_size) +
                         " not divisible by 2^(levels-1) = " + std::to_string(div));
  }
  for (int r : attention_resolutions) {
    bool found = false;
    for (int l = 0; l < levels(); ++l) found = found || resolution_at(l) == r;
    if (!found) {
      throw ParameterError("denoiser: attention resolution " + std::to_string(r) +
                           " is not produced by the multiplier ladder");
    }
  }
  for (int l : cross_attn_levels) {
    if (l < 0 || l >= levels()) throw ParameterError("denoiser: cross_attn_levels out of range");
  }
  if (time_embed_dim < 2 || base_channels % 2 != 0) {
    throw ParameterError("denoiser: time embedding dimensions must be even");
  }
  if (residual_dense && (rdb_growth < 1 || rdb_layers < 1)) {
    throw ParameterError("denoiser: rdb_growth and rdb_layers must be >= 1");
  }
  if (head_count < 1 || norm_groups < 1) throw ParameterError("denoiser: head_count, norm_groups >= 1");
  for (int l = 0; l < levels(); ++l) {
    if ((attention_at(l) || cross_attention_at(l)) && channels_at(l) % head_count != 0) {
      throw ParameterError("denoiser: attention width not divisible by head_count");
    }
    if (cross_attention_at(l) && cross_attn_pos_enc && channels_at(l) % 4 != 0) {
      throw ParameterError("denoiser: position codes need widths divisible by 4");
    }
  }
}

std::string DenoiserConfig::to_text() const {
  std::ostringstream os;
  os << "image_size=" << image_size << "\n"
     << "base_channels=" << base_channels << "\n"
     << "channel_multipliers=" << join_ints(channel_multipliers) << "\n"
     << "num_res_blocks=" << num_res_blocks << "\n"
     << "attention_resolutions=" << join_ints(attention_resolutions) << "\n"
     << "cross_attn_levels=" << join_ints(cross_attn_levels) << "\n"
     << "rdb_growth=" << rdb_growth << "\n"
     << "rdb_layers=" << rdb_layers << "\n"
     << "time_embed_dim=" << time_embed_dim << "\n"
     << "head_count=" << head_count << "\n"
     << "norm_groups=" << norm_groups << "\n"
     << "residual_dense=" << (residual_dense ? 1 : 0) << "\n"
     << "dense_skips=" << (dense_skips ? 1 : 0) << "\n"
     << "concat_condition=" << (concat_condition ? 1 : 0) << "\n"
     << "cross_attn_pos_enc=" << (cross_attn_pos_enc ? 1 : 0) << "\n"
     << "circular_padding=" << (circular_padding ? 1 : 0) << "\n"
     << "init_seed=" << init_seed << "\n";
  return os.str();
}

DenoiserConfig DenoiserConfig::from_map(const std::map<std::string, std::string>& kv) {
  DenoiserConfig c;
  read_value(kv, "image_size", c.image_size);
  read_value(kv, "base_channels", c.base_channels);
  read_value(kv, "channel_multipliers", c.channel_multipliers);
  read_value(kv, "num_res_blocks", c.num_res_blocks);
  read_value(kv, "attention_resolutions", c.attention_resolutions);
  read_value(kv, "cross_attn_levels", c.cross_attn_levels);
  read_value(kv, "rdb_growth", c.rdb_growth);
  read_value(kv, "rdb_layers", c.rdb_layers);
  read_value(kv, "time_embed_dim", c.time_embed_dim);
  read_value(kv, "head_count", c.head_count);
  read_value(kv, "norm_groups", c.norm_groups);
  read_value(kv, "residual_dense", c.residual_dense);
  read_value(kv, "dense_skips", c.dense_skips);
  read_value(kv, "concat_condition", c.concat_condition);
  read_value(kv, "cross_attn_pos_enc", c.cross_attn_pos_enc);
  read_value(kv, "circular_padding", c.circular_padding);
  read_value(kv, "init_seed", c.init_seed);
  return c;
}

DenoiserConfig DenoiserConfig::desk() { return DenoiserConfig{}; }

DenoiserConfig DenoiserConfig::full_scale() {
  DenoiserConfig c;
  c.image_size = 256;
  c.base_channels = 64;
  c.channel_multipliers = {1, 2, 4, 8, 16};
  c.num_res_blocks = 3;
  c.attention_resolutions = {16, 32};
  c.rdb_growth = 32;
  c.rdb_layers = 4;
  c.time_embed_dim = 256;
  c.head_count = 4;
  c.norm_groups = 32;
  c.concat_condition = false;
  return c;
}

DenoiserConfig DenoiserConfig::standard_unet(const DenoiserConfig& like) {
  DenoiserConfig c = like;
  c.residual_dense = false;
  c.dense_skips = false;
  c.attention_resolutions = {c.resolution_at(c.levels() - 1)};
  c.cross_attn_levels.clear();
  return c;
}

// ---------------------------------------------------------------------------
// Weights

Var& DenoiserWeights::add(const std::string& name, ad::Shape shape, std::vector<double> values) {
  if (index_.count(name)) throw ParameterError("duplicate parameter name " + name);
  index_[name] = entries_.size();
  entries_.emplace_back(name, Var::parameter(std::move(shape), std::move(values)));
  return entries_.back().second;
}

Var& DenoiserWeights::get(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ParameterError("unknown parameter " + name);
  return entries_[it->second].second;
}

const Var& DenoiserWeights::get(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ParameterError("unknown parameter " + name);
  return entries_[it->second].second;
}

std::size_t DenoiserWeights::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.size();
  return n;
}

void DenoiserWeights::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

bool DenoiserWeights::all_finite() const {
  for (const auto& e : entries_) {
    for (double v : e.second.value()) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Building blocks

std::vector<double> timestep_embedding(double t, int dim) {
  if (dim < 2 || dim % 2 != 0) throw ParameterError("timestep_embedding: dim must be even");
  const int half = dim / 2;
  std::vector<double> e(static_cast<std::size_t>(dim));
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    e[i] = std::sin(t * freq);
    e[half + i] = std::cos(t * freq);
  }
  return e;
}

std::vector<double> position_encoding_2d(int channels, int h, int w) {
  if (channels % 4 != 0) throw ParameterError("position_encoding_2d: channels must be divisible by 4");
  const int quarter = channels / 4;
  const double res = std::max(2, std::max(h, w));
  std::vector<double> pe(static_cast<std::size_t>(channels) * h * w);
  auto plane = [&](int c) { return pe.data() + static_cast<std::size_t>(c) * h * w; };
  for (int i = 0; i < quarter; ++i) {
    const double freq = std::numbers::pi * std::exp(-std::log(res) * i / quarter);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const std::size_t p = static_cast<std::size_t>(y) * w + x;
        plane(i)[p] = std::sin(y * freq);
        plane(quarter + i)[p] = std::cos(y * freq);
        plane(2 * quarter + i)[p] = std::sin(x * freq);
        plane(3 * quarter + i)[p] = std::cos(x * freq);
      }
    }
  }
  return pe;
}

namespace {

Var conv(const Var& x, const ConvParams& p, ad::Padding padding) {
  const int k = p.weight.dim(2);
  return ad::conv2d(x, p.weight, p.bias, p.stride, k / 2, padding);
}

Var norm(const Var& x, const NormParams& p) { return ad::group_norm(x, p.gamma, p.beta, p.groups); }

}  // namespace

Var cross_attention(const Var& x_feat, const Var& y_feat, const CrossAttentionParams& p, int heads,
                    bool pos_enc, std::vector<double>* weights_out) {
  if (x_feat.rank() != 3 || y_feat.rank() != 3 || x_feat.dim(1) != y_feat.dim(1) ||
      x_feat.dim(2) != y_feat.dim(2)) {
    throw DimensionError("cross_attention: x and y feature maps must share spatial dims");
  }
  Var xn = p.norm_x ? norm(x_feat, *p.norm_x) : x_feat;
  Var yn = p.norm_y ? norm(y_feat, *p.norm_y) : y_feat;
  Var xq = xn, yk = yn;
  if (pos_enc) {
    const int h = x_feat.dim(1), w = x_feat.dim(2);
    xq = ad::add(xn, Var::constant(xn.shape(), position_encoding_2d(xn.dim(0), h, w)));
    yk = ad::add(yn, Var::constant(yn.shape(), position_encoding_2d(yn.dim(0), h, w)));
  }
  const Var q = conv(xq, p.q, ad::Padding::kZero);
  const Var k = conv(yk, p.k, ad::Padding::kZero);
  const Var v = conv(yn, p.v, ad::Padding::kZero);
  Var attended = ad::attention(q, k, v, heads, weights_out);
  if (p.out) attended = conv(attended, *p.out, ad::Padding::kZero);
  if (attended.shape() != x_feat.shape()) {
    throw DimensionError("cross_attention: value projection width does not match x channels");
  }
  return ad::add(x_feat, attended);
}

Var self_attention(const Var& x_feat, const CrossAttentionParams& p, int heads) {
  return cross_attention(x_feat, x_feat, p, heads, false);
}

Var rdb_forward(const Var& x_feat, const RdbParams& p, const Var& temb, ad::Padding padding) {
  Var x = p.entry ? conv(x_feat, *p.entry, padding) : x_feat;
  Var h0 = p.norm ? ad::silu(norm(x, *p.norm)) : x;
  if (temb.defined() && p.time_proj) {
    h0 = ad::add_channel_bias(h0, ad::linear(ad::silu(temb), p.time_proj->weight, p.time_proj->bias));
  }
  if (p.dense.empty()) throw ParameterError("rdb_forward: block has no dense layers");
  std::vector<Var> features{h0};
  for (const ConvParams& layer : p.dense) {
    features.push_back(ad::silu(conv(ad::concat_channels(features), layer, padding)));
  }
  const Var fused = conv(ad::concat_channels(features), p.fuse, padding);
  if (fused.shape() != x.shape()) throw DimensionError("rdb_forward: fusion width mismatch");
  return ad::add(x, fused);
}

Var resblock_forward(const Var& x_feat, const ResBlockParams& p, const Var& temb,
                     ad::Padding padding) {
  Var h = conv(ad::silu(norm(x_feat, p.norm1)), p.conv1, padding);
  if (temb.defined()) {
    h = ad::add_channel_bias(h, ad::linear(ad::silu(temb), p.time_proj.weight, p.time_proj.bias));
  }
  h = conv(ad::silu(norm(h, p.norm2)), p.conv2, padding);
  const Var skip = p.skip ? conv(x_feat, *p.skip, padding) : x_feat;
  return ad::add(skip, h);
}

// ---------------------------------------------------------------------------
// Denoiser

int Denoiser::groups_for(int channels) const {
  int g = std::min(config_.norm_groups, channels);
  while (channels % g != 0) --g;
  return g;
}

ConvParams Denoiser::make_conv(const std::string& name, int in, int out, int k, int stride,
                               bool zero_init) {
  const std::size_t n = static_cast<std::size_t>(out) * in * k * k;
  std::vector<double> w(n, 0.0);
  if (!zero_init) {
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(in * k * k)));
    for (double& v : w) v = dist(init_rng_);
  }
  ConvParams p;
  p.weight = weights_.add(name + ".weight", {out, in, k, k}, std::move(w));
  p.bias = weights_.add(name + ".bias", {out}, std::vector<double>(static_cast<std::size_t>(out), 0.0));
  p.stride = stride;
  return p;
}

NormParams Denoiser::make_norm(const std::string& name, int channels) {
  NormParams p;
  p.gamma = weights_.add(name + ".gamma", {channels}, std::vector<double>(channels, 1.0));
  p.beta = weights_.add(name + ".beta", {channels}, std::vector<double>(channels, 0.0));
  p.groups = groups_for(channels);
  return p;
}

LinearParams Denoiser::make_linear(const std::string& name, int in, int out, double std_dev) {
  std::normal_distribution<double> dist(0.0, std_dev);
  std::vector<double> w(static_cast<std::size_t>(out) * in);
  for (double& v : w) {
    do {
      v = dist(init_rng_);
    } while (std::abs(v) > 2.0 * std_dev);
  }
  LinearParams p;
  p.weight = weights_.add(name + ".weight", {out, in}, std::move(w));
  p.bias = weights_.add(name + ".bias", {out}, std::vector<double>(static_cast<std::size_t>(out), 0.0));
  return p;
}

CrossAttentionParams Denoiser::make_attention(const std::string& name, int channels) {
  auto projection = [&](const std::string& sub) {
    // Truncated normal, std 0.02.
    LinearParams lin = make_linear(name + "." + sub, channels, channels, 0.02);
    ConvParams c;
    c.weight = lin.weight;
    c.weight.node()->shape = {channels, channels, 1, 1};
    c.bias = lin.bias;
    return c;
  };
  CrossAttentionParams p;
  p.norm_x = make_norm(name + ".norm_x", channels);
  p.norm_y = make_norm(name + ".norm_y", channels);
  p.q = projection("q");
  p.k = projection("k");
  p.v = projection("v");
  p.out = projection("out");
  return p;
}

Denoiser::Block Denoiser::make_block(const std::string& name, int in, int out) {
  Block b;
  const int temb = config_.time_embed_dim;
  if (config_.residual_dense) {
    RdbParams r;
    if (in != out) r.entry = make_conv(name + ".entry", in, out, 1, 1);
    r.norm = make_norm(name + ".norm", out);
    r.time_proj = make_linear(name + ".time", temb, out, 0.02);
    int width = out;
    for (int i = 0; i < config_.rdb_layers; ++i) {
      r.dense.push_back(make_conv(name + ".dense" + std::to_string(i), width, config_.rdb_growth, 3, 1));
      width += config_.rdb_growth;
    }
    r.fuse = make_conv(name + ".fuse", width, out, 1, 1);
    b.rdb = std::move(r);
  } else {
    ResBlockParams r;
    r.norm1 = make_norm(name + ".norm1", in);
    r.conv1 = make_conv(name + ".conv1", in, out, 3, 1);
    r.time_proj = make_linear(name + ".time", temb, out, 0.02);
    r.norm2 = make_norm(name + ".norm2", out);
    r.conv2 = make_conv(name + ".conv2", out, out, 3, 1);
    if (in != out) r.skip = make_conv(name + ".skip", in, out, 1, 1);
    b.res = std::move(r);
  }
  return b;
}

Denoiser::Denoiser(DenoiserConfig config) : config_(std::move(config)), init_rng_(config_.init_seed) {
  config_.validate();
  const int L = config_.levels();
  const int c0 = config_.channels_at(0);
  time1_ = make_linear("time.0", config_.base_channels, config_.time_embed_dim, 0.02);
  time2_ = make_linear("time.1", config_.time_embed_dim, config_.time_embed_dim, 0.02);
  conv_in_ = make_conv("conv_in", config_.concat_condition ? 6 : 3, c0, 3, 1);

  int deepest_cross = -1;
  for (int l = 0; l < L; ++l) {
    if (config_.cross_attention_at(l)) deepest_cross = l;
  }
  if (deepest_cross >= 0) y_in_ = make_conv("y_enc.0", 3, c0, 3, 1);

  levels_.resize(L);
  std::vector<std::vector<int>> skip_widths(L);
  skip_widths[0].push_back(c0);
  int cur = c0;
  for (int l = 0; l < L; ++l) {
    const std::string pre = "enc." + std::to_string(l);
    const int width = config_.channels_at(l);
    Level& lv = levels_[l];
    for (int b = 0; b < config_.num_res_blocks; ++b) {
      lv.enc_blocks.push_back(make_block(pre + ".block" + std::to_string(b), cur, width));
      cur = width;
      skip_widths[l].push_back(width);
    }
    if (config_.attention_at(l)) lv.enc_self = make_attention(pre + ".self_attn", width);
    if (config_.cross_attention_at(l)) lv.enc_cross = make_attention(pre + ".cross_attn", width);
    if (l + 1 < L) {
      lv.down = make_conv(pre + ".down", width, width, 3, 2);
      skip_widths[l + 1].push_back(width);
      if (l + 1 <= deepest_cross) {
        levels_[l + 1].y_down =
            make_conv("y_enc." + std::to_string(l + 1), width, config_.channels_at(l + 1), 3, 2);
      }
    }
  }

  const int deep = config_.channels_at(L - 1);
  mid_blocks_.push_back(make_block("mid.block0", cur, deep));
  if (config_.attention_at(L - 1)) mid_self_ = make_attention("mid.self_attn", deep);
  if (config_.cross_attention_at(L - 1)) mid_cross_ = make_attention("mid.cross_attn", deep);
  mid_blocks_.push_back(make_block("mid.block1", deep, deep));
  cur = deep;

  for (int l = L - 1; l >= 0; --l) {
    const std::string pre = "dec." + std::to_string(l);
    const int width = config_.channels_at(l);
    Level& lv = levels_[l];
    const int skip = config_.dense_skips
                         ? std::accumulate(skip_widths[l].begin(), skip_widths[l].end(), 0)
                         : skip_widths[l].back();
    int in = cur + skip;
    for (int b = 0; b < config_.num_res_blocks; ++b) {
      lv.dec_blocks.push_back(make_block(pre + ".block" + std::to_string(b), in, width));
      in = width;
    }
    if (config_.attention_at(l)) lv.dec_self = make_attention(pre + ".self_attn", width);
    if (config_.cross_attention_at(l)) lv.dec_cross = make_attention(pre + ".cross_attn", width);
    cur = width;
    if (l > 0) {
      lv.up = make_conv(pre + ".up", width, config_.channels_at(l - 1), 3, 1);
      cur = config_.channels_at(l - 1);
    }
  }
  out_norm_ = make_norm("out.norm", cur);
  out_conv_ = make_conv("out.conv", cur, 3, 3, 1, /*zero_init=*/true);
}

Var Denoiser::run_block(const Block& b, const Var& h, const Var& temb) const {
  const auto padding = config_.circular_padding ? ad::Padding::kCircular : ad::Padding::kZero;
  return b.rdb ? rdb_forward(h, *b.rdb, temb, padding) : resblock_forward(h, *b.res, temb, padding);
}

Var Denoiser::run_attention(const std::optional<CrossAttentionParams>& self,
                            const std::optional<CrossAttentionParams>& cross, const Var& h,
                            const Var& yfeat, std::vector<double>* capture) const {
  Var out = h;
  if (self) out = self_attention(out, *self, config_.head_count);
  if (cross) {
    out = cross_attention(out, yfeat, *cross, config_.head_count, config_.cross_attn_pos_enc, capture);
  }
  return out;
}

Var Denoiser::forward(const Var& x_t, const Var& y, int t) const {
  return forward_impl(x_t, y, t, -1, nullptr);
}

Var Denoiser::forward_impl(const Var& x_t, const Var& y, int t, int capture_level,
                           std::vector<double>* capture) const {
  if (x_t.rank() != 3 || x_t.dim(0) != 3 || x_t.shape() != y.shape()) {
    throw DimensionError("denoise: x_t and y must both be [3, H, W]");
  }
  const int L = config_.levels();
  const int div = 1 << (L - 1);
  if (x_t.dim(1) % div != 0 || x_t.dim(2) % div != 0) {
    throw DimensionError("denoise: spatial size must be divisible by " + std::to_string(div));
  }
  const auto padding = config_.circular_padding ? ad::Padding::kCircular : ad::Padding::kZero;
  auto cv = [padding](const Var& x, const ConvParams& p) { return conv(x, p, padding); };

  const Var sinus = Var::constant({config_.base_channels}, timestep_embedding(t, config_.base_channels));
  const Var temb = ad::linear(ad::silu(ad::linear(sinus, time1_.weight, time1_.bias)), time2_.weight,
                              time2_.bias);

  std::vector<Var> yfeat(L);
  if (y_in_) {
    yfeat[0] = cv(y, *y_in_);
    for (int l = 1; l < L && levels_[l].y_down; ++l) yfeat[l] = cv(ad::silu(yfeat[l - 1]), *levels_[l].y_down);
  }

  Var h = cv(config_.concat_condition ? ad::concat_channels({x_t, y}) : x_t, conv_in_);
  std::vector<std::vector<Var>> skips(L);
  skips[0].push_back(h);
  for (int l = 0; l < L; ++l) {
    const Level& lv = levels_[l];
    for (const Block& b : lv.enc_blocks) {
      h = run_block(b, h, temb);
      skips[l].push_back(h);
    }
    if (lv.enc_self || lv.enc_cross) {
      h = run_attention(lv.enc_self, lv.enc_cross, h, yfeat[l], capture_level == l ? capture : nullptr);
      skips[l].back() = h;
    }
    if (lv.down) {
      h = cv(h, *lv.down);
      skips[l + 1].push_back(h);
    }
  }

  h = run_block(mid_blocks_[0], h, temb);
  h = run_attention(mid_self_, mid_cross_, h, yfeat[L - 1], nullptr);
  h = run_block(mid_blocks_[1], h, temb);

  for (int l = L - 1; l >= 0; --l) {
    const Level& lv = levels_[l];
    std::vector<Var> parts{h};
    if (config_.dense_skips) {
      parts.insert(parts.end(), skips[l].begin(), skips[l].end());
    } else {
      parts.push_back(skips[l].back());
    }
    h = ad::concat_channels(parts);
    for (const Block& b : lv.dec_blocks) h = run_block(b, h, temb);
    h = run_attention(lv.dec_self, lv.dec_cross, h, yfeat[l], nullptr);
    if (lv.up) h = cv(ad::upsample_nearest2x(h), *lv.up);
  }
  return cv(ad::silu(norm(h, out_norm_)), out_conv_);
}

Image Denoiser::denoise(const Image& x_t, const Image& y, int t) const {
  const ad::NoGradGuard no_grad;
  return ad::to_image(forward(ad::from_image(x_t), ad::from_image(y), t));
}

std::vector<double> Denoiser::cross_attention_weights(const Image& x_t, const Image& y, int t,
                                                      int level) const {
  const ad::NoGradGuard no_grad;
  std::vector<double> w;
  forward_impl(ad::from_image(x_t), ad::from_image(y), t, level, &w);
  return w;
}

std::size_t parameter_count(const DenoiserConfig& config) {
  return Denoiser(config).weights().scalar_count();
}

}  // namespace aquadiff
