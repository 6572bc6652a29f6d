#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "aquadiff/autodiff.hpp"
#include "aquadiff/image.hpp"
#include "aquadiff/ops.hpp"

namespace aquadiff {

struct DenoiserConfig {
  int image_size = 32;
  int base_channels = 16;
  std::vector<int> channel_multipliers{1, 2, 4};
  int num_res_blocks = 2;
  std::vector<int> attention_resolutions{8, 16};
  // Ladder levels receiving cross-attention; empty means the levels matching
  // attention_resolutions.
  std::vector<int> cross_attn_levels;
  int rdb_growth = 8;
  int rdb_layers = 3;
  int time_embed_dim = 64;
  int head_count = 1;
  int norm_groups = 8;
  // false gives the plain residual-block / mirror-skip U-Net.
  bool residual_dense = true;
  bool dense_skips = true;
  // Also feed y to the input convolution alongside x_t.
  bool concat_condition = true;
  // Add 2-D sinusoidal position codes to the query/key inputs of cross-attention.
  bool cross_attn_pos_enc = true;
  bool circular_padding = false;
  std::uint64_t init_seed = 0;

  int levels() const { return static_cast<int>(channel_multipliers.size()); }
  int channels_at(int level) const { return base_channels * channel_multipliers.at(level); }
  int resolution_at(int level) const { return image_size >> level; }
  bool attention_at(int level) const;
  bool cross_attention_at(int level) const;

  void validate() const;

  /// Flat key=value lines; the digest and the checkpoint header use this text.
  std::string to_text() const;
  static DenoiserConfig from_map(const std::map<std::string, std::string>& kv);

  /// Scaled-down configuration used for desk-scale training.
  static DenoiserConfig desk();
  /// Full-size layout (base 64, {1,2,4,8,16}, 3 blocks, attention at 16 and 32).
  static DenoiserConfig full_scale();
  /// Standard diffusion U-Net: residual blocks, mirror skips, attention at the
  /// coarsest level only.
  static DenoiserConfig standard_unet(const DenoiserConfig& like);
};

/// Named, ordered learnable parameters.
class DenoiserWeights {
 public:
  ad::Var& add(const std::string& name, ad::Shape shape, std::vector<double> values);
  ad::Var& get(const std::string& name);
  const ad::Var& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t tensor_count() const { return entries_.size(); }
  std::size_t scalar_count() const;
  const std::vector<std::pair<std::string, ad::Var>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, ad::Var>>& entries() { return entries_; }

  void zero_grad();
  bool all_finite() const;

 private:
  std::vector<std::pair<std::string, ad::Var>> entries_;
  std::map<std::string, std::size_t> index_;
};

// Parameter groups referenced by the building blocks. Vars are shared handles
// into a DenoiserWeights store.
struct ConvParams {
  ad::Var weight;  // [out, in, k, k]
  ad::Var bias;    // [out]
  int stride = 1;
  int out_channels() const { return weight.dim(0); }
};

struct NormParams {
  ad::Var gamma;
  ad::Var beta;
  int groups = 8;
};

struct LinearParams {
  ad::Var weight;  // [out, in]
  ad::Var bias;
};

struct RdbParams {
  std::optional<ConvParams> entry;  // 1x1 projection when widths differ
  std::optional<NormParams> norm;
  std::optional<LinearParams> time_proj;
  std::vector<ConvParams> dense;  // 3x3, growth channels each
  ConvParams fuse;                // 1x1 back to block width
};

struct ResBlockParams {
  NormParams norm1, norm2;
  ConvParams conv1, conv2;
  std::optional<ConvParams> skip;
  LinearParams time_proj;
};

struct CrossAttentionParams {
  std::optional<NormParams> norm_x;
  std::optional<NormParams> norm_y;
  ConvParams q, k, v;  // 1x1
  std::optional<ConvParams> out;
};

/// Sinusoidal embedding: first half sin(t f_i), second half cos(t f_i),
/// f_i = 10000^(-i / (dim/2)).
std::vector<double> timestep_embedding(double t, int dim);

/// 2-D sinusoidal position code, [channels, h, w]; half the channels encode rows.
std::vector<double> position_encoding_2d(int channels, int h, int w);

/// x + Softmax(Q(x) K(y)^T / sqrt(d_k)) V(y) over flattened positions of y.
ad::Var cross_attention(const ad::Var& x_feat, const ad::Var& y_feat,
                        const CrossAttentionParams& p, int heads = 1, bool pos_enc = false,
                        std::vector<double>* weights_out = nullptr);

/// Self-attention is cross-attention of a map with itself.
ad::Var self_attention(const ad::Var& x_feat, const CrossAttentionParams& p, int heads = 1);

/// Residual dense block. temb is the block's time embedding input (optional).
ad::Var rdb_forward(const ad::Var& x_feat, const RdbParams& p, const ad::Var& temb = {},
                    ad::Padding padding = ad::Padding::kZero);

ad::Var resblock_forward(const ad::Var& x_feat, const ResBlockParams& p, const ad::Var& temb,
                         ad::Padding padding = ad::Padding::kZero);

/// Conditional noise predictor f(x_t, y, t).
class Denoiser {
 public:
  explicit Denoiser(DenoiserConfig config);
  // Parameter handles are shared, so a copy would alias the weights.
  Denoiser(const Denoiser&) = delete;
  Denoiser& operator=(const Denoiser&) = delete;
  Denoiser(Denoiser&&) = default;
  Denoiser& operator=(Denoiser&&) = default;

  const DenoiserConfig& config() const { return config_; }
  DenoiserWeights& weights() { return weights_; }
  const DenoiserWeights& weights() const { return weights_; }

  /// x_t, y: [3, H, W] in model space. Returns the noise estimate, same shape.
  ad::Var forward(const ad::Var& x_t, const ad::Var& y, int t) const;

  /// Gradient-free evaluation on images.
  Image denoise(const Image& x_t, const Image& y, int t) const;

  /// Attention maps of the last forward pass are not retained; this returns the
  /// cross-attention weights at the given level for one evaluation (tests only).
  std::vector<double> cross_attention_weights(const Image& x_t, const Image& y, int t,
                                              int level) const;

 private:
  struct Block {
    std::optional<RdbParams> rdb;
    std::optional<ResBlockParams> res;
  };
  struct Level {
    std::vector<Block> enc_blocks;
    std::optional<CrossAttentionParams> enc_self, enc_cross;
    std::optional<ConvParams> down;
    std::vector<Block> dec_blocks;
    std::optional<CrossAttentionParams> dec_self, dec_cross;
    std::optional<ConvParams> up;
    std::optional<ConvParams> y_down;  // y pyramid step into this level
  };

  ad::Var run_block(const Block& b, const ad::Var& h, const ad::Var& temb) const;
  ad::Var run_attention(const std::optional<CrossAttentionParams>& self,
                        const std::optional<CrossAttentionParams>& cross, const ad::Var& h,
                        const ad::Var& yfeat, std::vector<double>* capture) const;
  ad::Var forward_impl(const ad::Var& x_t, const ad::Var& y, int t, int capture_level,
                       std::vector<double>* capture) const;

  // Builders.
  ConvParams make_conv(const std::string& name, int in, int out, int k, int stride,
                       bool zero_init = false);
  NormParams make_norm(const std::string& name, int channels);
  LinearParams make_linear(const std::string& name, int in, int out, double std_dev);
  CrossAttentionParams make_attention(const std::string& name, int channels);
  Block make_block(const std::string& name, int in, int out);
  int groups_for(int channels) const;

  DenoiserConfig config_;
  DenoiserWeights weights_;
  std::mt19937_64 init_rng_;

  LinearParams time1_, time2_;
  ConvParams conv_in_;
  std::optional<ConvParams> y_in_;
  std::vector<Level> levels_;
  std::vector<Block> mid_blocks_;
  std::optional<CrossAttentionParams> mid_self_, mid_cross_;
  NormParams out_norm_;
  ConvParams out_conv_;
};

/// Number of learnable scalars a configuration produces.
std::size_t parameter_count(const DenoiserConfig& config);

}  // namespace aquadiff
