#pragma once

// Differentiable operations. Feature maps are [C, H, W] row-major; vectors [n];
// matrices [rows, cols].

#include <vector>

#include "aquadiff/autodiff.hpp"
#include "aquadiff/image.hpp"

namespace aquadiff::ad {

enum class Padding { kZero, kCircular };

// Elementwise; operands must have identical shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var square(const Var& a);
Var abs(const Var& a);
Var silu(const Var& a);
Var relu(const Var& a);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

Var sum(const Var& a);
Var mean(const Var& a);
/// Weighted sum of scalars.
Var weighted_sum(const std::vector<Var>& scalars, const std::vector<double>& weights);

/// y = W x + b for x: [n], W: [m, n], b: [m].
Var linear(const Var& x, const Var& weight, const Var& bias);

/// x: [Cin, H, W], weight: [Cout, Cin, k, k], bias: [Cout] or undefined.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad,
           Padding padding = Padding::kZero);

/// Per-sample group normalisation with per-channel affine.
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5);

/// x: [C, H, W] + v: [C] broadcast over space.
Var add_channel_bias(const Var& x, const Var& v);

Var concat_channels(const std::vector<Var>& parts);
Var upsample_nearest2x(const Var& x);
Var avg_pool2x(const Var& x);

/// Scaled dot-product attention over flattened positions.
/// q: [dk, N...], k: [dk, M...], v: [dv, M...] -> [dv, N...] (q's trailing shape).
/// Channels are split evenly into `heads` heads. Attention weights of the last
/// call can be captured through `weights_out` ([heads, N, M]).
Var attention(const Var& q, const Var& k, const Var& v, int heads,
              std::vector<double>* weights_out = nullptr);

/// Bilinear resize with the same sampling rule as aquadiff::resize.
Var resize_bilinear(const Var& x, int new_height, int new_width);

/// Separable filtering with a symmetric 1-D kernel, 'valid' region only.
Var filter_valid(const Var& x, const std::vector<double>& kernel);

/// |RFFT2| per channel: [C, H, W] -> [C, H, W/2 + 1].
Var rfft2_magnitude(const Var& x);

// Image <-> [C, H, W] tensor.
Var from_image(const Image& img, bool requires_grad = false);
Image to_image(const Var& x);

}  // namespace aquadiff::ad
