#include "aquadiff/ops.hpp"

#include <fftw3.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <complex>
#include <mutex>
#include <stdexcept>

namespace aquadiff::ad {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMapR = Eigen::Map<const MatR>;

// Eigen kernels peel unaligned heads differently depending on the buffer
// address, so results could change from run to run. All Eigen arithmetic runs
// on owned (aligned) matrices; these copy in and out of plain buffers.
MatR load(const double* p, std::size_t rows, std::size_t cols) {
  return CMapR(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void store(const MatR& m, double* dst) { std::copy(m.data(), m.data() + m.size(), dst); }

void accumulate(const MatR& m, double* dst) {
  const double* src = m.data();
  for (Eigen::Index i = 0; i < m.size(); ++i) dst[i] += src[i];
}

void require_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void require_rank(const Var& a, int rank, const char* op) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(a.shape()));
  }
}

Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

template <class Fwd, class Bwd>
Var unary(const Var& a, Fwd fwd, Bwd dfdx) {
  std::vector<double> out(a.size());
  const auto x = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  return make_result(a.shape(), std::move(out), {a}, [dfdx](Node& n) {
    Node& p = parent(n, 0);
    if (!p.requires_grad) return;
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * dfdx(p.value[i], n.value[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  std::vector<double> out(a.value().begin(), a.value().end());
  const auto y = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      Node& p = parent(n, k);
      if (!p.requires_grad) continue;
      auto& g = p.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  std::vector<double> out(a.value().begin(), a.value().end());
  const auto y = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      Node& p = parent(n, k);
      if (!p.requires_grad) continue;
      auto& g = p.ensure_grad();
      const double sign = k == 0 ? 1.0 : -1.0;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * n.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  std::vector<double> out(a.size());
  const auto x = a.value();
  const auto y = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& n) {
    Node& pa = parent(n, 0);
    Node& pb = parent(n, 1);
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pa.value[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  require_same(a, b, "div");
  std::vector<double> out(a.size());
  const auto x = a.value();
  const auto y = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& n) {
    Node& pa = parent(n, 0);
    Node& pb = parent(n, 1);
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] / pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i] * n.value[i] / pb.value[i];
    }
  });
}

Var scale(const Var& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var abs(const Var& a) {
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var silu(const Var& a) {
  return unary(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Var relu(const Var& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value()) s += v;
  return make_result({1}, {s}, {a}, [](Node& n) {
    Node& p = parent(n, 0);
    auto& g = p.ensure_grad();
    for (double& v : g) v += n.grad[0];
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Var weighted_sum(const std::vector<Var>& scalars, const std::vector<double>& weights) {
  if (scalars.size() != weights.size() || scalars.empty()) {
    throw DimensionError("weighted_sum: need matching non-empty lists");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i].size() != 1) throw DimensionError("weighted_sum: operands must be scalars");
    s += weights[i] * scalars[i].item();
  }
  return make_result({1}, {s}, scalars, [weights](Node& n) {
    for (std::size_t i = 0; i < weights.size(); ++i) {
      Node& p = parent(n, i);
      if (p.requires_grad) p.ensure_grad()[0] += weights[i] * n.grad[0];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 1, "linear");
  require_rank(weight, 2, "linear");
  const int m = weight.dim(0), k = weight.dim(1);
  if (x.dim(0) != k || bias.rank() != 1 || bias.dim(0) != m) {
    throw DimensionError("linear: incompatible shapes");
  }
  std::vector<double> out(bias.value().begin(), bias.value().end());
  const auto w = weight.value();
  const auto xv = x.value();
  for (int i = 0; i < m; ++i) {
    double acc = 0.0;
    for (int j = 0; j < k; ++j) acc += w[static_cast<std::size_t>(i) * k + j] * xv[j];
    out[i] += acc;
  }
  return make_result({m}, std::move(out), {x, weight, bias}, [m, k](Node& n) {
    Node& px = parent(n, 0);
    Node& pw = parent(n, 1);
    Node& pb = parent(n, 2);
    if (px.requires_grad) {
      auto& g = px.ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < k; ++j) g[j] += pw.value[static_cast<std::size_t>(i) * k + j] * n.grad[i];
    }
    if (pw.requires_grad) {
      auto& g = pw.ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < k; ++j) g[static_cast<std::size_t>(i) * k + j] += n.grad[i] * px.value[j];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (int i = 0; i < m; ++i) g[i] += n.grad[i];
    }
  });
}

namespace {

struct ConvGeometry {
  int cin, h, w, k, stride, pad, ho, wo;
  Padding padding;
  std::size_t rows() const { return static_cast<std::size_t>(cin) * k * k; }
  std::size_t cols() const { return static_cast<std::size_t>(ho) * wo; }
  bool is_pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

// Maps a padded coordinate to a source index, or -1 for zero padding.
inline int source_index(int i, int n, Padding padding) {
  if (i >= 0 && i < n) return i;
  if (padding == Padding::kZero) return -1;
  i %= n;
  return i < 0 ? i + n : i;
}

void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const std::size_t p = g.cols();
  for (int c = 0; c < g.cin; ++c) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        double* row = cols + (static_cast<std::size_t>(c) * g.k * g.k + ky * g.k + kx) * p;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = source_index(oy * g.stride - g.pad + ky, g.h, g.padding);
          double* dst = row + static_cast<std::size_t>(oy) * g.wo;
          if (iy < 0) {
            std::fill(dst, dst + g.wo, 0.0);
            continue;
          }
          const double* src = x + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = source_index(ox * g.stride - g.pad + kx, g.w, g.padding);
            dst[ox] = ix < 0 ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im(const double* cols, const ConvGeometry& g, double* dx) {
  const std::size_t p = g.cols();
  for (int c = 0; c < g.cin; ++c) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const double* row = cols + (static_cast<std::size_t>(c) * g.k * g.k + ky * g.k + kx) * p;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = source_index(oy * g.stride - g.pad + ky, g.h, g.padding);
          if (iy < 0) continue;
          const double* src = row + static_cast<std::size_t>(oy) * g.wo;
          double* dst = dx + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = source_index(ox * g.stride - g.pad + kx, g.w, g.padding);
            if (ix >= 0) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad, Padding padding) {
  require_rank(x, 3, "conv2d");
  require_rank(weight, 4, "conv2d");
  const int cout = weight.dim(0);
  const int k = weight.dim(2);
  if (weight.dim(1) != x.dim(0) || weight.dim(3) != k) {
    throw DimensionError("conv2d: weight " + shape_string(weight.shape()) +
                         " incompatible with input " + shape_string(x.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw DimensionError("conv2d: bias shape mismatch");
  }
  if (stride < 1 || pad < 0) throw ParameterError("conv2d: invalid stride/padding");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), k, stride, pad, 0, 0, padding};
  g.ho = (g.h + 2 * pad - k) / stride + 1;
  g.wo = (g.w + 2 * pad - k) / stride + 1;
  if (g.ho < 1 || g.wo < 1) throw DimensionError("conv2d: input smaller than kernel");
  if (padding == Padding::kCircular && (pad > g.h || pad > g.w)) {
    throw DimensionError("conv2d: circular padding wider than input");
  }

  const std::size_t kk = g.rows(), p = g.cols();
  MatR cols(static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(p));
  if (g.is_pointwise()) {
    std::copy(x.value().begin(), x.value().end(), cols.data());
  } else {
    im2col(x.value().data(), g, cols.data());
  }
  MatR o = load(weight.value().data(), cout, kk) * cols;
  if (bias.defined()) {
    const auto b = bias.value();
    for (int c = 0; c < cout; ++c) o.row(c).array() += b[c];
  }
  std::vector<double> out(static_cast<std::size_t>(cout) * p);
  store(o, out.data());

  std::vector<Var> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return make_result(
      {cout, g.ho, g.wo}, std::move(out), std::move(inputs),
      [g, cout, kk, p, has_bias, cols = std::move(cols)](Node& n) {
        Node& px = parent(n, 0);
        Node& pw = parent(n, 1);
        const MatR gout = load(n.grad.data(), cout, p);
        if (pw.requires_grad) {
          const MatR gw = gout * cols.transpose();
          accumulate(gw, pw.ensure_grad().data());
        }
        if (has_bias) {
          Node& pb = parent(n, 2);
          if (pb.requires_grad) {
            auto& gb = pb.ensure_grad();
            for (int c = 0; c < cout; ++c) {
              const double* row = gout.data() + static_cast<std::size_t>(c) * p;
              double s = 0.0;
              for (std::size_t i = 0; i < p; ++i) s += row[i];
              gb[c] += s;
            }
          }
        }
        if (px.requires_grad) {
          const MatR gc = load(pw.value.data(), cout, kk).transpose() * gout;
          if (g.is_pointwise()) {
            accumulate(gc, px.ensure_grad().data());
          } else {
            col2im(gc.data(), g, px.ensure_grad().data());
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalisation and broadcasting

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
  require_rank(x, 3, "group_norm");
  const int c = x.dim(0);
  const std::size_t hw = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  if (groups < 1 || c % groups != 0) {
    throw DimensionError("group_norm: channels " + std::to_string(c) +
                         " not divisible into " + std::to_string(groups) + " groups");
  }
  if (gamma.size() != static_cast<std::size_t>(c) || beta.size() != static_cast<std::size_t>(c)) {
    throw DimensionError("group_norm: affine size mismatch");
  }
  const int per = c / groups;
  const std::size_t gsize = per * hw;
  std::vector<double> xhat(x.size()), inv_std(groups), out(x.size());
  const auto xv = x.value();
  const auto gm = gamma.value();
  const auto bt = beta.value();
  for (int g = 0; g < groups; ++g) {
    const std::size_t base = g * gsize;
    double m = 0.0;
    for (std::size_t i = 0; i < gsize; ++i) m += xv[base + i];
    m /= static_cast<double>(gsize);
    double var = 0.0;
    for (std::size_t i = 0; i < gsize; ++i) var += (xv[base + i] - m) * (xv[base + i] - m);
    var /= static_cast<double>(gsize);
    inv_std[g] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < gsize; ++i) xhat[base + i] = (xv[base + i] - m) * inv_std[g];
  }
  for (int ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < hw; ++i) {
      const std::size_t idx = ch * hw + i;
      out[idx] = gm[ch] * xhat[idx] + bt[ch];
    }
  }
  return make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [groups, per, hw, gsize, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
        Node& px = parent(n, 0);
        Node& pg = parent(n, 1);
        Node& pb = parent(n, 2);
        const int c = groups * per;
        if (pg.requires_grad || pb.requires_grad) {
          auto& gg = pg.ensure_grad();
          auto& gb = pb.ensure_grad();
          for (int ch = 0; ch < c; ++ch) {
            double sg = 0.0, sb = 0.0;
            for (std::size_t i = 0; i < hw; ++i) {
              sg += n.grad[ch * hw + i] * xhat[ch * hw + i];
              sb += n.grad[ch * hw + i];
            }
            gg[ch] += sg;
            gb[ch] += sb;
          }
        }
        if (px.requires_grad) {
          auto& gx = px.ensure_grad();
          for (int g = 0; g < groups; ++g) {
            const std::size_t base = g * gsize;
            double mean_d = 0.0, mean_dx = 0.0;
            for (int j = 0; j < per; ++j) {
              const int ch = g * per + j;
              for (std::size_t i = 0; i < hw; ++i) {
                const std::size_t idx = ch * hw + i;
                const double d = n.grad[idx] * pg.value[ch];
                mean_d += d;
                mean_dx += d * xhat[idx];
              }
            }
            mean_d /= static_cast<double>(gsize);
            mean_dx /= static_cast<double>(gsize);
            for (int j = 0; j < per; ++j) {
              const int ch = g * per + j;
              for (std::size_t i = 0; i < hw; ++i) {
                const std::size_t idx = ch * hw + i;
                const double d = n.grad[idx] * pg.value[ch];
                gx[idx] += inv_std[g] * (d - mean_d - xhat[idx] * mean_dx);
              }
            }
            (void)base;
          }
        }
      });
}

Var add_channel_bias(const Var& x, const Var& v) {
  require_rank(x, 3, "add_channel_bias");
  const int c = x.dim(0);
  if (v.size() != static_cast<std::size_t>(c)) throw DimensionError("add_channel_bias: size mismatch");
  const std::size_t hw = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  std::vector<double> out(x.value().begin(), x.value().end());
  const auto b = v.value();
  for (int ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] += b[ch];
  return make_result(x.shape(), std::move(out), {x, v}, [c, hw](Node& n) {
    Node& px = parent(n, 0);
    Node& pv = parent(n, 1);
    if (px.requires_grad) {
      auto& g = px.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (pv.requires_grad) {
      auto& g = pv.ensure_grad();
      for (int ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (std::size_t i = 0; i < hw; ++i) s += n.grad[ch * hw + i];
        g[ch] += s;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Layout

Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_channels: nothing to concatenate");
  const int h = parts[0].dim(1), w = parts[0].dim(2);
  int c = 0;
  for (const Var& p : parts) {
    require_rank(p, 3, "concat_channels");
    if (p.dim(1) != h || p.dim(2) != w) throw DimensionError("concat_channels: spatial mismatch");
    c += p.dim(0);
  }
  if (parts.size() == 1) return parts[0];
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(c) * h * w);
  for (const Var& p : parts) out.insert(out.end(), p.value().begin(), p.value().end());
  return make_result({c, h, w}, std::move(out), parts, [](Node& n) {
    std::size_t offset = 0;
    for (auto& pp : n.parents) {
      if (pp->requires_grad) {
        auto& g = pp->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[offset + i];
      }
      offset += pp->value.size();
    }
  });
}

Var upsample_nearest2x(const Var& x) {
  require_rank(x, 3, "upsample_nearest2x");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::vector<double> out(static_cast<std::size_t>(c) * 4 * h * w);
  const auto xv = x.value();
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx)
        out[(static_cast<std::size_t>(ch) * 2 * h + y) * 2 * w + xx] =
            xv[(static_cast<std::size_t>(ch) * h + y / 2) * w + xx / 2];
  return make_result({c, 2 * h, 2 * w}, std::move(out), {x}, [c, h, w](Node& n) {
    auto& g = parent(n, 0).ensure_grad();
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx)
          g[(static_cast<std::size_t>(ch) * h + y / 2) * w + xx / 2] +=
              n.grad[(static_cast<std::size_t>(ch) * 2 * h + y) * 2 * w + xx];
  });
}

Var avg_pool2x(const Var& x) {
  require_rank(x, 3, "avg_pool2x");
  const int c = x.dim(0), h = x.dim(1) / 2, w = x.dim(2) / 2;
  if (h < 1 || w < 1) throw DimensionError("avg_pool2x: input too small");
  const int iw = x.dim(2), ih = x.dim(1);
  std::vector<double> out(static_cast<std::size_t>(c) * h * w);
  const auto xv = x.value();
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        const std::size_t b = (static_cast<std::size_t>(ch) * ih + 2 * y) * iw + 2 * xx;
        out[(static_cast<std::size_t>(ch) * h + y) * w + xx] =
            0.25 * (xv[b] + xv[b + 1] + xv[b + iw] + xv[b + iw + 1]);
      }
  return make_result({c, h, w}, std::move(out), {x}, [c, h, w, ih, iw](Node& n) {
    auto& g = parent(n, 0).ensure_grad();
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          const double d = 0.25 * n.grad[(static_cast<std::size_t>(ch) * h + y) * w + xx];
          const std::size_t b = (static_cast<std::size_t>(ch) * ih + 2 * y) * iw + 2 * xx;
          g[b] += d;
          g[b + 1] += d;
          g[b + iw] += d;
          g[b + iw + 1] += d;
        }
  });
}

// ---------------------------------------------------------------------------
// Attention

Var attention(const Var& q, const Var& k, const Var& v, int heads,
              std::vector<double>* weights_out) {
  if (q.rank() < 2 || k.rank() < 2 || v.rank() < 2) {
    throw DimensionError("attention: operands need a channel axis and positions");
  }
  const int dk = q.dim(0), dv = v.dim(0);
  const std::size_t n_q = q.size() / dk, n_k = k.size() / k.dim(0);
  if (k.dim(0) != dk || v.size() / dv != n_k) {
    throw DimensionError("attention: q/k/v shapes incompatible");
  }
  if (heads < 1 || dk % heads != 0 || dv % heads != 0) {
    throw DimensionError("attention: channels not divisible by head count");
  }
  const int hk = dk / heads, hv = dv / heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(hk));
  const auto N = static_cast<Eigen::Index>(n_q), M = static_cast<Eigen::Index>(n_k);

  std::vector<double> probs(static_cast<std::size_t>(heads) * n_q * n_k);
  std::vector<double> out(static_cast<std::size_t>(dv) * n_q);
  for (int h = 0; h < heads; ++h) {
    const MatR qh = load(q.value().data() + static_cast<std::size_t>(h) * hk * n_q, hk, n_q);
    const MatR kh = load(k.value().data() + static_cast<std::size_t>(h) * hk * n_k, hk, n_k);
    const MatR vh = load(v.value().data() + static_cast<std::size_t>(h) * hv * n_k, hv, n_k);
    MatR a = scale_factor * (qh.transpose() * kh);
    for (Eigen::Index r = 0; r < N; ++r) {
      double* row = a.data() + r * M;
      const double mx = *std::max_element(row, row + M);
      double s = 0.0;
      for (Eigen::Index j = 0; j < M; ++j) {
        row[j] = std::exp(row[j] - mx);
        s += row[j];
      }
      for (Eigen::Index j = 0; j < M; ++j) row[j] /= s;
    }
    store(a, probs.data() + static_cast<std::size_t>(h) * n_q * n_k);
    store(vh * a.transpose(), out.data() + static_cast<std::size_t>(h) * hv * n_q);
  }
  if (weights_out) *weights_out = probs;

  Shape out_shape = q.shape();
  out_shape[0] = dv;
  return make_result(
      std::move(out_shape), std::move(out), {q, k, v},
      [heads, hk, hv, N, M, scale_factor, probs = std::move(probs)](Node& n) {
        Node& pq = parent(n, 0);
        Node& pk = parent(n, 1);
        Node& pv = parent(n, 2);
        const auto n_q = static_cast<std::size_t>(N), n_k = static_cast<std::size_t>(M);
        for (int h = 0; h < heads; ++h) {
          const std::size_t qo = static_cast<std::size_t>(h) * hk * n_q;
          const std::size_t ko = static_cast<std::size_t>(h) * hk * n_k;
          const std::size_t vo = static_cast<std::size_t>(h) * hv * n_k;
          const MatR a = load(probs.data() + static_cast<std::size_t>(h) * n_q * n_k, n_q, n_k);
          const MatR go = load(n.grad.data() + static_cast<std::size_t>(h) * hv * n_q, hv, n_q);
          if (pv.requires_grad) accumulate(go * a, pv.ensure_grad().data() + vo);
          if (!pq.requires_grad && !pk.requires_grad) continue;
          const MatR da = go.transpose() * load(pv.value.data() + vo, hv, n_k);
          MatR ds(N, M);
          for (Eigen::Index r = 0; r < N; ++r) {
            const double* ar = a.data() + r * M;
            const double* dr = da.data() + r * M;
            double dot = 0.0;
            for (Eigen::Index j = 0; j < M; ++j) dot += dr[j] * ar[j];
            double* sr = ds.data() + r * M;
            for (Eigen::Index j = 0; j < M; ++j) sr[j] = scale_factor * ar[j] * (dr[j] - dot);
          }
          if (pq.requires_grad) {
            accumulate(load(pk.value.data() + ko, hk, n_k) * ds.transpose(), pq.ensure_grad().data() + qo);
          }
          if (pk.requires_grad) {
            accumulate(load(pq.value.data() + qo, hk, n_q) * ds, pk.ensure_grad().data() + ko);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Resampling and filtering

Var resize_bilinear(const Var& x, int new_height, int new_width) {
  require_rank(x, 3, "resize_bilinear");
  if (new_height < 1 || new_width < 1) throw DimensionError("resize_bilinear: zero target size");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const auto ty = bilinear_taps(h, new_height);
  const auto tx = bilinear_taps(w, new_width);
  std::vector<double> out(static_cast<std::size_t>(c) * new_height * new_width);
  const auto xv = x.value();
  auto at = [h, w](int ch, int y, int xx) { return (static_cast<std::size_t>(ch) * h + y) * w + xx; };
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < new_height; ++y)
      for (int xx = 0; xx < new_width; ++xx) {
        const BilinearTap& a = ty[y];
        const BilinearTap& b = tx[xx];
        const double top = (1 - b.w1) * xv[at(ch, a.i0, b.i0)] + b.w1 * xv[at(ch, a.i0, b.i1)];
        const double bot = (1 - b.w1) * xv[at(ch, a.i1, b.i0)] + b.w1 * xv[at(ch, a.i1, b.i1)];
        out[(static_cast<std::size_t>(ch) * new_height + y) * new_width + xx] =
            (1 - a.w1) * top + a.w1 * bot;
      }
  return make_result({c, new_height, new_width}, std::move(out), {x},
                     [c, new_height, new_width, ty, tx, at](Node& n) {
                       auto& g = parent(n, 0).ensure_grad();
                       for (int ch = 0; ch < c; ++ch)
                         for (int y = 0; y < new_height; ++y)
                           for (int xx = 0; xx < new_width; ++xx) {
                             const BilinearTap& a = ty[y];
                             const BilinearTap& b = tx[xx];
                             const double d =
                                 n.grad[(static_cast<std::size_t>(ch) * new_height + y) * new_width + xx];
                             g[at(ch, a.i0, b.i0)] += (1 - a.w1) * (1 - b.w1) * d;
                             g[at(ch, a.i0, b.i1)] += (1 - a.w1) * b.w1 * d;
                             g[at(ch, a.i1, b.i0)] += a.w1 * (1 - b.w1) * d;
                             g[at(ch, a.i1, b.i1)] += a.w1 * b.w1 * d;
                           }
                     });
}

Var filter_valid(const Var& x, const std::vector<double>& kernel) {
  require_rank(x, 3, "filter_valid");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int k = static_cast<int>(kernel.size());
  const int ho = h - k + 1, wo = w - k + 1;
  if (ho < 1 || wo < 1) {
    throw DimensionError("filter_valid: image " + std::to_string(h) + "x" + std::to_string(w) +
                         " smaller than window " + std::to_string(k));
  }
  // Horizontal pass into [c, h, wo], then vertical into [c, ho, wo].
  std::vector<double> tmp(static_cast<std::size_t>(c) * h * wo, 0.0);
  const auto xv = x.value();
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < wo; ++xx) {
        double acc = 0.0;
        const double* src = xv.data() + (static_cast<std::size_t>(ch) * h + y) * w + xx;
        for (int j = 0; j < k; ++j) acc += kernel[j] * src[j];
        tmp[(static_cast<std::size_t>(ch) * h + y) * wo + xx] = acc;
      }
  std::vector<double> out(static_cast<std::size_t>(c) * ho * wo, 0.0);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < ho; ++y)
      for (int xx = 0; xx < wo; ++xx) {
        double acc = 0.0;
        for (int j = 0; j < k; ++j) acc += kernel[j] * tmp[(static_cast<std::size_t>(ch) * h + y + j) * wo + xx];
        out[(static_cast<std::size_t>(ch) * ho + y) * wo + xx] = acc;
      }
  return make_result({c, ho, wo}, std::move(out), {x}, [c, h, w, k, ho, wo, kernel](Node& n) {
    std::vector<double> gtmp(static_cast<std::size_t>(c) * h * wo, 0.0);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < ho; ++y)
        for (int xx = 0; xx < wo; ++xx) {
          const double d = n.grad[(static_cast<std::size_t>(ch) * ho + y) * wo + xx];
          for (int j = 0; j < k; ++j) gtmp[(static_cast<std::size_t>(ch) * h + y + j) * wo + xx] += kernel[j] * d;
        }
    auto& g = parent(n, 0).ensure_grad();
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < wo; ++xx) {
          const double d = gtmp[(static_cast<std::size_t>(ch) * h + y) * wo + xx];
          double* dst = g.data() + (static_cast<std::size_t>(ch) * h + y) * w + xx;
          for (int j = 0; j < k; ++j) dst[j] += kernel[j] * d;
        }
  });
}

// ---------------------------------------------------------------------------
// Spectrum

namespace {

std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

// Unnormalised forward real-to-complex 2-D transform of one plane.
void rfft2(const double* in, int h, int w, std::complex<double>* out) {
  std::vector<double> buf(in, in + static_cast<std::size_t>(h) * w);
  fftw_plan plan;
  {
    std::lock_guard lock(fftw_planner_mutex());
    plan = fftw_plan_dft_r2c_2d(h, w, buf.data(), reinterpret_cast<fftw_complex*>(out), FFTW_ESTIMATE | FFTW_UNALIGNED);
  }
  fftw_execute(plan);
  std::lock_guard lock(fftw_planner_mutex());
  fftw_destroy_plan(plan);
}

// Unnormalised inverse (exp(+i...)) complex 2-D transform, in place.
void ifft2_inplace(std::complex<double>* data, int h, int w) {
  auto* p = reinterpret_cast<fftw_complex*>(data);
  fftw_plan plan;
  {
    std::lock_guard lock(fftw_planner_mutex());
    plan = fftw_plan_dft_2d(h, w, p, p, FFTW_BACKWARD, FFTW_ESTIMATE | FFTW_UNALIGNED);
  }
  fftw_execute(plan);
  std::lock_guard lock(fftw_planner_mutex());
  fftw_destroy_plan(plan);
}

}  // namespace

Var rfft2_magnitude(const Var& x) {
  require_rank(x, 3, "rfft2_magnitude");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int wh = w / 2 + 1;
  const std::size_t plane = static_cast<std::size_t>(h) * wh;
  std::vector<std::complex<double>> spectrum(static_cast<std::size_t>(c) * plane);
  std::vector<double> out(spectrum.size());
  for (int ch = 0; ch < c; ++ch) {
    rfft2(x.value().data() + static_cast<std::size_t>(ch) * h * w, h, w, spectrum.data() + ch * plane);
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(spectrum[i]);
  return make_result({c, h, wh}, std::move(out), {x},
                     [c, h, w, wh, plane, spectrum = std::move(spectrum)](Node& n) {
                       auto& g = parent(n, 0).ensure_grad();
                       std::vector<std::complex<double>> full(static_cast<std::size_t>(h) * w);
                       for (int ch = 0; ch < c; ++ch) {
                         std::fill(full.begin(), full.end(), std::complex<double>{});
                         for (int ky = 0; ky < h; ++ky)
                           for (int kx = 0; kx < wh; ++kx) {
                             const std::size_t i = ch * plane + static_cast<std::size_t>(ky) * wh + kx;
                             const double mag = n.value[i];
                             if (mag > 0.0) full[static_cast<std::size_t>(ky) * w + kx] = n.grad[i] * spectrum[i] / mag;
                           }
                         ifft2_inplace(full.data(), h, w);
                         double* dst = g.data() + static_cast<std::size_t>(ch) * h * w;
                         for (std::size_t i = 0; i < full.size(); ++i) dst[i] += full[i].real();
                       }
                     });
}

// ---------------------------------------------------------------------------
// Images

Var from_image(const Image& img, bool requires_grad) {
  const int h = img.height(), w = img.width(), c = img.channels();
  std::vector<double> v(img.size());
  const auto src = img.data();
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h * w; ++i) v[static_cast<std::size_t>(ch) * h * w + i] = src[static_cast<std::size_t>(i) * c + ch];
  return requires_grad ? Var::parameter({c, h, w}, std::move(v)) : Var::constant({c, h, w}, std::move(v));
}

Image to_image(const Var& x) {
  require_rank(x, 3, "to_image");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Image img(h, w, c);
  auto dst = img.data();
  const auto src = x.value();
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h * w; ++i) dst[static_cast<std::size_t>(i) * c + ch] = src[static_cast<std::size_t>(ch) * h * w + i];
  return img;
}

}  // namespace aquadiff::ad
