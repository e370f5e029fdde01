#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pepp/errors.hpp"

namespace pepp {

// ---------------------------------------------------------------------------
// Named parameter with accumulated gradient. Token activations flow through
// the layers as d x M matrices (one token per column); vectors are stored as
// n x 1. `lr_scale` lets the optimizer apply per-head learning rates.
// ---------------------------------------------------------------------------

struct Param {
  std::string name;
  Eigen::MatrixXd value;
  Eigen::MatrixXd grad;
  double lr_scale = 1.0;

  Param() = default;
  Param(std::string n, int rows, int cols)
      : name(std::move(n)),
        value(Eigen::MatrixXd::Zero(rows, cols)),
        grad(Eigen::MatrixXd::Zero(rows, cols)) {}

  void zero_grad() { grad.setZero(); }
};

/// Uniform initialization in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
inline void init_uniform(Param& p, int fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (Eigen::Index j = 0; j < p.value.cols(); ++j)
    for (Eigen::Index i = 0; i < p.value.rows(); ++i) p.value(i, j) = u(rng);
}

// ---------------------------------------------------------------------------
// Linear layer: Y = W X + b (b broadcast over columns).
// ---------------------------------------------------------------------------

struct LinearCache {
  Eigen::MatrixXd input;
};

struct Linear {
  Param weight;  // out x in
  Param bias;    // out x 1

  Linear() = default;
  Linear(const std::string& name, int in, int out)
      : weight(name + ".weight", out, in), bias(name + ".bias", out, 1) {}

  void init(std::mt19937_64& rng) {
    init_uniform(weight, static_cast<int>(weight.value.cols()), rng);
    init_uniform(bias, static_cast<int>(weight.value.cols()), rng);
  }

  void collect(std::vector<Param*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, LinearCache& cache) const {
    if (x.rows() != weight.value.cols())
      throw ShapeMismatch("linear input rows do not match weight columns");
    cache.input = x;
    return (weight.value * x).colwise() + Eigen::VectorXd(bias.value.col(0));
  }

  Eigen::MatrixXd backward(const Eigen::MatrixXd& dy, const LinearCache& cache) {
    weight.grad += dy * cache.input.transpose();
    bias.grad.col(0) += dy.rowwise().sum();
    return weight.value.transpose() * dy;
  }
};

// ---------------------------------------------------------------------------
// LayerNorm over the feature dimension of each token column, with affine
// scale/shift.
// ---------------------------------------------------------------------------

struct LayerNormCache {
  Eigen::MatrixXd xhat;
  Eigen::VectorXd inv_std;
};

struct LayerNorm {
  Param gamma;  // d x 1
  Param beta;   // d x 1
  static constexpr double kEps = 1e-6;

  LayerNorm() = default;
  LayerNorm(const std::string& name, int dim)
      : gamma(name + ".gamma", dim, 1), beta(name + ".beta", dim, 1) {
    gamma.value.setOnes();
  }

  void collect(std::vector<Param*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }

  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, LayerNormCache& cache) const {
    const Eigen::Index d = x.rows();
    cache.xhat.resize(d, x.cols());
    cache.inv_std.resize(x.cols());
    Eigen::MatrixXd y(d, x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double mu = x.col(j).mean();
      const double var = (x.col(j).array() - mu).square().mean();
      const double inv = 1.0 / std::sqrt(var + kEps);
      cache.inv_std(j) = inv;
      cache.xhat.col(j) = (x.col(j).array() - mu) * inv;
      y.col(j) = gamma.value.col(0).array() * cache.xhat.col(j).array() +
                 beta.value.col(0).array();
    }
    return y;
  }

  Eigen::MatrixXd backward(const Eigen::MatrixXd& dy,
                           const LayerNormCache& cache) {
    const Eigen::Index d = dy.rows();
    Eigen::MatrixXd dx(d, dy.cols());
    for (Eigen::Index j = 0; j < dy.cols(); ++j) {
      const Eigen::ArrayXd dxhat =
          dy.col(j).array() * gamma.value.col(0).array();
      const Eigen::ArrayXd xhat = cache.xhat.col(j).array();
      const double sum_dxhat = dxhat.sum();
      const double sum_dxhat_xhat = (dxhat * xhat).sum();
      dx.col(j) = cache.inv_std(j) / static_cast<double>(d) *
                  (static_cast<double>(d) * dxhat - sum_dxhat -
                   xhat * sum_dxhat_xhat);
      gamma.grad.col(0).array() += dy.col(j).array() * xhat;
      beta.grad.col(0) += dy.col(j);
    }
    return dx;
  }
};

// ---------------------------------------------------------------------------
// Exact GELU and ReLU activations.
// ---------------------------------------------------------------------------

inline double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
}

inline double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

struct GeluCache {
  Eigen::MatrixXd input;
};

inline Eigen::MatrixXd gelu_forward(const Eigen::MatrixXd& x,
                                    GeluCache& cache) {
  cache.input = x;
  return x.unaryExpr([](double v) { return gelu_value(v); });
}

inline Eigen::MatrixXd gelu_backward(const Eigen::MatrixXd& dy,
                                     const GeluCache& cache) {
  return dy.cwiseProduct(
      cache.input.unaryExpr([](double v) { return gelu_derivative(v); }));
}

// ---------------------------------------------------------------------------
// Row-wise softmax with backward, used by the attention scores.
// ---------------------------------------------------------------------------

inline Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& s) {
  Eigen::MatrixXd p(s.rows(), s.cols());
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const double m = s.row(i).maxCoeff();
    p.row(i) = (s.row(i).array() - m).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

inline Eigen::MatrixXd softmax_rows_backward(const Eigen::MatrixXd& dp,
                                             const Eigen::MatrixXd& p) {
  Eigen::MatrixXd ds(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double dot = dp.row(i).dot(p.row(i));
    ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Single-head scaled dot-product self-attention over token columns.
// ---------------------------------------------------------------------------

struct AttentionCache {
  Eigen::MatrixXd q, k, v, p, h;
  LinearCache cq, ck, cv, co;
};

struct Attention {
  Linear wq, wk, wv, wo;

  Attention() = default;
  explicit Attention(const std::string& name, int dim)
      : wq(name + ".wq", dim, dim),
        wk(name + ".wk", dim, dim),
        wv(name + ".wv", dim, dim),
        wo(name + ".wo", dim, dim) {}

  void init(std::mt19937_64& rng) {
    wq.init(rng);
    wk.init(rng);
    wv.init(rng);
    wo.init(rng);
  }

  void collect(std::vector<Param*>& out) {
    wq.collect(out);
    wk.collect(out);
    wv.collect(out);
    wo.collect(out);
  }

  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, AttentionCache& cache) const {
    const double scale = 1.0 / std::sqrt(static_cast<double>(x.rows()));
    cache.q = wq.forward(x, cache.cq);
    cache.k = wk.forward(x, cache.ck);
    cache.v = wv.forward(x, cache.cv);
    const Eigen::MatrixXd scores =
        scale * (cache.q.transpose() * cache.k);  // M x M, row = query
    cache.p = softmax_rows(scores);
    cache.h = cache.v * cache.p.transpose();
    return wo.forward(cache.h, cache.co);
  }

  Eigen::MatrixXd backward(const Eigen::MatrixXd& dy, AttentionCache& cache) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(cache.q.rows()));
    const Eigen::MatrixXd dh = wo.backward(dy, cache.co);
    const Eigen::MatrixXd dv = dh * cache.p;
    const Eigen::MatrixXd dp = dh.transpose() * cache.v;
    const Eigen::MatrixXd ds = softmax_rows_backward(dp, cache.p);
    const Eigen::MatrixXd dq = scale * cache.k * ds.transpose();
    const Eigen::MatrixXd dk = scale * cache.q * ds;
    return wq.backward(dq, cache.cq) + wk.backward(dk, cache.ck) +
           wv.backward(dv, cache.cv);
  }
};

// ---------------------------------------------------------------------------
// Pre-LayerNorm transformer block: attention and a 2-layer GELU feed-forward,
// each behind a residual connection.
// ---------------------------------------------------------------------------

struct BlockCache {
  LayerNormCache ln1, ln2;
  AttentionCache attn;
  LinearCache fc1, fc2;
  GeluCache act;
};

struct TransformerBlock {
  LayerNorm ln1, ln2;
  Attention attn;
  Linear fc1, fc2;

  TransformerBlock() = default;
  TransformerBlock(const std::string& name, int dim, int hidden)
      : ln1(name + ".ln1", dim),
        ln2(name + ".ln2", dim),
        attn(name + ".attn", dim),
        fc1(name + ".fc1", dim, hidden),
        fc2(name + ".fc2", hidden, dim) {}

  void init(std::mt19937_64& rng) {
    attn.init(rng);
    fc1.init(rng);
    fc2.init(rng);
  }

  void collect(std::vector<Param*>& out) {
    ln1.collect(out);
    attn.collect(out);
    ln2.collect(out);
    fc1.collect(out);
    fc2.collect(out);
  }

  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, BlockCache& cache) const {
    const Eigen::MatrixXd x1 = x + attn.forward(ln1.forward(x, cache.ln1),
                                                cache.attn);
    const Eigen::MatrixXd hidden =
        gelu_forward(fc1.forward(ln2.forward(x1, cache.ln2), cache.fc1),
                     cache.act);
    return x1 + fc2.forward(hidden, cache.fc2);
  }

  Eigen::MatrixXd backward(const Eigen::MatrixXd& dy, BlockCache& cache) {
    const Eigen::MatrixXd dhidden =
        gelu_backward(fc2.backward(dy, cache.fc2), cache.act);
    const Eigen::MatrixXd dx1 =
        dy + ln2.backward(fc1.backward(dhidden, cache.fc1), cache.ln2);
    return dx1 + ln1.backward(attn.backward(dx1, cache.attn), cache.ln1);
  }
};

// ---------------------------------------------------------------------------
// Spatial feature maps for the keypoint decoder: one matrix per channel,
// element (y, x).
// ---------------------------------------------------------------------------

using FeatureMap = std::vector<Eigen::MatrixXd>;

inline FeatureMap feature_map_zeros(int channels, int height, int width) {
  return FeatureMap(channels, Eigen::MatrixXd::Zero(height, width));
}

// ---------------------------------------------------------------------------
// Transpose convolution with kernel 4, stride 2, padding 1 — doubles the
// spatial size. The weight matrix packs (in_ch * 4 * 4) rows by out_ch
// columns; row index = (ic * 4 + ky) * 4 + kx.
// ---------------------------------------------------------------------------

struct TransposeConvCache {
  FeatureMap input;
};

struct TransposeConv2d {
  static constexpr int kKernel = 4;
  static constexpr int kStride = 2;
  static constexpr int kPad = 1;
  int in_channels = 0;
  int out_channels = 0;
  Param weight;  // (in_ch*16) x out_ch
  Param bias;    // out_ch x 1

  TransposeConv2d() = default;
  TransposeConv2d(const std::string& name, int in_ch, int out_ch)
      : in_channels(in_ch),
        out_channels(out_ch),
        weight(name + ".weight", in_ch * kKernel * kKernel, out_ch),
        bias(name + ".bias", out_ch, 1) {}

  void init(std::mt19937_64& rng) {
    const int fan_in = in_channels * kKernel * kKernel;
    init_uniform(weight, fan_in, rng);
    init_uniform(bias, fan_in, rng);
  }

  void collect(std::vector<Param*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

  // Forward and backward are phrased as one GEMM over all input pixels plus
  // a kernel-offset scatter/gather; the loops only move data, so the heavy
  // arithmetic stays inside Eigen's matrix products.

  /// Input channels flattened to (in_ch x h*w), pixel index p = iy * w + ix.
  static Eigen::MatrixXd flatten_pixels(const FeatureMap& x) {
    const int h = static_cast<int>(x[0].rows());
    const int w = static_cast<int>(x[0].cols());
    Eigen::MatrixXd flat(x.size(), h * w);
    for (size_t c = 0; c < x.size(); ++c)
      for (int iy = 0; iy < h; ++iy)
        for (int ix = 0; ix < w; ++ix) flat(c, iy * w + ix) = x[c](iy, ix);
    return flat;
  }

  /// Weight regrouped to in_ch rows by (kernel offset, out channel) columns.
  Eigen::MatrixXd regroup_weight() const {
    Eigen::MatrixXd w2(in_channels, kKernel * kKernel * out_channels);
    for (int ic = 0; ic < in_channels; ++ic)
      for (int ky = 0; ky < kKernel; ++ky)
        for (int kx = 0; kx < kKernel; ++kx)
          for (int oc = 0; oc < out_channels; ++oc)
            w2(ic, (ky * kKernel + kx) * out_channels + oc) =
                weight.value((ic * kKernel + ky) * kKernel + kx, oc);
    return w2;
  }

  FeatureMap forward(const FeatureMap& x, TransposeConvCache& cache) const {
    if (static_cast<int>(x.size()) != in_channels)
      throw ShapeMismatch("transpose conv input channel count");
    cache.input = x;
    const int h = static_cast<int>(x[0].rows());
    const int w = static_cast<int>(x[0].cols());
    const Eigen::MatrixXd flat = flatten_pixels(x);
    // contributions(row = kernel offset * out_ch + oc, col = input pixel)
    const Eigen::MatrixXd contrib = regroup_weight().transpose() * flat;
    FeatureMap y = feature_map_zeros(out_channels, 2 * h, 2 * w);
    for (int oc = 0; oc < out_channels; ++oc)
      y[oc].array() += bias.value(oc, 0);
    for (int iy = 0; iy < h; ++iy)
      for (int ix = 0; ix < w; ++ix) {
        const int p = iy * w + ix;
        for (int ky = 0; ky < kKernel; ++ky) {
          const int oy = kStride * iy + ky - kPad;
          if (oy < 0 || oy >= 2 * h) continue;
          for (int kx = 0; kx < kKernel; ++kx) {
            const int ox = kStride * ix + kx - kPad;
            if (ox < 0 || ox >= 2 * w) continue;
            const int base = (ky * kKernel + kx) * out_channels;
            for (int oc = 0; oc < out_channels; ++oc)
              y[oc](oy, ox) += contrib(base + oc, p);
          }
        }
      }
    return y;
  }

  FeatureMap backward(const FeatureMap& dy, const TransposeConvCache& cache) {
    const int h = static_cast<int>(cache.input[0].rows());
    const int w = static_cast<int>(cache.input[0].cols());
    for (int oc = 0; oc < out_channels; ++oc)
      bias.grad(oc, 0) += dy[oc].sum();
    // Gather the output gradients each input pixel touched, then both the
    // weight and input gradients are plain matrix products.
    Eigen::MatrixXd gathered =
        Eigen::MatrixXd::Zero(kKernel * kKernel * out_channels, h * w);
    for (int iy = 0; iy < h; ++iy)
      for (int ix = 0; ix < w; ++ix) {
        const int p = iy * w + ix;
        for (int ky = 0; ky < kKernel; ++ky) {
          const int oy = kStride * iy + ky - kPad;
          if (oy < 0 || oy >= 2 * h) continue;
          for (int kx = 0; kx < kKernel; ++kx) {
            const int ox = kStride * ix + kx - kPad;
            if (ox < 0 || ox >= 2 * w) continue;
            const int base = (ky * kKernel + kx) * out_channels;
            for (int oc = 0; oc < out_channels; ++oc)
              gathered(base + oc, p) = dy[oc](oy, ox);
          }
        }
      }
    const Eigen::MatrixXd flat = flatten_pixels(cache.input);
    const Eigen::MatrixXd dw2 = flat * gathered.transpose();
    for (int ic = 0; ic < in_channels; ++ic)
      for (int ky = 0; ky < kKernel; ++ky)
        for (int kx = 0; kx < kKernel; ++kx)
          for (int oc = 0; oc < out_channels; ++oc)
            weight.grad((ic * kKernel + ky) * kKernel + kx, oc) +=
                dw2(ic, (ky * kKernel + kx) * out_channels + oc);
    const Eigen::MatrixXd dflat = regroup_weight() * gathered;
    FeatureMap dx = feature_map_zeros(in_channels, h, w);
    for (int ic = 0; ic < in_channels; ++ic)
      for (int iy = 0; iy < h; ++iy)
        for (int ix = 0; ix < w; ++ix) dx[ic](iy, ix) = dflat(ic, iy * w + ix);
    return dx;
  }
};

// ---------------------------------------------------------------------------
// 1x1 convolution (per-pixel linear map across channels).
// ---------------------------------------------------------------------------

struct Conv1x1Cache {
  FeatureMap input;
};

struct Conv1x1 {
  int in_channels = 0;
  int out_channels = 0;
  Param weight;  // in_ch x out_ch
  Param bias;    // out_ch x 1

  Conv1x1() = default;
  Conv1x1(const std::string& name, int in_ch, int out_ch)
      : in_channels(in_ch),
        out_channels(out_ch),
        weight(name + ".weight", in_ch, out_ch),
        bias(name + ".bias", out_ch, 1) {}

  void init(std::mt19937_64& rng) {
    init_uniform(weight, in_channels, rng);
    init_uniform(bias, in_channels, rng);
  }

  void collect(std::vector<Param*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

  FeatureMap forward(const FeatureMap& x, Conv1x1Cache& cache) const {
    if (static_cast<int>(x.size()) != in_channels)
      throw ShapeMismatch("1x1 conv input channel count");
    cache.input = x;
    const int h = static_cast<int>(x[0].rows());
    const int w = static_cast<int>(x[0].cols());
    FeatureMap y = feature_map_zeros(out_channels, h, w);
    for (int oc = 0; oc < out_channels; ++oc) {
      y[oc].array() += bias.value(oc, 0);
      for (int ic = 0; ic < in_channels; ++ic)
        y[oc] += weight.value(ic, oc) * x[ic];
    }
    return y;
  }

  FeatureMap backward(const FeatureMap& dy, const Conv1x1Cache& cache) {
    const int h = static_cast<int>(cache.input[0].rows());
    const int w = static_cast<int>(cache.input[0].cols());
    FeatureMap dx = feature_map_zeros(in_channels, h, w);
    for (int oc = 0; oc < out_channels; ++oc) {
      bias.grad(oc, 0) += dy[oc].sum();
      for (int ic = 0; ic < in_channels; ++ic) {
        weight.grad(ic, oc) += dy[oc].cwiseProduct(cache.input[ic]).sum();
        dx[ic] += weight.value(ic, oc) * dy[oc];
      }
    }
    return dx;
  }
};

// ---------------------------------------------------------------------------
// Element-wise ReLU and sigmoid over feature maps.
// ---------------------------------------------------------------------------

struct ReluCache {
  FeatureMap input;
};

inline FeatureMap relu_forward(const FeatureMap& x, ReluCache& cache) {
  cache.input = x;
  FeatureMap y = x;
  for (auto& ch : y) ch = ch.cwiseMax(0.0);
  return y;
}

inline FeatureMap relu_backward(const FeatureMap& dy, const ReluCache& cache) {
  FeatureMap dx = dy;
  for (size_t c = 0; c < dx.size(); ++c)
    dx[c] = dx[c].cwiseProduct(cache.input[c].unaryExpr(
        [](double v) { return v > 0.0 ? 1.0 : 0.0; }));
  return dx;
}

struct SigmoidCache {
  FeatureMap output;
};

inline FeatureMap sigmoid_forward(const FeatureMap& x, SigmoidCache& cache) {
  FeatureMap y = x;
  for (auto& ch : y)
    ch = ch.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  cache.output = y;
  return y;
}

inline FeatureMap sigmoid_backward(const FeatureMap& dy,
                                   const SigmoidCache& cache) {
  FeatureMap dx = dy;
  for (size_t c = 0; c < dx.size(); ++c) {
    const auto& s = cache.output[c];
    dx[c] = dx[c].cwiseProduct(s.cwiseProduct(
        (Eigen::MatrixXd::Ones(s.rows(), s.cols()) - s)));
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Parameter flattening (deterministic order = collection order), exponential
// moving average, and the decoupled-weight-decay adaptive-moment optimizer.
// ---------------------------------------------------------------------------

inline Eigen::VectorXd flatten_params(const std::vector<Param*>& params) {
  Eigen::Index total = 0;
  for (const Param* p : params) total += p->value.size();
  Eigen::VectorXd flat(total);
  Eigen::Index at = 0;
  for (const Param* p : params) {
    flat.segment(at, p->value.size()) =
        Eigen::Map<const Eigen::VectorXd>(p->value.data(), p->value.size());
    at += p->value.size();
  }
  return flat;
}

inline void load_flat_params(const Eigen::VectorXd& flat,
                             const std::vector<Param*>& params) {
  Eigen::Index total = 0;
  for (const Param* p : params) total += p->value.size();
  if (flat.size() != total)
    throw DimensionMismatch("flat parameter vector size mismatch");
  Eigen::Index at = 0;
  for (Param* p : params) {
    Eigen::Map<Eigen::VectorXd>(p->value.data(), p->value.size()) =
        flat.segment(at, p->value.size());
    at += p->value.size();
  }
}

struct EmaState {
  Eigen::VectorXd target_weights;
  double momentum = 0.996;
};

/// Linear momentum ramp 0.996 -> 1.0 over the total number of steps.
inline double ema_momentum(int step, int total_steps) {
  if (total_steps <= 0) return 1.0;
  const double t = std::min(1.0, std::max(0.0, static_cast<double>(step) /
                                                   static_cast<double>(
                                                       total_steps)));
  return 0.996 + (1.0 - 0.996) * t;
}

/// target <- m * target + (1 - m) * encoder.
inline EmaState ema_update(const EmaState& state,
                           const Eigen::VectorXd& encoder_weights,
                           double momentum) {
  if (state.target_weights.size() != encoder_weights.size())
    throw DimensionMismatch("EMA parameter counts differ");
  EmaState next;
  next.momentum = momentum;
  next.target_weights =
      momentum * state.target_weights + (1.0 - momentum) * encoder_weights;
  return next;
}

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamW {
  AdamWOptions opts;
  std::vector<Eigen::MatrixXd> m;
  std::vector<Eigen::MatrixXd> v;
  long step_count = 0;

  explicit AdamW(const AdamWOptions& options = {}) : opts(options) {}

  void step(const std::vector<Param*>& params) {
    if (m.empty()) {
      for (const Param* p : params) {
        m.emplace_back(Eigen::MatrixXd::Zero(p->value.rows(), p->value.cols()));
        v.emplace_back(Eigen::MatrixXd::Zero(p->value.rows(), p->value.cols()));
      }
    }
    if (m.size() != params.size())
      throw DimensionMismatch("optimizer state does not match parameter list");
    ++step_count;
    const double bc1 = 1.0 - std::pow(opts.beta1, step_count);
    const double bc2 = 1.0 - std::pow(opts.beta2, step_count);
    for (size_t i = 0; i < params.size(); ++i) {
      Param& p = *params[i];
      const double lr = opts.lr * p.lr_scale;
      m[i] = opts.beta1 * m[i] + (1.0 - opts.beta1) * p.grad;
      v[i] = opts.beta2 * v[i].array().matrix() +
             (1.0 - opts.beta2) * p.grad.cwiseProduct(p.grad);
      const Eigen::MatrixXd mhat = m[i] / bc1;
      const Eigen::MatrixXd vhat = v[i] / bc2;
      p.value -= lr * (mhat.array() / (vhat.array().sqrt() + opts.eps))
                     .matrix();
      if (opts.weight_decay > 0.0)
        p.value -= lr * opts.weight_decay * p.value;
    }
  }
};

}  // namespace pepp
