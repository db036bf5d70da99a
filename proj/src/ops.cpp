#include "covnet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <string>

namespace covnet {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvDims {
  std::size_t n, c, h, w;
  std::size_t out_c, kh, kw;
  std::size_t oh, ow;
  std::size_t k() const { return c * kh * kw; }
  std::size_t p() const { return oh * ow; }
};

template <typename T>
ConvDims conv_dims(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& bias,
                   const ConvGeometry& g) {
  require_nchw(x, "conv2d input");
  if (weights.rank() != 4) {
    throw ShapeError("conv2d weights must be (outC, inC, kH, kW), got " +
                     shape_string(weights.shape()));
  }
  if (weights.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: input has " + std::to_string(x.dim(1)) +
                     " channels but weights expect " + std::to_string(weights.dim(1)));
  }
  if (bias.rank() != 1 || bias.dim(0) != weights.dim(0)) {
    throw ShapeError("conv2d: bias " + shape_string(bias.shape()) + " does not match " +
                     std::to_string(weights.dim(0)) + " output channels");
  }
  if (g.stride_h == 0 || g.stride_w == 0) throw ParameterError("conv2d: stride must be positive");
  ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weights.dim(0), weights.dim(2),
             weights.dim(3), 0, 0};
  d.oh = conv_output_extent(d.h, d.kh, g.stride_h, g.pad.top, g.pad.bottom);
  d.ow = conv_output_extent(d.w, d.kw, g.stride_w, g.pad.left, g.pad.right);
  if (d.oh == 0 || d.ow == 0) {
    throw ShapeError("conv2d: kernel " + std::to_string(d.kh) + "x" + std::to_string(d.kw) +
                     " does not fit padded input " + shape_string(x.shape()));
  }
  return d;
}

// cols is (C*kH*kW, OH*OW), row-major.
template <typename T>
void im2col(const T* plane, const ConvDims& d, const ConvGeometry& g, T* cols) {
  const std::size_t p = d.p();
  for (std::size_t c = 0; c < d.c; ++c) {
    const T* src = plane + c * d.h * d.w;
    for (std::size_t i = 0; i < d.kh; ++i) {
      for (std::size_t j = 0; j < d.kw; ++j) {
        T* row = cols + ((c * d.kh + i) * d.kw + j) * p;
        for (std::size_t oy = 0; oy < d.oh; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride_h + i) -
                                   static_cast<std::ptrdiff_t>(g.pad.top);
          T* out = row + oy * d.ow;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(d.h)) {
            std::fill(out, out + d.ow, T(0));
            continue;
          }
          const T* line = src + static_cast<std::size_t>(y) * d.w;
          for (std::size_t ox = 0; ox < d.ow; ++ox) {
            const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * g.stride_w + j) -
                                     static_cast<std::ptrdiff_t>(g.pad.left);
            out[ox] = (x < 0 || x >= static_cast<std::ptrdiff_t>(d.w))
                          ? T(0)
                          : line[static_cast<std::size_t>(x)];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvDims& d, const ConvGeometry& g, T* plane) {
  const std::size_t p = d.p();
  for (std::size_t c = 0; c < d.c; ++c) {
    T* dst = plane + c * d.h * d.w;
    for (std::size_t i = 0; i < d.kh; ++i) {
      for (std::size_t j = 0; j < d.kw; ++j) {
        const T* row = cols + ((c * d.kh + i) * d.kw + j) * p;
        for (std::size_t oy = 0; oy < d.oh; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride_h + i) -
                                   static_cast<std::ptrdiff_t>(g.pad.top);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(d.h)) continue;
          T* line = dst + static_cast<std::size_t>(y) * d.w;
          const T* in = row + oy * d.ow;
          for (std::size_t ox = 0; ox < d.ow; ++ox) {
            const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * g.stride_w + j) -
                                     static_cast<std::ptrdiff_t>(g.pad.left);
            if (x < 0 || x >= static_cast<std::ptrdiff_t>(d.w)) continue;
            line[static_cast<std::size_t>(x)] += in[ox];
          }
        }
      }
    }
  }
}

template <typename T>
Tensor<T> conv_forward(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& bias,
                       const ConvGeometry& g) {
  const ConvDims d = conv_dims(x, weights, bias, g);
  Tensor<T> out({d.n, d.out_c, d.oh, d.ow});
  Buffer<T> cols(d.k() * d.p());
  ConstMatMap<T> w(weights.data().data(), d.out_c, d.k());
  for (std::size_t n = 0; n < d.n; ++n) {
    im2col(x.data().data() + n * d.c * d.h * d.w, d, g, cols.data());
    ConstMatMap<T> colm(cols.data(), d.k(), d.p());
    MatMap<T> y(out.data().data() + n * d.out_c * d.p(), d.out_c, d.p());
    y.noalias() = w * colm;
    for (std::size_t o = 0; o < d.out_c; ++o) y.row(o).array() += bias[o];
  }
  return out;
}

template <typename T>
void conv_backward(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& bias,
                   const ConvGeometry& g, const Tensor<T>& grad_out, Tensor<T>* dx,
                   Tensor<T>* dw, Tensor<T>* db) {
  const ConvDims d = conv_dims(x, weights, bias, g);
  Buffer<T> cols(d.k() * d.p());
  ConstMatMap<T> w(weights.data().data(), d.out_c, d.k());
  if (dx) *dx = Tensor<T>::zeros_like(x);
  if (dw) *dw = Tensor<T>::zeros_like(weights);
  if (db) *db = Tensor<T>::zeros_like(bias);
  for (std::size_t n = 0; n < d.n; ++n) {
    ConstMatMap<T> gy(grad_out.data().data() + n * d.out_c * d.p(), d.out_c, d.p());
    if (dw) {
      im2col(x.data().data() + n * d.c * d.h * d.w, d, g, cols.data());
      ConstMatMap<T> colm(cols.data(), d.k(), d.p());
      MatMap<T> gw(dw->data().data(), d.out_c, d.k());
      gw.noalias() += gy * colm.transpose();
    }
    if (db) {
      for (std::size_t o = 0; o < d.out_c; ++o) (*db)[o] += gy.row(o).sum();
    }
    if (dx) {
      MatMap<T> gcols(cols.data(), d.k(), d.p());
      gcols.noalias() = w.transpose() * gy;
      col2im_add(cols.data(), d, g, dx->data().data() + n * d.c * d.h * d.w);
    }
  }
}

// Batch norm over (N, H, W) per channel. `xhat` and `inv_std` receive the
// normalised input and 1/sqrt(var + eps) when non-null.
template <typename T>
Tensor<T> bn_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     const BatchNormStats<T>& stats, Mode mode, Tensor<T>* xhat_out,
                     std::vector<T>* inv_std_out) {
  require_nchw(x, "batch_norm input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (gamma.size() != c || beta.size() != c) {
    throw ShapeError("batch_norm: affine parameters do not match " + std::to_string(c) +
                     " channels");
  }
  if (!stats.running_mean || !stats.running_var || stats.running_mean->size() != c ||
      stats.running_var->size() != c) {
    throw ShapeError("batch_norm: running statistics do not match channel count");
  }
  const std::size_t m = n * hw;
  if (mode == Mode::kTrain && m < 2) {
    throw ParameterError("batch_norm: degenerate batch, train mode needs >= 2 values per channel");
  }
  Tensor<T> y(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    T mean, var;
    if (mode == Mode::kTrain) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x.data().data() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(m);
      double sq = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x.data().data() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const double dlt = p[i] - mu;
          sq += dlt * dlt;
        }
      }
      const double v = sq / static_cast<double>(m);
      mean = static_cast<T>(mu);
      var = static_cast<T>(v);
      const T mom = stats.stat_momentum;
      const T unbiased = static_cast<T>(v * static_cast<double>(m) / static_cast<double>(m - 1));
      (*stats.running_mean)[ch] = (T(1) - mom) * (*stats.running_mean)[ch] + mom * mean;
      (*stats.running_var)[ch] = (T(1) - mom) * (*stats.running_var)[ch] + mom * unbiased;
    } else {
      mean = (*stats.running_mean)[ch];
      var = (*stats.running_var)[ch];
    }
    const T is = T(1) / std::sqrt(var + stats.epsilon);
    inv_std[ch] = is;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const T xh = (x[off + i] - mean) * is;
        xhat[off + i] = xh;
        y[off + i] = gamma[ch] * xh + beta[ch];
      }
    }
  }
  if (xhat_out) *xhat_out = std::move(xhat);
  if (inv_std_out) *inv_std_out = std::move(inv_std);
  return y;
}

void require_poolable(const Shape& s, const char* what) {
  if (s.size() != 4) throw ShapeError(std::string(what) + ": expected NCHW input");
  if (s[2] % 2 != 0 || s[3] % 2 != 0) {
    throw ShapeError(std::string(what) + ": spatial extents " + shape_string(s) +
                     " are not divisible by 2");
  }
}

template <typename T>
PoolResult<T> max_pool_impl(const Tensor<T>& x) {
  require_poolable(x.shape(), "max_pool2d");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / 2, ow = w / 2;
  PoolResult<T> r{Tensor<T>({n, c, oh, ow}), IndexMap{x.shape(), {n, c, oh, ow}, {}}};
  r.indices.offsets.resize(n * c * oh * ow);
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = x.data().data() + plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (2 * oy) * w + 2 * ox;
        // Row-major scan with strict comparison: the first maximum wins.
        const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
        for (std::size_t k : cand) {
          if (src[k] > src[best]) best = k;
        }
        const std::size_t o = plane * oh * ow + oy * ow + ox;
        r.output[o] = src[best];
        r.indices.offsets[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return r;
}

template <typename T>
Tensor<T> avg_pool_impl(const Tensor<T>& x) {
  require_poolable(x.shape(), "avg_pool2d");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor<T> out({n, c, oh, ow});
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = x.data().data() + plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t b = (2 * oy) * w + 2 * ox;
        out[plane * oh * ow + oy * ow + ox] =
            (src[b] + src[b + 1] + src[b + w] + src[b + w + 1]) * T(0.25);
      }
    }
  }
  return out;
}

void check_unpool(const Shape& x_shape, const IndexMap& idx, const Shape& out_shape) {
  if (x_shape != idx.output_shape) {
    throw ShapeError("max_unpool2d: input " + shape_string(x_shape) +
                     " does not match pooled shape " + shape_string(idx.output_shape));
  }
  if (out_shape.size() != 4 || out_shape[0] != x_shape[0] || out_shape[1] != x_shape[1]) {
    throw ShapeError("max_unpool2d: output shape " + shape_string(out_shape) +
                     " is incompatible with input " + shape_string(x_shape));
  }
  if (idx.offsets.size() != shape_size(x_shape)) {
    throw ShapeError("max_unpool2d: index map has " + std::to_string(idx.offsets.size()) +
                     " entries for " + std::to_string(shape_size(x_shape)) + " values");
  }
  const std::size_t plane = out_shape[2] * out_shape[3];
  for (auto off : idx.offsets) {
    if (off >= plane) {
      throw ShapeError("max_unpool2d: corrupted index " + std::to_string(off) +
                       " outside output plane " + shape_string(out_shape));
    }
  }
}

template <typename T>
Tensor<T> max_unpool_impl(const Tensor<T>& x, const IndexMap& idx, const Shape& out_shape) {
  require_nchw(x, "max_unpool2d input");
  check_unpool(x.shape(), idx, out_shape);
  Tensor<T> out(out_shape);
  const std::size_t in_plane = x.dim(2) * x.dim(3);
  const std::size_t out_plane = out_shape[2] * out_shape[3];
  for (std::size_t plane = 0; plane < x.dim(0) * x.dim(1); ++plane) {
    for (std::size_t i = 0; i < in_plane; ++i) {
      out[plane * out_plane + idx.offsets[plane * in_plane + i]] = x[plane * in_plane + i];
    }
  }
  return out;
}

void check_avg_unpool(const Shape& x_shape, const Shape& out_shape) {
  if (x_shape.size() != 4 || out_shape.size() != 4 || out_shape[0] != x_shape[0] ||
      out_shape[1] != x_shape[1] || out_shape[2] != 2 * x_shape[2] ||
      out_shape[3] != 2 * x_shape[3]) {
    throw ShapeError("avg_unpool2d: output " + shape_string(out_shape) +
                     " must double the spatial extents of " + shape_string(x_shape));
  }
}

template <typename T>
Tensor<T> avg_unpool_impl(const Tensor<T>& x, const Shape& out_shape) {
  check_avg_unpool(x.shape(), out_shape);
  Tensor<T> out(out_shape);
  const std::size_t h = x.dim(2), w = x.dim(3), ow = 2 * w;
  for (std::size_t plane = 0; plane < x.dim(0) * x.dim(1); ++plane) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        const T v = x[plane * h * w + y * w + xx];
        T* dst = out.data().data() + plane * 4 * h * w + (2 * y) * ow + 2 * xx;
        dst[0] = v;
        dst[1] = v;
        dst[ow] = v;
        dst[ow + 1] = v;
      }
    }
  }
  return out;
}

template <typename T>
void check_fc(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (x.rank() != 2) throw ShapeError("fully_connected: input must be (N, F), got " +
                                      shape_string(x.shape()));
  if (w.rank() != 2 || w.dim(1) != x.dim(1)) {
    throw ShapeError("fully_connected: weights " + shape_string(w.shape()) +
                     " do not accept inputs of width " + std::to_string(x.dim(1)));
  }
  if (b.rank() != 1 || b.dim(0) != w.dim(0)) {
    throw ShapeError("fully_connected: bias " + shape_string(b.shape()) + " does not match " +
                     std::to_string(w.dim(0)) + " outputs");
  }
}

template <typename T>
Tensor<T> fc_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  check_fc(x, w, b);
  const std::size_t n = x.dim(0), f = x.dim(1), o = w.dim(0);
  Tensor<T> y({n, o});
  ConstMatMap<T> xm(x.data().data(), n, f);
  ConstMatMap<T> wm(w.data().data(), o, f);
  MatMap<T> ym(y.data().data(), n, o);
  ym.noalias() = xm * wm.transpose();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < o; ++j) ym(i, j) += b[j];
  }
  return y;
}

// Keep-mask for inverted dropout: 1/(1-rate) for survivors, 0 otherwise.
template <typename T>
std::vector<T> dropout_mask(std::size_t count, double rate, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(count);
  for (auto& m : mask) m = u(gen) >= rate ? scale : T(0);
  return mask;
}

void check_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ParameterError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
}

struct ClassLayout {
  std::size_t n, c, inner;  // probability of (n, c, i) at (n * c_count + c) * inner + i
};

template <typename T>
ClassLayout class_layout(const Tensor<T>& x, const char* what) {
  if (x.rank() == 2) return {x.dim(0), x.dim(1), 1};
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)};
  throw ShapeError(std::string(what) + ": expected (N, C) or (N, C, H, W), got " +
                   shape_string(x.shape()));
}

template <typename T>
Tensor<T> softmax_impl(const Tensor<T>& x) {
  const ClassLayout l = class_layout(x, "softmax");
  Tensor<T> y(x.shape());
  for (std::size_t n = 0; n < l.n; ++n) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = n * l.c * l.inner + i;
      T mx = x[base];
      for (std::size_t c = 1; c < l.c; ++c) mx = std::max(mx, x[base + c * l.inner]);
      T total = 0;
      for (std::size_t c = 0; c < l.c; ++c) {
        const T e = std::exp(x[base + c * l.inner] - mx);
        y[base + c * l.inner] = e;
        total += e;
      }
      for (std::size_t c = 0; c < l.c; ++c) y[base + c * l.inner] /= total;
    }
  }
  return y;
}

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& y, const Tensor<T>& g) {
  const ClassLayout l = class_layout(y, "softmax");
  Tensor<T> dx(y.shape());
  for (std::size_t n = 0; n < l.n; ++n) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = n * l.c * l.inner + i;
      T dot = 0;
      for (std::size_t c = 0; c < l.c; ++c) dot += g[base + c * l.inner] * y[base + c * l.inner];
      for (std::size_t c = 0; c < l.c; ++c) {
        const std::size_t k = base + c * l.inner;
        dx[k] = y[k] * (g[k] - dot);
      }
    }
  }
  return dx;
}

template <typename T>
LossResult<T> cross_entropy_impl(const Tensor<T>& probs, std::span<const int> targets,
                                 std::span<const T> weights) {
  const ClassLayout l = class_layout(probs, "cross_entropy_loss");
  const std::size_t m = l.n * l.inner;
  if (targets.size() != m) {
    throw ShapeError("cross_entropy_loss: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(m) + " predictions");
  }
  if (!weights.empty() && weights.size() != l.c) {
    throw ShapeError("cross_entropy_loss: " + std::to_string(weights.size()) +
                     " class weights for " + std::to_string(l.c) + " classes");
  }
  const T floor = static_cast<T>(kProbabilityFloor);
  LossResult<T> r{T(0), Tensor<T>(probs.shape())};
  double total = 0.0;
  const T inv_m = T(1) / static_cast<T>(m);
  for (std::size_t n = 0; n < l.n; ++n) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      const int t = targets[n * l.inner + i];
      if (t < 0 || static_cast<std::size_t>(t) >= l.c) {
        throw ParameterError("cross_entropy_loss: target " + std::to_string(t) +
                             " outside [0, " + std::to_string(l.c) + ")");
      }
      const T wc = weights.empty() ? T(1) : weights[static_cast<std::size_t>(t)];
      const std::size_t k = (n * l.c + static_cast<std::size_t>(t)) * l.inner + i;
      const T p = std::max(probs[k], floor);
      total += static_cast<double>(-wc * std::log(p));
      r.grad[k] = -wc * inv_m / p;
    }
  }
  r.loss = static_cast<T>(total / static_cast<double>(m));
  return r;
}

template <typename T>
Tensor<T> pad_impl(const Tensor<T>& x, const Padding& pad) {
  require_nchw(x, "zero_pad input");
  const std::size_t h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h + pad.top + pad.bottom, ow = w + pad.left + pad.right;
  Tensor<T> out({x.dim(0), x.dim(1), oh, ow});
  for (std::size_t plane = 0; plane < x.dim(0) * x.dim(1); ++plane) {
    for (std::size_t y = 0; y < h; ++y) {
      const T* src = x.data().data() + plane * h * w + y * w;
      std::copy(src, src + w, out.data().data() + plane * oh * ow + (y + pad.top) * ow + pad.left);
    }
  }
  return out;
}

template <typename T>
Tensor<T> crop_impl(const Tensor<T>& g, const Shape& inner, const Padding& pad) {
  Tensor<T> out(inner);
  const std::size_t h = inner[2], w = inner[3], oh = g.dim(2), ow = g.dim(3);
  for (std::size_t plane = 0; plane < inner[0] * inner[1]; ++plane) {
    for (std::size_t y = 0; y < h; ++y) {
      const T* src = g.data().data() + plane * oh * ow + (y + pad.top) * ow + pad.left;
      std::copy(src, src + w, out.data().data() + plane * h * w + y * w);
    }
  }
  return out;
}

}  // namespace

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t pad_before, std::size_t pad_after) {
  const std::size_t padded = in + pad_before + pad_after;
  if (padded < kernel || stride == 0) return 0;
  return (padded - kernel) / stride + 1;
}

template <typename T>
BatchNormParams<T> BatchNormParams<T>::identity(std::size_t channels) {
  BatchNormParams p;
  p.gamma = Tensor<T>({channels}, T(1));
  p.beta = Tensor<T>({channels}, T(0));
  p.running_mean = Tensor<T>({channels}, T(0));
  p.running_var = Tensor<T>({channels}, T(1));
  return p;
}

// ---------------------------------------------------------------------------
// Value-level API

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& p) {
  return conv_forward(x, p.weights, p.bias, p.geometry);
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, BatchNormParams<T>& p, Mode mode) {
  BatchNormStats<T> stats{&p.running_mean, &p.running_var, p.epsilon, p.stat_momentum};
  return bn_forward<T>(x, p.gamma, p.beta, stats, mode, nullptr, nullptr);
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

template <typename T>
PoolResult<T> max_pool2d(const Tensor<T>& x) {
  return max_pool_impl(x);
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x) {
  return avg_pool_impl(x);
}

template <typename T>
Tensor<T> max_unpool2d(const Tensor<T>& x, const IndexMap& indices, const Shape& out_shape) {
  return max_unpool_impl(x, indices, out_shape);
}

template <typename T>
Tensor<T> avg_unpool2d(const Tensor<T>& x, const Shape& out_shape) {
  return avg_unpool_impl(x, out_shape);
}

template <typename T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& bias) {
  return fc_forward(x, weights, bias);
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, std::uint64_t seed) {
  check_rate(rate);
  if (mode == Mode::kEval || rate == 0.0) return x;
  const auto mask = dropout_mask<T>(x.size(), rate, seed);
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * mask[i];
  return y;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  return softmax_impl(x);
}

template <typename T>
LossResult<T> cross_entropy_loss(const Tensor<T>& probs, std::span<const int> targets,
                                 std::span<const T> class_weights) {
  return cross_entropy_impl(probs, targets, class_weights);
}

template <typename T>
Tensor<T> zero_pad(const Tensor<T>& x, const Padding& pad) {
  return pad_impl(x, pad);
}

// ---------------------------------------------------------------------------
// Tape-level API

namespace ad {

template <typename T>
Var conv2d(GradTape<T>& tape, Var x, Var weights, Var bias, const ConvGeometry& geometry) {
  Tensor<T> y = conv_forward(tape.value(x), tape.value(weights), tape.value(bias), geometry);
  return tape.record(
      OpKind::kConv2d, {x, weights, bias}, std::move(y),
      [x, weights, bias, geometry](GradTape<T>& t, const Tensor<T>& g) {
        Tensor<T> dx, dw, db;
        conv_backward(t.value(x), t.value(weights), t.value(bias), geometry, g,
                      t.requires_grad(x) ? &dx : nullptr,
                      t.requires_grad(weights) ? &dw : nullptr,
                      t.requires_grad(bias) ? &db : nullptr);
        if (!dx.empty()) t.accumulate(x, dx);
        if (!dw.empty()) t.accumulate(weights, dw);
        if (!db.empty()) t.accumulate(bias, db);
      });
}

template <typename T>
Var batch_norm(GradTape<T>& tape, Var x, Var gamma, Var beta, const BatchNormStats<T>& stats,
               Mode mode) {
  auto xhat = std::make_shared<Tensor<T>>();
  auto inv_std = std::make_shared<std::vector<T>>();
  Tensor<T> y = bn_forward(tape.value(x), tape.value(gamma), tape.value(beta), stats, mode,
                           xhat.get(), inv_std.get());
  return tape.record(
      OpKind::kBatchNorm, {x, gamma, beta}, std::move(y),
      [x, gamma, beta, mode, xhat, inv_std](GradTape<T>& t, const Tensor<T>& g) {
        const Tensor<T>& xin = t.value(x);
        const Tensor<T>& gm = t.value(gamma);
        const std::size_t n = xin.dim(0), c = xin.dim(1), hw = xin.dim(2) * xin.dim(3);
        const double m = static_cast<double>(n * hw);
        Tensor<T> dx(xin.shape()), dgamma({c}), dbeta({c});
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              sum_g += g[off + i];
              sum_gx += static_cast<double>(g[off + i]) * (*xhat)[off + i];
            }
          }
          dgamma[ch] = static_cast<T>(sum_gx);
          dbeta[ch] = static_cast<T>(sum_g);
          const T scale = gm[ch] * (*inv_std)[ch];
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t off = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              if (mode == Mode::kTrain) {
                dx[off + i] = static_cast<T>(
                    scale * (g[off + i] - sum_g / m - (*xhat)[off + i] * sum_gx / m));
              } else {
                dx[off + i] = scale * g[off + i];
              }
            }
          }
        }
        t.accumulate(x, dx);
        t.accumulate(gamma, dgamma);
        t.accumulate(beta, dbeta);
      });
}

template <typename T>
Var relu(GradTape<T>& tape, Var x) {
  Tensor<T> y = covnet::relu(tape.value(x));
  return tape.record(OpKind::kRelu, {x}, std::move(y), [x](GradTape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& xin = t.value(x);
    Tensor<T> dx(xin.shape());
    for (std::size_t i = 0; i < xin.size(); ++i) dx[i] = xin[i] > T(0) ? g[i] : T(0);
    t.accumulate(x, dx);
  });
}

template <typename T>
std::pair<Var, IndexMap> max_pool2d(GradTape<T>& tape, Var x) {
  PoolResult<T> r = max_pool_impl(tape.value(x));
  auto idx = std::make_shared<IndexMap>(r.indices);
  Var out = tape.record(OpKind::kMaxPool, {x}, std::move(r.output),
                        [x, idx](GradTape<T>& t, const Tensor<T>& g) {
                          t.accumulate(x, max_unpool_impl(g, *idx, idx->input_shape));
                        });
  return {out, std::move(r.indices)};
}

template <typename T>
Var avg_pool2d(GradTape<T>& tape, Var x) {
  Tensor<T> y = avg_pool_impl(tape.value(x));
  return tape.record(OpKind::kAvgPool, {x}, std::move(y),
                     [x](GradTape<T>& t, const Tensor<T>& g) {
                       Tensor<T> dx = avg_unpool_impl(g, t.value(x).shape());
                       for (auto& v : dx.data()) v *= T(0.25);
                       t.accumulate(x, dx);
                     });
}

template <typename T>
Var max_unpool2d(GradTape<T>& tape, Var x, const IndexMap& indices, const Shape& out_shape) {
  Tensor<T> y = max_unpool_impl(tape.value(x), indices, out_shape);
  auto idx = std::make_shared<IndexMap>(indices);
  return tape.record(OpKind::kMaxUnpool, {x}, std::move(y),
                     [x, idx](GradTape<T>& t, const Tensor<T>& g) {
                       const Tensor<T>& xin = t.value(x);
                       Tensor<T> dx(xin.shape());
                       const std::size_t in_plane = xin.dim(2) * xin.dim(3);
                       const std::size_t out_plane = g.dim(2) * g.dim(3);
                       for (std::size_t p = 0; p < xin.dim(0) * xin.dim(1); ++p) {
                         for (std::size_t i = 0; i < in_plane; ++i) {
                           dx[p * in_plane + i] =
                               g[p * out_plane + idx->offsets[p * in_plane + i]];
                         }
                       }
                       t.accumulate(x, dx);
                     });
}

template <typename T>
Var avg_unpool2d(GradTape<T>& tape, Var x, const Shape& out_shape) {
  Tensor<T> y = avg_unpool_impl(tape.value(x), out_shape);
  return tape.record(OpKind::kAvgUnpool, {x}, std::move(y),
                     [x](GradTape<T>& t, const Tensor<T>& g) {
                       // Adjoint of replication: sum each 2x2 window.
                       Tensor<T> dx = avg_pool_impl(g);
                       for (auto& v : dx.data()) v *= T(4);
                       t.accumulate(x, dx);
                     });
}

template <typename T>
Var fully_connected(GradTape<T>& tape, Var x, Var weights, Var bias) {
  Tensor<T> y = fc_forward(tape.value(x), tape.value(weights), tape.value(bias));
  return tape.record(
      OpKind::kLinear, {x, weights, bias}, std::move(y),
      [x, weights, bias](GradTape<T>& t, const Tensor<T>& g) {
        const Tensor<T>& xin = t.value(x);
        const Tensor<T>& w = t.value(weights);
        const std::size_t n = xin.dim(0), f = xin.dim(1), o = w.dim(0);
        ConstMatMap<T> gm(g.data().data(), n, o);
        if (t.requires_grad(x)) {
          Tensor<T> dx(xin.shape());
          MatMap<T>(dx.data().data(), n, f).noalias() =
              gm * ConstMatMap<T>(w.data().data(), o, f);
          t.accumulate(x, dx);
        }
        if (t.requires_grad(weights)) {
          Tensor<T> dw(w.shape());
          MatMap<T>(dw.data().data(), o, f).noalias() =
              gm.transpose() * ConstMatMap<T>(xin.data().data(), n, f);
          t.accumulate(weights, dw);
        }
        if (t.requires_grad(bias)) {
          Tensor<T> db({o});
          for (std::size_t j = 0; j < o; ++j) db[j] = gm.col(j).sum();
          t.accumulate(bias, db);
        }
      });
}

template <typename T>
Var dropout(GradTape<T>& tape, Var x, double rate, Mode mode, std::uint64_t seed) {
  check_rate(rate);
  if (mode == Mode::kEval || rate == 0.0) {
    return tape.record(OpKind::kDropout, {x}, tape.value(x),
                       [x](GradTape<T>& t, const Tensor<T>& g) { t.accumulate(x, g); });
  }
  auto mask = std::make_shared<std::vector<T>>(dropout_mask<T>(tape.value(x).size(), rate, seed));
  const Tensor<T>& xin = tape.value(x);
  Tensor<T> y(xin.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xin[i] * (*mask)[i];
  return tape.record(OpKind::kDropout, {x}, std::move(y),
                     [x, mask](GradTape<T>& t, const Tensor<T>& g) {
                       Tensor<T> dx(g.shape());
                       for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * (*mask)[i];
                       t.accumulate(x, dx);
                     });
}

template <typename T>
Var softmax(GradTape<T>& tape, Var x) {
  Tensor<T> y = softmax_impl(tape.value(x));
  const std::size_t self = tape.size();
  return tape.record(OpKind::kSoftmax, {x}, std::move(y),
                     [x, self](GradTape<T>& t, const Tensor<T>& g) {
                       t.accumulate(x, softmax_backward(t.value(Var{self}), g));
                     });
}

template <typename T>
Var cross_entropy_loss(GradTape<T>& tape, Var probs, std::span<const int> targets,
                       std::span<const T> class_weights) {
  LossResult<T> r = cross_entropy_impl(tape.value(probs), targets, class_weights);
  auto grad = std::make_shared<Tensor<T>>(std::move(r.grad));
  return tape.record(OpKind::kCrossEntropy, {probs}, Tensor<T>({1}, r.loss),
                     [probs, grad](GradTape<T>& t, const Tensor<T>& g) {
                       Tensor<T> dp = *grad;
                       for (auto& v : dp.data()) v *= g[0];
                       t.accumulate(probs, dp);
                     });
}

template <typename T>
Var add(GradTape<T>& tape, Var a, Var b) {
  return weighted_sum(tape, a, b, T(1), T(1));
}

template <typename T>
Var weighted_sum(GradTape<T>& tape, Var a, Var b, T wa, T wb) {
  const Tensor<T>& va = tape.value(a);
  const Tensor<T>& vb = tape.value(b);
  if (va.shape() != vb.shape()) {
    throw ShapeError("cannot combine " + shape_string(va.shape()) + " with " +
                     shape_string(vb.shape()));
  }
  Tensor<T> y(va.shape());
  const bool plain = wa == T(1) && wb == T(1);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = plain ? va[i] + vb[i] : wa * va[i] + wb * vb[i];
  return tape.record(plain ? OpKind::kAdd : OpKind::kWeightedSum, {a, b}, std::move(y),
                     [a, b, wa, wb, plain](GradTape<T>& t, const Tensor<T>& g) {
                       if (plain) {
                         t.accumulate(a, g);
                         t.accumulate(b, g);
                         return;
                       }
                       Tensor<T> ga(g.shape()), gb(g.shape());
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         ga[i] = wa * g[i];
                         gb[i] = wb * g[i];
                       }
                       t.accumulate(a, ga);
                       t.accumulate(b, gb);
                     });
}

template <typename T>
Var reshape(GradTape<T>& tape, Var x, Shape shape) {
  Tensor<T> y = tape.value(x).reshaped(std::move(shape));
  return tape.record(OpKind::kReshape, {x}, std::move(y),
                     [x](GradTape<T>& t, const Tensor<T>& g) {
                       t.accumulate(x, g.reshaped(t.value(x).shape()));
                     });
}

template <typename T>
Var zero_pad(GradTape<T>& tape, Var x, const Padding& pad) {
  Tensor<T> y = pad_impl(tape.value(x), pad);
  return tape.record(OpKind::kPad, {x}, std::move(y),
                     [x, pad](GradTape<T>& t, const Tensor<T>& g) {
                       t.accumulate(x, crop_impl(g, t.value(x).shape(), pad));
                     });
}

template <typename T>
Var sum(GradTape<T>& tape, Var x) {
  double s = 0.0;
  for (T v : tape.value(x).data()) s += v;
  return tape.record(OpKind::kSum, {x}, Tensor<T>({1}, static_cast<T>(s)),
                     [x](GradTape<T>& t, const Tensor<T>& g) {
                       t.accumulate(x, Tensor<T>(t.value(x).shape(), g[0]));
                     });
}

template <typename T>
Var residual_forward(GradTape<T>& tape, Var x, ResidualBlock<T>& block, Mode mode) {
  auto conv_bn_relu = [&](Var in, ConvParams<T>& conv, BatchNormParams<T>& bn) {
    Var w = tape.leaf(conv.weights);
    Var b = tape.leaf(conv.bias);
    Var y = conv2d(tape, in, w, b, conv.geometry);
    Var gm = tape.leaf(bn.gamma);
    Var bt = tape.leaf(bn.beta);
    BatchNormStats<T> stats{&bn.running_mean, &bn.running_var, bn.epsilon, bn.stat_momentum};
    y = batch_norm(tape, y, gm, bt, stats, mode);
    return relu(tape, y);
  };
  Var h = conv_bn_relu(x, block.conv1, block.bn1);
  h = conv_bn_relu(h, block.conv2, block.bn2);
  Var skip = x;
  if (block.projection) {
    Var pw = tape.leaf(block.projection->weights);
    Var pb = tape.leaf(block.projection->bias);
    skip = conv2d(tape, x, pw, pb, block.projection->geometry);
  }
  if (tape.value(skip).shape() != tape.value(h).shape()) {
    throw ShapeError("residual: skip path " + shape_string(tape.value(skip).shape()) +
                     " cannot be added to block output " + shape_string(tape.value(h).shape()));
  }
  return add(tape, h, skip);
}

}  // namespace ad

template <typename T>
Tensor<T> residual_forward(const Tensor<T>& x, ResidualBlock<T>& block, Mode mode) {
  GradTape<T> tape(false);
  Var in = tape.leaf(x, false);
  return tape.value(ad::residual_forward(tape, in, block, mode));
}

#define COVNET_INSTANTIATE_OPS(T)                                                             \
  template struct BatchNormParams<T>;                                                         \
  template Tensor<T> conv2d(const Tensor<T>&, const ConvParams<T>&);                          \
  template Tensor<T> batch_norm(const Tensor<T>&, BatchNormParams<T>&, Mode);                 \
  template Tensor<T> relu(const Tensor<T>&);                                                  \
  template PoolResult<T> max_pool2d(const Tensor<T>&);                                        \
  template Tensor<T> avg_pool2d(const Tensor<T>&);                                            \
  template Tensor<T> max_unpool2d(const Tensor<T>&, const IndexMap&, const Shape&);           \
  template Tensor<T> avg_unpool2d(const Tensor<T>&, const Shape&);                            \
  template Tensor<T> fully_connected(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);   \
  template Tensor<T> dropout(const Tensor<T>&, double, Mode, std::uint64_t);                  \
  template Tensor<T> softmax(const Tensor<T>&);                                               \
  template LossResult<T> cross_entropy_loss(const Tensor<T>&, std::span<const int>,           \
                                            std::span<const T>);                              \
  template Tensor<T> zero_pad(const Tensor<T>&, const Padding&);                              \
  template Tensor<T> residual_forward(const Tensor<T>&, ResidualBlock<T>&, Mode);             \
  template Var ad::conv2d(GradTape<T>&, Var, Var, Var, const ConvGeometry&);                  \
  template Var ad::batch_norm(GradTape<T>&, Var, Var, Var, const BatchNormStats<T>&, Mode);   \
  template Var ad::relu(GradTape<T>&, Var);                                                   \
  template std::pair<Var, IndexMap> ad::max_pool2d(GradTape<T>&, Var);                        \
  template Var ad::avg_pool2d(GradTape<T>&, Var);                                             \
  template Var ad::max_unpool2d(GradTape<T>&, Var, const IndexMap&, const Shape&);            \
  template Var ad::avg_unpool2d(GradTape<T>&, Var, const Shape&);                             \
  template Var ad::fully_connected(GradTape<T>&, Var, Var, Var);                              \
  template Var ad::dropout(GradTape<T>&, Var, double, Mode, std::uint64_t);                   \
  template Var ad::softmax(GradTape<T>&, Var);                                                 \
  template Var ad::cross_entropy_loss(GradTape<T>&, Var, std::span<const int>,                \
                                      std::span<const T>);                                    \
  template Var ad::add(GradTape<T>&, Var, Var);                                               \
  template Var ad::weighted_sum(GradTape<T>&, Var, Var, T, T);                                \
  template Var ad::reshape(GradTape<T>&, Var, Shape);                                         \
  template Var ad::zero_pad(GradTape<T>&, Var, const Padding&);                               \
  template Var ad::sum(GradTape<T>&, Var);                                                    \
  template Var ad::residual_forward(GradTape<T>&, Var, ResidualBlock<T>&, Mode);

COVNET_INSTANTIATE_OPS(float)
COVNET_INSTANTIATE_OPS(double)

#undef COVNET_INSTANTIATE_OPS

}  // namespace covnet
