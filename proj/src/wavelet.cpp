#include "covnet/wavelet.hpp"

#include <algorithm>
#include <string>

namespace covnet {

namespace {

template <typename T>
void require_image(const Tensor<T>& image, const char* what) {
  if (image.empty()) throw ParameterError(std::string(what) + ": empty image");
  if (image.rank() != 2) {
    throw ShapeError(std::string(what) + ": expected a rank-2 (H, W) image, got " +
                     shape_string(image.shape()));
  }
}

std::size_t round_up(std::size_t v, std::size_t m) { return (v + m - 1) / m * m; }

}  // namespace

template <typename T>
Tensor<T> pad_edge(const Tensor<T>& image, std::size_t rows, std::size_t cols) {
  const std::size_t h = image.dim(0), w = image.dim(1);
  if (rows == h && cols == w) return image;
  Tensor<T> out({rows, cols});
  for (std::size_t y = 0; y < rows; ++y) {
    const std::size_t sy = std::min(y, h - 1);
    for (std::size_t x = 0; x < cols; ++x) out[y * cols + x] = image[sy * w + std::min(x, w - 1)];
  }
  return out;
}

// The separable width-then-height filter bank with taps 1/sqrt(2) collapses
// to a 2x2 block transform with factor 1/2, which is what is evaluated here.
template <typename T>
SubbandSet<T> dwt2_haar(const Tensor<T>& image) {
  require_image(image, "dwt2_haar");
  const std::size_t h0 = image.dim(0), w0 = image.dim(1);
  const Tensor<T> x = pad_edge(image, round_up(h0, 2), round_up(w0, 2));
  const std::size_t w = x.dim(1);
  const std::size_t bh = x.dim(0) / 2, bw = w / 2;
  SubbandSet<T> s{Tensor<T>({bh, bw}), Tensor<T>({bh, bw}), Tensor<T>({bh, bw}),
                  Tensor<T>({bh, bw}), 1, h0, w0};
  for (std::size_t i = 0; i < bh; ++i) {
    for (std::size_t j = 0; j < bw; ++j) {
      const T a = x[(2 * i) * w + 2 * j];
      const T b = x[(2 * i) * w + 2 * j + 1];
      const T c = x[(2 * i + 1) * w + 2 * j];
      const T d = x[(2 * i + 1) * w + 2 * j + 1];
      const std::size_t k = i * bw + j;
      s.ll[k] = (a + b + c + d) / T(2);
      s.lh[k] = (a + b - c - d) / T(2);
      s.hl[k] = (a - b + c - d) / T(2);
      s.hh[k] = (a - b - c + d) / T(2);
    }
  }
  return s;
}

template <typename T>
Tensor<T> idwt2_haar(const SubbandSet<T>& s) {
  const Shape& sh = s.ll.shape();
  if (s.ll.rank() != 2 || s.lh.shape() != sh || s.hl.shape() != sh || s.hh.shape() != sh) {
    throw ShapeError("idwt2_haar: subbands have mismatched shapes " + shape_string(s.ll.shape()) +
                     ", " + shape_string(s.lh.shape()) + ", " + shape_string(s.hl.shape()) +
                     ", " + shape_string(s.hh.shape()));
  }
  const std::size_t bh = sh[0], bw = sh[1];
  const std::size_t rows = s.source_rows ? s.source_rows : 2 * bh;
  const std::size_t cols = s.source_cols ? s.source_cols : 2 * bw;
  if (round_up(rows, 2) != 2 * bh || round_up(cols, 2) != 2 * bw) {
    throw ShapeError("idwt2_haar: source extents do not match subband shape");
  }
  const std::size_t w = 2 * bw;
  Tensor<T> full({2 * bh, w});
  for (std::size_t i = 0; i < bh; ++i) {
    for (std::size_t j = 0; j < bw; ++j) {
      const std::size_t k = i * bw + j;
      const T ll = s.ll[k], lh = s.lh[k], hl = s.hl[k], hh = s.hh[k];
      full[(2 * i) * w + 2 * j] = (ll + lh + hl + hh) / T(2);
      full[(2 * i) * w + 2 * j + 1] = (ll + lh - hl - hh) / T(2);
      full[(2 * i + 1) * w + 2 * j] = (ll - lh + hl - hh) / T(2);
      full[(2 * i + 1) * w + 2 * j + 1] = (ll - lh - hl + hh) / T(2);
    }
  }
  if (rows == 2 * bh && cols == w) return full;
  Tensor<T> out({rows, cols});
  for (std::size_t y = 0; y < rows; ++y) {
    std::copy_n(full.data().data() + y * w, cols, out.data().data() + y * cols);
  }
  return out;
}

template <typename T>
Tensor<T> minmax_normalize(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros_like(x);
  if (x.size() == 0) return out;
  const auto [lo, hi] = std::minmax_element(x.data().begin(), x.data().end());
  const T range = *hi - *lo;
  if (!(range > T(0))) return out;
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - *lo) / range;
  return out;
}

namespace {

enum class Branch { kApproximation, kDiagonal };

// Decomposes `levels` times along one branch, zeroes every other subband,
// and synthesises back to full resolution.
template <typename T>
Tensor<T> single_branch(const Tensor<T>& image, int levels, Branch branch) {
  SubbandSet<T> s = dwt2_haar(image);
  Tensor<T> child = branch == Branch::kApproximation ? s.ll : s.hh;
  Tensor<T> kept = levels > 1 ? single_branch(child, levels - 1, branch) : child;
  const Tensor<T> zero = Tensor<T>::zeros_like(kept);
  SubbandSet<T> only{zero, zero, zero, zero, s.level, s.source_rows, s.source_cols};
  (branch == Branch::kApproximation ? only.ll : only.hh) = std::move(kept);
  return idwt2_haar(only);
}

}  // namespace

template <typename T>
Tensor<T> enhance_image(const Tensor<T>& image, int levels) {
  require_image(image, "enhance_image");
  if (levels < 1 || levels > 3) {
    throw ParameterError("enhance_image: levels must be 1..3, got " + std::to_string(levels));
  }
  const std::size_t h = image.dim(0), w = image.dim(1);
  const std::size_t m = std::size_t{1} << levels;
  const Tensor<T> padded = pad_edge(image, round_up(h, m), round_up(w, m));
  const Tensor<T> a = single_branch(padded, levels, Branch::kApproximation);
  const Tensor<T> b = single_branch(padded, levels, Branch::kDiagonal);
  Tensor<T> fused({h, w});
  const std::size_t pw = padded.dim(1);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) fused[y * w + x] = a[y * pw + x] + b[y * pw + x];
  }
  return minmax_normalize(fused);
}

template struct SubbandSet<float>;
template struct SubbandSet<double>;
template SubbandSet<float> dwt2_haar(const Tensor<float>&);
template SubbandSet<double> dwt2_haar(const Tensor<double>&);
template Tensor<float> idwt2_haar(const SubbandSet<float>&);
template Tensor<double> idwt2_haar(const SubbandSet<double>&);
template Tensor<float> pad_edge(const Tensor<float>&, std::size_t, std::size_t);
template Tensor<double> pad_edge(const Tensor<double>&, std::size_t, std::size_t);
template Tensor<float> enhance_image(const Tensor<float>&, int);
template Tensor<double> enhance_image(const Tensor<double>&, int);
template Tensor<float> minmax_normalize(const Tensor<float>&);
template Tensor<double> minmax_normalize(const Tensor<double>&);

}  // namespace covnet
