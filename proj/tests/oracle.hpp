#pragma once

// Brute-force reference implementations used by the tests. They work on
// plain vectors with explicit index arithmetic and share no code with the
// library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "covnet/mask.hpp"
#include "covnet/tensor.hpp"

namespace oracle {

using covnet::Mask;
using covnet::Tensor;

// Integer-valued doubles keep every sum exact, so results compare with ==.
inline Tensor<double> integer_tensor(covnet::Shape shape, std::mt19937_64& gen, int lo = -4, int hi = 4) {
  Tensor<double> t(std::move(shape));
  std::uniform_int_distribution<int> d(lo, hi);
  for (auto& v : t.data()) v = d(gen);
  return t;
}

inline Tensor<double> conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                           std::size_t sh, std::size_t sw, std::size_t pt, std::size_t pl, std::size_t pb,
                           std::size_t pr) {
  const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t oh = (h + pt + pb - kh) / sh + 1, ow = (wd + pl + pr - kw) / sw + 1;
  Tensor<double> y({n, co, oh, ow});
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double s = b[o];
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t u = 0; u < kh; ++u)
              for (std::size_t v = 0; v < kw; ++v) {
                const long r = static_cast<long>(i * sh + u) - static_cast<long>(pt);
                const long q = static_cast<long>(j * sw + v) - static_cast<long>(pl);
                if (r < 0 || q < 0 || r >= static_cast<long>(h) || q >= static_cast<long>(wd)) continue;
                s += x[((a * ci + c) * h + r) * wd + q] * w[((o * ci + c) * kh + u) * kw + v];
              }
          y[((a * co + o) * oh + i) * ow + j] = s;
        }
  return y;
}

struct Pooled {
  Tensor<double> max;
  Tensor<double> mean;
  std::vector<std::size_t> argmax;  // offset within the (n, c) plane
};

inline Pooled pool(const Tensor<double>& x) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Pooled p{Tensor<double>({n, c, h / 2, w / 2}), Tensor<double>({n, c, h / 2, w / 2}), {}};
  for (std::size_t a = 0; a < n * c; ++a)
    for (std::size_t i = 0; i < h / 2; ++i)
      for (std::size_t j = 0; j < w / 2; ++j) {
        double best = 0, sum = 0;
        std::size_t at = 0;
        bool first = true;
        for (std::size_t u = 0; u < 2; ++u)
          for (std::size_t v = 0; v < 2; ++v) {
            const std::size_t off = (2 * i + u) * w + 2 * j + v;
            const double val = x[a * h * w + off];
            sum += val;
            if (first || val > best) {
              best = val;
              at = off;
              first = false;
            }
          }
        const std::size_t o = a * (h / 2) * (w / 2) + i * (w / 2) + j;
        p.max[o] = best;
        p.mean[o] = sum / 4;
        p.argmax.push_back(at);
      }
  return p;
}

// Window maxima scattered back to where they came from.
inline Tensor<double> unpool_max(const Tensor<double>& x) {
  const Pooled p = pool(x);
  Tensor<double> y(x.shape());
  const std::size_t plane = x.dim(2) * x.dim(3), out_plane = plane / 4;
  for (std::size_t k = 0; k < p.argmax.size(); ++k) y[(k / out_plane) * plane + p.argmax[k]] = p.max[k];
  return y;
}

inline Tensor<double> replicate(const Tensor<double>& x) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<double> y({n, c, 2 * h, 2 * w});
  for (std::size_t a = 0; a < n * c; ++a)
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < 2 * w; ++j) y[(a * 2 * h + i) * 2 * w + j] = x[(a * h + i / 2) * w + j / 2];
  return y;
}

struct Tally {
  std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;
};

inline Tally tally(const std::vector<int>& pred, const std::vector<int>& truth, int positive) {
  Tally t;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] == positive, g = truth[i] == positive;
    if (p && g) ++t.tp;
    else if (!p && !g) ++t.tn;
    else if (p) ++t.fp;
    else ++t.fn;
  }
  return t;
}

inline Tally tally(const Mask& pred, const Mask& truth, int positive) {
  return tally(std::vector<int>(pred.values.begin(), pred.values.end()),
               std::vector<int>(truth.values.begin(), truth.values.end()), positive);
}

inline Mask random_mask(std::size_t rows, std::size_t cols, std::mt19937_64& gen, double p = 0.3) {
  Mask m(rows, cols);
  std::bernoulli_distribution d(p);
  for (auto& v : m.values) v = d(gen);
  return m;
}

// Blobby masks have real boundaries, unlike salt-and-pepper noise.
inline Mask random_blobs(std::size_t rows, std::size_t cols, std::mt19937_64& gen) {
  Mask m(rows, cols);
  std::uniform_int_distribution<int> count(0, 4);
  std::uniform_real_distribution<double> u(0, 1);
  const int k = count(gen);
  for (int b = 0; b < k; ++b) {
    const double cr = u(gen) * rows, cc = u(gen) * cols, rad = 1 + u(gen) * std::min(rows, cols) / 3.0;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c)
        if ((r - cr) * (r - cr) + (c - cc) * (c - cc) <= rad * rad) m.values[r * cols + c] = 1;
  }
  return m;
}

inline bool on_boundary(const Mask& m, std::size_t r, std::size_t c, int cls) {
  if (m.values[r * m.cols + c] != cls) return false;
  const int dr[4] = {-1, 1, 0, 0}, dc[4] = {0, 0, -1, 1};
  for (int k = 0; k < 4; ++k) {
    const long rr = static_cast<long>(r) + dr[k], cc = static_cast<long>(c) + dc[k];
    if (rr < 0 || cc < 0 || rr >= static_cast<long>(m.rows) || cc >= static_cast<long>(m.cols)) continue;
    if (m.values[rr * m.cols + cc] != cls) return true;
  }
  return false;
}

// Boundary F1 by exhaustive pairwise distances. Empty-vs-empty counts as 1.
inline double bf(const Mask& pred, const Mask& gt, int cls, double tol) {
  std::vector<std::pair<long, long>> pb, gb;
  for (std::size_t r = 0; r < gt.rows; ++r)
    for (std::size_t c = 0; c < gt.cols; ++c) {
      if (on_boundary(pred, r, c, cls)) pb.push_back({static_cast<long>(r), static_cast<long>(c)});
      if (on_boundary(gt, r, c, cls)) gb.push_back({static_cast<long>(r), static_cast<long>(c)});
    }
  if (pb.empty() && gb.empty()) return 1.0;
  if (pb.empty() || gb.empty()) return 0.0;
  auto near = [&](const std::pair<long, long>& a, const std::vector<std::pair<long, long>>& set) {
    for (const auto& b : set) {
      const long dr = a.first - b.first, dc = a.second - b.second;
      if (static_cast<double>(dr * dr + dc * dc) <= tol * tol) return true;
    }
    return false;
  };
  std::uint64_t hp = 0, hr = 0;
  for (const auto& p : pb) hp += near(p, gb);
  for (const auto& g : gb) hr += near(g, pb);
  const double precision = static_cast<double>(hp) / pb.size(), recall = static_cast<double>(hr) / gb.size();
  return precision + recall == 0 ? 0.0 : 2 * precision * recall / (precision + recall);
}

// Precision-recall area by trying every threshold and integrating with the
// trapezoid rule, starting from recall 0 at the first point's precision.
inline double pr_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::vector<double> th(scores);
  std::sort(th.begin(), th.end(), std::greater<>());
  th.erase(std::unique(th.begin(), th.end()), th.end());
  std::uint64_t pos = 0;
  for (int l : labels) pos += l == 1;
  double area = 0, prev_r = 0, prev_p = -1;
  for (double t : th) {
    std::uint64_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] >= t) (labels[i] == 1 ? tp : fp)++;
    }
    const double p = static_cast<double>(tp) / (tp + fp), r = static_cast<double>(tp) / pos;
    if (prev_p < 0) prev_p = p;
    area += (r - prev_r) * (p + prev_p) / 2;
    prev_r = r;
    prev_p = p;
  }
  return area;
}

// Symmetric eigen-decomposition by cyclic Jacobi rotations.
inline void jacobi(std::vector<std::vector<double>> a, std::vector<double>& values,
                   std::vector<std::vector<double>>& vectors) {
  const std::size_t n = a.size();
  vectors.assign(n, std::vector<double>(n, 0));
  for (std::size_t i = 0; i < n; ++i) vectors[i][i] = 1;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2 * a[p][q]);
        const double t = (theta >= 0 ? 1 : -1) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = vectors[k][p], vkq = vectors[k][q];
          vectors[k][p] = c * vkp - s * vkq;
          vectors[k][q] = s * vkp + c * vkq;
        }
      }
  }
  values.resize(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = a[i][i];
}

}  // namespace oracle
