#pragma once

#include <cstddef>

#include "covnet/tensor.hpp"

namespace covnet {

/// One level of a 2-D Haar decomposition. LH is low-pass along the width
/// and high-pass along the height; HL is the transpose.
template <typename T>
struct SubbandSet {
  Tensor<T> ll, lh, hl, hh;
  int level = 1;
  // Extents of the analysed image before any edge-replication padding.
  std::size_t source_rows = 0;
  std::size_t source_cols = 0;
};

/// Orthonormal Haar analysis of a rank-2 (H, W) image. Odd extents are
/// padded by replicating the last row/column.
template <typename T>
SubbandSet<T> dwt2_haar(const Tensor<T>& image);

/// Exact inverse of dwt2_haar, cropped back to the source extents.
template <typename T>
Tensor<T> idwt2_haar(const SubbandSet<T>& bands);

/// Pads a rank-2 image by replicating its last row/column.
template <typename T>
Tensor<T> pad_edge(const Tensor<T>& image, std::size_t rows, std::size_t cols);

/// Sums the images synthesised from the pure-approximation (LL^levels) and
/// pure-diagonal (HH^levels) branches of a multi-level Haar decomposition,
/// then min-max rescales to [0, 1]. A flat result maps to all zeros.
/// Images whose extents are not multiples of 2^levels are edge-padded for the
/// transform and cropped back afterwards.
template <typename T>
Tensor<T> enhance_image(const Tensor<T>& image, int levels = 2);

/// Min-max rescale to [0, 1]; flat inputs map to zeros.
template <typename T>
Tensor<T> minmax_normalize(const Tensor<T>& x);

extern template struct SubbandSet<float>;
extern template struct SubbandSet<double>;

}  // namespace covnet
