#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "covnet/nets.hpp"

namespace covnet {

struct PcaResult {
  std::vector<double> mean;
  std::array<std::vector<double>, 2> components;  // unit vectors
  std::vector<double> eigenvalues;                 // descending, covariance with n - 1
  std::array<double, 2> explained_ratio{};
  std::vector<std::array<double, 2>> projection;   // one row per sample
};

// rows: one feature vector per sample. Components are sign-fixed so their
// largest-magnitude entry is positive.
PcaResult pca_2d(const std::vector<std::vector<double>>& rows);

// Activations of the classifier's feature layer for a batch (N, C, H, W),
// one row per sample, in eval mode.
template <typename T>
std::vector<std::vector<double>> extract_features(const ModelGraph<T>& model, const Tensor<T>& batch);

struct FeatureRow {
  std::string id;
  int label = 0;
  double pc1 = 0;
  double pc2 = 0;
};

// CSV with header `id,label,pc1,pc2`.
void write_pca_csv(const std::string& path, const std::vector<FeatureRow>& rows);

}  // namespace covnet
