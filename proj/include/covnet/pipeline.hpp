#pragma once

#include "covnet/dataio.hpp"
#include "covnet/mask.hpp"
#include "covnet/nets.hpp"

namespace covnet {

inline constexpr double kInfectedThreshold = 0.5;

// Classifier input: wavelet-enhanced at native resolution, then resized.
Preprocess classifier_preprocess(const ArchConfig& cfg);
Preprocess segmenter_preprocess(const ArchConfig& cfg);

struct TwoStageResult {
  int label = kHealthy;
  double p_infected = 0;
  bool segmenter_invoked = false;
  Mask mask;  // at the input image's resolution; all zero when healthy
};

// Per-pixel argmax of a (1, 2, H, W) probability map; ties go to background.
template <typename T>
Mask argmax_mask(const Tensor<T>& probs, std::size_t sample = 0);

// `image` is (1, H, W) in [0, 1]. p(infected) >= 0.5 counts as infected.
template <typename T>
TwoStageResult two_stage_predict(const ModelGraph<T>& classifier, const ModelGraph<T>& segmenter,
                                 const Tensor<double>& image);

}  // namespace covnet
