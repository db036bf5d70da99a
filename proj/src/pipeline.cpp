#include "covnet/pipeline.hpp"

namespace covnet {

Preprocess classifier_preprocess(const ArchConfig& cfg) {
  return Preprocess{cfg.height, cfg.width, true, true};
}

Preprocess segmenter_preprocess(const ArchConfig& cfg) {
  return Preprocess{cfg.height, cfg.width, true, false};
}

template <typename T>
Mask argmax_mask(const Tensor<T>& probs, std::size_t sample) {
  require_nchw(probs, "argmax_mask");
  if (probs.dim(1) != 2) throw ShapeError("argmax_mask: expected two classes");
  const std::size_t h = probs.dim(2), w = probs.dim(3);
  Mask m(h, w);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) m.at(r, c) = probs.at(sample, 1, r, c) > probs.at(sample, 0, r, c);
  }
  return m;
}

template <typename T>
TwoStageResult two_stage_predict(const ModelGraph<T>& classifier, const ModelGraph<T>& segmenter,
                                 const Tensor<double>& image) {
  if (image.rank() != 3 || image.dim(0) != 1) {
    throw ShapeError("two_stage_predict: expected a (1, H, W) image, got " + shape_string(image.shape()));
  }
  if (classifier.is_segmenter() || !segmenter.is_segmenter()) {
    throw ParameterError("two_stage_predict: need a classifier and a segmenter");
  }
  const std::size_t h = image.dim(1), w = image.dim(2);
  TwoStageResult r;
  r.mask = Mask(h, w);
  const Tensor<double> x = preprocess_image(image, classifier_preprocess(classifier.config));
  const Tensor<T> probs = predict(classifier, x.cast<T>().reshaped(classifier.input_shape(1)));
  r.p_infected = static_cast<double>(probs[kInfected]);
  if (r.p_infected < kInfectedThreshold) return r;
  r.label = kInfected;
  r.segmenter_invoked = true;
  const Tensor<double> s = preprocess_image(image, segmenter_preprocess(segmenter.config));
  const Mask m = argmax_mask(predict(segmenter, s.cast<T>().reshaped(segmenter.input_shape(1))));
  r.mask = (m.rows == h && m.cols == w) ? m : resize_nearest(m, h, w);
  return r;
}

template Mask argmax_mask(const Tensor<float>&, std::size_t);
template Mask argmax_mask(const Tensor<double>&, std::size_t);
template TwoStageResult two_stage_predict(const ModelGraph<float>&, const ModelGraph<float>&, const Tensor<double>&);
template TwoStageResult two_stage_predict(const ModelGraph<double>&, const ModelGraph<double>&, const Tensor<double>&);

}  // namespace covnet
