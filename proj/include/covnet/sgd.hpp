#pragma once

#include <span>
#include <vector>

#include "covnet/tensor.hpp"

namespace covnet {

/// Classical momentum SGD: v <- m * v - lr * g; w <- w + v.
template <typename T>
struct SgdState {
  std::vector<Tensor<T>> velocity;  // lazily sized to the parameters on first step
  T learning_rate = T(0.001);
  T momentum = T(0.95);
};

template <typename T>
void sgd_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads,
              SgdState<T>& state);

extern template void sgd_step(std::span<Tensor<float>* const>, std::span<const Tensor<float>>,
                              SgdState<float>&);
extern template void sgd_step(std::span<Tensor<double>* const>, std::span<const Tensor<double>>,
                              SgdState<double>&);

}  // namespace covnet
