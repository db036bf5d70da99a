#include "covnet/sgd.hpp"

#include <string>

namespace covnet {

template <typename T>
void sgd_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads,
              SgdState<T>& state) {
  if (params.size() != grads.size()) {
    throw ShapeError("sgd_step: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  }
  if (state.velocity.empty()) {
    state.velocity.reserve(params.size());
    for (const Tensor<T>* p : params) state.velocity.push_back(Tensor<T>::zeros_like(*p));
  }
  if (state.velocity.size() != params.size()) {
    throw ShapeError("sgd_step: optimizer state tracks a different parameter set");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<T>& w = *params[k];
    const Tensor<T>& g = grads[k];
    Tensor<T>& v = state.velocity[k];
    if (w.shape() != g.shape() || w.shape() != v.shape()) {
      throw ShapeError("sgd_step: parameter " + std::to_string(k) + " has shape " +
                       shape_string(w.shape()) + " but gradient " + shape_string(g.shape()));
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = state.momentum * v[i] - state.learning_rate * g[i];
      w[i] += v[i];
    }
  }
}

template void sgd_step(std::span<Tensor<float>* const>, std::span<const Tensor<float>>,
                       SgdState<float>&);
template void sgd_step(std::span<Tensor<double>* const>, std::span<const Tensor<double>>,
                       SgdState<double>&);

}  // namespace covnet
