#include "covnet/tape.hpp"

#include <string>

namespace covnet {

const char* op_kind_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kBatchNorm: return "batch_norm";
    case OpKind::kRelu: return "relu";
    case OpKind::kMaxPool: return "max_pool2d";
    case OpKind::kAvgPool: return "avg_pool2d";
    case OpKind::kMaxUnpool: return "max_unpool2d";
    case OpKind::kAvgUnpool: return "avg_unpool2d";
    case OpKind::kLinear: return "fully_connected";
    case OpKind::kDropout: return "dropout";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kCrossEntropy: return "cross_entropy";
    case OpKind::kAdd: return "add";
    case OpKind::kWeightedSum: return "weighted_sum";
    case OpKind::kReshape: return "reshape";
    case OpKind::kPad: return "pad";
    case OpKind::kSum: return "sum";
  }
  return "unknown";
}

template <typename T>
Var GradTape<T>::leaf(Tensor<T> value, bool requires_grad) {
  Node node{OpKind::kLeaf, {}, std::move(value), nullptr, recording_ && requires_grad};
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

template <typename T>
Var GradTape<T>::record(OpKind kind, std::vector<Var> inputs, Tensor<T> value,
                        BackwardFn backward) {
  bool needs = false;
  if (recording_) {
    for (Var in : inputs) {
      if (in.id >= nodes_.size()) throw ParameterError("tape input refers to a future node");
      needs = needs || nodes_[in.id].requires_grad;
    }
  }
  Node node{kind, std::move(inputs), std::move(value), needs ? std::move(backward) : nullptr,
            needs};
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

template <typename T>
void GradTape<T>::accumulate(Var v, const Tensor<T>& grad) {
  if (!nodes_[v.id].requires_grad) return;
  Tensor<T>& slot = grads_[v.id];
  if (slot.empty()) {
    slot = grad;
    return;
  }
  if (slot.shape() != grad.shape()) {
    throw ShapeError("gradient shape " + shape_string(grad.shape()) + " does not match value " +
                     shape_string(slot.shape()));
  }
  auto dst = slot.data();
  auto src = grad.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <typename T>
void GradTape<T>::backward(Var loss) {
  if (nodes_.empty()) throw ParameterError("backward called on an empty tape");
  if (!recording_) throw ParameterError("backward called on a non-recording tape");
  if (loss.id >= nodes_.size()) throw ParameterError("loss node is not on the tape");
  if (nodes_[loss.id].value.size() != 1) {
    throw ShapeError("backward target must be a scalar, got " +
                     shape_string(nodes_[loss.id].value.shape()));
  }
  grads_.assign(nodes_.size(), Tensor<T>());
  grads_[loss.id] = Tensor<T>(nodes_[loss.id].value.shape(), T(1));
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.backward || grads_[i].empty()) continue;
    node.backward(*this, grads_[i]);
    // Interior gradients are not needed once propagated.
    grads_[i] = Tensor<T>();
  }
}

template <typename T>
Tensor<T> GradTape<T>::grad(Var v) const {
  if (v.id < grads_.size() && !grads_[v.id].empty()) return grads_[v.id];
  return Tensor<T>::zeros_like(nodes_.at(v.id).value);
}

template class GradTape<float>;
template class GradTape<double>;

}  // namespace covnet
