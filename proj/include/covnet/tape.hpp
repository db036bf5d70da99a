#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "covnet/tensor.hpp"

namespace covnet {

enum class OpKind {
  kLeaf,
  kConv2d,
  kBatchNorm,
  kRelu,
  kMaxPool,
  kAvgPool,
  kMaxUnpool,
  kAvgUnpool,
  kLinear,
  kDropout,
  kSoftmax,
  kCrossEntropy,
  kAdd,
  kWeightedSum,
  kReshape,
  kPad,
  kSum,
};

const char* op_kind_name(OpKind kind);

/// Handle to a value recorded on a GradTape.
struct Var {
  std::size_t id = 0;
};

/// Reverse-mode tape. Values are appended in execution order, so node inputs
/// always precede the node and a reverse sweep visits each node once.
///
/// A tape built with `recording == false` keeps values only; nothing is
/// differentiable and backward() is rejected.
template <typename T>
class GradTape {
 public:
  // Receives the gradient flowing into the node's output and must
  // accumulate into the gradients of its inputs through `tape.accumulate`.
  using BackwardFn = std::function<void(GradTape& tape, const Tensor<T>& grad_out)>;

  explicit GradTape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  Var leaf(Tensor<T> value, bool requires_grad = true);
  Var record(OpKind kind, std::vector<Var> inputs, Tensor<T> value, BackwardFn backward);

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  OpKind kind(Var v) const { return nodes_.at(v.id).kind; }
  const std::vector<Var>& inputs(Var v) const { return nodes_.at(v.id).inputs; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  void accumulate(Var v, const Tensor<T>& grad);

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse.
  void backward(Var loss);

  /// Gradient of the last backward() target w.r.t. `v`; zeros when no
  /// gradient reached it.
  Tensor<T> grad(Var v) const;

 private:
  struct Node {
    OpKind kind;
    std::vector<Var> inputs;
    Tensor<T> value;
    BackwardFn backward;
    bool requires_grad = false;
  };

  bool recording_;
  std::vector<Node> nodes_;
  std::vector<Tensor<T>> grads_;
};

extern template class GradTape<float>;
extern template class GradTape<double>;

}  // namespace covnet
