#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "covnet/tape.hpp"
#include "covnet/tensor.hpp"

namespace covnet {

enum class Mode { kTrain, kEval };

struct Padding {
  std::size_t top = 0;
  std::size_t left = 0;
  std::size_t bottom = 0;
  std::size_t right = 0;

  static Padding symmetric(std::size_t ph, std::size_t pw) { return {ph, pw, ph, pw}; }
  bool operator==(const Padding&) const = default;
};

struct ConvGeometry {
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  Padding pad;
};

template <typename T>
struct ConvParams {
  Tensor<T> weights;  // (outC, inC, kH, kW)
  Tensor<T> bias;     // (outC)
  ConvGeometry geometry;
};

template <typename T>
struct BatchNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T epsilon = T(1e-5);
  T stat_momentum = T(0.1);

  static BatchNormParams identity(std::size_t channels);
};

/// Running statistics of a batch-norm layer; mutated by train-mode forwards.
template <typename T>
struct BatchNormStats {
  Tensor<T>* running_mean = nullptr;
  Tensor<T>* running_var = nullptr;
  T epsilon = T(1e-5);
  T stat_momentum = T(0.1);
};

/// Per pooled output element, the offset (h * W + w) of the selected input
/// element inside its (n, c) plane.
struct IndexMap {
  Shape input_shape;
  Shape output_shape;
  std::vector<std::uint32_t> offsets;
};

template <typename T>
struct PoolResult {
  Tensor<T> output;
  IndexMap indices;
};

template <typename T>
struct LossResult {
  T loss;
  Tensor<T> grad;  // d(loss)/d(probs)
};

inline constexpr double kProbabilityFloor = 1e-12;

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t pad_before, std::size_t pad_after);

// ---------------------------------------------------------------------------
// Value-level operations. These never touch a tape.

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvParams<T>& p);

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, BatchNormParams<T>& p, Mode mode);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

template <typename T>
PoolResult<T> max_pool2d(const Tensor<T>& x);

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x);

template <typename T>
Tensor<T> max_unpool2d(const Tensor<T>& x, const IndexMap& indices, const Shape& out_shape);

template <typename T>
Tensor<T> avg_unpool2d(const Tensor<T>& x, const Shape& out_shape);

/// x: (N, F), weights: (O, F), bias: (O).
template <typename T>
Tensor<T> fully_connected(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& bias);

/// Inverted dropout. Returns the input unchanged in eval mode or at rate 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, std::uint64_t seed);

/// Softmax along axis 1 of an (N, C) or (N, C, H, W) tensor.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x);

/// Mean over samples (or pixels) of -w[target] * log(max(p[target], 1e-12)).
/// `targets` holds one class index per sample, or per pixel in (n, h, w)
/// order. An empty `class_weights` means every weight is 1.
template <typename T>
LossResult<T> cross_entropy_loss(const Tensor<T>& probs, std::span<const int> targets,
                                 std::span<const T> class_weights = {});

template <typename T>
Tensor<T> zero_pad(const Tensor<T>& x, const Padding& pad);

// ---------------------------------------------------------------------------
// Tape-level operations: same maths, recorded for reverse-mode gradients.
namespace ad {

template <typename T>
Var conv2d(GradTape<T>& tape, Var x, Var weights, Var bias, const ConvGeometry& geometry);

template <typename T>
Var batch_norm(GradTape<T>& tape, Var x, Var gamma, Var beta, const BatchNormStats<T>& stats,
               Mode mode);

template <typename T>
Var relu(GradTape<T>& tape, Var x);

template <typename T>
std::pair<Var, IndexMap> max_pool2d(GradTape<T>& tape, Var x);

template <typename T>
Var avg_pool2d(GradTape<T>& tape, Var x);

template <typename T>
Var max_unpool2d(GradTape<T>& tape, Var x, const IndexMap& indices, const Shape& out_shape);

template <typename T>
Var avg_unpool2d(GradTape<T>& tape, Var x, const Shape& out_shape);

template <typename T>
Var fully_connected(GradTape<T>& tape, Var x, Var weights, Var bias);

template <typename T>
Var dropout(GradTape<T>& tape, Var x, double rate, Mode mode, std::uint64_t seed);

template <typename T>
Var softmax(GradTape<T>& tape, Var x);

template <typename T>
Var cross_entropy_loss(GradTape<T>& tape, Var probs, std::span<const int> targets,
                       std::span<const T> class_weights = {});

template <typename T>
Var add(GradTape<T>& tape, Var a, Var b);

// wa * a + wb * b
template <typename T>
Var weighted_sum(GradTape<T>& tape, Var a, Var b, T wa, T wb);

template <typename T>
Var reshape(GradTape<T>& tape, Var x, Shape shape);

template <typename T>
Var zero_pad(GradTape<T>& tape, Var x, const Padding& pad);

template <typename T>
Var sum(GradTape<T>& tape, Var x);

}  // namespace ad

// ---------------------------------------------------------------------------
// Residual unit: two conv-BN-ReLU sub-blocks plus an identity (or 1x1
// projection) skip.

template <typename T>
struct ResidualBlock {
  ConvParams<T> conv1;
  BatchNormParams<T> bn1;
  ConvParams<T> conv2;
  BatchNormParams<T> bn2;
  std::optional<ConvParams<T>> projection;
};

template <typename T>
Tensor<T> residual_forward(const Tensor<T>& x, ResidualBlock<T>& block, Mode mode);

namespace ad {

/// Records the block on `tape`; parameters become leaves. Returns the output.
template <typename T>
Var residual_forward(GradTape<T>& tape, Var x, ResidualBlock<T>& block, Mode mode);

}  // namespace ad

}  // namespace covnet
