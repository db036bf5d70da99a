#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "covnet/ops.hpp"
#include "covnet/tape.hpp"
#include "covnet/tensor.hpp"

namespace covnet {

inline constexpr const char* kArchCovCtNet = "cov-ctnet";
inline constexpr const char* kArchCovRaSeg = "cov-raseg";
inline constexpr const char* kArchSegNet = "segnet";

/// Architecture description; everything needed to rebuild a graph's
/// topology and parameter shapes. Its canonical text is what checkpoints
/// store and hash.
struct ArchConfig {
  std::string arch = kArchCovCtNet;
  std::size_t in_channels = 1;
  std::size_t height = 82;
  std::size_t width = 82;
  std::size_t classes = 2;
  std::vector<std::size_t> widths;
  std::vector<std::size_t> fc_widths;  // classifier head only
  double dropout = 0.5;                // classifier head only
  double fuse_max_weight = 0.5;        // weight of the max branch in pooling fusion

  std::string canonical_text() const;
  static ArchConfig from_text(const std::string& text);
  std::uint64_t hash() const;
  bool is_segmenter() const { return arch != kArchCovCtNet; }
  bool operator==(const ArchConfig&) const = default;
};

ArchConfig cov_ctnet_config(std::size_t height = 82, std::size_t width = 82);
ArchConfig cov_raseg_config(std::size_t height = 304, std::size_t width = 304);
ArchConfig segnet_config(std::size_t height = 304, std::size_t width = 304);

std::uint64_t fnv1a64(const std::string& bytes);

enum class LayerKind {
  kPad,
  kConv,
  kBatchNorm,
  kRelu,
  kMaxPool,
  kAvgPool,
  kMaxUnpool,
  kAvgUnpool,
  kFlatten,
  kLinear,
  kDropout,
  kSoftmax,
  kResidualBegin,
  kResidualEnd,
  kFuseSum,
};

const char* layer_kind_name(LayerKind kind);

inline constexpr int kGraphInput = -1;

struct LayerSpec {
  LayerKind kind = LayerKind::kRelu;
  std::string name;
  std::vector<int> inputs;  // producing layer ids, kGraphInput for the model input
  int link = -1;            // maxunpool -> its maxpool; residual-end -> its residual-begin
  std::size_t out_channels = 0;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  ConvGeometry geometry;
  std::size_t out_features = 0;
  double rate = 0.0;
  std::vector<double> fuse_weights;
  Padding pad;
  double bn_epsilon = 1e-5;
  double bn_momentum = 0.1;
  std::vector<std::size_t> params;  // indices into ModelGraph::params
};

template <typename T>
struct ParamEntry {
  std::string name;
  Tensor<T> value;
  bool trainable = true;  // false for batch-norm running statistics
};

template <typename T>
class ModelGraph {
 public:
  ArchConfig config;
  std::vector<LayerSpec> layers;
  std::vector<ParamEntry<T>> params;
  int feature_layer = -1;  // penultimate FC activations (classifier only)

  Shape input_shape(std::size_t batch) const {
    return {batch, config.in_channels, config.height, config.width};
  }
  bool is_segmenter() const { return config.is_segmenter(); }

  std::size_t trainable_count() const;  // number of trainable scalars
  std::size_t find_param(const std::string& name) const;
  Tensor<T>& param(const std::string& name) { return params[find_param(name)].value; }
  const Tensor<T>& param(const std::string& name) const {
    return params[find_param(name)].value;
  }

  template <typename U>
  ModelGraph<U> cast() const {
    ModelGraph<U> out;
    out.config = config;
    out.layers = layers;
    out.feature_layer = feature_layer;
    for (const auto& p : params) out.params.push_back({p.name, p.value.template cast<U>(), p.trainable});
    return out;
  }
};

/// Checks link resolution, acyclicity, index-link pairing and shape
/// agreement; returns the per-layer output shapes for a batch of one.
template <typename T>
std::vector<Shape> validate_graph(const ModelGraph<T>& model);

/// Stem conv, four residual stages each closed by a stride-2 conv, a max
/// pool, and an FC-ReLU-dropout x2 + FC-softmax head. Inputs are zero
/// padded up to a multiple of 32 per side.
template <typename T>
ModelGraph<T> build_cov_ctnet(const ArchConfig& cfg, std::uint64_t seed);

/// Encoder-decoder where every down step averages max- and average-pooled
/// maps and every up step averages index-guided max-unpooling with
/// replication; ends in a 2x2 conv and a per-pixel softmax.
template <typename T>
ModelGraph<T> build_cov_raseg(const ArchConfig& cfg, std::uint64_t seed);

/// Same topology as build_cov_raseg with plain max-pool / max-unpool.
template <typename T>
ModelGraph<T> build_segnet_baseline(const ArchConfig& cfg, std::uint64_t seed);

/// Dispatches on cfg.arch.
template <typename T>
ModelGraph<T> build_model(const ArchConfig& cfg, std::uint64_t seed);

template <typename T>
struct ForwardPass {
  GradTape<T> tape;
  Var input;
  Var output;
  std::vector<Var> layer_outputs;
  std::vector<Var> param_vars;  // one per ModelGraph::params entry
};

/// Executes the graph. Train mode records a differentiable tape, uses batch
/// statistics and updates running statistics in `model`; eval mode records
/// values only. `seed` drives dropout masks.
template <typename T>
ForwardPass<T> forward(ModelGraph<T>& model, const Tensor<T>& x, Mode mode,
                       std::uint64_t seed = 0);

/// Eval-mode forward on an immutable model, also recordable for gradient
/// checks of eval-mode paths.
template <typename T>
ForwardPass<T> forward_eval(const ModelGraph<T>& model, const Tensor<T>& x, bool record = false);

/// Eval-mode output probabilities.
template <typename T>
Tensor<T> predict(const ModelGraph<T>& model, const Tensor<T>& x);

#define COVNET_DECLARE_NETS(T)                                                               \
  extern template class ModelGraph<T>;                                                      \
  extern template std::vector<Shape> validate_graph(const ModelGraph<T>&);                  \
  extern template ModelGraph<T> build_cov_ctnet(const ArchConfig&, std::uint64_t);          \
  extern template ModelGraph<T> build_cov_raseg(const ArchConfig&, std::uint64_t);          \
  extern template ModelGraph<T> build_segnet_baseline(const ArchConfig&, std::uint64_t);    \
  extern template ModelGraph<T> build_model(const ArchConfig&, std::uint64_t);              \
  extern template ForwardPass<T> forward(ModelGraph<T>&, const Tensor<T>&, Mode,            \
                                         std::uint64_t);                                    \
  extern template ForwardPass<T> forward_eval(const ModelGraph<T>&, const Tensor<T>&, bool); \
  extern template Tensor<T> predict(const ModelGraph<T>&, const Tensor<T>&);
COVNET_DECLARE_NETS(float)
COVNET_DECLARE_NETS(double)
#undef COVNET_DECLARE_NETS

}  // namespace covnet
