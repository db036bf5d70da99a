#include "covnet/nets.hpp"

#include <cmath>
#include <map>
#include <random>
#include <sstream>

#include "json.hpp"

namespace covnet {

using nlohmann::json;

// ---------------------------------------------------------------------------
// ArchConfig

std::string ArchConfig::canonical_text() const {
  json j;
  j["arch"] = arch;
  j["in_channels"] = in_channels;
  j["height"] = height;
  j["width"] = width;
  j["classes"] = classes;
  j["widths"] = widths;
  j["fc_widths"] = fc_widths;
  j["dropout"] = dropout;
  j["fuse_max_weight"] = fuse_max_weight;
  return j.dump();
}

ArchConfig ArchConfig::from_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
    ArchConfig c;
    c.arch = j.at("arch").get<std::string>();
    c.in_channels = j.at("in_channels").get<std::size_t>();
    c.height = j.at("height").get<std::size_t>();
    c.width = j.at("width").get<std::size_t>();
    c.classes = j.at("classes").get<std::size_t>();
    c.widths = j.at("widths").get<std::vector<std::size_t>>();
    c.fc_widths = j.at("fc_widths").get<std::vector<std::size_t>>();
    c.dropout = j.at("dropout").get<double>();
    c.fuse_max_weight = j.at("fuse_max_weight").get<double>();
    return c;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed architecture config: ") + e.what());
  }
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t ArchConfig::hash() const { return fnv1a64(canonical_text()); }

ArchConfig cov_ctnet_config(std::size_t height, std::size_t width) {
  ArchConfig c;
  c.arch = kArchCovCtNet;
  c.height = height;
  c.width = width;
  c.widths = {16, 32, 64, 128};
  c.fc_widths = {128, 64};
  c.dropout = 0.5;
  return c;
}

ArchConfig cov_raseg_config(std::size_t height, std::size_t width) {
  ArchConfig c;
  c.arch = kArchCovRaSeg;
  c.height = height;
  c.width = width;
  c.widths = {32, 64, 128, 256};
  c.fc_widths = {};
  c.dropout = 0.0;
  c.fuse_max_weight = 0.5;
  return c;
}

ArchConfig segnet_config(std::size_t height, std::size_t width) {
  ArchConfig c = cov_raseg_config(height, width);
  c.arch = kArchSegNet;
  c.fuse_max_weight = 1.0;
  return c;
}

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::kPad: return "pad";
    case LayerKind::kConv: return "conv";
    case LayerKind::kBatchNorm: return "bn";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kMaxPool: return "maxpool";
    case LayerKind::kAvgPool: return "avgpool";
    case LayerKind::kMaxUnpool: return "maxunpool";
    case LayerKind::kAvgUnpool: return "avgunpool";
    case LayerKind::kFlatten: return "flatten";
    case LayerKind::kLinear: return "fc";
    case LayerKind::kDropout: return "dropout";
    case LayerKind::kSoftmax: return "softmax";
    case LayerKind::kResidualBegin: return "residual-begin";
    case LayerKind::kResidualEnd: return "residual-end";
    case LayerKind::kFuseSum: return "fuse-sum";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// ModelGraph

template <typename T>
std::size_t ModelGraph<T>::trainable_count() const {
  std::size_t n = 0;
  for (const auto& p : params) {
    if (p.trainable) n += p.value.size();
  }
  return n;
}

template <typename T>
std::size_t ModelGraph<T>::find_param(const std::string& name) const {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name == name) return i;
  }
  throw ParameterError("no parameter named '" + name + "'");
}

namespace {

[[noreturn]] void graph_error(const LayerSpec& layer, const std::string& what) {
  throw ShapeError("layer '" + layer.name + "' (" + layer_kind_name(layer.kind) + "): " + what);
}

template <typename T>
Shape infer_shape(const ModelGraph<T>& model, std::size_t id, const std::vector<Shape>& shapes) {
  const LayerSpec& l = model.layers[id];
  std::vector<Shape> in;
  for (int src : l.inputs) {
    if (src == kGraphInput) {
      in.push_back(model.input_shape(1));
    } else if (src < 0 || static_cast<std::size_t>(src) >= id) {
      graph_error(l, "input id " + std::to_string(src) + " does not refer to an earlier layer");
    } else {
      in.push_back(shapes[static_cast<std::size_t>(src)]);
    }
  }
  const std::size_t expected_inputs = l.kind == LayerKind::kFuseSum ? l.fuse_weights.size() : 1;
  if (in.size() != expected_inputs || in.empty()) {
    graph_error(l, "expected " + std::to_string(expected_inputs) + " inputs, got " +
                       std::to_string(in.size()));
  }
  const Shape& s = in[0];
  auto param_shape = [&](std::size_t k) -> const Shape& {
    if (k >= l.params.size() || l.params[k] >= model.params.size()) {
      graph_error(l, "missing parameter " + std::to_string(k));
    }
    return model.params[l.params[k]].value.shape();
  };
  auto need_nchw = [&]() {
    if (s.size() != 4) graph_error(l, "expected NCHW input, got " + shape_string(s));
  };
  switch (l.kind) {
    case LayerKind::kPad:
      need_nchw();
      return {s[0], s[1], s[2] + l.pad.top + l.pad.bottom, s[3] + l.pad.left + l.pad.right};
    case LayerKind::kConv: {
      need_nchw();
      const Shape& w = param_shape(0);
      if (w.size() != 4 || w[1] != s[1]) {
        graph_error(l, "weights " + shape_string(w) + " do not accept " + shape_string(s));
      }
      if (param_shape(1) != Shape{w[0]}) graph_error(l, "bias does not match output channels");
      const auto oh = conv_output_extent(s[2], w[2], l.geometry.stride_h, l.geometry.pad.top,
                                         l.geometry.pad.bottom);
      const auto ow = conv_output_extent(s[3], w[3], l.geometry.stride_w, l.geometry.pad.left,
                                         l.geometry.pad.right);
      if (oh == 0 || ow == 0) graph_error(l, "kernel does not fit input " + shape_string(s));
      return {s[0], w[0], oh, ow};
    }
    case LayerKind::kBatchNorm:
      need_nchw();
      for (std::size_t k = 0; k < 4; ++k) {
        if (param_shape(k) != Shape{s[1]}) graph_error(l, "parameter does not match channels");
      }
      return s;
    case LayerKind::kRelu:
    case LayerKind::kDropout:
    case LayerKind::kResidualBegin:
      return s;
    case LayerKind::kSoftmax:
      if (s.size() != 2 && s.size() != 4) graph_error(l, "softmax needs rank 2 or 4");
      return s;
    case LayerKind::kMaxPool:
    case LayerKind::kAvgPool:
      need_nchw();
      if (s[2] % 2 || s[3] % 2) graph_error(l, "extents " + shape_string(s) + " not divisible by 2");
      return {s[0], s[1], s[2] / 2, s[3] / 2};
    case LayerKind::kMaxUnpool: {
      need_nchw();
      if (l.link < 0 || static_cast<std::size_t>(l.link) >= id ||
          model.layers[static_cast<std::size_t>(l.link)].kind != LayerKind::kMaxPool) {
        graph_error(l, "must link to an earlier maxpool layer");
      }
      const LayerSpec& pool = model.layers[static_cast<std::size_t>(l.link)];
      const Shape& pooled = shapes[static_cast<std::size_t>(l.link)];
      if (pooled != s) {
        graph_error(l, "input " + shape_string(s) + " does not match linked pool output " +
                           shape_string(pooled));
      }
      const int pool_src = pool.inputs.at(0);
      return pool_src == kGraphInput ? model.input_shape(1)
                                     : shapes[static_cast<std::size_t>(pool_src)];
    }
    case LayerKind::kAvgUnpool:
      need_nchw();
      return {s[0], s[1], 2 * s[2], 2 * s[3]};
    case LayerKind::kFlatten:
      return {s[0], shape_size(s) / s[0]};
    case LayerKind::kLinear: {
      const Shape& w = param_shape(0);
      if (s.size() != 2 || w.size() != 2 || w[1] != s[1]) {
        graph_error(l, "weights " + shape_string(w) + " do not accept " + shape_string(s));
      }
      if (param_shape(1) != Shape{w[0]}) graph_error(l, "bias does not match output width");
      return {s[0], w[0]};
    }
    case LayerKind::kResidualEnd: {
      if (l.link < 0 || static_cast<std::size_t>(l.link) >= id ||
          model.layers[static_cast<std::size_t>(l.link)].kind != LayerKind::kResidualBegin) {
        graph_error(l, "must link to an earlier residual-begin layer");
      }
      if (shapes[static_cast<std::size_t>(l.link)] != s) {
        graph_error(l, "skip " + shape_string(shapes[static_cast<std::size_t>(l.link)]) +
                           " cannot be added to " + shape_string(s));
      }
      return s;
    }
    case LayerKind::kFuseSum:
      for (const Shape& other : in) {
        if (other != s) graph_error(l, "fused inputs have different shapes");
      }
      return s;
  }
  graph_error(l, "unknown layer kind");
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

template <typename T>
class Builder {
 public:
  Builder(const ArchConfig& cfg, std::uint64_t seed) : gen_(seed) {
    model_.config = cfg;
    input_shape_ = model_.input_shape(1);
  }

  int pad(const std::string& name, int in, Padding p) {
    LayerSpec l;
    l.kind = LayerKind::kPad;
    l.name = name;
    l.inputs = {in};
    l.pad = p;
    return push(std::move(l));
  }

  int conv(const std::string& name, int in, std::size_t out_c, std::size_t kh, std::size_t kw,
           ConvGeometry g) {
    const std::size_t in_c = shape(in).at(1);
    LayerSpec l;
    l.kind = LayerKind::kConv;
    l.name = name;
    l.inputs = {in};
    l.out_channels = out_c;
    l.kernel_h = kh;
    l.kernel_w = kw;
    l.geometry = g;
    l.params = {he_param(name + ".weight", {out_c, in_c, kh, kw}, in_c * kh * kw),
                add_param(name + ".bias", Tensor<T>({out_c}), true)};
    return push(std::move(l));
  }

  int bn(const std::string& name, int in) {
    const std::size_t c = shape(in).at(1);
    LayerSpec l;
    l.kind = LayerKind::kBatchNorm;
    l.name = name;
    l.inputs = {in};
    l.params = {add_param(name + ".gamma", Tensor<T>({c}, T(1)), true),
                add_param(name + ".beta", Tensor<T>({c}, T(0)), true),
                add_param(name + ".running_mean", Tensor<T>({c}, T(0)), false),
                add_param(name + ".running_var", Tensor<T>({c}, T(1)), false)};
    return push(std::move(l));
  }

  int simple(LayerKind kind, const std::string& name, int in) {
    LayerSpec l;
    l.kind = kind;
    l.name = name;
    l.inputs = {in};
    return push(std::move(l));
  }

  int conv_bn_relu(const std::string& prefix, int in, std::size_t out_c, std::size_t stride = 1) {
    ConvGeometry g{stride, stride, Padding::symmetric(1, 1)};
    int x = conv(prefix + ".conv", in, out_c, 3, 3, g);
    x = bn(prefix + ".bn", x);
    return simple(LayerKind::kRelu, prefix + ".relu", x);
  }

  int linked(LayerKind kind, const std::string& name, int in, int link) {
    LayerSpec l;
    l.kind = kind;
    l.name = name;
    l.inputs = {in};
    l.link = link;
    return push(std::move(l));
  }

  int fuse(const std::string& name, int a, int b, double wa, double wb) {
    LayerSpec l;
    l.kind = LayerKind::kFuseSum;
    l.name = name;
    l.inputs = {a, b};
    l.fuse_weights = {wa, wb};
    return push(std::move(l));
  }

  int linear(const std::string& name, int in, std::size_t out) {
    const std::size_t f = shape(in).at(1);
    LayerSpec l;
    l.kind = LayerKind::kLinear;
    l.name = name;
    l.inputs = {in};
    l.out_features = out;
    l.params = {he_param(name + ".weight", {out, f}, f),
                add_param(name + ".bias", Tensor<T>({out}), true)};
    return push(std::move(l));
  }

  int dropout(const std::string& name, int in, double rate) {
    LayerSpec l;
    l.kind = LayerKind::kDropout;
    l.name = name;
    l.inputs = {in};
    l.rate = rate;
    return push(std::move(l));
  }

  const Shape& shape(int id) const {
    return id == kGraphInput ? input_shape_ : shapes_.at(static_cast<std::size_t>(id));
  }

  ModelGraph<T> finish() {
    validate_graph(model_);
    return std::move(model_);
  }

  ModelGraph<T>& model() { return model_; }

 private:
  int push(LayerSpec l) {
    model_.layers.push_back(std::move(l));
    const std::size_t id = model_.layers.size() - 1;
    shapes_.push_back(infer_shape(model_, id, shapes_));
    return static_cast<int>(id);
  }

  std::size_t add_param(std::string name, Tensor<T> value, bool trainable) {
    model_.params.push_back({std::move(name), std::move(value), trainable});
    return model_.params.size() - 1;
  }

  // Zero-mean Gaussian with std sqrt(2 / fan_in).
  std::size_t he_param(std::string name, Shape shape, std::size_t fan_in) {
    Tensor<T> w(std::move(shape));
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (auto& v : w.data()) v = static_cast<T>(dist(gen_));
    return add_param(std::move(name), std::move(w), true);
  }

  ModelGraph<T> model_;
  std::vector<Shape> shapes_;
  Shape input_shape_;
  std::mt19937_64 gen_;
};

void check_common(const ArchConfig& cfg) {
  if (cfg.widths.empty()) throw ParameterError("architecture needs at least one stage width");
  for (auto w : cfg.widths) {
    if (w == 0) throw ParameterError("stage widths must be positive");
  }
  if (cfg.in_channels == 0 || cfg.classes < 2) {
    throw ParameterError("architecture needs >= 1 input channel and >= 2 classes");
  }
  if (cfg.height == 0 || cfg.width == 0) throw ParameterError("input extents must be positive");
  if (!(cfg.fuse_max_weight >= 0.0 && cfg.fuse_max_weight <= 1.0)) {
    throw ParameterError("fuse_max_weight must lie in [0, 1]");
  }
}

template <typename T>
ModelGraph<T> build_segmenter(const ArchConfig& cfg, std::uint64_t seed, bool dual) {
  check_common(cfg);
  const std::size_t stages = cfg.widths.size();
  const std::size_t m = std::size_t{1} << stages;
  if (cfg.height % m || cfg.width % m) {
    throw ShapeError("segmenter input " + std::to_string(cfg.height) + "x" +
                     std::to_string(cfg.width) + " must be divisible by " + std::to_string(m));
  }
  const double a = cfg.fuse_max_weight;
  Builder<T> b(cfg, seed);
  int x = kGraphInput;
  std::vector<int> pools(stages);
  for (std::size_t s = 0; s < stages; ++s) {
    const std::string p = "enc" + std::to_string(s + 1);
    x = b.conv_bn_relu(p + ".block1", x, cfg.widths[s]);
    x = b.conv_bn_relu(p + ".block2", x, cfg.widths[s]);
    const int mp = b.simple(LayerKind::kMaxPool, p + ".maxpool", x);
    pools[s] = mp;
    if (dual) {
      const int ap = b.simple(LayerKind::kAvgPool, p + ".avgpool", x);
      x = b.fuse(p + ".fuse", mp, ap, a, 1.0 - a);
    } else {
      x = mp;
    }
  }
  for (std::size_t s = stages; s-- > 0;) {
    const std::string p = "dec" + std::to_string(s + 1);
    const int up = b.linked(LayerKind::kMaxUnpool, p + ".maxunpool", x, pools[s]);
    if (dual) {
      const int au = b.simple(LayerKind::kAvgUnpool, p + ".avgunpool", x);
      x = b.fuse(p + ".fuse", up, au, a, 1.0 - a);
    } else {
      x = up;
    }
    x = b.conv_bn_relu(p + ".block1", x, cfg.widths[s]);
    x = b.conv_bn_relu(p + ".block2", x, s > 0 ? cfg.widths[s - 1] : cfg.widths[0]);
  }
  // 2x2 kernel with one extra row/column at the bottom/right keeps extents.
  x = b.conv("head.conv", x, cfg.classes, 2, 2, ConvGeometry{1, 1, Padding{0, 0, 1, 1}});
  b.simple(LayerKind::kSoftmax, "head.softmax", x);
  return b.finish();
}

}  // namespace

template <typename T>
std::vector<Shape> validate_graph(const ModelGraph<T>& model) {
  std::vector<Shape> shapes;
  shapes.reserve(model.layers.size());
  std::map<int, int> unpool_of_pool;
  for (std::size_t id = 0; id < model.layers.size(); ++id) {
    const LayerSpec& l = model.layers[id];
    shapes.push_back(infer_shape(model, id, shapes));
    if (l.kind == LayerKind::kMaxUnpool) {
      if (!unpool_of_pool.emplace(l.link, static_cast<int>(id)).second) {
        graph_error(l, "maxpool '" + model.layers[static_cast<std::size_t>(l.link)].name +
                           "' is already consumed by another unpool");
      }
    }
  }
  if (model.layers.empty()) throw ShapeError("graph has no layers");
  return shapes;
}

template <typename T>
ModelGraph<T> build_cov_ctnet(const ArchConfig& cfg, std::uint64_t seed) {
  check_common(cfg);
  if (cfg.arch != kArchCovCtNet) throw ParameterError("config is not a cov-ctnet config");
  if (!(cfg.dropout >= 0.0 && cfg.dropout < 1.0)) throw ParameterError("dropout must lie in [0, 1)");
  const std::size_t stages = cfg.widths.size();
  // Each stage halves (ceil) the extent; the final pool needs an even extent.
  const std::size_t m = std::size_t{1} << (stages + 1);
  const std::size_t ph = (cfg.height + m - 1) / m * m - cfg.height;
  const std::size_t pw = (cfg.width + m - 1) / m * m - cfg.width;
  Builder<T> b(cfg, seed);
  int x = kGraphInput;
  if (ph || pw) x = b.pad("input.pad", x, Padding{ph / 2, pw / 2, ph - ph / 2, pw - pw / 2});
  x = b.conv_bn_relu("stem", x, cfg.widths[0]);
  for (std::size_t s = 0; s < stages; ++s) {
    const std::string p = "stage" + std::to_string(s + 1);
    const int begin = b.simple(LayerKind::kResidualBegin, p + ".skip", x);
    int y = b.conv_bn_relu(p + ".block1", begin, cfg.widths[s]);
    y = b.conv_bn_relu(p + ".block2", y, cfg.widths[s]);
    x = b.linked(LayerKind::kResidualEnd, p + ".add", y, begin);
    const std::size_t next = s + 1 < stages ? cfg.widths[s + 1] : cfg.widths[s];
    x = b.conv_bn_relu(p + ".down", x, next, 2);
  }
  x = b.simple(LayerKind::kMaxPool, "head.pool", x);
  x = b.simple(LayerKind::kFlatten, "head.flatten", x);
  for (std::size_t i = 0; i < cfg.fc_widths.size(); ++i) {
    const std::string p = "fc" + std::to_string(i + 1);
    x = b.linear(p, x, cfg.fc_widths[i]);
    x = b.simple(LayerKind::kRelu, p + ".relu", x);
    b.model().feature_layer = x;
    x = b.dropout(p + ".dropout", x, cfg.dropout);
  }
  x = b.linear("fc" + std::to_string(cfg.fc_widths.size() + 1), x, cfg.classes);
  b.simple(LayerKind::kSoftmax, "head.softmax", x);
  return b.finish();
}

template <typename T>
ModelGraph<T> build_cov_raseg(const ArchConfig& cfg, std::uint64_t seed) {
  if (cfg.arch != kArchCovRaSeg) throw ParameterError("config is not a cov-raseg config");
  return build_segmenter<T>(cfg, seed, true);
}

template <typename T>
ModelGraph<T> build_segnet_baseline(const ArchConfig& cfg, std::uint64_t seed) {
  if (cfg.arch != kArchSegNet) throw ParameterError("config is not a segnet config");
  return build_segmenter<T>(cfg, seed, false);
}

template <typename T>
ModelGraph<T> build_model(const ArchConfig& cfg, std::uint64_t seed) {
  if (cfg.arch == kArchCovCtNet) return build_cov_ctnet<T>(cfg, seed);
  if (cfg.arch == kArchCovRaSeg) return build_cov_raseg<T>(cfg, seed);
  if (cfg.arch == kArchSegNet) return build_segnet_baseline<T>(cfg, seed);
  throw ParameterError("unknown architecture '" + cfg.arch + "'");
}

// ---------------------------------------------------------------------------
// Execution

namespace {

template <typename T>
ForwardPass<T> run_graph(const ModelGraph<T>& model, ModelGraph<T>* mutable_model,
                         const Tensor<T>& x, Mode mode, std::uint64_t seed, bool record) {
  const Shape expected = model.input_shape(x.rank() == 4 ? x.dim(0) : 1);
  if (x.shape() != expected) {
    throw ShapeError("model '" + model.config.arch + "' expects input " +
                     shape_string(expected) + ", got " + shape_string(x.shape()));
  }
  ForwardPass<T> pass{GradTape<T>(record), Var{}, Var{}, {}, {}};
  GradTape<T>& tape = pass.tape;
  pass.input = tape.leaf(x, false);
  pass.param_vars.reserve(model.params.size());
  for (const auto& p : model.params) {
    pass.param_vars.push_back(tape.leaf(p.value, p.trainable));
  }
  std::vector<Var>& out = pass.layer_outputs;
  out.reserve(model.layers.size());
  std::vector<IndexMap> pool_indices(model.layers.size());

  auto in_var = [&](int id) { return id == kGraphInput ? pass.input : out[static_cast<std::size_t>(id)]; };
  for (std::size_t id = 0; id < model.layers.size(); ++id) {
    const LayerSpec& l = model.layers[id];
    const Var a = in_var(l.inputs.at(0));
    Var y;
    switch (l.kind) {
      case LayerKind::kPad:
        y = ad::zero_pad(tape, a, l.pad);
        break;
      case LayerKind::kConv:
        y = ad::conv2d(tape, a, pass.param_vars[l.params[0]], pass.param_vars[l.params[1]],
                       l.geometry);
        break;
      case LayerKind::kBatchNorm: {
        Tensor<T> rm, rv;
        BatchNormStats<T> stats;
        stats.epsilon = static_cast<T>(l.bn_epsilon);
        stats.stat_momentum = static_cast<T>(l.bn_momentum);
        if (mode == Mode::kTrain) {
          stats.running_mean = &mutable_model->params[l.params[2]].value;
          stats.running_var = &mutable_model->params[l.params[3]].value;
        } else {
          // eval mode only reads the statistics; copies keep const models const
          rm = model.params[l.params[2]].value;
          rv = model.params[l.params[3]].value;
          stats.running_mean = &rm;
          stats.running_var = &rv;
        }
        y = ad::batch_norm(tape, a, pass.param_vars[l.params[0]], pass.param_vars[l.params[1]],
                           stats, mode);
        break;
      }
      case LayerKind::kRelu:
        y = ad::relu(tape, a);
        break;
      case LayerKind::kMaxPool: {
        auto [v, idx] = ad::max_pool2d(tape, a);
        y = v;
        pool_indices[id] = std::move(idx);
        break;
      }
      case LayerKind::kAvgPool:
        y = ad::avg_pool2d(tape, a);
        break;
      case LayerKind::kMaxUnpool: {
        const IndexMap& idx = pool_indices[static_cast<std::size_t>(l.link)];
        y = ad::max_unpool2d(tape, a, idx, idx.input_shape);
        break;
      }
      case LayerKind::kAvgUnpool: {
        const Shape& s = tape.value(a).shape();
        y = ad::avg_unpool2d(tape, a, Shape{s[0], s[1], 2 * s[2], 2 * s[3]});
        break;
      }
      case LayerKind::kFlatten: {
        const Shape& s = tape.value(a).shape();
        y = ad::reshape(tape, a, Shape{s[0], shape_size(s) / s[0]});
        break;
      }
      case LayerKind::kLinear:
        y = ad::fully_connected(tape, a, pass.param_vars[l.params[0]],
                                pass.param_vars[l.params[1]]);
        break;
      case LayerKind::kDropout:
        y = ad::dropout(tape, a, l.rate, mode, splitmix64(seed ^ splitmix64(id)));
        break;
      case LayerKind::kSoftmax:
        y = ad::softmax(tape, a);
        break;
      case LayerKind::kResidualBegin:
        y = a;
        break;
      case LayerKind::kResidualEnd:
        y = ad::add(tape, a, out[static_cast<std::size_t>(l.link)]);
        break;
      case LayerKind::kFuseSum:
        y = ad::weighted_sum(tape, a, in_var(l.inputs.at(1)), static_cast<T>(l.fuse_weights[0]),
                             static_cast<T>(l.fuse_weights[1]));
        break;
    }
    if (!all_finite(tape.value(y).data())) {
      throw NumericalError("non-finite activation produced by layer '" + l.name + "'");
    }
    out.push_back(y);
  }
  pass.output = out.back();
  return pass;
}

}  // namespace

template <typename T>
ForwardPass<T> forward(ModelGraph<T>& model, const Tensor<T>& x, Mode mode, std::uint64_t seed) {
  return run_graph(model, &model, x, mode, seed, mode == Mode::kTrain);
}

template <typename T>
ForwardPass<T> forward_eval(const ModelGraph<T>& model, const Tensor<T>& x, bool record) {
  return run_graph<T>(model, nullptr, x, Mode::kEval, 0, record);
}

template <typename T>
Tensor<T> predict(const ModelGraph<T>& model, const Tensor<T>& x) {
  ForwardPass<T> pass = forward_eval(model, x, false);
  return pass.tape.value(pass.output);
}

#define COVNET_INSTANTIATE_NETS(T)                                                    \
  template class ModelGraph<T>;                                                       \
  template std::vector<Shape> validate_graph(const ModelGraph<T>&);                   \
  template ModelGraph<T> build_cov_ctnet(const ArchConfig&, std::uint64_t);           \
  template ModelGraph<T> build_cov_raseg(const ArchConfig&, std::uint64_t);           \
  template ModelGraph<T> build_segnet_baseline(const ArchConfig&, std::uint64_t);     \
  template ModelGraph<T> build_model(const ArchConfig&, std::uint64_t);               \
  template ForwardPass<T> forward(ModelGraph<T>&, const Tensor<T>&, Mode, std::uint64_t); \
  template ForwardPass<T> forward_eval(const ModelGraph<T>&, const Tensor<T>&, bool); \
  template Tensor<T> predict(const ModelGraph<T>&, const Tensor<T>&);

COVNET_INSTANTIATE_NETS(float)
COVNET_INSTANTIATE_NETS(double)

#undef COVNET_INSTANTIATE_NETS

}  // namespace covnet
