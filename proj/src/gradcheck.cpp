#include "covnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>

#include "covnet/nets.hpp"
#include "covnet/ops.hpp"

namespace covnet {

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

namespace {

using Tape = GradTape<double>;
using T64 = Tensor<double>;
using Rng = std::mt19937_64;

// sum(R * y) for a fixed random R, so no gradient component cancels.
Var project(Tape& tape, Var y, const T64& r) {
  const T64& v = tape.value(y);
  double s = 0;
  for (std::size_t i = 0; i < v.size(); ++i) s += v[i] * r[i];
  return tape.record(OpKind::kSum, {y}, T64({1}, s), [y, r](Tape& t, const T64& g) {
    T64 d = r;
    for (auto& x : d.data()) x *= g[0];
    t.accumulate(y, d);
  });
}

T64 normal(Shape s, Rng& gen, double scale = 1.0) {
  T64 t(std::move(s));
  std::normal_distribution<double> d(0.0, scale);
  for (auto& v : t.data()) v = d(gen);
  return t;
}

// Values at least 0.05 apart, so max selections survive the step.
T64 distinct(Shape s, Rng& gen) {
  T64 t(std::move(s));
  std::vector<std::size_t> perm(t.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), gen);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    t[i] = 0.05 * (static_cast<double>(perm[i]) - 0.5 * static_cast<double>(perm.size()));
  }
  return t;
}

// Keeps clear of the ReLU kink.
T64 off_zero(Shape s, Rng& gen) {
  T64 t(std::move(s));
  std::uniform_real_distribution<double> mag(0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.data()) v = sign(gen) ? mag(gen) : -mag(gen);
  return t;
}

std::vector<int> random_targets(std::size_t n, int classes, Rng& gen) {
  std::uniform_int_distribution<int> d(0, classes - 1);
  std::vector<int> t(n);
  for (auto& v : t) v = d(gen);
  return t;
}

struct Coord {
  std::size_t tensor;
  std::size_t index;
};

// Which side of every ReLU and max-pool decision each activation sits on.
using Signature = std::vector<std::uint32_t>;

Signature kink_signature(const Tape& tape) {
  Signature sig;
  for (std::size_t id = 0; id < tape.size(); ++id) {
    const Var v{id};
    if (tape.kind(v) == OpKind::kRelu) {
      for (double x : tape.value(tape.inputs(v)[0]).data()) sig.push_back(x > 0);
    } else if (tape.kind(v) == OpKind::kMaxPool) {
      const auto idx = max_pool2d(tape.value(tape.inputs(v)[0])).indices.offsets;
      sig.insert(sig.end(), idx.begin(), idx.end());
    }
  }
  return sig;
}

struct Probe {
  double loss;
  Signature sig;
};

// Perturbs each coordinate by +-h and compares with `analytic`. Coordinates
// whose step crosses a ReLU kink or changes a max-pool winner are skipped.
// Derivatives too small for the difference quotient to resolve at the
// tolerance (e.g. a bias feeding batch norm, which is exactly zero) are
// measured against that resolution instead of their own size.
GradcheckResult compare(const std::string& kind, const std::vector<T64*>& targets,
                        const std::vector<T64>& analytic, const std::vector<Coord>& coords,
                        const std::function<Probe()>& eval, std::size_t wanted = SIZE_MAX) {
  GradcheckResult r{kind, 0, 0};
  constexpr double eps = std::numeric_limits<double>::epsilon();
  for (const auto& c : coords) {
    if (r.checked >= wanted) break;
    double& x = (*targets[c.tensor])[c.index];
    const double orig = x;
    x = orig + kGradcheckStep;
    const Probe up = eval();
    x = orig - kGradcheckStep;
    const Probe down = eval();
    x = orig;
    if (up.sig != down.sig) continue;
    const double a = analytic[c.tensor][c.index];
    const double numeric = (up.loss - down.loss) / (2 * kGradcheckStep);
    // the loss is a long sum, so its rounding error is many ulps
    const double noise = 64 * eps * std::max({std::abs(up.loss), std::abs(down.loss), 1.0}) / kGradcheckStep;
    const double err = relative_error(a, numeric, std::max(1e-6, noise / kGradcheckTolerance));
    r.max_relative_error = std::max(r.max_relative_error, err);
    ++r.checked;
  }
  return r;
}

// Every coordinate of small tensors, a random subset of large ones.
std::vector<Coord> coords_for(const std::vector<T64*>& targets, Rng& gen, std::size_t per_tensor = 150) {
  std::vector<Coord> out;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    std::vector<std::size_t> idx(targets[k]->size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (idx.size() > per_tensor) {
      std::shuffle(idx.begin(), idx.end(), gen);
      idx.resize(per_tensor);
    }
    for (auto i : idx) out.push_back({k, i});
  }
  return out;
}

using Build = std::function<Var(Tape&, const std::vector<Var>&)>;

// Inputs become tape leaves; `build` maps them to a scalar.
GradcheckResult check_op(const std::string& kind, std::vector<T64> inputs, const Build& build, Rng& gen) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& in : inputs) vars.push_back(tape.leaf(in));
  tape.backward(build(tape, vars));
  std::vector<T64> grads;
  for (Var v : vars) grads.push_back(tape.grad(v));
  std::vector<T64*> targets;
  for (auto& in : inputs) targets.push_back(&in);
  return compare(kind, targets, grads, coords_for(targets, gen), [&]() {
    Tape t(false);
    std::vector<Var> vs;
    for (const auto& in : inputs) vs.push_back(t.leaf(in, false));
    const double loss = t.value(build(t, vs))[0];
    return Probe{loss, kink_signature(t)};
  });
}

GradcheckResult worst(const std::string& kind, std::initializer_list<GradcheckResult> parts) {
  GradcheckResult r{kind, 0, 0};
  for (const auto& p : parts) {
    r.max_relative_error = std::max(r.max_relative_error, p.max_relative_error);
    r.checked += p.checked;
  }
  return r;
}

ConvParams<double> random_conv(std::size_t out, std::size_t in, std::size_t k, Rng& gen) {
  return {normal({out, in, k, k}, gen, 1.0 / std::sqrt(static_cast<double>(in * k * k))),
          normal({out}, gen, 0.1), ConvGeometry{1, 1, Padding::symmetric(k / 2, k / 2)}};
}

BatchNormParams<double> random_bn(std::size_t c, Rng& gen) {
  auto p = BatchNormParams<double>::identity(c);
  p.gamma = off_zero({c}, gen);
  p.beta = normal({c}, gen, 0.5);
  return p;
}

GradcheckResult check_residual(const std::string& kind, bool projection, Rng& gen) {
  const std::size_t cin = 3, cout = projection ? 4 : 3;
  ResidualBlock<double> blk{random_conv(cout, cin, 3, gen), random_bn(cout, gen),
                            random_conv(cout, cout, 3, gen), random_bn(cout, gen), std::nullopt};
  if (projection) blk.projection = random_conv(cout, cin, 1, gen);
  T64 x = normal({2, cin, 5, 5}, gen);
  const T64 r = normal({2, cout, 5, 5}, gen);

  // The block turns its parameters into leaves in this order.
  std::vector<T64*> targets{&x,
                            &blk.conv1.weights, &blk.conv1.bias, &blk.bn1.gamma, &blk.bn1.beta,
                            &blk.conv2.weights, &blk.conv2.bias, &blk.bn2.gamma, &blk.bn2.beta};
  if (projection) {
    targets.push_back(&blk.projection->weights);
    targets.push_back(&blk.projection->bias);
  }
  Tape tape;
  const Var xv = tape.leaf(x);
  const std::size_t first = tape.size();
  const Var out = ad::residual_forward(tape, xv, blk, Mode::kTrain);
  std::vector<Var> leaves{xv};
  for (std::size_t id = first; id < tape.size(); ++id) {
    if (tape.kind(Var{id}) == OpKind::kLeaf) leaves.push_back(Var{id});
  }
  if (leaves.size() != targets.size()) throw NumericalError("residual block leaf layout changed");
  tape.backward(project(tape, out, r));
  std::vector<T64> grads;
  for (Var v : leaves) grads.push_back(tape.grad(v));
  return compare(kind, targets, grads, coords_for(targets, gen), [&]() {
    Tape t(false);
    const Var o = ad::residual_forward(t, t.leaf(x, false), blk, Mode::kTrain);
    const double loss = t.value(project(t, o, r))[0];
    return Probe{loss, kink_signature(t)};
  });
}

// Cross-entropy through a whole network in train mode, on sampled
// parameters spread round-robin over every trainable tensor.
GradcheckResult check_graph(const std::string& kind, ModelGraph<double> model, const T64& x,
                            std::size_t samples, Rng& gen) {
  const bool seg = model.is_segmenter();
  const std::size_t n = x.dim(0);
  const auto targets_ = random_targets(seg ? n * x.dim(2) * x.dim(3) : n, 2, gen);
  const std::span<const int> targets(targets_);
  ForwardPass<double> pass = forward(model, x, Mode::kTrain, 7);
  pass.tape.backward(ad::cross_entropy_loss(pass.tape, pass.output, targets));
  std::vector<T64*> params;
  std::vector<T64> grads;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    if (!model.params[i].trainable) continue;
    params.push_back(&model.params[i].value);
    grads.push_back(pass.tape.grad(pass.param_vars[i]));
  }
  // Extra candidates make up for the ones skipped at kinks.
  std::vector<Coord> coords;
  for (std::size_t s = 0; s < 2 * samples; ++s) {
    const std::size_t k = s % params.size();
    std::uniform_int_distribution<std::size_t> pick(0, params[k]->size() - 1);
    coords.push_back({k, pick(gen)});
  }
  GradcheckResult res = compare(kind, params, grads, coords, [&]() {
    ForwardPass<double> p = forward(model, x, Mode::kTrain, 7);
    const double loss = p.tape.value(ad::cross_entropy_loss(p.tape, p.output, targets))[0];
    return Probe{loss, kink_signature(p.tape)};
  }, samples);
  res.required = samples;
  return res;
}

}  // namespace

std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed, std::size_t graph_samples) {
  Rng gen(seed);
  std::vector<GradcheckResult> out;

  {
    // asymmetric padding and unequal strides
    const ConvGeometry g{2, 1, Padding{1, 0, 2, 1}};
    const T64 r = normal({2, 4, 5, 7}, gen);
    out.push_back(check_op("conv", {normal({2, 3, 7, 6}, gen), normal({4, 3, 3, 2}, gen), normal({4}, gen)},
                           [&](Tape& t, const std::vector<Var>& v) {
                             return project(t, ad::conv2d(t, v[0], v[1], v[2], g), r);
                           }, gen));
  }
  {
    auto stats = BatchNormParams<double>::identity(3);
    const T64 r = normal({4, 3, 3, 5}, gen);
    out.push_back(check_op("batchnorm-train", {normal({4, 3, 3, 5}, gen, 2.0), off_zero({3}, gen), normal({3}, gen)},
                           [&](Tape& t, const std::vector<Var>& v) {
                             BatchNormStats<double> s{&stats.running_mean, &stats.running_var, 1e-5, 0.1};
                             return project(t, ad::batch_norm(t, v[0], v[1], v[2], s, Mode::kTrain), r);
                           }, gen));
  }
  {
    const T64 r = normal({2, 3, 4, 4}, gen);
    out.push_back(check_op("relu", {off_zero({2, 3, 4, 4}, gen)},
                           [&](Tape& t, const std::vector<Var>& v) { return project(t, ad::relu(t, v[0]), r); }, gen));
  }
  {
    const T64 r = normal({2, 3, 3, 4}, gen);
    out.push_back(check_op("maxpool", {distinct({2, 3, 6, 8}, gen)},
                           [&](Tape& t, const std::vector<Var>& v) { return project(t, ad::max_pool2d(t, v[0]).first, r); }, gen));
    out.push_back(check_op("avgpool", {normal({2, 3, 6, 8}, gen)},
                           [&](Tape& t, const std::vector<Var>& v) { return project(t, ad::avg_pool2d(t, v[0]), r); }, gen));
  }
  {
    const IndexMap idx = max_pool2d(distinct({2, 3, 6, 8}, gen)).indices;
    const T64 r = normal({2, 3, 6, 8}, gen);
    out.push_back(check_op("maxunpool", {normal({2, 3, 3, 4}, gen)},
                           [&](Tape& t, const std::vector<Var>& v) {
                             return project(t, ad::max_unpool2d(t, v[0], idx, idx.input_shape), r);
                           }, gen));
    out.push_back(check_op("avgunpool", {normal({2, 3, 3, 4}, gen)},
                           [&](Tape& t, const std::vector<Var>& v) {
                             return project(t, ad::avg_unpool2d(t, v[0], Shape{2, 3, 6, 8}), r);
                           }, gen));
  }
  {
    const T64 r = normal({3, 4}, gen);
    out.push_back(check_op("fc", {normal({3, 5}, gen), normal({4, 5}, gen), normal({4}, gen)},
                           [&](Tape& t, const std::vector<Var>& v) {
                             return project(t, ad::fully_connected(t, v[0], v[1], v[2]), r);
                           }, gen));
  }
  out.push_back(worst("residual", {check_residual("residual", false, gen), check_residual("residual", true, gen)}));
  {
    const auto cls_t = random_targets(4, 3, gen);
    const auto seg_t = random_targets(2 * 3 * 3, 2, gen);
    const Build cls = [&](Tape& t, const std::vector<Var>& v) {
      return ad::cross_entropy_loss(t, ad::softmax(t, v[0]), std::span<const int>(cls_t));
    };
    const Build seg = [&](Tape& t, const std::vector<Var>& v) {
      return ad::cross_entropy_loss(t, ad::softmax(t, v[0]), std::span<const int>(seg_t));
    };
    out.push_back(worst("softmax+cross-entropy", {check_op("", {normal({4, 3}, gen, 2.0)}, cls, gen),
                                                  check_op("", {normal({2, 2, 3, 3}, gen, 2.0)}, seg, gen)}));
    const std::vector<double> w3{0.7, 2.5, 1.3}, w2{0.55, 5.0};
    const Build wcls = [&](Tape& t, const std::vector<Var>& v) {
      return ad::cross_entropy_loss(t, ad::softmax(t, v[0]), std::span<const int>(cls_t), std::span<const double>(w3));
    };
    const Build wseg = [&](Tape& t, const std::vector<Var>& v) {
      return ad::cross_entropy_loss(t, ad::softmax(t, v[0]), std::span<const int>(seg_t), std::span<const double>(w2));
    };
    out.push_back(worst("weighted-cross-entropy", {check_op("", {normal({4, 3}, gen, 2.0)}, wcls, gen),
                                                   check_op("", {normal({2, 2, 3, 3}, gen, 2.0)}, wseg, gen)}));
  }
  {
    ArchConfig cfg = cov_raseg_config(16, 16);
    cfg.widths = {3, 4, 4, 4};
    out.push_back(check_graph("cov-raseg-graph", build_cov_raseg<double>(cfg, seed), normal({2, 1, 16, 16}, gen),
                              graph_samples, gen));
  }
  return out;
}

}  // namespace covnet
