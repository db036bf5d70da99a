#include "covnet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include "covnet/pipeline.hpp"
#include "covnet/sgd.hpp"

namespace covnet {

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

template <typename Rng>
void shuffle(std::vector<std::size_t>& v, Rng& gen) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(v[i - 1], v[pick(gen)]);
  }
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Splits

std::vector<std::size_t> SplitPlan::pool() const {
  std::vector<std::size_t> p = train;
  p.insert(p.end(), val.begin(), val.end());
  std::sort(p.begin(), p.end());
  return p;
}

std::vector<std::size_t> SplitPlan::fold(int k) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fold_of.size(); ++i) {
    if (fold_of[i] == k) out.push_back(i);
  }
  return out;
}

SplitPlan make_splits(std::span<const int> strata, std::uint64_t seed, std::size_t folds) {
  if (strata.size() < 10) throw ParameterError("splitting needs at least 10 samples");
  if (folds < 1) throw ParameterError("need at least one fold");
  SplitPlan plan;
  plan.seed = seed;
  plan.folds = folds;
  plan.fold_of.assign(strata.size(), 0);
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < strata.size(); ++i) groups[strata[i]].push_back(i);
  if (groups.size() > 1) {
    for (const auto& [key, members] : groups) {
      if (members.size() < 5) {
        plan.warnings.push_back("stratum " + std::to_string(key) + " has only " +
                                std::to_string(members.size()) +
                                " samples; splitting without stratification");
        std::vector<std::size_t> all(strata.size());
        std::iota(all.begin(), all.end(), 0);
        groups = {{0, all}};
        break;
      }
    }
  }
  std::mt19937_64 gen(mix(seed));
  std::size_t dealt = 0;
  for (auto& [key, members] : groups) {
    shuffle(members, gen);
    const std::size_t n = members.size();
    const auto n_test = static_cast<std::size_t>(std::lround(0.2 * static_cast<double>(n)));
    const auto n_val = static_cast<std::size_t>(std::lround(0.2 * static_cast<double>(n - n_test)));
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t id = members[j];
      if (j < n_test) {
        plan.test.push_back(id);
        continue;
      }
      (j < n_test + n_val ? plan.val : plan.train).push_back(id);
      plan.fold_of[id] = static_cast<int>(dealt++ % folds) + 1;
    }
  }
  std::sort(plan.train.begin(), plan.train.end());
  std::sort(plan.val.begin(), plan.val.end());
  std::sort(plan.test.begin(), plan.test.end());
  return plan;
}

ClassWeights compute_attention_weights(std::span<const Mask> masks) {
  std::uint64_t fg = 0, total = 0;
  for (const auto& m : masks) {
    require_binary(m, "attention mask");
    fg += m.count(1);
    total += m.size();
  }
  if (total == 0) throw ParameterError("attention weights need at least one mask pixel");
  if (fg == 0 || fg == total) {
    throw ParameterError(std::string("cannot weight an absent class: training masks contain no ") +
                         (fg == 0 ? "foreground" : "background") + " pixels");
  }
  ClassWeights w;
  w.foreground_fraction = static_cast<double>(fg) / static_cast<double>(total);
  w.background_fraction = static_cast<double>(total - fg) / static_cast<double>(total);
  w.background = 1.0 / (2.0 * w.background_fraction);
  w.foreground = 1.0 / (2.0 * w.foreground_fraction);
  return w;
}

// ---------------------------------------------------------------------------
// Datasets

template <typename T>
Dataset<T> Dataset<T>::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  for (auto i : indices) {
    if (i >= size()) throw ParameterError("subset index out of range");
    out.ids.push_back(ids[i]);
    out.images.push_back(images[i]);
    out.labels.push_back(labels[i]);
    if (!masks.empty()) out.masks.push_back(masks[i]);
  }
  return out;
}

template <typename T>
Tensor<T> Dataset<T>::batch(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw ParameterError("empty batch");
  const Shape& s = images.at(indices[0]).shape();
  Tensor<T> out({indices.size(), s[0], s[1], s[2]});
  const std::size_t per = shape_size(s);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Tensor<T>& img = images.at(indices[b]);
    if (img.shape() != s) throw ShapeError("images in a batch differ in shape");
    std::copy(img.data().begin(), img.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  return out;
}

template <typename T>
Dataset<T> load_dataset(std::span<const SampleRecord> records, const Preprocess& pre, Task task) {
  Dataset<T> d;
  for (const auto& rec : records) {
    const std::string where = rec.image_path + (rec.line ? " (manifest line " + std::to_string(rec.line) + ")" : "");
    if (task == Task::kClassification && !rec.label) throw DataError(where + ": missing class label");
    if (task == Task::kSegmentation && !rec.mask_path) throw DataError(where + ": missing mask");
    LoadedSample s;
    try {
      s = load_sample(rec, pre);
    } catch (const Error& e) {
      throw DataError(where + ": " + e.what());
    }
    d.ids.push_back(rec.image_path);
    d.images.push_back(s.image.cast<T>());
    int label = rec.label.value_or(kHealthy);
    if (s.mask) {
      if (!rec.label) label = s.mask->count() > 0 ? kInfected : kHealthy;
      if (task == Task::kSegmentation) d.masks.push_back(std::move(*s.mask));
    }
    d.labels.push_back(label);
  }
  return d;
}

std::string TrainHistory::to_csv() const {
  std::string out = "epoch,train_loss,val_loss,val_metric\n";
  for (const auto& e : epochs) {
    out += std::to_string(e.epoch) + "," + fmt(e.train_loss) + "," +
           (e.val_loss ? fmt(*e.val_loss) : "") + "," + (e.val_metric ? fmt(*e.val_metric) : "") + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

namespace {

template <typename T>
std::vector<int> targets_for(const Dataset<T>& data, std::span<const std::size_t> idx, Task task) {
  std::vector<int> t;
  for (auto i : idx) {
    if (task == Task::kClassification) {
      t.push_back(data.labels[i]);
    } else {
      const Mask& m = data.masks.at(i);
      t.insert(t.end(), m.values.begin(), m.values.end());
    }
  }
  return t;
}

template <typename T>
void check_task(const ModelGraph<T>& model, const Dataset<T>& data, Task task) {
  if ((task == Task::kSegmentation) != model.is_segmenter()) {
    throw ParameterError("model architecture '" + model.config.arch + "' does not fit the task");
  }
  if (task == Task::kSegmentation && data.masks.size() != data.size()) {
    throw DataError("segmentation data needs one mask per image");
  }
  for (const auto& m : data.masks) {
    if (m.rows != model.config.height || m.cols != model.config.width) {
      throw ShapeError("mask size does not match the model input");
    }
  }
}

}  // namespace

template <typename T>
std::pair<double, double> evaluate(const ModelGraph<T>& model, const Dataset<T>& data, Task task,
                                   std::span<const T> class_weights) {
  if (data.size() == 0) throw ParameterError("evaluate: empty dataset");
  check_task(model, data, task);
  const std::size_t bs = task == Task::kClassification ? 16 : 4;
  double loss = 0;
  std::uint64_t correct = 0, inter = 0, pred_fg = 0, gt_fg = 0;
  for (std::size_t start = 0; start < data.size(); start += bs) {
    std::vector<std::size_t> idx(std::min(bs, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor<T> probs = predict(model, data.batch(idx));
    const auto targets = targets_for(data, idx, task);
    loss += static_cast<double>(cross_entropy_loss(probs, std::span<const int>(targets), class_weights).loss) *
            static_cast<double>(idx.size());
    for (std::size_t b = 0; b < idx.size(); ++b) {
      if (task == Task::kClassification) {
        const int p = static_cast<double>(probs[b * 2 + 1]) >= kInfectedThreshold ? kInfected : kHealthy;
        correct += p == data.labels[idx[b]];
      } else {
        const Mask m = argmax_mask(probs, b);
        const Mask& g = data.masks[idx[b]];
        for (std::size_t i = 0; i < m.size(); ++i) {
          inter += m.values[i] & g.values[i];
          pred_fg += m.values[i];
          gt_fg += g.values[i];
        }
      }
    }
  }
  loss /= static_cast<double>(data.size());
  double metric;
  if (task == Task::kClassification) {
    metric = static_cast<double>(correct) / static_cast<double>(data.size());
  } else {
    metric = pred_fg + gt_fg == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(pred_fg + gt_fg);
  }
  return {loss, metric};
}

template <typename T>
TrainResult<T> train_model(ModelGraph<T> model, const Dataset<T>& train, std::type_identity_t<const Dataset<T>*> val,
                           const TrainConfig& cfg, Task task, const EpochCallback& on_epoch) {
  if (train.size() == 0) throw ParameterError("training set is empty");
  if (cfg.batch_size == 0) throw ParameterError("batch size must be positive");
  if (!(cfg.learning_rate >= 0) || !(cfg.momentum >= 0 && cfg.momentum < 1)) {
    throw ParameterError("learning rate must be >= 0 and momentum in [0, 1)");
  }
  check_task(model, train, task);
  if (val && val->size() == 0) val = nullptr;
  if (val) check_task(model, *val, task);

  TrainResult<T> result{model, {}, std::nullopt};
  std::vector<T> weights;
  if (task == Task::kSegmentation && cfg.attention) {
    result.weights = compute_attention_weights(train.masks);
    weights = {static_cast<T>(result.weights->background), static_cast<T>(result.weights->foreground)};
  }
  const std::span<const T> wspan(weights);

  std::vector<std::size_t> trainable;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    if (model.params[i].trainable) trainable.push_back(i);
  }
  std::vector<Tensor<T>*> param_ptrs;
  for (auto i : trainable) param_ptrs.push_back(&model.params[i].value);

  SgdState<T> sgd;
  sgd.learning_rate = static_cast<T>(cfg.learning_rate);
  sgd.momentum = static_cast<T>(cfg.momentum);
  std::mt19937_64 order_gen(mix(cfg.seed ^ 0x5eedull));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  double best = -1;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle(order, order_gen);
    double loss_sum = 0;
    std::size_t batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_no) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, order.size() - start));
      const auto targets = targets_for(train, idx, task);
      const std::string where = "epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_no + 1);
      try {
        ForwardPass<T> pass = forward(model, train.batch(idx), Mode::kTrain, mix(cfg.seed + mix(epoch * 65537 + batch_no)));
        const Var loss = ad::cross_entropy_loss(pass.tape, pass.output, std::span<const int>(targets), wspan);
        const double l = static_cast<double>(pass.tape.value(loss)[0]);
        if (!std::isfinite(l)) throw NumericalError("loss is not finite");
        pass.tape.backward(loss);
        std::vector<Tensor<T>> grads;
        grads.reserve(trainable.size());
        for (auto i : trainable) grads.push_back(pass.tape.grad(pass.param_vars[i]));
        sgd_step<T>(param_ptrs, grads, sgd);
        loss_sum += l * static_cast<double>(idx.size());
      } catch (const NumericalError& e) {
        throw NumericalError(where + ": " + e.what());
      }
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    if (val) {
      const auto [vl, vm] = evaluate(model, *val, task, wspan);
      rec.val_loss = vl;
      rec.val_metric = vm;
    }
    if (cfg.stop_at_train_metric) rec.train_metric = evaluate(model, train, task, wspan).second;
    result.history.epochs.push_back(rec);
    if (!val || *rec.val_metric > best) {
      if (val) best = *rec.val_metric;
      result.model = model;
      result.history.best_epoch = epoch;
    }
    if (on_epoch) on_epoch(rec);
    if (cfg.stop_at_train_metric && *rec.train_metric >= *cfg.stop_at_train_metric) break;
  }
  return result;
}

template <typename T>
TrainResult<T> train_classifier(const Dataset<T>& train, std::type_identity_t<const Dataset<T>*> val, const ArchConfig& arch,
                                const TrainConfig& cfg, const EpochCallback& on_epoch) {
  if (arch.arch != kArchCovCtNet) throw ParameterError("classifier training needs a cov-ctnet config");
  return train_model(build_model<T>(arch, cfg.seed), train, val, cfg, Task::kClassification, on_epoch);
}

template <typename T>
TrainResult<T> train_segmenter(const Dataset<T>& train, std::type_identity_t<const Dataset<T>*> val, const ArchConfig& arch,
                               const TrainConfig& cfg, const EpochCallback& on_epoch) {
  if (arch.arch == kArchCovCtNet) throw ParameterError("segmenter training needs a segmentation config");
  return train_model(build_model<T>(arch, cfg.seed), train, val, cfg, Task::kSegmentation, on_epoch);
}

template <typename T>
std::vector<double> predict_probabilities(const ModelGraph<T>& model, const Dataset<T>& data,
                                          std::size_t batch_size) {
  std::vector<double> out;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor<T> probs = predict(model, data.batch(idx));
    for (std::size_t b = 0; b < idx.size(); ++b) out.push_back(static_cast<double>(probs[b * 2 + 1]));
  }
  return out;
}

template <typename T>
std::vector<Mask> predict_masks(const ModelGraph<T>& model, const Dataset<T>& data, std::size_t batch_size) {
  std::vector<Mask> out;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, data.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    const Tensor<T> probs = predict(model, data.batch(idx));
    for (std::size_t b = 0; b < idx.size(); ++b) out.push_back(argmax_mask(probs, b));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cross-validation

std::map<std::string, double> classification_summary(std::span<const double> p_infected,
                                                     std::span<const int> labels) {
  std::vector<int> pred;
  for (double p : p_infected) pred.push_back(p >= kInfectedThreshold ? kInfected : kHealthy);
  const auto m = classification_metrics(confusion(pred, labels, kInfected));
  std::map<std::string, double> s{{"accuracy", m.accuracy}, {"precision", m.precision},
                                  {"recall", m.recall},     {"specificity", m.specificity},
                                  {"f_score", m.f_score},   {"mcc", m.mcc}};
  const bool both = std::count(labels.begin(), labels.end(), kInfected) > 0 &&
                    std::count(labels.begin(), labels.end(), kHealthy) > 0;
  if (both) s["pr_auc"] = pr_curve_auc(p_infected, labels).auc;
  return s;
}

std::map<std::string, double> segmentation_summary(std::span<const Mask> predicted,
                                                   std::span<const Mask> truth) {
  if (predicted.size() != truth.size()) throw ShapeError("prediction and truth counts differ");
  std::vector<ImageSegmentation> per;
  for (std::size_t i = 0; i < truth.size(); ++i) per.push_back(evaluate_image(predicted[i], truth[i]));
  const auto a = aggregate_segmentation(per);
  return {{"g_acc", a.global_accuracy},         {"m_acc", a.mean_accuracy},
          {"m_iou", a.mean_iou},                {"w_iou", a.weighted_iou},
          {"m_bfs", a.mean_bf},                 {"dice_infected", a.per_class[1].dice},
          {"iou_infected", a.per_class[1].iou}, {"acc_infected", a.per_class[1].accuracy}};
}

template <typename T>
CrossValidation run_cross_validation(const Dataset<T>& data, const SplitPlan& plan,
                                     const ArchConfig& arch, const TrainConfig& cfg, Task task,
                                     std::size_t k) {
  if (k < 1) throw ParameterError("cross-validation needs k >= 1");
  if (k > 1 && k != plan.folds) {
    throw ParameterError("plan has " + std::to_string(plan.folds) + " folds, asked for " + std::to_string(k));
  }
  if (plan.fold_of.size() != data.size()) throw ParameterError("split plan does not match the dataset");
  CrossValidation cv;
  for (std::size_t f = 1; f <= k; ++f) {
    FoldOutcome out;
    out.fold = static_cast<int>(f);
    std::vector<std::size_t> tr, va;
    if (k == 1) {
      tr = plan.train;
      va = plan.val;
    } else {
      for (auto i : plan.pool()) (plan.fold_of[i] == out.fold ? va : tr).push_back(i);
    }
    try {
      const Dataset<T> dtr = data.subset(tr), dva = data.subset(va);
      TrainConfig fc = cfg;
      fc.seed = mix(cfg.seed + f);
      auto res = task == Task::kClassification ? train_classifier(dtr, &dva, arch, fc)
                                               : train_segmenter(dtr, &dva, arch, fc);
      out.history = res.history;
      if (task == Task::kClassification) {
        out.metrics = classification_summary(predict_probabilities(res.model, dva), dva.labels);
      } else {
        out.metrics = segmentation_summary(predict_masks(res.model, dva), dva.masks);
      }
      out.ok = true;
    } catch (const Error& e) {
      out.error = e.what();
    }
    cv.folds.push_back(std::move(out));
  }
  std::map<std::string, std::vector<double>> values;
  for (const auto& f : cv.folds) {
    for (const auto& [name, v] : f.metrics) values[name].push_back(v);
  }
  for (const auto& [name, vs] : values) {
    const double mean = std::accumulate(vs.begin(), vs.end(), 0.0) / static_cast<double>(vs.size());
    double ss = 0;
    for (double v : vs) ss += (v - mean) * (v - mean);
    cv.mean[name] = mean;
    cv.stddev[name] = vs.size() > 1 ? std::sqrt(ss / static_cast<double>(vs.size() - 1)) : 0.0;
  }
  return cv;
}

#define COVNET_INSTANTIATE_TRAINER(T)                                                                    \
  template struct Dataset<T>;                                                                            \
  template Dataset<T> load_dataset(std::span<const SampleRecord>, const Preprocess&, Task);              \
  template std::pair<double, double> evaluate(const ModelGraph<T>&, const Dataset<T>&, Task,             \
                                              std::span<const T>);                                       \
  template TrainResult<T> train_model(ModelGraph<T>, const Dataset<T>&, const Dataset<T>*,               \
                                      const TrainConfig&, Task, const EpochCallback&);                   \
  template TrainResult<T> train_classifier(const Dataset<T>&, const Dataset<T>*, const ArchConfig&,      \
                                           const TrainConfig&, const EpochCallback&);                    \
  template TrainResult<T> train_segmenter(const Dataset<T>&, const Dataset<T>*, const ArchConfig&,       \
                                          const TrainConfig&, const EpochCallback&);                     \
  template std::vector<double> predict_probabilities(const ModelGraph<T>&, const Dataset<T>&, std::size_t); \
  template std::vector<Mask> predict_masks(const ModelGraph<T>&, const Dataset<T>&, std::size_t);        \
  template CrossValidation run_cross_validation(const Dataset<T>&, const SplitPlan&, const ArchConfig&,  \
                                                const TrainConfig&, Task, std::size_t);

COVNET_INSTANTIATE_TRAINER(float)
COVNET_INSTANTIATE_TRAINER(double)

#undef COVNET_INSTANTIATE_TRAINER

}  // namespace covnet
