#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "covnet/dataio.hpp"
#include "covnet/errors.hpp"
#include "covnet/ops.hpp"
#include "covnet/trainer.hpp"

using namespace covnet;

namespace {

// In-memory phantom set at `size` x `size`, alternating labels.
Dataset<float> phantom_set(std::size_t n, std::size_t size, std::uint64_t seed) {
  PhantomConfig cfg;
  cfg.rows = cfg.cols = size;
  cfg.seed = seed;
  Dataset<float> d;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = phantom_label(cfg, i);
    Phantom ph = make_phantom(cfg, i, label);
    d.ids.push_back("p" + std::to_string(i));
    d.images.push_back(ph.image.cast<float>().reshaped({1, size, size}));
    d.labels.push_back(label);
    d.masks.push_back(ph.mask);
  }
  return d;
}

ArchConfig tiny_classifier(std::size_t size) {
  ArchConfig a = cov_ctnet_config(size, size);
  a.widths = {4, 8};
  a.fc_widths = {16};
  a.dropout = 0.0;
  return a;
}

ArchConfig tiny_segmenter(std::size_t size) {
  ArchConfig a = cov_raseg_config(size, size);
  a.widths = {4, 8};
  return a;
}

TrainConfig quick(std::size_t epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.seed = 3;
  return c;
}

}  // namespace

TEST(Splits, PaperSizes) {
  const std::vector<int> seg(370, 1);
  const SplitPlan p = make_splits(seg, 1);
  EXPECT_EQ(p.test.size(), 74u);
  EXPECT_NEAR(static_cast<double>(p.val.size()), 60, 1);
  EXPECT_NEAR(static_cast<double>(p.train.size()), 236, 1);

  std::vector<int> cls(829);
  for (std::size_t i = 0; i < cls.size(); ++i) cls[i] = i < 415 ? 1 : 0;
  const SplitPlan q = make_splits(cls, 1);
  EXPECT_EQ(q.test.size(), 166u);
  EXPECT_TRUE(q.warnings.empty());
}

TEST(Splits, PartitionAndStratification) {
  std::vector<int> strata(101);
  for (std::size_t i = 0; i < strata.size(); ++i) strata[i] = i % 3 == 0;
  const SplitPlan p = make_splits(strata, 9);
  std::vector<int> seen(strata.size(), 0);
  for (auto* part : {&p.train, &p.val, &p.test})
    for (auto i : *part) ++seen[i];
  for (int s : seen) EXPECT_EQ(s, 1);

  // per-stratum proportions within one sample of the targets
  for (int key : {0, 1}) {
    const auto n = static_cast<double>(std::count(strata.begin(), strata.end(), key));
    const auto in = [&](const std::vector<std::size_t>& v) {
      return static_cast<double>(std::count_if(v.begin(), v.end(), [&](std::size_t i) { return strata[i] == key; }));
    };
    EXPECT_NEAR(in(p.test), 0.2 * n, 1);
    EXPECT_NEAR(in(p.val), 0.2 * (n - in(p.test)), 1);
  }

  // folds partition the pool
  const auto pooled = p.pool();
  const std::set<std::size_t> pool(pooled.begin(), pooled.end());
  std::multiset<std::size_t> union_of_folds;
  for (int k = 1; k <= 5; ++k)
    for (auto i : p.fold(k)) union_of_folds.insert(i);
  EXPECT_EQ(union_of_folds.size(), pool.size());
  EXPECT_EQ(std::set<std::size_t>(union_of_folds.begin(), union_of_folds.end()), pool);
  for (auto i : p.test) EXPECT_EQ(p.fold_of[i], 0);
}

TEST(Splits, DeterministicPerSeed) {
  const std::vector<int> strata(57, 0);
  const SplitPlan a = make_splits(strata, 4), b = make_splits(strata, 4), c = make_splits(strata, 5);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.fold_of, b.fold_of);
  EXPECT_NE(a.train, c.train);
}

TEST(Splits, SmallStratumFallsBack) {
  std::vector<int> strata(30, 0);
  strata[0] = strata[1] = 1;
  const SplitPlan p = make_splits(strata, 1);
  ASSERT_EQ(p.warnings.size(), 1u);
  EXPECT_EQ(p.test.size(), 6u);
  EXPECT_THROW(make_splits(std::vector<int>(9, 0), 1), ParameterError);
}

TEST(Attention, InverseFrequency) {
  Mask half(2, 2);
  half.values = {1, 1, 0, 0};
  const std::vector<Mask> balanced = {half};
  const ClassWeights b = compute_attention_weights(balanced);
  EXPECT_EQ(b.background, 1.0);
  EXPECT_EQ(b.foreground, 1.0);

  Mask tenth(10, 10);
  for (std::size_t i = 0; i < 10; ++i) tenth.values[i] = 1;
  const std::vector<Mask> skewed = {tenth};
  const ClassWeights w = compute_attention_weights(skewed);
  EXPECT_NEAR(w.background, 0.556, 5e-4);
  EXPECT_DOUBLE_EQ(w.background, 1 / (2 * 0.9));
  EXPECT_DOUBLE_EQ(w.foreground, 5.0);

  for (std::size_t fg : {1u, 7u, 33u, 50u, 99u}) {
    Mask m(10, 10);
    for (std::size_t i = 0; i < fg; ++i) m.values[i] = 1;
    const std::vector<Mask> one = {m};
    const ClassWeights c = compute_attention_weights(one);
    EXPECT_NEAR(c.background_fraction * c.background + c.foreground_fraction * c.foreground, 1.0, 1e-15);
  }

  const std::vector<Mask> empty = {Mask(4, 4)};
  EXPECT_THROW(compute_attention_weights(empty), ParameterError);
}

// At 5% foreground the foreground weight is 1 / (2 * 0.05) = 10, so under
// attention every infected pixel counts ten times what it does unweighted.
TEST(Attention, LossDecomposition) {
  std::vector<Mask> masks(4, Mask(20, 20));
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t r = 0; r < 20; ++r) masks[n].values[r * 20 + 3 + n] = 1;
  const ClassWeights w = compute_attention_weights(masks);
  EXPECT_DOUBLE_EQ(w.foreground, 10.0);

  auto m = build_cov_raseg<double>(tiny_segmenter(20), 1);
  Tensor<double> x({4, 1, 20, 20});
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sin(0.37 * static_cast<double>(i));
  const Tensor<double> probs = predict(m, x);
  std::vector<int> targets;
  for (const auto& mk : masks) targets.insert(targets.end(), mk.values.begin(), mk.values.end());

  const std::vector<double> cw = {w.background, w.foreground};
  const auto plain = cross_entropy_loss(probs, std::span<const int>(targets));
  const auto att = cross_entropy_loss(probs, std::span<const int>(targets), std::span<const double>(cw));
  double s_bg = 0, s_fg = 0;
  const std::size_t hw = 400;
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t p = 0; p < hw; ++p) {
      const int t = targets[n * hw + p];
      const double nll = -std::log(probs[(n * 2 + t) * hw + p]);
      (t ? s_fg : s_bg) += nll;
    }
  EXPECT_NEAR(plain.loss, (s_bg + s_fg) / 1600, 1e-12);
  EXPECT_NEAR(att.loss, (w.background * s_bg + w.foreground * s_fg) / 1600, 1e-12);
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t p = 0; p < hw; ++p) {
      const int t = targets[n * hw + p];
      const std::size_t k = (n * 2 + t) * hw + p;
      EXPECT_DOUBLE_EQ(att.grad[k], plain.grad[k] * (t ? 10.0 : w.background));
    }
}

TEST(Attention, AllBackgroundRejected) {
  Dataset<float> d = phantom_set(4, 16, 1);
  for (auto& m : d.masks) m = Mask(16, 16);
  TrainConfig c = quick(1);
  c.attention = true;
  EXPECT_THROW(train_segmenter(d, nullptr, tiny_segmenter(16), c), ParameterError);
}

TEST(Training, ZeroLearningRateFreezesParameters) {
  const Dataset<float> d = phantom_set(6, 16, 2);
  TrainConfig c = quick(3);
  c.learning_rate = 0;
  c.batch_size = 4;
  const auto start = build_cov_ctnet<float>(tiny_classifier(16), c.seed);
  const auto r = train_classifier(d, nullptr, tiny_classifier(16), c);
  ASSERT_EQ(r.model.params.size(), start.params.size());
  for (std::size_t i = 0; i < start.params.size(); ++i) {
    // running statistics still track the data; trainable tensors must not move
    if (start.params[i].trainable) {
      EXPECT_EQ(r.model.params[i].value, start.params[i].value) << start.params[i].name;
    }
  }
}

TEST(Training, SameSeedSameHistory) {
  const Dataset<float> d = phantom_set(8, 16, 3), v = phantom_set(4, 16, 4);
  TrainConfig c = quick(3);
  c.batch_size = 3;
  const auto a = train_classifier(d, &v, tiny_classifier(16), c);
  const auto b = train_classifier(d, &v, tiny_classifier(16), c);
  EXPECT_EQ(a.history.to_csv(), b.history.to_csv());
  for (std::size_t i = 0; i < a.model.params.size(); ++i) EXPECT_EQ(a.model.params[i].value, b.model.params[i].value);
  c.seed = 4;
  EXPECT_NE(train_classifier(d, &v, tiny_classifier(16), c).history.to_csv(), a.history.to_csv());
}

TEST(Training, FullBatchLossFallsForFiveEpochs) {
  const Dataset<float> d = phantom_set(8, 16, 5);
  TrainConfig c = quick(5);
  c.batch_size = 8;
  const auto cls = train_classifier(d, nullptr, tiny_classifier(16), c);
  ASSERT_EQ(cls.history.epochs.size(), 5u);
  for (std::size_t e = 1; e < 5; ++e)
    EXPECT_LT(cls.history.epochs[e].train_loss, cls.history.epochs[e - 1].train_loss) << "epoch " << e + 1;

  const auto seg = train_segmenter(d, nullptr, tiny_segmenter(16), c);
  for (std::size_t e = 1; e < 5; ++e)
    EXPECT_LT(seg.history.epochs[e].train_loss, seg.history.epochs[e - 1].train_loss) << "epoch " << e + 1;
}

TEST(Training, SelectsEarliestBestValidationEpoch) {
  const Dataset<float> d = phantom_set(8, 16, 6), v = phantom_set(6, 16, 7);
  TrainConfig c = quick(6);
  c.batch_size = 4;
  const auto r = train_segmenter(d, &v, tiny_segmenter(16), c);
  ASSERT_EQ(r.history.epochs.size(), 6u);
  std::size_t best = 0;
  for (std::size_t e = 0; e < 6; ++e)
    if (*r.history.epochs[e].val_metric > *r.history.epochs[best].val_metric) best = e;
  EXPECT_EQ(r.history.best_epoch, best + 1);
  // the returned model scores what the selected epoch scored
  EXPECT_EQ(evaluate(r.model, v, Task::kSegmentation).second, *r.history.epochs[best].val_metric);
  const std::string csv = r.history.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,train_loss,val_loss,val_metric");
}

TEST(Training, DivergenceReportsWhere) {
  const Dataset<float> d = phantom_set(4, 16, 8);
  TrainConfig c = quick(50);
  c.learning_rate = 1e30;
  c.batch_size = 2;
  try {
    train_classifier(d, nullptr, tiny_classifier(16), c);
    FAIL() << "training did not diverge";
  } catch (const NumericalError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("epoch"), std::string::npos) << what;
    EXPECT_NE(what.find("batch"), std::string::npos) << what;
  }
}

TEST(Training, LastPartialBatchIsUsed) {
  const Dataset<float> d = phantom_set(5, 16, 9);
  TrainConfig c = quick(1);
  c.batch_size = 4;
  c.learning_rate = 0;
  // with lr 0 the epoch loss is the sample-weighted mean over both batches
  const auto r = train_classifier(d, nullptr, tiny_classifier(16), c);
  EXPECT_TRUE(std::isfinite(r.history.epochs[0].train_loss));
  EXPECT_EQ(r.history.epochs.size(), 1u);
}

TEST(CrossValidation, MeanIsArithmeticAndEverySampleValidatedOnce) {
  const Dataset<float> d = phantom_set(20, 16, 10);
  const SplitPlan plan = make_splits(d.labels, 2, 5);
  TrainConfig c = quick(1);
  c.batch_size = 4;
  const auto cv = run_cross_validation(d, plan, tiny_classifier(16), c, Task::kClassification, 5);
  ASSERT_EQ(cv.folds.size(), 5u);
  double sum = 0;
  std::size_t validated = 0;
  for (const auto& f : cv.folds) {
    ASSERT_TRUE(f.ok) << f.error;
    sum += f.metrics.at("accuracy");
    validated += plan.fold(f.fold).size();
  }
  EXPECT_DOUBLE_EQ(cv.mean.at("accuracy"), sum / 5);
  EXPECT_EQ(validated, plan.pool().size());
}

TEST(CrossValidation, SingleFoldIsHoldout) {
  const Dataset<float> d = phantom_set(12, 16, 11);
  const SplitPlan plan = make_splits(d.labels, 2, 1);
  TrainConfig c = quick(1);
  const auto cv = run_cross_validation(d, plan, tiny_segmenter(16), c, Task::kSegmentation, 1);
  ASSERT_EQ(cv.folds.size(), 1u);
  ASSERT_TRUE(cv.folds[0].ok) << cv.folds[0].error;
  EXPECT_EQ(cv.stddev.at("dice_infected"), 0.0);
  EXPECT_EQ(cv.mean.at("dice_infected"), cv.folds[0].metrics.at("dice_infected"));
}

TEST(CrossValidation, FailedFoldIsMarkedAndOthersContinue) {
  Dataset<float> d = phantom_set(20, 16, 12);
  const SplitPlan plan = make_splits(d.labels, 2, 5);
  d.images[plan.fold(3).front()][0] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig c = quick(1);
  c.batch_size = 4;
  const auto cv = run_cross_validation(d, plan, tiny_classifier(16), c, Task::kClassification, 5);
  ASSERT_EQ(cv.folds.size(), 5u);
  for (const auto& f : cv.folds) {
    if (f.fold == 3) continue;  // only fold 3 never trains on the poisoned sample
    EXPECT_FALSE(f.ok) << "fold " << f.fold;
    EXPECT_NE(f.error.find("non-finite"), std::string::npos) << f.error;
  }
}
