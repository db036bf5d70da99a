#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "covnet/dataio.hpp"
#include "covnet/mask.hpp"
#include "covnet/metrics.hpp"
#include "covnet/nets.hpp"

namespace covnet {

struct SplitPlan {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
  std::vector<int> fold_of;  // per sample: 1..folds for train+val, 0 for test
  std::size_t folds = 5;
  std::uint64_t seed = 0;
  std::vector<std::string> warnings;

  std::vector<std::size_t> pool() const;  // train + val, sorted
  std::vector<std::size_t> fold(int k) const;
};

// `strata` holds one group key per sample (class label). Each stratum gives
// round(20%) to test, round(20%) of the rest to validation; the train+val
// pool is dealt round-robin into folds.
SplitPlan make_splits(std::span<const int> strata, std::uint64_t seed, std::size_t folds = 5);

struct ClassWeights {
  double background = 1;
  double foreground = 1;
  double background_fraction = 0;
  double foreground_fraction = 0;
};

// Inverse frequency over the pixels of all masks: w_c = 1 / (2 f_c).
ClassWeights compute_attention_weights(std::span<const Mask> masks);

enum class Task { kClassification, kSegmentation };

struct TrainConfig {
  double learning_rate = 0.001;
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  double momentum = 0.95;
  bool attention = false;
  std::uint64_t seed = 1;
  std::string precision = "f32";
  // Stop once the eval-mode training metric reaches this value.
  std::optional<double> stop_at_train_metric;
};

template <typename T>
struct Dataset {
  std::vector<std::string> ids;
  std::vector<Tensor<T>> images;  // (C, H, W)
  std::vector<int> labels;
  std::vector<Mask> masks;  // empty for classification-only sets

  std::size_t size() const { return images.size(); }
  Dataset subset(std::span<const std::size_t> indices) const;
  Tensor<T> batch(std::span<const std::size_t> indices) const;  // (B, C, H, W)
};

// Loads every record; requires labels (classification) or masks
// (segmentation). Any ingestion failure aborts before training starts.
template <typename T>
Dataset<T> load_dataset(std::span<const SampleRecord> records, const Preprocess& pre, Task task);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  std::optional<double> val_loss;
  std::optional<double> val_metric;
  std::optional<double> train_metric;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 1-based; 0 when nothing was selected
  std::string to_csv() const;
};

template <typename T>
struct TrainResult {
  ModelGraph<T> model;  // parameters of the selected epoch
  TrainHistory history;
  std::optional<ClassWeights> weights;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Mini-batch SGD with momentum on `model`. Selects the epoch with the best
// validation metric (earliest on ties), or the last epoch without a
// validation set.
template <typename T>
TrainResult<T> train_model(ModelGraph<T> model, const Dataset<T>& train, std::type_identity_t<const Dataset<T>*> val,
                           const TrainConfig& cfg, Task task, const EpochCallback& on_epoch = {});

template <typename T>
TrainResult<T> train_classifier(const Dataset<T>& train, std::type_identity_t<const Dataset<T>*> val, const ArchConfig& arch,
                                const TrainConfig& cfg, const EpochCallback& on_epoch = {});

template <typename T>
TrainResult<T> train_segmenter(const Dataset<T>& train, std::type_identity_t<const Dataset<T>*> val, const ArchConfig& arch,
                               const TrainConfig& cfg, const EpochCallback& on_epoch = {});

// Eval-mode p(infected) per sample.
template <typename T>
std::vector<double> predict_probabilities(const ModelGraph<T>& model, const Dataset<T>& data,
                                          std::size_t batch_size = 16);

template <typename T>
std::vector<Mask> predict_masks(const ModelGraph<T>& model, const Dataset<T>& data,
                                std::size_t batch_size = 4);

// Mean loss and metric (accuracy, or pooled infected-class Dice) in eval mode.
template <typename T>
std::pair<double, double> evaluate(const ModelGraph<T>& model, const Dataset<T>& data, Task task,
                                   std::span<const T> class_weights = {});

struct FoldOutcome {
  int fold = 0;
  bool ok = false;
  std::string error;
  std::map<std::string, double> metrics;
  TrainHistory history;
};

struct CrossValidation {
  std::vector<FoldOutcome> folds;
  std::map<std::string, double> mean;
  std::map<std::string, double> stddev;  // sample standard deviation
};

// Trains one model per fold, validating on the held-out fold. k = 1 trains
// once on plan.train and validates on plan.val.
template <typename T>
CrossValidation run_cross_validation(const Dataset<T>& data, const SplitPlan& plan,
                                     const ArchConfig& arch, const TrainConfig& cfg, Task task,
                                     std::size_t k = 5);

std::map<std::string, double> classification_summary(std::span<const double> p_infected,
                                                     std::span<const int> labels);
std::map<std::string, double> segmentation_summary(std::span<const Mask> predicted,
                                                   std::span<const Mask> truth);

}  // namespace covnet
