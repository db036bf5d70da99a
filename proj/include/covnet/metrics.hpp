#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "covnet/mask.hpp"

namespace covnet {

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;

  std::uint64_t total() const { return tp + tn + fp + fn; }
  bool operator==(const ConfusionCounts&) const = default;
};

// Labels are class indices; anything equal to positive_class is positive.
ConfusionCounts confusion(std::span<const int> predictions, std::span<const int> truths,
                          int positive_class = 1);

struct ClassificationMetrics {
  double accuracy = 0;
  double precision = 0;
  double recall = 0;
  double specificity = 0;
  double f_score = 0;
  double mcc = 0;
  // names of metrics whose denominator was zero (reported as 0)
  std::vector<std::string> degenerate;
};

ClassificationMetrics classification_metrics(const ConfusionCounts& c);

// Pixel tallies of one class in one image.
struct ClassTally {
  std::uint64_t intersection = 0;  // pred == c && gt == c
  std::uint64_t pred = 0;          // pred == c
  std::uint64_t gt = 0;            // gt == c

  std::uint64_t union_count() const { return pred + gt - intersection; }
};

struct RegionClassMetrics {
  double accuracy = 0;  // recall over the gt pixels of the class
  double iou = 0;
  double dice = 0;
};

double tally_iou(const ClassTally& t);
double tally_dice(const ClassTally& t);
double tally_accuracy(const ClassTally& t);

std::array<ClassTally, 2> region_tallies(const Mask& pred, const Mask& gt);
std::array<RegionClassMetrics, 2> region_metrics(const Mask& pred, const Mask& gt);

// Pixels of class `cls` with at least one 4-neighbour (inside the image) of
// another class.
Mask boundary_map(const Mask& m, std::uint8_t cls);

std::size_t default_bf_tolerance(std::size_t rows, std::size_t cols);

struct BoundaryScore {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

std::array<BoundaryScore, 2> bf_score(const Mask& pred, const Mask& gt, std::size_t tolerance);
std::array<BoundaryScore, 2> bf_score(const Mask& pred, const Mask& gt);

struct ImageSegmentation {
  std::array<ClassTally, 2> tallies;
  std::array<double, 2> bf{};
  std::uint64_t pixels = 0;
};

ImageSegmentation evaluate_image(const Mask& pred, const Mask& gt);

struct SegmentationAggregate {
  double global_accuracy = 0;
  double mean_accuracy = 0;
  double mean_iou = 0;
  double weighted_iou = 0;
  double mean_bf = 0;
  std::array<RegionClassMetrics, 2> per_class{};  // pooled over all images
  std::array<double, 2> per_class_bf{};          // averaged over images
  std::uint64_t correct_pixels = 0;
  std::uint64_t total_pixels = 0;
};

// Class metrics pool pixel counts over every image before dividing; BF
// scores are averaged per class over images, then over classes.
SegmentationAggregate aggregate_segmentation(std::span<const ImageSegmentation> images);

// Frequency-weighted mean of class IoUs; frequencies are normalised.
double weighted_iou(std::span<const double> ious, std::span<const double> frequencies);

struct PrPoint {
  double threshold = 0;
  double precision = 0;
  double recall = 0;
};

struct PrCurve {
  std::vector<PrPoint> points;  // one per distinct score, descending
  double auc = 0;
};

// label 1 = positive. Trapezoidal area over recall, with the curve extended
// flat from recall 0 to the first point.
PrCurve pr_curve_auc(std::span<const double> scores, std::span<const int> labels);

struct Interval {
  double lower = 0;
  double upper = 0;
};

inline constexpr double kZ95 = 1.959964;

Interval wilson_interval(std::uint64_t successes, std::uint64_t n, double z = kZ95);

// Percentile bootstrap of the PR-AUC. Resamples that lose a class are drawn
// again.
Interval bootstrap_auc_ci(std::span<const double> scores, std::span<const int> labels,
                          std::uint64_t seed, std::size_t resamples = 1000, double level = 0.95);

}  // namespace covnet
