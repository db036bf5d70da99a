#include "covnet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace covnet {

ConfusionCounts confusion(std::span<const int> predictions, std::span<const int> truths,
                          int positive_class) {
  if (predictions.size() != truths.size()) {
    throw ShapeError("confusion: " + std::to_string(predictions.size()) + " predictions vs " +
                     std::to_string(truths.size()) + " truths");
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const bool p = predictions[i] == positive_class;
    const bool t = truths[i] == positive_class;
    if (p && t) ++c.tp;
    else if (!p && !t) ++c.tn;
    else if (p) ++c.fp;
    else ++c.fn;
  }
  return c;
}

namespace {

double ratio(std::uint64_t num, std::uint64_t den, const char* name, std::vector<std::string>& flags) {
  if (den == 0) {
    flags.emplace_back(name);
    return 0.0;
  }
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

ClassificationMetrics classification_metrics(const ConfusionCounts& c) {
  if (c.total() == 0) throw ParameterError("classification_metrics: empty confusion counts");
  ClassificationMetrics m;
  m.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  m.precision = ratio(c.tp, c.tp + c.fp, "precision", m.degenerate);
  m.recall = ratio(c.tp, c.tp + c.fn, "recall", m.degenerate);
  m.specificity = ratio(c.tn, c.tn + c.fp, "specificity", m.degenerate);
  if (m.precision + m.recall > 0) {
    m.f_score = 2 * m.precision * m.recall / (m.precision + m.recall);
  } else {
    m.degenerate.emplace_back("f_score");
  }
  const double tp = static_cast<double>(c.tp), tn = static_cast<double>(c.tn);
  const double fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
  const double den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  if (den == 0) {
    m.degenerate.emplace_back("mcc");
  } else {
    m.mcc = (tp * tn - fp * fn) / std::sqrt(den);
  }
  return m;
}

double tally_iou(const ClassTally& t) {
  const auto u = t.union_count();
  return u == 0 ? 1.0 : static_cast<double>(t.intersection) / static_cast<double>(u);
}

double tally_dice(const ClassTally& t) {
  const auto d = t.pred + t.gt;
  return d == 0 ? 1.0 : static_cast<double>(2 * t.intersection) / static_cast<double>(d);
}

double tally_accuracy(const ClassTally& t) {
  return t.gt == 0 ? 1.0 : static_cast<double>(t.intersection) / static_cast<double>(t.gt);
}

namespace {

void check_pair(const Mask& pred, const Mask& gt) {
  require_binary(pred, "prediction");
  require_binary(gt, "ground truth");
  if (pred.rows != gt.rows || pred.cols != gt.cols) {
    throw ShapeError("mask shapes differ: " + std::to_string(pred.rows) + "x" +
                     std::to_string(pred.cols) + " vs " + std::to_string(gt.rows) + "x" +
                     std::to_string(gt.cols));
  }
}

}  // namespace

std::array<ClassTally, 2> region_tallies(const Mask& pred, const Mask& gt) {
  check_pair(pred, gt);
  std::array<ClassTally, 2> t{};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto p = pred.values[i], g = gt.values[i];
    ++t[p].pred;
    ++t[g].gt;
    if (p == g) ++t[p].intersection;
  }
  return t;
}

std::array<RegionClassMetrics, 2> region_metrics(const Mask& pred, const Mask& gt) {
  const auto t = region_tallies(pred, gt);
  std::array<RegionClassMetrics, 2> m{};
  for (int c = 0; c < 2; ++c) m[c] = {tally_accuracy(t[c]), tally_iou(t[c]), tally_dice(t[c])};
  return m;
}

Mask boundary_map(const Mask& m, std::uint8_t cls) {
  Mask b(m.rows, m.cols);
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < m.cols; ++c) {
      if (m.at(r, c) != cls) continue;
      const bool edge = (r > 0 && m.at(r - 1, c) != cls) || (r + 1 < m.rows && m.at(r + 1, c) != cls) ||
                        (c > 0 && m.at(r, c - 1) != cls) || (c + 1 < m.cols && m.at(r, c + 1) != cls);
      b.at(r, c) = edge;
    }
  }
  return b;
}

std::size_t default_bf_tolerance(std::size_t rows, std::size_t cols) {
  const double diag = std::hypot(static_cast<double>(rows), static_cast<double>(cols));
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(0.0075 * diag)));
}

namespace {

// Number of set pixels in `from` having a set pixel of `to` within `tol`.
std::uint64_t matched(const Mask& from, const Mask& to, std::size_t tol) {
  const long t = static_cast<long>(tol);
  const long rows = static_cast<long>(from.rows), cols = static_cast<long>(from.cols);
  std::uint64_t n = 0;
  for (long r = 0; r < rows; ++r) {
    for (long c = 0; c < cols; ++c) {
      if (!from.at(r, c)) continue;
      bool hit = false;
      for (long dr = -t; dr <= t && !hit; ++dr) {
        const long rr = r + dr;
        if (rr < 0 || rr >= rows) continue;
        for (long dc = -t; dc <= t; ++dc) {
          const long cc = c + dc;
          if (cc < 0 || cc >= cols || dr * dr + dc * dc > t * t) continue;
          if (to.at(rr, cc)) {
            hit = true;
            break;
          }
        }
      }
      n += hit;
    }
  }
  return n;
}

}  // namespace

std::array<BoundaryScore, 2> bf_score(const Mask& pred, const Mask& gt, std::size_t tolerance) {
  check_pair(pred, gt);
  std::array<BoundaryScore, 2> out{};
  for (std::uint8_t cls = 0; cls < 2; ++cls) {
    const Mask bp = boundary_map(pred, cls), bg = boundary_map(gt, cls);
    const std::uint64_t np = bp.count(), ng = bg.count();
    BoundaryScore& s = out[cls];
    if (np == 0 && ng == 0) {
      s = {1.0, 1.0, 1.0};
      continue;
    }
    if (np == 0 || ng == 0) continue;
    s.precision = static_cast<double>(matched(bp, bg, tolerance)) / static_cast<double>(np);
    s.recall = static_cast<double>(matched(bg, bp, tolerance)) / static_cast<double>(ng);
    if (s.precision + s.recall > 0) s.f1 = 2 * s.precision * s.recall / (s.precision + s.recall);
  }
  return out;
}

std::array<BoundaryScore, 2> bf_score(const Mask& pred, const Mask& gt) {
  return bf_score(pred, gt, default_bf_tolerance(gt.rows, gt.cols));
}

ImageSegmentation evaluate_image(const Mask& pred, const Mask& gt) {
  ImageSegmentation r;
  r.tallies = region_tallies(pred, gt);
  const auto bf = bf_score(pred, gt);
  r.bf = {bf[0].f1, bf[1].f1};
  r.pixels = gt.size();
  return r;
}

SegmentationAggregate aggregate_segmentation(std::span<const ImageSegmentation> images) {
  if (images.empty()) throw ParameterError("aggregate_segmentation: no images");
  std::array<ClassTally, 2> pooled{};
  std::array<double, 2> bf_sum{};
  SegmentationAggregate a;
  for (const auto& im : images) {
    for (int c = 0; c < 2; ++c) {
      pooled[c].intersection += im.tallies[c].intersection;
      pooled[c].pred += im.tallies[c].pred;
      pooled[c].gt += im.tallies[c].gt;
      bf_sum[c] += im.bf[c];
    }
    a.total_pixels += im.pixels;
  }
  a.correct_pixels = pooled[0].intersection + pooled[1].intersection;
  a.global_accuracy = static_cast<double>(a.correct_pixels) / static_cast<double>(a.total_pixels);
  std::array<double, 2> ious{}, freqs{};
  for (int c = 0; c < 2; ++c) {
    a.per_class[c] = {tally_accuracy(pooled[c]), tally_iou(pooled[c]), tally_dice(pooled[c])};
    a.per_class_bf[c] = bf_sum[c] / static_cast<double>(images.size());
    ious[c] = a.per_class[c].iou;
    freqs[c] = static_cast<double>(pooled[c].gt);
  }
  a.mean_accuracy = (a.per_class[0].accuracy + a.per_class[1].accuracy) / 2;
  a.mean_iou = (ious[0] + ious[1]) / 2;
  a.weighted_iou = weighted_iou(ious, freqs);
  a.mean_bf = (a.per_class_bf[0] + a.per_class_bf[1]) / 2;
  return a;
}

double weighted_iou(std::span<const double> ious, std::span<const double> frequencies) {
  if (ious.size() != frequencies.size() || ious.empty()) {
    throw ShapeError("weighted_iou: need one frequency per class");
  }
  double total = 0, acc = 0;
  for (std::size_t i = 0; i < ious.size(); ++i) {
    if (frequencies[i] < 0) throw ParameterError("weighted_iou: negative frequency");
    total += frequencies[i];
    acc += frequencies[i] * ious[i];
  }
  if (total <= 0) throw ParameterError("weighted_iou: frequencies sum to zero");
  return acc / total;
}

namespace {

void check_scores(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("scores and labels differ in length");
  bool pos = false, neg = false;
  for (int l : labels) {
    if (l != 0 && l != 1) throw ParameterError("labels must be 0 or 1");
    (l ? pos : neg) = true;
  }
  if (!pos || !neg) throw ParameterError("PR curve needs both positive and negative labels");
}

std::vector<std::size_t> descending_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

// Sweep over `order` with per-sample multiplicities; equal scores form one
// threshold. Returns the area and optionally the points.
double sweep(std::span<const double> scores, std::span<const int> labels,
             const std::vector<std::size_t>& order, const std::vector<std::uint32_t>* weights,
             std::vector<PrPoint>* points) {
  double positives = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    positives += labels[i] * (weights ? (*weights)[i] : 1.0);
  }
  double tp = 0, fp = 0, auc = 0, prev_recall = 0, prev_precision = -1;
  for (std::size_t k = 0; k < order.size();) {
    const double s = scores[order[k]];
    for (; k < order.size() && scores[order[k]] == s; ++k) {
      const double w = weights ? (*weights)[order[k]] : 1.0;
      (labels[order[k]] ? tp : fp) += w;
    }
    if (tp + fp == 0) continue;
    const double precision = tp / (tp + fp), recall = tp / positives;
    if (prev_precision < 0) prev_precision = precision;
    auc += (recall - prev_recall) * (precision + prev_precision) / 2;
    prev_recall = recall;
    prev_precision = precision;
    if (points) points->push_back({s, precision, recall});
  }
  return auc;
}

}  // namespace

PrCurve pr_curve_auc(std::span<const double> scores, std::span<const int> labels) {
  check_scores(scores, labels);
  PrCurve curve;
  curve.auc = sweep(scores, labels, descending_order(scores), nullptr, &curve.points);
  return curve;
}

Interval wilson_interval(std::uint64_t successes, std::uint64_t n, double z) {
  if (n == 0) throw ParameterError("wilson_interval: n must be positive");
  if (successes > n) throw ParameterError("wilson_interval: successes exceed n");
  const double nn = static_cast<double>(n);
  const double p = static_cast<double>(successes) / nn;
  const double z2 = z * z;
  const double centre = (p + z2 / (2 * nn)) / (1 + z2 / nn);
  const double half = z / (1 + z2 / nn) * std::sqrt(p * (1 - p) / nn + z2 / (4 * nn * nn));
  // the closed form hits 0 or 1 exactly at the ends; rounding would not
  const double lower = successes == 0 ? 0.0 : std::max(0.0, centre - half);
  const double upper = successes == n ? 1.0 : std::min(1.0, centre + half);
  return {lower, upper};
}

namespace {

double percentile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace

Interval bootstrap_auc_ci(std::span<const double> scores, std::span<const int> labels,
                          std::uint64_t seed, std::size_t resamples, double level) {
  check_scores(scores, labels);
  if (resamples == 0) throw ParameterError("bootstrap needs at least one resample");
  if (!(level > 0 && level < 1)) throw ParameterError("confidence level must lie in (0, 1)");
  const auto order = descending_order(scores);
  const std::size_t n = scores.size();
  std::mt19937_64 gen(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::uint32_t> counts(n);
  std::vector<double> aucs;
  aucs.reserve(resamples);
  std::size_t attempts = 0;
  while (aucs.size() < resamples) {
    if (++attempts > 100 * resamples) {
      throw NumericalError("bootstrap: resamples keep missing a class");
    }
    std::fill(counts.begin(), counts.end(), 0u);
    std::size_t pos = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = pick(gen);
      ++counts[j];
      pos += labels[j];
    }
    if (pos == 0 || pos == n) continue;
    aucs.push_back(sweep(scores, labels, order, &counts, nullptr));
  }
  std::sort(aucs.begin(), aucs.end());
  const double tail = (1 - level) / 2;
  return {percentile(aucs, tail), percentile(aucs, 1 - tail)};
}

}  // namespace covnet
