#include "covnet/cli.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <ostream>
#include <set>
#include <sstream>

#include "covnet/checkpoint.hpp"
#include "covnet/features.hpp"
#include "covnet/gradcheck.hpp"
#include "covnet/metrics.hpp"
#include "covnet/pipeline.hpp"
#include "covnet/wavelet.hpp"

namespace covnet {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

const std::set<std::string> kCommands{"synth",    "enhance",  "train-cls", "train-seg", "cv",
                                      "eval-cls", "eval-seg", "predict",   "features",  "gradcheck"};

const std::set<std::string> kValueFlags{"--config", "--seed",   "--manifest", "--ckpt",   "--seg-ckpt",
                                        "--input",  "--out",    "--size",     "--precision", "--arch",
                                        "--epochs", "--lr",     "--batch",    "--momentum", "--widths",
                                        "--count",  "--folds",  "--task",     "--stop-at",  "--infected-fraction",
                                        "--levels"};
const std::set<std::string> kSwitches{"--attention"};

template <typename N>
N parse_number(const std::string& flag, const std::string& text) {
  N v{};
  const char* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || p != end) throw UsageError(flag + ": not a number: '" + text + "'");
  return v;
}

std::size_t parse_count(const std::string& flag, const std::string& text) {
  if (!text.empty() && text[0] == '-') throw UsageError(flag + ": must be non-negative");
  return parse_number<std::size_t>(flag, text);
}

std::pair<std::size_t, std::size_t> parse_size(const std::string& text) {
  const auto x = text.find('x');
  if (x == std::string::npos) throw UsageError("--size: expected HxW, got '" + text + "'");
  const auto h = parse_count("--size", text.substr(0, x));
  const auto w = parse_count("--size", text.substr(x + 1));
  if (h == 0 || w == 0) throw UsageError("--size: extents must be positive");
  return {h, w};
}

std::vector<std::size_t> parse_list(const std::string& flag, const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_count(flag, item));
  return out;
}

std::string normalize_task(const std::string& t) {
  if (t == "classification" || t == "cls") return "classification";
  if (t == "segmentation" || t == "seg") return "segmentation";
  throw UsageError("unknown task '" + t + "' (classification or segmentation)");
}

ArchConfig arch_defaults(const std::string& arch, std::size_t h, std::size_t w) {
  if (arch == kArchCovCtNet) return cov_ctnet_config(h, w);
  if (arch == kArchCovRaSeg) return cov_raseg_config(h, w);
  if (arch == kArchSegNet) return segnet_config(h, w);
  throw UsageError("unknown architecture '" + arch + "'");
}

void check_keys(const ojson& j, const std::string& where, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw UsageError("config: '" + where + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw UsageError("config: unknown key '" + where + "." + k + "'");
  }
}

template <typename V>
void take(const ojson& j, const char* key, V& dst) {
  if (j.contains(key)) dst = j.at(key).get<V>();
}

ojson read_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    ojson j = ojson::parse(ss.str());
    check_keys(j, "", {"seed", "precision", "task", "manifest", "ckpt", "seg_ckpt", "input", "out", "count",
                       "folds", "enhance_levels", "model", "train", "phantom"});
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config file " + path + ": " + e.what());
  }
}

std::string default_task(const std::string& command) {
  if (command == "train-seg" || command == "eval-seg") return "segmentation";
  return "classification";
}

ojson arch_json(const ArchConfig& a) { return ojson::parse(a.canonical_text()); }

ojson run_json(const RunConfig& rc) { return ojson::parse(rc.to_json()); }

void make_parent(const std::string& path) {
  const fs::path p(path);
  if (p.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
  }
}

void write_text(const std::string& path, const std::string& text) {
  make_parent(path);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out << text;
  if (!out) throw DataError("write failed: " + path);
}

void write_json(const std::string& path, const ojson& j) { write_text(path, j.dump(2) + "\n"); }

// report.json -> report.csv / report.pr.csv
std::string sibling(const std::string& out, const std::string& suffix) {
  std::string base = out;
  if (base.size() > 5 && base.ends_with(".json")) base.resize(base.size() - 5);
  return base + suffix;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void require(const std::string& value, const char* flag, const std::string& command) {
  if (value.empty()) throw UsageError(command + " needs " + flag);
}

std::vector<SampleRecord> load_manifest(const std::string& path) {
  auto records = parse_manifest(path);
  for (const auto& r : records) {
    if (!r.split.empty() && r.split != "train" && r.split != "val" && r.split != "test") {
      throw DataError(path + ": line " + std::to_string(r.line) + ": unknown split '" + r.split + "'");
    }
  }
  return records;
}

bool has_splits(const std::vector<SampleRecord>& records) {
  return std::any_of(records.begin(), records.end(), [](const SampleRecord& r) { return !r.split.empty(); });
}

// Rows marked `test`, or every row when the manifest has no split column.
std::vector<SampleRecord> evaluation_rows(const std::vector<SampleRecord>& records) {
  if (!has_splits(records)) return records;
  std::vector<SampleRecord> out;
  for (const auto& r : records) {
    if (r.split == "test") out.push_back(r);
  }
  if (out.empty()) throw DataError("manifest has a split column but no test rows");
  return out;
}

Task task_of(const RunConfig& rc) {
  return rc.task == "segmentation" ? Task::kSegmentation : Task::kClassification;
}

Preprocess preprocess_for(const ArchConfig& a) {
  return a.is_segmenter() ? segmenter_preprocess(a) : classifier_preprocess(a);
}

// ---------------------------------------------------------------------------

int cmd_synth(const RunConfig& rc, std::ostream& out) {
  require(rc.out, "--out", rc.command);
  if (rc.count == 0) throw UsageError("--count must be positive");
  const auto records = generate_phantoms(rc.phantom, rc.count, rc.out);
  write_json((fs::path(rc.out) / "run.json").string(), ojson{{"run_config", run_json(rc)}});
  std::size_t infected = 0;
  for (const auto& r : records) infected += r.label == kInfected;
  out << "wrote " << records.size() << " phantoms (" << infected << " infected) to " << rc.out << "\n";
  return kExitOk;
}

Tensor<double> enhance_file(const std::string& path, int levels, std::ostream& out) {
  const Tensor<double> chw = to_tensor(read_image(path), true);
  const Tensor<double> plane = chw.reshaped({chw.dim(1), chw.dim(2)});
  Tensor<double> enhanced = enhance_image(plane, levels);  // validates levels
  const std::size_t m = std::size_t{1} << levels;
  if (plane.dim(0) % m || plane.dim(1) % m) {
    out << "warning: " << path << ": " << plane.dim(0) << "x" << plane.dim(1) << " is not a multiple of " << m
        << "; edges replicated for the transform\n";
  }
  return enhanced;
}

int cmd_enhance(const RunConfig& rc, std::ostream& out) {
  require(rc.out, "--out", rc.command);
  if (rc.input.empty() == rc.manifest.empty()) throw UsageError("enhance needs exactly one of --input or --manifest");
  if (rc.enhance_levels < 1) throw UsageError("--levels must be at least 1");
  if (!rc.input.empty()) {
    write_png(rc.out, enhance_file(rc.input, rc.enhance_levels, out));
    write_json(rc.out + ".run.json", ojson{{"run_config", run_json(rc)}});
    out << "wrote " << rc.out << "\n";
    return kExitOk;
  }
  const auto records = load_manifest(rc.manifest);
  fs::create_directories(rc.out);
  std::vector<SampleRecord> written;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    char prefix[16];
    std::snprintf(prefix, sizeof prefix, "%04zu_", i);
    const fs::path dst = fs::path(rc.out) / (prefix + fs::path(r.image_path).stem().string() + ".png");
    write_png(dst.string(), enhance_file(r.resolve(r.image_path).string(), rc.enhance_levels, out));
    SampleRecord w = r;
    w.image_path = dst.filename().string();
    if (w.mask_path) {
      w.mask_path = fs::relative(fs::absolute(r.resolve(*w.mask_path)), fs::absolute(rc.out)).generic_string();
    }
    written.push_back(w);
  }
  write_manifest((fs::path(rc.out) / "manifest.csv").string(), written);
  write_json((fs::path(rc.out) / "run.json").string(), ojson{{"run_config", run_json(rc)}});
  out << "enhanced " << written.size() << " images into " << rc.out << "\n";
  return kExitOk;
}

template <typename T>
int cmd_train(const RunConfig& rc, std::ostream& out) {
  require(rc.manifest, "--manifest", rc.command);
  require(rc.ckpt, "--ckpt", rc.command);
  const Task task = task_of(rc);
  if ((task == Task::kSegmentation) != rc.model.is_segmenter()) {
    throw UsageError("architecture " + rc.model.arch + " does not fit " + rc.command);
  }
  const auto records = load_manifest(rc.manifest);
  const Dataset<T> all = load_dataset<T>(records, preprocess_for(rc.model), task);

  std::vector<std::size_t> train_idx, val_idx;
  std::vector<std::string> warnings;
  if (has_splits(records)) {
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (records[i].split == "train") train_idx.push_back(i);
      if (records[i].split == "val") val_idx.push_back(i);
    }
  } else {
    const SplitPlan plan = make_splits(all.labels, rc.seed, rc.folds);
    train_idx = plan.train;
    val_idx = plan.val;
    warnings = plan.warnings;
  }
  if (train_idx.empty()) throw DataError("no training rows in " + rc.manifest);
  for (const auto& w : warnings) out << "warning: " << w << "\n";

  const Dataset<T> train = all.subset(train_idx);
  const Dataset<T> val = all.subset(val_idx);
  const auto log = [&](const EpochRecord& e) {
    out << "epoch " << e.epoch << " train_loss " << fmt(e.train_loss);
    if (e.train_metric) out << " train_metric " << fmt(*e.train_metric);
    if (e.val_loss) out << " val_loss " << fmt(*e.val_loss);
    if (e.val_metric) out << " val_metric " << fmt(*e.val_metric);
    out << "\n";
  };
  const Dataset<T>* vp = val.size() ? &val : nullptr;
  TrainResult<T> res = task == Task::kClassification ? train_classifier(train, vp, rc.model, rc.train, log)
                                                     : train_segmenter(train, vp, rc.model, rc.train, log);
  save_checkpoint(res.model, rc.ckpt);
  write_text(rc.ckpt + ".history.csv", res.history.to_csv());
  ojson side{{"run_config", run_json(rc)},
             {"train_samples", train.size()},
             {"val_samples", val.size()},
             {"best_epoch", res.history.best_epoch},
             {"epochs_run", res.history.epochs.size()}};
  if (res.weights) {
    side["attention_weights"] = {{"background", res.weights->background},
                                 {"foreground", res.weights->foreground},
                                 {"background_fraction", res.weights->background_fraction},
                                 {"foreground_fraction", res.weights->foreground_fraction}};
  }
  if (!warnings.empty()) side["warnings"] = warnings;
  write_json(rc.ckpt + ".run.json", side);
  out << "saved " << rc.ckpt << " (epoch " << res.history.best_epoch << ")\n";
  return kExitOk;
}

template <typename T>
int cmd_cv(const RunConfig& rc, std::ostream& out) {
  require(rc.manifest, "--manifest", rc.command);
  require(rc.out, "--out", rc.command);
  const Task task = task_of(rc);
  if ((task == Task::kSegmentation) != rc.model.is_segmenter()) {
    throw UsageError("architecture " + rc.model.arch + " does not fit task " + rc.task);
  }
  const auto records = load_manifest(rc.manifest);
  const Dataset<T> data = load_dataset<T>(records, preprocess_for(rc.model), task);
  const SplitPlan plan = make_splits(data.labels, rc.seed, std::max<std::size_t>(rc.folds, 2));
  const CrossValidation cv = run_cross_validation(data, plan, rc.model, rc.train, task, rc.folds);

  ojson folds = ojson::array();
  std::string csv = "fold,metric,value\n";
  for (const auto& f : cv.folds) {
    ojson jf{{"fold", f.fold}, {"ok", f.ok}};
    if (!f.ok) jf["error"] = f.error;
    jf["metrics"] = f.metrics;
    jf["best_epoch"] = f.history.best_epoch;
    folds.push_back(jf);
    for (const auto& [k, v] : f.metrics) csv += std::to_string(f.fold) + "," + k + "," + fmt(v) + "\n";
    out << "fold " << f.fold << (f.ok ? " ok" : " failed: " + f.error) << "\n";
  }
  for (const auto& [k, v] : cv.mean) csv += "mean," + k + "," + fmt(v) + "\n";
  for (const auto& [k, v] : cv.stddev) csv += "stddev," + k + "," + fmt(v) + "\n";
  ojson report{{"run_config", run_json(rc)},
               {"pool_samples", plan.pool().size()},
               {"held_out_test_samples", plan.test.size()},
               {"folds", folds},
               {"mean", cv.mean},
               {"stddev", cv.stddev}};
  if (!plan.warnings.empty()) report["warnings"] = plan.warnings;
  write_json(rc.out, report);
  write_text(sibling(rc.out, ".csv"), csv);
  for (const auto& [k, v] : cv.mean) out << k << " " << fmt(v) << "\n";
  const bool any_ok = std::any_of(cv.folds.begin(), cv.folds.end(), [](const FoldOutcome& f) { return f.ok; });
  return any_ok ? kExitOk : kExitNumerical;
}

ojson class_metrics_json(const ClassificationMetrics& m) {
  return {{"accuracy", m.accuracy}, {"precision", m.precision},     {"recall", m.recall},
          {"specificity", m.specificity}, {"f_score", m.f_score}, {"mcc", m.mcc}};
}

std::string pr_csv(const PrCurve& pr) {
  std::string s = "threshold,precision,recall\n";
  for (const auto& p : pr.points) s += fmt(p.threshold) + "," + fmt(p.precision) + "," + fmt(p.recall) + "\n";
  return s;
}

// Flattens nested objects into `a.b,value` rows.
void flatten(const ojson& j, const std::string& prefix, std::string& csv) {
  for (const auto& [k, v] : j.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) {
      flatten(v, key, csv);
    } else if (v.is_number() || v.is_boolean()) {
      csv += key + "," + (v.is_number_float() ? fmt(v.get<double>()) : v.dump()) + "\n";
    }
  }
}

bool both_classes(std::span<const int> labels) {
  return std::count(labels.begin(), labels.end(), kInfected) > 0 &&
         std::count(labels.begin(), labels.end(), kHealthy) > 0;
}

template <typename T>
int cmd_eval_cls(RunConfig rc, std::ostream& out) {
  require(rc.manifest, "--manifest", rc.command);
  require(rc.ckpt, "--ckpt", rc.command);
  require(rc.out, "--out", rc.command);
  const ModelGraph<T> model = load_checkpoint<T>(rc.ckpt);
  if (model.is_segmenter()) throw UsageError(rc.ckpt + " holds a segmenter, not a classifier");
  rc.model = model.config;
  const auto rows = evaluation_rows(load_manifest(rc.manifest));
  const Dataset<T> data = load_dataset<T>(rows, classifier_preprocess(model.config), Task::kClassification);
  const std::vector<double> p = predict_probabilities(model, data);
  std::vector<int> pred;
  for (double v : p) pred.push_back(v >= kInfectedThreshold ? kInfected : kHealthy);

  const ConfusionCounts c = confusion(pred, data.labels, kInfected);
  const ClassificationMetrics inf = classification_metrics(c);
  const ClassificationMetrics healthy = classification_metrics(confusion(pred, data.labels, kHealthy));
  const Interval acc_ci = wilson_interval(c.tp + c.tn, c.total());

  ojson report{{"run_config", run_json(rc)}, {"samples", data.size()}, {"threshold", kInfectedThreshold}};
  report["confusion"] = {{"tp", c.tp}, {"tn", c.tn}, {"fp", c.fp}, {"fn", c.fn}};
  report["per_class"] = {{"healthy", class_metrics_json(healthy)}, {"infected", class_metrics_json(inf)}};
  report["accuracy_ci"] = {{"lower", acc_ci.lower}, {"upper", acc_ci.upper}};
  report["degenerate"] = inf.degenerate;
  PrCurve pr;
  if (both_classes(data.labels)) {
    pr = pr_curve_auc(p, data.labels);
    const Interval auc_ci = bootstrap_auc_ci(p, data.labels, rc.seed);
    report["pr_auc"] = pr.auc;
    report["pr_auc_ci"] = {{"lower", auc_ci.lower}, {"upper", auc_ci.upper}};
  }
  ojson preds = ojson::array();
  for (std::size_t i = 0; i < data.size(); ++i) {
    preds.push_back({{"id", data.ids[i]}, {"label", data.labels[i]}, {"p_infected", p[i]}});
  }
  report["predictions"] = preds;

  std::string csv = "metric,value\n";
  ojson flat = report;
  flat.erase("run_config");
  flat.erase("predictions");
  flatten(flat, "", csv);
  write_json(rc.out, report);
  write_text(sibling(rc.out, ".csv"), csv);
  write_text(sibling(rc.out, ".pr.csv"), pr_csv(pr));
  out << "accuracy " << fmt(inf.accuracy) << " mcc " << fmt(inf.mcc);
  if (report.contains("pr_auc")) out << " pr_auc " << fmt(pr.auc);
  out << "\n";
  return kExitOk;
}

template <typename T>
int cmd_eval_seg(RunConfig rc, std::ostream& out) {
  require(rc.manifest, "--manifest", rc.command);
  require(rc.ckpt, "--ckpt", rc.command);
  require(rc.out, "--out", rc.command);
  const ModelGraph<T> model = load_checkpoint<T>(rc.ckpt);
  if (!model.is_segmenter()) throw UsageError(rc.ckpt + " holds a classifier, not a segmenter");
  rc.model = model.config;
  const auto rows = evaluation_rows(load_manifest(rc.manifest));
  const Dataset<T> data = load_dataset<T>(rows, segmenter_preprocess(model.config), Task::kSegmentation);

  std::vector<ImageSegmentation> per;
  std::vector<double> scores;
  std::vector<int> truth;
  ojson images = ojson::array();
  constexpr std::size_t kBatch = 4;
  for (std::size_t start = 0; start < data.size(); start += kBatch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(start + kBatch, data.size()); ++i) idx.push_back(i);
    const Tensor<T> probs = predict(model, data.batch(idx));
    for (std::size_t s = 0; s < idx.size(); ++s) {
      const Mask& gt = data.masks[idx[s]];
      const Mask pred = argmax_mask(probs, s);
      per.push_back(evaluate_image(pred, gt));
      for (std::size_t r = 0; r < gt.rows; ++r) {
        for (std::size_t c = 0; c < gt.cols; ++c) {
          scores.push_back(static_cast<double>(probs.at(s, 1, r, c)));
          truth.push_back(gt.at(r, c));
        }
      }
      const auto& t = per.back().tallies[1];
      images.push_back({{"id", data.ids[idx[s]]},
                        {"dice_infected", tally_dice(t)},
                        {"iou_infected", tally_iou(t)},
                        {"bf_infected", per.back().bf[1]}});
    }
  }
  const SegmentationAggregate a = aggregate_segmentation(per);
  const char* names[2] = {"background", "infected"};
  ojson classes;
  for (int k = 0; k < 2; ++k) {
    classes[names[k]] = {{"accuracy", a.per_class[k].accuracy},
                         {"iou", a.per_class[k].iou},
                         {"dice", a.per_class[k].dice},
                         {"bf", a.per_class_bf[k]}};
  }
  ojson report{{"run_config", run_json(rc)}, {"samples", data.size()}};
  report["aggregate"] = {{"g_acc", a.global_accuracy}, {"m_acc", a.mean_accuracy}, {"m_iou", a.mean_iou},
                         {"w_iou", a.weighted_iou},    {"m_bfs", a.mean_bf}};
  report["per_class"] = classes;
  report["pixels"] = {{"correct", a.correct_pixels}, {"total", a.total_pixels}};
  report["global_accuracy_ci"] = [&] {
    const Interval ci = wilson_interval(a.correct_pixels, a.total_pixels);
    return ojson{{"lower", ci.lower}, {"upper", ci.upper}};
  }();
  PrCurve pr;
  if (both_classes(truth)) {
    pr = pr_curve_auc(scores, truth);
    report["pr_auc"] = pr.auc;
  }
  report["images"] = images;

  std::string csv = "metric,value\n";
  ojson flat = report;
  flat.erase("run_config");
  flat.erase("images");
  flatten(flat, "", csv);
  write_json(rc.out, report);
  write_text(sibling(rc.out, ".csv"), csv);
  write_text(sibling(rc.out, ".pr.csv"), pr_csv(pr));
  out << "dice_infected " << fmt(a.per_class[1].dice) << " m_iou " << fmt(a.mean_iou) << " m_bfs "
      << fmt(a.mean_bf) << "\n";
  return kExitOk;
}

template <typename T>
int cmd_predict(const RunConfig& rc, std::ostream& out) {
  require(rc.ckpt, "--ckpt", rc.command);
  require(rc.seg_ckpt, "--seg-ckpt", rc.command);
  require(rc.input, "--input", rc.command);
  require(rc.out, "--out", rc.command);
  const ModelGraph<T> cls = load_checkpoint<T>(rc.ckpt);
  const ModelGraph<T> seg = load_checkpoint<T>(rc.seg_ckpt);
  const Tensor<double> image = to_tensor(read_image(rc.input), true);
  const TwoStageResult r = two_stage_predict(cls, seg, image);
  write_mask_png(rc.out, r.mask);
  ojson side{{"run_config", run_json(rc)},
             {"classifier", arch_json(cls.config)},
             {"segmenter", arch_json(seg.config)},
             {"label", label_name(r.label)},
             {"p_infected", r.p_infected},
             {"segmenter_invoked", r.segmenter_invoked},
             {"mask_pixels", r.mask.count()}};
  write_json(rc.out + ".json", side);
  out << "label " << label_name(r.label) << " p_infected " << fmt(r.p_infected) << " mask_pixels "
      << r.mask.count() << "\n";
  return kExitOk;
}

template <typename T>
int cmd_features(RunConfig rc, std::ostream& out) {
  require(rc.manifest, "--manifest", rc.command);
  require(rc.ckpt, "--ckpt", rc.command);
  require(rc.out, "--out", rc.command);
  const ModelGraph<T> model = load_checkpoint<T>(rc.ckpt);
  if (model.is_segmenter()) throw UsageError(rc.ckpt + " holds a segmenter, not a classifier");
  rc.model = model.config;
  const auto rows = evaluation_rows(load_manifest(rc.manifest));
  const Dataset<T> data = load_dataset<T>(rows, classifier_preprocess(model.config), Task::kClassification);
  std::vector<std::vector<double>> feats;
  constexpr std::size_t kBatch = 16;
  for (std::size_t start = 0; start < data.size(); start += kBatch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(start + kBatch, data.size()); ++i) idx.push_back(i);
    for (auto& f : extract_features(model, data.batch(idx))) feats.push_back(std::move(f));
  }
  const PcaResult pca = pca_2d(feats);
  std::vector<FeatureRow> table;
  for (std::size_t i = 0; i < data.size(); ++i) {
    table.push_back({data.ids[i], data.labels[i], pca.projection[i][0], pca.projection[i][1]});
  }
  write_pca_csv(rc.out, table);
  write_json(rc.out + ".run.json", ojson{{"run_config", run_json(rc)},
                                         {"feature_dim", pca.mean.size()},
                                         {"explained_ratio", pca.explained_ratio}});
  out << "wrote " << table.size() << " rows to " << rc.out << " (explained " << fmt(pca.explained_ratio[0])
      << ", " << fmt(pca.explained_ratio[1]) << ")\n";
  return kExitOk;
}

int cmd_gradcheck(const RunConfig& rc, std::ostream& out) {
  bool ok = true;
  for (const auto& r : run_gradcheck_suite(rc.seed)) {
    char line[128];
    std::snprintf(line, sizeof line, "%-24s %.3e  %5zu  %s\n", r.kind.c_str(), r.max_relative_error, r.checked,
                  r.passed() ? "ok" : "FAIL");
    out << line;
    ok = ok && r.passed();
  }
  return ok ? kExitOk : kExitNumerical;
}

template <typename T>
int run_typed(const RunConfig& rc, std::ostream& out) {
  const std::string& c = rc.command;
  if (c == "train-cls" || c == "train-seg") return cmd_train<T>(rc, out);
  if (c == "cv") return cmd_cv<T>(rc, out);
  if (c == "eval-cls") return cmd_eval_cls<T>(rc, out);
  if (c == "eval-seg") return cmd_eval_seg<T>(rc, out);
  if (c == "predict") return cmd_predict<T>(rc, out);
  if (c == "features") return cmd_features<T>(rc, out);
  throw UsageError("unknown subcommand '" + c + "'");
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

std::string RunConfig::to_json() const {
  ojson train_j{{"learning_rate", train.learning_rate}, {"epochs", train.epochs},
                {"batch_size", train.batch_size},       {"momentum", train.momentum},
                {"attention", train.attention},         {"seed", train.seed},
                {"precision", train.precision}};
  train_j["stop_at_train_metric"] = train.stop_at_train_metric ? ojson(*train.stop_at_train_metric) : ojson();
  ojson j{{"command", command},
          {"seed", seed},
          {"precision", precision},
          {"task", task},
          {"config", config_path},
          {"manifest", manifest},
          {"ckpt", ckpt},
          {"seg_ckpt", seg_ckpt},
          {"input", input},
          {"out", out},
          {"count", count},
          {"folds", folds},
          {"enhance_levels", enhance_levels},
          {"model", arch_json(model)},
          {"train", train_j},
          {"phantom", ojson::parse(phantom.to_json())}};
  return j.dump(2);
}

RunConfig resolve_run_config(const std::vector<std::string>& args) {
  if (args.empty()) throw UsageError("no subcommand");
  RunConfig rc;
  rc.command = args[0];
  if (!kCommands.count(rc.command)) throw UsageError("unknown subcommand '" + rc.command + "'");

  std::map<std::string, std::string> flags;
  std::set<std::string> switches;
  for (std::size_t i = 1; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (kSwitches.count(a)) {
      switches.insert(a);
    } else if (kValueFlags.count(a)) {
      if (i + 1 >= args.size()) throw UsageError(a + " needs a value");
      flags[a] = args[++i];
    } else {
      throw UsageError("unknown argument '" + a + "'");
    }
  }
  const auto flag = [&](const char* f) -> const std::string* {
    auto it = flags.find(f);
    return it == flags.end() ? nullptr : &it->second;
  };

  ojson file = ojson::object();
  if (auto p = flag("--config")) {
    rc.config_path = *p;
    file = read_config(*p);
  }
  const ojson model_j = file.value("model", ojson::object());
  const ojson train_j = file.value("train", ojson::object());
  const ojson phantom_j = file.value("phantom", ojson::object());

  try {
    check_keys(model_j, "model", {"arch", "in_channels", "height", "width", "widths", "fc_widths", "dropout",
                                  "fuse_max_weight"});
    check_keys(train_j, "train", {"learning_rate", "epochs", "batch_size", "momentum", "attention",
                                  "stop_at_train_metric"});
    check_keys(phantom_j, "phantom", {"rows", "cols", "min_blobs", "max_blobs", "min_intensity", "max_intensity",
                                      "min_sigma", "max_sigma", "min_foreground", "max_foreground", "noise_sigma",
                                      "infected_fraction"});

    // task and architecture pick the defaults everything else overrides
    rc.task = default_task(rc.command);
    if (rc.command == "cv") {
      if (file.contains("task")) rc.task = normalize_task(file["task"].get<std::string>());
      if (auto p = flag("--task")) rc.task = normalize_task(*p);
    }
    std::string arch = rc.task == "segmentation" ? kArchCovRaSeg : kArchCovCtNet;
    take(model_j, "arch", arch);
    if (auto p = flag("--arch")) arch = *p;
    std::size_t h = arch == kArchCovCtNet ? 82 : 304, w = h;
    take(model_j, "height", h);
    take(model_j, "width", w);
    if (auto p = flag("--size")) std::tie(h, w) = parse_size(*p);
    rc.model = arch_defaults(arch, h, w);
    take(model_j, "in_channels", rc.model.in_channels);
    take(model_j, "widths", rc.model.widths);
    take(model_j, "fc_widths", rc.model.fc_widths);
    take(model_j, "dropout", rc.model.dropout);
    take(model_j, "fuse_max_weight", rc.model.fuse_max_weight);
    if (auto p = flag("--widths")) rc.model.widths = parse_list("--widths", *p);

    take(file, "seed", rc.seed);
    take(file, "precision", rc.precision);
    take(file, "manifest", rc.manifest);
    take(file, "ckpt", rc.ckpt);
    take(file, "seg_ckpt", rc.seg_ckpt);
    take(file, "input", rc.input);
    take(file, "out", rc.out);
    take(file, "count", rc.count);
    take(file, "folds", rc.folds);
    take(file, "enhance_levels", rc.enhance_levels);

    take(train_j, "learning_rate", rc.train.learning_rate);
    take(train_j, "epochs", rc.train.epochs);
    take(train_j, "batch_size", rc.train.batch_size);
    take(train_j, "momentum", rc.train.momentum);
    take(train_j, "attention", rc.train.attention);
    if (train_j.contains("stop_at_train_metric") && !train_j["stop_at_train_metric"].is_null()) {
      rc.train.stop_at_train_metric = train_j["stop_at_train_metric"].get<double>();
    }

    PhantomConfig& ph = rc.phantom;
    ph.rows = h;
    ph.cols = w;
    if (!flag("--size")) {
      ph.rows = PhantomConfig{}.rows;
      ph.cols = PhantomConfig{}.cols;
      take(phantom_j, "rows", ph.rows);
      take(phantom_j, "cols", ph.cols);
    }
    take(phantom_j, "min_blobs", ph.min_blobs);
    take(phantom_j, "max_blobs", ph.max_blobs);
    take(phantom_j, "min_intensity", ph.min_intensity);
    take(phantom_j, "max_intensity", ph.max_intensity);
    take(phantom_j, "min_sigma", ph.min_sigma);
    take(phantom_j, "max_sigma", ph.max_sigma);
    take(phantom_j, "min_foreground", ph.min_foreground);
    take(phantom_j, "max_foreground", ph.max_foreground);
    take(phantom_j, "noise_sigma", ph.noise_sigma);
    take(phantom_j, "infected_fraction", ph.infected_fraction);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config file " + rc.config_path + ": " + e.what());
  }

  if (auto p = flag("--seed")) rc.seed = parse_number<std::uint64_t>("--seed", *p);
  if (auto p = flag("--precision")) rc.precision = *p;
  if (rc.precision != "f32" && rc.precision != "f64") throw UsageError("--precision must be f32 or f64");
  if (auto p = flag("--manifest")) rc.manifest = *p;
  if (auto p = flag("--ckpt")) rc.ckpt = *p;
  if (auto p = flag("--seg-ckpt")) rc.seg_ckpt = *p;
  if (auto p = flag("--input")) rc.input = *p;
  if (auto p = flag("--out")) rc.out = *p;
  if (auto p = flag("--count")) rc.count = parse_count("--count", *p);
  if (auto p = flag("--folds")) rc.folds = parse_count("--folds", *p);
  if (auto p = flag("--levels")) rc.enhance_levels = parse_number<int>("--levels", *p);
  if (auto p = flag("--epochs")) rc.train.epochs = parse_count("--epochs", *p);
  if (auto p = flag("--lr")) rc.train.learning_rate = parse_number<double>("--lr", *p);
  if (auto p = flag("--batch")) rc.train.batch_size = parse_count("--batch", *p);
  if (auto p = flag("--momentum")) rc.train.momentum = parse_number<double>("--momentum", *p);
  if (auto p = flag("--stop-at")) rc.train.stop_at_train_metric = parse_number<double>("--stop-at", *p);
  if (auto p = flag("--infected-fraction")) {
    rc.phantom.infected_fraction = parse_number<double>("--infected-fraction", *p);
  }
  if (switches.count("--attention")) rc.train.attention = true;

  // one seed drives everything
  rc.train.seed = rc.seed;
  rc.train.precision = rc.precision;
  rc.phantom.seed = rc.seed;
  if (rc.command == "synth") rc.phantom.validate();
  return rc;
}

std::string usage_text() {
  return "usage: covnet <command> [flags]\n"
         "\n"
         "commands:\n"
         "  synth      generate phantom images, masks and a manifest   --out DIR [--count N --size HxW]\n"
         "  enhance    wavelet enhancement                              --input IMG --out PNG | --manifest M --out DIR\n"
         "  train-cls  train the classifier                             --manifest M --ckpt PATH\n"
         "  train-seg  train the segmenter                              --manifest M --ckpt PATH\n"
         "  cv         k-fold cross-validation                          --manifest M --out REPORT [--task cls|seg]\n"
         "  eval-cls   classification report and PR curve               --manifest M --ckpt PATH --out REPORT\n"
         "  eval-seg   segmentation report and PR curve                 --manifest M --ckpt PATH --out REPORT\n"
         "  predict    classify, then segment if infected               --ckpt CLS --seg-ckpt SEG --input IMG --out MASK\n"
         "  features   2-D PCA of the classifier features               --manifest M --ckpt PATH --out CSV\n"
         "  gradcheck  finite-difference gradient checks\n"
         "\n"
         "common flags:\n"
         "  --config PATH  --seed N  --precision f32|f64  --size HxW  --attention\n"
         "  --arch cov-ctnet|cov-raseg|segnet  --widths a,b,c,d  --epochs N  --lr X  --batch N\n"
         "  --momentum X  --stop-at X  --folds N  --count N  --infected-fraction X  --levels N\n"
         "\n"
         "settings resolve as defaults < --config JSON < flags.\n"
         "exit codes: 0 ok, 1 usage, 2 data or checkpoint, 3 numerical failure.\n";
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  if (!args.empty() && (args[0] == "help" || args[0] == "--help" || args[0] == "-h")) {
    out << usage_text();
    return kExitOk;
  }
  try {
    const RunConfig rc = resolve_run_config(args);
    if (rc.command != "synth" && !rc.out.empty()) make_parent(rc.out);
    if (rc.command.starts_with("train") && !rc.ckpt.empty()) make_parent(rc.ckpt);
    if (rc.command == "synth") return cmd_synth(rc, out);
    if (rc.command == "enhance") return cmd_enhance(rc, out);
    if (rc.command == "gradcheck") return cmd_gradcheck(rc, out);
    return rc.precision == "f64" ? run_typed<double>(rc, out) : run_typed<float>(rc, out);
  } catch (const UsageError& e) {
    if (args.empty()) err << usage_text();
    err << "error: usage: " << one_line(e.what()) << "\n";
    return kExitUsage;
  } catch (const ParameterError& e) {
    err << "error: usage: " << one_line(e.what()) << "\n";
    return kExitUsage;
  } catch (const NumericalError& e) {
    err << "error: numerical: " << one_line(e.what()) << "\n";
    return kExitNumerical;
  } catch (const CheckpointError& e) {
    err << "error: checkpoint: " << one_line(e.what()) << "\n";
    return kExitData;
  } catch (const Error& e) {
    err << "error: data: " << one_line(e.what()) << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    err << "error: data: " << one_line(e.what()) << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: internal: " << one_line(e.what()) << "\n";
    return kExitData;
  }
}

}  // namespace covnet
