// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unistd.h>

#include "covnet/checkpoint.hpp"
#include "covnet/cli.hpp"
#include "covnet/dataio.hpp"
#include "covnet/gradcheck.hpp"
#include "covnet/metrics.hpp"
#include "covnet/ops.hpp"
#include "covnet/pipeline.hpp"
#include "covnet/trainer.hpp"
#include "covnet/wavelet.hpp"
#include "oracle.hpp"

using namespace covnet;
namespace fs = std::filesystem;
using T64 = Tensor<double>;

namespace {

struct Verdict {
  bool pass = true;
  std::string detail;

  void check(bool ok, const std::string& what) {
    if (!ok && pass) detail = what;
    pass = pass && ok;
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = dispatch(args, out, err);
  if (code != 0) std::cerr << "  covnet " << args[0] << ": " << err.str();
  return code;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("covnet_accept_" + std::to_string(::getpid())) / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

Dataset<float> phantom_set(const PhantomConfig& cfg, std::size_t n) {
  Dataset<float> d;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = phantom_label(cfg, i);
    Phantom ph = make_phantom(cfg, i, label);
    d.ids.push_back(std::to_string(i));
    d.images.push_back(minmax_normalize(ph.image).cast<float>().reshaped({1, cfg.rows, cfg.cols}));
    d.labels.push_back(label);
    d.masks.push_back(ph.mask);
  }
  return d;
}

// ---------------------------------------------------------------------------

Verdict gradients() {
  Verdict v;
  const std::set<std::string> wanted = {"conv",     "batchnorm-train", "relu",     "maxpool",
                                        "avgpool",  "maxunpool",       "avgunpool", "fc",
                                        "residual", "softmax+cross-entropy", "weighted-cross-entropy",
                                        "cov-raseg-graph"};
  std::set<std::string> seen;
  double worst = 0;
  for (const auto& r : run_gradcheck_suite(1, 100)) {
    seen.insert(r.kind);
    worst = std::max(worst, r.max_relative_error);
    v.check(r.passed(), r.kind + " max rel err " + fmt("%.2e", r.max_relative_error));
    if (r.kind == "cov-raseg-graph") v.check(r.checked >= 100, "graph check sampled only " + std::to_string(r.checked));
  }
  for (const auto& k : wanted) v.check(seen.count(k) == 1, "no check for " + k);
  if (v.pass) v.detail = std::to_string(seen.size()) + " kinds, worst rel err " + fmt("%.2e", worst);
  return v;
}

Verdict wavelets() {
  Verdict v;
  std::mt19937_64 gen(2);
  std::uniform_int_distribution<std::size_t> ext(1, 64);
  std::uniform_real_distribution<float> u(0, 1);
  double worst_rec = 0, worst_energy = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t h = 2 * ((ext(gen) + 1) / 2), w = 2 * ((ext(gen) + 1) / 2);
    Tensor<float> x({h, w});
    for (auto& p : x.data()) p = u(gen);
    const auto bands = dwt2_haar(x);
    const Tensor<float> back = idwt2_haar(bands);
    double e_in = 0, e_out = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      worst_rec = std::max(worst_rec, static_cast<double>(std::abs(back[i] - x[i])));
      e_in += static_cast<double>(x[i]) * x[i];
    }
    for (const auto* b : {&bands.ll, &bands.lh, &bands.hl, &bands.hh})
      for (float c : b->data()) e_out += static_cast<double>(c) * c;
    // energy at f64 on the same image isolates the transform from f32 rounding
    const auto b64 = dwt2_haar(x.cast<double>());
    double e64 = 0;
    for (const auto* b : {&b64.ll, &b64.lh, &b64.hl, &b64.hh})
      for (double c : b->data()) e64 += c * c;
    worst_energy = std::max(worst_energy, std::abs(e64 - e_in) / e_in);
  }
  v.check(worst_rec < 1e-5, "reconstruction error " + fmt("%.2e", worst_rec));
  v.check(worst_energy < 1e-6, "energy drift " + fmt("%.2e", worst_energy));

  // one 2x2 block [[a,b],[c,d]]: LL=(a+b+c+d)/2, LH=(a+b-c-d)/2, HL=(a-b+c-d)/2, HH=(a-b-c+d)/2
  const auto s = dwt2_haar(T64({2, 2}, {1, 2, 3, 4}));
  v.check(s.ll[0] == 5 && s.lh[0] == -2 && s.hl[0] == -1 && s.hh[0] == 0, "2x2 subbands differ");
  if (v.pass) {
    v.detail = "max recon err " + fmt("%.1e", worst_rec) + ", energy drift " + fmt("%.1e", worst_energy);
  }
  return v;
}

Verdict oracles() {
  Verdict v;
  std::mt19937_64 gen(3);
  std::uniform_int_distribution<std::size_t> small(1, 3), ext(3, 12), half(1, 8);
  // integer-valued data keeps every partial sum exact, so == is meaningful
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t kh = small(gen), kw = small(gen), sh = small(gen), sw = small(gen);
    const Padding pad{small(gen) - 1, small(gen) - 1, small(gen) - 1, small(gen) - 1};
    const T64 x = oracle::integer_tensor({2, small(gen), std::max(kh, ext(gen)), std::max(kw, ext(gen))}, gen);
    const T64 w = oracle::integer_tensor({small(gen), x.dim(1), kh, kw}, gen);
    const T64 b = oracle::integer_tensor({w.dim(0)}, gen);
    const T64 got = conv2d(x, ConvParams<double>{w, b, {sh, sw, pad}});
    v.check(got == oracle::conv(x, w, b, sh, sw, pad.top, pad.left, pad.bottom, pad.right),
            "conv case " + std::to_string(rep));
  }
  for (int rep = 0; rep < 50; ++rep) {
    const T64 x = oracle::integer_tensor({2, small(gen), 2 * half(gen), 2 * half(gen)}, gen, -3, 3);
    const auto ref = oracle::pool(x);
    const auto mp = max_pool2d(x);
    v.check(mp.output == ref.max, "max pool case " + std::to_string(rep));
    v.check(avg_pool2d(x) == ref.mean, "avg pool case " + std::to_string(rep));
    v.check(max_unpool2d(mp.output, mp.indices, x.shape()) == oracle::unpool_max(x),
            "max unpool case " + std::to_string(rep));
    v.check(avg_unpool2d(ref.mean, x.shape()) == oracle::replicate(ref.mean), "avg unpool case " + std::to_string(rep));
  }

  std::uniform_int_distribution<std::size_t> side(2, 64);
  std::uniform_real_distribution<double> density(0.05, 0.6);
  for (int rep = 0; rep < 50; ++rep) {
    const std::string tag = " case " + std::to_string(rep);
    // classification metrics from random label vectors
    std::vector<int> pred, truth;
    std::bernoulli_distribution pp(density(gen)), tp(density(gen));
    for (std::size_t i = 0, n = 10 + side(gen); i < n; ++i) {
      pred.push_back(pp(gen));
      truth.push_back(tp(gen));
    }
    const auto t = oracle::tally(pred, truth, 1);
    const auto m = classification_metrics(confusion(pred, truth, 1));
    const double TP = t.tp, TN = t.tn, FP = t.fp, FN = t.fn;
    const double acc = (TP + TN) / (TP + TN + FP + FN);
    const double P = TP + FP > 0 ? TP / (TP + FP) : 0, R = TP + FN > 0 ? TP / (TP + FN) : 0;
    const double S = TN + FP > 0 ? TN / (TN + FP) : 0;
    const double F = P + R > 0 ? 2 * P * R / (P + R) : 0;
    const double den = (TP + FP) * (TP + FN) * (TN + FP) * (TN + FN);
    const double mcc = den > 0 ? (TP * TN - FP * FN) / std::sqrt(den) : 0;
    v.check(m.accuracy == acc && m.precision == P && m.recall == R && m.specificity == S && m.f_score == F &&
                m.mcc == mcc,
            "classification metrics" + tag);

    // region and boundary metrics from random blobby masks
    const std::size_t rows = side(gen), cols = side(gen);
    std::vector<Mask> preds, gts;
    std::vector<ImageSegmentation> evals;
    const std::size_t images = 1 + rep % 4;
    for (std::size_t k = 0; k < images; ++k) {
      preds.push_back(oracle::random_blobs(rows, cols, gen));
      gts.push_back(oracle::random_blobs(rows, cols, gen));
      evals.push_back(evaluate_image(preds.back(), gts.back()));
    }
    const double tol = static_cast<double>(default_bf_tolerance(rows, cols));
    std::array<oracle::Tally, 2> pooled{};
    std::array<double, 2> bf_sum{};
    for (std::size_t k = 0; k < images; ++k) {
      const auto rm = region_metrics(preds[k], gts[k]);
      const auto bs = bf_score(preds[k], gts[k]);
      for (int c : {0, 1}) {
        const auto ct = oracle::tally(preds[k], gts[k], c);
        pooled[c].tp += ct.tp;
        pooled[c].fp += ct.fp;
        pooled[c].fn += ct.fn;
        const double bf = oracle::bf(preds[k], gts[k], c, tol);
        bf_sum[c] += bf;
        v.check(bs[c].f1 == bf, "bf score" + tag);
        if (ct.tp + ct.fp + ct.fn == 0) continue;
        const double iou = static_cast<double>(ct.tp) / static_cast<double>(ct.tp + ct.fp + ct.fn);
        const double dice = static_cast<double>(2 * ct.tp) / static_cast<double>(2 * ct.tp + ct.fp + ct.fn);
        v.check(rm[c].iou == iou && rm[c].dice == dice, "iou/dice" + tag);
        v.check(std::abs(rm[c].dice - 2 * rm[c].iou / (1 + rm[c].iou)) <= 4e-16, "dice-iou identity" + tag);
      }
    }
    const auto a = aggregate_segmentation(evals);
    const double total = static_cast<double>(images * rows * cols);
    v.check(a.global_accuracy == static_cast<double>(pooled[0].tp + pooled[1].tp) / total, "global accuracy" + tag);
    std::array<double, 2> acc_c{}, iou_c{}, gt_c{};
    bool defined = true;
    for (int c : {0, 1}) {
      const auto& p = pooled[c];
      defined = defined && p.tp + p.fn > 0;
      gt_c[c] = static_cast<double>(p.tp + p.fn);
      acc_c[c] = p.tp + p.fn ? static_cast<double>(p.tp) / static_cast<double>(p.tp + p.fn) : 1.0;
      iou_c[c] = p.tp + p.fp + p.fn ? static_cast<double>(p.tp) / static_cast<double>(p.tp + p.fp + p.fn) : 1.0;
    }
    v.check(a.mean_accuracy == (acc_c[0] + acc_c[1]) / 2, "mean accuracy" + tag);
    v.check(a.mean_iou == (iou_c[0] + iou_c[1]) / 2, "mean iou" + tag);
    if (defined) {
      v.check(a.weighted_iou == (gt_c[0] * iou_c[0] + gt_c[1] * iou_c[1]) / (gt_c[0] + gt_c[1]), "weighted iou" + tag);
    }
    v.check(a.mean_bf == (bf_sum[0] / images + bf_sum[1] / images) / 2, "mean bf" + tag);
  }
  if (v.pass) v.detail = "50 cases each of conv, pooling, unpooling and metrics";
  return v;
}

Verdict classifier_overfit() {
  Verdict v;
  PhantomConfig pc;
  pc.rows = pc.cols = 82;
  pc.seed = 11;
  const Dataset<float> data = phantom_set(pc, 20);
  const auto infected = std::count(data.labels.begin(), data.labels.end(), kInfected);
  v.check(infected == 10, "expected 10 infected phantoms, got " + std::to_string(infected));
  TrainConfig tc;
  tc.epochs = 200;
  tc.seed = 5;
  tc.stop_at_train_metric = 1.0;
  const auto r = train_classifier(data, nullptr, cov_ctnet_config(), tc);
  const auto& last = r.history.epochs.back();
  v.check(last.train_metric && *last.train_metric == 1.0,
          "training accuracy " + fmt("%.3f", last.train_metric.value_or(0)) + " after 200 epochs");
  if (v.pass) v.detail = "100% training accuracy at epoch " + std::to_string(last.epoch);
  return v;
}

Verdict segmenter_overfit() {
  Verdict v;
  PhantomConfig pc;
  pc.rows = pc.cols = 64;
  pc.seed = 11;
  pc.infected_fraction = 1.0;
  const Dataset<float> data = phantom_set(pc, 8);
  TrainConfig tc;
  tc.epochs = 300;
  tc.seed = 5;
  tc.stop_at_train_metric = 0.95;
  const auto ra = train_segmenter(data, nullptr, cov_raseg_config(64, 64), tc);
  const auto& last = ra.history.epochs.back();
  v.check(*last.train_metric >= 0.95, "CoV-RASeg training Dice " + fmt("%.3f", *last.train_metric));
  const auto sn = train_segmenter(data, nullptr, segnet_config(64, 64), tc);
  const auto& sn_last = sn.history.epochs.back();
  v.check(std::isfinite(sn_last.train_loss), "SegNet run did not finish");
  if (v.pass) {
    v.detail = "CoV-RASeg Dice " + fmt("%.3f", *last.train_metric) + " at epoch " + std::to_string(last.epoch) +
               "; SegNet Dice " + fmt("%.3f", *sn_last.train_metric) + " at epoch " + std::to_string(sn_last.epoch);
  }
  return v;
}

double foreground_recall(const std::vector<Mask>& pred, const std::vector<Mask>& truth) {
  std::uint64_t hit = 0, all = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    for (std::size_t p = 0; p < pred[i].size(); ++p) {
      if (!truth[i].values[p]) continue;
      ++all;
      hit += pred[i].values[p];
    }
  return all ? static_cast<double>(hit) / static_cast<double>(all) : 0;
}

Verdict attention_effect() {
  Verdict v;
  PhantomConfig pc;
  pc.rows = pc.cols = 64;
  pc.infected_fraction = 1.0;
  pc.max_foreground = 0.05;
  ArchConfig arch = cov_raseg_config(64, 64);
  arch.widths = {8, 16, 32, 64};
  int wins = 0;
  std::string runs;
  for (std::uint64_t seed : {1, 2, 3}) {
    pc.seed = 100 + seed;
    const Dataset<float> train = phantom_set(pc, 16);
    pc.seed = 200 + seed;
    const Dataset<float> test = phantom_set(pc, 8);
    std::uint64_t fg = 0, px = 0;
    for (const auto& m : train.masks) {
      fg += m.count();
      px += m.size();
    }
    v.check(fg * 20 <= px, "training foreground above 5%");
    TrainConfig tc;
    tc.epochs = 20;
    tc.seed = seed;
    const auto plain = train_segmenter(train, nullptr, arch, tc);
    tc.attention = true;
    const auto weighted = train_segmenter(train, nullptr, arch, tc);
    const double r0 = foreground_recall(predict_masks(plain.model, test), test.masks);
    const double r1 = foreground_recall(predict_masks(weighted.model, test), test.masks);
    wins += r1 >= r0;
    runs += (runs.empty() ? "" : ", ") + fmt("%.3f", r1) + " vs " + fmt("%.3f", r0);
  }
  v.check(wins >= 2, "attention recall higher in only " + std::to_string(wins) + " of 3 seeds (" + runs + ")");
  if (v.pass) v.detail = "weighted vs plain recall: " + runs;
  return v;
}

Verdict statistics() {
  Verdict v;
  const Interval w = wilson_interval(50, 100);
  v.check(std::abs(w.lower - 0.404) <= 0.001 && std::abs(w.upper - 0.596) <= 0.001,
          "wilson 50/100 = [" + fmt("%.4f", w.lower) + ", " + fmt("%.4f", w.upper) + "]");

  std::vector<double> scores;
  std::vector<int> labels;
  for (int i = 0; i < 40; ++i) {
    labels.push_back(i % 2);
    scores.push_back(i % 2 ? 0.6 + i / 100.0 : 0.1 + i / 100.0);
  }
  v.check(pr_curve_auc(scores, labels).auc == 1.0, "separated PR-AUC below 1");
  const Interval ci = bootstrap_auc_ci(scores, labels, 7);
  v.check(ci.lower == 1.0 && ci.upper == 1.0, "bootstrap CI of perfect scores not [1,1]");

  double lo = 1, hi = 0;
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    std::mt19937_64 gen(1000 + trial);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<double> s;
    std::vector<int> l;
    for (int i = 0; i < 200; ++i) {
      s.push_back(u(gen));
      l.push_back(i % 2);
    }
    const double auc = pr_curve_auc(s, l).auc;
    lo = std::min(lo, auc);
    hi = std::max(hi, auc);
  }
  v.check(lo >= 0.35 && hi <= 0.65, "random-score AUC range [" + fmt("%.3f", lo) + ", " + fmt("%.3f", hi) + "]");
  if (v.pass) {
    v.detail = "wilson [" + fmt("%.4f", w.lower) + ", " + fmt("%.4f", w.upper) + "], random AUC in [" +
               fmt("%.3f", lo) + ", " + fmt("%.3f", hi) + "]";
  }
  return v;
}

Verdict reproducibility() {
  Verdict v;
  const fs::path d = scratch_dir("repro");
  const std::string data = (d / "data").string(), m = (d / "data/manifest.csv").string();
  const std::vector<std::string> small = {"--size", "32x32", "--widths", "4,8", "--epochs", "2", "--seed", "9"};
  const auto with = [&](std::vector<std::string> a) {
    a.insert(a.end(), small.begin(), small.end());
    return a;
  };
  const std::vector<std::string> outputs = {"cls.ckpt",     "cls.ckpt.history.csv", "seg.ckpt", "seg.ckpt.history.csv",
                                            "cls.json",     "cls.csv",              "cls.pr.csv", "seg.json",
                                            "seg.csv",      "seg.pr.csv",           "mask.png",   "mask.png.json"};
  std::vector<std::string> first;
  for (int pass = 0; pass < 2; ++pass) {
    fs::remove_all(data);
    bool ok = cli({"synth", "--out", data, "--count", "16", "--size", "32x32", "--seed", "9"}) == 0;
    ok = ok && cli(with({"train-cls", "--manifest", m, "--ckpt", (d / "cls.ckpt").string()})) == 0;
    ok = ok && cli(with({"train-seg", "--manifest", m, "--ckpt", (d / "seg.ckpt").string()})) == 0;
    ok = ok && cli({"eval-cls", "--manifest", m, "--ckpt", (d / "cls.ckpt").string(), "--out", (d / "cls.json").string()}) == 0;
    ok = ok && cli({"eval-seg", "--manifest", m, "--ckpt", (d / "seg.ckpt").string(), "--out", (d / "seg.json").string()}) == 0;
    ok = ok && cli({"predict", "--ckpt", (d / "cls.ckpt").string(), "--seg-ckpt", (d / "seg.ckpt").string(), "--input",
                    (d / "data/images/phantom_0001.png").string(), "--out", (d / "mask.png").string()}) == 0;
    v.check(ok, "pipeline command failed");
    if (!ok) return v;
    for (std::size_t i = 0; i < outputs.size(); ++i) {
      const std::string bytes = slurp(d / outputs[i]);
      if (pass == 0) {
        first.push_back(bytes);
      } else {
        v.check(!bytes.empty() && bytes == first[i], outputs[i] + " differs between identical runs");
      }
    }
  }

  for (const char* name : {"cls.ckpt", "seg.ckpt"}) {
    const std::string bytes = slurp(d / name);
    v.check(checkpoint_bytes(parse_checkpoint<float>(bytes)) == bytes, std::string(name) + " save-load-save differs");
    v.check(checkpoint_bytes(parse_checkpoint<double>(bytes)) == bytes, std::string(name) + " f64 round trip differs");
  }
  const auto code_of = [](const std::string& bytes) -> int {
    try {
      parse_checkpoint<float>(bytes);
    } catch (const CheckpointError& e) {
      return static_cast<int>(e.code());
    }
    return -1;
  };
  std::string bytes = slurp(d / "cls.ckpt");
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  v.check(code_of(bad_magic) == static_cast<int>(CheckpointErrorCode::kBadMagic), "bad magic not flagged");
  for (std::size_t cut : {std::size_t{3}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    v.check(code_of(bytes.substr(0, cut)) == static_cast<int>(CheckpointErrorCode::kTruncated),
            "truncation at " + std::to_string(cut) + " not flagged");
  }
  if (v.pass) v.detail = std::to_string(outputs.size()) + " artifacts byte-identical; checkpoint errors coded";
  return v;
}

Verdict end_to_end() {
  Verdict v;
  const fs::path d = scratch_dir("e2e");
  const auto p = [&](const std::string& n) { return (d / n).string(); };
  bool ok = cli({"synth", "--out", p("cls"), "--count", "40", "--size", "64x64", "--seed", "21"}) == 0;
  ok = ok && cli({"synth", "--out", p("seg"), "--count", "144", "--size", "64x64", "--seed", "22",
                  "--infected-fraction", "1"}) == 0;
  // held-out phantoms come from a seed no training set used
  ok = ok && cli({"synth", "--out", p("held"), "--count", "6", "--size", "64x64", "--seed", "23"}) == 0;
  v.check(ok, "synth failed");
  if (!ok) return v;

  // the segmenter keeps every phantom for training except a small validation slice
  auto seg_rows = parse_manifest(p("seg/manifest.csv"));
  for (std::size_t i = 0; i < seg_rows.size(); ++i) seg_rows[i].split = i < 128 ? "train" : "val";
  write_manifest(p("seg/manifest.csv"), seg_rows);

  ok = cli({"train-cls", "--manifest", p("cls/manifest.csv"), "--ckpt", p("cls.ckpt"), "--size", "64x64",
            "--epochs", "80", "--seed", "21"}) == 0;
  ok = ok && cli({"train-seg", "--manifest", p("seg/manifest.csv"), "--ckpt", p("seg.ckpt"), "--size", "64x64",
                  "--widths", "8,16,32,64", "--lr", "0.01", "--epochs", "100", "--attention", "--seed", "22"}) == 0;
  v.check(ok, "training failed");
  if (!ok) return v;

  // first healthy and first infected held-out phantom
  const auto held = parse_manifest(p("held/manifest.csv"));
  std::string summary;
  for (int want : {kHealthy, kInfected}) {
    const auto rec = *std::find_if(held.begin(), held.end(), [&](const SampleRecord& r) { return *r.label == want; });
    const std::string out = p(std::string("pred_") + label_name(want) + ".png");
    if (cli({"predict", "--ckpt", p("cls.ckpt"), "--seg-ckpt", p("seg.ckpt"), "--input",
             rec.resolve(rec.image_path).string(), "--out", out}) != 0) {
      v.check(false, "predict failed");
      return v;
    }
    const Mask pred = read_mask(out);
    const Mask truth = read_mask(rec.resolve(*rec.mask_path).string());
    if (want == kHealthy) {
      v.check(pred.count() == 0, "healthy sample got " + std::to_string(pred.count()) + " mask pixels");
      summary += "healthy: " + std::to_string(pred.count()) + " mask pixels; ";
    } else {
      const double ds = region_metrics(pred, truth)[1].dice;
      v.check(ds >= 0.8, "infected sample Dice " + fmt("%.3f", ds) + " (needs 0.8)");
      summary += "infected: Dice " + fmt("%.3f", ds);
    }
  }
  if (v.pass) v.detail = summary;
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"gradient checks", gradients},
      {"wavelet transform", wavelets},
      {"oracle equivalence", oracles},
      {"classifier overfit", classifier_overfit},
      {"segmenter overfit", segmenter_overfit},
      {"attention effect", attention_effect},
      {"statistics", statistics},
      {"reproducibility and formats", reproducibility},
      {"two-stage end to end", end_to_end},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(n)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    failures += !v.pass;
    std::printf("criterion %d %-28s %s  %s  (%.1f s)\n", n, criteria[i].first.c_str(), v.pass ? "PASS" : "FAIL",
                v.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  fs::remove_all(fs::temp_directory_path() / ("covnet_accept_" + std::to_string(::getpid())));
  return failures == 0 ? 0 : 1;
}
