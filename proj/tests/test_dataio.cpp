#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "covnet/dataio.hpp"
#include "covnet/errors.hpp"
#include "oracle.hpp"

using namespace covnet;
using T64 = Tensor<double>;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::path(testing::TempDir()) / "covnet_dataio" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string data_error(const std::string& path) {
  try {
    parse_manifest(path);
  } catch (const DataError& e) {
    return e.what();
  }
  return "accepted";
}

// Half-pixel-centre bilinear sample of a plane, written out per tap.
double bilinear_at(const T64& img, std::size_t h, std::size_t w, double y, double x) {
  y = std::min(std::max(y, 0.0), h - 1.0);
  x = std::min(std::max(x, 0.0), w - 1.0);
  const std::size_t y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x);
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = y - y0, fx = x - x0;
  return img[y0 * w + x0] * (1 - fy) * (1 - fx) + img[y0 * w + x1] * (1 - fy) * fx +
         img[y1 * w + x0] * fy * (1 - fx) + img[y1 * w + x1] * fy * fx;
}

}  // namespace

TEST(Resize, CheckerboardAveragesToHalf) {
  T64 board({4, 4});
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) board[r * 4 + c] = (r + c) % 2;
  EXPECT_EQ(resize_bilinear(board, 2, 2), T64({2, 2}, 0.5));
}

TEST(Resize, HandEvaluatedRamps) {
  // columns 0..3: output centres land on source columns 0.5 and 2.5
  T64 ramp({4, 4});
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) ramp[r * 4 + c] = static_cast<double>(c);
  EXPECT_EQ(resize_bilinear(ramp, 2, 2), T64({2, 2}, {0.5, 2.5, 0.5, 2.5}));

  // upsampling: source coordinates -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
  const T64 up = resize_bilinear(T64({2, 2}, {0, 1, 2, 3}), 4, 4);
  EXPECT_EQ(up, T64({4, 4}, {0, 0.25, 0.75, 1, 0.5, 0.75, 1.25, 1.5, 1.5, 1.75, 2.25, 2.5, 2, 2.25, 2.75, 3}));
}

TEST(Resize, MatchesTapOracle) {
  std::mt19937_64 gen(1);
  std::uniform_int_distribution<std::size_t> ext(1, 13);
  std::uniform_real_distribution<double> u(0, 1);
  for (int rep = 0; rep < 30; ++rep) {
    const std::size_t h = ext(gen), w = ext(gen), oh = ext(gen), ow = ext(gen);
    T64 img({2, h, w});
    for (auto& v : img.data()) v = u(gen);
    const T64 out = resize_bilinear(img, oh, ow);
    ASSERT_EQ(out.shape(), (Shape{2, oh, ow}));
    for (std::size_t c = 0; c < 2; ++c) {
      T64 plane({h, w});
      std::copy_n(img.data().begin() + c * h * w, h * w, plane.data().begin());
      for (std::size_t r = 0; r < oh; ++r)
        for (std::size_t q = 0; q < ow; ++q) {
          const double y = (r + 0.5) * h / oh - 0.5, x = (q + 0.5) * w / ow - 0.5;
          EXPECT_NEAR(out[(c * oh + r) * ow + q], bilinear_at(plane, h, w, y, x), 1e-12);
        }
    }
  }
}

TEST(Resize, NearestKeepsMasksBinary) {
  std::mt19937_64 gen(2);
  for (int rep = 0; rep < 20; ++rep) {
    const Mask m = oracle::random_mask(5 + rep, 9 + rep % 4, gen);
    const Mask r = resize_nearest(m, 3 + 2 * rep, 17);
    for (auto v : r.values) EXPECT_TRUE(v == 0 || v == 1);
  }
  Mask small(2, 2);
  small.at(0, 1) = 1;
  const Mask big = resize_nearest(small, 4, 4);
  Mask expect(4, 4);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 2; c < 4; ++c) expect.at(r, c) = 1;
  EXPECT_EQ(big, expect);
}

TEST(Convert, LuminanceAndDepth) {
  RawImage rgb{1, 2, 3, 255, {255, 0, 0, 0, 0, 255}};
  const T64 g = to_tensor(rgb, true);
  ASSERT_EQ(g.shape(), (Shape{1, 1, 2}));
  EXPECT_DOUBLE_EQ(g[0], 0.299);
  EXPECT_DOUBLE_EQ(g[1], 0.114);
  EXPECT_EQ(to_tensor(rgb, false).shape(), (Shape{3, 1, 2}));

  RawImage deep{1, 2, 1, 65535, {65535, 0}};
  EXPECT_EQ(to_tensor(deep, true), T64({1, 1, 2}, {1, 0}));
}

TEST(Images, PngAndPgmRoundTrip) {
  const fs::path dir = scratch("png");
  T64 img({3, 5});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i) / 14;
  write_png((dir / "a.png").string(), img);
  const RawImage raw = read_image((dir / "a.png").string());
  EXPECT_EQ(raw.rows, 3u);
  EXPECT_EQ(raw.cols, 5u);
  EXPECT_EQ(raw.channels, 1u);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_EQ(raw.samples[i], std::lround(img[i] * 255));
  // re-reading is bit-identical
  EXPECT_EQ(to_tensor(read_image((dir / "a.png").string()), true), to_tensor(raw, true));

  // 16-bit binary PGM, big-endian samples
  std::string pgm = "P5\n2 1\n65535\n";
  pgm += std::string("\xff\xff\x80\x00", 4);
  write_text(dir / "b.pgm", pgm);
  const RawImage p = read_image((dir / "b.pgm").string());
  EXPECT_EQ(p.maxval, 65535u);
  EXPECT_EQ(p.samples, (std::vector<std::uint16_t>{65535, 32768}));

  write_text(dir / "c.txt", "not an image");
  EXPECT_THROW(read_image((dir / "c.txt").string()), DataError);
  EXPECT_THROW(read_image((dir / "missing.png").string()), DataError);
}

TEST(Images, MaskPngRoundTrip) {
  const fs::path dir = scratch("mask");
  std::mt19937_64 gen(3);
  const Mask m = oracle::random_mask(7, 11, gen);
  write_mask_png((dir / "m.png").string(), m);
  EXPECT_EQ(read_mask((dir / "m.png").string()), m);
}

TEST(Manifest, Parsing) {
  const fs::path dir = scratch("manifest");
  write_text(dir / "empty.csv", "image,label,mask\n");
  EXPECT_TRUE(parse_manifest((dir / "empty.csv").string()).empty());

  write_text(dir / "three.csv",
             "image,label,mask\n"
             "a.png,healthy,\n"
             "sub/b.png,infected,masks/b.png\n"
             "c.png,,masks/c.png\n");
  const auto recs = parse_manifest((dir / "three.csv").string());
  ASSERT_EQ(recs.size(), 3u);
  EXPECT_EQ(recs[0].image_path, "a.png");
  EXPECT_EQ(recs[0].label, kHealthy);
  EXPECT_FALSE(recs[0].mask_path);
  EXPECT_EQ(recs[1].image_path, "sub/b.png");
  EXPECT_EQ(recs[1].label, kInfected);
  EXPECT_EQ(recs[1].mask_path, "masks/b.png");
  EXPECT_FALSE(recs[2].label);
  EXPECT_EQ(recs[2].mask_path, "masks/c.png");
  EXPECT_EQ(recs[1].resolve(recs[1].image_path), dir / "sub/b.png");

  write_text(dir / "dup.csv", "image,label,mask\na.png,healthy,\na.png,infected,\n");
  const std::string dup = data_error((dir / "dup.csv").string());
  EXPECT_NE(dup.find("line 3"), std::string::npos) << dup;
  EXPECT_NE(dup.find("duplicate"), std::string::npos) << dup;

  write_text(dir / "noheader.csv", "a.png,healthy,\n");
  EXPECT_NE(data_error((dir / "noheader.csv").string()), "accepted");
  write_text(dir / "blank.csv", "");
  EXPECT_NE(data_error((dir / "blank.csv").string()), "accepted");
  write_text(dir / "label.csv", "image,label,mask\na.png,sick,\n");
  EXPECT_NE(data_error((dir / "label.csv").string()).find("unknown label"), std::string::npos);
  write_text(dir / "neither.csv", "image,label,mask\na.png,,\n");
  EXPECT_NE(data_error((dir / "neither.csv").string()).find("neither"), std::string::npos);
}

TEST(Manifest, WriteThenParse) {
  const fs::path dir = scratch("manifest_rt");
  std::vector<SampleRecord> recs(2);
  recs[0].image_path = "x.png";
  recs[0].label = kInfected;
  recs[0].mask_path = "mx.png";
  recs[0].split = "train";
  recs[1].image_path = "y.png";
  recs[1].label = kHealthy;
  recs[1].split = "test";
  write_manifest((dir / "m.csv").string(), recs);
  const auto back = parse_manifest((dir / "m.csv").string());
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].split, "train");
  EXPECT_EQ(back[0].mask_path, "mx.png");
  EXPECT_EQ(back[1].label, kHealthy);
  EXPECT_EQ(back[1].split, "test");
}

TEST(LoadSample, NormalisesAndChecksMaskSize) {
  const fs::path dir = scratch("load");
  write_png((dir / "flat.png").string(), T64({6, 6}, 0.4));
  T64 grad({6, 6});
  for (std::size_t i = 0; i < 36; ++i) grad[i] = 0.2 + 0.5 * static_cast<double>(i) / 35;
  write_png((dir / "grad.png").string(), grad);
  write_mask_png((dir / "m6.png").string(), Mask(6, 6, 1));
  write_mask_png((dir / "m5.png").string(), Mask(5, 6));

  SampleRecord flat;
  flat.image_path = "flat.png";
  flat.base_dir = dir;
  flat.label = kHealthy;
  const Preprocess pre{4, 4, true, false};
  EXPECT_EQ(load_sample(flat, pre).image, T64({1, 4, 4}));

  SampleRecord g = flat;
  g.image_path = "grad.png";
  g.mask_path = "m6.png";
  const auto s = load_sample(g, pre);
  const auto [lo, hi] = std::minmax_element(s.image.data().begin(), s.image.data().end());
  EXPECT_EQ(*lo, 0.0);
  EXPECT_EQ(*hi, 1.0);
  ASSERT_TRUE(s.mask);
  EXPECT_EQ(*s.mask, Mask(4, 4, 1));
  EXPECT_EQ(load_sample(g, pre).image, s.image);

  g.mask_path = "m5.png";
  EXPECT_THROW(load_sample(g, pre), DataError);
  g.image_path = "nope.png";
  EXPECT_THROW(load_sample(g, pre), DataError);
}

TEST(Phantom, LabelsSpreadEvenly) {
  PhantomConfig cfg;
  std::size_t infected = 0;
  for (std::size_t i = 0; i < 20; ++i) infected += phantom_label(cfg, i) == kInfected;
  EXPECT_EQ(infected, 10u);
  cfg.infected_fraction = 0.25;
  infected = 0;
  for (std::size_t i = 0; i < 40; ++i) infected += phantom_label(cfg, i) == kInfected;
  EXPECT_EQ(infected, 10u);
}

TEST(Phantom, MaskIsHalfPeakOfLesionField) {
  PhantomConfig cfg;
  cfg.seed = 17;
  for (std::size_t i = 0; i < 12; ++i) {
    const Phantom ph = make_phantom(cfg, i, kInfected);
    ASSERT_FALSE(ph.blobs.empty());
    ASSERT_LE(ph.blobs.size(), cfg.max_blobs);
    std::vector<double> field(cfg.rows * cfg.cols, 0);
    double peak = 0;
    for (std::size_t r = 0; r < cfg.rows; ++r)
      for (std::size_t c = 0; c < cfg.cols; ++c) {
        double f = 0;
        bool near = false;
        for (const auto& b : ph.blobs) {
          const double dr = r - b.row, dc = c - b.col;
          const double a = (dc * std::cos(b.angle) + dr * std::sin(b.angle)) / b.sigma_major;
          const double d = (-dc * std::sin(b.angle) + dr * std::cos(b.angle)) / b.sigma_minor;
          f += std::exp(-0.5 * (a * a + d * d));
          near = near || a * a + d * d <= 4.0;
        }
        field[r * cfg.cols + c] = f;
        peak = std::max(peak, f);
        // every mask pixel sits inside some lesion's 2-sigma ellipse
        if (ph.mask.at(r, c)) {
          EXPECT_TRUE(near) << i << " " << r << "," << c;
        }
      }
    Mask expect(cfg.rows, cfg.cols);
    for (std::size_t k = 0; k < field.size(); ++k) expect.values[k] = field[k] > 0.5 * peak;
    EXPECT_EQ(ph.mask, expect);
    const double frac = static_cast<double>(ph.mask.count()) / ph.mask.size();
    EXPECT_GE(frac, cfg.min_foreground);
    EXPECT_LE(frac, cfg.max_foreground);
    for (double v : ph.image.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Phantom, HealthyMasksEmptyAndIndexIndependent) {
  PhantomConfig cfg;
  cfg.seed = 5;
  for (std::size_t i = 0; i < 6; ++i) {
    const Phantom h = make_phantom(cfg, i, kHealthy);
    EXPECT_EQ(h.mask.count(), 0u);
    EXPECT_TRUE(h.blobs.empty());
  }
  EXPECT_EQ(make_phantom(cfg, 3, kInfected).image, make_phantom(cfg, 3, kInfected).image);
  EXPECT_NE(make_phantom(cfg, 3, kInfected).image, make_phantom(cfg, 4, kInfected).image);
  PhantomConfig other = cfg;
  other.seed = 6;
  EXPECT_NE(make_phantom(cfg, 3, kInfected).image, make_phantom(other, 3, kInfected).image);
}

TEST(Phantom, GenerationIsByteIdentical) {
  PhantomConfig cfg;
  cfg.rows = cfg.cols = 32;
  cfg.seed = 9;
  const fs::path a = scratch("gen_a"), b = scratch("gen_b");
  const auto ra = generate_phantoms(cfg, 6, a.string());
  generate_phantoms(cfg, 6, b.string());
  ASSERT_EQ(ra.size(), 6u);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(b / fs::relative(e.path(), a))) << e.path();
  }
  EXPECT_EQ(files, 6u * 2 + 2);
  const auto parsed = parse_manifest((a / "manifest.csv").string());
  ASSERT_EQ(parsed.size(), 6u);
  for (const auto& r : parsed) {
    const Mask m = read_mask(r.resolve(*r.mask_path).string());
    if (*r.label == kHealthy) EXPECT_EQ(m.count(), 0u);
    else EXPECT_GT(m.count(), 0u);
  }
}

TEST(Phantom, BadConfigAndUnwritableDirectory) {
  PhantomConfig cfg;
  cfg.max_foreground = 0.5;
  EXPECT_THROW(cfg.validate(), ParameterError);
  cfg = PhantomConfig{};
  cfg.min_foreground = 0;
  EXPECT_THROW(cfg.validate(), ParameterError);
  cfg = PhantomConfig{};
  cfg.rows = 8;
  EXPECT_THROW(cfg.validate(), ParameterError);

  const fs::path dir = scratch("unwritable");
  write_text(dir / "file", "x");
  EXPECT_THROW(generate_phantoms(PhantomConfig{}, 2, (dir / "file" / "out").string()), DataError);
}
