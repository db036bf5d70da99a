#include "covnet/dataio.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "covnet/wavelet.hpp"
#include "json.hpp"

namespace covnet {

namespace fs = std::filesystem;

const char* label_name(int label) {
  switch (label) {
    case kHealthy: return "healthy";
    case kInfected: return "infected";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// PNG / PGM

namespace {

thread_local char png_message[256];

void png_error_handler(png_structp png, png_const_charp msg) {
  std::snprintf(png_message, sizeof png_message, "%s", msg);
  longjmp(png_jmpbuf(png), 1);
}

void png_warning_handler(png_structp, png_const_charp) {}

RawImage read_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw DataError("cannot open image " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_handler,
                                           png_warning_handler);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    std::fclose(fp);
    throw DataError("libpng initialisation failed");
  }
  RawImage raw;
  std::vector<unsigned char> buf;
  std::vector<png_bytep> row_ptrs;
  const char* unsupported = nullptr;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw DataError(path + ": " + png_message);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) {
    unsupported = "palette images are not supported";
  } else if (depth != 8 && depth != 16) {
    unsupported = "unsupported bit depth (need 8 or 16)";
  }
  if (!unsupported) {
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_set_interlace_handling(png);
    png_read_update_info(png, info);
    raw.rows = png_get_image_height(png, info);
    raw.cols = png_get_image_width(png, info);
    raw.channels = (color & PNG_COLOR_MASK_COLOR) ? 3 : 1;
    raw.maxval = depth == 16 ? 65535 : 255;
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    buf.resize(rowbytes * raw.rows);
    row_ptrs.resize(raw.rows);
    for (std::size_t r = 0; r < raw.rows; ++r) row_ptrs[r] = buf.data() + r * rowbytes;
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  if (unsupported) throw DataError(path + ": " + unsupported);
  const std::size_t n = raw.rows * raw.cols * raw.channels;
  raw.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    raw.samples[i] = raw.maxval == 65535
                         ? static_cast<std::uint16_t>((buf[2 * i] << 8) | buf[2 * i + 1])
                         : buf[i];
  }
  return raw;
}

RawImage read_pgm(const std::string& path, const std::string& bytes) {
  std::size_t pos = 2;
  auto next_token = [&]() -> std::size_t {
    for (;;) {
      while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    std::size_t v = 0, digits = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
      if (++digits > 9) throw DataError(path + ": PGM header value too large");
    }
    if (digits == 0) throw DataError(path + ": malformed PGM header");
    return v;
  };
  RawImage raw;
  raw.cols = next_token();
  raw.rows = next_token();
  const std::size_t maxval = next_token();
  if (raw.rows == 0 || raw.cols == 0) throw DataError(path + ": empty PGM image");
  if (maxval == 0 || maxval > 65535) throw DataError(path + ": unsupported PGM maxval");
  ++pos;  // single whitespace before the raster
  raw.channels = 1;
  raw.maxval = static_cast<std::uint32_t>(maxval);
  const std::size_t width = maxval > 255 ? 2 : 1;
  const std::size_t n = raw.rows * raw.cols;
  if (bytes.size() < pos + n * width) throw DataError(path + ": truncated PGM raster");
  raw.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos + i * width);
    raw.samples[i] = width == 2 ? static_cast<std::uint16_t>((p[0] << 8) | p[1]) : p[0];
    if (raw.samples[i] > maxval) throw DataError(path + ": PGM sample exceeds maxval");
  }
  return raw;
}

}  // namespace

RawImage read_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path);
  char sig[8] = {};
  in.read(sig, 8);
  if (in.gcount() >= 8 && png_sig_cmp(reinterpret_cast<png_const_bytep>(sig), 0, 8) == 0) {
    return read_png(path);
  }
  if (in.gcount() >= 2 && sig[0] == 'P' && sig[1] == '5') {
    in.seekg(0);
    std::ostringstream ss;
    ss << in.rdbuf();
    return read_pgm(path, ss.str());
  }
  throw DataError(path + ": unsupported image format (expected PNG or binary PGM)");
}

void write_png(const std::string& path, std::size_t rows, std::size_t cols,
               std::span<const std::uint8_t> gray) {
  if (gray.size() != rows * cols || rows == 0 || cols == 0) {
    throw ShapeError("write_png: pixel count does not match " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw DataError("cannot write image " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_handler,
                                            png_warning_handler);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    std::fclose(fp);
    throw DataError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw DataError(path + ": " + png_message);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(cols), static_cast<png_uint_32>(rows), 8,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t r = 0; r < rows; ++r) {
    png_write_row(png, const_cast<png_bytep>(gray.data() + r * cols));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fclose(fp) != 0) throw DataError("write failed for " + path);
}

void write_png(const std::string& path, const Tensor<double>& image) {
  if (image.rank() != 2) throw ShapeError("write_png: expected a rank-2 image");
  std::vector<std::uint8_t> px(image.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image[i], 0.0, 1.0) * 255.0));
  }
  write_png(path, image.dim(0), image.dim(1), px);
}

void write_mask_png(const std::string& path, const Mask& mask) {
  require_binary(mask, "write_mask_png");
  std::vector<std::uint8_t> px(mask.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = mask.values[i] ? 255 : 0;
  write_png(path, mask.rows, mask.cols, px);
}

// ---------------------------------------------------------------------------
// Conversion and resampling

Tensor<double> to_tensor(const RawImage& raw, bool grayscale) {
  const std::size_t hw = raw.rows * raw.cols;
  const double scale = 1.0 / raw.maxval;
  if (raw.channels == 1 || !grayscale) {
    Tensor<double> t({raw.channels, raw.rows, raw.cols});
    for (std::size_t c = 0; c < raw.channels; ++c) {
      for (std::size_t i = 0; i < hw; ++i) t[c * hw + i] = raw.samples[i * raw.channels + c] * scale;
    }
    return t;
  }
  Tensor<double> t({1, raw.rows, raw.cols});
  for (std::size_t i = 0; i < hw; ++i) {
    const auto* s = &raw.samples[3 * i];
    t[i] = (0.299 * s[0] + 0.587 * s[1] + 0.114 * s[2]) * scale;
  }
  return t;
}

Tensor<double> resize_bilinear(const Tensor<double>& image, std::size_t rows, std::size_t cols) {
  if (image.rank() != 2 && image.rank() != 3) {
    throw ShapeError("resize_bilinear: expected (H, W) or (C, H, W), got " +
                     shape_string(image.shape()));
  }
  if (rows == 0 || cols == 0) throw ParameterError("resize_bilinear: empty target size");
  const bool planar = image.rank() == 3;
  const std::size_t ch = planar ? image.dim(0) : 1;
  const std::size_t ih = image.dim(planar ? 1 : 0), iw = image.dim(planar ? 2 : 1);
  Tensor<double> out(planar ? Shape{ch, rows, cols} : Shape{rows, cols});
  auto axis = [](std::size_t dst, std::size_t in, std::size_t out_n, std::size_t& i0,
                 std::size_t& i1, double& frac) {
    double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(out_n) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::size_t>(std::floor(s));
    i1 = std::min(i0 + 1, in - 1);
    frac = s - static_cast<double>(i0);
  };
  for (std::size_t c = 0; c < ch; ++c) {
    const double* src = image.data().data() + c * ih * iw;
    double* dst = out.data().data() + c * rows * cols;
    for (std::size_t r = 0; r < rows; ++r) {
      std::size_t r0, r1;
      double fr;
      axis(r, ih, rows, r0, r1, fr);
      for (std::size_t q = 0; q < cols; ++q) {
        std::size_t c0, c1;
        double fc;
        axis(q, iw, cols, c0, c1, fc);
        const double top = src[r0 * iw + c0] * (1 - fc) + src[r0 * iw + c1] * fc;
        const double bot = src[r1 * iw + c0] * (1 - fc) + src[r1 * iw + c1] * fc;
        dst[r * cols + q] = top * (1 - fr) + bot * fr;
      }
    }
  }
  return out;
}

Mask resize_nearest(const Mask& mask, std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0) throw ParameterError("resize_nearest: empty target size");
  Mask out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t rr = std::min(mask.rows - 1, static_cast<std::size_t>(
        (static_cast<double>(r) + 0.5) * static_cast<double>(mask.rows) / static_cast<double>(rows)));
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t cc = std::min(mask.cols - 1, static_cast<std::size_t>(
          (static_cast<double>(c) + 0.5) * static_cast<double>(mask.cols) / static_cast<double>(cols)));
      out.at(r, c) = mask.at(rr, cc);
    }
  }
  return out;
}

Mask binarize(const RawImage& raw) {
  Mask m(raw.rows, raw.cols);
  const std::size_t hw = raw.rows * raw.cols;
  for (std::size_t i = 0; i < hw; ++i) {
    // first channel only; masks are expected to be single channel
    m.values[i] = 2u * raw.samples[i * raw.channels] >= raw.maxval;
  }
  return m;
}

Mask read_mask(const std::string& path) { return binarize(read_image(path)); }

// ---------------------------------------------------------------------------
// Manifest

fs::path SampleRecord::resolve(const std::string& p) const {
  const fs::path path(p);
  return path.is_absolute() ? path : base_dir / path;
}

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(trim(cur));
  return out;
}

}  // namespace

std::vector<SampleRecord> parse_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path);
  const std::string where = "manifest " + path;
  std::string line;
  if (!std::getline(in, line)) throw DataError(where + ": missing header");
  const auto header = split_csv(line);
  const bool has_split = header.size() == 4 && header[3] == "split";
  if (header.size() < 3 || header[0] != "image" || header[1] != "label" || header[2] != "mask" ||
      (header.size() == 4 && !has_split) || header.size() > 4) {
    throw DataError(where + ": header must be 'image,label,mask' (optionally ',split')");
  }
  const fs::path base = fs::path(path).parent_path();
  std::vector<SampleRecord> records;
  std::set<std::string> seen;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const std::string at = where + " line " + std::to_string(lineno);
    if (line.find('"') != std::string::npos) throw DataError(at + ": quoted fields are not supported");
    auto f = split_csv(line);
    if (f.size() != header.size()) {
      throw DataError(at + ": expected " + std::to_string(header.size()) + " fields, got " +
                      std::to_string(f.size()));
    }
    SampleRecord r;
    r.image_path = f[0];
    r.base_dir = base;
    r.line = lineno;
    if (r.image_path.empty()) throw DataError(at + ": empty image path");
    const std::string& lab = f[1];
    if (lab == "healthy" || lab == "0") {
      r.label = kHealthy;
    } else if (lab == "infected" || lab == "1") {
      r.label = kInfected;
    } else if (!lab.empty()) {
      throw DataError(at + ": unknown label '" + lab + "'");
    }
    if (!f[2].empty()) r.mask_path = f[2];
    if (has_split) r.split = f[3];
    if (!r.label && !r.mask_path) throw DataError(at + ": row has neither label nor mask");
    if (!seen.insert(r.image_path).second) {
      throw DataError(at + ": duplicate image path '" + r.image_path + "'");
    }
    records.push_back(std::move(r));
  }
  return records;
}

void write_manifest(const std::string& path, std::span<const SampleRecord> records) {
  const bool with_split = std::any_of(records.begin(), records.end(),
                                      [](const SampleRecord& r) { return !r.split.empty(); });
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write manifest " + path);
  out << "image,label,mask" << (with_split ? ",split" : "") << '\n';
  for (const auto& r : records) {
    out << r.image_path << ',' << (r.label ? label_name(*r.label) : "") << ','
        << r.mask_path.value_or("");
    if (with_split) out << ',' << r.split;
    out << '\n';
  }
  if (!out) throw DataError("write failed for " + path);
}

Tensor<double> preprocess_image(const Tensor<double>& image, const Preprocess& pre) {
  if (image.rank() != 3) throw ShapeError("preprocess_image: expected (C, H, W)");
  Tensor<double> img = image;
  if (pre.enhance) {
    if (img.dim(0) != 1) throw ParameterError("enhancement needs a single-channel image");
    const std::size_t h = img.dim(1), w = img.dim(2);
    img = enhance_image(img.reshaped({h, w})).reshaped({1, h, w});
  }
  return minmax_normalize(resize_bilinear(img, pre.rows, pre.cols));
}

LoadedSample load_sample(const SampleRecord& rec, const Preprocess& pre) {
  const std::string image_path = rec.resolve(rec.image_path).string();
  const RawImage raw = read_image(image_path);
  LoadedSample s;
  s.image = preprocess_image(to_tensor(raw, pre.grayscale), pre);
  if (rec.mask_path) {
    const std::string mask_path = rec.resolve(*rec.mask_path).string();
    const Mask m = read_mask(mask_path);
    if (m.rows != raw.rows || m.cols != raw.cols) {
      throw DataError(mask_path + ": mask is " + std::to_string(m.rows) + "x" +
                      std::to_string(m.cols) + " but image " + image_path + " is " +
                      std::to_string(raw.rows) + "x" + std::to_string(raw.cols));
    }
    s.mask = resize_nearest(m, pre.rows, pre.cols);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Phantoms

void PhantomConfig::validate() const {
  if (rows < 16 || cols < 16) throw ParameterError("phantom images must be at least 16x16");
  if (min_blobs < 1 || max_blobs < min_blobs) throw ParameterError("invalid blob count range");
  if (!(min_intensity > 0 && max_intensity >= min_intensity && max_intensity <= 1)) {
    throw ParameterError("invalid blob intensity range");
  }
  if (!(min_sigma > 0 && max_sigma >= min_sigma && max_sigma < 0.5)) {
    throw ParameterError("invalid blob sigma range");
  }
  if (!(min_foreground > 0 && max_foreground >= min_foreground && max_foreground < 0.5)) {
    throw ParameterError("foreground fraction range must lie inside (0, 0.5)");
  }
  if (!(noise_sigma >= 0)) throw ParameterError("noise sigma must be non-negative");
  if (!(infected_fraction >= 0 && infected_fraction <= 1)) {
    throw ParameterError("infected fraction must lie in [0, 1]");
  }
}

std::string PhantomConfig::to_json() const {
  nlohmann::ordered_json j;
  j["rows"] = rows;
  j["cols"] = cols;
  j["min_blobs"] = min_blobs;
  j["max_blobs"] = max_blobs;
  j["min_intensity"] = min_intensity;
  j["max_intensity"] = max_intensity;
  j["min_sigma"] = min_sigma;
  j["max_sigma"] = max_sigma;
  j["min_foreground"] = min_foreground;
  j["max_foreground"] = max_foreground;
  j["noise_sigma"] = noise_sigma;
  j["infected_fraction"] = infected_fraction;
  j["seed"] = seed;
  return j.dump(2);
}

int phantom_label(const PhantomConfig& cfg, std::size_t index) {
  const auto before = static_cast<std::uint64_t>(std::floor(static_cast<double>(index) * cfg.infected_fraction));
  const auto after = static_cast<std::uint64_t>(std::floor(static_cast<double>(index + 1) * cfg.infected_fraction));
  return after > before ? kInfected : kHealthy;
}

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

struct Ellipse {
  double cu, cv, ru, rv;  // centre and radii in [-1, 1] image coordinates
  bool contains(double u, double v, double shrink = 1.0) const {
    const double a = (u - cu) / (ru * shrink), b = (v - cv) / (rv * shrink);
    return a * a + b * b <= 1.0;
  }
};

// Squared Mahalanobis distance of pixel (r, c) from a blob.
double blob_d2(const Phantom::Blob& b, double r, double c) {
  const double dr = r - b.row, dc = c - b.col;
  const double cs = std::cos(b.angle), sn = std::sin(b.angle);
  const double a = (dc * cs + dr * sn) / b.sigma_major;
  const double d = (-dc * sn + dr * cs) / b.sigma_minor;
  return a * a + d * d;
}

}  // namespace

Phantom make_phantom(const PhantomConfig& cfg, std::size_t index, int label) {
  cfg.validate();
  std::mt19937_64 gen(mix(cfg.seed ^ mix(index + 1)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(gen); };
  const std::size_t H = cfg.rows, W = cfg.cols;
  auto u_of = [&](double c) { return (c + 0.5) / static_cast<double>(W) * 2 - 1; };
  auto v_of = [&](double r) { return (r + 0.5) / static_cast<double>(H) * 2 - 1; };

  const Ellipse body{0, 0, uniform(0.86, 0.94), uniform(0.70, 0.80)};
  const double spread = uniform(0.36, 0.44);
  const std::array<Ellipse, 2> lungs{Ellipse{-spread, uniform(-0.1, 0.0), uniform(0.26, 0.32), uniform(0.46, 0.54)},
                                     Ellipse{spread, uniform(-0.1, 0.0), uniform(0.26, 0.32), uniform(0.46, 0.54)}};
  const double lung_base = uniform(0.10, 0.18), lung_slope = uniform(0.04, 0.10);
  const double tissue = uniform(0.50, 0.60);

  Phantom ph;
  ph.label = label;
  ph.image = Tensor<double>({H, W});
  ph.mask = Mask(H, W);
  for (std::size_t r = 0; r < H; ++r) {
    for (std::size_t c = 0; c < W; ++c) {
      const double u = u_of(static_cast<double>(c)), v = v_of(static_cast<double>(r));
      double val = 0.0;
      if (body.contains(u, v)) val = tissue;
      for (const auto& l : lungs) {
        if (l.contains(u, v)) val = lung_base + lung_slope * (v + 1) / 2;  // denser towards the back
      }
      ph.image[r * W + c] = val;
    }
  }

  if (label == kInfected) {
    const double side = static_cast<double>(std::min(H, W));
    std::vector<double> field(H * W);
    bool ok = false;
    for (int attempt = 0; attempt < 5000 && !ok; ++attempt) {
      std::uniform_int_distribution<std::size_t> count(cfg.min_blobs, cfg.max_blobs);
      const std::size_t k = count(gen);
      ph.blobs.clear();
      for (std::size_t b = 0; b < k; ++b) {
        const Ellipse& l = lungs[unit(gen) < 0.5 ? 0 : 1];
        double u, v;
        do {
          u = uniform(l.cu - l.ru, l.cu + l.ru);
          v = uniform(l.cv - l.rv, l.cv + l.rv);
        } while (!l.contains(u, v, 0.7));
        const double s1 = uniform(cfg.min_sigma, cfg.max_sigma) * side;
        const double s2 = uniform(cfg.min_sigma, cfg.max_sigma) * side;
        ph.blobs.push_back({(v + 1) / 2 * static_cast<double>(H) - 0.5,
                            (u + 1) / 2 * static_cast<double>(W) - 0.5, std::max(s1, s2),
                            std::min(s1, s2), uniform(0.0, std::numbers::pi)});
      }
      double peak = 0;
      for (std::size_t r = 0; r < H; ++r) {
        for (std::size_t c = 0; c < W; ++c) {
          double f = 0;
          for (const auto& b : ph.blobs) f += std::exp(-0.5 * blob_d2(b, static_cast<double>(r), static_cast<double>(c)));
          field[r * W + c] = f;
          peak = std::max(peak, f);
        }
      }
      std::size_t fg = 0;
      bool inside = true;
      for (std::size_t r = 0; r < H; ++r) {
        for (std::size_t c = 0; c < W; ++c) {
          const bool on = field[r * W + c] > 0.5 * peak;
          ph.mask.at(r, c) = on;
          if (!on) continue;
          ++fg;
          const bool covered = std::any_of(ph.blobs.begin(), ph.blobs.end(), [&](const auto& b) {
            return blob_d2(b, static_cast<double>(r), static_cast<double>(c)) <= 4.0;
          });
          inside = inside && covered;
        }
      }
      // every blob must show up in the mask, otherwise the image holds an
      // unlabelled lesion
      bool all_visible = true;
      for (const auto& b : ph.blobs) {
        const auto r = static_cast<std::size_t>(std::clamp(std::lround(b.row), 0L, static_cast<long>(H - 1)));
        const auto c = static_cast<std::size_t>(std::clamp(std::lround(b.col), 0L, static_cast<long>(W - 1)));
        all_visible = all_visible && ph.mask.at(r, c);
      }
      const double frac = static_cast<double>(fg) / static_cast<double>(H * W);
      ok = inside && all_visible && frac >= cfg.min_foreground && frac <= cfg.max_foreground;
    }
    if (!ok) {
      throw ParameterError("phantom " + std::to_string(index) +
                           ": could not place lesions within the foreground range");
    }
    const double amp = uniform(cfg.min_intensity, cfg.max_intensity);
    double peak = *std::max_element(field.begin(), field.end());
    for (std::size_t i = 0; i < H * W; ++i) ph.image[i] += amp * field[i] / peak;
  }

  std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
  for (auto& v : ph.image.data()) {
    const double n = cfg.noise_sigma > 0 ? noise(gen) : 0.0;
    v = std::clamp(v + n, 0.0, 1.0);
  }
  return ph;
}

std::vector<SampleRecord> generate_phantoms(const PhantomConfig& cfg, std::size_t n,
                                            const std::string& out_dir) {
  cfg.validate();
  const fs::path root(out_dir);
  std::error_code ec;
  fs::create_directories(root / "images", ec);
  if (!ec) fs::create_directories(root / "masks", ec);
  if (ec) throw DataError("cannot create output directory " + out_dir + ": " + ec.message());
  std::vector<SampleRecord> records;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = phantom_label(cfg, i);
    const Phantom ph = make_phantom(cfg, i, label);
    char name[48];
    std::snprintf(name, sizeof name, "phantom_%04zu.png", i);
    SampleRecord r;
    r.image_path = std::string("images/") + name;
    r.mask_path = std::string("masks/") + name;
    r.label = label;
    r.base_dir = root;
    write_png((root / r.image_path).string(), ph.image);
    write_mask_png((root / *r.mask_path).string(), ph.mask);
    records.push_back(std::move(r));
  }
  write_manifest((root / "manifest.csv").string(), records);
  std::ofstream cfg_out(root / "phantoms.json", std::ios::trunc);
  if (!cfg_out) throw DataError("cannot write " + (root / "phantoms.json").string());
  cfg_out << cfg.to_json() << '\n';
  return records;
}

}  // namespace covnet
