#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "covnet/mask.hpp"
#include "covnet/tensor.hpp"

namespace covnet {

inline constexpr int kHealthy = 0;
inline constexpr int kInfected = 1;

const char* label_name(int label);

// Decoded pixels before any conversion. Samples are interleaved per pixel.
struct RawImage {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t channels = 0;  // 1 or 3
  std::uint32_t maxval = 255;
  std::vector<std::uint16_t> samples;
};

// PNG (8/16-bit gray or RGB, alpha dropped) or binary PGM, chosen by content.
RawImage read_image(const std::string& path);

void write_png(const std::string& path, std::size_t rows, std::size_t cols,
               std::span<const std::uint8_t> gray);
// Values are clamped to [0, 1] and scaled to 0..255.
void write_png(const std::string& path, const Tensor<double>& image);
void write_mask_png(const std::string& path, const Mask& mask);

// (C, H, W) in [0, 1] scaled by maxval. Luminance-weighted when `grayscale`
// and the source is RGB.
Tensor<double> to_tensor(const RawImage& raw, bool grayscale);

// Half-pixel-centre bilinear resampling of each (H, W) plane of a rank-2 or
// rank-3 (C, H, W) tensor, edge clamped.
Tensor<double> resize_bilinear(const Tensor<double>& image, std::size_t rows, std::size_t cols);
Mask resize_nearest(const Mask& mask, std::size_t rows, std::size_t cols);

// Mask pixel is 1 when the gray value is >= half of maxval.
Mask binarize(const RawImage& raw);
Mask read_mask(const std::string& path);

struct SampleRecord {
  std::string image_path;
  std::optional<int> label;
  std::optional<std::string> mask_path;
  std::string split;
  std::filesystem::path base_dir;  // relative paths resolve against this
  std::size_t line = 0;

  std::filesystem::path resolve(const std::string& p) const;
};

// CSV with header `image,label,mask` and an optional fourth `split` column.
std::vector<SampleRecord> parse_manifest(const std::string& path);
void write_manifest(const std::string& path, std::span<const SampleRecord> records);

struct Preprocess {
  std::size_t rows = 82;
  std::size_t cols = 82;
  bool grayscale = true;
  bool enhance = false;  // wavelet enhancement at native resolution, before resizing
};

struct LoadedSample {
  Tensor<double> image;  // (C, rows, cols), min-max normalised
  std::optional<Mask> mask;
};

// Optional enhancement at native resolution, resize, min-max normalise.
Tensor<double> preprocess_image(const Tensor<double>& image, const Preprocess& pre);

LoadedSample load_sample(const SampleRecord& rec, const Preprocess& pre);

struct PhantomConfig {
  std::size_t rows = 64;
  std::size_t cols = 64;
  std::size_t min_blobs = 1;
  std::size_t max_blobs = 3;
  double min_intensity = 0.35;
  double max_intensity = 0.6;
  double min_sigma = 0.03;  // fraction of the shorter side
  double max_sigma = 0.09;
  double min_foreground = 0.01;
  double max_foreground = 0.15;
  double noise_sigma = 0.02;
  double infected_fraction = 0.5;
  std::uint64_t seed = 1;

  void validate() const;
  std::string to_json() const;
};

struct Phantom {
  Tensor<double> image;  // (rows, cols) in [0, 1]
  Mask mask;
  int label = kHealthy;
  struct Blob {
    double row, col, sigma_major, sigma_minor, angle;
  };
  std::vector<Blob> blobs;
};

// Sample `index` of a set; independent of how many others are generated.
Phantom make_phantom(const PhantomConfig& cfg, std::size_t index, int label);

// Label of sample `index`; infected samples are spread evenly through the set.
int phantom_label(const PhantomConfig& cfg, std::size_t index);

// Writes images/, masks/, manifest.csv and phantoms.json under out_dir and
// returns the records written.
std::vector<SampleRecord> generate_phantoms(const PhantomConfig& cfg, std::size_t n,
                                            const std::string& out_dir);

}  // namespace covnet
