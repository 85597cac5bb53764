#pragma once

#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "vbd/image.hpp"

namespace vbd {

struct RgbImage {
  ImagePlane r, g, b;
};

/// 8-bit PNG read; palette/16-bit/alpha inputs are normalized. RGB content is
/// reduced to luminance (BT.601). Intensities map to [0,1] by division by 255.
ImagePlane read_png_gray(const std::string& path);

/// As above but keeps three channels; grayscale files replicate the channel.
RgbImage read_png_rgb(const std::string& path);

/// Writes 8-bit PNG, rounding to nearest after clipping to [0,1].
void write_png_gray(const std::string& path, const ImagePlane& image);
void write_png_rgb(const std::string& path, const RgbImage& image);

/// Kernel CSV: side rows of side comma-separated values, row-major, no header.
/// Values are written with 17 significant digits so files round-trip exactly.
void write_kernel_csv(const std::string& path, const Vec& kernel, int side);
std::pair<Vec, int> read_kernel_csv(const std::string& path);

void write_vector_csv(const std::string& path, const Vec& values);

/// One dataset record per manifest line (JSON lines).
struct ManifestEntry {
  std::string clean_path;
  std::string observed_path;
  std::string kernel_path;
  double sigma = 0.0;
  std::uint64_t seed = 0;
  std::string split;        // train | validation | test
  std::string blur_family;
  nlohmann::json blur_params;
};

std::vector<ManifestEntry> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);

}  // namespace vbd
