#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vbd/image.hpp"
#include "vbd/io.hpp"

namespace vbd {

// Deterministic seed mixing for per-sample RNG streams.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

/// Seeded standard-normal draws (Box-Muller over a mersenne stream); used so
/// results do not depend on the standard library's distribution internals.
Arr gaussian_noise(int n, std::uint64_t seed);

enum class BlurFamily { GaussianIsotropic, GaussianAnisotropic, Uniform, Defocus };

std::string family_name(BlurFamily family);
BlurFamily family_from_name(const std::string& name);

/// Width/std parameters are fractions of the kernel half-width (side-1)/2
/// for Gaussians, and of side/2 for defocus semi-axes.
struct BlurSpec {
  BlurFamily family = BlurFamily::GaussianIsotropic;
  int side = 9;
  double std_v = 0.3, std_h = 0.3;      // gaussian families
  double orientation = 0.0;              // pi/4 or 3pi/4 for the anisotropic ones
  int width = 5;                         // uniform family
  double width_v = 0.3, width_h = 0.3;   // defocus semi-axes
  std::uint64_t seed = 0;
};

Vec gen_gaussian_kernel(const BlurSpec& spec);
Vec gen_uniform_kernel(int width, int side);
Vec gen_defocus_kernel(const BlurSpec& spec);
Vec gen_kernel(const BlurSpec& spec);

/// Draws family parameters from the reference ranges: isotropic std in
/// [0.2,0.4]; anisotropic widths in [0.15,0.4] with orientation pi/4 or
/// 3pi/4; uniform width 5 or 7; defocus widths in [0.2,0.5].
BlurSpec random_blur_spec(BlurFamily family, int side, std::uint64_t seed);

struct DegradedSample {
  ImagePlane clean;
  Vec kernel;
  int kernel_side = 0;
  double sigma = 0.0;
  ImagePlane observed;  // circular blur + Gaussian noise, not clipped
  std::uint64_t seed = 0;
  std::string split;
};

DegradedSample degrade(const ImagePlane& clean, const Vec& kernel, int side, double sigma,
                       std::uint64_t seed);

/// Piecewise-smooth synthetic scene (soft background ramp plus constant-
/// intensity shapes); stands in for photographs in desk-scale runs.
ImagePlane synth_image(int height, int width, std::uint64_t seed);

struct DatasetRecipe {
  std::uint64_t seed = 0;
  int crop = 0;  // center-crop size, 0 keeps full frames
  bool grayscale = true;
  int kernel_side = 9;
  std::vector<std::pair<BlurFamily, int>> mix;  // draws per image, by family
  double sigma_fixed = -1.0;                    // >= 0 selects the fixed level
  double sigma_min = 0.005, sigma_max = 0.05;
  double train_fraction = 0.7, validation_fraction = 0.15;  // rest is test
};

DatasetRecipe recipe_from_json(const nlohmann::json& j);
nlohmann::json recipe_to_json(const DatasetRecipe& recipe);

/// Center-crops every readable PNG under image_dir, applies the recipe's
/// blur/noise draws, writes samples under out_dir and returns the manifest
/// (also written to out_dir/manifest.jsonl). Unreadable files are skipped
/// with a warning; an empty result is an error.
std::vector<ManifestEntry> build_dataset(const std::string& image_dir,
                                         const DatasetRecipe& recipe,
                                         const std::string& out_dir);

}  // namespace vbd
