#include "vbd/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <numbers>
#include <random>

#include "vbd/conv.hpp"
#include "vbd/kernel_model.hpp"

namespace vbd {
namespace {

double uniform01(std::mt19937_64& rng) {
  return (rng() >> 11) * 0x1.0p-53;  // 53-bit mantissa in [0,1)
}

double uniform_in(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

ImagePlane center_crop(const ImagePlane& x, int crop) {
  if (crop <= 0 || (x.height == crop && x.width == crop)) return x;
  if (x.height < crop || x.width < crop)
    throw std::invalid_argument("center_crop: image smaller than crop window");
  const int oy = (x.height - crop) / 2, ox = (x.width - crop) / 2;
  ImagePlane out(crop, crop);
  for (int i = 0; i < crop; ++i)
    for (int j = 0; j < crop; ++j) out.at(i, j) = x.at(oy + i, ox + j);
  return out;
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 step over the combined word
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Arr gaussian_noise(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Arr out(n);
  for (int i = 0; i < n; i += 2) {
    double u1 = uniform01(rng);
    while (u1 <= 0.0) u1 = uniform01(rng);
    const double u2 = uniform01(rng);
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    out[i] = radius * std::cos(angle);
    if (i + 1 < n) out[i + 1] = radius * std::sin(angle);
  }
  return out;
}

std::string family_name(BlurFamily family) {
  switch (family) {
    case BlurFamily::GaussianIsotropic: return "gaussian-isotropic";
    case BlurFamily::GaussianAnisotropic: return "gaussian-anisotropic";
    case BlurFamily::Uniform: return "uniform";
    case BlurFamily::Defocus: return "defocus";
  }
  throw std::invalid_argument("family_name: unknown family");
}

BlurFamily family_from_name(const std::string& name) {
  if (name == "gaussian-isotropic") return BlurFamily::GaussianIsotropic;
  if (name == "gaussian-anisotropic") return BlurFamily::GaussianAnisotropic;
  if (name == "uniform") return BlurFamily::Uniform;
  if (name == "defocus") return BlurFamily::Defocus;
  throw std::invalid_argument("unknown blur family: " + name);
}

Vec gen_gaussian_kernel(const BlurSpec& spec) {
  if (spec.side < 1 || spec.side % 2 == 0)
    throw std::invalid_argument("gen_gaussian_kernel: side must be odd");
  if (spec.std_v <= 0.0 || spec.std_h <= 0.0)
    throw std::invalid_argument("gen_gaussian_kernel: std must be positive");

  const int side = spec.side, L = (side - 1) / 2;
  const double half = std::max(1, L);
  const double sv = spec.std_v * half, sh = spec.std_h * half;  // pixels
  const double cs = std::cos(spec.orientation), sn = std::sin(spec.orientation);

  Vec kernel(side * side);
  for (int r = 0; r < side; ++r) {
    for (int c = 0; c < side; ++c) {
      const double dy = r - L, dx = c - L;
      const double u1 = cs * dx + sn * dy;   // along the rotated horizontal axis
      const double u2 = -sn * dx + cs * dy;
      kernel[r * side + c] =
          std::exp(-0.5 * (u1 * u1 / (sh * sh) + u2 * u2 / (sv * sv)));
    }
  }
  kernel /= kernel.sum();
  return kernel;
}

Vec gen_uniform_kernel(int width, int side) {
  if (width > side) throw std::invalid_argument("gen_uniform_kernel: width > side");
  return uniform_kernel(side, width);
}

Vec gen_defocus_kernel(const BlurSpec& spec) {
  if (spec.side < 1 || spec.side % 2 == 0)
    throw std::invalid_argument("gen_defocus_kernel: side must be odd");
  if (spec.width_v <= 0.0 || spec.width_h <= 0.0)
    throw std::invalid_argument("gen_defocus_kernel: widths must be positive");

  const int side = spec.side, L = (side - 1) / 2;
  const double av = spec.width_v * side / 2.0, ah = spec.width_h * side / 2.0;  // pixels
  const double cs = std::cos(spec.orientation), sn = std::sin(spec.orientation);

  Vec kernel = Vec::Zero(side * side);
  constexpr int kSub = 4;  // antialiasing samples per axis
  for (int r = 0; r < side; ++r) {
    for (int c = 0; c < side; ++c) {
      int inside = 0;
      for (int i = 0; i < kSub; ++i) {
        for (int j = 0; j < kSub; ++j) {
          const double dy = r - L + (i + 0.5) / kSub - 0.5;
          const double dx = c - L + (j + 0.5) / kSub - 0.5;
          const double u1 = cs * dx + sn * dy;
          const double u2 = -sn * dx + cs * dy;
          if ((u1 * u1) / (ah * ah) + (u2 * u2) / (av * av) <= 1.0) ++inside;
        }
      }
      kernel[r * side + c] = static_cast<double>(inside) / (kSub * kSub);
    }
  }
  const double mass = kernel.sum();
  if (mass <= 0.0) throw numerical_error("gen_defocus_kernel: empty ellipse on the grid");
  kernel /= mass;
  return kernel;
}

Vec gen_kernel(const BlurSpec& spec) {
  switch (spec.family) {
    case BlurFamily::GaussianIsotropic:
    case BlurFamily::GaussianAnisotropic: return gen_gaussian_kernel(spec);
    case BlurFamily::Uniform: return gen_uniform_kernel(spec.width, spec.side);
    case BlurFamily::Defocus: return gen_defocus_kernel(spec);
  }
  throw std::invalid_argument("gen_kernel: unknown family");
}

BlurSpec random_blur_spec(BlurFamily family, int side, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  BlurSpec spec;
  spec.family = family;
  spec.side = side;
  spec.seed = seed;
  const double quarter_turn = std::numbers::pi / 4.0;
  switch (family) {
    case BlurFamily::GaussianIsotropic:
      spec.std_v = spec.std_h = uniform_in(rng, 0.2, 0.4);
      spec.orientation = 0.0;
      break;
    case BlurFamily::GaussianAnisotropic:
      spec.std_v = uniform_in(rng, 0.15, 0.4);
      spec.std_h = uniform_in(rng, 0.15, 0.4);
      spec.orientation = uniform01(rng) < 0.5 ? quarter_turn : 3.0 * quarter_turn;
      break;
    case BlurFamily::Uniform:
      spec.width = uniform01(rng) < 0.5 ? 5 : 7;
      spec.width = std::min(spec.width, side);
      break;
    case BlurFamily::Defocus:
      spec.width_v = uniform_in(rng, 0.2, 0.5);
      spec.width_h = uniform_in(rng, 0.2, 0.5);
      spec.orientation = uniform01(rng) < 0.5 ? quarter_turn : 3.0 * quarter_turn;
      break;
  }
  return spec;
}

DegradedSample degrade(const ImagePlane& clean, const Vec& kernel, int side, double sigma,
                       std::uint64_t seed) {
  if (sigma < 0.0) throw std::invalid_argument("degrade: sigma must be >= 0");
  DegradedSample sample;
  sample.clean = clean;
  sample.kernel = kernel;
  sample.kernel_side = side;
  sample.sigma = sigma;
  sample.seed = seed;
  sample.observed = circ_conv(clean, kernel, side);
  if (sigma > 0.0)
    sample.observed.data += sigma * gaussian_noise(clean.pixels(), seed);
  return sample;
}

ImagePlane synth_image(int height, int width, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ImagePlane out(height, width);

  // gentle background ramp
  const double ax = uniform_in(rng, -0.25, 0.25), ay = uniform_in(rng, -0.25, 0.25);
  const double base = uniform_in(rng, 0.3, 0.6);
  for (int i = 0; i < height; ++i)
    for (int j = 0; j < width; ++j)
      out.at(i, j) = base + ax * (static_cast<double>(j) / width - 0.5) +
                     ay * (static_cast<double>(i) / height - 0.5);

  // constant-intensity shapes with crisp edges
  const int shapes = 4 + static_cast<int>(rng() % 4);
  for (int s = 0; s < shapes; ++s) {
    const double cy = uniform_in(rng, 0.1, 0.9) * height;
    const double cx = uniform_in(rng, 0.1, 0.9) * width;
    const double ry = uniform_in(rng, 0.06, 0.28) * height;
    const double rx = uniform_in(rng, 0.06, 0.28) * width;
    const double value = uniform_in(rng, 0.05, 0.95);
    const bool rectangle = uniform01(rng) < 0.4;
    for (int i = 0; i < height; ++i) {
      for (int j = 0; j < width; ++j) {
        const double dy = (i - cy) / ry, dx = (j - cx) / rx;
        const bool inside = rectangle ? (std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0)
                                      : (dy * dy + dx * dx <= 1.0);
        if (inside) out.at(i, j) = value;
      }
    }
  }

  out.data = out.data.min(0.98).max(0.02);
  return out;
}

DatasetRecipe recipe_from_json(const nlohmann::json& j) {
  DatasetRecipe recipe;
  recipe.seed = j.value("seed", 0ULL);
  recipe.crop = j.value("crop", 0);
  recipe.grayscale = j.value("grayscale", true);
  recipe.kernel_side = j.value("kernel_side", 9);
  for (const auto& item : j.at("mix"))
    recipe.mix.emplace_back(family_from_name(item.at("family").get<std::string>()),
                            item.value("count", 1));
  if (j.contains("sigma")) {
    const auto& s = j.at("sigma");
    if (s.contains("fixed")) {
      recipe.sigma_fixed = s.at("fixed").get<double>();
    } else {
      recipe.sigma_fixed = -1.0;
      recipe.sigma_min = s.at("uniform").at(0).get<double>();
      recipe.sigma_max = s.at("uniform").at(1).get<double>();
    }
  }
  if (j.contains("splits")) {
    recipe.train_fraction = j.at("splits").value("train", 0.7);
    recipe.validation_fraction = j.at("splits").value("validation", 0.15);
  }
  return recipe;
}

nlohmann::json recipe_to_json(const DatasetRecipe& recipe) {
  nlohmann::json j;
  j["seed"] = recipe.seed;
  j["crop"] = recipe.crop;
  j["grayscale"] = recipe.grayscale;
  j["kernel_side"] = recipe.kernel_side;
  j["mix"] = nlohmann::json::array();
  for (const auto& [family, count] : recipe.mix)
    j["mix"].push_back({{"family", family_name(family)}, {"count", count}});
  if (recipe.sigma_fixed >= 0.0)
    j["sigma"] = {{"fixed", recipe.sigma_fixed}};
  else
    j["sigma"] = {{"uniform", {recipe.sigma_min, recipe.sigma_max}}};
  j["splits"] = {{"train", recipe.train_fraction}, {"validation", recipe.validation_fraction}};
  return j;
}

std::vector<ManifestEntry> build_dataset(const std::string& image_dir,
                                         const DatasetRecipe& recipe,
                                         const std::string& out_dir) {
  namespace fs = std::filesystem;
  if (recipe.mix.empty()) throw std::invalid_argument("build_dataset: empty blur mix");

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(image_dir))
    if (entry.is_regular_file() && entry.path().extension() == ".png")
      files.push_back(entry.path());
  std::sort(files.begin(), files.end());

  fs::create_directories(out_dir);
  std::vector<ManifestEntry> manifest;

  int draws_per_image = 0;
  for (const auto& [family, count] : recipe.mix) draws_per_image += count;

  const int n_images = static_cast<int>(files.size());
  const int n_train = static_cast<int>(std::ceil(recipe.train_fraction * n_images));
  const int n_val = static_cast<int>(std::ceil(recipe.validation_fraction * n_images));

  std::uint64_t sample_index = 0;
  int image_index = 0;
  char name[64];
  for (const auto& file : files) {
    ImagePlane clean;
    RgbImage clean_rgb;
    try {
      if (recipe.grayscale) {
        clean = center_crop(read_png_gray(file.string()), recipe.crop);
      } else {
        clean_rgb = read_png_rgb(file.string());
        clean_rgb.r = center_crop(clean_rgb.r, recipe.crop);
        clean_rgb.g = center_crop(clean_rgb.g, recipe.crop);
        clean_rgb.b = center_crop(clean_rgb.b, recipe.crop);
      }
    } catch (const std::exception& e) {
      std::cerr << "warning: skipping " << file << ": " << e.what() << '\n';
      continue;
    }

    std::snprintf(name, sizeof(name), "clean_%04d.png", image_index);
    const fs::path clean_path = fs::path(out_dir) / name;
    if (recipe.grayscale)
      write_png_gray(clean_path.string(), clean);
    else
      write_png_rgb(clean_path.string(), clean_rgb);

    const std::string split = image_index < n_train              ? "train"
                              : image_index < n_train + n_val    ? "validation"
                                                                 : "test";

    for (const auto& [family, count] : recipe.mix) {
      for (int d = 0; d < count; ++d, ++sample_index) {
        const std::uint64_t seed = mix_seed(recipe.seed, sample_index);
        std::mt19937_64 rng(mix_seed(seed, 0));

        const BlurSpec spec = random_blur_spec(family, recipe.kernel_side, mix_seed(seed, 1));
        const Vec kernel = gen_kernel(spec);
        const double sigma = recipe.sigma_fixed >= 0.0
                                 ? recipe.sigma_fixed
                                 : uniform_in(rng, recipe.sigma_min, recipe.sigma_max);

        std::snprintf(name, sizeof(name), "sample_%05llu",
                      static_cast<unsigned long long>(sample_index));
        const std::string stem = name;
        const fs::path observed_path = fs::path(out_dir) / (stem + ".png");
        const fs::path kernel_path = fs::path(out_dir) / (stem + "_true_kernel.csv");

        if (recipe.grayscale) {
          DegradedSample sample = degrade(clean, kernel, spec.side, sigma, mix_seed(seed, 2));
          write_png_gray(observed_path.string(), sample.observed);
        } else {
          RgbImage observed{
              degrade(clean_rgb.r, kernel, spec.side, sigma, mix_seed(seed, 2)).observed,
              degrade(clean_rgb.g, kernel, spec.side, sigma, mix_seed(seed, 3)).observed,
              degrade(clean_rgb.b, kernel, spec.side, sigma, mix_seed(seed, 4)).observed};
          write_png_rgb(observed_path.string(), observed);
        }
        write_kernel_csv(kernel_path.string(), kernel, spec.side);

        ManifestEntry entry;
        entry.clean_path = clean_path.string();
        entry.observed_path = observed_path.string();
        entry.kernel_path = kernel_path.string();
        entry.sigma = sigma;
        entry.seed = seed;
        entry.split = split;
        entry.blur_family = family_name(family);
        entry.blur_params = {{"side", spec.side},       {"std_v", spec.std_v},
                             {"std_h", spec.std_h},     {"orientation", spec.orientation},
                             {"width", spec.width},     {"width_v", spec.width_v},
                             {"width_h", spec.width_h}};
        manifest.push_back(std::move(entry));
      }
    }
    ++image_index;
  }

  if (manifest.empty()) throw io_error("build_dataset: no readable images in " + image_dir);
  write_manifest((fs::path(out_dir) / "manifest.jsonl").string(), manifest);
  return manifest;
}

}  // namespace vbd
