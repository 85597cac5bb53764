#pragma once

#include <map>
#include <string>
#include <vector>

#include "vbd/image.hpp"

namespace vbd {

/// Squared l2 norm of the kernel difference (not divided by M); matches the
/// greedy training loss convention.
double kernel_mse(const Vec& h_est, const Vec& h_true);

/// Max modulus of the 2D DFT coefficient difference after zero-padding both
/// kernels to pad_size x pad_size.
double kernel_hinf(const Vec& h_est, const Vec& h_true, int side, int pad_size = 64);

/// l1 norm of the kernel difference.
double kernel_mae(const Vec& h_est, const Vec& h_true);

/// 10 log10(peak^2 / MSE), capped at 99 dB for identical images.
double psnr(const ImagePlane& x_est, const ImagePlane& x_true, double peak = 1.0);

/// Mean structural similarity: 11x11 Gaussian window (std 1.5), valid-mode
/// windowing, C1 = (0.01 peak)^2, C2 = (0.03 peak)^2.
double ssim(const ImagePlane& x_est, const ImagePlane& x_true, double peak = 1.0);

struct SsimResult {
  double value;
  Arr grad;  // d ssim / d x_est, length N
};
SsimResult ssim_with_gradient(const ImagePlane& x_est, const ImagePlane& x_true,
                              double peak = 1.0);

struct SampleScore {
  std::string id;
  double kernel_mse = 0, kernel_hinf = 0, kernel_mae = 0;
  double psnr = 0, ssim = 0;
};

struct ScoreReport {
  std::vector<SampleScore> samples;
  std::map<std::string, double> mean;
  std::map<std::string, double> stddev;
};

ScoreReport aggregate(std::vector<SampleScore> samples);

/// Joins manifest entries to <stem>_restored.png / <stem>_kernel.csv files in
/// results_dir, scores them, and writes report.csv + report.json there.
ScoreReport evaluate(const std::string& manifest_path, const std::string& results_dir,
                     int hinf_pad = 64);

}  // namespace vbd
