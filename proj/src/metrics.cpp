#include "vbd/metrics.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "vbd/io.hpp"

namespace vbd {

double kernel_mse(const Vec& h_est, const Vec& h_true) {
  if (h_est.size() != h_true.size()) throw std::invalid_argument("kernel_mse: size mismatch");
  return (h_est - h_true).squaredNorm();
}

double kernel_mae(const Vec& h_est, const Vec& h_true) {
  if (h_est.size() != h_true.size()) throw std::invalid_argument("kernel_mae: size mismatch");
  return (h_est - h_true).cwiseAbs().sum();
}

double kernel_hinf(const Vec& h_est, const Vec& h_true, int side, int pad_size) {
  if (h_est.size() != h_true.size() || h_est.size() != side * side)
    throw std::invalid_argument("kernel_hinf: size mismatch");
  if (pad_size < side) throw std::invalid_argument("kernel_hinf: pad smaller than kernel");

  std::vector<double> diff(static_cast<size_t>(pad_size) * pad_size, 0.0);
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c)
      diff[static_cast<size_t>(r) * pad_size + c] = h_est[r * side + c] - h_true[r * side + c];

  const int nc = pad_size / 2 + 1;
  std::vector<fftw_complex> freq(static_cast<size_t>(pad_size) * nc);
  fftw_plan plan = fftw_plan_dft_r2c_2d(pad_size, pad_size, diff.data(), freq.data(),
                                        FFTW_ESTIMATE);
  if (!plan) throw numerical_error("kernel_hinf: fftw plan failed");
  fftw_execute(plan);
  fftw_destroy_plan(plan);

  double max_mod = 0.0;
  for (const auto& c : freq)
    max_mod = std::max(max_mod, std::hypot(c[0], c[1]));
  return max_mod;
}

double psnr(const ImagePlane& x_est, const ImagePlane& x_true, double peak) {
  if (!x_est.same_shape(x_true)) throw std::invalid_argument("psnr: shape mismatch");
  const double mse = (x_est.data - x_true.data).square().mean();
  if (mse == 0.0) return 99.0;
  return std::min(99.0, 10.0 * std::log10(peak * peak / mse));
}

namespace {

constexpr int kSsimWindow = 11;

const Arr& ssim_window() {
  static const Arr w = [] {
    Arr v(kSsimWindow * kSsimWindow);
    const double sigma = 1.5;
    const int half = kSsimWindow / 2;
    for (int i = 0; i < kSsimWindow; ++i)
      for (int j = 0; j < kSsimWindow; ++j) {
        const double dy = i - half, dx = j - half;
        v[i * kSsimWindow + j] = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
      }
    v /= v.sum();
    return v;
  }();
  return w;
}

}  // namespace

SsimResult ssim_with_gradient(const ImagePlane& x_est, const ImagePlane& x_true, double peak) {
  if (!x_est.same_shape(x_true)) throw std::invalid_argument("ssim: shape mismatch");
  const int H = x_est.height, W = x_est.width;
  if (H < kSsimWindow || W < kSsimWindow)
    throw std::invalid_argument("ssim: image smaller than the 11x11 window");

  const Arr& win = ssim_window();
  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double c2 = (0.03 * peak) * (0.03 * peak);
  const int vh = H - kSsimWindow + 1, vw = W - kSsimWindow + 1;
  const double n_windows = static_cast<double>(vh) * vw;

  SsimResult result{0.0, Arr::Zero(H * W)};
  double total = 0.0;

  for (int wi = 0; wi < vh; ++wi) {
    for (int wj = 0; wj < vw; ++wj) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int i = 0; i < kSsimWindow; ++i)
        for (int j = 0; j < kSsimWindow; ++j) {
          const double w = win[i * kSsimWindow + j];
          const double a = x_est.at(wi + i, wj + j);
          const double b = x_true.at(wi + i, wj + j);
          mx += w * a;
          my += w * b;
          sxx += w * a * a;
          syy += w * b * b;
          sxy += w * a * b;
        }
      sxx -= mx * mx;
      syy -= my * my;
      sxy -= mx * my;

      const double a1 = 2.0 * mx * my + c1;
      const double a2 = 2.0 * sxy + c2;
      const double b1 = mx * mx + my * my + c1;
      const double b2 = sxx + syy + c2;
      const double s = (a1 * a2) / (b1 * b2);
      total += s;

      // chain rule through (mx, sxx, sxy); spread back over the window
      const double g_mu = (2.0 * my * a2) / (b1 * b2) - s * 2.0 * mx / b1;
      const double g_sxy = 2.0 * a1 / (b1 * b2);
      const double g_sxx = -s / b2;
      for (int i = 0; i < kSsimWindow; ++i)
        for (int j = 0; j < kSsimWindow; ++j) {
          const double w = win[i * kSsimWindow + j];
          const double a = x_est.at(wi + i, wj + j);
          const double b = x_true.at(wi + i, wj + j);
          result.grad[static_cast<Eigen::Index>(wi + i) * W + (wj + j)] +=
              w * (g_mu + g_sxy * (b - my) + g_sxx * 2.0 * (a - mx));
        }
    }
  }

  result.value = total / n_windows;
  result.grad /= n_windows;
  return result;
}

double ssim(const ImagePlane& x_est, const ImagePlane& x_true, double peak) {
  if (!x_est.same_shape(x_true)) throw std::invalid_argument("ssim: shape mismatch");
  const int H = x_est.height, W = x_est.width;
  if (H < kSsimWindow || W < kSsimWindow)
    throw std::invalid_argument("ssim: image smaller than the 11x11 window");

  const Arr& win = ssim_window();
  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double c2 = (0.03 * peak) * (0.03 * peak);
  const int vh = H - kSsimWindow + 1, vw = W - kSsimWindow + 1;

  double total = 0.0;
  for (int wi = 0; wi < vh; ++wi) {
    for (int wj = 0; wj < vw; ++wj) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int i = 0; i < kSsimWindow; ++i)
        for (int j = 0; j < kSsimWindow; ++j) {
          const double w = win[i * kSsimWindow + j];
          const double a = x_est.at(wi + i, wj + j);
          const double b = x_true.at(wi + i, wj + j);
          mx += w * a;
          my += w * b;
          sxx += w * a * a;
          syy += w * b * b;
          sxy += w * a * b;
        }
      sxx -= mx * mx;
      syy -= my * my;
      sxy -= mx * my;
      total += ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) /
               ((mx * mx + my * my + c1) * (sxx + syy + c2));
    }
  }
  return total / (static_cast<double>(vh) * vw);
}

ScoreReport aggregate(std::vector<SampleScore> samples) {
  ScoreReport report;
  report.samples = std::move(samples);
  const auto fields = std::vector<std::pair<std::string, double SampleScore::*>>{
      {"kernel_mse", &SampleScore::kernel_mse}, {"kernel_hinf", &SampleScore::kernel_hinf},
      {"kernel_mae", &SampleScore::kernel_mae}, {"psnr", &SampleScore::psnr},
      {"ssim", &SampleScore::ssim}};
  const double n = static_cast<double>(report.samples.size());
  for (const auto& [name, member] : fields) {
    double mean = 0.0;
    for (const auto& s : report.samples) mean += s.*member;
    mean = n > 0 ? mean / n : 0.0;
    double var = 0.0;
    for (const auto& s : report.samples) var += (s.*member - mean) * (s.*member - mean);
    report.mean[name] = mean;
    report.stddev[name] = n > 1 ? std::sqrt(var / (n - 1)) : 0.0;
  }
  return report;
}

ScoreReport evaluate(const std::string& manifest_path, const std::string& results_dir,
                     int hinf_pad) {
  namespace fs = std::filesystem;
  const std::vector<ManifestEntry> entries = read_manifest(manifest_path);

  std::vector<SampleScore> scores;
  for (const auto& entry : entries) {
    const std::string stem = fs::path(entry.observed_path).stem().string();
    const fs::path restored = fs::path(results_dir) / (stem + "_restored.png");
    const fs::path kernel_csv = fs::path(results_dir) / (stem + "_kernel.csv");
    if (!fs::exists(restored) || !fs::exists(kernel_csv)) continue;

    SampleScore score;
    score.id = stem;

    const auto [h_est, side_est] = read_kernel_csv(kernel_csv.string());
    const auto [h_true, side_true] = read_kernel_csv(entry.kernel_path);
    if (side_est != side_true) throw io_error("evaluate: kernel size mismatch for " + stem);
    score.kernel_mse = kernel_mse(h_est, h_true);
    score.kernel_hinf = kernel_hinf(h_est, h_true, side_est, hinf_pad);
    score.kernel_mae = kernel_mae(h_est, h_true);

    const ImagePlane x_est = read_png_gray(restored.string());
    const ImagePlane x_true = read_png_gray(entry.clean_path);
    score.psnr = psnr(x_est, x_true);
    score.ssim = ssim(x_est, x_true);
    scores.push_back(std::move(score));
  }
  if (scores.empty()) throw io_error("evaluate: no manifest entry has results in " + results_dir);

  ScoreReport report = aggregate(std::move(scores));

  std::ofstream csv(fs::path(results_dir) / "report.csv");
  csv << "sample_id,kernel_mse,kernel_hinf,kernel_mae,psnr,ssim\n";
  csv.precision(12);
  for (const auto& s : report.samples)
    csv << s.id << ',' << s.kernel_mse << ',' << s.kernel_hinf << ',' << s.kernel_mae << ','
        << s.psnr << ',' << s.ssim << '\n';

  nlohmann::json summary;
  for (const auto& [name, value] : report.mean) {
    summary[name]["mean"] = value;
    summary[name]["stddev"] = report.stddev[name];
  }
  summary["samples"] = report.samples.size();
  summary["kernel_mse_convention"] = "squared l2 norm of the difference, not divided by M";
  std::ofstream json_out(fs::path(results_dir) / "report.json");
  json_out << summary.dump(2) << '\n';

  return report;
}

}  // namespace vbd
