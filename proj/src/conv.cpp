#include "vbd/conv.hpp"

#include <fftw3.h>

#include <map>
#include <memory>
#include <mutex>
#include <vector>

namespace vbd {
namespace {

// FFTW plan creation is not thread safe; execution on distinct buffers is.
// Plans are cached per image shape and reused with the new-array interface.
struct FftPlans {
  int h = 0, w = 0;
  fftw_plan fwd = nullptr;
  fftw_plan inv = nullptr;

  FftPlans(int height, int width) : h(height), w(width) {
    std::vector<double> real(static_cast<size_t>(h) * w);
    std::vector<fftw_complex> freq(static_cast<size_t>(h) * (w / 2 + 1));
    fwd = fftw_plan_dft_r2c_2d(h, w, real.data(), freq.data(), FFTW_ESTIMATE);
    inv = fftw_plan_dft_c2r_2d(h, w, freq.data(), real.data(), FFTW_ESTIMATE);
    if (!fwd || !inv) throw numerical_error("fftw plan creation failed");
  }
  ~FftPlans() {
    if (fwd) fftw_destroy_plan(fwd);
    if (inv) fftw_destroy_plan(inv);
  }
  FftPlans(const FftPlans&) = delete;
  FftPlans& operator=(const FftPlans&) = delete;
};

std::mutex g_plan_mutex;

const FftPlans& plans_for(int h, int w) {
  static std::map<std::pair<int, int>, std::unique_ptr<FftPlans>> cache;
  std::lock_guard<std::mutex> lock(g_plan_mutex);
  auto& slot = cache[{h, w}];
  if (!slot) slot = std::make_unique<FftPlans>(h, w);
  return *slot;
}

int wrap(int v, int n) {
  int r = v % n;
  return r < 0 ? r + n : r;
}

ImagePlane conv_direct(const ImagePlane& x, const Vec& kernel, int side) {
  const int H = x.height, W = x.width, L = (side - 1) / 2;
  ImagePlane out(H, W);
  for (int m = 0; m < side * side; ++m) {
    const double v = kernel[m];
    if (v == 0.0) continue;
    const int dy = m / side - L;
    const int dx = m % side - L;
    add_shifted(out.data, x, dy, dx, v);
  }
  return out;
}

ImagePlane conv_fft(const ImagePlane& x, const Vec& kernel, int side) {
  const int H = x.height, W = x.width, L = (side - 1) / 2;
  const int nc = W / 2 + 1;
  const auto& plans = plans_for(H, W);

  std::vector<double> buf_x(x.data.data(), x.data.data() + x.pixels());
  std::vector<double> buf_k(static_cast<size_t>(H) * W, 0.0);
  for (int m = 0; m < side * side; ++m) {
    const int dy = m / side - L;
    const int dx = m % side - L;
    buf_k[static_cast<size_t>(wrap(dy, H)) * W + wrap(dx, W)] += kernel[m];
  }

  std::vector<fftw_complex> fx(static_cast<size_t>(H) * nc);
  std::vector<fftw_complex> fk(static_cast<size_t>(H) * nc);
  fftw_execute_dft_r2c(plans.fwd, buf_x.data(), fx.data());
  fftw_execute_dft_r2c(plans.fwd, buf_k.data(), fk.data());

  const double scale = 1.0 / (static_cast<double>(H) * W);
  for (size_t i = 0; i < fx.size(); ++i) {
    const double re = fx[i][0] * fk[i][0] - fx[i][1] * fk[i][1];
    const double im = fx[i][0] * fk[i][1] + fx[i][1] * fk[i][0];
    fx[i][0] = re * scale;
    fx[i][1] = im * scale;
  }

  ImagePlane out(H, W);
  fftw_execute_dft_c2r(plans.inv, fx.data(), out.data.data());
  return out;
}

}  // namespace

ImagePlane circ_shift(const ImagePlane& x, int dy, int dx) {
  ImagePlane out(x.height, x.width);
  add_shifted(out.data, x, dy, dx, 1.0);
  return out;
}

void add_shifted(Arr& out, const ImagePlane& x, int dy, int dx, double scale) {
  const int H = x.height, W = x.width;
  const int sy = wrap(dy, H), sx = wrap(dx, W);
  for (int i = 0; i < H; ++i) {
    const int src_i = i >= sy ? i - sy : i - sy + H;
    const double* row = x.data.data() + static_cast<size_t>(src_i) * W;
    double* dst = out.data() + static_cast<size_t>(i) * W;
    // output column j reads source column (j - sx) mod W
    for (int j = sx; j < W; ++j) dst[j] += scale * row[j - sx];
    for (int j = 0; j < sx; ++j) dst[j] += scale * row[j - sx + W];
  }
}

Vec flip_kernel(const Vec& kernel, int side) {
  Vec out(kernel.size());
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c)
      out[(side - 1 - r) * side + (side - 1 - c)] = kernel[r * side + c];
  return out;
}

ImagePlane circ_conv(const ImagePlane& x, const Vec& kernel, int side, ConvMethod method) {
  if (side < 1 || side % 2 == 0) throw std::invalid_argument("circ_conv: side must be odd");
  if (kernel.size() != static_cast<Eigen::Index>(side) * side)
    throw std::invalid_argument("circ_conv: kernel length != side*side");
  if (x.height < side || x.width < side)
    throw std::invalid_argument("circ_conv: image smaller than kernel");

  bool fft = method == ConvMethod::Fft ||
             (method == ConvMethod::Auto && side * side > 49);
  return fft ? conv_fft(x, kernel, side) : conv_direct(x, kernel, side);
}

}  // namespace vbd
