// Dense-matrix oracles for small instances: every structured operator in the
// library is checked against an explicitly assembled counterpart built from
// first principles (circular shift matrices, stacked difference rows).
#pragma once

#include <random>

#include "vbd/datagen.hpp"
#include "vbd/kernel_model.hpp"
#include "vbd/prior.hpp"
#include "vbd/vba.hpp"

namespace oracle {

using vbd::Arr;
using vbd::Mat;
using vbd::Vec;

inline int wrap(int v, int n) {
  int r = v % n;
  return r < 0 ? r + n : r;
}

// Circular shift matrix: (S x)(i,j) = x(i-dy, j-dx).
inline Mat dense_shift(int H, int W, int dy, int dx) {
  const int N = H * W;
  Mat S = Mat::Zero(N, N);
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j)
      S(i * W + j, wrap(i - dy, H) * W + wrap(j - dx, W)) = 1.0;
  return S;
}

inline Mat dense_from_kernel(const vbd::KernelModel& model, const Vec& h, int H, int W) {
  Mat out = Mat::Zero(H * W, H * W);
  for (int m = 0; m < model.M; ++m) {
    if (h[m] == 0.0) continue;
    auto [dy, dx] = model.shift_offsets[m];
    out += h[m] * dense_shift(H, W, dy, dx);
  }
  return out;
}

inline Mat dense_H(const vbd::KernelModel& model, const Vec& z, int H, int W) {
  return dense_from_kernel(model, vbd::kernel_from_z(model, z), H, W);
}

inline Mat dense_Kp(const vbd::KernelModel& model, int p, int H, int W) {
  Vec coeff = p == 0 ? model.t : Vec(model.T.col(p - 1));
  return dense_from_kernel(model, coeff, H, W);
}

// Stacked difference operator, 2N x N; rows (2j, 2j+1) are pixel j's
// horizontal and vertical forward differences with circular wrap.
inline Mat dense_D(int H, int W) {
  const int N = H * W;
  Mat D = Mat::Zero(2 * N, N);
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      const int p = i * W + j;
      D(2 * p, p) = -1.0;
      D(2 * p, i * W + (j + 1) % W) += 1.0;
      D(2 * p + 1, p) = -1.0;
      D(2 * p + 1, ((i + 1) % H) * W + j) += 1.0;
    }
  return D;
}

// Full precision matrix of the image update.
inline Mat dense_precision(const vbd::VbaState& state, const vbd::VbaConfig& config,
                           double beta, int H, int W) {
  const int N = H * W;
  const Mat Hd = dense_H(config.model, state.kernel.mean, H, W);
  Mat prec = beta * (Hd.transpose() * Hd);
  for (int p = 1; p <= config.model.P; ++p) {
    const Mat Kp = dense_Kp(config.model, p, H, W);
    for (int q = 1; q <= config.model.P; ++q)
      prec += beta * state.kernel.cov(p - 1, q - 1) *
              (Kp.transpose() * dense_Kp(config.model, q, H, W));
  }
  const Mat D = dense_D(H, W);
  const Arr w = vbd::majorant_weights(state.lambda, config.prior.kappa);
  Mat lambda_diag = Mat::Zero(2 * N, 2 * N);
  for (int j = 0; j < N; ++j) {
    lambda_diag(2 * j, 2 * j) = w[j];
    lambda_diag(2 * j + 1, 2 * j + 1) = w[j];
  }
  prec += 2.0 * state.gamma.mean() * (D.transpose() * lambda_diag * D);
  return prec;
}

inline double uniform(std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  return lo + (hi - lo) * ((rng() >> 11) * 0x1.0p-53);
}

inline vbd::ImagePlane random_image(int H, int W, std::uint64_t seed, double lo = 0.0,
                                    double hi = 1.0) {
  std::mt19937_64 rng(seed);
  vbd::ImagePlane x(H, W);
  for (int i = 0; i < H * W; ++i) x.data[i] = uniform(rng, lo, hi);
  return x;
}

inline Vec random_vec(int n, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = scale * (2.0 * uniform(rng) - 1.0);
  return v;
}

inline Mat random_spd(int n, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  Mat A(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) A(i, j) = 2.0 * uniform(rng) - 1.0;
  return scale * (A * A.transpose() + 0.1 * n * Mat::Identity(n, n));
}

// Random but well-posed mean-field state for a given geometry.
inline vbd::VbaState random_state(const vbd::VbaConfig& config, int H, int W,
                                  std::uint64_t seed) {
  std::mt19937_64 rng(seed + 5);
  vbd::VbaState state;
  state.image.mean = random_image(H, W, seed);
  state.image.cov_diag = random_image(H, W, seed + 1, 0.01, 0.5).data;
  state.kernel.mean = random_vec(config.model.P, seed + 2, 0.1);
  state.kernel.cov = random_spd(config.model.P, seed + 3, 1e-3);
  state.lambda = random_image(H, W, seed + 4, 0.05, 1.0).data;
  state.gamma.shape = H * W / (2.0 * config.prior.kappa) + config.prior.alpha;
  state.gamma.rate = state.gamma.shape / uniform(rng, 0.5, 5.0);
  return state;
}

inline vbd::VbaConfig small_config(int side, double kappa = 0.5) {
  vbd::VbaConfig config;
  config.model = vbd::build_symmetric_constraint(side);
  config.prior = vbd::make_default_prior(config.model, kappa);
  return config;
}

}  // namespace oracle
