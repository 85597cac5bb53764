#include "vbd/prior.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace vbd {

ImageGradients apply_D(const ImagePlane& x) {
  const int H = x.height, W = x.width;
  ImageGradients g{Arr(H * W), Arr(H * W)};
  for (int i = 0; i < H; ++i) {
    const int in = (i + 1 == H) ? 0 : i + 1;
    for (int j = 0; j < W; ++j) {
      const int jn = (j + 1 == W) ? 0 : j + 1;
      const Eigen::Index idx = static_cast<Eigen::Index>(i) * W + j;
      g.dh[idx] = x.at(i, jn) - x.at(i, j);
      g.dv[idx] = x.at(in, j) - x.at(i, j);
    }
  }
  return g;
}

ImagePlane apply_D_adjoint(const ImageGradients& g, int height, int width) {
  ImagePlane out(height, width);
  for (int i = 0; i < height; ++i) {
    const int in = (i + 1 == height) ? 0 : i + 1;
    for (int j = 0; j < width; ++j) {
      const int jn = (j + 1 == width) ? 0 : j + 1;
      const Eigen::Index idx = static_cast<Eigen::Index>(i) * width + j;
      const double a = g.dh[idx], b = g.dv[idx];
      out.at(i, j) -= a + b;
      out.at(i, jn) += a;
      out.at(in, j) += b;
    }
  }
  return out;
}

ImagePlane apply_DtWD(const ImagePlane& x, const Arr& w) {
  ImageGradients g = apply_D(x);
  g.dh *= w;
  g.dv *= w;
  return apply_D_adjoint(g, x.height, x.width);
}

Arr dtwd_diag(const Arr& w, int height, int width) {
  Arr out(height * width);
  for (int i = 0; i < height; ++i) {
    const int ip = (i == 0) ? height - 1 : i - 1;
    for (int j = 0; j < width; ++j) {
      const int jp = (j == 0) ? width - 1 : j - 1;
      const Eigen::Index idx = static_cast<Eigen::Index>(i) * width + j;
      out[idx] = 2.0 * w[idx] + w[static_cast<Eigen::Index>(i) * width + jp] +
                 w[static_cast<Eigen::Index>(ip) * width + j];
    }
  }
  return out;
}

Arr lambda_trace_term(const Arr& delta, int height, int width) {
  Arr out(height * width);
  for (int i = 0; i < height; ++i) {
    const int in = (i + 1 == height) ? 0 : i + 1;
    for (int j = 0; j < width; ++j) {
      const int jn = (j + 1 == width) ? 0 : j + 1;
      const Eigen::Index idx = static_cast<Eigen::Index>(i) * width + j;
      out[idx] = 2.0 * delta[idx] + delta[static_cast<Eigen::Index>(i) * width + jn] +
                 delta[static_cast<Eigen::Index>(in) * width + j];
    }
  }
  return out;
}

Arr majorant_weights(const Arr& lambda, double kappa) {
  if ((lambda <= 0.0).any()) throw numerical_error("majorant_weights: nonpositive lambda");
  if (kappa == 1.0) return Arr::Ones(lambda.size());
  return kappa * lambda.pow(kappa - 1.0);
}

Mat default_sar_matrix(int side) {
  const int M = side * side;
  Mat A = Mat::Zero(2 * M + 1, M);
  for (int m = 0; m < M; ++m) A(0, m) = 1.0 / M;
  for (int r = 0; r < side; ++r) {
    for (int c = 0; c < side; ++c) {
      const int m = r * side + c;
      if (c + 1 < side) {  // replicate boundary: edge rows stay zero
        A(1 + m, m) = -1.0;
        A(1 + m, m + 1) = 1.0;
      }
      if (r + 1 < side) {
        A(1 + M + m, m) = -1.0;
        A(1 + M + m, m + side) = 1.0;
      }
    }
  }
  return A;
}

PriorSpec build_sar_prior(const KernelModel& model, PriorSpec spec) {
  if (spec.A.cols() != model.M || spec.m.size() != model.M)
    throw std::invalid_argument("build_sar_prior: A/m shape mismatch with kernel model");

  const Mat AtA = spec.A.transpose() * spec.A;
  Eigen::LLT<Mat> ata_llt(AtA);
  if (ata_llt.info() != Eigen::Success)
    throw numerical_error("build_sar_prior: A rank-deficient (A^T A singular)");

  if (model.P == 0) {
    spec.L = Mat(0, 0);
    spec.mu = Vec(0);
    return spec;
  }

  const Mat AtA_inv_T = ata_llt.solve(model.T);           // (A^T A)^{-1} T
  const Mat inner = model.T.transpose() * AtA_inv_T;      // T^T (A^T A)^{-1} T
  Eigen::LLT<Mat> inner_llt(inner);
  if (inner_llt.info() != Eigen::Success)
    throw numerical_error("build_sar_prior: reduced covariance singular");

  spec.L = model.TtT * inner_llt.solve(model.TtT);
  spec.L = 0.5 * (spec.L + spec.L.transpose()).eval();    // kill roundoff asymmetry
  spec.mu = model.TtT_llt.solve(model.T.transpose() * (spec.m - model.t));
  if (!spec.mu.allFinite() || !spec.L.allFinite())
    throw numerical_error("build_sar_prior: non-finite prior parameters");
  return spec;
}

PriorSpec make_default_prior(const KernelModel& model, double kappa) {
  if (kappa <= 0.0 || kappa > 1.0)
    throw std::invalid_argument("make_default_prior: kappa must lie in (0,1]");
  PriorSpec spec;
  spec.kappa = kappa;
  spec.A = default_sar_matrix(model.side);
  spec.m = Vec::Constant(model.M, 1.0 / model.M);
  return build_sar_prior(model, std::move(spec));
}

}  // namespace vbd
