#pragma once

#include <Eigen/Cholesky>
#include <cmath>
#include <functional>
#include <vector>

#include "vbd/image.hpp"
#include "vbd/kernel_model.hpp"
#include "vbd/prior.hpp"

namespace vbd {

/// Gaussian image factor with diagonal covariance approximation.
struct GaussianImageFactor {
  ImagePlane mean;
  Arr cov_diag;  // N strictly positive entries
};

/// Gaussian factor on the reduced kernel variable z.
struct GaussianKernelFactor {
  Vec mean;  // P
  Mat cov;   // P x P symmetric positive definite
};

/// Gamma factor on the regularization weight; mean is shape/rate.
struct GammaFactor {
  double shape = 1.0;
  double rate = 1.0;
  double mean() const { return shape / rate; }
};

struct VbaState {
  GaussianImageFactor image;
  GaussianKernelFactor kernel;
  Arr lambda;  // J = N auxiliary majorant variables, strictly positive
  GammaFactor gamma;
  int iteration = 0;

  bool all_finite() const;
};

struct VbaConfig {
  double xi = 1.0;    // kernel prior weight
  double beta = 1e4;  // inverse noise variance
  PriorSpec prior;
  KernelModel model;
  int cg_iterations = 10;
  double cg_tolerance = 1e-6;   // early exit on relative residual
  int max_iterations = 30;      // K
  double cz0_scale = 1e-4;      // C_z^0 = cz0_scale * I
  double lambda_floor = 1e-10;
  int init_kernel_width = 5;    // clamped to side
  bool covz_eig_route = false;  // eigendecomposition route for the C_z term
  double stop_tol = 0.0;        // relative squared image change; 0 = run all K
  // When set, lambda^0 includes the trace term of the unit initial covariance.
  // Off by default: with intensities in [0,1] that term swamps |D_j y|^2 and
  // turns the first image update into a near-unregularized inverse filter.
  bool lambda0_uses_cov = false;
};

struct CgResult {
  int iterations = 0;
  double rel_residual = 0.0;  // |b - A x| / |b|
};

/// Conjugate gradient on an SPD operator. `x` carries the initial iterate in
/// and the solution out. Stops after `iters` steps or once the relative
/// residual drops below `tol`.
template <typename Op>
CgResult cg_solve(Op&& apply_A, const Arr& b, Arr& x, int iters, double tol) {
  if (iters < 1) throw std::invalid_argument("cg_solve: iters must be >= 1");
  const double b_norm = std::sqrt(b.square().sum());
  const double stop = tol * (b_norm > 0.0 ? b_norm : 1.0);

  Arr r = b - apply_A(x);
  double rs = r.square().sum();
  if (!std::isfinite(rs)) throw numerical_error("cg_solve: non-finite residual");
  CgResult result{0, std::sqrt(rs) / (b_norm > 0.0 ? b_norm : 1.0)};
  if (std::sqrt(rs) <= stop) return result;

  Arr p = r;
  for (int it = 0; it < iters; ++it) {
    Arr q = apply_A(p);
    const double pq = (p * q).sum();
    if (!std::isfinite(pq) || pq <= 0.0)
      throw numerical_error("cg_solve: operator not positive definite");
    const double alpha = rs / pq;
    x += alpha * p;
    r -= alpha * q;
    const double rs_new = r.square().sum();
    if (!std::isfinite(rs_new)) throw numerical_error("cg_solve: non-finite iterate");
    result.iterations = it + 1;
    result.rel_residual = std::sqrt(rs_new) / (b_norm > 0.0 ? b_norm : 1.0);
    if (std::sqrt(rs_new) <= stop) {
      rs = rs_new;
      break;
    }
    p = r + (rs_new / rs) * p;
    rs = rs_new;
  }
  return result;
}

/// Prepared application of the image precision matrix
///   beta (H^T H + sum_{p,q} (C_z)_{p,q} K_p^T K_q) + 2 gamma D^T Lambda D
/// in operator form. Built once per image update and reused across CG steps.
class ImagePrecision {
 public:
  ImagePrecision(const VbaState& state, const VbaConfig& config, double beta);

  ImagePlane apply(const ImagePlane& v) const;
  Arr apply(const Arr& v) const;  // same, on raw row-major data

  /// Closed-form diagonal: the likelihood and covariance terms are constant
  /// across pixels under circular shifts; the TV term sums stencil weights.
  Arr diag() const;

  double beta() const { return beta_; }
  const Vec& kernel() const { return h_; }

 private:
  const KernelModel* model_;
  int height_, width_;
  double beta_;
  double two_gamma_;
  Vec h_, h_flip_;
  Mat cov_z_;
  Arr weights_;          // majorant weights per pixel block
  double diag_const_;    // beta * (|h|^2 + <C_z, T^T T>)
  bool eig_route_ = false;
  std::vector<Vec> eig_kernels_;      // T u_r as side*side PSF grids
  std::vector<Vec> eig_kernels_flip_;
  std::vector<double> eig_values_;
};

/// One-shot wrappers around ImagePrecision (operator-form, no assembly).
ImagePlane apply_image_precision(const VbaState& state, const VbaConfig& config,
                                 const ImagePlane& v);
Arr precision_diag(const VbaState& state, const VbaConfig& config);

struct ImageUpdateResult {
  GaussianImageFactor factor;
  CgResult cg;
};

/// Mean: CG solve of precision * x = beta H^T y warm-started at the current
/// mean; covariance: inverse precision diagonal.
ImageUpdateResult update_image(const VbaState& state, const VbaConfig& config,
                               const ImagePlane& y, double beta);

struct KernelStats {
  Vec a;  // P
  Mat B;  // P x P, symmetric positive semidefinite
};

/// Second-order statistics of the data term under the image factor:
/// B_{p,q} = trace(K_p C_x K_q^T) + <K_p x, K_q x>, a_p = <K_p x, y> - B_{p,0}.
/// Trace terms use the shift-trace identity trace(K_p Diag(d) K_q^T) =
/// (T^T T)_{p,q} sum(d).
KernelStats compute_kernel_stats(const GaussianImageFactor& image,
                                 const KernelModel& model, const ImagePlane& y);

/// (C_z)^{-1} = beta B + xi L, mean = C_z (beta a + xi L mu).
GaussianKernelFactor update_kernel_posterior(const KernelStats& stats,
                                             const PriorSpec& prior, double xi,
                                             double beta);

/// lambda_j = |D_j x|^2 + trace(D_j^T D_j C_x), floored at lambda_floor.
Arr update_lambda(const GaussianImageFactor& image, double lambda_floor);

/// Gamma(d, b) with d = N/(2 kappa) + alpha, b = sum lambda^kappa + eta.
GammaFactor update_gamma(const Arr& lambda, const PriorSpec& prior, int pixels);

/// Expected negative log of the MM-bounded joint under the factorized state
/// plus the factors' negative entropies, in closed form. Constant terms that
/// depend on neither the factors nor (lambda, xi, beta) are dropped.
double surrogate_objective(const VbaState& state, const VbaConfig& config,
                           const ImagePlane& y, double xi, double beta);
double surrogate_objective(const VbaState& state, const VbaConfig& config,
                           const ImagePlane& y);

/// Initialization: x^0 = y, C_x^0 = I, z^0 from the uniform kernel,
/// C_z^0 = cz0_scale I, then lambda^0 and gamma^0 from their update formulas.
VbaState vba_init(const ImagePlane& y, const VbaConfig& config);

struct SweepInfo {
  CgResult cg;
};

/// One sweep of the four updates (image, kernel, lambda, gamma) in order.
SweepInfo vba_sweep(VbaState& state, const VbaConfig& config, double xi,
                    double beta, const ImagePlane& y);

struct TraceRow {
  int iteration;
  double objective;
  double gamma;
  double cg_residual;
  double kernel_change_l2;
};
using TraceCallback = std::function<void(const TraceRow&)>;

/// Algorithm loop: init then max_iterations sweeps with fixed (xi, beta);
/// optionally stops early on relative squared image change < stop_tol.
/// The trace callback, when set, receives one row per sweep (the objective
/// is only evaluated when tracing).
VbaState vba_run(const ImagePlane& y, const VbaConfig& config,
                 const TraceCallback& trace = nullptr);

double digamma(double x);

}  // namespace vbd
