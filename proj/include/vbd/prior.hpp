#pragma once

#include "vbd/image.hpp"
#include "vbd/kernel_model.hpp"

namespace vbd {

/// Image prior (per-pixel difference blocks, exponent kappa) and kernel SAR
/// prior (A, m) with the induced reduced-space parameters (L, mu).
/// The difference operator is fixed to the isotropic-TV stencil: J = N blocks,
/// each stacking the horizontal and vertical forward differences (S = 2) with
/// circular wrap.
struct PriorSpec {
  double kappa = 0.5;        // in (0, 1]
  Mat A;                     // Q x M smoothness matrix on the kernel grid
  Vec m;                     // M, SAR prior mean in kernel space
  double alpha = 0.0;        // Gamma hyper-prior shape offset
  double eta = 0.0;          // Gamma hyper-prior rate offset
  Mat L;                     // P x P, derived; symmetric positive definite
  Vec mu;                    // P, derived
};

/// Horizontal/vertical forward differences with circular wrap, one block per
/// pixel: block j = (x(i,j+1)-x(i,j), x(i+1,j)-x(i,j)).
struct ImageGradients {
  Arr dh;  // N horizontal differences
  Arr dv;  // N vertical differences
};

ImageGradients apply_D(const ImagePlane& x);

/// D^T applied to stacked per-pixel blocks (gh, gv).
ImagePlane apply_D_adjoint(const ImageGradients& g, int height, int width);

/// D^T Diag_blocks(w) D x for per-block weights w (each weight covers both
/// rows of its block).
ImagePlane apply_DtWD(const ImagePlane& x, const Arr& w);

/// Diagonal of D^T Diag_blocks(w) D: 2 w_i + w_left(i) + w_up(i).
Arr dtwd_diag(const Arr& w, int height, int width);

/// Per-block trace weights sum_i (D_j^T D_j)_{ii} delta_i
/// = 2 delta_j + delta_right(j) + delta_down(j), used by the lambda update.
Arr lambda_trace_term(const Arr& delta, int height, int width);

/// Diagonal entries of the MM majorant matrix: w_j = kappa * lambda_j^(kappa-1),
/// one weight per block (replicated across the S rows of the block).
Arr majorant_weights(const Arr& lambda, double kappa);

/// Difference matrix on the kernel grid: forward horizontal and vertical
/// differences with replicate boundary (rows at the far edge are zero),
/// prefixed by the averaging row [1,...,1]/M. Shape (2M+1) x M, rank M.
Mat default_sar_matrix(int side);

/// Fill (L, mu) from (A, m): L = T^T T (T^T (A^T A)^{-1} T)^{-1} T^T T and
/// mu = (T^T T)^{-1} T^T (m - t). Throws numerical_error when A is
/// rank-deficient.
PriorSpec build_sar_prior(const KernelModel& model, PriorSpec spec);

/// Default prior: isotropic-TV image term plus the smoothness SAR kernel term
/// with mean 1/M and Jeffrey hyper-prior (alpha = eta = 0).
PriorSpec make_default_prior(const KernelModel& model, double kappa = 0.5);

}  // namespace vbd
