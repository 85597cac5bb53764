#pragma once

#include <Eigen/Cholesky>
#include <utility>
#include <vector>

#include "vbd/conv.hpp"
#include "vbd/image.hpp"

namespace vbd {

/// Affine parametrization h = T z + t of a side*side blur kernel under the
/// sum-to-one and main-diagonal-symmetry constraints. Columns of T span the
/// constraint-satisfying subspace; the reduced variable z (length P) is the
/// solver unknown. Immutable after construction.
struct KernelModel {
  int side = 0;  // odd
  int M = 0;     // side*side
  int P = 0;     // (side+1)*side/2 - 1

  Mat T;   // M x P, full column rank
  Vec t;   // M, the particular constrained kernel reached at z = 0

  // Shift offsets (dy,dx) indexed row-major: entry m of a kernel vector maps
  // to the circular shift by (m/side - L, m%side - L), L = (side-1)/2.
  std::vector<std::pair<int, int>> shift_offsets;

  // Sparse view of T's columns: (row index m, value). Each column touches at
  // most three kernel positions, so K_p application is a few shifted adds.
  std::vector<std::vector<std::pair<int, double>>> columns;

  Mat TtT;                 // P x P Gram matrix
  Vec Tt_t;                // T^T t
  Eigen::LLT<Mat> TtT_llt; // factorization reused by the left inverse

  std::pair<int, int> offset_of(int m) const { return shift_offsets[m]; }
};

/// Build the (T, t) encoding of the default constraints for an odd side.
KernelModel build_symmetric_constraint(int side);

/// h = T z + t.
Vec kernel_from_z(const KernelModel& model, const Vec& z);

/// Left inverse: z = (T^T T)^{-1} T^T (h - t). Projects kernels outside the
/// constraint subspace onto their closest constrained representative.
Vec z_from_kernel(const KernelModel& model, const Vec& h);

/// Centered uniform width x width kernel embedded in a side x side grid;
/// symmetric and sum-to-one, so exactly representable as T z + t.
Vec uniform_kernel(int side, int width);

/// K_p x for p in 0..P (p = 0 applies K_0, built from t).
ImagePlane apply_Kp(const KernelModel& model, int p, const ImagePlane& x);

/// K_p^T x.
ImagePlane apply_Kp_adjoint(const KernelModel& model, int p, const ImagePlane& x);

/// Blur operator H(z) = sum_p z_p K_p + K_0; caches the assembled kernel.
struct BlurOperator {
  const KernelModel* model = nullptr;
  Vec z;
  Vec kernel;  // T z + t

  BlurOperator(const KernelModel& m, Vec z_in)
      : model(&m), z(std::move(z_in)), kernel(kernel_from_z(m, z)) {}
};

ImagePlane apply_blur(const BlurOperator& op, const ImagePlane& x,
                      ConvMethod method = ConvMethod::Auto);
ImagePlane apply_blur_adjoint(const BlurOperator& op, const ImagePlane& r,
                              ConvMethod method = ConvMethod::Auto);

}  // namespace vbd
