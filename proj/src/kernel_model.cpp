#include "vbd/kernel_model.hpp"

namespace vbd {

KernelModel build_symmetric_constraint(int side) {
  if (side < 1 || side % 2 == 0)
    throw std::invalid_argument("build_symmetric_constraint: side must be odd and positive");

  KernelModel model;
  model.side = side;
  model.M = side * side;
  model.P = (side + 1) * side / 2 - 1;

  const int L = (side - 1) / 2;
  model.shift_offsets.reserve(model.M);
  for (int m = 0; m < model.M; ++m)
    model.shift_offsets.emplace_back(m / side - L, m % side - L);

  // Free coefficients are the upper-triangular grid positions (r <= c),
  // enumerated row-major. Each writes 1 to (r,c) and its mirror (c,r). The
  // last one, the (side-1,side-1) corner, is eliminated by sum-to-one and
  // absorbed into t, so every column compensates at the corner.
  const int corner = model.M - 1;
  model.T = Mat::Zero(model.M, model.P);
  model.t = Vec::Zero(model.M);
  model.t[corner] = 1.0;

  int p = 0;
  for (int r = 0; r < side; ++r) {
    for (int c = r; c < side; ++c) {
      if (r == side - 1 && c == side - 1) break;  // eliminated coefficient
      const int a = r * side + c;
      const int b = c * side + r;
      const double mass = (a == b) ? 1.0 : 2.0;
      model.T(a, p) += 1.0;
      if (b != a) model.T(b, p) += 1.0;
      model.T(corner, p) -= mass;
      ++p;
    }
  }

  model.columns.resize(model.P);
  for (int col = 0; col < model.P; ++col)
    for (int m = 0; m < model.M; ++m)
      if (model.T(m, col) != 0.0) model.columns[col].emplace_back(m, model.T(m, col));

  model.TtT = model.T.transpose() * model.T;
  model.Tt_t = model.T.transpose() * model.t;
  if (model.P > 0) {
    model.TtT_llt.compute(model.TtT);
    if (model.TtT_llt.info() != Eigen::Success)
      throw numerical_error("build_symmetric_constraint: T^T T not positive definite");
  }
  return model;
}

Vec kernel_from_z(const KernelModel& model, const Vec& z) {
  if (z.size() != model.P)
    throw std::invalid_argument("kernel_from_z: z length != P");
  if (model.P == 0) return model.t;
  return model.T * z + model.t;
}

Vec z_from_kernel(const KernelModel& model, const Vec& h) {
  if (h.size() != model.M)
    throw std::invalid_argument("z_from_kernel: kernel length != M");
  if (model.P == 0) return Vec(0);
  return model.TtT_llt.solve(model.T.transpose() * (h - model.t));
}

Vec uniform_kernel(int side, int width) {
  if (width < 1 || width > side || width % 2 == 0)
    throw std::invalid_argument("uniform_kernel: width must be odd and <= side");
  Vec h = Vec::Zero(side * side);
  const int off = (side - width) / 2;
  for (int r = 0; r < width; ++r)
    for (int c = 0; c < width; ++c)
      h[(off + r) * side + (off + c)] = 1.0 / (width * width);
  return h;
}

ImagePlane apply_Kp(const KernelModel& model, int p, const ImagePlane& x) {
  if (p < 0 || p > model.P) throw std::invalid_argument("apply_Kp: index out of range");
  ImagePlane out(x.height, x.width);
  if (p == 0) {
    for (int m = 0; m < model.M; ++m) {
      if (model.t[m] == 0.0) continue;
      auto [dy, dx] = model.shift_offsets[m];
      add_shifted(out.data, x, dy, dx, model.t[m]);
    }
  } else {
    for (auto [m, v] : model.columns[p - 1]) {
      auto [dy, dx] = model.shift_offsets[m];
      add_shifted(out.data, x, dy, dx, v);
    }
  }
  return out;
}

ImagePlane apply_Kp_adjoint(const KernelModel& model, int p, const ImagePlane& x) {
  if (p < 0 || p > model.P) throw std::invalid_argument("apply_Kp_adjoint: index out of range");
  ImagePlane out(x.height, x.width);
  if (p == 0) {
    for (int m = 0; m < model.M; ++m) {
      if (model.t[m] == 0.0) continue;
      auto [dy, dx] = model.shift_offsets[m];
      add_shifted(out.data, x, -dy, -dx, model.t[m]);
    }
  } else {
    for (auto [m, v] : model.columns[p - 1]) {
      auto [dy, dx] = model.shift_offsets[m];
      add_shifted(out.data, x, -dy, -dx, v);
    }
  }
  return out;
}

ImagePlane apply_blur(const BlurOperator& op, const ImagePlane& x, ConvMethod method) {
  return circ_conv(x, op.kernel, op.model->side, method);
}

ImagePlane apply_blur_adjoint(const BlurOperator& op, const ImagePlane& r, ConvMethod method) {
  return circ_conv(r, flip_kernel(op.kernel, op.model->side), op.model->side, method);
}

}  // namespace vbd
