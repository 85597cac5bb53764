#pragma once

#include <Eigen/Core>
#include <stdexcept>
#include <utility>

namespace vbd {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Arr = Eigen::ArrayXd;

/// Row-major grayscale plane. Intensities are nominally in [0,1] but the
/// type does not clip; degraded observations may exceed that range.
struct ImagePlane {
  int height = 0;
  int width = 0;
  Arr data;  // height*width entries, row-major

  ImagePlane() = default;

  ImagePlane(int h, int w) : height(h), width(w), data(Arr::Zero(h * w)) {
    if (h <= 0 || w <= 0) throw std::invalid_argument("ImagePlane: nonpositive shape");
  }

  ImagePlane(int h, int w, Arr values) : height(h), width(w), data(std::move(values)) {
    if (h <= 0 || w <= 0) throw std::invalid_argument("ImagePlane: nonpositive shape");
    if (data.size() != static_cast<Eigen::Index>(h) * w)
      throw std::invalid_argument("ImagePlane: data length != height*width");
  }

  int pixels() const { return height * width; }

  double& at(int i, int j) { return data[static_cast<Eigen::Index>(i) * width + j]; }
  double at(int i, int j) const { return data[static_cast<Eigen::Index>(i) * width + j]; }

  bool same_shape(const ImagePlane& other) const {
    return height == other.height && width == other.width;
  }

  bool all_finite() const { return data.isFinite().all(); }
};

/// Thrown when a linear-algebra step degenerates (Cholesky failure,
/// non-finite iterates, rank-deficient prior).
struct numerical_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Thrown on unreadable/unwritable files and malformed external data.
struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace vbd
