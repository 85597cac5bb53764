#pragma once

#include "vbd/image.hpp"

namespace vbd {

enum class ConvMethod {
  Auto,    // FFT when side*side > 49, direct sums otherwise
  Direct,
  Fft,
};

/// Circular 2D convolution of `x` with a centered odd `side`x`side` kernel.
/// Kernel entry (r,c) carries the shift offset (dy,dx) = (r-L, c-L) with
/// L = (side-1)/2, so output(i,j) = sum_{dy,dx} k(dy,dx) x(i-dy, j-dx).
ImagePlane circ_conv(const ImagePlane& x, const Vec& kernel, int side,
                     ConvMethod method = ConvMethod::Auto);

/// Point reflection k(dy,dx) -> k(-dy,-dx); convolving with the flipped
/// kernel applies the adjoint of the circular convolution.
Vec flip_kernel(const Vec& kernel, int side);

/// Circular shift: output(i,j) = x((i-dy) mod H, (j-dx) mod W).
ImagePlane circ_shift(const ImagePlane& x, int dy, int dx);

/// out += scale * shift(x, dy, dx); avoids a temporary in operator loops.
void add_shifted(Arr& out, const ImagePlane& x, int dy, int dx, double scale);

}  // namespace vbd
