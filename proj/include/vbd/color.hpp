#pragma once

#include "vbd/io.hpp"

namespace vbd {

struct YuvImage {
  ImagePlane y, u, v;
};

/// BT.601 analog YUV.
YuvImage rgb_to_yuv(const RgbImage& rgb);
RgbImage yuv_to_rgb(const YuvImage& yuv);  // clipped to [0,1]

/// 3x3 median with replicate borders; used on the chrominance channels.
ImagePlane median_filter3(const ImagePlane& x);

}  // namespace vbd
