#include "vbd/color.hpp"

#include <algorithm>

namespace vbd {

YuvImage rgb_to_yuv(const RgbImage& rgb) {
  YuvImage out{ImagePlane(rgb.r.height, rgb.r.width), ImagePlane(rgb.r.height, rgb.r.width),
               ImagePlane(rgb.r.height, rgb.r.width)};
  out.y.data = 0.299 * rgb.r.data + 0.587 * rgb.g.data + 0.114 * rgb.b.data;
  out.u.data = 0.492 * (rgb.b.data - out.y.data);
  out.v.data = 0.877 * (rgb.r.data - out.y.data);
  return out;
}

RgbImage yuv_to_rgb(const YuvImage& yuv) {
  RgbImage out{ImagePlane(yuv.y.height, yuv.y.width), ImagePlane(yuv.y.height, yuv.y.width),
               ImagePlane(yuv.y.height, yuv.y.width)};
  out.r.data = yuv.y.data + yuv.v.data / 0.877;
  out.b.data = yuv.y.data + yuv.u.data / 0.492;
  out.g.data = (yuv.y.data - 0.299 * out.r.data - 0.114 * out.b.data) / 0.587;
  out.r.data = out.r.data.min(1.0).max(0.0);
  out.g.data = out.g.data.min(1.0).max(0.0);
  out.b.data = out.b.data.min(1.0).max(0.0);
  return out;
}

ImagePlane median_filter3(const ImagePlane& x) {
  ImagePlane out(x.height, x.width);
  double window[9];
  for (int i = 0; i < x.height; ++i) {
    for (int j = 0; j < x.width; ++j) {
      int n = 0;
      for (int di = -1; di <= 1; ++di)
        for (int dj = -1; dj <= 1; ++dj) {
          const int ii = std::clamp(i + di, 0, x.height - 1);
          const int jj = std::clamp(j + dj, 0, x.width - 1);
          window[n++] = x.at(ii, jj);
        }
      std::nth_element(window, window + 4, window + 9);
      out.at(i, j) = window[4];
    }
  }
  return out;
}

}  // namespace vbd
