#include "vbd/io.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

namespace vbd {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct PngBytes {
  int height = 0, width = 0, channels = 0;
  std::vector<unsigned char> data;  // interleaved rows
};

PngBytes read_png_bytes(const std::string& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw io_error("cannot open PNG for reading: " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw io_error("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw io_error("malformed PNG: " + path);
  }

  png_init_io(png, file.get());
  png_read_info(png, info);

  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  PngBytes out;
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.channels = static_cast<int>(png_get_channels(png, info));
  if (out.channels != 1 && out.channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw io_error("unsupported PNG channel count in " + path);
  }

  out.data.resize(static_cast<size_t>(out.height) * out.width * out.channels);
  std::vector<png_bytep> rows(out.height);
  for (int i = 0; i < out.height; ++i)
    rows[i] = out.data.data() + static_cast<size_t>(i) * out.width * out.channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void write_png_bytes(const std::string& path, int height, int width, int channels,
                     const std::vector<unsigned char>& data) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw io_error("cannot open PNG for writing: " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw io_error("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw io_error("PNG write failed: " + path);
  }

  png_init_io(png, file.get());
  png_set_IHDR(png, info, width, height, 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<png_bytep> rows(height);
  for (int i = 0; i < height; ++i)
    rows[i] = const_cast<png_bytep>(data.data() + static_cast<size_t>(i) * width * channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

unsigned char quantize(double v) {
  const double clipped = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  return static_cast<unsigned char>(std::lround(clipped * 255.0));
}

}  // namespace

ImagePlane read_png_gray(const std::string& path) {
  const PngBytes bytes = read_png_bytes(path);
  ImagePlane out(bytes.height, bytes.width);
  const size_t n = static_cast<size_t>(bytes.height) * bytes.width;
  if (bytes.channels == 1) {
    for (size_t i = 0; i < n; ++i) out.data[i] = bytes.data[i] / 255.0;
  } else {
    for (size_t i = 0; i < n; ++i) {
      const unsigned char* px = bytes.data.data() + 3 * i;
      out.data[i] = (0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]) / 255.0;
    }
  }
  return out;
}

RgbImage read_png_rgb(const std::string& path) {
  const PngBytes bytes = read_png_bytes(path);
  RgbImage out{ImagePlane(bytes.height, bytes.width), ImagePlane(bytes.height, bytes.width),
               ImagePlane(bytes.height, bytes.width)};
  const size_t n = static_cast<size_t>(bytes.height) * bytes.width;
  for (size_t i = 0; i < n; ++i) {
    if (bytes.channels == 1) {
      const double v = bytes.data[i] / 255.0;
      out.r.data[i] = out.g.data[i] = out.b.data[i] = v;
    } else {
      const unsigned char* px = bytes.data.data() + 3 * i;
      out.r.data[i] = px[0] / 255.0;
      out.g.data[i] = px[1] / 255.0;
      out.b.data[i] = px[2] / 255.0;
    }
  }
  return out;
}

void write_png_gray(const std::string& path, const ImagePlane& image) {
  std::vector<unsigned char> bytes(image.pixels());
  for (int i = 0; i < image.pixels(); ++i) bytes[i] = quantize(image.data[i]);
  write_png_bytes(path, image.height, image.width, 1, bytes);
}

void write_png_rgb(const std::string& path, const RgbImage& image) {
  if (!image.r.same_shape(image.g) || !image.r.same_shape(image.b))
    throw std::invalid_argument("write_png_rgb: channel shape mismatch");
  std::vector<unsigned char> bytes(static_cast<size_t>(image.r.pixels()) * 3);
  for (int i = 0; i < image.r.pixels(); ++i) {
    bytes[3 * i + 0] = quantize(image.r.data[i]);
    bytes[3 * i + 1] = quantize(image.g.data[i]);
    bytes[3 * i + 2] = quantize(image.b.data[i]);
  }
  write_png_bytes(path, image.r.height, image.r.width, 3, bytes);
}

void write_kernel_csv(const std::string& path, const Vec& kernel, int side) {
  if (kernel.size() != side * side)
    throw std::invalid_argument("write_kernel_csv: kernel length != side*side");
  std::ofstream out(path);
  if (!out) throw io_error("cannot open kernel CSV for writing: " + path);
  char buf[64];
  for (int r = 0; r < side; ++r) {
    for (int c = 0; c < side; ++c) {
      std::snprintf(buf, sizeof(buf), "%.17g", kernel[r * side + c]);
      out << buf << (c + 1 == side ? '\n' : ',');
    }
  }
}

std::pair<Vec, int> read_kernel_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open kernel CSV: " + path);
  std::vector<double> values;
  int rows = 0, cols = -1;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    int row_cols = 0;
    while (std::getline(ss, cell, ',')) {
      values.push_back(std::stod(cell));
      ++row_cols;
    }
    if (cols == -1) cols = row_cols;
    if (row_cols != cols) throw io_error("ragged kernel CSV: " + path);
    ++rows;
  }
  if (rows == 0 || rows != cols) throw io_error("kernel CSV is not square: " + path);
  Vec kernel(rows * cols);
  for (size_t i = 0; i < values.size(); ++i) kernel[static_cast<Eigen::Index>(i)] = values[i];
  return {kernel, rows};
}

void write_vector_csv(const std::string& path, const Vec& values) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot open CSV for writing: " + path);
  char buf[64];
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", values[i]);
    out << buf << '\n';
  }
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open manifest: " + path);
  std::vector<ManifestEntry> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw io_error("malformed manifest line in " + path);
    ManifestEntry e;
    e.clean_path = j.at("clean_path").get<std::string>();
    e.observed_path = j.at("observed_path").get<std::string>();
    e.kernel_path = j.at("kernel_path").get<std::string>();
    e.sigma = j.at("sigma").get<double>();
    e.seed = j.at("seed").get<std::uint64_t>();
    e.split = j.at("split").get<std::string>();
    e.blur_family = j.at("blur_family").get<std::string>();
    e.blur_params = j.value("blur_params", nlohmann::json::object());
    entries.push_back(std::move(e));
  }
  return entries;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot open manifest for writing: " + path);
  for (const auto& e : entries) {
    nlohmann::json j{{"clean_path", e.clean_path},   {"observed_path", e.observed_path},
                     {"kernel_path", e.kernel_path}, {"sigma", e.sigma},
                     {"seed", e.seed},               {"split", e.split},
                     {"blur_family", e.blur_family}, {"blur_params", e.blur_params}};
    out << j.dump() << '\n';
  }
}

}  // namespace vbd
