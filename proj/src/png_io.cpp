#include "diffris/png_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

#include "diffris/errors.hpp"

namespace diffris::png {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// Rows are packed by the caller; bit_depth 1 expects 8 pixels per byte.
void write_rows(const std::filesystem::path& path, int width, int height, int bit_depth, int color_type,
                const std::vector<std::vector<png_byte>>& rows) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw IoError("cannot open " + path.string() + " for writing");
  png_structp png_ptr = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png_ptr) throw IoError("png: cannot allocate writer");
  png_infop info = png_create_info_struct(png_ptr);
  if (!info) {
    png_destroy_write_struct(&png_ptr, nullptr);
    throw IoError("png: cannot allocate info");
  }
  std::vector<png_bytep> pointers;
  for (const auto& r : rows) pointers.push_back(const_cast<png_bytep>(r.data()));
  if (setjmp(png_jmpbuf(png_ptr))) {
    png_destroy_write_struct(&png_ptr, &info);
    throw IoError("png: write failed for " + path.string());
  }
  png_init_io(png_ptr, file.get());
  png_set_IHDR(png_ptr, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png_ptr, 9);
  png_set_rows(png_ptr, info, pointers.data());
  png_write_png(png_ptr, info, PNG_TRANSFORM_IDENTITY, nullptr);
  png_destroy_write_struct(&png_ptr, &info);
  if (std::fflush(file.get()) != 0) throw IoError("png: flush failed for " + path.string());
}

std::vector<png_byte> read_pixels(const std::filesystem::path& path, png_uint_32 format, int& width,
                                  int& height) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw IoError("cannot read " + path.string() + ": " + image.message);
  }
  image.format = format;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("cannot decode " + path.string() + ": " + image.message);
  }
  width = static_cast<int>(image.width);
  height = static_cast<int>(image.height);
  return buffer;
}

}  // namespace

void write_image(const std::filesystem::path& path, const Image& image) {
  if (image.pixels.rows() != static_cast<Eigen::Index>(image.height) * image.width || image.pixels.cols() != 3) {
    throw ShapeError("write_image: pixel matrix does not match dimensions");
  }
  std::vector<std::vector<png_byte>> rows(image.height, std::vector<png_byte>(3 * image.width));
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(image.pixels(y * image.width + x, c), 0.0, 1.0);
        rows[y][3 * x + c] = static_cast<png_byte>(std::lround(v * 255.0));
      }
    }
  }
  write_rows(path, image.width, image.height, 8, PNG_COLOR_TYPE_RGB, rows);
}

Image read_image(const std::filesystem::path& path) {
  Image image;
  const auto buffer = read_pixels(path, PNG_FORMAT_RGB, image.width, image.height);
  image.pixels.resize(static_cast<Eigen::Index>(image.height) * image.width, 3);
  for (Eigen::Index i = 0; i < image.pixels.rows(); ++i) {
    for (int c = 0; c < 3; ++c) image.pixels(i, c) = buffer[3 * i + c] / 255.0;
  }
  return image;
}

void write_mask(const std::filesystem::path& path, const BinaryMask& mask) {
  const int stride = (mask.width + 7) / 8;
  std::vector<std::vector<png_byte>> rows(mask.height, std::vector<png_byte>(stride, 0));
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (mask.at(y, x)) rows[y][x / 8] |= static_cast<png_byte>(0x80 >> (x % 8));
    }
  }
  write_rows(path, mask.width, mask.height, 1, PNG_COLOR_TYPE_GRAY, rows);
}

BinaryMask read_mask(const std::filesystem::path& path) {
  int width = 0;
  int height = 0;
  const auto buffer = read_pixels(path, PNG_FORMAT_GRAY, width, height);
  BinaryMask mask(height, width);
  for (std::size_t i = 0; i < mask.values.size(); ++i) mask.values[i] = buffer[i] >= 128 ? 1 : 0;
  return mask;
}

}  // namespace diffris::png
