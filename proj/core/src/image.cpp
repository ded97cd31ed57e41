#include "xmodal/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numbers>

#include "xmodal/errors.hpp"

namespace xmodal {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void sample_rgb(const Image& img, double y, double x, bool zero_outside, float* rgb) {
  const double fy = std::floor(y), fx = std::floor(x);
  const long y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
  const double wy = y - fy, wx = x - fx;
  const long h = static_cast<long>(img.height), w = static_cast<long>(img.width);
  double acc[3] = {0, 0, 0};
  for (int dy = 0; dy < 2; ++dy) {
    for (int dx = 0; dx < 2; ++dx) {
      const double weight = (dy ? wy : 1 - wy) * (dx ? wx : 1 - wx);
      if (weight == 0.0) continue;
      long yy = y0 + dy, xx = x0 + dx;
      if (yy < 0 || xx < 0 || yy >= h || xx >= w) {
        if (zero_outside) continue;
        yy = std::clamp(yy, 0L, h - 1);
        xx = std::clamp(xx, 0L, w - 1);
      }
      for (int c = 0; c < 3; ++c) {
        acc[c] += weight * img.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx),
                                  static_cast<std::size_t>(c));
      }
    }
  }
  for (int c = 0; c < 3; ++c) rgb[c] = static_cast<float>(acc[c]);
}

}  // namespace

Image load_png(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw DataError("cannot open image " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("libpng initialisation failed");
  }
  Image img;
  std::vector<png_bytep> rows;
  std::vector<unsigned char> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("malformed PNG " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const auto width = png_get_image_width(png, info);
  const auto height = png_get_image_height(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  buffer.resize(stride * height);
  rows.resize(height);
  for (std::size_t y = 0; y < height; ++y) rows[y] = buffer.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  img = Image(height, width);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        img.at(y, x, c) = static_cast<float>(rows[y][x * 3 + c]) / 255.0f;
  return img;
}

void save_png(const Image& image, const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw DataError("cannot write image " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng initialisation failed");
  }
  std::vector<unsigned char> buffer(image.height * image.width * 3);
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    const float v = std::clamp(image.pixels[i], 0.0f, 1.0f);
    buffer[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
  }
  std::vector<png_bytep> rows(image.height);
  for (std::size_t y = 0; y < image.height; ++y) rows[y] = buffer.data() + y * image.width * 3;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("failed writing PNG " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width),
               static_cast<png_uint_32>(image.height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image resize_bilinear(const Image& image, std::size_t height, std::size_t width) {
  if (image.height == height && image.width == width) return image;
  Image out(height, width);
  const double sy = static_cast<double>(image.height) / static_cast<double>(height);
  const double sx = static_cast<double>(image.width) / static_cast<double>(width);
  for (std::size_t y = 0; y < height; ++y) {
    const double src_y = (static_cast<double>(y) + 0.5) * sy - 0.5;
    for (std::size_t x = 0; x < width; ++x) {
      const double src_x = (static_cast<double>(x) + 0.5) * sx - 0.5;
      sample_rgb(image, src_y, src_x, false, &out.pixels[(y * width + x) * 3]);
    }
  }
  return out;
}

Image pad_to_square(const Image& image, PadMode mode) {
  const std::size_t side = std::max(image.height, image.width);
  if (image.height == image.width) return image;
  Image out(side, side);
  const long top = static_cast<long>((side - image.height) / 2);
  const long left = static_cast<long>((side - image.width) / 2);
  const long h = static_cast<long>(image.height), w = static_cast<long>(image.width);
  const auto reflect = [](long i, long n) {
    if (n == 1) return 0L;
    const long period = 2 * (n - 1);
    i = ((i % period) + period) % period;
    return i < n ? i : period - i;
  };
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      long sy = static_cast<long>(y) - top, sx = static_cast<long>(x) - left;
      const bool inside = sy >= 0 && sx >= 0 && sy < h && sx < w;
      if (!inside) {
        if (mode == PadMode::zeros) continue;
        if (mode == PadMode::edge) {
          sy = std::clamp(sy, 0L, h - 1);
          sx = std::clamp(sx, 0L, w - 1);
        } else {
          sy = reflect(sy, h);
          sx = reflect(sx, w);
        }
      }
      for (std::size_t c = 0; c < 3; ++c)
        out.at(y, x, c) = image.at(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx), c);
    }
  }
  return out;
}

Image rotate(const Image& image, double degrees) {
  Image out(image.height, image.width);
  const double theta = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);
  const double cy = (static_cast<double>(image.height) - 1.0) / 2.0;
  const double cx = (static_cast<double>(image.width) - 1.0) / 2.0;
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      // inverse mapping: rotate destination coordinates back into the source
      const double src_x = c * dx + s * dy + cx;
      const double src_y = -s * dx + c * dy + cy;
      sample_rgb(image, src_y, src_x, true, &out.pixels[(y * image.width + x) * 3]);
    }
  }
  return out;
}

Image crop(const Image& image, std::size_t top, std::size_t left, std::size_t height,
           std::size_t width) {
  if (top + height > image.height || left + width > image.width) {
    throw DataError("crop window exceeds image bounds");
  }
  Image out(height, width);
  for (std::size_t y = 0; y < height; ++y)
    std::copy_n(&image.pixels[((top + y) * image.width + left) * 3], width * 3,
                &out.pixels[y * width * 3]);
  return out;
}

Image center_crop(const Image& image, std::size_t size) {
  if (size > image.height || size > image.width) {
    throw DataError("center crop larger than image");
  }
  return crop(image, (image.height - size) / 2, (image.width - size) / 2, size, size);
}

Image flip_horizontal(const Image& image) {
  Image out(image.height, image.width);
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x)
      for (std::size_t c = 0; c < 3; ++c)
        out.at(y, image.width - 1 - x, c) = image.at(y, x, c);
  return out;
}

void clamp_unit(Image& image) {
  for (auto& v : image.pixels) v = std::clamp(v, 0.0f, 1.0f);
}

std::vector<float> to_planar(const Image& image) {
  const std::size_t hw = image.height * image.width;
  std::vector<float> out(hw * 3);
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c) out[c * hw + i] = image.pixels[i * 3 + c];
  return out;
}

Image from_planar(const std::vector<float>& chw, std::size_t height, std::size_t width) {
  Image out(height, width);
  const std::size_t hw = height * width;
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c) out.pixels[i * 3 + c] = chw[c * hw + i];
  return out;
}

}  // namespace xmodal
