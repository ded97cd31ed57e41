#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace xmodal {

// RGB image, interleaved height x width x 3, values nominally in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, float fill = 0.0f)
      : height(h), width(w), pixels(h * w * 3, fill) {}

  float& at(std::size_t y, std::size_t x, std::size_t c) {
    return pixels[(y * width + x) * 3 + c];
  }
  float at(std::size_t y, std::size_t x, std::size_t c) const {
    return pixels[(y * width + x) * 3 + c];
  }
  bool empty() const { return pixels.empty(); }
  friend bool operator==(const Image&, const Image&) = default;
};

enum class PadMode { zeros, edge, reflect };

// 8-bit RGB PNG. Values are clamped to [0,1] and rounded to the nearest
// multiple of 1/255 on write.
Image load_png(const std::filesystem::path& path);
void save_png(const Image& image, const std::filesystem::path& path);

// Bilinear resampling with half-pixel centers.
Image resize_bilinear(const Image& image, std::size_t height, std::size_t width);
Image pad_to_square(const Image& image, PadMode mode);
// Rotation about the image center; samples falling outside are filled with 0.
Image rotate(const Image& image, double degrees);
Image crop(const Image& image, std::size_t top, std::size_t left, std::size_t height,
           std::size_t width);
Image center_crop(const Image& image, std::size_t size);
Image flip_horizontal(const Image& image);
void clamp_unit(Image& image);

// Interleaved HWC to planar CHW.
std::vector<float> to_planar(const Image& image);
Image from_planar(const std::vector<float>& chw, std::size_t height, std::size_t width);

}  // namespace xmodal
