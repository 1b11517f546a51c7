#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "osfa/box.hpp"
#include "osfa/tensor.hpp"

namespace osfa {

/// 8-bit grayscale image, row-major, 255 = paper white.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::uint8_t fill = 255) : width(w), height(h), pixels(w * h, fill) {}

  std::uint8_t at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
  std::uint8_t& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  bool empty() const { return pixels.empty(); }

  bool operator==(const Image&) const = default;
};

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Crop `box` (rounded outward to whole pixels); out-of-image pixels replicate the edge.
Image crop(const Image& img, const Box& box);
Image resize_bilinear(const Image& img, std::size_t width, std::size_t height);
/// Reflect-pad symmetrically (extra pixel on the right/bottom) to at least min_w x min_h.
Image reflect_pad(const Image& img, std::size_t min_w, std::size_t min_h);
/// Mirror left-right.
Image hflip(const Image& img);
/// `box` mirrored inside an image of the given width.
Box hflip(const Box& box, double width);
/// Circular shift by (dx, dy) pixels.
Image shift_wrap(const Image& img, long dx, long dy);

/// Ink density (255 - p) / 255 as a [1,H,W] tensor: blank paper maps to zero.
template <typename T>
Tensor<T> to_tensor(const Image& img);

void write_png(const std::filesystem::path& path, const Image& img);
Image read_png(const std::filesystem::path& path);

}  // namespace osfa
