#include "osfa/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace osfa {

Image crop(const Image& img, const Box& box) {
  require_valid(box, "crop");
  if (img.empty()) {
    throw ImageError("crop of an empty image");
  }
  const long x0 = static_cast<long>(std::floor(box.xmin));
  const long y0 = static_cast<long>(std::floor(box.ymin));
  const long x1 = static_cast<long>(std::ceil(box.xmax));
  const long y1 = static_cast<long>(std::ceil(box.ymax));
  Image out(static_cast<std::size_t>(x1 - x0), static_cast<std::size_t>(y1 - y0));
  const long W = static_cast<long>(img.width), H = static_cast<long>(img.height);
  for (long y = y0; y < y1; ++y) {
    for (long x = x0; x < x1; ++x) {
      const auto sx = static_cast<std::size_t>(std::clamp(x, 0L, W - 1));
      const auto sy = static_cast<std::size_t>(std::clamp(y, 0L, H - 1));
      out.at(static_cast<std::size_t>(x - x0), static_cast<std::size_t>(y - y0)) = img.at(sx, sy);
    }
  }
  return out;
}

Image hflip(const Image& img) {
  Image out = img;
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) out.at(img.width - 1 - x, y) = img.at(x, y);
  }
  return out;
}

Box hflip(const Box& box, double width) { return {width - box.xmax, box.ymin, width - box.xmin, box.ymax}; }

Image resize_bilinear(const Image& img, std::size_t width, std::size_t height) {
  if (img.empty() || width == 0 || height == 0) {
    throw ImageError("resize with empty source or target");
  }
  if (img.width == width && img.height == height) {
    return img;
  }
  Image out(width, height);
  const double sx = static_cast<double>(img.width) / static_cast<double>(width);
  const double sy = static_cast<double>(img.height) / static_cast<double>(height);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(img.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double ly = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(img.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double lx = fx - static_cast<double>(x0);
      const double v = (1 - ly) * ((1 - lx) * img.at(x0, y0) + lx * img.at(x1, y0)) +
                       ly * ((1 - lx) * img.at(x0, y1) + lx * img.at(x1, y1));
      out.at(x, y) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
    }
  }
  return out;
}

namespace {
std::size_t reflect_index(long i, long n) {
  if (n == 1) return 0;
  const long period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < n ? i : period - i);
}
}  // namespace

Image reflect_pad(const Image& img, std::size_t min_w, std::size_t min_h) {
  if (img.empty()) {
    throw ImageError("reflect_pad of an empty image");
  }
  const std::size_t w = std::max(img.width, min_w);
  const std::size_t h = std::max(img.height, min_h);
  if (w == img.width && h == img.height) {
    return img;
  }
  const long left = static_cast<long>((w - img.width) / 2);
  const long top = static_cast<long>((h - img.height) / 2);
  Image out(w, h);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      out.at(x, y) = img.at(reflect_index(static_cast<long>(x) - left, static_cast<long>(img.width)),
                            reflect_index(static_cast<long>(y) - top, static_cast<long>(img.height)));
    }
  }
  return out;
}

Image shift_wrap(const Image& img, long dx, long dy) {
  Image out(img.width, img.height);
  const long W = static_cast<long>(img.width), H = static_cast<long>(img.height);
  for (long y = 0; y < H; ++y) {
    for (long x = 0; x < W; ++x) {
      const long tx = ((x + dx) % W + W) % W;
      const long ty = ((y + dy) % H + H) % H;
      out.at(static_cast<std::size_t>(tx), static_cast<std::size_t>(ty)) =
          img.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y));
    }
  }
  return out;
}

template <typename T>
Tensor<T> to_tensor(const Image& img) {
  if (img.empty()) {
    throw ImageError("to_tensor of an empty image");
  }
  std::vector<T> v(img.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = static_cast<T>(255 - img.pixels[i]) / T(255);
  }
  return Tensor<T>(Shape{1, img.height, img.width}, std::move(v));
}

template Tensor<float> to_tensor<float>(const Image&);
template Tensor<double> to_tensor<double>(const Image&);

namespace {
struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace

void write_png(const std::filesystem::path& path, const Image& img) {
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) {
    throw ImageError("cannot open " + path.string() + " for writing");
  }
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw ImageError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageError("libpng write failed for " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() + y * img.width));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image read_png(const std::filesystem::path& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) {
    throw ImageError("cannot open " + path.string());
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("malformed PNG: " + path.string());
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  const auto w = png_get_image_width(png, info);
  const auto h = png_get_image_height(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (color != PNG_COLOR_TYPE_GRAY || depth != 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("expected 8-bit grayscale PNG: " + path.string());
  }
  Image img(w, h);
  for (std::size_t y = 0; y < h; ++y) {
    png_read_row(png, img.pixels.data() + y * w, nullptr);
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

}  // namespace osfa
