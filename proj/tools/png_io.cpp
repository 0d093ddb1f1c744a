#include "png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace nmd {

Tensor<float> read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw std::runtime_error("read_png " + path.string() + ": " + img.message);
  }
  const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
  img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  const int c = gray ? 1 : 3;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    throw std::runtime_error("read_png " + path.string() + ": " + img.message);
  }
  const int h = static_cast<int>(img.height), w = static_cast<int>(img.width);
  Tensor<float> t(Shape{1, c, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        t.at(0, ch, y, x) = static_cast<float>(buf[(static_cast<std::size_t>(y) * w + x) * c + ch]) / 255.0f;
      }
    }
  }
  return t;
}

void write_png(const std::filesystem::path& path, const Tensor<float>& image) {
  const Shape& s = image.shape();
  if (s.rank() != 4 || s.n() != 1 || (s.c() != 1 && s.c() != 3)) {
    throw ShapeError("write_png: expected 1 x {1,3} x H x W, got " + s.str());
  }
  const int c = s.c(), h = s.h(), w = s.w();
  std::vector<png_byte> buf(static_cast<std::size_t>(h) * w * c);
  std::fesetround(FE_TONEAREST);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        const double v = std::clamp(static_cast<double>(image.at(0, ch, y, x)), 0.0, 1.0);
        buf[(static_cast<std::size_t>(y) * w + x) * c + ch] = static_cast<png_byte>(std::nearbyint(v * 255.0));
      }
    }
  }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = c == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw std::runtime_error("write_png " + path.string() + ": " + img.message);
  }
}

}  // namespace nmd
