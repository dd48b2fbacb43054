#pragma once

#include "paattack/core.hpp"

#include <png.h>

#include <string>
#include <vector>

namespace paattack {

// Decodes an 8-bit PNG (any colour type, converted to RGB) into a [3,H,W]
// image with values v/255.
template <typename T>
ImageTensor<T> load_png(const std::string& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw Error(ErrorCode::Io, "cannot decode PNG " + path + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw Error(ErrorCode::Io, "cannot decode PNG " + path + ": " + image.message);
  }
  const int h = static_cast<int>(image.height), w = static_cast<int>(image.width);
  ImageTensor<T> img(3, h, w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        img.at(c, y, x) = static_cast<T>(buf[(static_cast<size_t>(y) * w + x) * 3 + c]) / static_cast<T>(255);
  return img;
}

}  // namespace paattack
