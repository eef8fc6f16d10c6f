#pragma once

#include <filesystem>
#include <vector>

namespace rsvqa {

/// H x W x C float image, values in [0, 1], row-major with channels fastest.
struct ImageTensor {
  int h = 0;
  int w = 0;
  int c = 0;
  std::vector<float> data;  // size h*w*c

  float& at(int y, int x, int ch) { return data[(static_cast<std::size_t>(y) * w + x) * c + ch]; }
  float at(int y, int x, int ch) const {
    return data[(static_cast<std::size_t>(y) * w + x) * c + ch];
  }
};

/// Binary tensor file: magic "RSVT", u16 version=1, u8 ndim=3, three
/// little-endian u32 dims (H, W, C), then H*W*C little-endian f32 values.
void write_image_file(const std::filesystem::path& path, const ImageTensor& img);
ImageTensor read_image_file(const std::filesystem::path& path);

}  // namespace rsvqa
