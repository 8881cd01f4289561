#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "incdet/tensor.hpp"

namespace incdet {

// 8-bit RGB image stored planar ([3][H][W]) to match tensor layout.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  Image() = default;
  Image(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(3) * h * w, 0) {}

  std::uint8_t& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  std::uint8_t at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }

  Tensor to_tensor() const;  // [3,H,W], values in [0,1]
  bool operator==(const Image& other) const = default;
};

void write_png(const std::filesystem::path& path, const Image& img);
Image read_png(const std::filesystem::path& path);

}  // namespace incdet
