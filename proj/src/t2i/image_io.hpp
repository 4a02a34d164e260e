#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace t2i {

// 8-bit RGB PNG I/O. Encoding is deterministic (fixed filter and compression
// settings, no ancillary chunks).
void write_png_rgb8(const std::string& path, int width, int height,
                    const std::vector<uint8_t>& rgb);
std::vector<uint8_t> read_png_rgb8(const std::string& path, int& width, int& height);

// [3 x H x W] in [-1, 1]  <->  interleaved RGB8
std::vector<uint8_t> image_to_rgb8(const Tensor& img);
Tensor rgb8_to_image(const std::vector<uint8_t>& rgb, int width, int height);

void write_image_png(const std::string& path, const Tensor& img);
Tensor read_image_png(const std::string& path);

}  // namespace t2i
