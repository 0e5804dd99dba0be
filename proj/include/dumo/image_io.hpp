#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <torch/torch.h>

namespace dumo {

/// 8-bit RGB raster, row major.
struct Rgb8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // width * height * 3

  Rgb8() = default;
  Rgb8(int w, int h, std::uint8_t fill = 255);
  std::uint8_t* at(int x, int y) { return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
};

void write_png(const std::filesystem::path& path, const Rgb8& image);
Rgb8 read_png(const std::filesystem::path& path);

/// Maps a [3,H,W] tensor in [-1,1] to 8-bit, nearest-upscaled by `scale`.
Rgb8 to_rgb8(const torch::Tensor& image, int scale = 1);

/// Tiles [N,3,H,W] images into rows of `per_row`, with `pad` white pixels between.
Rgb8 contact_sheet(const torch::Tensor& images, int per_row, int scale = 4, int pad = 2);

void write_image_png(const std::filesystem::path& path, const torch::Tensor& image, int scale = 4);

/// Exact float images for regression, stored in the tensor archive as "images".
void write_raw_images(const std::filesystem::path& path, const torch::Tensor& images);
torch::Tensor read_raw_images(const std::filesystem::path& path);

}  // namespace dumo
