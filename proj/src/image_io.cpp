#include "dumo/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>

#include "dumo/archive.hpp"
#include "dumo/errors.hpp"

namespace dumo {

Rgb8::Rgb8(int w, int h, std::uint8_t fill)
    : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, fill) {}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};

}  // namespace

void write_png(const std::filesystem::path& path, const Rgb8& image) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw PreconditionError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) throw InternalError("libpng initialisation failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw PreconditionError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, image.width, image.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < image.height; ++y)
    png_write_row(png, const_cast<png_bytep>(image.pixels.data() + static_cast<std::size_t>(y) * image.width * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Rgb8 read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw PreconditionError("cannot read png " + path.string());
  img.format = PNG_FORMAT_RGB;
  Rgb8 out(static_cast<int>(img.width), static_cast<int>(img.height));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr))
    throw PreconditionError("cannot decode png " + path.string());
  return out;
}

Rgb8 to_rgb8(const torch::Tensor& image, int scale) {
  if (image.dim() != 3 || image.size(0) != 3) throw InputError("to_rgb8 expects a [3,H,W] image");
  const auto px = ((image.detach().to(torch::kFloat64).clamp(-1.0, 1.0) + 1.0) * 127.5)
                      .round()
                      .to(torch::kUInt8)
                      .permute({1, 2, 0})
                      .contiguous();
  const int h = static_cast<int>(px.size(0)), w = static_cast<int>(px.size(1));
  Rgb8 out(w * scale, h * scale);
  const auto* src = px.data_ptr<std::uint8_t>();
  for (int y = 0; y < h * scale; ++y)
    for (int x = 0; x < w * scale; ++x)
      for (int c = 0; c < 3; ++c)
        out.at(x, y)[c] = src[(static_cast<std::size_t>(y / scale) * w + x / scale) * 3 + c];
  return out;
}

Rgb8 contact_sheet(const torch::Tensor& images, int per_row, int scale, int pad) {
  if (images.dim() != 4) throw InputError("contact_sheet expects [N,3,H,W]");
  const int n = static_cast<int>(images.size(0));
  const int h = static_cast<int>(images.size(2)) * scale, w = static_cast<int>(images.size(3)) * scale;
  const int cols = std::max(1, std::min(per_row, n));
  const int rows = std::max(1, (n + cols - 1) / cols);
  Rgb8 sheet(cols * (w + pad) + pad, rows * (h + pad) + pad);
  for (int i = 0; i < n; ++i) {
    const auto tile = to_rgb8(images[i], scale);
    const int ox = pad + (i % cols) * (w + pad), oy = pad + (i / cols) * (h + pad);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        std::copy_n(const_cast<Rgb8&>(tile).at(x, y), 3, sheet.at(ox + x, oy + y));
  }
  return sheet;
}

void write_image_png(const std::filesystem::path& path, const torch::Tensor& image, int scale) {
  write_png(path, image.dim() == 4 ? contact_sheet(image, 10, scale) : to_rgb8(image, scale));
}

void write_raw_images(const std::filesystem::path& path, const torch::Tensor& images) {
  save_tensors(path, {{"images", images.detach().contiguous()}});
}

torch::Tensor read_raw_images(const std::filesystem::path& path) {
  auto t = load_tensors(path);
  const auto it = t.find("images");
  if (it == t.end()) throw PreconditionError(path.string() + " holds no images");
  return it->second;
}

}  // namespace dumo
