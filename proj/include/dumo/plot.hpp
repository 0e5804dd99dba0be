#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dumo/image_io.hpp"

namespace dumo {

using Colour = std::array<std::uint8_t, 3>;

/// Minimal raster canvas with a 3x5 bitmap font (digits, A-Z, a few symbols).
class Canvas {
 public:
  Canvas(int width, int height, Colour background = {255, 255, 255});

  void fill_rect(int x0, int y0, int x1, int y1, Colour c);
  void outline_rect(int x0, int y0, int x1, int y1, Colour c);
  void line(int x0, int y0, int x1, int y1, Colour c);
  /// Draws text with its top-left corner at (x, y); glyphs are 3x5 cells of `scale` px.
  void text(int x, int y, const std::string& s, Colour c, int scale = 2);
  static int text_width(const std::string& s, int scale = 2);

  int width() const { return image_.width; }
  int height() const { return image_.height; }
  const Rgb8& image() const { return image_; }
  void save(const std::filesystem::path& path) const { write_png(path, image_); }

 private:
  void put(int x, int y, Colour c);
  Rgb8 image_;
};

/// Perceptually ordered dark-blue to yellow ramp for v in [0, 1].
Colour colormap(double v);

struct Series {
  std::string name;
  std::vector<double> values;
};

/// Grouped bar chart: one group per category, one bar per series.
void plot_bars(const std::filesystem::path& path, const std::string& title, const std::vector<std::string>& categories,
               const std::vector<Series>& series);

/// Line chart of each series against its index.
void plot_lines(const std::filesystem::path& path, const std::string& title, const std::vector<Series>& series);

}  // namespace dumo
