#include "dumo/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "dumo/errors.hpp"

namespace dumo {

namespace {

// Rows top to bottom, 3 bits each, most significant bit on the left.
struct Glyph {
  char c;
  std::array<std::uint8_t, 5> rows;
};

constexpr Glyph kFont[] = {
    {'0', {7, 5, 5, 5, 7}}, {'1', {2, 6, 2, 2, 7}}, {'2', {7, 1, 7, 4, 7}}, {'3', {7, 1, 7, 1, 7}},
    {'4', {5, 5, 7, 1, 1}}, {'5', {7, 4, 7, 1, 7}}, {'6', {7, 4, 7, 5, 7}}, {'7', {7, 1, 1, 1, 1}},
    {'8', {7, 5, 7, 5, 7}}, {'9', {7, 5, 7, 1, 7}}, {'.', {0, 0, 0, 0, 2}}, {'*', {0, 5, 2, 5, 0}},
    {'-', {0, 0, 7, 0, 0}}, {'+', {0, 2, 7, 2, 0}}, {'_', {0, 0, 0, 0, 7}}, {':', {0, 2, 0, 2, 0}},
    {'/', {1, 1, 2, 4, 4}}, {'=', {0, 7, 0, 7, 0}}, {'(', {2, 4, 4, 4, 2}}, {')', {2, 1, 1, 1, 2}},
    {',', {0, 0, 0, 2, 4}}, {'A', {2, 5, 7, 5, 5}}, {'B', {6, 5, 6, 5, 6}}, {'C', {3, 4, 4, 4, 3}},
    {'D', {6, 5, 5, 5, 6}}, {'E', {7, 4, 6, 4, 7}}, {'F', {7, 4, 6, 4, 4}}, {'G', {3, 4, 5, 5, 3}},
    {'H', {5, 5, 7, 5, 5}}, {'I', {7, 2, 2, 2, 7}}, {'J', {1, 1, 1, 5, 2}}, {'K', {5, 5, 6, 5, 5}},
    {'L', {4, 4, 4, 4, 7}}, {'M', {5, 7, 7, 5, 5}}, {'N', {6, 5, 5, 5, 5}}, {'O', {2, 5, 5, 5, 2}},
    {'P', {6, 5, 6, 4, 4}}, {'Q', {2, 5, 5, 6, 3}}, {'R', {6, 5, 6, 5, 5}}, {'S', {3, 4, 2, 1, 6}},
    {'T', {7, 2, 2, 2, 2}}, {'U', {5, 5, 5, 5, 7}}, {'V', {5, 5, 5, 5, 2}}, {'W', {5, 5, 7, 7, 5}},
    {'X', {5, 5, 2, 5, 5}}, {'Y', {5, 5, 2, 2, 2}}, {'Z', {7, 1, 2, 4, 7}},
};

const Glyph* find_glyph(char c) {
  if (c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
  for (const auto& g : kFont)
    if (g.c == c) return &g;
  return nullptr;
}

constexpr Colour kBlack{0, 0, 0};
constexpr Colour kGrey{200, 200, 200};
constexpr Colour kPalette[] = {{31, 119, 180}, {255, 127, 14}, {44, 160, 44}, {214, 39, 40}, {148, 103, 189}, {140, 86, 75}};

std::string format_tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, std::abs(v) >= 100 ? "%.0f" : (std::abs(v) >= 1 ? "%.2f" : "%.3f"), v);
  return buf;
}

struct Frame {
  int left = 70, right = 20, top = 40, bottom = 60;
};

void draw_axes(Canvas& cv, const Frame& f, double lo, double hi, const std::string& title) {
  const int x0 = f.left, x1 = cv.width() - f.right, y0 = f.top, y1 = cv.height() - f.bottom;
  cv.text(f.left, 12, title, kBlack, 2);
  for (int i = 0; i <= 4; ++i) {
    const double v = lo + (hi - lo) * i / 4.0;
    const int y = y1 - static_cast<int>(std::lround((y1 - y0) * i / 4.0));
    cv.line(x0, y, x1, y, kGrey);
    const auto s = format_tick(v);
    cv.text(x0 - Canvas::text_width(s) - 4, y - 5, s, kBlack, 2);
  }
  cv.line(x0, y0, x0, y1, kBlack);
  cv.line(x0, y1, x1, y1, kBlack);
}

std::pair<double, double> value_range(const std::vector<Series>& series) {
  double lo = 0.0, hi = 0.0;
  for (const auto& s : series)
    for (double v : s.values)
      if (std::isfinite(v)) lo = std::min(lo, v), hi = std::max(hi, v);
  if (hi - lo < 1e-12) hi = lo + 1.0;
  return {lo, hi};
}

void legend(Canvas& cv, const std::vector<Series>& series, int x, int y) {
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto c = kPalette[i % std::size(kPalette)];
    cv.fill_rect(x, y + static_cast<int>(i) * 14, x + 10, y + static_cast<int>(i) * 14 + 10, c);
    cv.text(x + 14, y + static_cast<int>(i) * 14, series[i].name, kBlack, 2);
  }
}

}  // namespace

Canvas::Canvas(int width, int height, Colour bg) : image_(width, height) {
  fill_rect(0, 0, width, height, bg);
}

void Canvas::put(int x, int y, Colour c) {
  if (x < 0 || y < 0 || x >= image_.width || y >= image_.height) return;
  std::copy(c.begin(), c.end(), image_.at(x, y));
}

void Canvas::fill_rect(int x0, int y0, int x1, int y1, Colour c) {
  for (int y = std::max(0, y0); y < std::min(y1, image_.height); ++y)
    for (int x = std::max(0, x0); x < std::min(x1, image_.width); ++x) put(x, y, c);
}

void Canvas::outline_rect(int x0, int y0, int x1, int y1, Colour c) {
  line(x0, y0, x1, y0, c);
  line(x1, y0, x1, y1, c);
  line(x1, y1, x0, y1, c);
  line(x0, y1, x0, y0, c);
}

void Canvas::line(int x0, int y0, int x1, int y1, Colour c) {
  const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    put(x0, y0, c);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) err += dy, x0 += sx;
    if (e2 <= dx) err += dx, y0 += sy;
  }
}

void Canvas::text(int x, int y, const std::string& s, Colour c, int scale) {
  int cx = x;
  for (char ch : s) {
    if (const auto* g = find_glyph(ch)) {
      for (int r = 0; r < 5; ++r)
        for (int b = 0; b < 3; ++b)
          if (g->rows[static_cast<std::size_t>(r)] & (4 >> b))
            fill_rect(cx + b * scale, y + r * scale, cx + (b + 1) * scale, y + (r + 1) * scale, c);
    }
    cx += 4 * scale;
  }
}

int Canvas::text_width(const std::string& s, int scale) { return static_cast<int>(s.size()) * 4 * scale; }

Colour colormap(double v) {
  static constexpr std::array<std::array<double, 3>, 5> anchors{
      {{68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}}};
  v = std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 1.0) * 4.0;
  const int i = std::min(3, static_cast<int>(v));
  const double f = v - i;
  Colour out;
  for (int c = 0; c < 3; ++c)
    out[static_cast<std::size_t>(c)] = static_cast<std::uint8_t>(
        std::lround(anchors[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] * (1 - f) +
                    anchors[static_cast<std::size_t>(i) + 1][static_cast<std::size_t>(c)] * f));
  return out;
}

void plot_bars(const std::filesystem::path& path, const std::string& title, const std::vector<std::string>& categories,
               const std::vector<Series>& series) {
  for (const auto& s : series)
    if (s.values.size() != categories.size()) throw InputError("plot_bars: series '" + s.name + "' length mismatch");
  Canvas cv(std::max(480, 90 + static_cast<int>(categories.size() * (series.size() * 18 + 24))), 360);
  Frame f;
  const auto [lo, hi] = value_range(series);
  draw_axes(cv, f, lo, hi, title);
  const int y0 = f.top, y1 = cv.height() - f.bottom;
  const auto to_y = [&](double v) { return y1 - static_cast<int>(std::lround((v - lo) / (hi - lo) * (y1 - y0))); };
  const int group_w = (cv.width() - f.left - f.right) / std::max<int>(1, static_cast<int>(categories.size()));
  const int bar_w = std::max(4, (group_w - 12) / std::max<int>(1, static_cast<int>(series.size())));
  for (std::size_t k = 0; k < categories.size(); ++k) {
    const int gx = f.left + static_cast<int>(k) * group_w + 6;
    for (std::size_t s = 0; s < series.size(); ++s) {
      const int bx = gx + static_cast<int>(s) * bar_w;
      const int a = to_y(0.0), b = to_y(series[s].values[k]);
      cv.fill_rect(bx, std::min(a, b), bx + bar_w - 2, std::max(a, b) + 1, kPalette[s % std::size(kPalette)]);
    }
    cv.text(gx, y1 + 8, categories[k], kBlack, 2);
  }
  legend(cv, series, f.left, cv.height() - 30 + (series.size() > 1 ? -14 * static_cast<int>(series.size() - 1) / 2 : 0) + 8);
  cv.save(path);
}

void plot_lines(const std::filesystem::path& path, const std::string& title, const std::vector<Series>& series) {
  Canvas cv(640, 360);
  Frame f;
  f.bottom = 40 + 14 * static_cast<int>(series.size());
  const auto [lo, hi] = value_range(series);
  draw_axes(cv, f, lo, hi, title);
  const int x0 = f.left, x1 = cv.width() - f.right, y0 = f.top, y1 = cv.height() - f.bottom;
  std::size_t n = 1;
  for (const auto& s : series) n = std::max(n, s.values.size());
  for (std::size_t s = 0; s < series.size(); ++s) {
    const auto& v = series[s].values;
    int px = -1, py = -1;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!std::isfinite(v[i])) continue;
      const int x = x0 + static_cast<int>(std::lround((x1 - x0) * static_cast<double>(i) / std::max<std::size_t>(1, n - 1)));
      const int y = y1 - static_cast<int>(std::lround((v[i] - lo) / (hi - lo) * (y1 - y0)));
      if (px >= 0) cv.line(px, py, x, y, kPalette[s % std::size(kPalette)]);
      px = x, py = y;
    }
  }
  cv.text(x1 - Canvas::text_width(std::to_string(n - 1)), y1 + 6, std::to_string(n - 1), kBlack, 2);
  cv.text(x0, y1 + 6, "0", kBlack, 2);
  legend(cv, series, f.left, y1 + 22);
  cv.save(path);
}

}  // namespace dumo
