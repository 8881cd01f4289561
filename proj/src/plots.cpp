#include "incdet/plots.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>

#include "incdet/image.hpp"

namespace incdet {

namespace {

struct Rgb8 {
  std::uint8_t r, g, b;
};

class Canvas {
 public:
  Canvas(int h, int w, Rgb8 bg) : img_(h, w) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) set(x, y, bg);
  }

  void set(int x, int y, Rgb8 c) {
    if (x < 0 || y < 0 || x >= img_.width || y >= img_.height) return;
    img_.at(0, y, x) = c.r;
    img_.at(1, y, x) = c.g;
    img_.at(2, y, x) = c.b;
  }

  void fill_rect(int x0, int y0, int w, int h, Rgb8 c) {
    for (int y = y0; y < y0 + h; ++y)
      for (int x = x0; x < x0 + w; ++x) set(x, y, c);
  }

  void line(int x0, int y0, int x1, int y1, Rgb8 c) {
    const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      set(x0, y0, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }

  void marker(int x, int y, Rgb8 c) { fill_rect(x - 2, y - 2, 5, 5, c); }

  // 3x5 glyphs, digits plus a few symbols, scaled 2x
  void text(int x, int y, const std::string& s, Rgb8 c) {
    for (char ch : s) {
      const std::uint16_t glyph = glyph_for(ch);
      for (int row = 0; row < 5; ++row)
        for (int col = 0; col < 3; ++col)
          if (glyph >> (row * 3 + (2 - col)) & 1)
            fill_rect(x + col * 2, y + row * 2, 2, 2, c);
      x += 8;
    }
  }

  static int text_width(const std::string& s) { return static_cast<int>(s.size()) * 8; }

  void save(const std::filesystem::path& path) const { write_png(path, img_); }

 private:
  static std::uint16_t glyph_for(char c) {
    // rows packed low-to-high, 3 bits per row
    switch (c) {
      case '0': return 0b111101101101111;
      case '1': return 0b010110010010111;
      case '2': return 0b111001111100111;
      case '3': return 0b111001111001111;
      case '4': return 0b101101111001001;
      case '5': return 0b111100111001111;
      case '6': return 0b111100111101111;
      case '7': return 0b111001001001001;
      case '8': return 0b111101111101111;
      case '9': return 0b111101111001111;
      case '-': return 0b000000111000000;
      case '.': return 0b000000000000010;
      case '+': return 0b000010111010000;
      case 't': return 0b111010010010010;
      case 'j': return 0b001001001101111;
      default: return 0;
    }
  }

  Image img_;
};

std::string fmt1(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", v);
  return buf;
}

const Rgb8 kBg{24, 26, 30};
const Rgb8 kGridLine{70, 74, 80};
const Rgb8 kText{220, 222, 226};
const Rgb8 kSeries[6] = {{230, 80, 70},  {80, 170, 240}, {110, 210, 110},
                         {240, 200, 80}, {200, 110, 230}, {120, 220, 210}};

}  // namespace

void plot_forgetting_heatmap(const SequenceResult& r, const std::filesystem::path& out_png) {
  check(r.sequential(), "plot_forgetting_heatmap: result is not a sequential run");
  const int n = static_cast<int>(r.task_names.size());
  check(n >= 2, "plot_forgetting_heatmap: need at least 2 tasks");
  ForgettingMatrix fm = forgetting_matrix(r.task_names, r.map_table);

  double max_abs = 1.0;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) max_abs = std::max(max_abs, std::abs(fm.delta[i][j]));

  const int cell = 56, margin = 40;
  Canvas cv(margin + n * cell + 16, margin + n * cell + 16, kBg);
  for (int i = 0; i < n; ++i) {
    cv.text(margin + i * cell + cell / 2 - 4, margin - 16, std::to_string(i), kText);  // column
    cv.text(margin - 20, margin + i * cell + cell / 2 - 5, std::to_string(i), kText);  // row
  }
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      const int x = margin + j * cell, y = margin + i * cell;
      Rgb8 c{44, 46, 52};
      if (j > i) {
        const double v = fm.delta[i][j] / max_abs;  // negative = forgetting
        if (v < 0) {
          const double a = std::min(1.0, -v);
          c = {static_cast<std::uint8_t>(60 + 180 * a), 52, 52};
        } else {
          const double a = std::min(1.0, v);
          c = {52, static_cast<std::uint8_t>(60 + 140 * a), static_cast<std::uint8_t>(70 + 170 * a)};
        }
      }
      cv.fill_rect(x, y, cell - 2, cell - 2, c);
      if (j > i) {
        const std::string label = fmt1(fm.delta[i][j]);
        cv.text(x + (cell - Canvas::text_width(label)) / 2, y + cell / 2 - 5, label, kText);
      }
    }
  }
  cv.save(out_png);
}

void plot_map_curves(const SequenceResult& r, const std::filesystem::path& out_png) {
  const int n_tasks = static_cast<int>(r.task_names.size());
  const int n_cp = static_cast<int>(r.checkpoints.size());
  check(n_tasks >= 1 && n_cp >= 1, "plot_map_curves: empty result");

  const int w = 520, h = 340, ml = 48, mr = 16, mt = 16, mb = 36;
  Canvas cv(h, w, kBg);
  const int px0 = ml, px1 = w - mr, py0 = mt, py1 = h - mb;
  auto xpos = [&](int cp) {
    return n_cp == 1 ? (px0 + px1) / 2 : px0 + cp * (px1 - px0) / (n_cp - 1);
  };
  auto ypos = [&](double map) { return py1 - static_cast<int>((map / 100.0) * (py1 - py0)); };

  for (int yv = 0; yv <= 100; yv += 20) {
    cv.line(px0, ypos(yv), px1, ypos(yv), kGridLine);
    cv.text(px0 - 8 - Canvas::text_width(std::to_string(yv)), ypos(yv) - 5, std::to_string(yv), kText);
  }
  for (int cp = 0; cp < n_cp; ++cp)
    cv.text(xpos(cp) - 4, py1 + 8, std::to_string(cp), kText);
  cv.line(px0, py0, px0, py1, kText);
  cv.line(px0, py1, px1, py1, kText);

  for (int t = 0; t < n_tasks; ++t) {
    const Rgb8 c = kSeries[static_cast<std::size_t>(t) % 6];
    int prev_x = -1, prev_y = -1;
    for (int cp = 0; cp < n_cp; ++cp) {
      const double v = r.map_table[static_cast<std::size_t>(t)][static_cast<std::size_t>(cp)];
      if (!std::isfinite(v)) continue;
      const int x = xpos(cp), y = ypos(v);
      cv.marker(x, y, c);
      if (prev_x >= 0) cv.line(prev_x, prev_y, x, y, c);
      prev_x = x;
      prev_y = y;
    }
    cv.text(px1 - 24, py0 + 4 + 12 * t, "t" + std::to_string(t), c);
  }
  cv.save(out_png);
}

}  // namespace incdet
