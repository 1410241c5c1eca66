#include "dapo/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <stdexcept>

#include "dapo/png_io.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dapo {

namespace {

constexpr int kMinDefectPixels = 21;  // 0.5% of a 64x64 canvas

int clampi(int v, int lo, int hi) { return std::max(lo, std::min(hi, v)); }

std::uint8_t noisy(int base, int spread, Rng& rng) {
  return static_cast<std::uint8_t>(clampi(base + rng.range(-spread, spread), 0, 255));
}

void put_px(RenderedObject& obj, int x, int y, std::uint8_t r, std::uint8_t g,
            std::uint8_t b) {
  std::size_t i = 3 * (static_cast<std::size_t>(y) * obj.size + x);
  obj.rgb[i] = r;
  obj.rgb[i + 1] = g;
  obj.rgb[i + 2] = b;
}

std::uint8_t background_value(Rng& rng) { return noisy(225, 6, rng); }

// Silhouette dilated by 2 px (chebyshev); defects must stay inside this.
std::vector<std::uint8_t> dilate2(const std::vector<std::uint8_t>& sil, int s) {
  std::vector<std::uint8_t> out(sil.size(), 0);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      if (!sil[static_cast<std::size_t>(y) * s + x]) continue;
      for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx) {
          int ny = y + dy, nx = x + dx;
          if (ny >= 0 && ny < s && nx >= 0 && nx < s)
            out[static_cast<std::size_t>(ny) * s + nx] = 1;
        }
    }
  return out;
}

// Flat index of a uniformly chosen silhouette pixel.
int pick_inside(const std::vector<std::uint8_t>& sil, int s, Rng& rng) {
  for (int tries = 0; tries < 4096; ++tries) {
    int x = rng.range(0, s - 1), y = rng.range(0, s - 1);
    if (sil[static_cast<std::size_t>(y) * s + x]) return y * s + x;
  }
  throw std::runtime_error("render_defect: empty silhouette");
}

// Stamp a small disc brush, collecting touched in-region pixels.
void brush(RenderedObject& obj, const std::vector<std::uint8_t>& region,
           double cx, double cy, int radius, std::uint8_t r, std::uint8_t g,
           std::uint8_t b, int jitter, Rng& rng, std::set<int>& touched) {
  int s = obj.size;
  int x0 = clampi(static_cast<int>(cx) - radius, 0, s - 1);
  int x1 = clampi(static_cast<int>(cx) + radius, 0, s - 1);
  int y0 = clampi(static_cast<int>(cy) - radius, 0, s - 1);
  int y1 = clampi(static_cast<int>(cy) + radius, 0, s - 1);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      double dx = x - cx, dy = y - cy;
      if (dx * dx + dy * dy > radius * radius + 0.5) continue;
      int idx = y * s + x;
      if (!region[static_cast<std::size_t>(idx)]) continue;
      put_px(obj, x, y, noisy(r, jitter, rng), noisy(g, jitter, rng),
             noisy(b, jitter, rng));
      touched.insert(idx);
    }
}

std::vector<int> defect_scratch(RenderedObject& obj,
                                const std::vector<std::uint8_t>& region, Rng& rng) {
  int s = obj.size;
  std::set<int> touched;
  int start = pick_inside(obj.silhouette, s, rng);
  double x = start % s, y = start / s;
  double angle = rng.uniform(0.0, 6.283185307179586);
  int segments = rng.range(2, 3);
  for (int seg = 0; seg < segments; ++seg) {
    double len = rng.uniform(12.0, 20.0);
    for (double t = 0.0; t <= len; t += 0.5) {
      double px = x + t * std::cos(angle), py = y + t * std::sin(angle);
      brush(obj, region, px, py, 2, 248, 248, 242, 5, rng, touched);
    }
    x += len * std::cos(angle);
    y += len * std::sin(angle);
    angle += rng.uniform(-1.0, 1.0);
  }
  return {touched.begin(), touched.end()};
}

std::vector<int> defect_hole(RenderedObject& obj,
                             const std::vector<std::uint8_t>& region, Rng& rng) {
  int s = obj.size;
  std::set<int> touched;
  int c = pick_inside(obj.silhouette, s, rng);
  double cx = c % s, cy = c / s;
  double rx = rng.uniform(5.0, 9.0), ry = rng.uniform(5.0, 9.0);
  double rot = rng.uniform(0.0, 3.141592653589793);
  double co = std::cos(rot), si = std::sin(rot);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      double dx = x - cx, dy = y - cy;
      double u = (co * dx + si * dy) / rx, v = (-si * dx + co * dy) / ry;
      if (u * u + v * v > 1.0) continue;
      int idx = y * s + x;
      if (!region[static_cast<std::size_t>(idx)]) continue;
      put_px(obj, x, y, noisy(14, 4, rng), noisy(12, 4, rng), noisy(16, 4, rng));
      touched.insert(idx);
    }
  return {touched.begin(), touched.end()};
}

std::vector<int> defect_stain(RenderedObject& obj,
                              const std::vector<std::uint8_t>& region, Rng& rng) {
  int s = obj.size;
  std::set<int> touched;
  int c = pick_inside(obj.silhouette, s, rng);
  double cx = c % s, cy = c / s;
  double radius = rng.uniform(8.0, 13.0);
  // a muddy tint blended with falloff toward the rim
  double tr = 120 + rng.range(-20, 20), tg = 85 + rng.range(-15, 15), tb = 50 + rng.range(-15, 15);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      double dx = x - cx, dy = y - cy;
      double d2 = (dx * dx + dy * dy) / (radius * radius);
      if (d2 > 1.0) continue;
      int idx = y * s + x;
      if (!region[static_cast<std::size_t>(idx)]) continue;
      double a = 0.45 + 0.45 * (1.0 - d2);
      std::size_t i = 3 * static_cast<std::size_t>(idx);
      obj.rgb[i] = static_cast<std::uint8_t>(clampi(
          static_cast<int>((1 - a) * obj.rgb[i] + a * tr), 0, 255));
      obj.rgb[i + 1] = static_cast<std::uint8_t>(clampi(
          static_cast<int>((1 - a) * obj.rgb[i + 1] + a * tg), 0, 255));
      obj.rgb[i + 2] = static_cast<std::uint8_t>(clampi(
          static_cast<int>((1 - a) * obj.rgb[i + 2] + a * tb), 0, 255));
      touched.insert(idx);
    }
  return {touched.begin(), touched.end()};
}

std::vector<int> defect_crack(RenderedObject& obj,
                              const std::vector<std::uint8_t>& region, Rng& rng) {
  int s = obj.size;
  std::set<int> touched;
  int start = pick_inside(obj.silhouette, s, rng);
  double x = start % s, y = start / s;
  double angle = rng.uniform(0.0, 6.283185307179586);
  int steps = rng.range(35, 55);
  double bx = 0, by = 0, ba = 0;
  int branch_at = steps / 2;
  for (int i = 0; i < steps; ++i) {
    brush(obj, region, x, y, 2, 26, 20, 20, 4, rng, touched);
    angle += rng.uniform(-0.6, 0.6);
    x += std::cos(angle);
    y += std::sin(angle);
    if (i == branch_at) {
      bx = x;
      by = y;
      ba = angle + (rng.uniform() < 0.5 ? 1.1 : -1.1);
    }
  }
  int branch_steps = rng.range(16, 26);
  for (int i = 0; i < branch_steps; ++i) {
    brush(obj, region, bx, by, 2, 26, 20, 20, 4, rng, touched);
    ba += rng.uniform(-0.5, 0.5);
    bx += std::cos(ba);
    by += std::sin(ba);
  }
  return {touched.begin(), touched.end()};
}

// Local warp of the object boundary: pixels in a disc around a boundary point
// resample from a radially pushed source location.
std::vector<int> defect_bent(RenderedObject& obj,
                             const std::vector<std::uint8_t>& region, Rng& rng) {
  int s = obj.size;
  std::vector<int> boundary;
  for (int y = 1; y < s - 1; ++y)
    for (int x = 1; x < s - 1; ++x) {
      std::size_t idx = static_cast<std::size_t>(y) * s + x;
      if (!obj.silhouette[idx]) continue;
      if (!obj.silhouette[idx - 1] || !obj.silhouette[idx + 1] ||
          !obj.silhouette[idx - s] || !obj.silhouette[idx + s])
        boundary.push_back(static_cast<int>(idx));
    }
  if (boundary.empty()) throw std::runtime_error("render_defect: no boundary for bent");

  for (int attempt = 0; attempt < 8; ++attempt) {
    int c = boundary[rng.below(boundary.size())];
    double cx = c % s, cy = c / s;
    double radius = rng.uniform(6.0, 9.0) + attempt;
    std::vector<std::uint8_t> before = obj.rgb;
    std::set<int> touched;
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        double dx = x - cx, dy = y - cy;
        double d = std::sqrt(dx * dx + dy * dy);
        if (d > radius) continue;
        int idx = y * s + x;
        if (!region[static_cast<std::size_t>(idx)]) continue;
        double push = 1.0 + 0.8 * (1.0 - d / radius);
        int sx = clampi(static_cast<int>(std::lround(cx + dx * push)), 0, s - 1);
        int sy = clampi(static_cast<int>(std::lround(cy + dy * push)), 0, s - 1);
        std::size_t src = 3 * (static_cast<std::size_t>(sy) * s + sx);
        put_px(obj, x, y, before[src], before[src + 1], before[src + 2]);
      }
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        std::size_t i = 3 * (static_cast<std::size_t>(y) * s + x);
        if (std::abs(int(obj.rgb[i]) - int(before[i])) > 6 ||
            std::abs(int(obj.rgb[i + 1]) - int(before[i + 1])) > 6 ||
            std::abs(int(obj.rgb[i + 2]) - int(before[i + 2])) > 6)
          touched.insert(y * s + x);
      }
    if (static_cast<int>(touched.size()) >= kMinDefectPixels)
      return {touched.begin(), touched.end()};
    obj.rgb = before;  // too subtle; retry wider
  }
  throw std::runtime_error("render_defect: bent warp stayed invisible");
}

// Erase a disc of the object back to background statistics.
std::vector<int> defect_missing(RenderedObject& obj,
                                const std::vector<std::uint8_t>& region, Rng& rng) {
  int s = obj.size;
  std::set<int> touched;
  double radius = rng.uniform(7.0, 11.0);
  double cx = 0, cy = 0;
  bool ok = false;
  for (int tries = 0; tries < 256 && !ok; ++tries) {
    int c = pick_inside(obj.silhouette, s, rng);
    cx = c % s;
    cy = c / s;
    // want a real bite out of the object, mostly over silhouette
    int inside = 0, total = 0;
    for (int y = clampi(int(cy - radius), 0, s - 1); y <= clampi(int(cy + radius), 0, s - 1); ++y)
      for (int x = clampi(int(cx - radius), 0, s - 1); x <= clampi(int(cx + radius), 0, s - 1); ++x) {
        double dx = x - cx, dy = y - cy;
        if (dx * dx + dy * dy > radius * radius) continue;
        ++total;
        if (obj.silhouette[static_cast<std::size_t>(y) * s + x]) ++inside;
      }
    ok = total > 0 && inside >= (3 * total) / 4;
  }
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      double dx = x - cx, dy = y - cy;
      if (dx * dx + dy * dy > radius * radius) continue;
      int idx = y * s + x;
      if (!region[static_cast<std::size_t>(idx)]) continue;
      std::uint8_t v = background_value(rng);
      std::uint8_t v2 = background_value(rng);
      std::uint8_t v3 = background_value(rng);
      put_px(obj, x, y, v, v2, v3);
      touched.insert(idx);
    }
  return {touched.begin(), touched.end()};
}

struct ShapeGeom {
  double half_x = 0, half_y = 0;  // extents, for placement
  std::function<bool(double, double)> inside;
};

ShapeGeom make_geom(const std::string& shape, int s, Rng& rng) {
  double S = s;
  ShapeGeom g;
  if (shape == "disk") {
    double r = rng.uniform(0.33, 0.42) * S;
    g.half_x = g.half_y = r;
    g.inside = [r](double dx, double dy) { return dx * dx + dy * dy <= r * r; };
  } else if (shape == "square") {
    double a = rng.uniform(0.29, 0.40) * S;
    g.half_x = g.half_y = a;
    g.inside = [a](double dx, double dy) {
      return std::abs(dx) <= a && std::abs(dy) <= a;
    };
  } else if (shape == "triangle") {
    double w = rng.uniform(0.82, 0.94) * S;  // apex up, base down
    double h = w;
    g.half_x = w / 2;
    g.half_y = h / 2;
    g.inside = [w, h](double dx, double dy) {
      if (dy < -h / 2 || dy > h / 2) return false;
      double frac = (dy + h / 2) / h;
      return std::abs(dx) <= frac * w / 2;
    };
  } else if (shape == "ring") {
    double ro = rng.uniform(0.38, 0.44) * S;
    double ri = 0.45 * ro;
    g.half_x = g.half_y = ro;
    g.inside = [ro, ri](double dx, double dy) {
      double d2 = dx * dx + dy * dy;
      return d2 <= ro * ro && d2 >= ri * ri;
    };
  } else if (shape == "cross") {
    double L = rng.uniform(0.40, 0.46) * S;
    double t = 0.45 * L;
    g.half_x = g.half_y = L;
    g.inside = [L, t](double dx, double dy) {
      return (std::abs(dx) <= t && std::abs(dy) <= L) ||
             (std::abs(dy) <= t && std::abs(dx) <= L);
    };
  } else if (shape == "capsule") {
    double r = rng.uniform(0.19, 0.22) * S;
    double L = 0.26 * S;
    g.half_x = L + r;
    g.half_y = r;
    g.inside = [L, r](double dx, double dy) {
      double ax = std::max(0.0, std::abs(dx) - L);
      return ax * ax + dy * dy <= r * r;
    };
  } else {
    throw std::invalid_argument("render_object: unknown shape '" + shape + "'");
  }
  return g;
}

std::string sample_name(const char* prefix, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%04d", prefix, index);
  return buf;
}

Tensor rgb_to_tensor(const std::vector<std::uint8_t>& rgb, int s) {
  Tensor t(Shape{s, s, 3});
  for (std::size_t i = 0; i < rgb.size(); ++i)
    t.data()[i] = static_cast<double>(rgb[i]) / 255.0;
  return t;
}

std::array<std::uint8_t, 3> mask_palette_entry(int channel) {
  // distinct hues; index 0 stays black for normal
  static const std::array<std::uint8_t, 3> kColors[] = {
      {0, 0, 0},      {230, 60, 60},  {60, 200, 90},  {70, 110, 240},
      {240, 200, 40}, {200, 70, 220}, {60, 210, 210}, {240, 140, 40},
      {150, 150, 150}};
  return kColors[channel % 9];
}

}  // namespace

CorpusSpec CorpusSpec::defaults() {
  CorpusSpec s;
  // Both palettes stay bright and saturated so that defect colors (near-white
  // scratches, near-black holes, muddy stains) are out-of-gamut on both
  // splits; the split shift is a disjoint set of hues, which a color-histogram
  // witness separates cleanly.
  s.train_palette = {{"crimson", 205, 45, 70},  {"emerald", 40, 170, 100},
                     {"amber", 230, 165, 40},   {"teal", 35, 140, 150},
                     {"violet", 135, 80, 200},  {"coral", 240, 115, 90}};
  s.target_palette = {{"navy", 70, 110, 215},   {"olive", 150, 170, 45},
                      {"salmon", 250, 170, 140}, {"gold", 215, 200, 80},
                      {"indigo", 90, 60, 235},  {"slate", 130, 160, 180}};
  return s;
}

void CorpusSpec::validate() const {
  if (image_size < 16) throw std::invalid_argument("corpus: image_size too small");
  if (object_shapes.empty()) throw std::invalid_argument("corpus: no object shapes");
  if (train_palette.empty() || target_palette.empty())
    throw std::invalid_argument("corpus: empty palette");
  for (const auto& a : train_palette)
    for (const auto& b : target_palette)
      if (a.name == b.name)
        throw std::invalid_argument("corpus: palettes share color '" + a.name + "'");
  if (train_defects.empty()) throw std::invalid_argument("corpus: no train defects");
  for (const auto& u : unseen_defects)
    if (std::find(train_defects.begin(), train_defects.end(), u) != train_defects.end())
      throw std::invalid_argument("corpus: unseen defect '" + u + "' also in train set");
  if (train_count < 2 || target_count < 2)
    throw std::invalid_argument("corpus: split sizes must be at least 2");
  if (anomalous_fraction <= 0.0 || anomalous_fraction >= 1.0)
    throw std::invalid_argument("corpus: anomalous_fraction must lie in (0,1)");
}

std::vector<std::string> CorpusSpec::target_defects() const {
  std::vector<std::string> all = train_defects;
  all.insert(all.end(), unseen_defects.begin(), unseen_defects.end());
  return all;
}

RenderedObject render_object(const ObjectParams& params, int image_size, Rng& rng) {
  RenderedObject obj;
  obj.size = image_size;
  obj.rgb.resize(static_cast<std::size_t>(image_size) * image_size * 3);
  obj.silhouette.assign(static_cast<std::size_t>(image_size) * image_size, 0);

  for (int y = 0; y < image_size; ++y)
    for (int x = 0; x < image_size; ++x) {
      std::uint8_t r = background_value(rng), g = background_value(rng),
                   b = background_value(rng);
      put_px(obj, x, y, r, g, b);
    }

  ShapeGeom geom = make_geom(params.shape, image_size, rng);
  double max_jx = std::max(0.0, image_size / 2.0 - geom.half_x - 1.0);
  double max_jy = std::max(0.0, image_size / 2.0 - geom.half_y - 1.0);
  double cx = image_size / 2.0 + rng.uniform(-1.0, 1.0) * std::min(3.0, max_jx);
  double cy = image_size / 2.0 + rng.uniform(-1.0, 1.0) * std::min(3.0, max_jy);

  for (int y = 0; y < image_size; ++y)
    for (int x = 0; x < image_size; ++x) {
      if (!geom.inside(x - cx, y - cy)) continue;
      obj.silhouette[static_cast<std::size_t>(y) * image_size + x] = 1;
      // mild horizontal shading so the fill is not perfectly flat
      int shade = static_cast<int>(8.0 * (x - cx) / image_size);
      put_px(obj, x, y, noisy(params.palette.r + shade, 7, rng),
             noisy(params.palette.g + shade, 7, rng),
             noisy(params.palette.b + shade, 7, rng));
    }
  return obj;
}

std::vector<int> render_defect(RenderedObject& obj, const std::string& defect,
                               Rng& rng) {
  std::vector<std::uint8_t> region = dilate2(obj.silhouette, obj.size);
  for (int attempt = 0; attempt < 16; ++attempt) {
    std::vector<int> px;
    if (defect == "scratch") px = defect_scratch(obj, region, rng);
    else if (defect == "hole") px = defect_hole(obj, region, rng);
    else if (defect == "stain") px = defect_stain(obj, region, rng);
    else if (defect == "crack") px = defect_crack(obj, region, rng);
    else if (defect == "bent") return defect_bent(obj, region, rng);
    else if (defect == "missing") return defect_missing(obj, region, rng);
    else
      throw std::invalid_argument("render_defect: unknown defect '" + defect + "'");
    if (static_cast<int>(px.size()) >= kMinDefectPixels) return px;
    // defect landed almost entirely outside the canvas; redraw
  }
  throw std::runtime_error("render_defect: could not place visible '" + defect + "'");
}

GeneratedCorpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  GeneratedCorpus out;
  out.train_defect_list = spec.train_defects;
  out.target_defect_list = spec.target_defects();
  Rng master(spec.seed);

  auto make_split = [&](int count, const std::vector<PaletteColor>& palette,
                        const std::vector<std::string>& defects,
                        std::uint64_t stream_base, const char* prefix,
                        bool emit_captions) {
    std::vector<SampleRecord> records;
    for (int i = 0; i < count; ++i) {
      Rng rng = master.fork(stream_base + static_cast<std::uint64_t>(i));
      SampleRecord rec;
      rec.name = sample_name(prefix, i);

      ObjectParams params;
      params.shape = spec.object_shapes[rng.below(spec.object_shapes.size())];
      params.palette = palette[rng.below(palette.size())];
      rec.object_class = params.shape;

      RenderedObject obj = render_object(params, spec.image_size, rng);
      rec.mask.assign(obj.silhouette.size(), 0);

      bool anomalous = rng.uniform() < spec.anomalous_fraction;
      if (anomalous) {
        int n_defects = rng.uniform() < 0.3 ? 2 : 1;
        n_defects = std::min<int>(n_defects, static_cast<int>(defects.size()));
        std::vector<int> order(defects.size());
        for (std::size_t k = 0; k < order.size(); ++k) order[k] = static_cast<int>(k);
        rng.shuffle(order);
        for (int d = 0; d < n_defects; ++d) {
          int which = order[static_cast<std::size_t>(d)];
          std::vector<int> px = render_defect(obj, defects[static_cast<std::size_t>(which)], rng);
          // later defect wins where two overlap
          for (int idx : px)
            rec.mask[static_cast<std::size_t>(idx)] =
                static_cast<std::uint8_t>(which + 1);
          rec.defects_present.push_back(defects[static_cast<std::size_t>(which)]);
        }
        rec.label = 1;
      }

      rec.image = rgb_to_tensor(obj.rgb, spec.image_size);
      if (emit_captions)
        out.captions.emplace_back(rec.image, "a photo of a " + params.palette.name +
                                                 " " + params.shape);
      records.push_back(std::move(rec));
    }
    return records;
  };

  out.train = make_split(spec.train_count, spec.train_palette, spec.train_defects,
                         0, "tr", true);
  out.target = make_split(spec.target_count, spec.target_palette,
                          out.target_defect_list, 1ULL << 32, "tg", false);
  return out;
}

void save_split(const std::vector<SampleRecord>& records, const std::string& dir,
                const std::vector<std::string>& defect_list) {
  fs::create_directories(dir);
  fs::create_directories(dir + "/masks");
  fs::create_directories(dir + "/meta");
  {
    std::ofstream f(dir + "/defects.txt");
    if (!f) throw std::runtime_error("save_split: cannot write " + dir + "/defects.txt");
    for (const auto& d : defect_list) f << d << "\n";
  }
  for (const SampleRecord& rec : records) {
    int s = rec.image.dim(0);
    fs::path img_dir = fs::path(dir) / rec.object_class / (rec.label ? "defect" : "good");
    fs::create_directories(img_dir);

    PngImage img;
    img.width = img.height = s;
    img.channels = 3;
    img.pixels.resize(static_cast<std::size_t>(s) * s * 3);
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
      img.pixels[i] = static_cast<std::uint8_t>(
          std::lround(rec.image.data()[i] * 255.0));
    write_png((img_dir / (rec.name + ".png")).string(), img);

    PngImage msk;
    msk.width = msk.height = s;
    msk.indexed = true;
    msk.pixels = rec.mask;
    for (std::size_t c = 0; c <= defect_list.size(); ++c)
      msk.palette.push_back(mask_palette_entry(static_cast<int>(c)));
    write_png(dir + "/masks/" + rec.name + ".png", msk);

    json meta;
    meta["name"] = rec.name;
    meta["object"] = rec.object_class;
    meta["label"] = rec.label;
    meta["defects"] = rec.defects_present;
    std::ofstream f(dir + "/meta/" + rec.name + ".json");
    if (!f) throw std::runtime_error("save_split: cannot write meta for " + rec.name);
    f << meta.dump(2) << "\n";
  }
}

std::vector<std::string> load_defect_list(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_defect_list: cannot open " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

SampleRecord load_sample(const std::string& split_dir, const std::string& name) {
  fs::path meta_path = fs::path(split_dir) / "meta" / (name + ".json");
  std::ifstream f(meta_path);
  if (!f) throw std::runtime_error("load_sample: cannot open " + meta_path.string());
  json meta = json::parse(f);

  SampleRecord rec;
  rec.name = meta.at("name").get<std::string>();
  rec.object_class = meta.at("object").get<std::string>();
  rec.label = meta.at("label").get<int>();
  rec.defects_present = meta.at("defects").get<std::vector<std::string>>();
  if (rec.name != name)
    throw std::runtime_error("load_sample: meta name mismatch for " + name);

  fs::path img_path = fs::path(split_dir) / rec.object_class /
                      (rec.label ? "defect" : "good") / (name + ".png");
  PngImage img = read_png(img_path.string());
  if (img.channels != 3 || img.width != img.height)
    throw std::runtime_error("load_sample: unexpected image format in " +
                             img_path.string());
  rec.image = Tensor(Shape{img.height, img.width, 3});
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    rec.image.data()[i] = static_cast<double>(img.pixels[i]) / 255.0;

  PngImage msk = read_png((fs::path(split_dir) / "masks" / (name + ".png")).string());
  if (!msk.indexed || msk.width != img.width || msk.height != img.height)
    throw std::runtime_error("load_sample: mask/image mismatch for " + name);
  rec.mask = msk.pixels;

  bool any = std::any_of(rec.mask.begin(), rec.mask.end(),
                         [](std::uint8_t v) { return v != 0; });
  if (any != (rec.label == 1))
    throw std::runtime_error("load_sample: label contradicts mask for " + name);
  return rec;
}

std::vector<SampleRecord> load_split(const std::string& split_dir) {
  fs::path meta_dir = fs::path(split_dir) / "meta";
  if (!fs::is_directory(meta_dir))
    throw std::runtime_error("load_split: no meta directory under " + split_dir);
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(meta_dir))
    if (e.path().extension() == ".json") names.push_back(e.path().stem().string());
  std::sort(names.begin(), names.end());
  if (names.empty()) throw std::runtime_error("load_split: empty split " + split_dir);
  std::vector<SampleRecord> out;
  out.reserve(names.size());
  for (const auto& n : names) out.push_back(load_sample(split_dir, n));
  return out;
}

Tensor mask_to_onehot(const SampleRecord& record, int channels, int image_size) {
  if (static_cast<std::size_t>(image_size) * image_size != record.mask.size())
    throw std::invalid_argument("mask_to_onehot: mask size mismatch");
  Tensor t(Shape{channels, image_size, image_size});
  std::size_t plane = static_cast<std::size_t>(image_size) * image_size;
  for (std::size_t i = 0; i < record.mask.size(); ++i) {
    int c = record.mask[i];
    if (c >= channels)
      throw std::invalid_argument("mask_to_onehot: label " + std::to_string(c) +
                                  " exceeds channel count");
    t.data()[static_cast<std::size_t>(c) * plane + i] = 1.0;
  }
  return t;
}

double shift_witness_accuracy(const std::vector<SampleRecord>& train,
                              const std::vector<SampleRecord>& target) {
  if (train.size() < 2 || target.size() < 2)
    throw std::invalid_argument("shift_witness: need at least 2 samples per split");
  constexpr int kBins = 16;
  auto histogram = [](const SampleRecord& rec) {
    std::vector<double> h(3 * kBins, 0.0);
    const auto& d = rec.image.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      int bin = std::min(kBins - 1, static_cast<int>(d[i] * kBins));
      h[static_cast<std::size_t>((i % 3) * kBins + bin)] += 1.0;
    }
    double n = static_cast<double>(d.size()) / 3.0;
    for (double& v : h) v /= n;
    return h;
  };
  auto centroid = [&](const std::vector<SampleRecord>& recs, std::size_t lo,
                      std::size_t hi) {
    std::vector<double> c(3 * kBins, 0.0);
    for (std::size_t i = lo; i < hi; ++i) {
      auto h = histogram(recs[i]);
      for (std::size_t k = 0; k < c.size(); ++k) c[k] += h[k];
    }
    for (double& v : c) v /= static_cast<double>(hi - lo);
    return c;
  };
  auto dist2 = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] - b[k]) * (a[k] - b[k]);
    return s;
  };
  auto c_train = centroid(train, 0, train.size() / 2);
  auto c_target = centroid(target, 0, target.size() / 2);
  int correct = 0, total = 0;
  for (std::size_t i = train.size() / 2; i < train.size(); ++i, ++total)
    if (dist2(histogram(train[i]), c_train) <= dist2(histogram(train[i]), c_target))
      ++correct;
  for (std::size_t i = target.size() / 2; i < target.size(); ++i, ++total)
    if (dist2(histogram(target[i]), c_target) < dist2(histogram(target[i]), c_train))
      ++correct;
  return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace dapo
