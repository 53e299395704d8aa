#pragma once

#include <cstdint>
#include <cstdio>
#include <istream>
#include <ostream>
#include <random>

#include "iff/tensor.hpp"

namespace iff {

/// Deterministic generator; the distributions are written out so streams are identical
/// across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next() { return eng_(); }
  double uniform() { return double(eng_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const auto span = std::uint64_t(hi - lo) + 1;
    return lo + std::int64_t(eng_() % span);
  }
  double normal() {
    if (spare_) {
      double v = *spare_;
      spare_.reset();
      return v;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * 3.14159265358979323846 * u2);
    return r * std::cos(2.0 * 3.14159265358979323846 * u2);
  }
  double normal(double mean, double sd) { return mean + sd * normal(); }

 private:
  std::mt19937_64 eng_;
  std::optional<double> spare_;
};

enum class ShapeClass : std::uint8_t { Disc = 0, Square = 1 };
inline constexpr std::size_t kNumClasses = 2;

inline const char* class_name(ShapeClass c) { return c == ShapeClass::Disc ? "disc" : "square"; }

inline ShapeClass parse_class(const std::string& s) {
  if (s == "disc") return ShapeClass::Disc;
  if (s == "square") return ShapeClass::Square;
  throw std::invalid_argument("unknown shape class '" + s + "'");
}

/// Axis-aligned box; (x, y) is the top-left corner, in pixels.
struct Box {
  double x = 0, y = 0, w = 0, h = 0;

  double area() const { return std::max(0.0, w) * std::max(0.0, h); }
  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }
  bool operator==(const Box&) const = default;
};

inline double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

struct SceneObject {
  ShapeClass cls = ShapeClass::Disc;
  Box box;
  bool operator==(const SceneObject&) const = default;
};

struct SceneSpec {
  std::size_t size = 48;
  std::size_t min_objects = 1;
  std::size_t max_objects = 4;
  int min_extent = 8;
  int max_extent = 20;
  double noise_level = 0.25;
  double background = 0.1;
  double foreground = 0.9;
  std::size_t cell = 4;  ///< stride of the detector grid; object centres get distinct cells

  void validate() const {
    if (size < 8 || min_objects < 1 || max_objects < min_objects || min_extent < 2 ||
        max_extent < min_extent || std::size_t(max_extent) > size || noise_level < 0.0 || cell == 0)
      throw std::invalid_argument("SceneSpec: invalid bounds");
  }
};

/// A rendered scene. Pixels are a pure function of (seed, objects, noise_level, spec).
struct SyntheticScene {
  std::uint64_t seed = 0;
  double noise_level = 0.0;
  std::vector<SceneObject> objects;
  Tensor image;  ///< [1, size, size], values in [0, 1]
};

namespace detail {

// Fraction of pixel (r, c) covered by the object, by 4x4 supersampling.
inline double coverage(const SceneObject& o, std::size_t r, std::size_t c) {
  constexpr int kSub = 4;
  int hits = 0;
  for (int i = 0; i < kSub; ++i)
    for (int j = 0; j < kSub; ++j) {
      const double py = double(r) + (i + 0.5) / kSub;
      const double px = double(c) + (j + 0.5) / kSub;
      bool inside = false;
      if (o.cls == ShapeClass::Disc) {
        const double rad = 0.5 * o.box.w;
        const double dx = px - o.box.cx(), dy = py - o.box.cy();
        inside = dx * dx + dy * dy <= rad * rad;
      } else {
        inside = px >= o.box.x && px < o.box.x + o.box.w && py >= o.box.y && py < o.box.y + o.box.h;
      }
      hits += inside;
    }
  return double(hits) / (kSub * kSub);
}

inline bool boxes_overlap(const Box& a, const Box& b) {
  return a.x < b.x + b.w && b.x < a.x + a.w && a.y < b.y + b.h && b.y < a.y + a.h;
}

}  // namespace detail

/// Renders objects over a flat background with additive Gaussian noise, clipped to [0, 1].
inline Tensor render_scene(const std::vector<SceneObject>& objects, double noise_level, std::uint64_t noise_seed,
                           const SceneSpec& spec = {}) {
  const std::size_t S = spec.size;
  Tensor img({1, S, S}, spec.background);
  for (const auto& o : objects)
    for (std::size_t r = 0; r < S; ++r)
      for (std::size_t c = 0; c < S; ++c) {
        const double cov = detail::coverage(o, r, c);
        if (cov > 0.0) {
          double& p = img.at(0, r, c);
          p = std::max(p, spec.background + (spec.foreground - spec.background) * cov);
        }
      }
  if (noise_level > 0.0) {
    Rng rng(noise_seed ^ 0x9e3779b97f4a7c15ULL);
    for (double& p : img.data()) p += rng.normal(0.0, noise_level);
  }
  for (double& p : img.data()) p = std::clamp(p, 0.0, 1.0);
  return img;
}

/// Samples 1..4 non-overlapping objects with centres in distinct grid cells.
inline std::vector<SceneObject> sample_objects(std::uint64_t seed, const SceneSpec& spec) {
  spec.validate();
  Rng rng(seed);
  const auto count = std::size_t(rng.uniform_int(std::int64_t(spec.min_objects), std::int64_t(spec.max_objects)));
  std::vector<SceneObject> objs;
  for (int attempt = 0; attempt < 400 && objs.size() < count; ++attempt) {
    SceneObject o;
    o.cls = rng.uniform_int(0, 1) == 0 ? ShapeClass::Disc : ShapeClass::Square;
    const auto ext = double(rng.uniform_int(spec.min_extent / 2, spec.max_extent / 2) * 2);
    o.box.w = o.box.h = ext;
    o.box.x = double(rng.uniform_int(0, std::int64_t(spec.size) - std::int64_t(ext)));
    o.box.y = double(rng.uniform_int(0, std::int64_t(spec.size) - std::int64_t(ext)));
    const auto cell = [&](const Box& b) {
      return std::pair{std::size_t(b.cx()) / spec.cell, std::size_t(b.cy()) / spec.cell};
    };
    bool ok = true;
    for (const auto& p : objs)
      if (detail::boxes_overlap(p.box, o.box) || cell(p.box) == cell(o.box)) ok = false;
    if (ok) objs.push_back(o);
  }
  return objs;
}

inline SyntheticScene gen_scene(std::uint64_t seed, const SceneSpec& spec = {}) {
  SyntheticScene s;
  s.seed = seed;
  s.noise_level = spec.noise_level;
  s.objects = sample_objects(seed, spec);
  s.image = render_scene(s.objects, spec.noise_level, seed, spec);
  return s;
}

/// Same objects, rendered without noise.
inline Tensor render_clean(const SyntheticScene& s, const SceneSpec& spec = {}) {
  return render_scene(s.objects, 0.0, s.seed, spec);
}

// Manifest: a header line then one line per scene:
//   scene <seed> <noise> <n> (<class> <x> <y> <w> <h>){n}
// Pixels are never stored; they are re-rendered from each record.

inline constexpr const char* kManifestHeader = "# iff-manifest v1";

inline void write_manifest(std::ostream& os, const std::vector<SyntheticScene>& scenes) {
  os << kManifestHeader << '\n';
  char buf[64];
  for (const auto& s : scenes) {
    std::snprintf(buf, sizeof buf, "%.17g", s.noise_level);
    os << "scene " << s.seed << ' ' << buf << ' ' << s.objects.size();
    for (const auto& o : s.objects)
      os << ' ' << class_name(o.cls) << ' ' << o.box.x << ' ' << o.box.y << ' ' << o.box.w << ' ' << o.box.h;
    os << '\n';
  }
}

inline std::vector<SyntheticScene> read_manifest(std::istream& is, const SceneSpec& spec = {}) {
  std::string line;
  if (!std::getline(is, line) || line != kManifestHeader)
    throw std::runtime_error("manifest: missing or unsupported header");
  std::vector<SyntheticScene> out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag;
    SyntheticScene s;
    std::size_t n = 0;
    if (!(ls >> tag >> s.seed >> s.noise_level >> n) || tag != "scene")
      throw std::runtime_error("manifest: malformed record at line " + std::to_string(lineno));
    for (std::size_t i = 0; i < n; ++i) {
      std::string cls;
      SceneObject o;
      if (!(ls >> cls >> o.box.x >> o.box.y >> o.box.w >> o.box.h))
        throw std::runtime_error("manifest: truncated object list at line " + std::to_string(lineno));
      o.cls = parse_class(cls);
      s.objects.push_back(o);
    }
    s.image = render_scene(s.objects, s.noise_level, s.seed, spec);
    out.push_back(std::move(s));
  }
  return out;
}

/// count scenes with seeds derived from a base seed.
inline std::vector<SyntheticScene> gen_dataset(std::size_t count, std::uint64_t seed, double noise_level,
                                               SceneSpec spec = {}) {
  spec.noise_level = noise_level;
  Rng seeds(seed);
  std::vector<SyntheticScene> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(gen_scene(seeds.next(), spec));
  return out;
}

}  // namespace iff
