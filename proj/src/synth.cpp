#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "fsens/data.hpp"
#include "fsens/errors.hpp"

namespace fsens {

namespace {

enum class ShapeKind : int {
  kDisk,
  kRing,
  kBox,
  kBoxOutline,
  kTriangle,
  kCross,
  kBar,
  kEllipse,
  kDiamond,
  kStar,
  kCount
};

// Generator regime; the shifted style changes the rendering statistics
// while keeping the per-class families.
struct SynthStyle {
  double size_lo, size_hi;
  double noise_std;
  double pose_jitter;
  double rotation_jitter;
  int clutter_blobs;
  bool textured_background;
  double intensity_jitter;
  double size_jitter;
};

constexpr SynthStyle kDefaultStyle{0.22, 0.40, 0.08, 0.12, 0.30, 3, false, 0.15, 0.2};
constexpr SynthStyle kShiftedStyle{0.15, 0.28, 0.18, 0.16, 0.60, 5, true, 0.3, 0.25};

struct ClassFamily {
  ShapeKind kind;
  double size;
  double aspect;
  double stroke;
  double orientation;
  double tex_freq;
  double tex_angle;
  double tex_amp;
  double fg;
  double bg;
};

ClassFamily draw_family(std::uint64_t seed, std::size_t c) {
  Rng rng = Rng::stream(seed, "synth-class", {c});
  ClassFamily f{};
  // Cycle through the kinds so every corpus covers all of them, then
  // randomise the remaining parameters.
  f.kind = static_cast<ShapeKind>(c % static_cast<std::size_t>(ShapeKind::kCount));
  f.size = rng.uniform(0.0, 1.0);  // mapped into the style's range at render time
  f.aspect = rng.uniform(0.55, 1.0);
  f.stroke = rng.uniform(0.05, 0.14);
  f.orientation = rng.uniform(0.0, std::numbers::pi);
  f.tex_freq = rng.uniform(1.5, 7.0);
  f.tex_angle = rng.uniform(0.0, std::numbers::pi);
  f.tex_amp = rng.uniform(0.0, 0.7);
  f.fg = rng.uniform(0.6, 1.0);
  f.bg = rng.uniform(0.0, 0.3);
  return f;
}

double box_sdf(double x, double y, double hx, double hy) {
  const double dx = std::abs(x) - hx, dy = std::abs(y) - hy;
  const double ox = std::max(dx, 0.0), oy = std::max(dy, 0.0);
  return std::sqrt(ox * ox + oy * oy) + std::min(std::max(dx, dy), 0.0);
}

// Signed distance (in normalised units) of a point in the shape's frame.
double shape_sdf(const ClassFamily& f, double r, double x, double y) {
  const double stroke = f.stroke;
  switch (f.kind) {
    case ShapeKind::kDisk:
      return std::hypot(x, y) - r;
    case ShapeKind::kRing:
      return std::abs(std::hypot(x, y) - r) - stroke;
    case ShapeKind::kBox:
      return box_sdf(x, y, r, r * f.aspect);
    case ShapeKind::kBoxOutline:
      return std::abs(box_sdf(x, y, r, r * f.aspect)) - stroke * 0.8;
    case ShapeKind::kTriangle: {
      // Equilateral triangle with half-side r.
      const double k = std::sqrt(3.0);
      double px = std::abs(x) - r;
      double py = y + r / k;
      if (px + k * py > 0.0) {
        const double nx = (px - k * py) / 2.0, ny = (-k * px - py) / 2.0;
        px = nx;
        py = ny;
      }
      px -= std::clamp(px, -2.0 * r, 0.0);
      return py > 0.0 ? -std::hypot(px, py) : std::hypot(px, py);
    }
    case ShapeKind::kCross:
      return std::min(box_sdf(x, y, r, stroke * 1.2), box_sdf(x, y, stroke * 1.2, r));
    case ShapeKind::kBar:
      return box_sdf(x, y, r * 1.1, stroke * 1.5);
    case ShapeKind::kEllipse: {
      const double ry = r * f.aspect;
      return (std::hypot(x / r, y / ry) - 1.0) * std::min(r, ry);
    }
    case ShapeKind::kDiamond:
      return (std::abs(x) + std::abs(y) * (1.0 / f.aspect) - r) / std::numbers::sqrt2;
    case ShapeKind::kStar: {
      const double a = std::atan2(y, x);
      const double rr = r * (0.62 + 0.38 * std::cos(5.0 * a));
      return std::hypot(x, y) - rr;
    }
    case ShapeKind::kCount:
      break;
  }
  return 1.0;
}

void check_synth_args(std::size_t n_classes, std::size_t per_class, std::size_t image_size) {
  if (n_classes < 10) {
    throw ParameterError("synth_generate: n_classes must be >= 10, got " + std::to_string(n_classes));
  }
  if (n_classes > 256) {
    throw ParameterError("synth_generate: n_classes must be <= 256 (u8 labels), got " +
                         std::to_string(n_classes));
  }
  if (per_class < 30) {
    throw ParameterError("synth_generate: per_class must be >= 30, got " + std::to_string(per_class));
  }
  if (image_size < 16 || image_size > 64) {
    throw ParameterError("synth_generate: image_size must be in [16, 64], got " +
                         std::to_string(image_size));
  }
}

Dataset generate(std::uint64_t seed, std::size_t n_classes, std::size_t per_class,
                 std::size_t image_size, const SynthStyle& style, std::string_view sample_label) {
  check_synth_args(n_classes, per_class, image_size);
  Dataset ds;
  ds.height = ds.width = image_size;
  ds.channels = 1;
  ds.n_classes = n_classes;
  ds.samples.reserve(n_classes * per_class);
  const double n = static_cast<double>(image_size);
  std::vector<double> canvas(image_size * image_size);
  for (std::size_t c = 0; c < n_classes; ++c) {
    const ClassFamily fam = draw_family(seed, c);
    const double base_size = style.size_lo + fam.size * (style.size_hi - style.size_lo);
    for (std::size_t i = 0; i < per_class; ++i) {
      Rng rng = Rng::stream(seed, sample_label, {c, i});
      const double cx = rng.uniform(-style.pose_jitter, style.pose_jitter);
      const double cy = rng.uniform(-style.pose_jitter, style.pose_jitter);
      const double r = base_size * rng.uniform(1.0 - style.size_jitter, 1.0 + style.size_jitter);
      const double rot = fam.orientation + rng.uniform(-style.rotation_jitter, style.rotation_jitter);
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double contrast = rng.uniform(0.8, 1.2);
      const double fg_level = std::clamp(fam.fg + rng.uniform(-style.intensity_jitter, style.intensity_jitter), 0.0, 1.0);
      const double bg_level = std::clamp(fam.bg + rng.uniform(-style.intensity_jitter, style.intensity_jitter) * 0.5, 0.0, 1.0);
      const double bg_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double bg_angle = rng.uniform(0.0, std::numbers::pi);
      const double cr = std::cos(rot), sr = std::sin(rot);
      const double tc = std::cos(fam.tex_angle), ts = std::sin(fam.tex_angle);
      const double pixel = 2.0 / n;  // normalised width of one pixel
      for (std::size_t y = 0; y < image_size; ++y) {
        for (std::size_t x = 0; x < image_size; ++x) {
          // Normalised coordinates in [-1, 1].
          const double u = (static_cast<double>(x) + 0.5) / n * 2.0 - 1.0;
          const double v = (static_cast<double>(y) + 0.5) / n * 2.0 - 1.0;
          const double du = u - cx, dv = v - cy;
          const double lx = cr * du + sr * dv;
          const double ly = -sr * du + cr * dv;
          const double d = shape_sdf(fam, r, lx, ly);
          const double inside = std::clamp(0.5 - d / pixel, 0.0, 1.0);
          const double grating =
              0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * fam.tex_freq * (tc * lx + ts * ly) + phase);
          const double fg = fg_level * (1.0 - fam.tex_amp + fam.tex_amp * grating);
          double bg = bg_level;
          if (style.textured_background) {
            bg += 0.15 * std::sin(9.0 * (std::cos(bg_angle) * u + std::sin(bg_angle) * v) + bg_phase);
          }
          canvas[y * image_size + x] = bg + inside * (fg - bg) * contrast;
        }
      }
      for (int b = 0; b < style.clutter_blobs; ++b) {
        const double bx = rng.uniform(-0.9, 0.9), by = rng.uniform(-0.9, 0.9);
        const double br = rng.uniform(0.04, 0.1);
        const double level = rng.uniform(0.2, 0.8);
        for (std::size_t y = 0; y < image_size; ++y) {
          for (std::size_t x = 0; x < image_size; ++x) {
            const double u = (static_cast<double>(x) + 0.5) / n * 2.0 - 1.0;
            const double v = (static_cast<double>(y) + 0.5) / n * 2.0 - 1.0;
            const double w = std::clamp(0.5 - (std::hypot(u - bx, v - by) - br) / pixel, 0.0, 1.0);
            double& px = canvas[y * image_size + x];
            px = px * (1.0 - w) + level * w;
          }
        }
      }
      ImageSample s;
      s.label = static_cast<std::uint32_t>(c);
      s.source_id = c * per_class + i;
      s.pixels.resize(image_size * image_size);
      for (std::size_t p = 0; p < canvas.size(); ++p) {
        const double val = canvas[p] + style.noise_std * rng.normal();
        s.pixels[p] = static_cast<std::uint8_t>(std::lround(std::clamp(val, 0.0, 1.0) * 255.0));
      }
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

}  // namespace

Dataset synth_generate(std::uint64_t seed, std::size_t n_classes, std::size_t per_class,
                       std::size_t image_size) {
  return generate(seed, n_classes, per_class, image_size, kDefaultStyle, "synth-sample");
}

Dataset synth_generate_shifted(std::uint64_t seed, std::size_t n_classes, std::size_t per_class,
                               std::size_t image_size) {
  return generate(seed, n_classes, per_class, image_size, kShiftedStyle, "synth-sample-shifted");
}

}  // namespace fsens
