#pragma once

#include <algorithm>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tcpl/common.hpp"
#include "tcpl/image_io.hpp"
#include "tcpl/image_ops.hpp"
#include "tcpl/tensor.hpp"

namespace tcpl {

enum class Domain { source, target };

inline const char* domain_name(Domain d) {
  return d == Domain::source ? "source" : "target";
}

struct ImageSample {
  Tensor3 image;                  // H x W x 3, values in [0,1]
  std::optional<int> label;       // training-visible; absent on raw targets
  std::optional<int> eval_label;  // metrics-only ground truth, never used by
                                  // the trainer
  Domain domain = Domain::source;
  std::string id;
};

struct DomainDataset {
  std::vector<ImageSample> samples;
  std::vector<std::string> class_names;
  Domain domain = Domain::source;
  int load_warnings = 0;  // unreadable files skipped during folder loading

  int num_classes() const { return static_cast<int>(class_names.size()); }
};

// ---------------------------------------------------------------------------
// Augmentation committee
// ---------------------------------------------------------------------------

struct TransformOp {
  enum class Kind { crop, hflip, color_jitter, cutout };
  Kind kind = Kind::hflip;

  double min_side = 0.8;   // crop: smallest kept side fraction
  double prob = 0.5;       // hflip probability
  double brightness = 0.0; // jitter magnitudes
  double contrast = 0.0;
  double saturation = 0.0;
  double hue = 0.0;
  double frac = 0.25;      // cutout side fraction
};

struct AugmentationPolicy {
  int q = 4;
  std::vector<TransformOp> ops;
  std::uint64_t seed = 0;
};

// The weak/strong family used for the committee: random resized crop,
// horizontal flip, color jitter, cutout.
inline AugmentationPolicy default_policy(int q, std::uint64_t seed) {
  AugmentationPolicy p;
  p.q = q;
  p.seed = seed;
  TransformOp crop_op;
  crop_op.kind = TransformOp::Kind::crop;
  crop_op.min_side = 0.75;
  TransformOp flip;
  flip.kind = TransformOp::Kind::hflip;
  flip.prob = 0.5;
  TransformOp jitter;
  jitter.kind = TransformOp::Kind::color_jitter;
  jitter.brightness = 0.25;
  jitter.contrast = 0.25;
  jitter.saturation = 0.25;
  jitter.hue = 0.05;
  TransformOp cut;
  cut.kind = TransformOp::Kind::cutout;
  cut.frac = 0.25;
  p.ops = {crop_op, flip, jitter, cut};
  return p;
}

inline Tensor3 apply_transform_ops(const Tensor3& image,
                                   const std::vector<TransformOp>& ops,
                                   Rng& rng) {
  Tensor3 out = image;
  for (const auto& op : ops) {
    switch (op.kind) {
      case TransformOp::Kind::crop: {
        const double side_frac = rng.uniform(op.min_side, 1.0);
        const int side_h = std::max(1, static_cast<int>(std::lround(side_frac * out.h)));
        const int side_w = std::max(1, static_cast<int>(std::lround(side_frac * out.w)));
        const int top = static_cast<int>(rng.below(static_cast<std::uint64_t>(out.h - side_h + 1)));
        const int left = static_cast<int>(rng.below(static_cast<std::uint64_t>(out.w - side_w + 1)));
        if (side_h == out.h && side_w == out.w) break;  // identity crop
        out = resize_bilinear(crop(out, top, left, side_h, side_w), image.h,
                              image.w);
        break;
      }
      case TransformOp::Kind::hflip: {
        const double u = rng.uniform();
        if (op.prob > 0.0 && u < op.prob) out = hflip(out);
        break;
      }
      case TransformOp::Kind::color_jitter: {
        // draws happen unconditionally so the stream layout is stable
        const double b = rng.uniform(std::max(0.0, 1.0 - op.brightness),
                                     1.0 + op.brightness);
        const double c = rng.uniform(std::max(0.0, 1.0 - op.contrast),
                                     1.0 + op.contrast);
        const double s = rng.uniform(std::max(0.0, 1.0 - op.saturation),
                                     1.0 + op.saturation);
        const double h = rng.uniform(-op.hue, op.hue);
        if (op.brightness > 0.0) scale_brightness(out, b);
        if (op.contrast > 0.0) scale_contrast(out, c);
        if (op.saturation > 0.0) scale_saturation(out, s);
        if (op.hue > 0.0) shift_hue(out, h);
        break;
      }
      case TransformOp::Kind::cutout: {
        const int side = static_cast<int>(
            std::lround(op.frac * std::min(out.h, out.w)));
        const int top = static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, out.h - side + 1))));
        const int left = static_cast<int>(rng.below(static_cast<std::uint64_t>(std::max(1, out.w - side + 1))));
        if (side > 0) cutout(out, top, left, side);
        break;
      }
    }
  }
  clamp_inplace(out);
  return out;
}

// The j-th view is a pure function of (policy.seed, sample id, epoch, j), so
// committee evaluation can run in any order or in parallel without changing
// results.
inline Tensor3 committee_view(const ImageSample& x,
                              const AugmentationPolicy& policy, int epoch,
                              int j) {
  Rng rng = derive_rng(policy.seed, "augment",
                       {fnv1a64(x.id), static_cast<std::uint64_t>(epoch),
                        static_cast<std::uint64_t>(j)});
  return apply_transform_ops(x.image, policy.ops, rng);
}

inline std::vector<Tensor3> committee_views(const ImageSample& x,
                                            const AugmentationPolicy& policy,
                                            int epoch) {
  if (policy.q < 1) throw config_error("augmentation committee size must be >= 1", "thresholds.q");
  std::vector<Tensor3> views;
  views.reserve(static_cast<std::size_t>(policy.q));
  for (int j = 0; j < policy.q; ++j)
    views.push_back(committee_view(x, policy, epoch, j));
  return views;
}

// ---------------------------------------------------------------------------
// Folder datasets: root/<class_name>/*.png|jpg for labeled source trees,
// a flat root/*.png|jpg for unlabeled targets.
// ---------------------------------------------------------------------------

namespace detail {

inline bool has_image_ext(const std::filesystem::path& p) {
  std::string e = p.extension().string();
  for (auto& ch : e) ch = static_cast<char>(std::tolower(ch));
  return e == ".png" || e == ".jpg" || e == ".jpeg";
}

inline std::vector<std::filesystem::path> sorted_images_in(
    const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && has_image_ext(entry.path()))
      files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace detail

inline DomainDataset load_folder_dataset(const std::filesystem::path& root,
                                         Domain domain) {
  if (!std::filesystem::is_directory(root))
    throw config_error("dataset root does not exist: " + root.string());

  DomainDataset ds;
  ds.domain = domain;

  auto try_load = [&](const std::filesystem::path& file,
                      std::optional<int> label, const std::string& id) {
    try {
      ImageSample s;
      s.image = read_image(file);
      s.label = label;
      s.eval_label = label;
      s.domain = domain;
      s.id = id;
      ds.samples.push_back(std::move(s));
    } catch (const io_error&) {
      ++ds.load_warnings;
    }
  };

  if (domain == Domain::source) {
    std::vector<std::filesystem::path> class_dirs;
    for (const auto& entry : std::filesystem::directory_iterator(root))
      if (entry.is_directory()) class_dirs.push_back(entry.path());
    std::sort(class_dirs.begin(), class_dirs.end());
    for (const auto& dir : class_dirs)
      ds.class_names.push_back(dir.filename().string());
    for (std::size_t c = 0; c < class_dirs.size(); ++c)
      for (const auto& file : detail::sorted_images_in(class_dirs[c]))
        try_load(file, static_cast<int>(c),
                 ds.class_names[c] + "/" + file.filename().string());
  } else {
    for (const auto& file : detail::sorted_images_in(root))
      try_load(file, std::nullopt, file.filename().string());
  }

  if (ds.samples.empty())
    throw dataset_error("no usable images under " + root.string());
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic two-domain generator. Each class is a small arrangement of
// colored parts; the target domain re-renders the same per-sample latents
// under a photometric / background shift. With an all-zero shift the two
// domains are bitwise identical.
// ---------------------------------------------------------------------------

struct DomainShift {
  double hue_delta = 0.0;        // systematic hue rotation, in [0,1) turns
  double texture_noise = 0.0;    // additive gaussian pixel noise stddev
  double background_swap = 0.0;  // blend weight toward the alternate backdrop
};

struct SyntheticConfig {
  int classes = 3;
  int per_class = 50;
  int image_size = 32;
  DomainShift shift;
  std::uint64_t seed = 0;
};

namespace detail {

struct Rgb {
  double r, g, b;
};

inline Rgb class_hue_color(int cls, int classes, double sat, double val,
                           double hue_offset = 0.0) {
  Rgb c{};
  hsv_to_rgb(static_cast<double>(cls) / std::max(1, classes) + hue_offset, sat,
             val, c.r, c.g, c.b);
  return c;
}

struct Shape {
  enum class Kind { circle, rect, triangle, diamond } kind;
  double x0, y0, x1, y1;        // circle: center + radius in x1; others: bbox
  double tx2, ty2;              // triangle third vertex
  Rgb color;

  bool contains(double x, double y) const {
    switch (kind) {
      case Kind::circle: {
        const double dx = x - x0, dy = y - y0;
        return dx * dx + dy * dy <= x1 * x1;
      }
      case Kind::rect:
        return x >= x0 && x <= x1 && y >= y0 && y <= y1;
      case Kind::diamond: {
        const double cx = (x0 + x1) * 0.5, cy = (y0 + y1) * 0.5;
        const double rx = (x1 - x0) * 0.5, ry = (y1 - y0) * 0.5;
        return std::abs(x - cx) / rx + std::abs(y - cy) / ry <= 1.0;
      }
      case Kind::triangle: {
        auto side = [](double ax, double ay, double bx, double by, double px,
                       double py) {
          return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
        };
        const double d1 = side(x0, y0, x1, y1, x, y);
        const double d2 = side(x1, y1, tx2, ty2, x, y);
        const double d3 = side(tx2, ty2, x0, y0, x, y);
        const bool neg = d1 < 0 || d2 < 0 || d3 < 0;
        const bool pos = d1 > 0 || d2 > 0 || d3 > 0;
        return !(neg && pos);
      }
    }
    return false;
  }
};

inline Shape circle(double cx, double cy, double r, Rgb c) {
  Shape s{Shape::Kind::circle, cx, cy, r, 0, 0, 0, c};
  return s;
}
inline Shape rect(double x0, double y0, double x1, double y1, Rgb c) {
  Shape s{Shape::Kind::rect, x0, y0, x1, y1, 0, 0, c};
  return s;
}
inline Shape triangle(double x0, double y0, double x1, double y1, double x2,
                      double y2, Rgb c) {
  Shape s{Shape::Kind::triangle, x0, y0, x1, y1, x2, y2, c};
  return s;
}
inline Shape diamond(double x0, double y0, double x1, double y1, Rgb c) {
  Shape s{Shape::Kind::diamond, x0, y0, x1, y1, 0, 0, c};
  return s;
}

struct SampleLatents {
  double cx, cy, scale, bg_light, accent_shift;
};

// Part layouts; every class has two or three visually distinct parts so
// prototypes have concrete concepts to latch onto.
inline std::vector<Shape> class_shapes(int cls, int classes,
                                       const SampleLatents& lat) {
  const Rgb body = class_hue_color(cls, classes, 0.75, 0.80);
  const Rgb accent =
      class_hue_color(cls, classes, 0.85, 0.95, 0.45 + lat.accent_shift);
  const Rgb dark{0.12, 0.12, 0.14};
  const double s = lat.scale;
  const double cx = lat.cx, cy = lat.cy;
  std::vector<Shape> shapes;
  switch (cls % 6) {
    case 0:  // cart: body slab + two wheels + accent cab
      shapes.push_back(rect(cx - 0.28 * s, cy - 0.08 * s, cx + 0.28 * s,
                            cy + 0.11 * s, body));
      shapes.push_back(rect(cx - 0.22 * s, cy - 0.23 * s, cx - 0.03 * s,
                            cy - 0.08 * s, accent));
      shapes.push_back(circle(cx - 0.16 * s, cy + 0.18 * s, 0.095 * s, dark));
      shapes.push_back(circle(cx + 0.16 * s, cy + 0.18 * s, 0.095 * s, dark));
      break;
    case 1:  // tower: wide shaft + roof + window
      shapes.push_back(rect(cx - 0.16 * s, cy - 0.08 * s, cx + 0.16 * s,
                            cy + 0.30 * s, body));
      shapes.push_back(triangle(cx - 0.22 * s, cy - 0.08 * s, cx + 0.22 * s,
                                cy - 0.08 * s, cx, cy - 0.32 * s, accent));
      shapes.push_back(rect(cx - 0.07 * s, cy + 0.06 * s, cx + 0.07 * s,
                            cy + 0.22 * s, dark));
      break;
    case 2:  // disc with an accent wedge + center dot
      shapes.push_back(circle(cx, cy, 0.23 * s, body));
      shapes.push_back(triangle(cx, cy, cx + 0.23 * s, cy - 0.23 * s,
                                cx + 0.23 * s, cy + 0.23 * s, accent));
      shapes.push_back(circle(cx, cy, 0.06 * s, dark));
      break;
    case 3:  // ring with an orbiting dot
      shapes.push_back(circle(cx, cy, 0.19 * s, body));
      shapes.push_back(circle(cx, cy, 0.10 * s, Rgb{lat.bg_light, lat.bg_light,
                                                    lat.bg_light}));
      shapes.push_back(circle(cx + 0.19 * s, cy - 0.16 * s, 0.055 * s, accent));
      break;
    case 4:  // bowtie: two triangles + knot
      shapes.push_back(triangle(cx - 0.22 * s, cy - 0.13 * s, cx - 0.22 * s,
                                cy + 0.13 * s, cx, cy, body));
      shapes.push_back(triangle(cx + 0.22 * s, cy - 0.13 * s, cx + 0.22 * s,
                                cy + 0.13 * s, cx, cy, body));
      shapes.push_back(rect(cx - 0.04 * s, cy - 0.06 * s, cx + 0.04 * s,
                            cy + 0.06 * s, accent));
      break;
    default:  // diamond with a pedestal bar
      shapes.push_back(diamond(cx - 0.17 * s, cy - 0.20 * s, cx + 0.17 * s,
                               cy + 0.12 * s, body));
      shapes.push_back(rect(cx - 0.13 * s, cy + 0.16 * s, cx + 0.13 * s,
                            cy + 0.22 * s, accent));
      shapes.push_back(circle(cx, cy - 0.04 * s, 0.045 * s, dark));
      break;
  }
  return shapes;
}

inline Rgb source_background(double u, double v, const SampleLatents& lat) {
  const double g = lat.bg_light + 0.06 * v - 0.03 * u;
  return Rgb{g, g, g * 0.985};
}

inline Rgb alternate_background(double u, double v) {
  // dark diagonal stripes
  const double band = std::fmod((u + v) * 5.0, 1.0);
  const double g = band < 0.5 ? 0.22 : 0.34;
  return Rgb{g * 0.9, g, g * 1.1};
}

inline Tensor3 render_sample(int cls, const SyntheticConfig& cfg,
                             const SampleLatents& lat, double bg_blend) {
  const int size = cfg.image_size;
  Tensor3 img(size, size, 3);
  const auto shapes = class_shapes(cls, cfg.classes, lat);
  // 2x2 supersampling per pixel
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      double r = 0, g = 0, b = 0;
      for (int sy = 0; sy < 2; ++sy)
        for (int sx = 0; sx < 2; ++sx) {
          const double u = (x + 0.25 + 0.5 * sx) / size;
          const double v = (y + 0.25 + 0.5 * sy) / size;
          Rgb px = source_background(u, v, lat);
          if (bg_blend > 0.0) {
            const Rgb alt = alternate_background(u, v);
            px.r = (1 - bg_blend) * px.r + bg_blend * alt.r;
            px.g = (1 - bg_blend) * px.g + bg_blend * alt.g;
            px.b = (1 - bg_blend) * px.b + bg_blend * alt.b;
          }
          for (const auto& sh : shapes)
            if (sh.contains(u, v)) px = sh.color;
          r += px.r;
          g += px.g;
          b += px.b;
        }
      img.at(y, x, 0) = clamp01(r / 4.0);
      img.at(y, x, 1) = clamp01(g / 4.0);
      img.at(y, x, 2) = clamp01(b / 4.0);
    }
  return img;
}

}  // namespace detail

// Source = canonical renders; target = the same per-sample latents under the
// configured shift, labels retained as eval_label only.
inline std::pair<DomainDataset, DomainDataset> generate_synthetic_pair(
    const SyntheticConfig& cfg) {
  if (cfg.classes < 2)
    throw config_error("synthetic generator needs at least 2 classes",
                       "data.synthetic.classes");
  if (cfg.per_class < 4)
    throw config_error("synthetic generator needs per_class >= 4",
                       "data.synthetic.per_class");
  if (cfg.image_size < 32)
    throw config_error("synthetic generator needs image_size >= 32",
                       "data.synthetic.image_size");

  DomainDataset src, tgt;
  src.domain = Domain::source;
  tgt.domain = Domain::target;
  for (int c = 0; c < cfg.classes; ++c) {
    src.class_names.push_back("class_" + std::to_string(c));
    tgt.class_names.push_back("class_" + std::to_string(c));
  }

  char idbuf[64];
  for (int c = 0; c < cfg.classes; ++c)
    for (int i = 0; i < cfg.per_class; ++i) {
      Rng lat_rng = derive_rng(cfg.seed, "latents",
                               {static_cast<std::uint64_t>(c),
                                static_cast<std::uint64_t>(i)});
      detail::SampleLatents lat;
      lat.cx = 0.5 + lat_rng.uniform(-0.10, 0.10);
      lat.cy = 0.5 + lat_rng.uniform(-0.10, 0.10);
      lat.scale = lat_rng.uniform(0.85, 1.15);
      lat.bg_light = lat_rng.uniform(0.78, 0.88);
      lat.accent_shift = lat_rng.uniform(-0.04, 0.04);

      ImageSample s;
      s.image = detail::render_sample(c, cfg, lat, 0.0);
      s.label = c;
      s.eval_label = c;
      s.domain = Domain::source;
      std::snprintf(idbuf, sizeof idbuf, "src/class_%d/%04d", c, i);
      s.id = idbuf;
      src.samples.push_back(std::move(s));

      ImageSample t;
      t.image =
          detail::render_sample(c, cfg, lat, cfg.shift.background_swap);
      if (cfg.shift.hue_delta != 0.0) shift_hue(t.image, cfg.shift.hue_delta);
      if (cfg.shift.texture_noise > 0.0) {
        Rng noise_rng = derive_rng(cfg.seed, "target_noise",
                                   {static_cast<std::uint64_t>(c),
                                    static_cast<std::uint64_t>(i)});
        for (auto& p : t.image.v)
          p = clamp01(p + cfg.shift.texture_noise * noise_rng.gaussian());
      }
      t.label = std::nullopt;  // hidden from training
      t.eval_label = c;
      t.domain = Domain::target;
      std::snprintf(idbuf, sizeof idbuf, "tgt/class_%d/%04d", c, i);
      t.id = idbuf;
      tgt.samples.push_back(std::move(t));
    }

  return {std::move(src), std::move(tgt)};
}

}  // namespace tcpl
