#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "tcpl/common.hpp"
#include "tcpl/data.hpp"
#include "tcpl/image_io.hpp"
#include "tcpl/image_ops.hpp"
#include "tcpl/json_util.hpp"
#include "tcpl/model.hpp"
#include "tcpl/selftrain.hpp"

namespace tcpl {

// ---------------------------------------------------------------------------
// Prototype projection: overwrite each prototype with the most similar
// same-class patch feature, searched over source grids (scored b.p/|b|) and
// pseudo-labeled target grids (scored eta * b.p/|b|), all pyramid levels.
// ---------------------------------------------------------------------------

struct ProjectionReport {
  int updated = 0;
  std::vector<int> skipped;  // prototype indices with no candidates
};

namespace detail {

struct ProjectionBest {
  double score = 0.0;       // ranking score (eta-weighted for target)
  double similarity = 0.0;  // unweighted normalized similarity
  bool found = false;
  Provenance prov;
  std::vector<double> patch;
};

// Scans one image's pyramid against every prototype of one class block.
inline void scan_projection_candidates(const FeaturePyramid& pyr,
                                       const PrototypeBank& bank, int cls,
                                       double weight, const std::string& id,
                                       Domain domain,
                                       std::vector<ProjectionBest>& best) {
  const int lo = cls * bank.per_class;
  const int hi = lo + bank.per_class;
  for (int n = 0; n < static_cast<int>(pyr.levels.size()); ++n) {
    const Tensor3& lvl = pyr.levels[static_cast<std::size_t>(n)];
    for (int r = 0; r < lvl.h; ++r)
      for (int c = 0; c < lvl.w; ++c) {
        const double* b = lvl.cell(r, c);
        const double nb = norm2(b, bank.depth);
        if (nb <= 0.0) continue;  // a zero patch has no direction
        for (int j = lo; j < hi; ++j) {
          const double sim = dot(b, bank.proto(j), bank.depth) / nb;
          const double score = weight * sim;
          ProjectionBest& slot = best[static_cast<std::size_t>(j)];
          if (slot.found && !(score > slot.score)) continue;
          slot.found = true;
          slot.score = score;
          slot.similarity = sim;
          slot.prov = Provenance{id, domain, n, r, c, sim};
          slot.patch.assign(b, b + bank.depth);
        }
      }
  }
}

}  // namespace detail

// eta = 0 removes target candidates entirely (their preference weight is
// zero, so they cannot legitimately outrank any source patch).
inline ProjectionReport project_prototypes(Model& model,
                                           const DomainDataset& source,
                                           const DomainDataset& target,
                                           const PseudoLabeledSet& plt,
                                           double eta) {
  PrototypeBank& bank = model.bank;
  std::vector<detail::ProjectionBest> best(
      static_cast<std::size_t>(bank.count()));

  for (const ImageSample& x : source.samples) {
    if (!x.label) continue;
    FeaturePyramid pyr = build_pyramid(model.backbone.forward(x.image),
                                       model.pool_sizes, x.image.h, x.image.w);
    detail::scan_projection_candidates(pyr, bank, *x.label, 1.0, x.id,
                                       Domain::source, best);
  }
  if (eta != 0.0) {
    std::unordered_map<std::string, const ImageSample*> by_id;
    for (const ImageSample& x : target.samples) by_id.emplace(x.id, &x);
    for (const auto& [id, entry] : plt.entries) {
      auto it = by_id.find(id);
      if (it == by_id.end())
        throw contract_error("pseudo-labeled id not present in target set: " +
                             id);
      const ImageSample& x = *it->second;
      FeaturePyramid pyr =
          build_pyramid(model.backbone.forward(x.image), model.pool_sizes,
                        x.image.h, x.image.w);
      detail::scan_projection_candidates(pyr, bank, entry.pseudo_label, eta,
                                         x.id, Domain::target, best);
    }
  }

  ProjectionReport report;
  for (int j = 0; j < bank.count(); ++j) {
    detail::ProjectionBest& slot = best[static_cast<std::size_t>(j)];
    if (!slot.found) {
      report.skipped.push_back(j);
      continue;
    }
    const double nb = norm2(slot.patch.data(), bank.depth);
    double* pj = bank.proto(j);
    for (int d = 0; d < bank.depth; ++d)
      pj[d] = slot.patch[static_cast<std::size_t>(d)] / nb;
    bank.provenance[static_cast<std::size_t>(j)] = slot.prov;
    ++report.updated;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Activation maps and high-activation boxes
// ---------------------------------------------------------------------------

struct ActivationMap {
  Tensor3 values;  // H_img x W_img x 1, bilinearly upsampled
  Tensor3 raw;     // level-sized similarity map, 1 channel
  int source_level = -1;
  int prototype_index = -1;
};

namespace detail {

inline ActivationMap activation_map_from(const ModelOutput& out,
                                         const Model& model, int j, int img_h,
                                         int img_w) {
  if (j < 0 || j >= model.bank.count())
    throw contract_error("prototype index out of range: " + std::to_string(j));
  ActivationMap map;
  map.prototype_index = j;
  map.source_level = out.argmax_grid[static_cast<std::size_t>(j)].level;
  const Tensor3& lvl =
      out.pyramid.levels[static_cast<std::size_t>(map.source_level)];
  map.raw = Tensor3(lvl.h, lvl.w, 1);
  const double* pj = model.bank.proto(j);
  for (int y = 0; y < lvl.h; ++y)
    for (int x = 0; x < lvl.w; ++x)
      map.raw.at(y, x, 0) = dot(lvl.cell(y, x), pj, model.bank.depth);
  map.values = resize_bilinear(map.raw, img_h, img_w);
  return map;
}

}  // namespace detail

inline ActivationMap activation_map(const Tensor3& image, const Model& model,
                                    int j) {
  return detail::activation_map_from(model.forward(image), model, j, image.h,
                                     image.w);
}

enum class BoxRule { percentile, fraction_of_max };

inline BoxRule parse_box_rule(const std::string& s) {
  if (s == "percentile") return BoxRule::percentile;
  if (s == "fraction_of_max") return BoxRule::fraction_of_max;
  throw config_error("box_rule must be \"percentile\" or \"fraction_of_max\"",
                     "interpret.box_rule");
}

struct BoxConfig {
  BoxRule rule = BoxRule::percentile;
  double percentile = 95.0;  // percentile or percent-of-max, per rule
};

struct PixelBox {
  int top = 0, left = 0, bottom = 0, right = 0;  // inclusive
  bool operator==(const PixelBox&) const = default;
};

// Smallest axis-aligned rectangle containing every pixel at or above the
// threshold: the nearest-rank percentile of all upsampled values, or the
// given fraction of the maximum.
inline PixelBox high_activation_box(const ActivationMap& map,
                                    const BoxConfig& cfg = {}) {
  const std::vector<double>& v = map.values.v;
  if (v.empty()) throw contract_error("high_activation_box on empty map");
  for (double x : v)
    if (!std::isfinite(x))
      throw contract_error("high_activation_box on non-finite map");
  double threshold;
  const double mx = *std::max_element(v.begin(), v.end());
  if (cfg.rule == BoxRule::percentile) {
    std::vector<double> sorted(v);
    std::sort(sorted.begin(), sorted.end());
    const std::size_t rank = static_cast<std::size_t>(std::ceil(
        cfg.percentile / 100.0 * static_cast<double>(sorted.size())));
    threshold = sorted[std::min(sorted.size() - 1,
                                rank == 0 ? 0 : rank - 1)];
  } else {
    threshold = std::min(mx, cfg.percentile / 100.0 * mx);
  }
  PixelBox box{map.values.h, map.values.w, -1, -1};
  for (int y = 0; y < map.values.h; ++y)
    for (int x = 0; x < map.values.w; ++x)
      if (map.values.at(y, x, 0) >= threshold) {
        box.top = std::min(box.top, y);
        box.left = std::min(box.left, x);
        box.bottom = std::max(box.bottom, y);
        box.right = std::max(box.right, x);
      }
  if (box.bottom < 0) throw contract_error("high_activation_box came up empty");
  return box;
}

// ---------------------------------------------------------------------------
// Receptive fields: which image pixels a grid cell can see. Walks the conv
// stack backwards from the pooled cell range.
// ---------------------------------------------------------------------------

inline PixelBox receptive_field(const Backbone& bb, int pool_k,
                                const GridIndex& at, int img_h, int img_w) {
  long top = at.row, bottom = at.row + pool_k - 1;
  long left = at.col, right = at.col + pool_k - 1;
  for (auto it = bb.layers.rbegin(); it != bb.layers.rend(); ++it) {
    top = top * it->stride - it->pad;
    left = left * it->stride - it->pad;
    bottom = bottom * it->stride - it->pad + it->ksize - 1;
    right = right * it->stride - it->pad + it->ksize - 1;
  }
  PixelBox box;
  box.top = static_cast<int>(std::clamp<long>(top, 0, img_h - 1));
  box.left = static_cast<int>(std::clamp<long>(left, 0, img_w - 1));
  box.bottom = static_cast<int>(std::clamp<long>(bottom, 0, img_h - 1));
  box.right = static_cast<int>(std::clamp<long>(right, 0, img_w - 1));
  return box;
}

// ---------------------------------------------------------------------------
// Prototype cards
// ---------------------------------------------------------------------------

struct PrototypeCard {
  int prototype_index = -1;
  int cls = -1;
  std::optional<Provenance> provenance;
  Tensor3 patch_image;
  double similarity_at_projection = 0.0;
  bool preview = false;  // on-the-fly nearest patch, not a projection record
};

namespace detail {

// Nearest-patch preview for an unprojected prototype: the best normalized
// match over one dataset (or one image treated as a dataset of one).
inline std::optional<Provenance> nearest_patch(const Model& model, int j,
                                               const DomainDataset& data) {
  std::optional<Provenance> best;
  const double* pj = model.bank.proto(j);
  for (const ImageSample& x : data.samples) {
    FeaturePyramid pyr = build_pyramid(model.backbone.forward(x.image),
                                       model.pool_sizes, x.image.h, x.image.w);
    for (int n = 0; n < static_cast<int>(pyr.levels.size()); ++n) {
      const Tensor3& lvl = pyr.levels[static_cast<std::size_t>(n)];
      for (int r = 0; r < lvl.h; ++r)
        for (int c = 0; c < lvl.w; ++c) {
          const double* b = lvl.cell(r, c);
          const double nb = norm2(b, model.bank.depth);
          if (nb <= 0.0) continue;
          const double sim = dot(b, pj, model.bank.depth) / nb;
          if (!best || sim > best->similarity)
            best = Provenance{x.id, data.domain, n, r, c, sim};
        }
    }
  }
  return best;
}

}  // namespace detail

inline PrototypeCard make_prototype_card(
    const Model& model, int j, const Provenance& prov, const ImageSample& x,
    bool preview) {
  PrototypeCard card;
  card.prototype_index = j;
  card.cls = model.bank.class_of(j);
  card.provenance = prov;
  card.similarity_at_projection = prov.similarity;
  card.preview = preview;
  const int k = model.pool_sizes[static_cast<std::size_t>(prov.level)];
  const PixelBox rf = receptive_field(
      model.backbone, k, GridIndex{prov.level, prov.row, prov.col}, x.image.h,
      x.image.w);
  card.patch_image =
      crop(x.image, rf.top, rf.left, rf.bottom - rf.top + 1,
           rf.right - rf.left + 1);
  return card;
}

// ---------------------------------------------------------------------------
// Explanation traces: one row per class, one entry per prototype; the row's
// contributions sum to the logit exactly.
// ---------------------------------------------------------------------------

struct TraceEntry {
  int prototype_index = -1;
  double similarity = 0.0;    // f_j
  double weight = 0.0;        // W_(c,j)
  double contribution = 0.0;  // weight * similarity
  std::optional<PixelBox> box;
  std::string card_ref;
};

struct ExplanationTrace {
  std::string sample_id;
  std::vector<std::vector<TraceEntry>> per_class;
  std::vector<double> logits;
  int predicted = -1;
};

inline ExplanationTrace build_trace(const Tensor3& image, const Model& model,
                                    const std::string& sample_id = "",
                                    const BoxConfig& box_cfg = {}) {
  const ModelOutput out = model.forward(image);
  ExplanationTrace trace;
  trace.sample_id = sample_id;
  trace.logits = out.logits;
  trace.predicted = argmax_index(out.logits);

  const int lo = trace.predicted * model.bank.per_class;
  const int hi = lo + model.bank.per_class;
  std::map<int, PixelBox> boxes;
  for (int j = lo; j < hi; ++j) {
    const ActivationMap map =
        detail::activation_map_from(out, model, j, image.h, image.w);
    boxes.emplace(j, high_activation_box(map, box_cfg));
  }

  trace.per_class.resize(static_cast<std::size_t>(model.head.classes));
  for (int c = 0; c < model.head.classes; ++c) {
    auto& row = trace.per_class[static_cast<std::size_t>(c)];
    row.reserve(static_cast<std::size_t>(model.bank.count()));
    for (int j = 0; j < model.bank.count(); ++j) {
      TraceEntry e;
      e.prototype_index = j;
      e.similarity = out.f[static_cast<std::size_t>(j)];
      e.weight = model.head.at(c, j);
      e.contribution = e.weight * e.similarity;
      if (c == trace.predicted) {
        auto it = boxes.find(j);
        if (it != boxes.end()) e.box = it->second;
      }
      e.card_ref = "prototype_" + std::to_string(j);
      row.push_back(std::move(e));
    }
  }
  return trace;
}

inline ordered_json trace_to_json(const ExplanationTrace& trace) {
  ordered_json j;
  j["schema_version"] = kSchemaVersion;
  j["sample_id"] = trace.sample_id;
  j["predicted"] = trace.predicted;
  j["logits"] = ordered_json::array();
  for (double l : trace.logits) j["logits"].push_back(format_sig9(l));
  j["per_class"] = ordered_json::array();
  for (int c = 0; c < static_cast<int>(trace.per_class.size()); ++c) {
    ordered_json row;
    row["class"] = c;
    row["logit"] = format_sig9(trace.logits[static_cast<std::size_t>(c)]);
    row["entries"] = ordered_json::array();
    for (const TraceEntry& e : trace.per_class[static_cast<std::size_t>(c)]) {
      ordered_json je;
      je["prototype"] = e.prototype_index;
      je["similarity"] = format_sig9(e.similarity);
      je["weight"] = format_sig9(e.weight);
      je["contribution"] = format_sig9(e.contribution);
      if (e.box)
        je["box"] = {e.box->top, e.box->left, e.box->bottom, e.box->right};
      else
        je["box"] = nullptr;
      je["card"] = e.card_ref;
      row["entries"].push_back(std::move(je));
    }
    j["per_class"].push_back(std::move(row));
  }
  return j;
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

inline void draw_box(Tensor3& img, const PixelBox& box, double r, double g,
                     double b) {
  auto paint = [&](int y, int x) {
    if (y < 0 || y >= img.h || x < 0 || x >= img.w) return;
    img.at(y, x, 0) = r;
    img.at(y, x, 1) = g;
    img.at(y, x, 2) = b;
  };
  for (int x = box.left; x <= box.right; ++x) {
    paint(box.top, x);
    paint(box.bottom, x);
  }
  for (int y = box.top; y <= box.bottom; ++y) {
    paint(y, box.left);
    paint(y, box.right);
  }
}

inline void draw_border(Tensor3& img, double r, double g, double b) {
  draw_box(img, PixelBox{0, 0, img.h - 1, img.w - 1}, r, g, b);
  if (img.h > 2 && img.w > 2)
    draw_box(img, PixelBox{1, 1, img.h - 2, img.w - 2}, r, g, b);
}

inline Tensor3 grayscale_of_map(const ActivationMap& map) {
  const auto [lo_it, hi_it] =
      std::minmax_element(map.values.v.begin(), map.values.v.end());
  const double lo = *lo_it, hi = *hi_it;
  const double span = hi - lo;
  Tensor3 img(map.values.h, map.values.w, 3);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      const double v =
          span > 0.0 ? (map.values.at(y, x, 0) - lo) / span : 0.5;
      img.at(y, x, 0) = v;
      img.at(y, x, 1) = v;
      img.at(y, x, 2) = v;
    }
  return img;
}

// ordered by prototype index; source cards carry a red border, target cards
// a green one
inline void write_card_png(const std::filesystem::path& path,
                           const PrototypeCard& card) {
  Tensor3 img = card.patch_image;
  if (card.provenance) {
    if (card.provenance->domain == Domain::source)
      draw_border(img, 1.0, 0.0, 0.0);
    else
      draw_border(img, 0.0, 1.0, 0.0);
  }
  write_png(path, img);
}

// Explanation report for one image: trace.json, an activation map and a card
// per predicted-class prototype, and the box overlay. Cards come from
// projection provenance when available, else from the query image itself,
// marked unprojected.
inline void write_explanation_report(const std::filesystem::path& dir,
                                     const Model& model, const ImageSample& x,
                                     const DomainDataset* source,
                                     const DomainDataset* target,
                                     const BoxConfig& box_cfg = {}) {
  std::filesystem::create_directories(dir);
  ExplanationTrace trace = build_trace(x.image, model, x.id, box_cfg);
  ordered_json tj = trace_to_json(trace);

  std::unordered_map<std::string, const ImageSample*> by_id;
  if (source)
    for (const ImageSample& s : source->samples) by_id.emplace(s.id, &s);
  if (target)
    for (const ImageSample& s : target->samples) by_id.emplace(s.id, &s);

  const ModelOutput out = model.forward(x.image);
  const int lo = trace.predicted * model.bank.per_class;
  const int hi = lo + model.bank.per_class;
  Tensor3 overlay = x.image;
  ordered_json cards = ordered_json::array();
  for (int j = lo; j < hi; ++j) {
    const ActivationMap map =
        detail::activation_map_from(out, model, j, x.image.h, x.image.w);
    write_png(dir / ("activation_" + std::to_string(j) + ".png"),
              grayscale_of_map(map));
    draw_box(overlay, high_activation_box(map, box_cfg), 1.0, 1.0, 0.0);

    const auto& prov = model.bank.provenance[static_cast<std::size_t>(j)];
    ordered_json jc;
    jc["prototype"] = j;
    jc["file"] = "prototype_" + std::to_string(j) + "_card.png";
    PrototypeCard card;
    if (prov) {
      auto it = by_id.find(prov->sample_id);
      if (it != by_id.end()) {
        card = make_prototype_card(model, j, *prov, *it->second, false);
        jc["status"] = "projected";
        jc["provenance_sample"] = prov->sample_id;
        jc["domain"] = domain_name(prov->domain);
      } else {
        jc["status"] = "provenance_sample_missing";
      }
    }
    if (!card.provenance) {
      // fall back to the query image's own evidence patch
      const GridIndex& at = out.argmax_grid[static_cast<std::size_t>(j)];
      const double sim = out.f[static_cast<std::size_t>(j)];
      Provenance preview{x.id, x.domain, at.level, at.row, at.col, sim};
      card = make_prototype_card(model, j, preview, x, true);
      card.provenance.reset();
      if (!jc.contains("status")) jc["status"] = "unprojected";
    }
    write_card_png(dir / jc["file"].get<std::string>(), card);
    cards.push_back(std::move(jc));
  }
  tj["cards"] = std::move(cards);
  write_json_file(dir / "trace.json", tj);
  write_png(dir / "box_overlay.png", overlay);
}

// Prototype gallery: a card per prototype plus the provenance table.
// Unprojected prototypes get nearest-patch previews over the source set.
inline void write_prototype_gallery(const std::filesystem::path& dir,
                                    const Model& model,
                                    const DomainDataset& source,
                                    const DomainDataset* target) {
  std::filesystem::create_directories(dir);
  std::unordered_map<std::string, const ImageSample*> by_id;
  for (const ImageSample& s : source.samples) by_id.emplace(s.id, &s);
  if (target)
    for (const ImageSample& s : target->samples) by_id.emplace(s.id, &s);

  ordered_json bank;
  bank["schema_version"] = kSchemaVersion;
  bank["prototypes_per_class"] = model.bank.per_class;
  bank["classes"] = model.bank.classes;
  bank["entries"] = ordered_json::array();
  for (int j = 0; j < model.bank.count(); ++j) {
    ordered_json e;
    e["index"] = j;
    e["class"] = model.bank.class_of(j);
    e["file"] = "prototype_" + std::to_string(j) + "_card.png";
    const auto& prov = model.bank.provenance[static_cast<std::size_t>(j)];
    std::optional<Provenance> use = prov;
    bool preview = false;
    if (use && by_id.find(use->sample_id) == by_id.end()) use.reset();
    if (!use) {
      use = detail::nearest_patch(model, j, source);
      preview = true;
    }
    if (use) {
      const ImageSample& x = *by_id.at(use->sample_id);
      write_card_png(dir / e["file"].get<std::string>(),
                     make_prototype_card(model, j, *use, x, preview));
      e["projected"] = prov.has_value() && !preview;
      e["preview"] = preview;
      e["sample_id"] = use->sample_id;
      e["domain"] = domain_name(use->domain);
      e["level"] = use->level;
      e["row"] = use->row;
      e["col"] = use->col;
      e["similarity"] = format_sig9(use->similarity);
    } else {
      e["projected"] = false;
      e["preview"] = false;
    }
    bank["entries"].push_back(std::move(e));
  }
  write_json_file(dir / "bank.json", bank);
}

}  // namespace tcpl
