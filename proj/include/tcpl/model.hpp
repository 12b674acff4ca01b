#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "tcpl/common.hpp"
#include "tcpl/data.hpp"
#include "tcpl/tensor.hpp"

namespace tcpl {

// ---------------------------------------------------------------------------
// Backbone: a small convolutional net trained from scratch. Three stride-2
// stages followed by 1x1 channel-adjust layers; input H and W shrink by 8x.
// ---------------------------------------------------------------------------

struct ConvLayer {
  int in_c = 0, out_c = 0, ksize = 1, stride = 1, pad = 0;
  bool relu = true;
  std::vector<double> w;  // [out_c][ky][kx][in_c], in_c fastest
  std::vector<double> b;  // [out_c]

  int out_dim(int in_dim) const {
    return (in_dim + 2 * pad - ksize) / stride + 1;
  }
  std::size_t widx(int oc, int ky, int kx) const {
    return ((static_cast<std::size_t>(oc) * ksize + ky) * ksize + kx) * in_c;
  }

  Tensor3 forward(const Tensor3& in) const {
    if (in.c != in_c) throw shape_error("conv input channel mismatch");
    const int oh = out_dim(in.h), ow = out_dim(in.w);
    if (oh < 1 || ow < 1) throw shape_error("conv input spatially too small");
    Tensor3 out(oh, ow, out_c);
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double* ocell = out.cell(oy, ox);
        for (int oc = 0; oc < out_c; ++oc) ocell[oc] = b[oc];
        for (int ky = 0; ky < ksize; ++ky) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= in.h) continue;
          for (int kx = 0; kx < ksize; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= in.w) continue;
            const double* icell = in.cell(iy, ix);
            for (int oc = 0; oc < out_c; ++oc)
              ocell[oc] += dot(w.data() + widx(oc, ky, kx), icell, in_c);
          }
        }
        if (relu)
          for (int oc = 0; oc < out_c; ++oc)
            if (ocell[oc] < 0.0) ocell[oc] = 0.0;
      }
    return out;
  }

  // din may be null when the input gradient is not needed (first layer)
  void backward(const Tensor3& in, const Tensor3& out, const Tensor3& dout_post,
                Tensor3* din, std::vector<double>& dw,
                std::vector<double>& db) const {
    const int oh = out.h, ow = out.w;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        const double* ocell = out.cell(oy, ox);
        const double* gcell = dout_post.cell(oy, ox);
        for (int oc = 0; oc < out_c; ++oc) {
          double g = gcell[oc];
          if (relu && ocell[oc] <= 0.0) g = 0.0;
          if (g == 0.0) continue;
          db[oc] += g;
          for (int ky = 0; ky < ksize; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= in.h) continue;
            for (int kx = 0; kx < ksize; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= in.w) continue;
              const double* icell = in.cell(iy, ix);
              double* dwp = dw.data() + widx(oc, ky, kx);
              for (int ic = 0; ic < in_c; ++ic) dwp[ic] += g * icell[ic];
              if (din) {
                const double* wp = w.data() + widx(oc, ky, kx);
                double* dicell = din->cell(iy, ix);
                for (int ic = 0; ic < in_c; ++ic) dicell[ic] += g * wp[ic];
              }
            }
          }
        }
      }
  }
};

struct Backbone {
  std::vector<ConvLayer> layers;

  int out_channels() const { return layers.back().out_c; }

  Tensor3 forward(const Tensor3& image) const {
    if (image.c != 3) throw shape_error("backbone expects an HxWx3 image");
    Tensor3 cur = layers.front().forward(image);
    for (std::size_t l = 1; l < layers.size(); ++l)
      cur = layers[l].forward(cur);
    return cur;
  }

  // forward keeping every activation; acts[0] is the image, acts[i] the
  // output of layer i-1
  std::vector<Tensor3> forward_trace(const Tensor3& image) const {
    if (image.c != 3) throw shape_error("backbone expects an HxWx3 image");
    std::vector<Tensor3> acts;
    acts.reserve(layers.size() + 1);
    acts.push_back(image);
    for (const auto& layer : layers) acts.push_back(layer.forward(acts.back()));
    return acts;
  }
};

// Channel plan: 3 -> D/4 -> D/2 -> D via stride-2 3x3 convs, then two 1x1
// adjust layers (ReLU + linear) keeping D.
inline Backbone make_backbone(int feature_channels, std::uint64_t seed) {
  if (feature_channels < 4)
    throw config_error("feature channel count must be >= 4", "model.channels");
  const int d = feature_channels;
  Backbone bb;
  auto add = [&](int in_c, int out_c, int k, int stride, int pad, bool relu) {
    ConvLayer layer;
    layer.in_c = in_c;
    layer.out_c = out_c;
    layer.ksize = k;
    layer.stride = stride;
    layer.pad = pad;
    layer.relu = relu;
    layer.w.resize(static_cast<std::size_t>(out_c) * k * k * in_c);
    layer.b.assign(static_cast<std::size_t>(out_c), 0.0);
    Rng rng = derive_rng(seed, "backbone",
                         {static_cast<std::uint64_t>(bb.layers.size())});
    const double stddev = std::sqrt(2.0 / (static_cast<double>(k) * k * in_c));
    for (auto& v : layer.w) v = stddev * rng.gaussian();
    bb.layers.push_back(std::move(layer));
  };
  add(3, std::max(4, d / 4), 3, 2, 1, true);
  add(std::max(4, d / 4), std::max(4, d / 2), 3, 2, 1, true);
  add(std::max(4, d / 2), d, 3, 2, 1, true);
  add(d, d, 1, 1, 0, true);
  add(d, d, 1, 1, 0, false);
  return bb;
}

// ---------------------------------------------------------------------------
// Feature pyramid: stride-1 valid max pools of the backbone map, one level
// per pool size; k = 1 reproduces the map itself.
// ---------------------------------------------------------------------------

struct FeaturePyramid {
  std::vector<Tensor3> levels;
  std::vector<int> pool_sizes;
  int source_h = 0;  // image height the map came from
  int source_w = 0;
};

inline Tensor3 max_pool_valid(const Tensor3& in, int k) {
  if (k < 1 || k > std::min(in.h, in.w))
    throw config_error("pool size must satisfy 1 <= k <= min(W,H)",
                       "model.pool_sizes");
  if (k == 1) return in;
  Tensor3 out(in.h - k + 1, in.w - k + 1, in.c);
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x) {
      double* ocell = out.cell(y, x);
      for (int ch = 0; ch < in.c; ++ch)
        ocell[ch] = in.at(y, x, ch);
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          if (ky == 0 && kx == 0) continue;
          const double* icell = in.cell(y + ky, x + kx);
          for (int ch = 0; ch < in.c; ++ch)
            if (icell[ch] > ocell[ch]) ocell[ch] = icell[ch];
        }
    }
  return out;
}

inline FeaturePyramid build_pyramid(const Tensor3& map,
                                    const std::vector<int>& pool_sizes,
                                    int source_h = 0, int source_w = 0) {
  if (pool_sizes.empty())
    throw config_error("at least one pool size required", "model.pool_sizes");
  FeaturePyramid pyr;
  pyr.pool_sizes = pool_sizes;
  pyr.source_h = source_h;
  pyr.source_w = source_w;
  pyr.levels.reserve(pool_sizes.size());
  for (int k : pool_sizes) pyr.levels.push_back(max_pool_valid(map, k));
  return pyr;
}

// Routes level gradients back onto the un-pooled map, sending each cell's
// gradient to the first maximal input in row-major window order (the same
// rule the forward pass uses for ties).
inline void max_pool_backward(const Tensor3& in, int k, const Tensor3& dlevel,
                              Tensor3& din) {
  if (k == 1) {
    for (std::size_t i = 0; i < din.v.size(); ++i) din.v[i] += dlevel.v[i];
    return;
  }
  for (int y = 0; y < dlevel.h; ++y)
    for (int x = 0; x < dlevel.w; ++x) {
      const double* gcell = dlevel.cell(y, x);
      for (int ch = 0; ch < in.c; ++ch) {
        if (gcell[ch] == 0.0) continue;
        int by = y, bx = x;
        double best = in.at(y, x, ch);
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            const double v = in.at(y + ky, x + kx, ch);
            if (v > best) {
              best = v;
              by = y + ky;
              bx = x + kx;
            }
          }
        din.at(by, bx, ch) += gcell[ch];
      }
    }
}

// ---------------------------------------------------------------------------
// Grid enumeration: every 1x1 spatial position of every level, in
// (level, row-major) order.
// ---------------------------------------------------------------------------

struct GridIndex {
  int level = -1, row = 0, col = 0;
  bool operator==(const GridIndex&) const = default;
};

struct GridRef {
  const double* v = nullptr;  // D-dim feature vector
  GridIndex at;
};

inline std::vector<GridRef> grids(const FeaturePyramid& pyr) {
  std::vector<GridRef> out;
  std::size_t total = 0;
  for (const auto& lvl : pyr.levels)
    total += static_cast<std::size_t>(lvl.h) * lvl.w;
  out.reserve(total);
  for (int n = 0; n < static_cast<int>(pyr.levels.size()); ++n) {
    const Tensor3& lvl = pyr.levels[static_cast<std::size_t>(n)];
    for (int r = 0; r < lvl.h; ++r)
      for (int c = 0; c < lvl.w; ++c)
        out.push_back(GridRef{lvl.cell(r, c), GridIndex{n, r, c}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prototype bank and decision head
// ---------------------------------------------------------------------------

struct Provenance {
  std::string sample_id;
  Domain domain = Domain::source;
  int level = 0, row = 0, col = 0;
  double similarity = 0.0;  // normalized similarity at projection time
};

struct PrototypeBank {
  int per_class = 0;  // prototypes per class
  int classes = 0;
  int depth = 0;
  std::vector<double> p;  // [count][depth]
  std::vector<std::optional<Provenance>> provenance;

  int count() const { return per_class * classes; }
  int class_of(int j) const { return j / per_class; }
  double* proto(int j) { return p.data() + static_cast<std::size_t>(j) * depth; }
  const double* proto(int j) const {
    return p.data() + static_cast<std::size_t>(j) * depth;
  }

  void renormalize() {
    for (int j = 0; j < count(); ++j) {
      double* pj = proto(j);
      const double n = norm2(pj, depth);
      if (n > 0.0)
        for (int d = 0; d < depth; ++d) pj[d] /= n;
    }
  }

  bool owns(int cls, int j) const { return class_of(j) == cls; }
};

inline PrototypeBank make_prototype_bank(int per_class, int classes, int depth,
                                         std::uint64_t seed) {
  if (per_class < 1 || classes < 2)
    throw config_error("prototype bank needs per_class >= 1 and classes >= 2");
  PrototypeBank bank;
  bank.per_class = per_class;
  bank.classes = classes;
  bank.depth = depth;
  bank.p.resize(static_cast<std::size_t>(per_class) * classes * depth);
  bank.provenance.assign(static_cast<std::size_t>(per_class) * classes,
                         std::nullopt);
  Rng rng = derive_rng(seed, "prototypes");
  for (auto& v : bank.p) v = rng.gaussian();
  bank.renormalize();
  return bank;
}

struct DecisionHead {
  int classes = 0;
  int protos = 0;
  std::vector<double> w;  // [classes][protos], no bias

  double& at(int c, int j) {
    return w[static_cast<std::size_t>(c) * protos + j];
  }
  double at(int c, int j) const {
    return w[static_cast<std::size_t>(c) * protos + j];
  }
};

// Own-class connections start at 1, all others at -0.5.
inline DecisionHead make_decision_head(const PrototypeBank& bank) {
  DecisionHead head;
  head.classes = bank.classes;
  head.protos = bank.count();
  head.w.resize(static_cast<std::size_t>(head.classes) * head.protos);
  for (int c = 0; c < head.classes; ++c)
    for (int j = 0; j < head.protos; ++j)
      head.at(c, j) = bank.class_of(j) == c ? 1.0 : -0.5;
  return head;
}

// ---------------------------------------------------------------------------
// Forward operations
// ---------------------------------------------------------------------------

// f_j = max over all grids b of b . p_j (unnormalized), first grid in
// enumeration order wins exact ties.
inline void prototype_similarities(const FeaturePyramid& pyr,
                                   const PrototypeBank& bank,
                                   std::vector<double>& f,
                                   std::vector<GridIndex>& argmax_grid) {
  for (const auto& lvl : pyr.levels)
    if (lvl.c != bank.depth)
      throw shape_error("pyramid depth does not match prototype depth");
  const int m = bank.count();
  f.assign(static_cast<std::size_t>(m), 0.0);
  argmax_grid.assign(static_cast<std::size_t>(m), GridIndex{});
  std::vector<bool> seen(static_cast<std::size_t>(m), false);
  for (int n = 0; n < static_cast<int>(pyr.levels.size()); ++n) {
    const Tensor3& lvl = pyr.levels[static_cast<std::size_t>(n)];
    for (int r = 0; r < lvl.h; ++r)
      for (int c = 0; c < lvl.w; ++c) {
        const double* b = lvl.cell(r, c);
        for (int j = 0; j < m; ++j) {
          const double s = dot(b, bank.proto(j), bank.depth);
          if (!seen[static_cast<std::size_t>(j)] || s > f[static_cast<std::size_t>(j)]) {
            seen[static_cast<std::size_t>(j)] = true;
            f[static_cast<std::size_t>(j)] = s;
            argmax_grid[static_cast<std::size_t>(j)] = GridIndex{n, r, c};
          }
        }
      }
  }
}

inline std::vector<double> head_forward(const std::vector<double>& f,
                                        const DecisionHead& head) {
  if (static_cast<int>(f.size()) != head.protos)
    throw shape_error("similarity vector length does not match head");
  std::vector<double> logits(static_cast<std::size_t>(head.classes), 0.0);
  for (int c = 0; c < head.classes; ++c)
    logits[static_cast<std::size_t>(c)] =
        dot(head.w.data() + static_cast<std::size_t>(c) * head.protos,
            f.data(), head.protos);
  return logits;
}

inline int argmax_index(const std::vector<double>& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i)
    if (v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(best)])
      best = i;
  return best;
}

inline std::vector<double> softmax(const std::vector<double>& logits) {
  std::vector<double> p(logits.size());
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

struct ModelOutput {
  std::vector<double> f;
  std::vector<double> logits;
  std::vector<GridIndex> argmax_grid;
  FeaturePyramid pyramid;
};

struct Model {
  Backbone backbone;
  PrototypeBank bank;
  DecisionHead head;
  std::vector<int> pool_sizes;

  ModelOutput forward(const Tensor3& image) const {
    ModelOutput out;
    Tensor3 map = backbone.forward(image);
    out.pyramid = build_pyramid(map, pool_sizes, image.h, image.w);
    prototype_similarities(out.pyramid, bank, out.f, out.argmax_grid);
    out.logits = head_forward(out.f, head);
    return out;
  }

  int predict(const Tensor3& image) const {
    return argmax_index(forward(image).logits);
  }
};

// ---------------------------------------------------------------------------
// Gradient plumbing. Parameters and gradients are exposed as named flat
// vectors in one fixed order (used by the optimizer, the checkpoint writer
// and the finite-difference harness alike).
// ---------------------------------------------------------------------------

struct ParamView {
  std::string name;
  std::vector<double>* values;
};

inline std::vector<ParamView> trainable_params(Model& m) {
  std::vector<ParamView> out;
  for (std::size_t l = 0; l < m.backbone.layers.size(); ++l) {
    out.push_back({"backbone." + std::to_string(l) + ".w",
                   &m.backbone.layers[l].w});
    out.push_back({"backbone." + std::to_string(l) + ".b",
                   &m.backbone.layers[l].b});
  }
  out.push_back({"prototypes", &m.bank.p});
  out.push_back({"head", &m.head.w});
  return out;
}

struct ModelGrad {
  std::vector<std::vector<double>> slots;  // aligned with trainable_params

  static ModelGrad zeros_like(Model& m) {
    ModelGrad g;
    for (const auto& pv : trainable_params(m))
      g.slots.emplace_back(pv.values->size(), 0.0);
    return g;
  }
  void zero() {
    for (auto& s : slots) std::fill(s.begin(), s.end(), 0.0);
  }
};

struct ForwardTrace {
  std::vector<Tensor3> acts;  // backbone activations, acts[0] = image
  FeaturePyramid pyramid;
  std::vector<double> f;
  std::vector<GridIndex> argmax_grid;
  std::vector<double> logits;

  const Tensor3& backbone_map() const { return acts.back(); }
};

inline ForwardTrace forward_trace(const Model& m, const Tensor3& image) {
  ForwardTrace t;
  t.acts = m.backbone.forward_trace(image);
  t.pyramid = build_pyramid(t.acts.back(), m.pool_sizes, image.h, image.w);
  prototype_similarities(t.pyramid, m.bank, t.f, t.argmax_grid);
  t.logits = head_forward(t.f, m.head);
  return t;
}

// Extra gradient injected directly on one grid vector (used by the
// discrimination loss, whose argmin patches bypass the similarity vector f).
struct GridGrad {
  GridIndex at;
  std::vector<double> g;
};

// Accumulates parameter gradients for one example. d_logits drives the
// head -> f -> prototypes/pyramid path; grid_grads add straight onto pyramid
// cells; both then flow through the pools into the backbone.
inline void backward_into(const Model& m, const ForwardTrace& t,
                          const std::vector<double>& d_logits,
                          const std::vector<GridGrad>& grid_grads,
                          const std::vector<std::pair<int, std::vector<double>>>&
                              proto_grads,  // (prototype index, dL/dp_j)
                          ModelGrad& grad) {
  const int n_layers = static_cast<int>(m.backbone.layers.size());
  const int n_protos = m.bank.count();
  auto& d_proto_slot = grad.slots[static_cast<std::size_t>(2 * n_layers)];
  auto& d_head_slot = grad.slots[static_cast<std::size_t>(2 * n_layers + 1)];

  std::vector<Tensor3> d_levels;
  d_levels.reserve(t.pyramid.levels.size());
  for (const auto& lvl : t.pyramid.levels)
    d_levels.emplace_back(lvl.h, lvl.w, lvl.c);

  if (!d_logits.empty()) {
    if (static_cast<int>(d_logits.size()) != m.head.classes)
      throw shape_error("d_logits length does not match class count");
    // head: dW += dlogits x f ; df = W^T dlogits
    std::vector<double> d_f(static_cast<std::size_t>(n_protos), 0.0);
    for (int c = 0; c < m.head.classes; ++c) {
      const double g = d_logits[static_cast<std::size_t>(c)];
      if (g == 0.0) continue;
      for (int j = 0; j < n_protos; ++j) {
        d_head_slot[static_cast<std::size_t>(c) * n_protos + j] +=
            g * t.f[static_cast<std::size_t>(j)];
        d_f[static_cast<std::size_t>(j)] += g * m.head.at(c, j);
      }
    }
    // f_j = b* . p_j at the recorded argmax grid
    for (int j = 0; j < n_protos; ++j) {
      const double g = d_f[static_cast<std::size_t>(j)];
      if (g == 0.0) continue;
      const GridIndex& at = t.argmax_grid[static_cast<std::size_t>(j)];
      const Tensor3& lvl = t.pyramid.levels[static_cast<std::size_t>(at.level)];
      const double* b = lvl.cell(at.row, at.col);
      double* dp = d_proto_slot.data() +
                   static_cast<std::size_t>(j) * m.bank.depth;
      const double* pj = m.bank.proto(j);
      double* dcell = d_levels[static_cast<std::size_t>(at.level)].cell(at.row, at.col);
      for (int d = 0; d < m.bank.depth; ++d) {
        dp[d] += g * b[d];
        dcell[d] += g * pj[d];
      }
    }
  }

  for (const auto& gg : grid_grads) {
    double* dcell =
        d_levels[static_cast<std::size_t>(gg.at.level)].cell(gg.at.row, gg.at.col);
    for (int d = 0; d < m.bank.depth; ++d) dcell[d] += gg.g[static_cast<std::size_t>(d)];
  }
  for (const auto& pg : proto_grads) {
    double* dp = d_proto_slot.data() +
                 static_cast<std::size_t>(pg.first) * m.bank.depth;
    for (int d = 0; d < m.bank.depth; ++d) dp[d] += pg.second[static_cast<std::size_t>(d)];
  }

  // pools -> backbone map
  const Tensor3& map = t.backbone_map();
  Tensor3 d_map(map.h, map.w, map.c);
  for (std::size_t n = 0; n < t.pyramid.levels.size(); ++n)
    max_pool_backward(map, t.pyramid.pool_sizes[n], d_levels[n], d_map);

  // conv chain
  Tensor3 dout = std::move(d_map);
  for (int l = n_layers - 1; l >= 0; --l) {
    const ConvLayer& layer = m.backbone.layers[static_cast<std::size_t>(l)];
    const Tensor3& in = t.acts[static_cast<std::size_t>(l)];
    const Tensor3& out = t.acts[static_cast<std::size_t>(l) + 1];
    Tensor3 din(in.h, in.w, in.c);
    layer.backward(in, out, dout, l > 0 ? &din : nullptr,
                   grad.slots[static_cast<std::size_t>(2 * l)],
                   grad.slots[static_cast<std::size_t>(2 * l) + 1]);
    dout = std::move(din);
  }
}

}  // namespace tcpl
