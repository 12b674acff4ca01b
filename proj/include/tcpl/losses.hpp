#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tcpl/common.hpp"
#include "tcpl/model.hpp"

namespace tcpl {

// Aggregation used for the attraction term of the discrimination loss. The
// verbatim formulation takes the minimum over own-class prototypes and
// grids; take_max is the conventional prototype-network variant, selectable
// through config key loss.cdpd_attract.
enum class AttractRule { take_min, take_max };

inline AttractRule parse_attract_rule(const std::string& s) {
  if (s == "min") return AttractRule::take_min;
  if (s == "max") return AttractRule::take_max;
  throw config_error("cdpd_attract must be \"min\" or \"max\"",
                     "loss.cdpd_attract");
}

struct LossWeights {
  double lambda1 = 0.88;
  double lambda2 = 1e-4;
  double eta = 1.0;
  AttractRule cdpd_attract = AttractRule::take_min;
};

struct LossBreakdown {
  double total = 0.0, ce = 0.0, cdpd = 0.0, dd = 0.0;
  int n_source = 0, n_target_pl = 0;
  bool cdpd_clamped = false;  // exponent clamp fired (never in normal runs)
};

// ---------------------------------------------------------------------------
// Cross-entropy
// ---------------------------------------------------------------------------

inline double cross_entropy_single(const std::vector<double>& logits,
                                   int label) {
  if (label < 0 || label >= static_cast<int>(logits.size()))
    throw loss_error("cross_entropy: label out of range");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double l : logits) sum += std::exp(l - mx);
  return std::log(sum) - (logits[static_cast<std::size_t>(label)] - mx);
}

inline double cross_entropy(const std::vector<std::vector<double>>& logits,
                            const std::vector<int>& labels) {
  if (logits.empty()) throw loss_error("cross_entropy: empty batch");
  if (logits.size() != labels.size())
    throw loss_error("cross_entropy: logits/labels length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i)
    acc += cross_entropy_single(logits[i], labels[i]);
  return acc / static_cast<double>(logits.size());
}

// ---------------------------------------------------------------------------
// Cross-domain prototype discrimination
//
// r = mean over samples of the extremal normalized similarity b.p/|b| over
// {own-class prototypes} x {grids}; r-tilde likewise over non-own-class
// prototypes (always min). Loss = exp((r~s + eta*r~t) - (rs + eta*rt)).
// ---------------------------------------------------------------------------

inline constexpr double kNormFloor = 1e-12;
inline constexpr double kCdpdExpClamp = 30.0;

struct PyramidBatch {
  std::vector<const FeaturePyramid*> pyramids;
  std::vector<int> labels;  // true labels (source) or pseudo-labels (target)

  std::size_t size() const { return pyramids.size(); }
};

namespace detail {

// winner of the per-sample extremum, kept for the gradient pass
struct ExtremeRecord {
  int proto = -1;
  GridIndex at;
  double norm = 0.0;   // clamped |b|
  double value = 0.0;  // b.p/|b|
};

// Scans prototypes of one class block (own or all-but-own) against every
// grid; first candidate in (prototype, level, row, col) order wins ties.
inline ExtremeRecord scan_extreme(const FeaturePyramid& pyr,
                                  const PrototypeBank& bank, int cls,
                                  bool own_class, bool want_max) {
  ExtremeRecord best;
  for (int j = 0; j < bank.count(); ++j) {
    if ((bank.class_of(j) == cls) != own_class) continue;
    const double* pj = bank.proto(j);
    for (int n = 0; n < static_cast<int>(pyr.levels.size()); ++n) {
      const Tensor3& lvl = pyr.levels[static_cast<std::size_t>(n)];
      for (int r = 0; r < lvl.h; ++r)
        for (int c = 0; c < lvl.w; ++c) {
          const double* b = lvl.cell(r, c);
          const double nb = std::max(norm2(b, bank.depth), kNormFloor);
          const double v = dot(b, pj, bank.depth) / nb;
          const bool better = want_max ? v > best.value : v < best.value;
          if (best.proto < 0 || better) {
            best.proto = j;
            best.at = GridIndex{n, r, c};
            best.norm = nb;
            best.value = v;
          }
        }
    }
  }
  if (best.proto < 0)
    throw loss_error("cdpd: no prototypes available for class scan");
  return best;
}

struct CdpdEval {
  double value = 1.0;
  bool clamped = false;
  double rs = 0.0, rts = 0.0, rt = 0.0, rtt = 0.0;
  std::vector<ExtremeRecord> src_attract, src_separate;
  std::vector<ExtremeRecord> tgt_attract, tgt_separate;
};

inline CdpdEval cdpd_eval(const PyramidBatch& source,
                          const PyramidBatch& target,
                          const PrototypeBank& bank, double eta,
                          AttractRule attract) {
  if (source.size() == 0 && target.size() == 0)
    throw loss_error("cdpd: both batches empty");
  if (source.pyramids.size() != source.labels.size() ||
      target.pyramids.size() != target.labels.size())
    throw loss_error("cdpd: pyramid/label length mismatch");
  const bool attract_max = attract == AttractRule::take_max;
  CdpdEval ev;
  auto scan_batch = [&](const PyramidBatch& batch,
                        std::vector<ExtremeRecord>& att,
                        std::vector<ExtremeRecord>& sep, double& r,
                        double& rt) {
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const int cls = batch.labels[i];
      if (cls < 0 || cls >= bank.classes)
        throw loss_error("cdpd: label out of range");
      att.push_back(scan_extreme(*batch.pyramids[i], bank, cls, true,
                                 attract_max));
      sep.push_back(scan_extreme(*batch.pyramids[i], bank, cls, false,
                                 /*want_max=*/false));
      r += att.back().value;
      rt += sep.back().value;
    }
    if (!batch.pyramids.empty()) {
      r /= static_cast<double>(batch.size());
      rt /= static_cast<double>(batch.size());
    }
  };
  scan_batch(source, ev.src_attract, ev.src_separate, ev.rs, ev.rts);
  scan_batch(target, ev.tgt_attract, ev.tgt_separate, ev.rt, ev.rtt);
  const double tgt_scale = target.size() == 0 ? 0.0 : eta;
  double x = (ev.rts + tgt_scale * ev.rtt) - (ev.rs + tgt_scale * ev.rt);
  if (x > kCdpdExpClamp || x < -kCdpdExpClamp) {
    ev.clamped = true;
    x = std::clamp(x, -kCdpdExpClamp, kCdpdExpClamp);
  }
  ev.value = std::exp(x);
  return ev;
}

// d(b.p/|b|)/db at a recorded winner; norm-floor hits freeze the norm.
inline void normalized_sim_grad_b(const ExtremeRecord& rec,
                                  const PrototypeBank& bank,
                                  const FeaturePyramid& pyr, double scale,
                                  std::vector<GridGrad>& out) {
  const Tensor3& lvl = pyr.levels[static_cast<std::size_t>(rec.at.level)];
  const double* b = lvl.cell(rec.at.row, rec.at.col);
  const double* pj = bank.proto(rec.proto);
  GridGrad gg;
  gg.at = rec.at;
  gg.g.resize(static_cast<std::size_t>(bank.depth));
  const double raw_norm = norm2(b, bank.depth);
  const bool floored = raw_norm < kNormFloor;
  const double n = rec.norm;
  const double s = dot(b, pj, bank.depth);
  for (int d = 0; d < bank.depth; ++d) {
    double g = pj[d] / n;
    if (!floored) g -= s * b[d] / (n * n * n);
    gg.g[static_cast<std::size_t>(d)] = scale * g;
  }
  out.push_back(std::move(gg));
}

inline void normalized_sim_grad_p(const ExtremeRecord& rec,
                                  const PrototypeBank& bank,
                                  const FeaturePyramid& pyr, double scale,
                                  std::vector<std::pair<int, std::vector<double>>>& out) {
  const Tensor3& lvl = pyr.levels[static_cast<std::size_t>(rec.at.level)];
  const double* b = lvl.cell(rec.at.row, rec.at.col);
  std::vector<double> g(static_cast<std::size_t>(bank.depth));
  for (int d = 0; d < bank.depth; ++d)
    g[static_cast<std::size_t>(d)] = scale * b[d] / rec.norm;
  out.emplace_back(rec.proto, std::move(g));
}

}  // namespace detail

inline double cdpd_loss(const PyramidBatch& source, const PyramidBatch& target,
                        const PrototypeBank& bank, double eta,
                        AttractRule attract = AttractRule::take_min) {
  return detail::cdpd_eval(source, target, bank, eta, attract).value;
}

// ---------------------------------------------------------------------------
// Decision-head discrimination
// ---------------------------------------------------------------------------

inline double smooth_l1(double x) {
  const double a = std::fabs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

inline double smooth_l1_grad(double x) {
  const double a = std::fabs(x);
  if (a < 1.0) return x;
  return x > 0.0 ? 1.0 : -1.0;
}

inline double dd_loss(const DecisionHead& head, const PrototypeBank& bank) {
  if (head.protos != bank.count() || head.classes != bank.classes)
    throw shape_error("dd_loss: head/bank shape mismatch");
  double acc = 0.0;
  for (int c = 0; c < head.classes; ++c)
    for (int j = 0; j < head.protos; ++j)
      if (bank.class_of(j) != c) acc += smooth_l1(head.at(c, j));
  return acc;
}

// ---------------------------------------------------------------------------
// Combined objective. evaluate_step is the single code path for both the
// value and the gradients; total = ce + lambda1*cdpd + lambda2*dd is computed
// from the same component values it reports.
// ---------------------------------------------------------------------------

struct Example {
  const Tensor3* image = nullptr;
  int label = -1;
};

inline LossBreakdown evaluate_step(const Model& model,
                                   const std::vector<Example>& source,
                                   const std::vector<Example>& target_pl,
                                   const LossWeights& weights,
                                   ModelGrad* grad) {
  if (source.empty()) throw loss_error("evaluate_step: source batch empty");
  LossBreakdown out;
  out.n_source = static_cast<int>(source.size());
  out.n_target_pl = static_cast<int>(target_pl.size());
  const int n_total = out.n_source + out.n_target_pl;

  std::vector<ForwardTrace> traces;
  std::vector<int> labels;
  traces.reserve(static_cast<std::size_t>(n_total));
  labels.reserve(static_cast<std::size_t>(n_total));
  for (const auto& ex : source) {
    traces.push_back(forward_trace(model, *ex.image));
    labels.push_back(ex.label);
  }
  for (const auto& ex : target_pl) {
    traces.push_back(forward_trace(model, *ex.image));
    labels.push_back(ex.label);
  }

  // cross-entropy over the mixed batch, every sample weighted equally
  double ce_acc = 0.0;
  for (int i = 0; i < n_total; ++i)
    ce_acc += cross_entropy_single(traces[static_cast<std::size_t>(i)].logits,
                                   labels[static_cast<std::size_t>(i)]);
  out.ce = ce_acc / static_cast<double>(n_total);

  // discrimination over pyramids of the same traces
  PyramidBatch src_b, tgt_b;
  for (int i = 0; i < out.n_source; ++i) {
    src_b.pyramids.push_back(&traces[static_cast<std::size_t>(i)].pyramid);
    src_b.labels.push_back(labels[static_cast<std::size_t>(i)]);
  }
  for (int i = out.n_source; i < n_total; ++i) {
    tgt_b.pyramids.push_back(&traces[static_cast<std::size_t>(i)].pyramid);
    tgt_b.labels.push_back(labels[static_cast<std::size_t>(i)]);
  }
  detail::CdpdEval cd =
      detail::cdpd_eval(src_b, tgt_b, model.bank, weights.eta,
                        weights.cdpd_attract);
  out.cdpd = cd.value;
  out.cdpd_clamped = cd.clamped;

  out.dd = dd_loss(model.head, model.bank);
  out.total = out.ce + weights.lambda1 * out.cdpd + weights.lambda2 * out.dd;

  if (!std::isfinite(out.ce)) throw loss_error("non-finite loss component: ce");
  if (!std::isfinite(out.cdpd))
    throw loss_error("non-finite loss component: cdpd");
  if (!std::isfinite(out.dd)) throw loss_error("non-finite loss component: dd");

  if (!grad) return out;

  // dd: off-class head entries only
  {
    const int n_layers = static_cast<int>(model.backbone.layers.size());
    auto& d_head = grad->slots[static_cast<std::size_t>(2 * n_layers + 1)];
    for (int c = 0; c < model.head.classes; ++c)
      for (int j = 0; j < model.head.protos; ++j)
        if (model.bank.class_of(j) != c)
          d_head[static_cast<std::size_t>(c) * model.head.protos + j] +=
              weights.lambda2 * smooth_l1_grad(model.head.at(c, j));
  }

  // per-sample: ce through logits, cdpd through recorded winners; clamped
  // exponent means a constant loss, so cdpd contributes no gradient then
  const double tgt_scale = target_pl.empty() ? 0.0 : weights.eta;
  for (int i = 0; i < n_total; ++i) {
    const ForwardTrace& t = traces[static_cast<std::size_t>(i)];
    std::vector<double> d_logits = softmax(t.logits);
    d_logits[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])] -= 1.0;
    for (auto& g : d_logits) g /= static_cast<double>(n_total);

    std::vector<GridGrad> grid_grads;
    std::vector<std::pair<int, std::vector<double>>> proto_grads;
    if (!cd.clamped) {
      const bool is_src = i < out.n_source;
      const int bi = is_src ? i : i - out.n_source;
      const double per = weights.lambda1 * cd.value *
                         (is_src ? 1.0 : tgt_scale) /
                         static_cast<double>(is_src ? out.n_source
                                                    : out.n_target_pl);
      const auto& att = is_src ? cd.src_attract : cd.tgt_attract;
      const auto& sep = is_src ? cd.src_separate : cd.tgt_separate;
      if (per != 0.0) {
        detail::normalized_sim_grad_b(att[static_cast<std::size_t>(bi)],
                                      model.bank, t.pyramid, -per, grid_grads);
        detail::normalized_sim_grad_p(att[static_cast<std::size_t>(bi)],
                                      model.bank, t.pyramid, -per, proto_grads);
        detail::normalized_sim_grad_b(sep[static_cast<std::size_t>(bi)],
                                      model.bank, t.pyramid, per, grid_grads);
        detail::normalized_sim_grad_p(sep[static_cast<std::size_t>(bi)],
                                      model.bank, t.pyramid, per, proto_grads);
      }
    }
    backward_into(model, t, d_logits, grid_grads, proto_grads, *grad);
  }
  return out;
}

inline LossBreakdown total_loss(const Model& model,
                                const std::vector<Example>& source,
                                const std::vector<Example>& target_pl,
                                const LossWeights& weights) {
  return evaluate_step(model, source, target_pl, weights, nullptr);
}

}  // namespace tcpl
