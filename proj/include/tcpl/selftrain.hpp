#pragma once

#include <map>
#include <string>
#include <vector>

#include "tcpl/common.hpp"
#include "tcpl/data.hpp"
#include "tcpl/json_util.hpp"
#include "tcpl/model.hpp"

namespace tcpl {

// Which index block counts as "own prototypes" in the third criterion. The
// partition-correct multiplier is prototypes-per-class; level-count is the
// verbatim alternative kept behind config key thresholds.block_multiplier.
enum class BlockMultiplier { per_class_m, level_count_n };

inline BlockMultiplier parse_block_multiplier(const std::string& s) {
  if (s == "m") return BlockMultiplier::per_class_m;
  if (s == "n") return BlockMultiplier::level_count_n;
  throw config_error("block_multiplier must be \"m\" or \"n\"",
                     "thresholds.block_multiplier");
}

struct Thresholds {
  double V = 0.97;  // per-view confidence floor
  int q = 4;        // committee size
  BlockMultiplier block_multiplier = BlockMultiplier::per_class_m;
};

struct ViewRecord {
  double confidence = 0.0;  // max softmax probability
  int pred = -1;            // argmax of logits
  int top_prototype = -1;   // argmax over f
};

struct CriteriaFlags {
  bool confidence = false;
  bool prediction = false;
  bool prototype = false;
};

struct CommitteeVerdict {
  std::string sample_id;
  int base_pred = -1;
  std::vector<ViewRecord> per_view;
  CriteriaFlags criteria;
  bool consistent = false;
};

struct PseudoLabelEntry {
  int pseudo_label = -1;
  int epoch_assigned = 0;
  CommitteeVerdict verdict;
};

struct PseudoLabeledSet {
  std::map<std::string, PseudoLabelEntry> entries;  // keyed by sample id
  int epoch = 0;

  bool contains(const std::string& id) const { return entries.count(id) > 0; }
  int size() const { return static_cast<int>(entries.size()); }
};

inline int base_prediction(const ImageSample& x, const Model& model) {
  return argmax_index(model.forward(x.image).logits);
}

inline int block_width(const Model& model, BlockMultiplier mult) {
  return mult == BlockMultiplier::per_class_m
             ? model.bank.per_class
             : static_cast<int>(model.pool_sizes.size());
}

// The pure decision rule over already-computed view records: every view
// confident above V, a strict majority of view predictions agreeing with the
// base prediction, and a strict majority of top prototypes falling inside
// the base prediction's index block of the given width.
inline CommitteeVerdict decide_verdict(std::string sample_id, int base_pred,
                                       std::vector<ViewRecord> per_view,
                                       const Thresholds& th, int width) {
  CommitteeVerdict verdict;
  verdict.sample_id = std::move(sample_id);
  verdict.base_pred = base_pred;
  verdict.per_view = std::move(per_view);
  const int q = static_cast<int>(verdict.per_view.size());
  const int lo = base_pred * width;
  const int hi = lo + width;  // exclusive
  int pred_votes = 0, proto_votes = 0;
  bool all_confident = true;
  for (const ViewRecord& rec : verdict.per_view) {
    if (!(rec.confidence > th.V)) all_confident = false;
    if (rec.pred == base_pred) ++pred_votes;
    if (rec.top_prototype >= lo && rec.top_prototype < hi) ++proto_votes;
  }
  verdict.criteria.confidence = all_confident;
  verdict.criteria.prediction = 2 * pred_votes > q;
  verdict.criteria.prototype = 2 * proto_votes > q;
  verdict.consistent = verdict.criteria.confidence &&
                       verdict.criteria.prediction &&
                       verdict.criteria.prototype;
  return verdict;
}

inline CommitteeVerdict evaluate_committee(const ImageSample& x,
                                           const Model& model,
                                           const AugmentationPolicy& policy,
                                           const Thresholds& th, int epoch) {
  if (th.q < 1)
    throw config_error("committee size must be >= 1", "thresholds.q");
  if (policy.q != th.q)
    throw contract_error("policy committee size disagrees with thresholds.q");
  const int base_pred = base_prediction(x, model);
  std::vector<ViewRecord> per_view;
  per_view.reserve(static_cast<std::size_t>(th.q));
  for (int j = 0; j < th.q; ++j) {
    const Tensor3 view = committee_view(x, policy, epoch, j);
    const ModelOutput out = model.forward(view);
    ViewRecord rec;
    const std::vector<double> probs = softmax(out.logits);
    rec.pred = argmax_index(out.logits);
    rec.confidence = probs[static_cast<std::size_t>(rec.pred)];
    rec.top_prototype = argmax_index(out.f);
    per_view.push_back(rec);
  }
  return decide_verdict(x.id, base_pred, std::move(per_view), th,
                        block_width(model, th.block_multiplier));
}

// Rebuilds the pseudo-labeled set from scratch; nothing carries over from
// the previous epoch. Returns all verdicts alongside for auditing.
inline PseudoLabeledSet refresh_pseudo_labels(
    const DomainDataset& target, const Model& model,
    const AugmentationPolicy& policy, const Thresholds& th, int epoch,
    std::vector<CommitteeVerdict>* all_verdicts = nullptr) {
  PseudoLabeledSet set;
  set.epoch = epoch;
  for (const ImageSample& x : target.samples) {
    CommitteeVerdict v = evaluate_committee(x, model, policy, th, epoch);
    if (all_verdicts) all_verdicts->push_back(v);
    if (!v.consistent) continue;
    PseudoLabelEntry entry;
    entry.pseudo_label = v.base_pred;
    entry.epoch_assigned = epoch;
    entry.verdict = std::move(v);
    set.entries.emplace(x.id, std::move(entry));
  }
  return set;
}

// The q committee views a consistent sample trains on; the raw image itself
// never enters the loss.
inline std::vector<Tensor3> training_views_for(const ImageSample& x,
                                               const PseudoLabeledSet& set,
                                               const AugmentationPolicy& policy,
                                               int epoch) {
  if (!set.contains(x.id))
    throw contract_error("training_views_for called on a sample outside the "
                         "pseudo-labeled set: " + x.id);
  return committee_views(x, policy, epoch);
}

// ---------------------------------------------------------------------------
// Audit emission: every verdict plus a summary, one file per epoch.
// ---------------------------------------------------------------------------

inline ordered_json verdict_to_json(const CommitteeVerdict& v) {
  ordered_json j;
  j["sample_id"] = v.sample_id;
  j["base_pred"] = v.base_pred;
  j["per_view"] = ordered_json::array();
  for (const ViewRecord& rec : v.per_view) {
    ordered_json r;
    r["confidence"] = format_sig9(rec.confidence);
    r["pred"] = rec.pred;
    r["top_prototype"] = rec.top_prototype;
    j["per_view"].push_back(std::move(r));
  }
  j["criteria"] = {{"confidence", v.criteria.confidence},
                   {"prediction", v.criteria.prediction},
                   {"prototype", v.criteria.prototype}};
  j["consistent"] = v.consistent;
  return j;
}

// eval_labels (id -> class), when available, adds pseudo-label accuracy over
// the accepted samples
inline ordered_json audit_report(
    const std::vector<CommitteeVerdict>& verdicts, int epoch,
    const std::map<std::string, int>* eval_labels = nullptr) {
  ordered_json j;
  j["schema_version"] = kSchemaVersion;
  j["epoch"] = epoch;
  int accepted = 0, fail_conf = 0, fail_pred = 0, fail_proto = 0;
  int pl_correct = 0, pl_known = 0;
  j["verdicts"] = ordered_json::array();
  for (const CommitteeVerdict& v : verdicts) {
    j["verdicts"].push_back(verdict_to_json(v));
    if (v.consistent) {
      ++accepted;
      if (eval_labels) {
        auto it = eval_labels->find(v.sample_id);
        if (it != eval_labels->end()) {
          ++pl_known;
          if (it->second == v.base_pred) ++pl_correct;
        }
      }
    }
    if (!v.criteria.confidence) ++fail_conf;
    if (!v.criteria.prediction) ++fail_pred;
    if (!v.criteria.prototype) ++fail_proto;
  }
  ordered_json summary;
  summary["total"] = verdicts.size();
  summary["accepted"] = accepted;
  summary["acceptance_rate"] = format_sig9(
      verdicts.empty() ? 0.0
                       : static_cast<double>(accepted) /
                             static_cast<double>(verdicts.size()));
  summary["failed_confidence"] = fail_conf;
  summary["failed_prediction"] = fail_pred;
  summary["failed_prototype"] = fail_proto;
  if (eval_labels && pl_known > 0)
    summary["pseudo_label_accuracy"] = format_sig9(
        static_cast<double>(pl_correct) / static_cast<double>(pl_known));
  j["summary"] = std::move(summary);
  return j;
}

}  // namespace tcpl
