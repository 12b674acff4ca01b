#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "tcpl/checkpoint.hpp"
#include "tcpl/common.hpp"
#include "tcpl/data.hpp"
#include "tcpl/interpret.hpp"
#include "tcpl/json_util.hpp"
#include "tcpl/losses.hpp"
#include "tcpl/model.hpp"
#include "tcpl/selftrain.hpp"

namespace tcpl {

struct TrainConfig {
  int epochs = 250;
  int epoch_update_proto = 120;  // projection starts after this 1-based epoch
  double lr0 = 0.002;
  int lr_decay_every = 50;
  double lr_decay_factor = 0.1;
  double momentum = 0.9;
  int batch_source = 16;
  int batch_target_pl = 8;
  LossWeights weights;
  Thresholds thresholds;
  std::vector<int> pool_sizes = {1, 2, 3};
  int prototypes_per_class = 2;  // M
  int channels = 64;             // D
  std::uint64_t seed = 0;
  bool selftrain_enabled = true;
  AugmentationPolicy committee_policy;
  AugmentationPolicy train_policy;  // defaults equal to committee_policy
  int checkpoint_every = 50;

  void validate() const {
    if (epochs < 0) throw config_error("epochs must be >= 0", "train.epochs");
    if (epoch_update_proto < 0)
      throw config_error("epoch_update_proto must be >= 0",
                         "train.epoch_update_proto");
    if (epochs > 0 && epoch_update_proto >= epochs)
      throw config_error("epoch_update_proto must be < epochs",
                         "train.epoch_update_proto");
    if (!(lr0 > 0.0)) throw config_error("lr0 must be > 0", "train.lr0");
    if (lr_decay_every < 1)
      throw config_error("lr_decay_every must be >= 1", "train.lr_decay_every");
    if (!(lr_decay_factor > 0.0))
      throw config_error("lr_decay_factor must be > 0",
                         "train.lr_decay_factor");
    if (momentum < 0.0 || momentum >= 1.0)
      throw config_error("momentum must be in [0,1)", "train.momentum");
    if (batch_source < 1)
      throw config_error("batch_source must be >= 1", "train.batch_source");
    if (batch_target_pl < 1)
      throw config_error("batch_target_pl must be >= 1",
                         "train.batch_target_pl");
    if (checkpoint_every < 1)
      throw config_error("checkpoint_every must be >= 1",
                         "train.checkpoint_every");
    if (weights.lambda1 < 0.0)
      throw config_error("lambda1 must be >= 0", "loss.lambda1");
    if (weights.lambda2 < 0.0)
      throw config_error("lambda2 must be >= 0", "loss.lambda2");
    if (weights.eta < 0.0) throw config_error("eta must be >= 0", "loss.eta");
    if (!(thresholds.V > 0.0 && thresholds.V < 1.0))
      throw config_error("V must be in (0,1)", "thresholds.V");
    if (thresholds.q < 1)
      throw config_error("q must be >= 1", "thresholds.q");
    if (pool_sizes.empty())
      throw config_error("pool_sizes must be non-empty", "model.pool_sizes");
    for (int k : pool_sizes)
      if (k < 1)
        throw config_error("pool sizes must be >= 1", "model.pool_sizes");
    if (prototypes_per_class < 1)
      throw config_error("prototypes_per_class must be >= 1",
                         "model.prototypes_per_class");
    if (channels < 4)
      throw config_error("channels must be >= 4", "model.channels");
    if (committee_policy.q != thresholds.q || train_policy.q != thresholds.q)
      throw config_error("augmentation committee size must equal thresholds.q",
                         "thresholds.q");
  }
};

inline double learning_rate(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw contract_error("learning_rate: negative epoch");
  return cfg.lr0 *
         std::pow(cfg.lr_decay_factor, epoch / cfg.lr_decay_every);
}

// ---------------------------------------------------------------------------
// Logging: newline-delimited JSON (one record per step / epoch / event) plus
// in-memory history for tests and the CLI summary.
// ---------------------------------------------------------------------------

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  int steps = 0;
  double mean_total = 0.0, mean_ce = 0.0, mean_cdpd = 0.0, mean_dd = 0.0;
  int dplt_size = 0;
  double target_accuracy = -1.0;        // -1 when no evaluation labels
  double pseudo_label_accuracy = -1.0;  // over accepted samples
  int clamp_events = 0;
  int projection_updated = -1;  // -1 = projection did not run
};

class TrainLogger {
 public:
  TrainLogger() = default;
  explicit TrainLogger(const std::filesystem::path& file)
      : out_(std::make_unique<std::ofstream>(file, std::ios::binary)) {
    if (!*out_) throw io_error("cannot open training log: " + file.string());
  }

  void log_step(int step, int epoch, const LossBreakdown& b) {
    ordered_json j;
    j["kind"] = "step";
    j["step"] = step;
    j["epoch"] = epoch;
    j["ce"] = b.ce;
    j["cdpd"] = b.cdpd;
    j["dd"] = b.dd;
    j["total"] = b.total;
    j["n_source"] = b.n_source;
    j["n_target_pl"] = b.n_target_pl;
    if (b.cdpd_clamped) j["cdpd_clamped"] = true;
    write(j);
    ++steps_logged_;
  }

  void log_epoch(const EpochMetrics& m) {
    ordered_json j;
    j["kind"] = "epoch";
    j["epoch"] = m.epoch;
    j["lr"] = m.lr;
    j["steps"] = m.steps;
    j["mean_total"] = m.mean_total;
    j["mean_ce"] = m.mean_ce;
    j["mean_cdpd"] = m.mean_cdpd;
    j["mean_dd"] = m.mean_dd;
    j["dplt_size"] = m.dplt_size;
    if (m.target_accuracy >= 0.0) j["target_accuracy"] = m.target_accuracy;
    if (m.pseudo_label_accuracy >= 0.0)
      j["pseudo_label_accuracy"] = m.pseudo_label_accuracy;
    j["clamp_events"] = m.clamp_events;
    if (m.projection_updated >= 0)
      j["projection_updated"] = m.projection_updated;
    write(j);
    epochs_.push_back(m);
  }

  void log_event(const ordered_json& payload) {
    ordered_json j;
    j["kind"] = "event";
    for (auto it = payload.begin(); it != payload.end(); ++it)
      j[it.key()] = it.value();
    write(j);
  }

  const std::vector<EpochMetrics>& epochs() const { return epochs_; }
  int steps_logged() const { return steps_logged_; }

 private:
  void write(const ordered_json& j) {
    if (out_) {
      *out_ << j.dump() << "\n";
      out_->flush();
    }
  }

  std::unique_ptr<std::ofstream> out_;
  std::vector<EpochMetrics> epochs_;
  int steps_logged_ = 0;
};

// ---------------------------------------------------------------------------
// Training state and the Algorithm-1 loop
// ---------------------------------------------------------------------------

struct TrainState {
  Model model;
  std::vector<std::vector<double>> velocity;  // aligned to trainable_params
  PseudoLabeledSet plt;
  int epoch = 0;  // last completed epoch, 0 = initialization only
  int step_count = 0;
};

inline TrainState initialize(const TrainConfig& cfg, int num_classes) {
  cfg.validate();
  if (num_classes < 2)
    throw config_error("training needs at least 2 classes");
  TrainState st;
  st.model.backbone = make_backbone(cfg.channels, cfg.seed);
  st.model.bank = make_prototype_bank(cfg.prototypes_per_class, num_classes,
                                      cfg.channels, cfg.seed);
  st.model.head = make_decision_head(st.model.bank);
  st.model.pool_sizes = cfg.pool_sizes;
  for (const auto& pv : trainable_params(st.model))
    st.velocity.emplace_back(pv.values->size(), 0.0);
  return st;
}

inline void sgd_step(TrainState& st, const ModelGrad& grad, double lr,
                     double momentum) {
  auto params = trainable_params(st.model);
  for (std::size_t s = 0; s < params.size(); ++s) {
    std::vector<double>& p = *params[s].values;
    std::vector<double>& v = st.velocity[s];
    const std::vector<double>& g = grad.slots[s];
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = momentum * v[i] + g[i];
      p[i] -= lr * v[i];
    }
  }
}

namespace detail {

struct PlView {
  Tensor3 image;
  int label;
};

// All committee views of every accepted sample, in (id order, view order),
// then shuffled by the epoch's own stream.
inline std::vector<PlView> build_pl_pool(const DomainDataset& target,
                                         const PseudoLabeledSet& plt,
                                         const AugmentationPolicy& policy,
                                         std::uint64_t seed, int epoch) {
  std::vector<PlView> pool;
  if (plt.entries.empty()) return pool;
  std::unordered_map<std::string, const ImageSample*> by_id;
  for (const ImageSample& x : target.samples) by_id.emplace(x.id, &x);
  for (const auto& [id, entry] : plt.entries) {
    auto it = by_id.find(id);
    if (it == by_id.end())
      throw contract_error("pseudo-labeled id not present in target set: " +
                           id);
    std::vector<Tensor3> views =
        training_views_for(*it->second, plt, policy, epoch);
    for (Tensor3& v : views)
      pool.push_back(PlView{std::move(v), entry.pseudo_label});
  }
  Rng rng = derive_rng(seed, "plt_order", {static_cast<std::uint64_t>(epoch)});
  rng.shuffle(pool);
  return pool;
}

inline double accuracy_from_preds(const DomainDataset& target,
                                  const std::vector<int>& preds) {
  int known = 0, correct = 0;
  for (std::size_t i = 0; i < target.samples.size(); ++i) {
    if (!target.samples[i].eval_label) continue;
    ++known;
    if (preds[i] == *target.samples[i].eval_label) ++correct;
  }
  return known == 0 ? -1.0
                    : static_cast<double>(correct) /
                          static_cast<double>(known);
}

}  // namespace detail

// One Algorithm-1 epoch (1-based): optimize over mixed batches, refresh the
// pseudo-labeled set, then project prototypes once past the gate.
inline EpochMetrics train_epoch(TrainState& st, const DomainDataset& source,
                                const DomainDataset& target,
                                const TrainConfig& cfg, int epoch,
                                TrainLogger* logger = nullptr,
                                std::vector<CommitteeVerdict>* verdicts_out =
                                    nullptr) {
  if (source.samples.empty()) throw dataset_error("source dataset is empty");
  EpochMetrics m;
  m.epoch = epoch;
  m.lr = learning_rate(epoch - 1, cfg);

  std::vector<int> order(source.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i)
    order[i] = static_cast<int>(i);
  Rng order_rng =
      derive_rng(cfg.seed, "order", {static_cast<std::uint64_t>(epoch)});
  order_rng.shuffle(order);

  std::vector<detail::PlView> pool = detail::build_pl_pool(
      target, st.plt, cfg.train_policy, cfg.seed, epoch);

  const int n_src = static_cast<int>(order.size());
  const int steps = (n_src + cfg.batch_source - 1) / cfg.batch_source;
  std::size_t pool_next = 0;
  ModelGrad grad = ModelGrad::zeros_like(st.model);
  for (int s = 0; s < steps; ++s) {
    std::vector<Example> src_batch;
    for (int i = s * cfg.batch_source;
         i < std::min(n_src, (s + 1) * cfg.batch_source); ++i) {
      const ImageSample& x =
          source.samples[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
      src_batch.push_back(Example{&x.image, *x.label});
    }
    std::vector<Example> pl_batch;
    for (int i = 0; i < cfg.batch_target_pl && pool_next < pool.size();
         ++i, ++pool_next)
      pl_batch.push_back(
          Example{&pool[pool_next].image, pool[pool_next].label});

    grad.zero();
    LossBreakdown b =
        evaluate_step(st.model, src_batch, pl_batch, cfg.weights, &grad);
    sgd_step(st, grad, m.lr, cfg.momentum);
    st.model.bank.renormalize();

    ++st.step_count;
    ++m.steps;
    m.mean_total += b.total;
    m.mean_ce += b.ce;
    m.mean_cdpd += b.cdpd;
    m.mean_dd += b.dd;
    if (b.cdpd_clamped) ++m.clamp_events;
    if (logger) logger->log_step(st.step_count, epoch, b);
  }
  if (m.steps > 0) {
    m.mean_total /= m.steps;
    m.mean_ce /= m.steps;
    m.mean_cdpd /= m.steps;
    m.mean_dd /= m.steps;
  }

  std::vector<CommitteeVerdict> verdicts;
  if (cfg.selftrain_enabled) {
    st.plt = refresh_pseudo_labels(target, st.model, cfg.committee_policy,
                                   cfg.thresholds, epoch, &verdicts);
    std::vector<int> preds;
    preds.reserve(verdicts.size());
    for (const CommitteeVerdict& v : verdicts) preds.push_back(v.base_pred);
    m.target_accuracy = detail::accuracy_from_preds(target, preds);
    std::unordered_map<std::string, int> eval_by_id;
    for (const ImageSample& x : target.samples)
      if (x.eval_label) eval_by_id.emplace(x.id, *x.eval_label);
    int known = 0, correct = 0;
    for (const auto& [id, entry] : st.plt.entries) {
      auto it = eval_by_id.find(id);
      if (it == eval_by_id.end()) continue;
      ++known;
      if (entry.pseudo_label == it->second) ++correct;
    }
    m.pseudo_label_accuracy =
        known == 0 ? -1.0
                   : static_cast<double>(correct) / static_cast<double>(known);
  } else if (!target.samples.empty()) {
    std::vector<int> preds;
    preds.reserve(target.samples.size());
    for (const ImageSample& x : target.samples)
      preds.push_back(base_prediction(x, st.model));
    m.target_accuracy = detail::accuracy_from_preds(target, preds);
  }
  m.dplt_size = st.plt.size();

  if (epoch > cfg.epoch_update_proto) {
    ProjectionReport report = project_prototypes(
        st.model, source, target, st.plt, cfg.weights.eta);
    st.model.bank.renormalize();
    m.projection_updated = report.updated;
    if (logger) {
      ordered_json ev;
      ev["event"] = "projection";
      ev["epoch"] = epoch;
      ev["updated"] = report.updated;
      ev["skipped"] = report.skipped;
      logger->log_event(ev);
    }
  }

  st.epoch = epoch;
  if (verdicts_out) *verdicts_out = std::move(verdicts);
  if (logger) logger->log_epoch(m);
  return m;
}

// ---------------------------------------------------------------------------
// Full fit loop with checkpoints, audits and resume
// ---------------------------------------------------------------------------

struct FitOptions {
  std::optional<std::filesystem::path> out_dir;
  TrainLogger* logger = nullptr;
  const Checkpoint* resume = nullptr;
  std::string config_json;  // resolved run config, embedded in checkpoints
  std::function<void(int epoch, const std::vector<CommitteeVerdict>&,
                     const TrainState&)>
      on_refresh;  // test hook, called after each epoch's refresh
};

struct FitResult {
  Checkpoint final;
  std::vector<EpochMetrics> history;
};

inline Checkpoint make_checkpoint(const TrainState& st,
                                  const TrainConfig& cfg,
                                  const std::string& config_json) {
  Checkpoint ckpt;
  ckpt.config_json = config_json;
  ckpt.epoch = st.epoch;
  ckpt.model = st.model;
  ckpt.optimizer = st.velocity;
  ckpt.plt = st.plt;
  ckpt.rng_state =
      derive_rng(cfg.seed, "snapshot", {static_cast<std::uint64_t>(st.epoch)})
          .state();
  return ckpt;
}

inline TrainState state_from_checkpoint(const Checkpoint& ckpt) {
  TrainState st;
  st.model = ckpt.model;
  if (ckpt.optimizer) {
    st.velocity = *ckpt.optimizer;
  } else {
    for (const auto& pv : trainable_params(st.model))
      st.velocity.emplace_back(pv.values->size(), 0.0);
  }
  st.plt = ckpt.plt;
  st.epoch = ckpt.epoch;
  return st;
}

inline FitResult fit(const TrainConfig& cfg, const DomainDataset& source,
                     const DomainDataset& target, const FitOptions& opt = {}) {
  cfg.validate();
  if (source.samples.empty()) throw dataset_error("source dataset is empty");

  std::map<std::string, int> eval_labels;
  for (const ImageSample& x : target.samples)
    if (x.eval_label) eval_labels.emplace(x.id, *x.eval_label);

  FitResult result;
  TrainState st;
  if (opt.resume) {
    st = state_from_checkpoint(*opt.resume);
  } else {
    st = initialize(cfg, source.num_classes());
    EpochMetrics init;
    init.epoch = 0;
    init.lr = cfg.epochs > 0 ? learning_rate(0, cfg) : cfg.lr0;
    std::vector<int> preds;
    preds.reserve(target.samples.size());
    for (const ImageSample& x : target.samples)
      preds.push_back(base_prediction(x, st.model));
    if (!target.samples.empty())
      init.target_accuracy = detail::accuracy_from_preds(target, preds);
    result.history.push_back(init);
    if (opt.logger) opt.logger->log_epoch(init);
  }

  std::filesystem::path ckpt_dir, audit_dir;
  if (opt.out_dir) {
    ckpt_dir = *opt.out_dir / "checkpoints";
    audit_dir = *opt.out_dir / "audit";
    std::filesystem::create_directories(ckpt_dir);
    if (cfg.selftrain_enabled) std::filesystem::create_directories(audit_dir);
  }

  for (int epoch = st.epoch + 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<CommitteeVerdict> verdicts;
    EpochMetrics m =
        train_epoch(st, source, target, cfg, epoch, opt.logger, &verdicts);
    result.history.push_back(m);
    if (opt.on_refresh) opt.on_refresh(epoch, verdicts, st);
    if (opt.out_dir && cfg.selftrain_enabled) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%04d.json", epoch);
      write_json_file(audit_dir / name,
                      audit_report(verdicts, epoch,
                                   eval_labels.empty() ? nullptr
                                                       : &eval_labels));
    }
    if (opt.out_dir && (epoch % cfg.checkpoint_every == 0)) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%04d.ckpt", epoch);
      save_checkpoint(ckpt_dir / name,
                      make_checkpoint(st, cfg, opt.config_json));
    }
  }

  result.final = make_checkpoint(st, cfg, opt.config_json);
  if (opt.out_dir)
    save_checkpoint(*opt.out_dir / "checkpoint_final.ckpt", result.final);
  return result;
}

}  // namespace tcpl
