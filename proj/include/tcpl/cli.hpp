#pragma once

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "tcpl/checkpoint.hpp"
#include "tcpl/config.hpp"
#include "tcpl/interpret.hpp"
#include "tcpl/json_util.hpp"
#include "tcpl/trainer.hpp"

namespace tcpl::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

inline std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline void emit_error(const std::string& type, const std::string& message,
                       const std::string& field = "") {
  ordered_json j;
  j["schema_version"] = kSchemaVersion;
  j["error"] = ordered_json{{"type", type}, {"message", message}};
  if (!field.empty()) j["error"]["field"] = field;
  std::cerr << j.dump() << std::endl;
}

template <typename F>
inline int guarded(F&& body) {
  try {
    return body();
  } catch (const config_error& e) {
    emit_error("config", e.what(), e.field);
    return kExitConfig;
  } catch (const dataset_error& e) {
    emit_error("dataset", e.what());
    return kExitConfig;
  } catch (const error& e) {
    emit_error("runtime", e.what());
    return kExitRuntime;
  } catch (const std::exception& e) {
    emit_error("runtime", e.what());
    return kExitRuntime;
  }
}

inline std::uint64_t file_checksum(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot checksum " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    const std::streamsize n = in.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
    if (!in) break;
  }
  return h;
}

// Written atomically at run start; rewritten at run end with a checksum per
// artifact so consumers can verify outputs.
class Manifest {
 public:
  Manifest(std::filesystem::path out_dir, const std::string& command,
           const std::string& config_path, const ordered_json& resolved,
           std::uint64_t seed)
      : out_dir_(std::move(out_dir)) {
    std::filesystem::create_directories(out_dir_);
    j_["schema_version"] = kSchemaVersion;
    j_["command"] = command;
    j_["config_path"] = config_path;
    j_["config"] = resolved;
    j_["out_dir"] = out_dir_.string();
    j_["seed"] = seed;
    j_["started_at"] = iso_timestamp();
    j_["artifacts"] = ordered_json::object();
    write_json_file_atomic(out_dir_ / "manifest.json", j_);
  }

  void finish() {
    ordered_json artifacts = ordered_json::object();
    std::vector<std::filesystem::path> files;
    for (const auto& entry :
         std::filesystem::recursive_directory_iterator(out_dir_)) {
      if (!entry.is_regular_file()) continue;
      if (entry.path().filename() == "manifest.json") continue;
      files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files)
      artifacts[std::filesystem::relative(f, out_dir_).generic_string()] =
          to_hex(file_checksum(f));
    j_["artifacts"] = std::move(artifacts);
    j_["finished_at"] = iso_timestamp();
    write_json_file_atomic(out_dir_ / "manifest.json", j_);
  }

 private:
  std::filesystem::path out_dir_;
  ordered_json j_;
};

struct CommandArgs {
  std::string config_path;
  std::string checkpoint_path;
  std::string out_dir = "out";
  std::string image;           // explain: path or dataset id
  std::string resume_path;     // train: checkpoint to continue from
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;   // train shortcut for --set train.epochs=N
};

namespace detail {

// Checkpoint commands read the embedded config unless --config overrides it;
// --set/--seed apply on top either way.
inline RunConfig effective_config(const CommandArgs& args,
                                  const Checkpoint* ckpt) {
  ordered_json j;
  if (!args.config_path.empty()) {
    j = read_json_file(args.config_path);
  } else if (ckpt) {
    j = ordered_json::parse(ckpt->config_json, nullptr, false);
    if (j.is_discarded())
      throw config_error("checkpoint has no usable embedded config; "
                         "pass --config");
  } else {
    throw config_error("--config is required");
  }
  for (const std::string& kv : args.sets) apply_override(j, kv);
  if (args.seed) j["seed"] = *args.seed;
  if (args.epochs) j["train"]["epochs"] = *args.epochs;
  return parse_run_config(j);
}

inline const ImageSample* find_sample(const DomainDataset& d,
                                      const std::string& id) {
  for (const ImageSample& x : d.samples)
    if (x.id == id) return &x;
  return nullptr;
}

}  // namespace detail

inline int cmd_train(const CommandArgs& args) {
  return guarded([&] {
    RunConfig cfg = detail::effective_config(args, nullptr);
    auto [source, target] = make_datasets(cfg);
    Manifest manifest(args.out_dir, "train", args.config_path, cfg.resolved(),
                      cfg.seed);
    TrainLogger logger(std::filesystem::path(args.out_dir) /
                       "train_log.ndjson");
    Checkpoint resume;
    FitOptions opt;
    opt.out_dir = std::filesystem::path(args.out_dir);
    opt.logger = &logger;
    opt.config_json = cfg.resolved().dump();
    if (!args.resume_path.empty()) {
      resume = load_checkpoint(args.resume_path);
      opt.resume = &resume;
    }
    FitResult result = fit(cfg.train, source, target, opt);

    ordered_json metrics;
    metrics["schema_version"] = kSchemaVersion;
    metrics["epochs_completed"] = result.final.epoch;
    metrics["dplt_size"] = result.final.plt.size();
    if (!result.history.empty()) {
      const EpochMetrics& last = result.history.back();
      if (last.target_accuracy >= 0.0)
        metrics["target_accuracy"] = format_sig9(last.target_accuracy);
      if (last.pseudo_label_accuracy >= 0.0)
        metrics["pseudo_label_accuracy"] =
            format_sig9(last.pseudo_label_accuracy);
    }
    ordered_json history = ordered_json::array();
    for (const EpochMetrics& m : result.history) {
      ordered_json row;
      row["epoch"] = m.epoch;
      row["lr"] = m.lr;
      row["steps"] = m.steps;
      row["mean_total"] = m.mean_total;
      row["dplt_size"] = m.dplt_size;
      if (m.target_accuracy >= 0.0)
        row["target_accuracy"] = m.target_accuracy;
      history.push_back(std::move(row));
    }
    metrics["history"] = std::move(history);
    write_json_file(std::filesystem::path(args.out_dir) / "metrics.json",
                    metrics);
    manifest.finish();
    return kExitOk;
  });
}

inline int cmd_explain(const CommandArgs& args) {
  return guarded([&] {
    if (args.checkpoint_path.empty())
      throw config_error("--checkpoint is required");
    if (args.image.empty())
      throw config_error("--image (path or dataset id) is required");
    Checkpoint ckpt = load_checkpoint(args.checkpoint_path);
    RunConfig cfg = detail::effective_config(args, &ckpt);
    auto [source, target] = make_datasets(cfg);
    Manifest manifest(args.out_dir, "explain", args.config_path,
                      cfg.resolved(), cfg.seed);

    ImageSample query;
    const ImageSample* found = detail::find_sample(target, args.image);
    if (!found) found = detail::find_sample(source, args.image);
    if (found) {
      query = *found;
    } else if (std::filesystem::exists(args.image)) {
      query.image = read_image(args.image);
      const int side = cfg.data_kind == "synthetic" ? cfg.synthetic.image_size
                                                    : cfg.folder_image_size;
      if (side > 0 && (query.image.h != side || query.image.w != side))
        query.image = resize_bilinear(query.image, side, side);
      query.id = std::filesystem::path(args.image).filename().string();
      query.domain = Domain::target;
    } else {
      throw config_error("image not found as dataset id or file: " +
                         args.image);
    }

    write_explanation_report(args.out_dir, ckpt.model, query, &source,
                             &target, cfg.box);

    bool all_projected = true;
    const int lo = argmax_index(ckpt.model.forward(query.image).logits) *
                   ckpt.model.bank.per_class;
    for (int j = lo; j < lo + ckpt.model.bank.per_class; ++j)
      if (!ckpt.model.bank.provenance[static_cast<std::size_t>(j)])
        all_projected = false;
    if (!all_projected) {
      ordered_json warn;
      warn["schema_version"] = kSchemaVersion;
      warn["warning"] =
          "prototypes are unprojected; cards are query-image previews";
      std::cerr << warn.dump() << std::endl;
    }
    manifest.finish();
    return kExitOk;
  });
}

inline int cmd_audit(const CommandArgs& args) {
  return guarded([&] {
    if (args.checkpoint_path.empty())
      throw config_error("--checkpoint is required");
    Checkpoint ckpt = load_checkpoint(args.checkpoint_path);
    RunConfig cfg = detail::effective_config(args, &ckpt);
    auto [source, target] = make_datasets(cfg);
    Manifest manifest(args.out_dir, "audit", args.config_path, cfg.resolved(),
                      cfg.seed);

    std::vector<CommitteeVerdict> verdicts;
    verdicts.reserve(target.samples.size());
    for (const ImageSample& x : target.samples)
      verdicts.push_back(evaluate_committee(x, ckpt.model,
                                            cfg.train.committee_policy,
                                            cfg.train.thresholds, ckpt.epoch));
    std::map<std::string, int> eval_labels;
    for (const ImageSample& x : target.samples)
      if (x.eval_label) eval_labels.emplace(x.id, *x.eval_label);
    ordered_json report = audit_report(
        verdicts, ckpt.epoch, eval_labels.empty() ? nullptr : &eval_labels);
    write_json_file(std::filesystem::path(args.out_dir) / "audit.json",
                    report);
    std::cout << report["summary"].dump() << std::endl;
    manifest.finish();
    return kExitOk;
  });
}

inline int cmd_export_prototypes(const CommandArgs& args) {
  return guarded([&] {
    if (args.checkpoint_path.empty())
      throw config_error("--checkpoint is required");
    Checkpoint ckpt = load_checkpoint(args.checkpoint_path);
    RunConfig cfg = detail::effective_config(args, &ckpt);
    auto [source, target] = make_datasets(cfg);
    Manifest manifest(args.out_dir, "export-prototypes", args.config_path,
                      cfg.resolved(), cfg.seed);
    write_prototype_gallery(args.out_dir, ckpt.model, source, &target);
    manifest.finish();
    return kExitOk;
  });
}

inline int cmd_eval(const CommandArgs& args) {
  return guarded([&] {
    if (args.checkpoint_path.empty())
      throw config_error("--checkpoint is required");
    Checkpoint ckpt = load_checkpoint(args.checkpoint_path);
    RunConfig cfg = detail::effective_config(args, &ckpt);
    auto [source, target] = make_datasets(cfg);
    Manifest manifest(args.out_dir, "eval", args.config_path, cfg.resolved(),
                      cfg.seed);

    int src_n = 0, src_correct = 0;
    for (const ImageSample& x : source.samples) {
      if (!x.label) continue;
      ++src_n;
      if (ckpt.model.predict(x.image) == *x.label) ++src_correct;
    }
    int tgt_n = 0, tgt_correct = 0;
    for (const ImageSample& x : target.samples) {
      if (!x.eval_label) continue;
      ++tgt_n;
      if (ckpt.model.predict(x.image) == *x.eval_label) ++tgt_correct;
    }

    ordered_json j;
    j["schema_version"] = kSchemaVersion;
    j["epoch"] = ckpt.epoch;
    j["source_n"] = src_n;
    if (src_n > 0)
      j["source_accuracy"] = format_sig9(
          static_cast<double>(src_correct) / static_cast<double>(src_n));
    j["target_n"] = tgt_n;
    if (tgt_n > 0)
      j["target_accuracy"] = format_sig9(
          static_cast<double>(tgt_correct) / static_cast<double>(tgt_n));
    write_json_file(std::filesystem::path(args.out_dir) / "eval.json", j);
    std::cout << j.dump() << std::endl;
    manifest.finish();
    return kExitOk;
  });
}

}  // namespace tcpl::cli
