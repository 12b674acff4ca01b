#pragma once

#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "tcpl/common.hpp"
#include "tcpl/data.hpp"
#include "tcpl/image_ops.hpp"
#include "tcpl/interpret.hpp"
#include "tcpl/json_util.hpp"
#include "tcpl/trainer.hpp"

namespace tcpl {

// Transform magnitudes for one augmentation slot; zero disables an op and
// crop = 1 keeps full frames.
struct AugmentSpec {
  double crop = 0.75;
  double flip = 0.5;
  double brightness = 0.25;
  double contrast = 0.25;
  double saturation = 0.25;
  double hue = 0.05;
  double cutout = 0.25;
};

inline AugmentationPolicy policy_from_spec(const AugmentSpec& spec, int q,
                                           std::uint64_t seed) {
  AugmentationPolicy policy;
  policy.q = q;
  policy.seed = seed;
  if (spec.crop < 1.0) {
    TransformOp op;
    op.kind = TransformOp::Kind::crop;
    op.min_side = spec.crop;
    policy.ops.push_back(op);
  }
  if (spec.flip > 0.0) {
    TransformOp op;
    op.kind = TransformOp::Kind::hflip;
    op.prob = spec.flip;
    policy.ops.push_back(op);
  }
  if (spec.brightness > 0.0 || spec.contrast > 0.0 || spec.saturation > 0.0 ||
      spec.hue > 0.0) {
    TransformOp op;
    op.kind = TransformOp::Kind::color_jitter;
    op.brightness = spec.brightness;
    op.contrast = spec.contrast;
    op.saturation = spec.saturation;
    op.hue = spec.hue;
    policy.ops.push_back(op);
  }
  if (spec.cutout > 0.0) {
    TransformOp op;
    op.kind = TransformOp::Kind::cutout;
    op.frac = spec.cutout;
    policy.ops.push_back(op);
  }
  return policy;
}

struct RunConfig {
  std::uint64_t seed = 0;

  std::string data_kind = "synthetic";  // "synthetic" | "folders"
  SyntheticConfig synthetic;            // synthetic.seed defaults to seed
  std::string folder_source;
  std::string folder_target;
  int folder_image_size = 64;  // 0 keeps native sizes

  TrainConfig train;  // model / schedule / loss / thresholds / selftrain

  AugmentSpec committee_spec;
  AugmentSpec train_spec;  // defaults equal to committee_spec
  std::uint64_t augment_seed = 0;

  BoxConfig box;

  ordered_json resolved() const;
};

namespace cfgdetail {

class SectionReader {
 public:
  SectionReader(const ordered_json& j, std::string path)
      : j_(&j), path_(std::move(path)) {
    if (!j.is_object())
      throw config_error("expected an object", path_.empty() ? "config"
                                                             : path_);
  }

  std::string key_path(const char* k) const {
    return path_.empty() ? std::string(k) : path_ + "." + k;
  }

  bool has(const char* k) {
    known_.insert(k);
    auto it = j_->find(k);
    return it != j_->end() && !it->is_null();
  }

  double number(const char* k, double dflt) {
    if (!has(k)) return dflt;
    const auto& v = (*j_)[k];
    if (!v.is_number())
      throw config_error("expected a number", key_path(k));
    return v.get<double>();
  }

  int integer(const char* k, int dflt) {
    if (!has(k)) return dflt;
    const auto& v = (*j_)[k];
    if (!v.is_number_integer())
      throw config_error("expected an integer", key_path(k));
    return v.get<int>();
  }

  std::uint64_t unsigned64(const char* k, std::uint64_t dflt) {
    if (!has(k)) return dflt;
    const auto& v = (*j_)[k];
    if (!v.is_number_integer() ||
        (v.is_number_integer() && !v.is_number_unsigned() &&
         v.get<std::int64_t>() < 0))
      throw config_error("expected a non-negative integer", key_path(k));
    return v.get<std::uint64_t>();
  }

  bool boolean(const char* k, bool dflt) {
    if (!has(k)) return dflt;
    const auto& v = (*j_)[k];
    if (!v.is_boolean()) throw config_error("expected a boolean", key_path(k));
    return v.get<bool>();
  }

  std::string text(const char* k, const std::string& dflt) {
    if (!has(k)) return dflt;
    const auto& v = (*j_)[k];
    if (!v.is_string()) throw config_error("expected a string", key_path(k));
    return v.get<std::string>();
  }

  std::vector<int> int_array(const char* k, std::vector<int> dflt) {
    if (!has(k)) return dflt;
    const auto& v = (*j_)[k];
    if (!v.is_array())
      throw config_error("expected an array of integers", key_path(k));
    std::vector<int> out;
    for (const auto& e : v) {
      if (!e.is_number_integer())
        throw config_error("expected an array of integers", key_path(k));
      out.push_back(e.get<int>());
    }
    return out;
  }

  // nested object; missing or null acts as an empty object
  SectionReader sub(const char* k) {
    known_.insert(k);
    auto it = j_->find(k);
    if (it == j_->end() || it->is_null())
      return SectionReader(empty_object(), key_path(k));
    return SectionReader(*it, key_path(k));
  }

  void done() const {
    for (auto it = j_->begin(); it != j_->end(); ++it)
      if (known_.find(it.key()) == known_.end())
        throw config_error("unknown config key",
                           path_.empty() ? it.key() : path_ + "." + it.key());
  }

 private:
  static const ordered_json& empty_object() {
    static const ordered_json empty = ordered_json::object();
    return empty;
  }

  const ordered_json* j_;
  std::string path_;
  std::set<std::string> known_;
};

inline AugmentSpec parse_augment_spec(SectionReader sec,
                                      const AugmentSpec& dflt) {
  AugmentSpec spec;
  spec.crop = sec.number("crop", dflt.crop);
  spec.flip = sec.number("flip", dflt.flip);
  spec.brightness = sec.number("brightness", dflt.brightness);
  spec.contrast = sec.number("contrast", dflt.contrast);
  spec.saturation = sec.number("saturation", dflt.saturation);
  spec.hue = sec.number("hue", dflt.hue);
  spec.cutout = sec.number("cutout", dflt.cutout);
  sec.done();
  auto in_range = [&](double v, double lo, double hi, const char* key) {
    if (!(v >= lo && v <= hi))
      throw config_error("value out of range", sec.key_path(key));
  };
  in_range(spec.crop, 0.1, 1.0, "crop");
  in_range(spec.flip, 0.0, 1.0, "flip");
  in_range(spec.brightness, 0.0, 0.9, "brightness");
  in_range(spec.contrast, 0.0, 0.9, "contrast");
  in_range(spec.saturation, 0.0, 0.9, "saturation");
  in_range(spec.hue, 0.0, 0.5, "hue");
  in_range(spec.cutout, 0.0, 0.9, "cutout");
  return spec;
}

inline ordered_json augment_spec_json(const AugmentSpec& s) {
  return ordered_json{{"crop", s.crop},
                      {"flip", s.flip},
                      {"brightness", s.brightness},
                      {"contrast", s.contrast},
                      {"saturation", s.saturation},
                      {"hue", s.hue},
                      {"cutout", s.cutout}};
}

}  // namespace cfgdetail

inline RunConfig parse_run_config(const ordered_json& j) {
  using cfgdetail::SectionReader;
  RunConfig cfg;
  SectionReader root(j, "");

  const int schema = root.integer("schema_version", kSchemaVersion);
  if (schema != kSchemaVersion)
    throw config_error("unsupported schema_version", "schema_version");
  cfg.seed = root.unsigned64("seed", 0);

  {
    SectionReader data = root.sub("data");
    cfg.data_kind = data.text("kind", "synthetic");
    if (cfg.data_kind != "synthetic" && cfg.data_kind != "folders")
      throw config_error("kind must be \"synthetic\" or \"folders\"",
                         "data.kind");
    {
      SectionReader syn = data.sub("synthetic");
      cfg.synthetic.classes = syn.integer("classes", 3);
      cfg.synthetic.per_class = syn.integer("per_class", 50);
      cfg.synthetic.image_size = syn.integer("image_size", 32);
      cfg.synthetic.seed = syn.unsigned64("seed", cfg.seed);
      {
        SectionReader shift = syn.sub("shift");
        cfg.synthetic.shift.hue_delta = shift.number("hue_delta", 0.05);
        cfg.synthetic.shift.texture_noise = shift.number("texture_noise", 0.25);
        cfg.synthetic.shift.background_swap =
            shift.number("background_swap", 0.0);
        shift.done();
      }
      syn.done();
      if (cfg.synthetic.shift.texture_noise < 0.0)
        throw config_error("texture_noise must be >= 0",
                           "data.synthetic.shift.texture_noise");
      if (cfg.synthetic.shift.background_swap < 0.0 ||
          cfg.synthetic.shift.background_swap > 1.0)
        throw config_error("background_swap must be in [0,1]",
                           "data.synthetic.shift.background_swap");
    }
    {
      SectionReader folders = data.sub("folders");
      cfg.folder_source = folders.text("source", "");
      cfg.folder_target = folders.text("target", "");
      cfg.folder_image_size = folders.integer("image_size", 64);
      folders.done();
      if (cfg.folder_image_size != 0 && cfg.folder_image_size < 32)
        throw config_error("image_size must be 0 (native) or >= 32",
                           "data.folders.image_size");
      if (cfg.data_kind == "folders") {
        if (cfg.folder_source.empty())
          throw config_error("source folder required", "data.folders.source");
        if (cfg.folder_target.empty())
          throw config_error("target folder required", "data.folders.target");
      }
    }
    data.done();
  }

  {
    SectionReader model = root.sub("model");
    cfg.train.channels = model.integer("channels", 64);
    cfg.train.prototypes_per_class = model.integer("prototypes_per_class", 2);
    cfg.train.pool_sizes = model.int_array("pool_sizes", {1, 2, 3});
    model.done();
  }

  {
    SectionReader tr = root.sub("train");
    cfg.train.epochs = tr.integer("epochs", 250);
    cfg.train.epoch_update_proto = tr.integer("epoch_update_proto", 120);
    cfg.train.lr0 = tr.number("lr0", 0.002);
    cfg.train.lr_decay_every = tr.integer("lr_decay_every", 50);
    cfg.train.lr_decay_factor = tr.number("lr_decay_factor", 0.1);
    cfg.train.momentum = tr.number("momentum", 0.9);
    cfg.train.batch_source = tr.integer("batch_source", 16);
    cfg.train.batch_target_pl = tr.integer("batch_target_pl", 8);
    cfg.train.checkpoint_every = tr.integer("checkpoint_every", 50);
    tr.done();
  }

  {
    SectionReader loss = root.sub("loss");
    cfg.train.weights.lambda1 = loss.number("lambda1", 0.88);
    cfg.train.weights.lambda2 = loss.number("lambda2", 1e-4);
    cfg.train.weights.eta = loss.number("eta", 1.0);
    cfg.train.weights.cdpd_attract =
        parse_attract_rule(loss.text("cdpd_attract", "min"));
    loss.done();
  }

  {
    SectionReader th = root.sub("thresholds");
    cfg.train.thresholds.V = th.number("V", 0.97);
    cfg.train.thresholds.q = th.integer("q", 4);
    cfg.train.thresholds.block_multiplier =
        parse_block_multiplier(th.text("block_multiplier", "m"));
    th.done();
  }

  {
    SectionReader st = root.sub("selftrain");
    cfg.train.selftrain_enabled = st.boolean("enabled", true);
    st.done();
  }

  {
    SectionReader aug = root.sub("augment");
    cfg.augment_seed = aug.unsigned64("seed", cfg.seed);
    cfg.committee_spec =
        cfgdetail::parse_augment_spec(aug.sub("committee"), AugmentSpec{});
    cfg.train_spec =
        cfgdetail::parse_augment_spec(aug.sub("train"), cfg.committee_spec);
    aug.done();
  }

  {
    SectionReader in = root.sub("interpret");
    cfg.box.rule = parse_box_rule(in.text("box_rule", "percentile"));
    cfg.box.percentile = in.number("box_percentile", 95.0);
    in.done();
    if (!(cfg.box.percentile > 0.0 && cfg.box.percentile <= 100.0))
      throw config_error("box_percentile must be in (0,100]",
                         "interpret.box_percentile");
  }

  root.done();

  cfg.train.seed = cfg.seed;
  cfg.train.committee_policy = policy_from_spec(
      cfg.committee_spec, cfg.train.thresholds.q, cfg.augment_seed);
  cfg.train.train_policy = policy_from_spec(
      cfg.train_spec, cfg.train.thresholds.q, cfg.augment_seed);
  cfg.train.validate();
  if (cfg.data_kind == "synthetic") {
    if (cfg.synthetic.classes < 2)
      throw config_error("classes must be >= 2", "data.synthetic.classes");
    if (cfg.synthetic.per_class < 4)
      throw config_error("per_class must be >= 4", "data.synthetic.per_class");
    if (cfg.synthetic.image_size < 32)
      throw config_error("image_size must be >= 32",
                         "data.synthetic.image_size");
  }
  return cfg;
}

inline ordered_json RunConfig::resolved() const {
  ordered_json j;
  j["schema_version"] = kSchemaVersion;
  j["seed"] = seed;
  j["data"] = ordered_json{
      {"kind", data_kind},
      {"synthetic",
       ordered_json{{"classes", synthetic.classes},
                    {"per_class", synthetic.per_class},
                    {"image_size", synthetic.image_size},
                    {"seed", synthetic.seed},
                    {"shift",
                     ordered_json{{"hue_delta", synthetic.shift.hue_delta},
                                  {"texture_noise",
                                   synthetic.shift.texture_noise},
                                  {"background_swap",
                                   synthetic.shift.background_swap}}}}},
      {"folders", ordered_json{{"source", folder_source},
                               {"target", folder_target},
                               {"image_size", folder_image_size}}}};
  j["model"] = ordered_json{{"channels", train.channels},
                            {"prototypes_per_class",
                             train.prototypes_per_class},
                            {"pool_sizes", train.pool_sizes}};
  j["train"] = ordered_json{{"epochs", train.epochs},
                            {"epoch_update_proto", train.epoch_update_proto},
                            {"lr0", train.lr0},
                            {"lr_decay_every", train.lr_decay_every},
                            {"lr_decay_factor", train.lr_decay_factor},
                            {"momentum", train.momentum},
                            {"batch_source", train.batch_source},
                            {"batch_target_pl", train.batch_target_pl},
                            {"checkpoint_every", train.checkpoint_every}};
  j["loss"] = ordered_json{
      {"lambda1", train.weights.lambda1},
      {"lambda2", train.weights.lambda2},
      {"eta", train.weights.eta},
      {"cdpd_attract",
       train.weights.cdpd_attract == AttractRule::take_min ? "min" : "max"}};
  j["thresholds"] = ordered_json{
      {"V", train.thresholds.V},
      {"q", train.thresholds.q},
      {"block_multiplier",
       train.thresholds.block_multiplier == BlockMultiplier::per_class_m
           ? "m"
           : "n"}};
  j["selftrain"] = ordered_json{{"enabled", train.selftrain_enabled}};
  j["augment"] =
      ordered_json{{"seed", augment_seed},
                   {"committee", cfgdetail::augment_spec_json(committee_spec)},
                   {"train", cfgdetail::augment_spec_json(train_spec)}};
  j["interpret"] = ordered_json{
      {"box_rule",
       box.rule == BoxRule::percentile ? "percentile" : "fraction_of_max"},
      {"box_percentile", box.percentile}};
  return j;
}

// Dotted-path override: value text is parsed as JSON when possible, else
// taken as a string.
inline void apply_override(ordered_json& root, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0)
    throw config_error("--set expects key=value, got: " + kv);
  const std::string path = kv.substr(0, eq);
  const std::string text = kv.substr(eq + 1);
  ordered_json value = ordered_json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  ordered_json* cur = &root;
  std::size_t pos = 0;
  while (true) {
    const std::size_t dot = path.find('.', pos);
    const std::string seg = path.substr(pos, dot - pos);
    if (seg.empty()) throw config_error("empty path segment in --set " + kv);
    if (dot == std::string::npos) {
      (*cur)[seg] = std::move(value);
      break;
    }
    if (!cur->contains(seg) || !(*cur)[seg].is_object())
      (*cur)[seg] = ordered_json::object();
    cur = &(*cur)[seg];
    pos = dot + 1;
  }
}

inline RunConfig load_run_config(
    const std::filesystem::path& path,
    const std::vector<std::string>& overrides = {},
    std::optional<std::uint64_t> seed_override = std::nullopt) {
  ordered_json j = read_json_file(path);
  for (const std::string& kv : overrides) apply_override(j, kv);
  if (seed_override) j["seed"] = *seed_override;
  return parse_run_config(j);
}

inline RunConfig config_from_json_text(const std::string& text) {
  ordered_json j = ordered_json::parse(text, nullptr, false);
  if (j.is_discarded())
    throw config_error("invalid embedded config JSON");
  return parse_run_config(j);
}

inline std::pair<DomainDataset, DomainDataset> make_datasets(
    const RunConfig& cfg) {
  if (cfg.data_kind == "synthetic")
    return generate_synthetic_pair(cfg.synthetic);
  DomainDataset source = load_folder_dataset(cfg.folder_source, Domain::source);
  DomainDataset target = load_folder_dataset(cfg.folder_target, Domain::target);
  if (cfg.folder_image_size > 0) {
    for (ImageSample& x : source.samples)
      x.image = resize_bilinear(x.image, cfg.folder_image_size,
                                cfg.folder_image_size);
    for (ImageSample& x : target.samples)
      x.image = resize_bilinear(x.image, cfg.folder_image_size,
                                cfg.folder_image_size);
  }
  return {std::move(source), std::move(target)};
}

}  // namespace tcpl
