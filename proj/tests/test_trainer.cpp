#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tcpl/trainer.hpp"
#include "test_util.hpp"

namespace {

namespace fs = std::filesystem;

tcpl::TrainConfig toy_config(std::uint64_t seed) {
  tcpl::TrainConfig cfg;
  cfg.epochs = 4;
  cfg.epoch_update_proto = 2;
  cfg.lr0 = 0.01;
  cfg.batch_source = 4;
  cfg.batch_target_pl = 2;
  cfg.pool_sizes = {1};
  cfg.prototypes_per_class = 2;
  cfg.channels = 8;
  cfg.seed = seed;
  cfg.thresholds.V = 0.5;
  cfg.thresholds.q = 2;
  cfg.committee_policy = tcpl::default_policy(2, seed + 1);
  cfg.train_policy = cfg.committee_policy;
  cfg.checkpoint_every = 2;
  return cfg;
}

std::pair<tcpl::DomainDataset, tcpl::DomainDataset> toy_data(
    std::uint64_t seed) {
  tcpl::SyntheticConfig scfg;
  scfg.classes = 2;
  scfg.per_class = 4;
  scfg.image_size = 32;
  scfg.seed = seed;
  scfg.shift.hue_delta = 0.05;
  return tcpl::generate_synthetic_pair(scfg);
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  EXPECT_TRUE(in.good()) << p;
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

std::string checkpoint_bytes(const tcpl::Checkpoint& ckpt,
                             const fs::path& dir, const std::string& name) {
  const fs::path p = dir / name;
  tcpl::save_checkpoint(p, ckpt);
  return file_bytes(p);
}

std::vector<tcpl::ordered_json> read_ndjson(const fs::path& p) {
  std::ifstream in(p);
  EXPECT_TRUE(in.good()) << p;
  std::vector<tcpl::ordered_json> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(tcpl::ordered_json::parse(line));
  return out;
}

TEST(Initialize, StartsFromTheDocumentedState) {
  tcpl::TrainConfig cfg = toy_config(3);
  tcpl::TrainState st = tcpl::initialize(cfg, 2);
  EXPECT_EQ(st.epoch, 0);
  EXPECT_EQ(st.plt.size(), 0);
  EXPECT_EQ(st.model.head.classes, 2);
  EXPECT_EQ(st.model.head.protos, 4);
  for (int c = 0; c < 2; ++c)
    for (int j = 0; j < 4; ++j)
      EXPECT_EQ(st.model.head.at(c, j),
                st.model.bank.class_of(j) == c ? 1.0 : -0.5);
  for (int j = 0; j < st.model.bank.count(); ++j)
    EXPECT_NEAR(tcpl::norm2(st.model.bank.proto(j), 8), 1.0, 1e-12);
  ASSERT_EQ(st.velocity.size(), tcpl::trainable_params(st.model).size());
  for (const auto& v : st.velocity)
    for (double x : v) EXPECT_EQ(x, 0.0);

  tcpl::TrainState again = tcpl::initialize(cfg, 2);
  EXPECT_EQ(st.model.bank.p, again.model.bank.p);
  for (std::size_t l = 0; l < st.model.backbone.layers.size(); ++l)
    EXPECT_EQ(st.model.backbone.layers[l].w, again.model.backbone.layers[l].w);
  EXPECT_THROW(tcpl::initialize(cfg, 1), tcpl::config_error);
}

TEST(Validate, RejectsEachBadFieldWithItsPath) {
  const tcpl::TrainConfig good = toy_config(1);
  EXPECT_NO_THROW(good.validate());

  auto expect_reject = [&](auto mutate, const std::string& field) {
    tcpl::TrainConfig bad = good;
    mutate(bad);
    try {
      bad.validate();
      FAIL() << "expected rejection for " << field;
    } catch (const tcpl::config_error& e) {
      EXPECT_EQ(e.field, field);
    }
  };
  expect_reject([](auto& c) { c.epochs = -1; }, "train.epochs");
  expect_reject([](auto& c) { c.epoch_update_proto = c.epochs; },
                "train.epoch_update_proto");
  expect_reject([](auto& c) { c.lr0 = 0.0; }, "train.lr0");
  expect_reject([](auto& c) { c.lr_decay_every = 0; }, "train.lr_decay_every");
  expect_reject([](auto& c) { c.lr_decay_factor = 0.0; },
                "train.lr_decay_factor");
  expect_reject([](auto& c) { c.momentum = 1.0; }, "train.momentum");
  expect_reject([](auto& c) { c.batch_source = 0; }, "train.batch_source");
  expect_reject([](auto& c) { c.batch_target_pl = 0; },
                "train.batch_target_pl");
  expect_reject([](auto& c) { c.checkpoint_every = 0; },
                "train.checkpoint_every");
  expect_reject([](auto& c) { c.weights.lambda1 = -0.1; }, "loss.lambda1");
  expect_reject([](auto& c) { c.weights.lambda2 = -0.1; }, "loss.lambda2");
  expect_reject([](auto& c) { c.weights.eta = -1.0; }, "loss.eta");
  expect_reject([](auto& c) { c.thresholds.V = 1.0; }, "thresholds.V");
  expect_reject([](auto& c) { c.thresholds.V = 0.0; }, "thresholds.V");
  expect_reject(
      [](auto& c) {
        c.thresholds.q = 0;
        c.committee_policy.q = 0;
        c.train_policy.q = 0;
      },
      "thresholds.q");
  expect_reject([](auto& c) { c.pool_sizes.clear(); }, "model.pool_sizes");
  expect_reject([](auto& c) { c.pool_sizes = {0}; }, "model.pool_sizes");
  expect_reject([](auto& c) { c.prototypes_per_class = 0; },
                "model.prototypes_per_class");
  expect_reject([](auto& c) { c.channels = 2; }, "model.channels");
  expect_reject([](auto& c) { c.committee_policy.q = 3; }, "thresholds.q");

  // epochs = 0 is an init-only run and exempt from the gate bound
  tcpl::TrainConfig init_only = good;
  init_only.epochs = 0;
  init_only.epoch_update_proto = 120;
  EXPECT_NO_THROW(init_only.validate());
}

TEST(LearningRate, DecadeStaircaseAtTheDocumentedEpochs) {
  tcpl::TrainConfig cfg;  // lr0 0.002, decade drop every 50 epochs
  EXPECT_DOUBLE_EQ(tcpl::learning_rate(0, cfg), 0.002);
  EXPECT_DOUBLE_EQ(tcpl::learning_rate(49, cfg), 0.002);
  EXPECT_DOUBLE_EQ(tcpl::learning_rate(50, cfg), 0.0002);
  EXPECT_DOUBLE_EQ(tcpl::learning_rate(99, cfg), 0.0002);
  EXPECT_DOUBLE_EQ(tcpl::learning_rate(100, cfg), 0.00002);
  EXPECT_DOUBLE_EQ(tcpl::learning_rate(249, cfg), 0.002 * std::pow(0.1, 4));
  tcpl::TrainConfig flat = cfg;
  flat.lr_decay_factor = 1.0;
  EXPECT_DOUBLE_EQ(tcpl::learning_rate(200, flat), flat.lr0);
  EXPECT_THROW(tcpl::learning_rate(-1, cfg), tcpl::contract_error);
}

TEST(SgdStep, HandComputedMomentumSequence) {
  tcpl::TrainState st;
  st.model.backbone = testutil::identity_backbone();
  st.model.pool_sizes = {1};
  st.model.bank = tcpl::make_prototype_bank(1, 2, 3, 0);
  st.model.bank.p = {1, 0, 0, 0, 1, 0};
  st.model.head = tcpl::make_decision_head(st.model.bank);
  for (const auto& pv : tcpl::trainable_params(st.model))
    st.velocity.emplace_back(pv.values->size(), 0.0);

  tcpl::ModelGrad grad = tcpl::ModelGrad::zeros_like(st.model);
  const std::size_t proto_slot = grad.slots.size() - 2;
  grad.slots[proto_slot][0] = 0.5;

  tcpl::sgd_step(st, grad, 0.1, 0.9);
  EXPECT_DOUBLE_EQ(st.model.bank.p[0], 0.95);
  EXPECT_DOUBLE_EQ(st.velocity[proto_slot][0], 0.5);
  tcpl::sgd_step(st, grad, 0.1, 0.9);
  EXPECT_DOUBLE_EQ(st.velocity[proto_slot][0], 0.95);
  EXPECT_DOUBLE_EQ(st.model.bank.p[0], 0.855);
  EXPECT_DOUBLE_EQ(st.model.bank.p[1], 0.0);  // untouched coordinates stay put
}

TEST(TrainEpoch, FirstEpochTrainsWithoutPseudoLabels) {
  const auto [source, target] = toy_data(7);
  tcpl::TrainConfig cfg = toy_config(7);
  tcpl::TrainState st = tcpl::initialize(cfg, source.num_classes());

  const fs::path dir = testutil::make_temp_dir("epoch1");
  {
    tcpl::TrainLogger logger(dir / "train_log.ndjson");
    const tcpl::EpochMetrics m =
        tcpl::train_epoch(st, source, target, cfg, 1, &logger);
    EXPECT_EQ(m.epoch, 1);
    EXPECT_DOUBLE_EQ(m.lr, tcpl::learning_rate(0, cfg));
    EXPECT_EQ(m.steps, 2);  // 8 source samples in batches of 4
    EXPECT_EQ(logger.steps_logged(), 2);
    EXPECT_TRUE(std::isfinite(m.mean_total));
    EXPECT_EQ(m.projection_updated, -1);  // gate not yet passed
    EXPECT_GE(m.target_accuracy, 0.0);    // synthetic targets carry eval labels
    EXPECT_EQ(st.epoch, 1);
  }
  const auto lines = read_ndjson(dir / "train_log.ndjson");
  int steps = 0, epochs = 0;
  for (const auto& j : lines) {
    if (j["kind"] == "step") {
      ++steps;
      EXPECT_EQ(j["n_target_pl"], 0);  // nothing pseudo-labeled yet
      EXPECT_EQ(j["epoch"], 1);
    } else if (j["kind"] == "epoch") {
      ++epochs;
    }
  }
  EXPECT_EQ(steps, 2);
  EXPECT_EQ(epochs, 1);
  fs::remove_all(dir);
}

TEST(TrainEpoch, PrototypesStayUnitNormThroughOptimization) {
  const auto [source, target] = toy_data(8);
  tcpl::TrainConfig cfg = toy_config(8);
  tcpl::TrainState st = tcpl::initialize(cfg, source.num_classes());
  for (int e = 1; e <= 3; ++e) {
    tcpl::train_epoch(st, source, target, cfg, e);
    for (int j = 0; j < st.model.bank.count(); ++j)
      EXPECT_NEAR(tcpl::norm2(st.model.bank.proto(j), cfg.channels), 1.0,
                  1e-9);
  }
}

TEST(TrainEpoch, LossDescendsOnMostSeeds) {
  int improved = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto [source, target] = toy_data(seed);
    tcpl::TrainConfig cfg = toy_config(seed);
    cfg.epochs = 6;
    cfg.epoch_update_proto = 5;
    const tcpl::FitResult res = tcpl::fit(cfg, source, target);
    ASSERT_EQ(res.history.size(), 7u);
    if (res.history.back().mean_total < res.history[1].mean_total) ++improved;
  }
  EXPECT_GE(improved, 4);
}

TEST(Fit, IdenticalConfigsProduceIdenticalRuns) {
  const auto [source, target] = toy_data(11);
  const tcpl::TrainConfig cfg = toy_config(11);
  const tcpl::FitResult a = tcpl::fit(cfg, source, target);
  const tcpl::FitResult b = tcpl::fit(cfg, source, target);
  const fs::path dir = testutil::make_temp_dir("bitwise");
  EXPECT_EQ(checkpoint_bytes(a.final, dir, "a.ckpt"),
            checkpoint_bytes(b.final, dir, "b.ckpt"));
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i)
    EXPECT_EQ(a.history[i].mean_total, b.history[i].mean_total);
  fs::remove_all(dir);
}

TEST(Fit, ProjectionGateDelaysProvenance) {
  const auto [source, target] = toy_data(12);
  tcpl::TrainConfig cfg = toy_config(12);
  cfg.epochs = 3;
  cfg.epoch_update_proto = 2;

  bool saw_unprojected_mid_run = false;
  tcpl::FitOptions opt;
  opt.on_refresh = [&](int epoch, const std::vector<tcpl::CommitteeVerdict>&,
                       const tcpl::TrainState& st) {
    if (epoch > 2) return;
    for (const auto& prov : st.model.bank.provenance)
      EXPECT_FALSE(prov.has_value());
    saw_unprojected_mid_run = true;
  };
  const tcpl::FitResult res = tcpl::fit(cfg, source, target, opt);
  EXPECT_TRUE(saw_unprojected_mid_run);
  EXPECT_EQ(res.history[1].projection_updated, -1);
  EXPECT_EQ(res.history[2].projection_updated, -1);
  EXPECT_GE(res.history[3].projection_updated, 1);
  bool any = false;
  for (const auto& prov : res.final.model.bank.provenance)
    any |= prov.has_value();
  EXPECT_TRUE(any);
}

TEST(Fit, EpochsZeroIsInitializationOnly) {
  const auto [source, target] = toy_data(13);
  tcpl::TrainConfig cfg = toy_config(13);
  cfg.epochs = 0;
  cfg.epoch_update_proto = 120;  // gate bound does not apply to init-only runs
  const fs::path dir = testutil::make_temp_dir("init_only");
  tcpl::FitOptions opt;
  opt.out_dir = dir;
  const tcpl::FitResult res = tcpl::fit(cfg, source, target, opt);
  ASSERT_EQ(res.history.size(), 1u);
  EXPECT_EQ(res.history[0].epoch, 0);
  EXPECT_GE(res.history[0].target_accuracy, 0.0);
  EXPECT_EQ(res.final.epoch, 0);
  EXPECT_TRUE(fs::exists(dir / "checkpoint_final.ckpt"));
  EXPECT_FALSE(fs::exists(dir / "checkpoints" / "epoch_0001.ckpt"));

  const tcpl::Checkpoint loaded =
      tcpl::load_checkpoint(dir / "checkpoint_final.ckpt");
  const tcpl::TrainState st = tcpl::initialize(cfg, source.num_classes());
  EXPECT_EQ(loaded.model.bank.p, st.model.bank.p);
  EXPECT_EQ(loaded.model.head.w, st.model.head.w);
  fs::remove_all(dir);
}

TEST(Fit, ResumeReproducesTheUninterruptedRun) {
  const auto [source, target] = toy_data(14);
  const tcpl::TrainConfig cfg = toy_config(14);  // 4 epochs, checkpoints at 2,4
  const fs::path dir = testutil::make_temp_dir("resume");

  tcpl::FitOptions full_opt;
  full_opt.out_dir = dir / "full";
  full_opt.config_json = "{}";
  const tcpl::FitResult full = tcpl::fit(cfg, source, target, full_opt);

  const tcpl::Checkpoint mid =
      tcpl::load_checkpoint(dir / "full" / "checkpoints" / "epoch_0002.ckpt");
  EXPECT_EQ(mid.epoch, 2);
  tcpl::FitOptions resume_opt;
  resume_opt.resume = &mid;
  resume_opt.config_json = "{}";
  const tcpl::FitResult resumed = tcpl::fit(cfg, source, target, resume_opt);

  EXPECT_EQ(checkpoint_bytes(full.final, dir, "full.ckpt"),
            checkpoint_bytes(resumed.final, dir, "resumed.ckpt"));
  EXPECT_EQ(resumed.final.epoch, 4);
  ASSERT_TRUE(resumed.final.optimizer.has_value());
  ASSERT_TRUE(full.final.optimizer.has_value());
  EXPECT_EQ(*resumed.final.optimizer, *full.final.optimizer);
  EXPECT_EQ(resumed.final.plt.entries.size(), full.final.plt.entries.size());
  fs::remove_all(dir);
}

TEST(Fit, WritesCheckpointsAuditsAndLogsOnSchedule) {
  const auto [source, target] = toy_data(15);
  tcpl::TrainConfig cfg = toy_config(15);
  const fs::path dir = testutil::make_temp_dir("artifacts");
  tcpl::TrainLogger logger(dir / "train_log.ndjson");
  tcpl::FitOptions opt;
  opt.out_dir = dir;
  opt.logger = &logger;
  const tcpl::FitResult res = tcpl::fit(cfg, source, target, opt);

  EXPECT_TRUE(fs::exists(dir / "checkpoints" / "epoch_0002.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "checkpoints" / "epoch_0004.ckpt"));
  EXPECT_FALSE(fs::exists(dir / "checkpoints" / "epoch_0001.ckpt"));
  EXPECT_FALSE(fs::exists(dir / "checkpoints" / "epoch_0003.ckpt"));
  for (int e = 1; e <= 4; ++e) {
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%04d.json", e);
    ASSERT_TRUE(fs::exists(dir / "audit" / name)) << name;
    const tcpl::ordered_json audit = tcpl::read_json_file(dir / "audit" / name);
    EXPECT_EQ(audit["epoch"], e);
    EXPECT_EQ(audit["summary"]["total"],
              static_cast<int>(target.samples.size()));
  }

  int expected_steps = 0;
  for (std::size_t i = 1; i < res.history.size(); ++i)
    expected_steps += res.history[i].steps;
  EXPECT_EQ(logger.steps_logged(), expected_steps);
  int steps = 0, epochs = 0, events = 0;
  for (const auto& j : read_ndjson(dir / "train_log.ndjson")) {
    if (j["kind"] == "step") ++steps;
    if (j["kind"] == "epoch") ++epochs;
    if (j["kind"] == "event") ++events;
  }
  EXPECT_EQ(steps, expected_steps);
  EXPECT_EQ(epochs, 5);   // epoch 0 through 4
  EXPECT_EQ(events, 2);   // projection events at epochs 3 and 4
  fs::remove_all(dir);
}

TEST(Checkpoint, RoundTripIsByteExactAndValidated) {
  const auto [source, target] = toy_data(16);
  tcpl::TrainConfig cfg = toy_config(16);
  cfg.epochs = 2;
  cfg.epoch_update_proto = 1;  // force provenance into the checkpoint
  tcpl::FitOptions opt;
  opt.config_json = "{\"seed\":16}";
  const tcpl::FitResult res = tcpl::fit(cfg, source, target, opt);

  const fs::path dir = testutil::make_temp_dir("ckpt");
  const fs::path p1 = dir / "one.ckpt";
  tcpl::save_checkpoint(p1, res.final);
  EXPECT_FALSE(fs::exists(dir / "one.ckpt.tmp"));  // atomic rename cleanup
  const tcpl::Checkpoint loaded = tcpl::load_checkpoint(p1);
  EXPECT_EQ(loaded.epoch, res.final.epoch);
  EXPECT_EQ(loaded.config_json, "{\"seed\":16}");
  EXPECT_EQ(loaded.model.bank.p, res.final.model.bank.p);
  EXPECT_EQ(loaded.rng_state, res.final.rng_state);
  EXPECT_EQ(loaded.plt.entries.size(), res.final.plt.entries.size());
  for (const auto& [id, entry] : loaded.plt.entries) {
    const auto& orig = res.final.plt.entries.at(id);
    EXPECT_EQ(entry.pseudo_label, orig.pseudo_label);
    EXPECT_EQ(entry.epoch_assigned, orig.epoch_assigned);
    EXPECT_EQ(tcpl::verdict_to_json(entry.verdict).dump(),
              tcpl::verdict_to_json(orig.verdict).dump());
  }
  const fs::path p2 = dir / "two.ckpt";
  tcpl::save_checkpoint(p2, loaded);
  EXPECT_EQ(file_bytes(p1), file_bytes(p2));

  // corruption: truncation, wrong magic, unknown version
  const std::string bytes = file_bytes(p1);
  {
    std::ofstream out(dir / "trunc.ckpt", std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  EXPECT_THROW(tcpl::load_checkpoint(dir / "trunc.ckpt"), tcpl::io_error);
  {
    std::string bad = bytes;
    bad[0] = 'X';
    std::ofstream out(dir / "magic.ckpt", std::ios::binary);
    out.write(bad.data(), static_cast<std::streamsize>(bad.size()));
  }
  EXPECT_THROW(tcpl::load_checkpoint(dir / "magic.ckpt"), tcpl::io_error);
  {
    std::string bad = bytes;
    bad[4] = static_cast<char>(0x7f);
    std::ofstream out(dir / "version.ckpt", std::ios::binary);
    out.write(bad.data(), static_cast<std::streamsize>(bad.size()));
  }
  EXPECT_THROW(tcpl::load_checkpoint(dir / "version.ckpt"), tcpl::io_error);
  EXPECT_THROW(tcpl::load_checkpoint(dir / "absent.ckpt"), tcpl::io_error);
  fs::remove_all(dir);
}

TEST(Fit, SelfTrainingCanBeDisabled) {
  const auto [source, target] = toy_data(17);
  tcpl::TrainConfig cfg = toy_config(17);
  cfg.epochs = 2;
  cfg.epoch_update_proto = 1;
  cfg.selftrain_enabled = false;
  const fs::path dir = testutil::make_temp_dir("nopl");
  tcpl::FitOptions opt;
  opt.out_dir = dir;
  const tcpl::FitResult res = tcpl::fit(cfg, source, target, opt);
  for (const auto& m : res.history) EXPECT_EQ(m.dplt_size, 0);
  EXPECT_GE(res.history.back().target_accuracy, 0.0);  // still evaluated
  EXPECT_FALSE(fs::exists(dir / "audit" / "epoch_0001.json"));
  EXPECT_EQ(res.final.plt.entries.size(), 0u);
  fs::remove_all(dir);
}

}  // namespace
