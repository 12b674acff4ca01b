// End-to-end tests of the command line binary. The binary path is baked in
// at build time (TCPL_CLI_PATH, overridable via the environment variable of
// the same name); every command runs as a real child process with captured
// streams and is judged only on its documented interface: exit codes, stderr
// error JSON, and the files it writes.
#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tcpl/cli.hpp"
#include "test_util.hpp"

namespace {

namespace fs = std::filesystem;

const std::string& cli_path() {
  static const std::string path = [] {
    if (const char* p = std::getenv("TCPL_CLI_PATH")) return std::string(p);
#ifdef TCPL_CLI_PATH
    return std::string(TCPL_CLI_PATH);
#else
    return std::string();
#endif
  }();
  return path;
}

std::string shq(const fs::path& p) { return "\"" + p.string() + "\""; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

struct RunResult {
  int exit_code = -1;
  std::string out, err;
};

RunResult run_cli(const std::string& args, const fs::path& scratch) {
  const fs::path out_file = scratch / "stdout.txt";
  const fs::path err_file = scratch / "stderr.txt";
  const std::string cmd = shq(cli_path()) + " " + args + " >" +
                          shq(out_file) + " 2>" + shq(err_file);
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = (status >= 0 && WIFEXITED(status)) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out_file);
  r.err = slurp(err_file);
  return r;
}

tcpl::ordered_json error_json(const RunResult& r) {
  tcpl::ordered_json j = tcpl::ordered_json::parse(r.err, nullptr, false);
  EXPECT_FALSE(j.is_discarded()) << "stderr is not JSON: " << r.err;
  return j;
}

// Small run: 2 classes x 4 images at 32x32, two epochs of two steps each,
// projection at epoch 2, checkpoint at epoch 2.
tcpl::ordered_json base_config() {
  tcpl::ordered_json j;
  j["seed"] = 5;
  j["data"]["kind"] = "synthetic";
  j["data"]["synthetic"]["classes"] = 2;
  j["data"]["synthetic"]["per_class"] = 4;
  j["data"]["synthetic"]["image_size"] = 32;
  j["data"]["synthetic"]["shift"]["hue_delta"] = 0.1;
  j["data"]["synthetic"]["shift"]["texture_noise"] = 0.02;
  j["data"]["synthetic"]["shift"]["background_swap"] = 0.5;
  j["model"]["channels"] = 8;
  j["model"]["prototypes_per_class"] = 1;
  j["model"]["pool_sizes"] = tcpl::ordered_json::array({1});
  j["train"]["epochs"] = 2;
  j["train"]["epoch_update_proto"] = 1;
  j["train"]["lr0"] = 0.01;
  j["train"]["batch_source"] = 4;
  j["train"]["batch_target_pl"] = 2;
  j["train"]["checkpoint_every"] = 2;
  j["thresholds"]["V"] = 0.5;
  j["thresholds"]["q"] = 2;
  return j;
}

// All augmentation magnitudes zeroed: every committee view is the image
// itself, so with one prototype per class and an initial head the committee
// accepts every sample once V is tiny.
tcpl::ordered_json degenerate_config() {
  tcpl::ordered_json j = base_config();
  j["thresholds"]["V"] = 0.05;
  for (const char* key : {"committee", "train"}) {
    j["augment"][key]["crop"] = 1.0;
    j["augment"][key]["flip"] = 0.0;
    j["augment"][key]["brightness"] = 0.0;
    j["augment"][key]["contrast"] = 0.0;
    j["augment"][key]["saturation"] = 0.0;
    j["augment"][key]["hue"] = 0.0;
    j["augment"][key]["cutout"] = 0.0;
  }
  return j;
}

struct SharedRun {
  fs::path root, config, out;
};

// One trained run and one init-only run, built once and treated as
// read-only by every test that consumes them.
const SharedRun& trained_run() {
  static const SharedRun r = [] {
    SharedRun s;
    s.root = testutil::make_temp_dir("cli_trained");
    s.config = s.root / "config.json";
    tcpl::write_json_file(s.config, base_config());
    s.out = s.root / "out";
    const RunResult rr = run_cli(
        "train --config " + shq(s.config) + " --out " + shq(s.out),
        s.root);
    if (rr.exit_code != 0)
      throw std::runtime_error("shared train run failed: " + rr.err);
    return s;
  }();
  return r;
}

const SharedRun& init_only_run() {
  static const SharedRun r = [] {
    SharedRun s;
    s.root = testutil::make_temp_dir("cli_init");
    s.config = s.root / "config.json";
    tcpl::write_json_file(s.config, degenerate_config());
    s.out = s.root / "out";
    const RunResult rr =
        run_cli("train --config " + shq(s.config) + " --epochs 0 --out " +
                    shq(s.out),
                s.root);
    if (rr.exit_code != 0)
      throw std::runtime_error("shared init run failed: " + rr.err);
    return s;
  }();
  return r;
}

class CliCase : public ::testing::Test {
 protected:
  void SetUp() override {
    ASSERT_FALSE(cli_path().empty()) << "TCPL_CLI_PATH is not set";
    ASSERT_TRUE(fs::exists(cli_path())) << cli_path();
  }
};

class CliTrain : public CliCase {};
class CliExplain : public CliCase {};
class CliAudit : public CliCase {};
class CliGallery : public CliCase {};
class CliEval : public CliCase {};

TEST_F(CliTrain, WritesArtifactsAndAChecksummedManifest) {
  const SharedRun& run = trained_run();

  EXPECT_TRUE(fs::exists(run.out / "manifest.json"));
  EXPECT_TRUE(fs::exists(run.out / "metrics.json"));
  EXPECT_TRUE(fs::exists(run.out / "train_log.ndjson"));
  EXPECT_TRUE(fs::exists(run.out / "checkpoint_final.ckpt"));
  EXPECT_TRUE(fs::exists(run.out / "checkpoints" / "epoch_0002.ckpt"));
  EXPECT_FALSE(fs::exists(run.out / "checkpoints" / "epoch_0001.ckpt"));
  EXPECT_TRUE(fs::exists(run.out / "audit" / "epoch_0001.json"));
  EXPECT_TRUE(fs::exists(run.out / "audit" / "epoch_0002.json"));

  const tcpl::ordered_json metrics =
      tcpl::read_json_file(run.out / "metrics.json");
  EXPECT_EQ(metrics["schema_version"], 1);
  EXPECT_EQ(metrics["epochs_completed"], 2);
  ASSERT_EQ(metrics["history"].size(), 3u);  // epoch 0 through 2
  for (int e = 0; e < 3; ++e) EXPECT_EQ(metrics["history"][e]["epoch"], e);
  EXPECT_TRUE(metrics.contains("target_accuracy"));

  const tcpl::ordered_json manifest =
      tcpl::read_json_file(run.out / "manifest.json");
  EXPECT_EQ(manifest["command"], "train");
  EXPECT_EQ(manifest["seed"], 5);
  EXPECT_EQ(manifest["config"]["train"]["epochs"], 2);
  EXPECT_EQ(manifest["config"]["model"]["channels"], 8);
  EXPECT_TRUE(manifest.contains("finished_at"));

  // every regular file except the manifest itself is listed, and each
  // recorded checksum matches the bytes on disk
  const auto& artifacts = manifest["artifacts"];
  std::size_t on_disk = 0;
  for (const auto& entry : fs::recursive_directory_iterator(run.out)) {
    if (!entry.is_regular_file()) continue;
    if (entry.path().filename() == "manifest.json") continue;
    ++on_disk;
    const std::string rel =
        fs::relative(entry.path(), run.out).generic_string();
    ASSERT_TRUE(artifacts.contains(rel)) << rel;
    EXPECT_EQ(artifacts[rel], tcpl::to_hex(tcpl::fnv1a64(slurp(entry.path()))))
        << rel;
  }
  EXPECT_EQ(artifacts.size(), on_disk);
}

TEST_F(CliTrain, EpochsFlagZeroMakesAnInitOnlyCheckpoint) {
  const SharedRun& run = init_only_run();
  const tcpl::ordered_json metrics =
      tcpl::read_json_file(run.out / "metrics.json");
  EXPECT_EQ(metrics["epochs_completed"], 0);
  ASSERT_EQ(metrics["history"].size(), 1u);
  EXPECT_TRUE(fs::exists(run.out / "checkpoint_final.ckpt"));
  EXPECT_TRUE(fs::is_empty(run.out / "checkpoints"));
  const tcpl::Checkpoint ckpt =
      tcpl::load_checkpoint(run.out / "checkpoint_final.ckpt");
  EXPECT_EQ(ckpt.epoch, 0);
  for (const auto& prov : ckpt.model.bank.provenance)
    EXPECT_FALSE(prov.has_value());
}

TEST_F(CliTrain, RejectsAnOutOfRangeThresholdWithItsFieldPath) {
  const fs::path dir = testutil::make_temp_dir("cli_badv");
  tcpl::ordered_json cfg = base_config();
  cfg["thresholds"]["V"] = 1.5;
  tcpl::write_json_file(dir / "config.json", cfg);
  const RunResult r = run_cli(
      "train --config " + shq(dir / "config.json") + " --out " +
          shq(dir / "out"),
      dir);
  EXPECT_EQ(r.exit_code, 2);
  const tcpl::ordered_json e = error_json(r);
  EXPECT_EQ(e["error"]["type"], "config");
  EXPECT_EQ(e["error"]["field"], "thresholds.V");
  fs::remove_all(dir);
}

TEST_F(CliTrain, RejectsUnknownConfigKeysWithTheirPath) {
  const fs::path dir = testutil::make_temp_dir("cli_unknown");
  tcpl::ordered_json cfg = base_config();
  cfg["train"]["bogus"] = 7;
  tcpl::write_json_file(dir / "config.json", cfg);
  const RunResult r = run_cli(
      "train --config " + shq(dir / "config.json") + " --out " +
          shq(dir / "out"),
      dir);
  EXPECT_EQ(r.exit_code, 2);
  const tcpl::ordered_json e = error_json(r);
  EXPECT_EQ(e["error"]["type"], "config");
  EXPECT_EQ(e["error"]["field"], "train.bogus");
  fs::remove_all(dir);
}

TEST_F(CliTrain, MissingRequiredFlagIsAConfigError) {
  const fs::path dir = testutil::make_temp_dir("cli_noconfig");
  const RunResult r = run_cli("train", dir);
  EXPECT_EQ(r.exit_code, 2);
  const tcpl::ordered_json e = error_json(r);
  EXPECT_EQ(e["error"]["type"], "config");
  EXPECT_FALSE(e["error"].contains("field"));
  EXPECT_FALSE(e["error"]["message"].get<std::string>().empty());
  fs::remove_all(dir);
}

TEST_F(CliTrain, SetOverridesApplyOnTopOfTheFile) {
  const fs::path dir = testutil::make_temp_dir("cli_set");
  tcpl::write_json_file(dir / "config.json", base_config());

  RunResult r = run_cli(
      "train --config " + shq(dir / "config.json") +
          " --set train.epochs=1 --set train.epoch_update_proto=0 --out " +
          shq(dir / "out"),
      dir);
  EXPECT_EQ(r.exit_code, 0) << r.err;
  const tcpl::ordered_json metrics =
      tcpl::read_json_file(dir / "out" / "metrics.json");
  EXPECT_EQ(metrics["epochs_completed"], 1);

  // overrides are typed: a word where an integer belongs is rejected
  r = run_cli("train --config " + shq(dir / "config.json") +
                  " --set model.channels=soup --out " + shq(dir / "out2"),
              dir);
  EXPECT_EQ(r.exit_code, 2);
  const tcpl::ordered_json e = error_json(r);
  EXPECT_EQ(e["error"]["field"], "model.channels");
  fs::remove_all(dir);
}

TEST_F(CliTrain, ResumeMatchesTheUninterruptedRun) {
  const fs::path dir = testutil::make_temp_dir("cli_resume");
  tcpl::ordered_json cfg = base_config();
  cfg["train"]["epochs"] = 4;
  cfg["train"]["epoch_update_proto"] = 2;
  tcpl::write_json_file(dir / "config.json", cfg);

  RunResult r = run_cli(
      "train --config " + shq(dir / "config.json") + " --out " +
          shq(dir / "full"),
      dir);
  ASSERT_EQ(r.exit_code, 0) << r.err;
  r = run_cli("train --config " + shq(dir / "config.json") + " --resume " +
                  shq(dir / "full" / "checkpoints" / "epoch_0002.ckpt") +
                  " --out " + shq(dir / "resumed"),
              dir);
  ASSERT_EQ(r.exit_code, 0) << r.err;

  EXPECT_EQ(slurp(dir / "full" / "checkpoint_final.ckpt"),
            slurp(dir / "resumed" / "checkpoint_final.ckpt"));
  const tcpl::ordered_json metrics =
      tcpl::read_json_file(dir / "resumed" / "metrics.json");
  EXPECT_EQ(metrics["epochs_completed"], 4);
  fs::remove_all(dir);
}

TEST_F(CliExplain, EmitsATraceThatReconstructsTheLogits) {
  const SharedRun& run = trained_run();
  const fs::path dir = testutil::make_temp_dir("cli_explain");
  const RunResult r = run_cli(
      "explain --checkpoint " + shq(run.out / "checkpoint_final.ckpt") +
          " --image tgt/class_0/0000 --out " + shq(dir / "rep"),
      dir);
  ASSERT_EQ(r.exit_code, 0) << r.err;
  EXPECT_EQ(r.err.find("warning"), std::string::npos) << r.err;

  const tcpl::ordered_json trace =
      tcpl::read_json_file(dir / "rep" / "trace.json");
  EXPECT_EQ(trace["sample_id"], "tgt/class_0/0000");
  const int predicted = trace["predicted"].get<int>();
  ASSERT_EQ(trace["per_class"].size(), 2u);
  for (const auto& row : trace["per_class"]) {
    const int cls = row["class"].get<int>();
    const double logit = std::stod(row["logit"].get<std::string>());
    double sum = 0.0;
    for (const auto& entry : row["entries"]) {
      sum += std::stod(entry["contribution"].get<std::string>());
      // the box appears only on the predicted row's own-class prototypes
      const bool expect_box =
          cls == predicted && entry["prototype"].get<int>() == predicted;
      EXPECT_EQ(!entry["box"].is_null(), expect_box);
    }
    EXPECT_NEAR(sum, logit, 1e-6);
  }

  EXPECT_TRUE(fs::exists(dir / "rep" / "box_overlay.png"));
  EXPECT_TRUE(fs::exists(dir / "rep" /
                         ("activation_" + std::to_string(predicted) + ".png")));
  EXPECT_TRUE(fs::exists(
      dir / "rep" /
      ("prototype_" + std::to_string(predicted) + "_card.png")));
  ASSERT_EQ(trace["cards"].size(), 1u);
  EXPECT_EQ(trace["cards"][0]["status"], "projected");
  const tcpl::ordered_json manifest =
      tcpl::read_json_file(dir / "rep" / "manifest.json");
  EXPECT_TRUE(manifest["artifacts"].contains("trace.json"));

  // the report is a pure function of checkpoint and query
  const RunResult again = run_cli(
      "explain --checkpoint " + shq(run.out / "checkpoint_final.ckpt") +
          " --image tgt/class_0/0000 --out " + shq(dir / "rep2"),
      dir);
  ASSERT_EQ(again.exit_code, 0) << again.err;
  EXPECT_EQ(slurp(dir / "rep" / "trace.json"),
            slurp(dir / "rep2" / "trace.json"));
  fs::remove_all(dir);
}

TEST_F(CliExplain, WarnsWhenThePredictedPrototypesAreUnprojected) {
  const SharedRun& run = init_only_run();
  const fs::path dir = testutil::make_temp_dir("cli_explain_warn");
  const RunResult r = run_cli(
      "explain --checkpoint " + shq(run.out / "checkpoint_final.ckpt") +
          " --image tgt/class_1/0002 --out " + shq(dir / "rep"),
      dir);
  EXPECT_EQ(r.exit_code, 0) << r.err;
  const tcpl::ordered_json warn = error_json(r);
  EXPECT_TRUE(warn.contains("warning"));
  const tcpl::ordered_json trace =
      tcpl::read_json_file(dir / "rep" / "trace.json");
  EXPECT_EQ(trace["cards"][0]["status"], "unprojected");
  fs::remove_all(dir);
}

TEST_F(CliExplain, AcceptsImageFilesAndRejectsUnknownIds) {
  const SharedRun& run = trained_run();
  const fs::path dir = testutil::make_temp_dir("cli_explain_file");

  // regenerate the run's target set in-process and dump one frame to disk
  tcpl::SyntheticConfig scfg;
  scfg.classes = 2;
  scfg.per_class = 4;
  scfg.image_size = 32;
  scfg.seed = 5;
  scfg.shift.hue_delta = 0.1;
  scfg.shift.texture_noise = 0.02;
  scfg.shift.background_swap = 0.5;
  const auto [source, target] = tcpl::generate_synthetic_pair(scfg);
  tcpl::write_png(dir / "query.png", target.samples[0].image);

  RunResult r = run_cli(
      "explain --checkpoint " + shq(run.out / "checkpoint_final.ckpt") +
          " --image " + shq(dir / "query.png") + " --out " +
          shq(dir / "rep"),
      dir);
  EXPECT_EQ(r.exit_code, 0) << r.err;
  const tcpl::ordered_json trace =
      tcpl::read_json_file(dir / "rep" / "trace.json");
  EXPECT_EQ(trace["sample_id"], "query.png");

  r = run_cli(
      "explain --checkpoint " + shq(run.out / "checkpoint_final.ckpt") +
          " --image no/such/id --out " + shq(dir / "rep2"),
      dir);
  EXPECT_EQ(r.exit_code, 2);
  const tcpl::ordered_json e = error_json(r);
  EXPECT_EQ(e["error"]["type"], "config");
  EXPECT_NE(e["error"]["message"].get<std::string>().find("image not found"),
            std::string::npos);
  fs::remove_all(dir);
}

TEST_F(CliAudit, DegenerateThresholdsAcceptTheWholeTargetSet) {
  const SharedRun& run = init_only_run();
  const fs::path dir = testutil::make_temp_dir("cli_audit");
  const RunResult r = run_cli(
      "audit --checkpoint " + shq(run.out / "checkpoint_final.ckpt") +
          " --out " + shq(dir / "report"),
      dir);
  ASSERT_EQ(r.exit_code, 0) << r.err;

  const tcpl::ordered_json audit =
      tcpl::read_json_file(dir / "report" / "audit.json");
  ASSERT_EQ(audit["verdicts"].size(), 8u);
  EXPECT_EQ(audit["summary"]["total"], 8);
  EXPECT_EQ(audit["summary"]["accepted"], 8);
  EXPECT_EQ(audit["summary"]["acceptance_rate"], "1");
  EXPECT_EQ(audit["summary"]["failed_confidence"], 0);
  for (const auto& v : audit["verdicts"]) {
    EXPECT_TRUE(v["consistent"].get<bool>());
    ASSERT_EQ(v["per_view"].size(), 2u);
  }

  // the summary is echoed to stdout
  const tcpl::ordered_json echoed =
      tcpl::ordered_json::parse(r.out, nullptr, false);
  ASSERT_FALSE(echoed.is_discarded()) << r.out;
  EXPECT_EQ(echoed, audit["summary"]);
  fs::remove_all(dir);
}

TEST_F(CliAudit, TighteningTheConfidenceBarOnlyRemovesAcceptances) {
  const SharedRun& run = init_only_run();
  const fs::path dir = testutil::make_temp_dir("cli_audit_mono");
  RunResult r = run_cli(
      "audit --checkpoint " + shq(run.out / "checkpoint_final.ckpt") +
          " --out " + shq(dir / "loose"),
      dir);
  ASSERT_EQ(r.exit_code, 0) << r.err;
  r = run_cli(
      "audit --checkpoint " + shq(run.out / "checkpoint_final.ckpt") +
          " --set thresholds.V=0.9 --out " + shq(dir / "tight"),
      dir);
  ASSERT_EQ(r.exit_code, 0) << r.err;

  const tcpl::ordered_json loose =
      tcpl::read_json_file(dir / "loose" / "audit.json");
  const tcpl::ordered_json tight =
      tcpl::read_json_file(dir / "tight" / "audit.json");
  std::map<std::string, bool> loose_ok;
  for (const auto& v : loose["verdicts"])
    loose_ok[v["sample_id"].get<std::string>()] = v["consistent"].get<bool>();
  for (const auto& v : tight["verdicts"]) {
    if (v["consistent"].get<bool>()) {
      EXPECT_TRUE(loose_ok.at(v["sample_id"].get<std::string>()));
    }
  }
  EXPECT_LE(tight["summary"]["accepted"].get<int>(),
            loose["summary"]["accepted"].get<int>());
  fs::remove_all(dir);
}

TEST_F(CliGallery, ExportsOneCardPerPrototype) {
  const SharedRun& run = init_only_run();
  const fs::path dir = testutil::make_temp_dir("cli_gallery");
  const RunResult r = run_cli(
      "export-prototypes --checkpoint " +
          shq(run.out / "checkpoint_final.ckpt") + " --out " +
          shq(dir / "gallery"),
      dir);
  ASSERT_EQ(r.exit_code, 0) << r.err;

  const tcpl::ordered_json bank =
      tcpl::read_json_file(dir / "gallery" / "bank.json");
  EXPECT_EQ(bank["prototypes_per_class"], 1);
  EXPECT_EQ(bank["classes"], 2);
  ASSERT_EQ(bank["entries"].size(), 2u);
  for (int j = 0; j < 2; ++j) {
    const auto& e = bank["entries"][j];
    EXPECT_EQ(e["index"], j);
    EXPECT_EQ(e["class"], j);
    EXPECT_FALSE(e["projected"].get<bool>());   // nothing projected at init
    EXPECT_TRUE(e["preview"].get<bool>());      // nearest-patch fallback
    EXPECT_TRUE(e.contains("sample_id"));
    EXPECT_TRUE(fs::exists(dir / "gallery" / e["file"].get<std::string>()));
  }
  const tcpl::ordered_json manifest =
      tcpl::read_json_file(dir / "gallery" / "manifest.json");
  EXPECT_TRUE(manifest["artifacts"].contains("bank.json"));
  fs::remove_all(dir);
}

TEST_F(CliEval, ReportsAccuracyOnBothDomains) {
  const SharedRun& run = trained_run();
  const fs::path dir = testutil::make_temp_dir("cli_eval");
  const RunResult r = run_cli(
      "eval --checkpoint " + shq(run.out / "checkpoint_final.ckpt") +
          " --out " + shq(dir / "eval"),
      dir);
  ASSERT_EQ(r.exit_code, 0) << r.err;

  const tcpl::ordered_json j = tcpl::read_json_file(dir / "eval" / "eval.json");
  EXPECT_EQ(j["epoch"], 2);
  EXPECT_EQ(j["source_n"], 8);
  EXPECT_EQ(j["target_n"], 8);
  ASSERT_TRUE(j.contains("source_accuracy"));
  ASSERT_TRUE(j.contains("target_accuracy"));
  const double src = std::stod(j["source_accuracy"].get<std::string>());
  const double tgt = std::stod(j["target_accuracy"].get<std::string>());
  EXPECT_GE(src, 0.0);
  EXPECT_LE(src, 1.0);
  EXPECT_GE(tgt, 0.0);
  EXPECT_LE(tgt, 1.0);

  const tcpl::ordered_json echoed =
      tcpl::ordered_json::parse(r.out, nullptr, false);
  ASSERT_FALSE(echoed.is_discarded()) << r.out;
  EXPECT_EQ(echoed, j);
  fs::remove_all(dir);
}

TEST_F(CliEval, CorruptCheckpointIsARuntimeError) {
  const fs::path dir = testutil::make_temp_dir("cli_corrupt");
  {
    std::ofstream out(dir / "bad.ckpt", std::ios::binary);
    out << "XXXX this is not a checkpoint";
  }
  const RunResult r = run_cli(
      "eval --checkpoint " + shq(dir / "bad.ckpt") + " --out " +
          shq(dir / "eval"),
      dir);
  EXPECT_EQ(r.exit_code, 3);
  const tcpl::ordered_json e = error_json(r);
  EXPECT_EQ(e["error"]["type"], "runtime");
  EXPECT_NE(e["error"]["message"].get<std::string>().find("not a checkpoint"),
            std::string::npos);
  fs::remove_all(dir);
}

}  // namespace
