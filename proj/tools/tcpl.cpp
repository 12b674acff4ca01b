#include <CLI11.hpp>

#include "tcpl/cli.hpp"

namespace {

void add_common(CLI::App* cmd, tcpl::cli::CommandArgs& args) {
  cmd->add_option("--out", args.out_dir, "Output directory");
  cmd->add_option("--set", args.sets,
                  "Config override key=value (dotted path), repeatable");
  cmd->add_option("--seed", args.seed, "Seed override");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conceptual prototype learning for domain adaptation"};
  app.require_subcommand(1);

  tcpl::cli::CommandArgs args;

  CLI::App* train = app.add_subcommand("train", "Train a model from a config");
  train->add_option("--config", args.config_path, "Run config JSON")
      ->required();
  train->add_option("--resume", args.resume_path,
                    "Checkpoint to continue from");
  train->add_option("--epochs", args.epochs,
                    "Shortcut for --set train.epochs=N");
  add_common(train, args);

  CLI::App* explain =
      app.add_subcommand("explain", "Emit the explanation report for a query");
  explain->add_option("--checkpoint", args.checkpoint_path, "Checkpoint file")
      ->required();
  explain->add_option("--image", args.image, "Image path or dataset id")
      ->required();
  explain->add_option("--config", args.config_path,
                      "Config overriding the embedded snapshot");
  add_common(explain, args);

  CLI::App* audit =
      app.add_subcommand("audit", "Dump committee verdicts for the target set");
  audit->add_option("--checkpoint", args.checkpoint_path, "Checkpoint file")
      ->required();
  audit->add_option("--config", args.config_path,
                    "Config overriding the embedded snapshot");
  add_common(audit, args);

  CLI::App* gallery = app.add_subcommand("export-prototypes",
                                         "Emit the prototype gallery");
  gallery->add_option("--checkpoint", args.checkpoint_path, "Checkpoint file")
      ->required();
  gallery->add_option("--config", args.config_path,
                      "Config overriding the embedded snapshot");
  add_common(gallery, args);

  CLI::App* eval =
      app.add_subcommand("eval", "Accuracy of a checkpoint on both domains");
  eval->add_option("--checkpoint", args.checkpoint_path, "Checkpoint file")
      ->required();
  eval->add_option("--config", args.config_path,
                   "Config overriding the embedded snapshot");
  add_common(eval, args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    tcpl::cli::emit_error("config", e.what());
    return tcpl::cli::kExitConfig;
  }

  if (train->parsed()) return tcpl::cli::cmd_train(args);
  if (explain->parsed()) return tcpl::cli::cmd_explain(args);
  if (audit->parsed()) return tcpl::cli::cmd_audit(args);
  if (gallery->parsed()) return tcpl::cli::cmd_export_prototypes(args);
  if (eval->parsed()) return tcpl::cli::cmd_eval(args);
  tcpl::cli::emit_error("config", "no subcommand given");
  return tcpl::cli::kExitConfig;
}
