// Command-line entry point: train, eval, predict, gradcheck, params, gen-toy.

#include <CLI11.hpp>

#include <iostream>

#include "mimn/cli.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  mimn::RunOverrides ov;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON config file with flat keys");
  cmd->add_option("--seed", args.ov.seed, "run seed");
  cmd->add_option("--out-dir", args.ov.out_dir, "output directory");
  cmd->add_option("--variant", args.ov.variant,
                  "model variant: full, no_memory, gate_relu, mixed_single_turn");
  cmd->add_option("--turns", args.ov.turns, "inference turns (default 3)");
  cmd->add_option("--precision", args.ov.precision, "scalar precision: f32 or f64");
  cmd->add_option("--embed-dim", args.ov.embed_dim, "word embedding width");
  cmd->add_option("--hidden", args.ov.hidden, "recurrent hidden units per direction");
  cmd->add_option("--mlp-hidden", args.ov.mlp_hidden, "classifier hidden width");
  cmd->add_option("--dropout", args.ov.dropout, "dropout rate");
  cmd->add_option("--num-labels", args.ov.num_labels, "label-set size: 2 or 3");
  cmd->add_option("--batch-size", args.ov.batch_size, "examples per update");
  cmd->add_option("--l2", args.ov.l2, "L2 penalty coefficient");
  cmd->add_option("--lr", args.ov.lr, "Adam learning rate");
  cmd->add_option("--patience", args.ov.patience, "early-stopping patience in epochs");
  cmd->add_option("--max-epochs", args.ov.max_epochs, "epoch cap");
  cmd->add_option("--format", args.ov.format,
                  "dataset format: snli_jsonl, scitail_tsv, mpe_tsv, unified_jsonl");
  cmd->add_option("--train", args.ov.train_path, "training data path");
  cmd->add_option("--valid", args.ov.valid_path, "validation data path");
  cmd->add_option("--test", args.ov.test_path, "test / eval data path");
  cmd->add_option("--embeddings", args.ov.embeddings_path, "embedding text file path");
  cmd->add_option("--checkpoint", args.ov.checkpoint_path, "checkpoint path");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-turn inference matching network for sentence-pair classification"};
  app.require_subcommand(1);

  CommonArgs train_args, eval_args, predict_args, gradcheck_args, params_args, gen_args;

  CLI::App* train_cmd = app.add_subcommand("train", "train a model, write checkpoint and history");
  add_common(train_cmd, train_args);

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint (or ensemble) on a dataset");
  add_common(eval_cmd, eval_args);
  eval_cmd->add_option("--ensemble", eval_args.ov.ensemble_paths,
                       "comma-separated member checkpoints averaged by probability")
      ->delimiter(',');

  std::string premise, hypothesis;
  CLI::App* predict_cmd = app.add_subcommand("predict", "classify one premise/hypothesis pair");
  add_common(predict_cmd, predict_args);
  predict_cmd->add_option("--premise", premise, "premise text")->required();
  predict_cmd->add_option("--hypothesis", hypothesis, "hypothesis text")->required();

  double tolerance = 1e-5;
  bool corrupt = false;
  CLI::App* gradcheck_cmd =
      app.add_subcommand("gradcheck", "finite-difference check of all analytic gradients");
  add_common(gradcheck_cmd, gradcheck_args);
  gradcheck_cmd->add_option("--tolerance", tolerance, "max relative error allowed");
  gradcheck_cmd->add_flag("--corrupt", corrupt,
                          "negative control: corrupt one backward rule; the check must fail");

  CLI::App* params_cmd = app.add_subcommand("params", "report trainable parameter counts");
  add_common(params_cmd, params_args);

  std::size_t toy_size = 600;
  CLI::App* gen_cmd = app.add_subcommand("gen-toy", "generate the synthetic toy corpus");
  add_common(gen_cmd, gen_args);
  gen_cmd->add_option("--size", toy_size, "total number of examples (>= 30)");

  CLI11_PARSE(app, argc, argv);

  auto resolved = [](const CommonArgs& args) {
    return mimn::resolve_run_config(args.config_path, args.ov);
  };

  return mimn::run_guarded(
      [&]() -> int {
        if (train_cmd->parsed()) return mimn::cmd_train(resolved(train_args), std::cout);
        if (eval_cmd->parsed()) return mimn::cmd_eval(resolved(eval_args), std::cout);
        if (predict_cmd->parsed()) {
          return mimn::cmd_predict(resolved(predict_args), premise, hypothesis, std::cout);
        }
        if (gradcheck_cmd->parsed()) {
          return mimn::cmd_gradcheck(resolved(gradcheck_args), gradcheck_args.ov.seed, tolerance,
                                     corrupt, std::cout);
        }
        if (params_cmd->parsed()) return mimn::cmd_params(resolved(params_args), std::cout);
        if (gen_cmd->parsed()) return mimn::cmd_gen_toy(resolved(gen_args), toy_size, std::cout);
        return mimn::kExitConfig;
      },
      std::cerr);
}
