// gcf: train, evaluate, ablate and verify graph-convolution fusion models.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "gcf/commands.hpp"

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string variant;
  std::string out;
  std::string manifest;
  std::string precision;
  std::optional<std::size_t> epochs;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "Run configuration file");
  cmd->add_option("--seed", o.seed, "Seed for initialization, shuffling and splitting");
  cmd->add_option("--variant", o.variant, "Graph variant")->check(CLI::IsMember({"v1", "v2", "v3", "V1", "V2", "V3"}));
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--manifest", o.manifest, "Dataset manifest CSV");
  cmd->add_option("--precision", o.precision, "Numeric precision")->check(CLI::IsMember({"f32", "f64"}));
  cmd->add_option("--epochs", o.epochs, "Number of training epochs");
}

gcf::RunConfig resolve(const CommonOptions& o) {
  gcf::RunConfig cfg = o.config.empty() ? gcf::RunConfig{} : gcf::load_config(o.config);
  if (o.seed) cfg.train.seed = *o.seed;
  if (!o.variant.empty()) cfg.model.variant = gcf::parse_variant(o.variant);
  if (!o.out.empty()) cfg.output_dir = o.out;
  if (!o.manifest.empty()) cfg.manifest = o.manifest;
  if (!o.precision.empty()) cfg.precision = gcf::parse_precision(o.precision);
  if (o.epochs) cfg.train.epochs = *o.epochs;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Graph-convolution fusion (GCF) facial expression recognition toolkit"};
  app.require_subcommand(1);

  CommonOptions train_opts, eval_opts, ablate_opts, grad_opts;

  auto* train = app.add_subcommand("train", "Train a model and write checkpoint, metrics and report");
  add_common(train, train_opts);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  add_common(eval, eval_opts);
  std::string checkpoint;
  std::string split = "test";
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--split", split, "Evaluate the held-out split or every sample")
      ->check(CLI::IsMember({"test", "all"}));

  auto* ablate = app.add_subcommand("ablate", "Compare CNN-only, GCF-V1, GCF-V2 and GCF-V3 under one seed");
  add_common(ablate, ablate_opts);
  std::size_t jobs = 1;
  ablate->add_option("--jobs", jobs, "Run up to this many trainings as parallel processes");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every parameter gradient");
  add_common(gradcheck, grad_opts);
  double kink_margin = 0.0;
  std::string fault_op;
  gradcheck->add_option("--kink-margin", kink_margin, "Resample until activations are this far from relu/maxpool kinks");
  gradcheck->add_option("--fault", fault_op, "Corrupt the backward rule of this op (negative control)");

  auto* synth = app.add_subcommand("synth", "Generate the synthetic region-blob dataset");
  gcf::SyntheticOptions synth_opts;
  std::string synth_out = "data/synthetic";
  synth->add_option("--n-per-class", synth_opts.n_per_class, "Images per class");
  synth->add_option("--classes", synth_opts.num_classes, "Number of classes (at most 9)");
  synth->add_option("--seed", synth_opts.seed, "Generator seed");
  synth->add_option("--noise", synth_opts.noise, "Gaussian noise sigma as a fraction of the pixel range");
  synth->add_option("--out", synth_out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : gcf::kExitConfig;
  }

  try {
    if (*train) return gcf::cmd_train(resolve(train_opts));
    if (*eval) return gcf::cmd_eval(resolve(eval_opts), checkpoint, split == "all" ? gcf::EvalSplit::All : gcf::EvalSplit::Test);
    if (*ablate) return gcf::cmd_ablate(resolve(ablate_opts), jobs);
    if (*gradcheck) {
      const auto cfg = resolve(grad_opts);
      gcf::GradCheckRequest req;
      req.variant = cfg.model.variant;
      req.seed = cfg.train.seed;
      req.kink_margin = kink_margin;
      req.fault_op = fault_op;
      return gcf::cmd_gradcheck(req);
    }
    if (*synth) return gcf::cmd_synth(synth_opts, synth_out);
  } catch (const gcf::ConfigError& e) {
    return gcf::report_error(gcf::kExitConfig, "config", e.what());
  }
  return gcf::kExitConfig;
}
