#pragma once

// Implementation of the `gcf` subcommands. Each command returns a process
// exit code and reports failures on stderr as a single line
// `gcf: error[E<code>:<kind>] <message>`.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gcf/checkpoint.hpp"
#include "gcf/config.hpp"
#include "gcf/data.hpp"
#include "gcf/model.hpp"
#include "gcf/train.hpp"

namespace gcf {

enum ExitCode : int {
  kExitOk = 0,
  kExitVerifyFail = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitNumeric = 4,
  kExitCheckpoint = 5,
};

inline int report_error(int code, std::string_view kind, std::string message) {
  std::replace(message.begin(), message.end(), '\n', ' ');
  std::cerr << "gcf: error[E" << code << ':' << kind << "] " << message << std::endl;
  return code;
}

// Runs `body`, mapping library exceptions to exit codes.
template <class F>
int guarded(F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    return report_error(kExitConfig, "config", e.what());
  } catch (const DataError& e) {
    return report_error(kExitData, "data", e.what());
  } catch (const NumericError& e) {
    return report_error(kExitNumeric, "numeric", e.what());
  } catch (const CheckpointError& e) {
    return report_error(kExitCheckpoint, "checkpoint", e.what());
  } catch (const ContractError& e) {
    return report_error(kExitData, "data", e.what());
  } catch (const ShapeError& e) {
    return report_error(kExitConfig, "config", e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return report_error(kExitData, "data", e.what());
  }
}

inline std::string model_label(const ModelConfig& m) {
  return m.graph_branch ? std::string(variant_name(m.variant)) : std::string("CNN");
}

inline nlohmann::json report_to_json(const EvalReport& r, const std::vector<std::string>& class_names) {
  return {{"samples", r.samples},    {"accuracy", r.accuracy}, {"loss", r.loss},
          {"classes", class_names},  {"confusion", r.confusion}, {"precision", r.precision},
          {"recall", r.recall}};
}

inline void print_report(std::ostream& os, const EvalReport& r, const std::vector<std::string>& class_names) {
  os << "accuracy " << std::fixed << std::setprecision(4) << r.accuracy << " (" << r.correct() << "/" << r.samples
     << ")\nconfusion (rows = true class, cols = predicted):\n";
  for (std::size_t i = 0; i < r.confusion.size(); ++i) {
    os << "  " << std::setw(10) << std::left << class_names[i] << std::right;
    for (auto v : r.confusion[i]) os << ' ' << std::setw(4) << v;
    os << '\n';
  }
  os.unsetf(std::ios::floatfield);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

// Manifest, split and class count shared by train / eval / ablate.
struct PreparedData {
  RunManifest manifest;
  SplitAssignment split;
};

inline PreparedData prepare_data(RunConfig& cfg) {
  if (cfg.manifest.empty()) throw DataError("no manifest given (set [data] manifest or pass --manifest)");
  PreparedData d{load_manifest(cfg.manifest), {}};
  cfg.model.num_classes = d.manifest.num_classes();
  cfg.model.validate();
  cfg.train.validate();
  d.split = split_stratified(d.manifest, cfg.train.seed, cfg.test_fraction);
  return d;
}

struct TrainSummary {
  std::string model;
  EvalReport final_report;
  std::size_t best_epoch = 0;
  std::uint64_t backbone_init_digest = 0;
  std::vector<EpochMetrics> history;
};

// Trains one model into `out_dir`: metrics.jsonl, split.json, checkpoint.gcf,
// report.json. The final report evaluates the checkpoint as reloaded from
// disk, so `gcf eval` on the same split reproduces it exactly.
template <class T>
TrainSummary run_training(const RunConfig& cfg, const PreparedData& data, const std::filesystem::path& out_dir,
                          std::ostream& log) {
  std::filesystem::create_directories(out_dir);
  const auto all = load_dataset<T>(data.manifest, cfg.model.backbone);
  const auto train_set = all.subset(data.split.train);
  const auto test_set = all.subset(data.split.test);
  write_text(out_dir / "split.json", data.split.serialize());

  GcfModel<T> model(cfg.model, cfg.train.seed);
  TrainSummary summary;
  summary.model = model_label(cfg.model);
  summary.backbone_init_digest = model.params().digest("backbone.");

  std::ofstream metrics(out_dir / "metrics.jsonl", std::ios::binary);
  if (!metrics) throw DataError("cannot write " + (out_dir / "metrics.jsonl").string());
  auto on_epoch = [&](const EpochMetrics& m) {
    metrics << nlohmann::json{{"epoch", m.epoch}, {"split", "train"}, {"loss", m.train_loss},
                              {"accuracy", m.train_accuracy}, {"variant", summary.model}}
                   .dump()
            << '\n'
            << nlohmann::json{{"epoch", m.epoch}, {"split", "test"}, {"loss", m.test_loss},
                              {"accuracy", m.test_accuracy}, {"variant", summary.model}}
                   .dump()
            << '\n';
    metrics.flush();
    log << "[" << summary.model << "] epoch " << m.epoch << " train_loss " << m.train_loss << " train_acc "
        << m.train_accuracy << " test_acc " << m.test_accuracy << std::endl;
  };
  auto result = train(model, train_set, test_set, cfg.train, on_epoch);

  const auto digest = config_digest(cfg.model);
  const auto ckpt_path = out_dir / "checkpoint.gcf";
  save_checkpoint(ckpt_path, result.best_params, digest);
  apply_checkpoint(load_checkpoint(ckpt_path), model.params(), digest);
  summary.final_report = evaluate(model, test_set);
  summary.best_epoch = result.best_epoch;
  summary.history = result.history;

  auto report = report_to_json(summary.final_report, data.manifest.class_names);
  report["model"] = summary.model;
  report["best_epoch"] = summary.best_epoch;
  report["split"] = "test";
  report["config_digest"] = hex64(digest);
  report["backbone_init_digest"] = hex64(summary.backbone_init_digest);
  write_text(out_dir / "report.json", report.dump(2) + "\n");
  return summary;
}

inline TrainSummary run_training_dispatch(const RunConfig& cfg, const PreparedData& data,
                                          const std::filesystem::path& out_dir, std::ostream& log) {
  return cfg.precision == Precision::F64 ? run_training<double>(cfg, data, out_dir, log)
                                         : run_training<float>(cfg, data, out_dir, log);
}

inline int cmd_train(RunConfig cfg, std::ostream& out = std::cout) {
  return guarded([&] {
    auto data = prepare_data(cfg);
    const auto hist = data.manifest.class_histogram();
    out << "manifest: " << data.manifest.samples.size() << " samples, " << hist.size() << " classes (";
    for (std::size_t c = 0; c < hist.size(); ++c) out << (c ? ", " : "") << data.manifest.class_names[c] << "=" << hist[c];
    out << "); split train=" << data.split.train.size() << " test=" << data.split.test.size() << std::endl;
    const auto summary = run_training_dispatch(cfg, data, cfg.output_dir, out);
    out << "best epoch " << summary.best_epoch << "\n";
    print_report(out, summary.final_report, data.manifest.class_names);
    return int{kExitOk};
  });
}

enum class EvalSplit { Test, All };

template <class T>
EvalReport run_eval(const RunConfig& cfg, const PreparedData& data, const Checkpoint& ckpt, EvalSplit which) {
  GcfModel<T> model(cfg.model, cfg.train.seed);
  apply_checkpoint(ckpt, model.params(), config_digest(cfg.model));
  const auto all = load_dataset<T>(data.manifest, cfg.model.backbone);
  return evaluate(model, which == EvalSplit::Test ? all.subset(data.split.test) : all);
}

inline int cmd_eval(RunConfig cfg, const std::filesystem::path& checkpoint, EvalSplit which = EvalSplit::Test,
                    std::ostream& out = std::cout) {
  return guarded([&] {
    auto data = prepare_data(cfg);
    const auto ckpt = load_checkpoint(checkpoint);
    const auto report = cfg.precision == Precision::F64 ? run_eval<double>(cfg, data, ckpt, which)
                                                        : run_eval<float>(cfg, data, ckpt, which);
    print_report(out, report, data.manifest.class_names);
    std::filesystem::create_directories(cfg.output_dir);
    auto json = report_to_json(report, data.manifest.class_names);
    json["model"] = model_label(cfg.model);
    json["split"] = which == EvalSplit::Test ? "test" : "all";
    json["config_digest"] = hex64(config_digest(cfg.model));
    write_text(cfg.output_dir / "eval_report.json", json.dump(2) + "\n");
    return int{kExitOk};
  });
}

struct AblationRow {
  std::string model;
  double test_accuracy = 0.0;
  std::size_t best_epoch = 0;
  std::string backbone_init_digest;
};

inline std::vector<RunConfig> ablation_configs(const RunConfig& base) {
  std::vector<RunConfig> rows;
  RunConfig cnn = base;
  cnn.model.graph_branch = false;
  rows.push_back(cnn);
  for (auto v : {GraphVariant::V1, GraphVariant::V2, GraphVariant::V3}) {
    RunConfig g = base;
    g.model.graph_branch = true;
    g.model.variant = v;
    rows.push_back(g);
  }
  return rows;
}

inline void write_row_summary(const std::filesystem::path& dir, const TrainSummary& s) {
  write_text(dir / "summary.json", nlohmann::json{{"model", s.model},
                                                  {"test_accuracy", s.final_report.accuracy},
                                                  {"best_epoch", s.best_epoch},
                                                  {"backbone_init_digest", hex64(s.backbone_init_digest)}}
                                           .dump() +
                                       "\n");
}

inline AblationRow read_row_summary(const std::filesystem::path& dir) {
  std::ifstream in(dir / "summary.json");
  if (!in) throw DataError("missing ablation result " + (dir / "summary.json").string());
  const auto j = nlohmann::json::parse(in);
  return {j.at("model").get<std::string>(), j.at("test_accuracy").get<double>(), j.at("best_epoch").get<std::size_t>(),
          j.at("backbone_init_digest").get<std::string>()};
}

// Four trainings with one seed: CNN-only baseline and GCF V1/V2/V3. With
// jobs > 1 rows run in separate processes (never threads sharing parameters).
inline int cmd_ablate(RunConfig cfg, std::size_t jobs = 1, std::ostream& out = std::cout) {
  return guarded([&] {
    auto data = prepare_data(cfg);
    const auto rows = ablation_configs(cfg);
    auto row_dir = [&](const RunConfig& r) { return cfg.output_dir / model_label(r.model); };
    std::filesystem::create_directories(cfg.output_dir);

    if (jobs <= 1) {
      for (const auto& r : rows) {
        RunConfig rc = r;
        rc.model.num_classes = data.manifest.num_classes();
        write_row_summary(row_dir(r), run_training_dispatch(rc, data, row_dir(r), out));
      }
    } else {
      std::vector<pid_t> running;
      int failure = 0;
      auto reap = [&] {
        int status = 0;
        const pid_t pid = ::wait(&status);
        std::erase(running, pid);
        if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) failure = WIFEXITED(status) ? WEXITSTATUS(status) : kExitNumeric;
      };
      for (const auto& r : rows) {
        while (running.size() >= jobs) reap();
        out.flush();
        const pid_t pid = ::fork();
        if (pid < 0) throw DataError("fork failed");
        if (pid == 0) {
          const int code = guarded([&] {
            RunConfig rc = r;
            rc.model.num_classes = data.manifest.num_classes();
            std::ostringstream sink;
            write_row_summary(row_dir(r), run_training_dispatch(rc, data, row_dir(r), sink));
            return int{kExitOk};
          });
          std::_Exit(code);
        }
        running.push_back(pid);
      }
      while (!running.empty()) reap();
      if (failure) return report_error(failure, "ablate", "an ablation run failed");
    }

    std::vector<AblationRow> table;
    for (const auto& r : rows) table.push_back(read_row_summary(row_dir(r)));
    nlohmann::json json{{"seed", cfg.train.seed}, {"epochs", cfg.train.epochs}, {"rows", nlohmann::json::array()}};
    std::ostringstream csv;
    csv << "model,test_accuracy,best_epoch,backbone_init_digest\n";
    out << "model  test_accuracy  backbone_init_digest\n";
    for (const auto& row : table) {
      json["rows"].push_back({{"model", row.model},
                              {"test_accuracy", row.test_accuracy},
                              {"best_epoch", row.best_epoch},
                              {"backbone_init_digest", row.backbone_init_digest}});
      csv << row.model << ',' << row.test_accuracy << ',' << row.best_epoch << ',' << row.backbone_init_digest << '\n';
      out << std::left << std::setw(7) << row.model << std::right << std::fixed << std::setprecision(4)
          << row.test_accuracy << "         " << row.backbone_init_digest << '\n';
      out.unsetf(std::ios::floatfield);
    }
    write_text(cfg.output_dir / "ablation.json", json.dump(2) + "\n");
    write_text(cfg.output_dir / "ablation.csv", csv.str());
    return int{kExitOk};
  });
}

struct GradCheckRequest {
  GraphVariant variant = GraphVariant::V1;
  std::uint64_t seed = 42;
  double kink_margin = 0.0;
  std::string fault_op;  // empty: no fault
  double fault_scale = 1.5;
};

// Gradient check of the tiny 64-bit model on one random 12x12 image.
inline GradCheckReport run_gradcheck(const GradCheckRequest& req) {
  GcfModel<double> model(tiny_model_config(req.variant), req.seed);
  auto rng = stream_rng(req.seed, "gradcheck-input");
  std::uniform_real_distribution<double> pixel(0.0, 1.0);
  const auto& b = model.config().backbone;
  std::vector<double> px(b.input_channels * b.input_size * b.input_size);
  for (auto& v : px) v = pixel(rng);
  Tensor<double> image({b.input_channels, b.input_size, b.input_size}, std::move(px));
  GradCheckOptions opt;
  opt.seed = req.seed;
  opt.min_kink_margin = req.kink_margin;
  opt.fault_op = req.fault_op;
  opt.fault_scale = req.fault_scale;
  return grad_check(model, image, 1, opt);
}

inline int cmd_gradcheck(const GradCheckRequest& req, std::ostream& out = std::cout) {
  return guarded([&] {
    const auto report = run_gradcheck(req);
    out << "gradcheck: tiny model (node_dim 4, global_dim 8, K=3, " << variant_name(req.variant)
        << "), central differences step 1e-5, 64-bit\n";
    for (const auto& t : report.tensors)
      out << "  " << std::left << std::setw(24) << t.name << std::right << " checked " << std::setw(3) << t.checked
          << "  max_rel_error " << std::scientific << std::setprecision(3) << t.max_rel_error << std::defaultfloat
          << '\n';
    out << "max_rel_error " << std::scientific << std::setprecision(3) << report.max_rel_error << std::defaultfloat
        << " kink_margin " << report.kink_margin << " tolerance " << report.tolerance << '\n'
        << (report.pass() ? "PASS" : "FAIL") << std::endl;
    if (!report.pass()) return report_error(kExitVerifyFail, "verify", "gradient check failed");
    return int{kExitOk};
  });
}

inline int cmd_synth(const SyntheticOptions& opt, const std::filesystem::path& out_dir, std::ostream& out = std::cout) {
  return guarded([&] {
    try {
      const auto m = generate_synthetic(out_dir, opt);
      out << "wrote " << m.samples.size() << " images in " << m.num_classes() << " classes to " << out_dir.string()
          << " (manifest " << (out_dir / "manifest.csv").string() << ")" << std::endl;
    } catch (const ContractError& e) {
      throw ConfigError(e.what());
    }
    return int{kExitOk};
  });
}

}  // namespace gcf
