#pragma once

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "hcfusion/fusion.hpp"
#include "hcfusion/metrics.hpp"
#include "hcfusion/training.hpp"

namespace hcfusion::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kNumericalFailure = 3 };

/// Worker threads for evaluation: HCFUSION_THREADS if set, else the hardware count.
inline unsigned thread_count() {
  if (const char* env = std::getenv("HCFUSION_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n >= 1) return static_cast<unsigned>(n);
    } catch (const std::exception&) {
    }
    log_warning(std::string("ignoring invalid HCFUSION_THREADS='") + env + "'");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

inline RunConfig load_run_config(const std::string& path, std::optional<std::uint64_t> seed) {
  RunConfig run = path.empty() ? RunConfig{} : RunConfig::load(path);
  if (seed) run.train.seed = *seed;
  run.network.validate();
  run.train.validate();
  return run;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out || !(out << text)) throw DataError("cannot write '" + path + "'");
}

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string checkpoint;
  std::string out;
  std::string color_policy = "luminance-fuse";
  std::string json;
  std::string loss_log;
  std::vector<std::string> inputs;
};

inline int cmd_train(const Options& o, std::ostream& out) {
  const auto run = load_run_config(o.config, o.seed);
  const std::string ckpt = o.out.empty() ? "hcfusion.ckpt" : o.out;
  FitOptions fo;
  fo.on_step = [&](const LossRecord& r) {
    if (r.step % 50 == 0) out << "step " << r.step << " lr " << r.lr << " loss " << r.loss << '\n';
  };
  const auto result = fit(o.inputs.at(0), run, fo);
  result.checkpoint.save(ckpt);
  write_loss_log(o.loss_log.empty() ? ckpt + ".loss.csv" : o.loss_log, result.log);
  out << "wrote checkpoint " << ckpt << " after " << result.checkpoint.step << " steps\n";
  return kOk;
}

inline int cmd_fuse(const Options& o, std::ostream& out) {
  if (o.checkpoint.empty()) throw ConfigError("fuse requires --checkpoint");
  if (o.out.empty()) throw ConfigError("fuse requires --out");
  for (const auto& p : {o.out, o.inputs.at(0), o.inputs.at(1)})
    if (!is_supported_image(p)) throw DataError("unsupported image format '" + p + "'; supported: " + kSupportedFormats);
  FusionRequest req{o.inputs.at(0), o.inputs.at(1), o.checkpoint, o.out, parse_color_policy(o.color_policy)};
  const auto result = fuse_files(req);
  out << "wrote " << o.out << " (" << result.image.width << "x" << result.image.height << ", "
      << (result.image.is_color() ? "RGB" : "gray") << ", " << result.image.bit_depth << "-bit)\n";
  return kOk;
}

inline int cmd_eval(const Options& o, std::ostream& out) {
  const auto report = evaluate_dir(o.inputs.at(0), o.inputs.at(1), o.inputs.at(2), thread_count());
  const std::string path = o.out.empty() ? "metrics.txt" : o.out;
  write_text(path, report.to_text());
  write_text(o.json.empty() ? path + ".json" : o.json, report.to_json().dump(2) + "\n");
  out << report.to_text();
  return report.missing.empty() ? kOk : kDataError;
}

inline int cmd_ablate(const Options& o, std::ostream& out) {
  const auto run = load_run_config(o.config, o.seed);
  const auto corpus = load_corpus(o.inputs.at(0));
  const auto eval = load_eval_set(o.inputs.at(1), o.inputs.at(2));
  AblationOptions ao;
  ao.on_variant = [&](const AblationRow& r) {
    out << "finished variant " << r.variant << (r.completed ? "" : " (failed)") << '\n';
  };
  const auto table = run_ablation(corpus, eval, run, ao);
  const std::string text = table.to_text();
  write_text(o.out.empty() ? "ablation.txt" : o.out, text);
  out << text;
  if (table.complete()) return kOk;
  return table.rows.back().numerical_failure ? kNumericalFailure : kDataError;
}

/// Parses `args` (without the program name) and runs one command.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Hybrid CNN-Transformer multimodal image fusion"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "key = value configuration file");
    sub->add_option("--seed", o.seed, "random seed (overrides the config)");
  };

  auto* train = app.add_subcommand("train", "train a model on a directory of images");
  common(train);
  train->add_option("corpus_dir", o.inputs, "training images")->required()->expected(1);
  train->add_option("--out", o.out, "checkpoint to write");
  train->add_option("--loss-log", o.loss_log, "per-step loss log (step,lr,loss)");

  auto* fuse = app.add_subcommand("fuse", "fuse an aligned image pair");
  common(fuse);
  fuse->add_option("inputs", o.inputs, "source images A and B")->required()->expected(2);
  fuse->add_option("--checkpoint", o.checkpoint, "trained checkpoint")->required();
  fuse->add_option("--out", o.out, "fused image to write")->required();
  fuse->add_option("--color-policy", o.color_policy, "luminance-fuse or gray-only");

  auto* eval = app.add_subcommand("eval", "score fused images against their sources");
  common(eval);
  eval->add_option("dirs", o.inputs, "source A, source B and fused directories")->required()->expected(3);
  eval->add_option("--out", o.out, "text report to write");
  eval->add_option("--json", o.json, "JSON report to write");

  auto* ablate = app.add_subcommand("ablate", "train and compare the ablation variants");
  common(ablate);
  ablate->add_option("dirs", o.inputs, "training corpus, eval source A and eval source B directories")
      ->required()
      ->expected(3);
  ablate->add_option("--out", o.out, "table to write");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kUsage;
  }

  try {
    if (train->parsed()) return cmd_train(o, out);
    if (fuse->parsed()) return cmd_fuse(o, out);
    if (eval->parsed()) return cmd_eval(o, out);
    return cmd_ablate(o, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << '\n';
    return kNumericalFailure;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  }
}

}  // namespace hcfusion::cli
