#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "sbanet/ablation.hpp"
#include "sbanet/checkpoint.hpp"
#include "sbanet/errors.hpp"
#include "sbanet/gradcheck_suite.hpp"
#include "sbanet/metrics.hpp"
#include "sbanet/serialize.hpp"
#include "sbanet/synth.hpp"
#include "sbanet/trainer.hpp"

namespace fs = std::filesystem;
using namespace sbanet;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

ModelConfig load_config(const std::string& path) {
  if (path.empty()) return ModelConfig{};
  const auto bytes = read_file(path);
  return ModelConfig::from_json(std::string(bytes.begin(), bytes.end()));
}

// flag > SBANET_SEED > config
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, std::uint64_t config_seed) {
  if (flag) return *flag;
  if (const char* env = std::getenv("SBANET_SEED"); env && *env) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (*end != '\0' || env[0] == '-') throw UsageError("SBANET_SEED must be a non-negative integer");
    return v;
  }
  return config_seed;
}

struct GenArgs {
  std::uint64_t seed = 1;
  std::size_t n = 0;
  std::string out;
  std::size_t size = 64;
};

int run_gen(const GenArgs& a) {
  SceneSpec spec;
  spec.image_size = a.size;
  write_dataset(a.out, make_dataset(generate_dataset(a.seed, a.n, spec)));
  const Dataset back = read_dataset(a.out);
  std::cout << "count " << back.samples.size() << "\n";
  return 0;
}

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::size_t epochs = 75;
  std::size_t batch = 4;
  std::optional<std::uint64_t> seed;
  double lr = 5e-4;
  double wd = 0.01;
};

int run_train(const TrainArgs& a) {
  ModelConfig config = load_config(a.config);
  config.seed = resolve_seed(a.seed, config.seed);
  config.validate();
  const Dataset data = read_dataset(a.data);
  if (data.samples.empty()) throw DataError("train: dataset " + a.data + " has no samples");
  ModelParams params = ModelParams::init(config);
  TrainOptions opts;
  opts.epochs = a.epochs;
  opts.batch_size = a.batch;
  opts.seed = config.seed;
  opts.optim.lr = a.lr;
  opts.optim.weight_decay = a.wd;
  opts.evaluate_epochs = false;
  const TrainLog log = train(params, data, opts);
  const MetricsReport report = evaluate(params, data);
  fs::create_directories(a.out);
  save_checkpoint(fs::path(a.out) / "model.sbck", params);
  write_text(fs::path(a.out) / "train.csv", log.loss_csv());
  write_text(fs::path(a.out) / "epochs.csv", log.epoch_csv());
  write_text(fs::path(a.out) / "metrics.csv", metrics_csv_header() + "\n" + metrics_csv_row(report) + "\n");
  std::printf("steps %zu  seed %llu  config %016llx  %.1fs\n", log.losses.size(),
              static_cast<unsigned long long>(config.seed), static_cast<unsigned long long>(log.config_hash),
              log.wall_seconds);
  std::cout << metrics_csv_header() << "\n" << metrics_csv_row(report) << "\n";
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& data_path) {
  const ModelParams params = load_checkpoint(ckpt);
  const Dataset data = read_dataset(data_path);
  if (data.samples.empty()) throw DataError("eval: dataset " + data_path + " has no samples");
  const MetricsReport report = evaluate(params, data);
  std::cout << metrics_csv_header() << "\n" << metrics_csv_row(report) << "\n";
  return 0;
}

struct AblateArgs {
  std::string plan;
  std::string data;
  std::string test;
  std::string out;
  std::string config;
  std::size_t epochs = 10;
  std::size_t batch = 4;
  std::optional<std::uint64_t> seed;
};

int run_ablate(const AblateArgs& a) {
  ModelConfig base = load_config(a.config);
  base.seed = resolve_seed(a.seed, base.seed);
  const AblationPlan plan = make_plan(a.plan, base);
  const Dataset train_data = read_dataset(a.data);
  const Dataset test_data = a.test.empty() ? train_data : read_dataset(a.test);
  if (train_data.samples.empty() || test_data.samples.empty()) throw DataError("ablate: empty dataset");
  std::string csv;
  csv += "# plan " + plan.name + ", seed " + std::to_string(base.seed) + ", epochs " + std::to_string(a.epochs) + "\n";
  for (const auto& note : plan.notes) csv += "# " + note + "\n";
  csv += "variant," + metrics_csv_header() + "\n";
  for (const auto& v : plan.variants) {
    ModelParams params = ModelParams::init(v.config);
    TrainOptions opts;
    opts.epochs = a.epochs;
    opts.batch_size = a.batch;
    opts.seed = base.seed;
    opts.evaluate_epochs = false;
    train(params, train_data, opts);
    const std::string row = "\"" + v.name + "\"," + metrics_csv_row(evaluate(params, test_data));
    std::cout << row << std::endl;
    csv += row + "\n";
  }
  write_text(a.out, csv);
  return 0;
}

int run_gradcheck(const std::string& module, const std::string& inject) {
  if (!inject.empty()) {
    const auto kind = op_from_name(inject);
    if (!kind) throw UsageError("unknown op \"" + inject + "\"");
    debug::inject_gradient_sign_flip(kind);
  }
  const auto reports = run_gradchecks(module);
  std::size_t failed = 0;
  std::cout << "check,max_rel_error,coordinates,status,worst\n";
  for (const auto& r : reports) {
    std::printf("%s,%.3e,%zu,%s,%s\n", r.name.c_str(), r.max_rel_error, r.coordinates, r.passed ? "ok" : "FAIL",
                r.worst.c_str());
    failed += !r.passed;
  }
  if (failed) {
    std::cerr << failed << " gradient check(s) failed:";
    for (const auto& r : reports) {
      if (!r.passed) std::cerr << " " << r.name;
    }
    std::cerr << "\n";
    return kExitNumeric;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sbanet: toy referring-segmentation training and evaluation"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "Generate a synthetic dataset");
  gen_cmd->add_option("--seed", gen.seed, "Dataset seed");
  gen_cmd->add_option("--n", gen.n, "Number of samples")->required()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--out", gen.out, "Output SBDS file")->required();
  gen_cmd->add_option("--size", gen.size, "Image side in pixels")->check(CLI::Range(8, 65535));

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--config", tr.config, "Flat JSON model config");
  train_cmd->add_option("--data", tr.data, "Training SBDS file")->required();
  train_cmd->add_option("--out", tr.out, "Output directory")->required();
  train_cmd->add_option("--epochs", tr.epochs, "Epochs");
  train_cmd->add_option("--batch", tr.batch, "Batch size")->check(CLI::PositiveNumber);
  train_cmd->add_option("--seed", tr.seed, "Seed (overrides SBANET_SEED and the config)");
  train_cmd->add_option("--lr", tr.lr, "Learning rate");
  train_cmd->add_option("--wd", tr.wd, "Weight decay");

  std::string ckpt, eval_data;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint, metrics CSV on stdout");
  eval_cmd->add_option("--ckpt", ckpt, "SBCK checkpoint")->required();
  eval_cmd->add_option("--data", eval_data, "SBDS dataset")->required();

  AblateArgs ab;
  auto* ablate_cmd = app.add_subcommand("ablate", "Train and evaluate every variant of an ablation plan");
  ablate_cmd->add_option("--plan", ab.plan, "table3 | table4-variants | table4-tokens | table5")->required();
  ablate_cmd->add_option("--data", ab.data, "Training SBDS file")->required();
  ablate_cmd->add_option("--test", ab.test, "Test SBDS file (defaults to the training set)");
  ablate_cmd->add_option("--out", ab.out, "Output CSV")->required();
  ablate_cmd->add_option("--config", ab.config, "Base JSON config");
  ablate_cmd->add_option("--epochs", ab.epochs, "Epochs per variant");
  ablate_cmd->add_option("--batch", ab.batch, "Batch size")->check(CLI::PositiveNumber);
  ablate_cmd->add_option("--seed", ab.seed, "Seed shared by every variant");

  std::string module = "all", inject;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  grad_cmd->add_option("--module", module, "all | tensor | nn | bam | tcsa | model");
  grad_cmd->add_option("--inject-sign-flip", inject)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen_cmd) return run_gen(gen);
    if (*train_cmd) return run_train(tr);
    if (*eval_cmd) return run_eval(ckpt, eval_data);
    if (*ablate_cmd) return run_ablate(ab);
    if (*grad_cmd) return run_gradcheck(module, inject);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
