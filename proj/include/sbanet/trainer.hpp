#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sbanet/metrics.hpp"
#include "sbanet/model.hpp"
#include "sbanet/synth.hpp"

namespace sbanet {

struct AdamWConfig {
  double lr = 5e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimState {
  AdamWConfig hyper;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;

  static OptimState init(const ParamList& params, const AdamWConfig& hyper);
};

// One AdamW update in registry order. Decay is applied to the weights directly
// (w ← w·(1 − lr·wd)) before the bias-corrected Adam step.
void adamw_step(const ParamList& params, std::span<const std::vector<double>> grads, OptimState& state);
// Uses each parameter's accumulated grad() buffer.
void adamw_step(const ParamList& params, OptimState& state);

struct TrainOptions {
  std::size_t epochs = 1;
  std::size_t batch_size = 4;
  std::uint64_t seed = 1;
  AdamWConfig optim;
  // Train-set metrics after every epoch (one extra forward per sample).
  bool evaluate_epochs = true;
  // Stop once this many optimizer steps ran (0 = no limit).
  std::size_t max_steps = 0;
  std::function<void(std::size_t step, double loss)> on_step;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  std::optional<MetricsReport> metrics;
};

struct TrainLog {
  std::vector<std::pair<std::size_t, double>> losses;  // (step, batch loss), steps from 1
  std::vector<EpochRecord> epochs;
  double wall_seconds = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;

  std::string loss_csv() const;
  std::string epoch_csv() const;
};

// FNV-1a over the config's JSON form.
std::uint64_t config_hash(const ModelConfig& config);

// Order in which epoch `epoch` visits the samples.
std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::size_t epoch);

// Mean cross-entropy over the batch; records on the active tape.
Tensor batch_loss(const ModelParams& params, const Dataset& data, std::span<const std::size_t> indices);

// Trains `params` in place. Throws NumericError naming the step and sample
// indices when a loss is not finite.
TrainLog train(ModelParams& params, const Dataset& data, const TrainOptions& options);

}  // namespace sbanet
