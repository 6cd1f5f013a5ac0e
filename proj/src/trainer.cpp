#include "sbanet/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "sbanet/errors.hpp"
#include "sbanet/random.hpp"

namespace sbanet {

OptimState OptimState::init(const ParamList& params, const AdamWConfig& hyper) {
  OptimState s;
  s.hyper = hyper;
  for (const auto& p : params) {
    s.m.emplace_back(p.tensor.numel(), 0.0);
    s.v.emplace_back(p.tensor.numel(), 0.0);
  }
  return s;
}

void adamw_step(const ParamList& params, std::span<const std::vector<double>> grads, OptimState& state) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ContractError("adamw_step: " + std::to_string(params.size()) + " parameters, " +
                        std::to_string(grads.size()) + " gradients, " + std::to_string(state.m.size()) +
                        " moment buffers");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::size_t n = params[i].tensor.numel();
    if (grads[i].size() != n) throw ContractError("adamw_step: missing gradient for \"" + params[i].name + "\"");
    if (state.m[i].size() != n || state.v[i].size() != n) {
      throw ContractError("adamw_step: moment buffers of \"" + params[i].name + "\" do not match its shape");
    }
  }
  const AdamWConfig& h = state.hyper;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);
  const double decay = 1.0 - h.lr * h.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = Tensor(params[i].tensor).mutable_values();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& g = grads[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g[k];
      v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g[k] * g[k];
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      w[k] = w[k] * decay - h.lr * mhat / (std::sqrt(vhat) + h.eps);
    }
  }
}

void adamw_step(const ParamList& params, OptimState& state) {
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) {
    if (!p.tensor.requires_grad()) throw ContractError("adamw_step: \"" + p.name + "\" is not trainable");
    const auto g = p.tensor.grad();
    grads.emplace_back(g.begin(), g.end());
  }
  adamw_step(params, grads, state);
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string TrainLog::loss_csv() const {
  std::string out = "step,loss\n";
  for (const auto& [step, loss] : losses) out += std::to_string(step) + "," + fmt(loss) + "\n";
  return out;
}

std::string TrainLog::epoch_csv() const {
  std::string out = "epoch,loss," + metrics_csv_header() + "\n";
  for (const auto& e : epochs) {
    out += std::to_string(e.epoch) + "," + fmt(e.mean_loss) + ",";
    out += e.metrics ? metrics_csv_row(*e.metrics) : std::string(",,,,,");
    out += "\n";
  }
  return out;
}

std::uint64_t config_hash(const ModelConfig& config) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : config.to_json()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0x5ba5ull, epoch));
  rng.shuffle(order);
  return order;
}

Tensor batch_loss(const ModelParams& params, const Dataset& data, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("batch_loss: empty batch");
  Tensor total;
  for (std::size_t idx : indices) {
    const Sample& s = data.samples.at(idx);
    const Tensor loss = ce_loss(forward(s.image(), s.tokens, s.valid, params), s.mask);
    total = total.defined() ? add(total, loss) : loss;
  }
  return scale(total, 1.0 / static_cast<double>(indices.size()));
}

TrainLog train(ModelParams& params, const Dataset& data, const TrainOptions& options) {
  if (data.samples.empty()) throw ContractError("train: dataset is empty");
  if (options.batch_size == 0) throw ConfigError("train: batch size must be positive");
  const auto start = std::chrono::steady_clock::now();
  TrainLog log;
  log.seed = options.seed;
  log.config_hash = config_hash(params.config);
  const ParamList registry = params.parameters();
  OptimState state = OptimState::init(registry, options.optim);
  std::size_t step = 0;
  bool done = false;
  for (std::size_t epoch = 0; epoch < options.epochs && !done; ++epoch) {
    const auto order = epoch_order(data.samples.size(), options.seed, epoch);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += options.batch_size) {
      const std::span<const std::size_t> batch(order.data() + b, std::min(options.batch_size, order.size() - b));
      for (const auto& p : registry) Tensor(p.tensor).zero_grad();
      GradTape tape(derive_seed(options.seed, epoch, b));
      double loss_value = 0.0;
      {
        TapeScope scope(tape);
        const Tensor loss = batch_loss(params, data, batch);
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
          std::string ids;
          for (auto i : batch) ids += (ids.empty() ? "" : " ") + std::to_string(data.samples[i].id);
          throw NumericError("train: non-finite loss at step " + std::to_string(step + 1) + " (epoch " +
                             std::to_string(epoch) + ", samples " + ids + ")");
        }
        backward(loss, tape);
      }
      adamw_step(registry, state);
      ++step;
      ++batches;
      epoch_loss += loss_value;
      log.losses.emplace_back(step, loss_value);
      if (options.on_step) options.on_step(step, loss_value);
      if (options.max_steps != 0 && step >= options.max_steps) {
        done = true;
        break;
      }
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.mean_loss = epoch_loss / static_cast<double>(batches);
    if (options.evaluate_epochs) rec.metrics = evaluate(params, data);
    log.epochs.push_back(std::move(rec));
  }
  log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return log;
}

}  // namespace sbanet
