#include "sbanet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "sbanet/errors.hpp"
#include "sbanet/random.hpp"

namespace sbanet {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

namespace {
double evaluate(const std::function<Tensor()>& f) {
  NoGradScope no_grad;
  const Tensor y = f();
  if (y.numel() != 1) throw ContractError("finite_diff_check: function must return a scalar");
  const double v = y.item();
  if (!std::isfinite(v)) throw NumericError("finite_diff_check: function produced a non-finite value");
  return v;
}

double central(const std::function<Tensor()>& f, double& value, double original, double h) {
  value = original + h;
  const double up = evaluate(f);
  value = original - h;
  const double down = evaluate(f);
  value = original;
  return (up - down) / (2.0 * h);
}

// Central differences on the ladder smallest·4^(levels−1), ..., smallest, fed
// into a Richardson tableau (Ridders). D(h) carries even powers of h, so column
// j removes the h^(2j) term. Each entry is scored by its distance to the two
// entries it was built from, plus the roundoff of its finest step amplified by
// the extrapolation weights; the best scored extrapolated entry is returned.
double laddered(const std::function<Tensor()>& f, double& value, double original, double smallest,
                std::size_t levels, double noise) {
  double h = smallest * std::pow(4.0, static_cast<double>(levels - 1));
  std::vector<double> prev_row{central(f, value, original, h)};
  double best = prev_row[0];
  double best_err = std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i < levels; ++i) {
    h *= 0.25;
    std::vector<double> row{central(f, value, original, h)};
    double factor = 1.0, gain = 1.0;
    for (std::size_t j = 1; j <= i; ++j) {
      factor *= 16.0;
      gain *= (factor + 1.0) / (factor - 1.0);
      row.push_back((factor * row[j - 1] - prev_row[j - 1]) / (factor - 1.0));
      const double err = std::max(std::abs(row[j] - row[j - 1]), std::abs(row[j] - prev_row[j - 1])) +
                         gain * noise / h;
      if (err < best_err) {
        best_err = err;
        best = row[j];
      }
    }
    prev_row = std::move(row);
  }
  return best;
}
}  // namespace

CheckReport finite_diff_check(const std::string& name, const std::function<Tensor()>& f,
                              const std::vector<Tensor>& inputs, const CheckOptions& options) {
  if (!(options.step >= 1e-7 && options.step <= 1e-3)) {
    throw ContractError("finite_diff_check: step must lie in [1e-7, 1e-3]");
  }
  for (const auto& in : inputs) {
    if (!in.is_leaf() || !in.requires_grad()) {
      throw ContractError("finite_diff_check: inputs must be parameter leaves");
    }
  }

  std::vector<Tensor> leaves = inputs;
  for (auto& in : leaves) in.zero_grad();
  {
    GradTape tape;
    TapeScope scope(tape);
    const Tensor y = f();
    if (y.numel() != 1) throw ContractError("finite_diff_check: function must return a scalar");
    if (!std::isfinite(y.item())) throw NumericError("finite_diff_check: function produced a non-finite value");
    backward(y, tape);
  }

  // Roundoff in one evaluation of f, a few dozen ulps of its value.
  const double noise = 32.0 * std::numeric_limits<double>::epsilon() * std::max(std::abs(evaluate(f)), 1e-300);

  CheckReport report;
  report.name = name;
  report.tolerance = options.tolerance;
  Rng rng(options.seed);
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    auto& leaf = leaves[k];
    const std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
    std::vector<std::size_t> coords(leaf.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords_per_input != 0 && coords.size() > options.max_coords_per_input) {
      rng.shuffle(coords);
      coords.resize(options.max_coords_per_input);
      std::sort(coords.begin(), coords.end());
    }
    auto values = leaf.mutable_values();
    for (std::size_t i : coords) {
      const double original = values[i];
      const double numeric = options.levels > 1
                                 ? laddered(f, values[i], original, options.step, options.levels, noise)
                                 : central(f, values[i], original, options.step);
      const double err = relative_error(analytic[i], numeric);
      ++report.coordinates;
      if (err > report.max_rel_error || std::isnan(err)) {
        report.max_rel_error = err;
        const std::string label =
            k < options.input_names.size() ? options.input_names[k] : "input " + std::to_string(k);
        char buf[96];
        std::snprintf(buf, sizeof buf, " index %zu analytic %.6e numeric %.6e", i, analytic[i], numeric);
        report.worst = label + buf;
      }
    }
  }
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

CheckReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step,
                              double tolerance) {
  Tensor leaf = Tensor::parameter(x.shape(), std::vector<double>(x.values().begin(), x.values().end()));
  CheckOptions options;
  options.step = step;
  options.tolerance = tolerance;
  return finite_diff_check("f", [&] { return f(leaf); }, {leaf}, options);
}

}  // namespace sbanet
