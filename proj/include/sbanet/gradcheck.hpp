#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sbanet/tensor.hpp"

namespace sbanet {

struct CheckReport {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  double tolerance = 0.0;
  bool passed = true;
  // Worst coordinate with both derivative estimates.
  std::string worst;
};

struct CheckOptions {
  double step = 1e-5;
  double tolerance = 1e-5;
  // 0 checks every coordinate; otherwise a seeded random subset per input.
  std::size_t max_coords_per_input = 0;
  std::uint64_t seed = 0;
  // Optional labels for the inputs, used in CheckReport::worst.
  std::vector<std::string> input_names;
  // When > 1, central differences are taken at step·4^(levels−1), ..., step,
  // Richardson-extrapolated, and each coordinate keeps the estimate with the
  // smallest estimated truncation plus roundoff error. Deep compositions need this: their small gradients sit
  // below the roundoff floor of any single fixed step.
  std::size_t levels = 1;
};

// Relative error used by every check: |a − n| / max(|a|, |n|, 1e-8).
double relative_error(double analytic, double numeric);

// Compares the tape gradient of the scalar `f()` with central differences taken
// by perturbing each (sampled) coordinate of the leaf `inputs` in place.
// `f` must be pure in the values of `inputs`.
CheckReport finite_diff_check(const std::string& name, const std::function<Tensor()>& f,
                              const std::vector<Tensor>& inputs, const CheckOptions& options = {});

// Single-input form; `x` is copied into a fresh parameter leaf.
CheckReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step,
                              double tolerance);

}  // namespace sbanet
