#pragma once

#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "sbanet/gradcheck.hpp"
#include "sbanet/model.hpp"

namespace sbanet {

inline constexpr double kSuiteTolerance = 1e-4;

struct SuiteCheck {
  std::string module;  // tensor, nn, bam, tcsa, model
  std::string name;
  std::function<CheckReport()> run;
};

// Every registered finite-difference check, in a fixed order.
const std::vector<SuiteCheck>& gradcheck_registry();
const std::vector<std::string>& gradcheck_modules();

// "all" or one module name; throws UsageError for anything else.
std::vector<CheckReport> run_gradchecks(std::string_view module);

// Reduced configuration used by the model-level checks and unit tests.
ModelConfig small_model_config();

}  // namespace sbanet
