#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "sbanet/model.hpp"

namespace sbanet {

struct AblationVariant {
  std::string name;
  ModelConfig config;
};

struct AblationPlan {
  std::string name;
  std::vector<AblationVariant> variants;
  // Extra context printed as CSV comment lines (e.g. the token-count mapping).
  std::vector<std::string> notes;
};

const std::vector<std::string>& plan_names();

// Toy-scale token count for a full-scale M: round(M·4/225), at least 1.
std::size_t toy_token_count(std::size_t full_scale_m);

// Every variant starts from `base` (sizes, seed) and only changes module flags.
// Throws UsageError listing the known plans.
AblationPlan make_plan(std::string_view name, const ModelConfig& base);

}  // namespace sbanet
