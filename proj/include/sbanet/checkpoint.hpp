#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "sbanet/model.hpp"

namespace sbanet {

// SBCK: "SBCK", u32 version, config JSON string, u32 count, then per tensor a
// name string and an SBTN record, in parameter registry order.
std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params);
// Rebuilds the model from the stored config and overwrites every parameter.
ModelParams decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace sbanet
