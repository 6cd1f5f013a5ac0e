#include "sbanet/checkpoint.hpp"

#include <algorithm>

#include "sbanet/errors.hpp"
#include "sbanet/serialize.hpp"

namespace sbanet {

namespace {
constexpr std::uint32_t kCheckpointVersion = 1;
}

std::vector<std::uint8_t> encode_checkpoint(const ModelParams& params) {
  ByteWriter w;
  w.tag("SBCK");
  w.u32(kCheckpointVersion);
  w.str(params.config.to_json());
  const ParamList list = params.parameters();
  w.u32(static_cast<std::uint32_t>(list.size()));
  for (const auto& p : list) {
    w.str(p.name);
    write_tensor(w, p.tensor);
  }
  return w.release();
}

ModelParams decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_tag("SBCK");
  const std::size_t version_at = r.offset();
  if (r.u32() != kCheckpointVersion) throw FormatError("SBCK: unsupported version", version_at);
  const std::size_t config_at = r.offset();
  const std::string json = r.str();
  ModelConfig config;
  try {
    config = ModelConfig::from_json(json);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("SBCK: bad config record: ") + e.what(), config_at);
  }
  ModelParams params = ModelParams::init(config);
  const ParamList list = params.parameters();
  const std::size_t count_at = r.offset();
  const std::uint32_t count = r.u32();
  if (count != list.size()) {
    throw FormatError("SBCK: " + std::to_string(count) + " tensors stored, the config needs " +
                      std::to_string(list.size()),
                      count_at);
  }
  for (const auto& p : list) {
    const std::size_t at = r.offset();
    const std::string name = r.str();
    if (name != p.name) throw FormatError("SBCK: expected tensor \"" + p.name + "\", found \"" + name + "\"", at);
    const Tensor t = read_tensor(r);
    if (t.shape() != p.tensor.shape()) {
      throw FormatError("SBCK: tensor \"" + name + "\" has shape " + shape_str(t.shape()) + ", expected " +
                        shape_str(p.tensor.shape()),
                        at);
    }
    auto dst = Tensor(p.tensor).mutable_values();
    std::copy(t.values().begin(), t.values().end(), dst.begin());
  }
  if (r.remaining() != 0) throw FormatError("SBCK: trailing bytes after the last tensor", r.offset());
  return params;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  write_file(path, encode_checkpoint(params));
}

ModelParams load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace sbanet
