#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "sbanet/mask.hpp"
#include "sbanet/tensor.hpp"

namespace sbanet {

enum class Color { Red, Green, Blue, Yellow, White };
enum class ShapeKind { Circle, Square, Triangle };
enum class Relation { Left, Right, Top, Bottom, Middle };

std::string_view color_word(Color c);
std::string_view shape_word(ShapeKind k);
std::string_view relation_word(Relation r);
std::array<std::uint8_t, 3> color_rgb(Color c);

struct SceneSpec {
  std::size_t image_size = 64;
  std::size_t min_shapes = 2;
  std::size_t max_shapes = 4;
  std::size_t min_side = 12;  // bounding-box side in pixels
  std::size_t max_side = 20;
  std::size_t max_len = 16;

  // Throws ConfigError.
  void validate() const;
};

// Axis-aligned bounding box [x, x+side) × [y, y+side) holding one shape.
struct SceneObject {
  Color color = Color::Red;
  ShapeKind kind = ShapeKind::Square;
  int x = 0;
  int y = 0;
  int side = 0;

  bool contains(int px, int py) const;
};

// Position word of an object in a size × size image.
Relation relation_of(const SceneObject& obj, std::size_t size);
BinaryMask rasterize(const SceneObject& obj, std::size_t height, std::size_t width);

struct Sample {
  std::uint32_t id = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> rgb;  // H·W·3, row-major
  std::vector<int> tokens;        // padded to max_len
  std::size_t valid = 0;
  std::string expression;
  BinaryMask mask;
  // Scene description; empty for samples read back from a container.
  std::vector<SceneObject> objects;
  std::size_t referent = 0;

  // [H, W, 3] with values in [0, 1].
  Tensor image() const;
};

// Fixed word list; id 0 is padding.
const std::vector<std::string>& vocabulary();

struct TokenizedText {
  std::vector<int> ids;  // length max_len
  std::size_t valid = 0;
};

TokenizedText tokenize(std::string_view expression, std::size_t max_len);
std::string detokenize(std::span<const int> ids, std::size_t valid);

// Pure in (seed, index, spec). Throws DataError when no uniquely describable
// referent is found within 100 scene attempts.
Sample generate_sample(std::uint64_t seed, std::uint32_t index, const SceneSpec& spec = {});
std::vector<Sample> generate_dataset(std::uint64_t seed, std::size_t count, const SceneSpec& spec = {},
                                     std::uint32_t first_index = 0);

struct Dataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t max_len = 0;
  std::vector<Sample> samples;
};

Dataset make_dataset(std::vector<Sample> samples);

// SBDS container.
std::vector<std::uint8_t> encode_dataset(const Dataset& data);
Dataset decode_dataset(std::span<const std::uint8_t> bytes);
std::size_t dataset_file_size(std::size_t count, std::size_t height, std::size_t width, std::size_t max_len);
void write_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace sbanet
