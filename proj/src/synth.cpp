#include "sbanet/synth.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <sstream>

#include "sbanet/errors.hpp"
#include "sbanet/random.hpp"
#include "sbanet/serialize.hpp"

namespace sbanet {

namespace {

constexpr std::uint32_t kDatasetVersion = 1;
constexpr int kAttempts = 100;
constexpr int kPlacementTries = 50;
constexpr std::array<std::uint8_t, 3> kBackground = {24, 28, 32};

}  // namespace

std::string_view color_word(Color c) {
  switch (c) {
    case Color::Red: return "red";
    case Color::Green: return "green";
    case Color::Blue: return "blue";
    case Color::Yellow: return "yellow";
    case Color::White: return "white";
  }
  return "";
}

std::string_view shape_word(ShapeKind k) {
  switch (k) {
    case ShapeKind::Circle: return "circle";
    case ShapeKind::Square: return "square";
    case ShapeKind::Triangle: return "triangle";
  }
  return "";
}

std::string_view relation_word(Relation r) {
  switch (r) {
    case Relation::Left: return "left";
    case Relation::Right: return "right";
    case Relation::Top: return "top";
    case Relation::Bottom: return "bottom";
    case Relation::Middle: return "middle";
  }
  return "";
}

std::array<std::uint8_t, 3> color_rgb(Color c) {
  switch (c) {
    case Color::Red: return {220, 40, 40};
    case Color::Green: return {40, 180, 70};
    case Color::Blue: return {50, 90, 230};
    case Color::Yellow: return {230, 210, 40};
    case Color::White: return {245, 245, 245};
  }
  return kBackground;
}

void SceneSpec::validate() const {
  if (image_size < 8 || image_size > 65535) throw ConfigError("scene: image_size must be in [8, 65535]");
  if (min_shapes == 0 || min_shapes > max_shapes) throw ConfigError("scene: need 1 <= min_shapes <= max_shapes");
  if (min_side < 2 || min_side > max_side || max_side > image_size) {
    throw ConfigError("scene: need 2 <= min_side <= max_side <= image_size");
  }
  if (max_len < 6) throw ConfigError("scene: max_len must hold the 6-word template");
}

// Geometry runs on doubled coordinates so pixel centers (2p+1) and shape
// centers (2x+side) are integers.
bool SceneObject::contains(int px, int py) const {
  const int X = 2 * px + 1, Y = 2 * py + 1;
  const int x0 = 2 * x, y0 = 2 * y, s = 2 * side;
  if (X < x0 || X > x0 + s || Y < y0 || Y > y0 + s) return false;
  const int cx = x0 + side, cy = y0 + side;
  switch (kind) {
    case ShapeKind::Square:
      return true;
    case ShapeKind::Circle: {
      const int dx = X - cx, dy = Y - cy;
      return dx * dx + dy * dy <= side * side;
    }
    case ShapeKind::Triangle:
      // apex at the top center, base along the bottom edge
      return 2 * std::abs(X - cx) <= Y - y0;
  }
  return false;
}

Relation relation_of(const SceneObject& obj, std::size_t size) {
  const long n = static_cast<long>(size);
  const long cx = 2L * obj.x + obj.side, cy = 2L * obj.y + obj.side;  // doubled, image spans [0, 2n]
  auto central = [n](long v) { return 3 * v >= 2 * n && 3 * v <= 4 * n; };
  if (central(cx) && central(cy)) return Relation::Middle;
  const long dx = cx - n, dy = cy - n;
  if (std::labs(dx) >= std::labs(dy)) return dx < 0 ? Relation::Left : Relation::Right;
  return dy < 0 ? Relation::Top : Relation::Bottom;
}

BinaryMask rasterize(const SceneObject& obj, std::size_t height, std::size_t width) {
  BinaryMask mask(height, width);
  const int y_end = std::min<int>(obj.y + obj.side, static_cast<int>(height));
  const int x_end = std::min<int>(obj.x + obj.side, static_cast<int>(width));
  for (int py = std::max(obj.y, 0); py < y_end; ++py) {
    for (int px = std::max(obj.x, 0); px < x_end; ++px) {
      if (obj.contains(px, py)) mask.set(py, px, 1);
    }
  }
  return mask;
}

Tensor Sample::image() const {
  std::vector<double> v(rgb.size());
  for (std::size_t i = 0; i < rgb.size(); ++i) v[i] = rgb[i] / 255.0;
  return Tensor::from_values({height, width, 3}, std::move(v));
}

const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> words = {
      "<pad>", "the",    "on",     "red",  "green", "blue",   "yellow", "white",
      "circle", "square", "triangle", "left", "right", "top", "bottom", "middle",
  };
  return words;
}

TokenizedText tokenize(std::string_view expression, std::size_t max_len) {
  const auto& vocab = vocabulary();
  TokenizedText out;
  std::istringstream in{std::string(expression)};
  std::string word;
  while (in >> word) {
    std::transform(word.begin(), word.end(), word.begin(), [](unsigned char ch) { return std::tolower(ch); });
    const auto it = std::find(vocab.begin() + 1, vocab.end(), word);
    if (it == vocab.end()) throw DataError("tokenize: unknown word \"" + word + "\"");
    out.ids.push_back(static_cast<int>(it - vocab.begin()));
  }
  if (out.ids.empty()) throw DataError("tokenize: empty expression");
  if (out.ids.size() > max_len) {
    throw DataError("tokenize: " + std::to_string(out.ids.size()) + " words exceed max_len " +
                    std::to_string(max_len));
  }
  out.valid = out.ids.size();
  out.ids.resize(max_len, 0);
  return out;
}

std::string detokenize(std::span<const int> ids, std::size_t valid) {
  const auto& vocab = vocabulary();
  if (valid > ids.size()) throw DataError("detokenize: valid count exceeds the id list");
  std::string out;
  for (std::size_t i = 0; i < valid; ++i) {
    if (ids[i] <= 0 || static_cast<std::size_t>(ids[i]) >= vocab.size()) {
      throw DataError("detokenize: id " + std::to_string(ids[i]) + " is not a word");
    }
    if (i) out += ' ';
    out += vocab[ids[i]];
  }
  return out;
}

namespace {

bool overlaps(const SceneObject& a, const SceneObject& b) {
  // one-pixel gap between bounding boxes
  return a.x < b.x + b.side + 1 && b.x < a.x + a.side + 1 && a.y < b.y + b.side + 1 && b.y < a.y + a.side + 1;
}

bool same_description(const SceneObject& a, const SceneObject& b, std::size_t size) {
  return a.color == b.color && a.kind == b.kind && relation_of(a, size) == relation_of(b, size);
}

}  // namespace

Sample generate_sample(std::uint64_t seed, std::uint32_t index, const SceneSpec& spec) {
  spec.validate();
  const int n = static_cast<int>(spec.image_size);
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    Rng rng(derive_seed(seed, index, attempt));
    const auto count = static_cast<std::size_t>(rng.between(spec.min_shapes, spec.max_shapes));
    std::vector<SceneObject> objects;
    for (std::size_t k = 0; k < count; ++k) {
      bool placed = false;
      for (int t = 0; t < kPlacementTries && !placed; ++t) {
        SceneObject o;
        o.side = static_cast<int>(rng.between(spec.min_side, spec.max_side));
        o.x = static_cast<int>(rng.between(0, n - o.side));
        o.y = static_cast<int>(rng.between(0, n - o.side));
        o.color = static_cast<Color>(rng.below(5));
        o.kind = static_cast<ShapeKind>(rng.below(3));
        placed = std::none_of(objects.begin(), objects.end(), [&](const auto& p) { return overlaps(o, p); });
        if (placed) objects.push_back(o);
      }
      if (!placed) break;
    }
    if (objects.size() != count) continue;

    std::vector<std::size_t> unique;
    for (std::size_t i = 0; i < objects.size(); ++i) {
      std::size_t matches = 0;
      for (const auto& other : objects) matches += same_description(objects[i], other, spec.image_size);
      if (matches == 1) unique.push_back(i);
    }
    if (unique.empty()) continue;

    Sample s;
    s.id = index;
    s.height = s.width = spec.image_size;
    s.objects = std::move(objects);
    s.referent = unique[rng.below(unique.size())];
    s.rgb.resize(s.height * s.width * 3);
    for (std::size_t p = 0; p < s.height * s.width; ++p) std::copy(kBackground.begin(), kBackground.end(), &s.rgb[3 * p]);
    for (const auto& o : s.objects) {
      const auto rgb = color_rgb(o.color);
      const BinaryMask m = rasterize(o, s.height, s.width);
      for (std::size_t p = 0; p < m.bits.size(); ++p) {
        if (m.bits[p]) std::copy(rgb.begin(), rgb.end(), &s.rgb[3 * p]);
      }
    }
    const SceneObject& ref = s.objects[s.referent];
    s.mask = rasterize(ref, s.height, s.width);
    s.expression = "the " + std::string(color_word(ref.color)) + " " + std::string(shape_word(ref.kind)) +
                   " on the " + std::string(relation_word(relation_of(ref, spec.image_size)));
    auto tok = tokenize(s.expression, spec.max_len);
    s.tokens = std::move(tok.ids);
    s.valid = tok.valid;
    return s;
  }
  throw DataError("generate_sample: no uniquely describable referent after " + std::to_string(kAttempts) +
                  " attempts (seed " + std::to_string(seed) + ", index " + std::to_string(index) +
                  "); the scene spec is too crowded");
}

std::vector<Sample> generate_dataset(std::uint64_t seed, std::size_t count, const SceneSpec& spec,
                                     std::uint32_t first_index) {
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_sample(seed, first_index + static_cast<std::uint32_t>(i), spec));
  return out;
}

Dataset make_dataset(std::vector<Sample> samples) {
  Dataset d;
  if (!samples.empty()) {
    d.height = samples.front().height;
    d.width = samples.front().width;
    d.max_len = samples.front().tokens.size();
  }
  for (const auto& s : samples) {
    if (s.height != d.height || s.width != d.width || s.tokens.size() != d.max_len) {
      throw DataError("dataset: sample " + std::to_string(s.id) + " does not match the first sample's geometry");
    }
  }
  d.samples = std::move(samples);
  return d;
}

std::size_t dataset_file_size(std::size_t count, std::size_t height, std::size_t width, std::size_t max_len) {
  const std::size_t header = 4 + 4 + 4 + 2 + 2 + 2;
  const std::size_t record = 4 + height * width * 3 + 2 * max_len + 2 + (height * width + 7) / 8;
  return header + count * record;
}

std::vector<std::uint8_t> encode_dataset(const Dataset& data) {
  if (data.height > 65535 || data.width > 65535 || data.max_len > 65535) {
    throw DataError("dataset: dimensions do not fit the container's u16 fields");
  }
  ByteWriter w;
  w.tag("SBDS");
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(data.samples.size()));
  w.u16(static_cast<std::uint16_t>(data.height));
  w.u16(static_cast<std::uint16_t>(data.width));
  w.u16(static_cast<std::uint16_t>(data.max_len));
  const std::size_t pixels = data.height * data.width;
  for (const auto& s : data.samples) {
    if (s.height != data.height || s.width != data.width || s.tokens.size() != data.max_len ||
        s.rgb.size() != pixels * 3 || s.mask.bits.size() != pixels) {
      throw DataError("dataset: sample " + std::to_string(s.id) + " does not match the container geometry");
    }
    w.u32(s.id);
    w.raw(s.rgb);
    for (int t : s.tokens) {
      if (t < 0 || t > 65535) throw DataError("dataset: token id " + std::to_string(t) + " does not fit u16");
      w.u16(static_cast<std::uint16_t>(t));
    }
    w.u16(static_cast<std::uint16_t>(s.valid));
    std::vector<std::uint8_t> bits((pixels + 7) / 8, 0);
    for (std::size_t p = 0; p < pixels; ++p) {
      if (s.mask.bits[p] > 1) throw DataError("dataset: sample " + std::to_string(s.id) + " has a non-binary mask");
      if (s.mask.bits[p]) bits[p / 8] |= static_cast<std::uint8_t>(1u << (p % 8));
    }
    w.raw(bits);
  }
  return w.release();
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_tag("SBDS");
  const std::size_t version_at = r.offset();
  if (r.u32() != kDatasetVersion) throw FormatError("SBDS: unsupported version", version_at);
  const std::uint32_t count = r.u32();
  Dataset d;
  d.height = r.u16();
  d.width = r.u16();
  d.max_len = r.u16();
  const std::size_t pixels = d.height * d.width;
  const std::size_t expected = dataset_file_size(count, d.height, d.width, d.max_len);
  if (bytes.size() < expected) throw FormatError("SBDS: truncated container", bytes.size());
  if (bytes.size() > expected) throw FormatError("SBDS: trailing bytes after the last record", expected);
  d.samples.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Sample s;
    s.id = r.u32();
    s.height = d.height;
    s.width = d.width;
    const auto rgb = r.raw(pixels * 3);
    s.rgb.assign(rgb.begin(), rgb.end());
    s.tokens.resize(d.max_len);
    for (auto& t : s.tokens) t = r.u16();
    const std::size_t valid_at = r.offset();
    s.valid = r.u16();
    if (s.valid > d.max_len) throw FormatError("SBDS: valid count exceeds max_len", valid_at);
    const auto bits = r.raw((pixels + 7) / 8);
    s.mask = BinaryMask(d.height, d.width);
    for (std::size_t p = 0; p < pixels; ++p) s.mask.bits[p] = (bits[p / 8] >> (p % 8)) & 1u;
    try {
      s.expression = detokenize(s.tokens, s.valid);
    } catch (const DataError&) {
      s.expression.clear();
    }
    d.samples.push_back(std::move(s));
  }
  return d;
}

void write_dataset(const std::filesystem::path& path, const Dataset& data) { write_file(path, encode_dataset(data)); }

Dataset read_dataset(const std::filesystem::path& path) { return decode_dataset(read_file(path)); }

}  // namespace sbanet
