#include <gtest/gtest.h>

#include <cstring>

#include "sbanet/checkpoint.hpp"
#include "sbanet/errors.hpp"
#include "sbanet/gradcheck_suite.hpp"
#include "sbanet/serialize.hpp"
#include "util.hpp"

using namespace sbanet;
using testutil::values;

namespace {

ModelParams scrambled(ModelConfig c, std::uint64_t seed) {
  ModelParams p = ModelParams::init(c);
  Rng rng(seed);
  testutil::scramble(p.parameters(), rng);
  return p;
}

std::size_t find_bytes(const std::vector<std::uint8_t>& hay, const std::string& needle) {
  const auto it = std::search(hay.begin(), hay.end(), needle.begin(), needle.end());
  return it == hay.end() ? std::string::npos : static_cast<std::size_t>(it - hay.begin());
}

}  // namespace

TEST(Sbtn, RecordLayout) {
  ByteWriter w;
  write_tensor(w, Tensor::from_values({2, 1}, {1.5, -2.0}));
  const auto bytes = w.release();
  ASSERT_EQ(bytes.size(), 4u + 4u + 8u + 16u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "SBTN");
  ByteReader r(bytes);
  r.expect_tag("SBTN");
  EXPECT_EQ(r.u32(), 2u);
  EXPECT_EQ(r.u32(), 2u);
  EXPECT_EQ(r.u32(), 1u);
  EXPECT_EQ(r.f64(), 1.5);
  EXPECT_EQ(r.f64(), -2.0);
  // Little-endian IEEE-754: the last byte of 1.5 is 0x3f.
  EXPECT_EQ(bytes[16 + 7], 0x3f);
}

TEST(Sbtn, RoundTripKeepsBits) {
  const std::vector<double> v = {0.1, -0.0, 1e-308, 3.141592653589793, -7e300};
  ByteWriter w;
  write_tensor(w, Tensor::from_values({5}, v));
  const auto bytes = w.release();
  ByteReader r(bytes);
  const auto back = values(read_tensor(r));
  ASSERT_EQ(back.size(), v.size());
  EXPECT_EQ(std::memcmp(back.data(), v.data(), v.size() * sizeof(double)), 0);
}

TEST(Checkpoint, RoundTripIsByteExact) {
  const ModelParams p = scrambled(ModelConfig{}, 1);
  const auto bytes = encode_checkpoint(p);
  const ModelParams back = decode_checkpoint(bytes);
  EXPECT_EQ(back.config.to_json(), p.config.to_json());
  const auto a = p.parameters(), b = back.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(values(a[i].tensor), values(b[i].tensor)) << a[i].name;
  }
  EXPECT_EQ(encode_checkpoint(back), bytes);
}

TEST(Checkpoint, HeaderAndOrder) {
  const ModelParams p = ModelParams::init(small_model_config());
  const auto bytes = encode_checkpoint(p);
  ByteReader r(bytes);
  r.expect_tag("SBCK");
  EXPECT_EQ(r.u32(), 1u);
  EXPECT_EQ(r.str(), p.config.to_json());
  const auto list = p.parameters();
  EXPECT_EQ(r.u32(), list.size());
  for (const auto& e : list) {
    ASSERT_EQ(r.str(), e.name);
    ASSERT_EQ(read_tensor(r).shape(), e.tensor.shape());
  }
  EXPECT_EQ(r.remaining(), 0u);
}

TEST(Checkpoint, ForwardMatchesAfterReload) {
  const ModelConfig c = small_model_config();
  const ModelParams p = scrambled(c, 2);
  const auto dir = testutil::scratch_dir("ckpt");
  save_checkpoint(dir / "m.sbck", p);
  const ModelParams back = load_checkpoint(dir / "m.sbck");
  Rng rng(3);
  const Tensor image = testutil::random_tensor({32, 32, 3}, rng, 0, 1);
  const std::vector<int> tokens = {3, 4, 5, 0, 0, 0, 0, 0};
  EXPECT_EQ(values(forward(image, tokens, 3, p)), values(forward(image, tokens, 3, back)));
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, AblationConfigsRoundTrip) {
  ModelConfig c = small_model_config();
  c.use_tcsa = false;
  c.bam_variant = BamVariant::SelfAttn;
  const auto bytes = encode_checkpoint(scrambled(c, 4));
  EXPECT_EQ(encode_checkpoint(decode_checkpoint(bytes)), bytes);
  EXPECT_EQ(find_bytes(bytes, "tcsa."), std::string::npos);
}

TEST(Checkpoint, CorruptMagic) {
  auto bytes = encode_checkpoint(ModelParams::init(small_model_config()));
  bytes[1] = 'X';
  try {
    decode_checkpoint(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(Checkpoint, BadVersion) {
  auto bytes = encode_checkpoint(ModelParams::init(small_model_config()));
  bytes[4] = 9;
  try {
    decode_checkpoint(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 4u);
  }
}

TEST(Checkpoint, TruncatedAndTrailing) {
  auto bytes = encode_checkpoint(ModelParams::init(small_model_config()));
  auto longer = bytes;
  longer.push_back(0);
  EXPECT_THROW(decode_checkpoint(longer), FormatError);
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
}

TEST(Checkpoint, RenamedTensorIsReported) {
  auto bytes = encode_checkpoint(ModelParams::init(small_model_config()));
  const std::size_t at = find_bytes(bytes, "decoder.head.weight");
  ASSERT_NE(at, std::string::npos);
  bytes[at] = 'D';
  try {
    decode_checkpoint(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("Decoder.head.weight"), std::string::npos) << e.what();
    EXPECT_EQ(e.offset(), at - 4);
  }
}

TEST(Checkpoint, ConfigMismatchIsReported) {
  // A checkpoint whose config names fewer tensors than it stores.
  ModelConfig c = small_model_config();
  auto bytes = encode_checkpoint(ModelParams::init(c));
  ByteReader r(bytes);
  r.expect_tag("SBCK");
  r.u32();
  r.str();
  c.use_tcsa = false;
  const std::string other = c.to_json();
  std::vector<std::uint8_t> patched(bytes.begin(), bytes.begin() + 8);
  ByteWriter w;
  w.str(other);
  const auto s = w.release();
  patched.insert(patched.end(), s.begin(), s.end());
  patched.insert(patched.end(), bytes.begin() + static_cast<std::ptrdiff_t>(r.offset()), bytes.end());
  EXPECT_THROW(decode_checkpoint(patched), FormatError);
}

TEST(Checkpoint, MissingFile) {
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/x.sbck"), DataError);
}
