#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace sbanet {

// Row-major binary mask; every entry is 0 or 1.
struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bits;

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w) : height(h), width(w), bits(h * w, 0) {}

  std::uint8_t at(std::size_t y, std::size_t x) const { return bits[y * width + x]; }
  void set(std::size_t y, std::size_t x, std::uint8_t v) { bits[y * width + x] = v; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto b : bits) n += b != 0;
    return n;
  }
  bool operator==(const BinaryMask&) const = default;
};

}  // namespace sbanet
