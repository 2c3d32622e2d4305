#pragma once

#include <cstdint>
#include <vector>

#include "diffris/autodiff.hpp"

namespace diffris {

// RGB image, pixels stored as (height*width) x 3 in [0, 1], row-major scan.
struct Image {
  int height = 0;
  int width = 0;
  Matrix pixels;
};

struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;  // height*width, 0 or 1

  BinaryMask() = default;
  BinaryMask(int h, int w) : height(h), width(w), values(static_cast<std::size_t>(h) * w, 0) {}

  [[nodiscard]] std::uint8_t at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  void set(int y, int x, bool v) { values[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }
  [[nodiscard]] std::size_t count() const;
  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

// Thresholds flattened logits (height*width x 1) at `threshold`.
BinaryMask binarize(const Matrix& logits, int height, int width, double threshold = 0.0);

}  // namespace diffris
