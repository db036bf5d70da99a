#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "covnet/errors.hpp"

namespace covnet {

// Binary label image, row-major, values 0 (background) / 1 (infected).
struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> values;

  Mask() = default;
  Mask(std::size_t r, std::size_t c, std::uint8_t fill = 0) : rows(r), cols(c), values(r * c, fill) {}

  std::size_t size() const { return values.size(); }
  std::uint8_t& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  std::uint8_t at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::size_t count(std::uint8_t v = 1) const {
    std::size_t n = 0;
    for (auto x : values) n += (x == v);
    return n;
  }
  bool operator==(const Mask&) const = default;
};

inline void require_binary(const Mask& m, const char* what) {
  if (m.values.size() != m.rows * m.cols) throw ShapeError(std::string(what) + ": inconsistent mask");
  for (auto v : m.values) {
    if (v > 1) throw ParameterError(std::string(what) + ": mask values must be 0 or 1");
  }
}

}  // namespace covnet
