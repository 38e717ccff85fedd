#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "hcfusion/errors.hpp"

namespace hcfusion {

/// A single-channel image of doubles, row-major.
struct Plane {
  std::size_t height = 0, width = 0;
  std::vector<double> data;

  Plane() = default;
  Plane(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), data(h * w, fill) {}

  double& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
  double at(std::size_t y, std::size_t x) const { return data[y * width + x]; }
  std::size_t size() const { return data.size(); }
  bool same_size(const Plane& o) const { return height == o.height && width == o.width; }

  bool operator==(const Plane&) const = default;
};

inline void require_same_size(const Plane& a, const Plane& b, const char* what) {
  if (!a.same_size(b))
    throw ShapeError(std::string(what) + ": image size mismatch " + std::to_string(a.height) + "x" +
                     std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" + std::to_string(b.width));
}

inline Plane flip_horizontal(const Plane& p) {
  Plane out(p.height, p.width);
  for (std::size_t y = 0; y < p.height; ++y)
    for (std::size_t x = 0; x < p.width; ++x) out.at(y, x) = p.at(y, p.width - 1 - x);
  return out;
}

}  // namespace hcfusion
