#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "icrit/errors.hpp"

namespace icrit {

enum class MapTag { kProbeError, kCriticPrediction, kAttentionMass, kDerived };

const char* map_tag_name(MapTag tag);

/// Scalar field over the noise-token grid, row-major.
struct SpatialMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;
  MapTag tag = MapTag::kDerived;

  SpatialMap() = default;
  SpatialMap(std::size_t h, std::size_t w, MapTag t = MapTag::kDerived) : height(h), width(w), values(h * w, 0.0), tag(t) {}
  SpatialMap(std::size_t h, std::size_t w, std::vector<double> v, MapTag t = MapTag::kDerived)
      : height(h), width(w), values(std::move(v)), tag(t) {
    if (values.size() != h * w) {
      throw DimensionError("spatial map " + std::to_string(h) + "x" + std::to_string(w) + " given " +
                           std::to_string(values.size()) + " values");
    }
  }

  std::size_t size() const { return values.size(); }
  double& at(std::size_t r, std::size_t c) { return values[r * width + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
};

}  // namespace icrit
