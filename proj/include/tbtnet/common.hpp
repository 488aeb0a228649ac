#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace tbtnet {

/// Tensor shapes or sizes that violate an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid hyperparameters, folds, counts or other configuration values.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Unreadable or corrupt files (weights, images, manifests, checkpoints).
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Episode sampling could not find usable images within its retry budget.
class SamplingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Spatial extent of a feature grid. Positions are flattened row-major
/// (index = y * w + x) everywhere in the project.
struct Grid {
  int64_t h = 0;
  int64_t w = 0;

  int64_t size() const { return h * w; }
  bool operator==(const Grid&) const = default;
};

inline std::string to_string(Grid g) {
  return std::to_string(g.h) + "x" + std::to_string(g.w);
}

}  // namespace tbtnet
