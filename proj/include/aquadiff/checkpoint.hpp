#pragma once

// Binary checkpoint format. The byte layout is documented in docs/checkpoint_format.md.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "aquadiff/autodiff.hpp"

namespace aquadiff {

constexpr char kCheckpointMagic[4] = {'A', 'Q', 'D', 'F'};
constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  ad::Shape shape;
  std::vector<double> values;  // stored as float32
};

struct Checkpoint {
  /// Flat key=value text describing everything that shaped the weights.
  std::string config_text;
  std::uint64_t step = 0;
  /// Opaque training RNG state.
  std::string rng_state;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
};

/// FNV-1a, 64 bit.
std::uint64_t fnv1a64(const std::string& text);

/// Tensors pass through float32, so values are rounded on save.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace aquadiff
