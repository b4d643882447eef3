#pragma once

// Procedural layered-rectangle stereo scenes with exact integer disparity,
// plus a photometric shift that turns the source domain into a "real" target.

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "jointstereo/data.hpp"

namespace jointstereo {

struct ShiftProfile {
  double gamma = 1.0;
  std::array<double, 3> gain{1.0, 1.0, 1.0};
  double noise_sigma = 0.0;  // additive Gaussian, in [0, 1] intensity units

  bool is_identity() const;
  // "identity", "default", or "gamma=G,gain=R:G:B,noise=S" (any subset).
  static ShiftProfile parse(const std::string& text);
  static ShiftProfile identity() { return {}; }
  static ShiftProfile standard();
  std::string to_string() const;
};

struct ToyConfig {
  uint64_t seed = 0;
  int num_pairs = 200;
  int height = 128;
  int width = 256;
  int max_disparity = 16;
  ShiftProfile shift = ShiftProfile::standard();

  void validate() const;
};

struct ToyDatasets {
  Dataset source;         // synthetic domain, with disparity and noc masks
  Dataset target;         // real domain, disparity kept for evaluation only
  Dataset target_for_training() const;  // same images without disparity
};

// Samples carry images in [-1, 1]; identical to what loading the written
// manifests produces.
ToyDatasets generate_toy_datasets(const ToyConfig& config);

struct ToyManifestPaths {
  std::string source;
  std::string target;
};

// Writes <out_dir>/source/ and <out_dir>/target/ with PNG images, PFM
// disparities, PNG noc masks and a manifest.json each.
ToyManifestPaths write_toy_datasets(const ToyConfig& config, const std::string& out_dir);

}  // namespace jointstereo
