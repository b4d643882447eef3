#pragma once

// Objective terms of the joint translation + stereo framework. Every term is a
// differentiable scalar tensor; reductions are means over pixels and channels
// so weights do not depend on resolution.

#include <torch/torch.h>

#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "jointstereo/geometry.hpp"
#include "jointstereo/networks.hpp"

namespace jointstereo {

enum class AdversarialSide { kDiscriminator, kGenerator };
enum class AdversarialMode { kLog, kLeastSquares };

AdversarialMode parse_adversarial_mode(const std::string& name);
std::string to_string(AdversarialMode mode);

// Discriminator side returns the objective the discriminator maximizes,
// E[log D(real)] + E[log(1 - D(fake))] (<= 0, 0 for a perfect discriminator).
// Generator side returns the non-saturating loss -E[log D(fake)] to minimize;
// `on_real` is ignored there. Least-squares mode keeps the same orientation:
// -(E[(D(real)-1)^2] + E[D(fake)^2]) / 2 for the discriminator and
// E[(D(fake)-1)^2] / 2 for the generator.
torch::Tensor adversarial_loss(const torch::Tensor& on_real, const torch::Tensor& on_fake,
                               AdversarialSide side,
                               AdversarialMode mode = AdversarialMode::kLog);

// Mean-L1 of both round-trip residuals, summed.
torch::Tensor cycle_loss(const torch::Tensor& x, const torch::Tensor& x_roundtrip,
                         const torch::Tensor& y, const torch::Tensor& y_roundtrip);

// Per-level weights for deep supervision: level k gets 0.5^k. A value of 1
// for `levels` supervises only the full-resolution output.
struct StereoLossOptions {
  int levels = 0;  // 0 = every pyramid level
};

struct StereoLossResult {
  torch::Tensor value;
  bool no_valid_pixels = false;
};

// Weighted mean-L1 between each pyramid level and the ground truth rescaled to
// that level, normalized by the sum of level weights. Invalid pixels excluded.
StereoLossResult stereo_matching_loss(const StereoOutput& prediction,
                                      const DisparityMap& ground_truth,
                                      const StereoLossOptions& options = {});

// Forward pair G_x2y features and backward pair G_y2x features, each warped
// with the ground truth rescaled to the tap scale, averaged over taps.
torch::Tensor feature_reprojection_synthetic(const std::vector<FeatureMap>& forward_left,
                                             const std::vector<FeatureMap>& forward_right,
                                             const std::vector<FeatureMap>& backward_left,
                                             const std::vector<FeatureMap>& backward_right,
                                             const DisparityMap& ground_truth);

struct RealReprojectionOptions {
  // When a tap scale has no matching pyramid level, resample the nearest
  // finer level instead of failing.
  bool allow_resample = true;
  // Let gradient reach generator features (off: only the disparity estimate
  // receives gradient).
  bool generator_gradient = false;
};

// Same structure as the synthetic term, with the matcher's own pyramid
// disparities in place of a downsampled ground truth.
torch::Tensor feature_reprojection_real(const std::vector<FeatureMap>& forward_left,
                                        const std::vector<FeatureMap>& forward_right,
                                        const std::vector<FeatureMap>& backward_left,
                                        const std::vector<FeatureMap>& backward_right,
                                        const StereoOutput& estimate,
                                        const RealReprojectionOptions& options = {});

// Mean over taps of the sum of three mean-L1 residuals against the reference
// pair's aggregation features: (l', r), (l, r'), (l', r'). The reference is
// treated as a constant.
torch::Tensor correlation_consistency_loss(const std::vector<FeatureMap>& reference,
                                           const std::vector<FeatureMap>& left_reconstructed,
                                           const std::vector<FeatureMap>& right_reconstructed,
                                           const std::vector<FeatureMap>& both_reconstructed);

inline constexpr double kModeSeekingEpsilon = 1e-5;
inline constexpr double kModeSeekingClamp = 1e5;

// mean|z1 - z2| / (mean|out1 - out2| + eps), clamped above.
torch::Tensor mode_seeking_loss(const torch::Tensor& out1, const torch::Tensor& out2,
                                const NoiseMap& z1, const NoiseMap& z2);

// ---------------------------------------------------------------------------
// Full objective

// Names of the weighted components of the full objective.
inline const std::vector<std::string> kObjectiveTerms = {"cdt", "sm", "fx",
                                                         "fy",  "corr", "ms"};

struct LossWeights {
  double lambda_cyc = 10.0;
  double lambda_sm = 1.0;
  double lambda_fx = 5.0;
  double lambda_fy = 5.0;
  double lambda_corr = 1.0;
  double lambda_ms = 0.1;
  // Steps over which lambda_ms decays linearly to exactly zero. 0 disables
  // the decay.
  int64_t ms_decay_steps = 0;

  void validate() const;
  double mode_seeking_weight(int64_t step) const;
  double weight(const std::string& term, int64_t step) const;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

// Adversarial generator parts plus weighted cycle term.
torch::Tensor cycle_domain_translation_loss(const torch::Tensor& adversarial_x2y,
                                            const torch::Tensor& adversarial_y2x,
                                            const torch::Tensor& cycle,
                                            const LossWeights& weights);

struct LossReport {
  std::map<std::string, double> terms;     // raw values, by name
  std::map<std::string, double> weighted;  // weight * term for objective terms
  std::set<std::string> ablated;
  double total = 0.0;

  nlohmann::json to_json() const;
  static LossReport from_json(const nlohmann::json& j);
};

// Weighted sum over `terms` ("cdt", "sm", "fx", "fy", "corr", "ms"; others are
// carried along unweighted). Terms named in `ablated` must be absent.
LossReport full_objective(const std::map<std::string, double>& terms,
                          const LossWeights& weights, int64_t step,
                          const std::set<std::string>& ablated = {});

// Same weighting over live tensors, for back-propagation.
torch::Tensor weighted_objective(const std::map<std::string, torch::Tensor>& terms,
                                 const LossWeights& weights, int64_t step);

}  // namespace jointstereo
