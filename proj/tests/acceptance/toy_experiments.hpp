#pragma once

// Desk-scale toy experiments shared by the acceptance runner: source-only
// baseline, full three-stage training, the L_fx ablation and the mode-seeking
// comparison, all on procedurally generated data with a photometric shift.

#include <cstdint>
#include <string>
#include <vector>

#include "jointstereo/toy.hpp"
#include "jointstereo/training.hpp"

namespace jointstereo::acceptance {

struct ToyExperimentConfig {
  int num_pairs = 100;
  int heldout_pairs = 40;
  int height = 64;
  int width = 128;
  int max_disparity = 8;
  ShiftProfile shift = ShiftProfile::standard();
  int translation_epochs = 5;
  int stereo_epochs = 30;
  int joint_epochs = 3;
  int stereo_batch_size = 1;
  int generator_channels = 8;
  std::string scratch_dir = "/tmp";

  // Overrides from JOINTSTEREO_TOY_* environment variables, for tuning runs.
  static ToyExperimentConfig from_environment();
  std::string describe() const;
};

struct SeedOutcome {
  uint64_t seed = 0;
  double baseline_epe = 0;   // matcher trained on raw source only
  double full_epe = 0;       // three-stage training, full objective
  double without_fx_epe = 0; // three-stage training without L_fx
  double seconds = 0;
};

struct ModeSeekingOutcome {
  double diversity_with_ms = 0;     // mean-L1 between G_x2y outputs, two noise seeds
  double diversity_without_ms = 0;  // same, lambda_ms = 0 in the joint phase
};

class ToyExperiment {
 public:
  explicit ToyExperiment(ToyExperimentConfig config) : config_(std::move(config)) {}

  // Runs baseline, full and w/o-L_fx training for one seed. When
  // `mode_seeking` is non-null the joint phase is also rerun from the same
  // warm-up checkpoint with lambda_ms = 0.
  SeedOutcome run_seed(uint64_t seed, ModeSeekingOutcome* mode_seeking = nullptr) const;

  TrainingConfig training_config(uint64_t seed) const;
  ToyConfig toy_config(uint64_t seed, bool heldout) const;

 private:
  ToyExperimentConfig config_;
};

// Mean-L1 between G_x2y outputs for two noise seeds over a dataset.
double translation_diversity(Generator& g_x2y, const Dataset& source, uint64_t seed_a,
                             uint64_t seed_b);

// Target-domain EPE of a matcher over the held-out set.
double target_epe(const StereoMatcher& matcher, const Dataset& target);

}  // namespace jointstereo::acceptance
