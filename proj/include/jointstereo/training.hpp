#pragma once

// Two-stage schedule: translation warm-up (cycle-consistent translation plus
// synthetic feature re-projection), stereo warm-up on translated synthetic
// pairs, then joint alternating optimization of
//   max_{D_x, D_y} min_{F, G_x2y, G_y2x} L.
// Each joint iteration runs a discriminator step, a generator step and a
// matcher step, in that order; within a step only that group's parameters
// receive gradient or change.

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "jointstereo/data.hpp"
#include "jointstereo/evaluation.hpp"
#include "jointstereo/losses.hpp"
#include "jointstereo/networks.hpp"

namespace jointstereo {

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double learning_rate = 1e-4;

  static OptimizerConfig translation() { return {0.5, 0.999, 2e-4}; }
  static OptimizerConfig stereo() { return {0.9, 0.999, 1e-4}; }
  bool operator==(const OptimizerConfig&) const = default;
};

// Objective terms that can be switched off for ablation runs.
struct Ablation {
  bool fx = false, fy = false, corr = false, ms = false;

  std::set<std::string> terms() const;
  // "full" or e.g. "w/o L_fx, w/o L_corr".
  std::string tag() const;
  // Accepts "fx", "fy", "corr", "ms" (comma separated).
  static Ablation parse(const std::string& list);
  bool operator==(const Ablation&) const = default;
};

struct TrainingConfig {
  uint64_t seed = 0;
  GeneratorSpec generator;  // accepts_noise is set per direction
  DiscriminatorSpec discriminator;
  MatcherSpec matcher;
  OptimizerConfig translation_optimizer = OptimizerConfig::translation();
  OptimizerConfig stereo_optimizer = OptimizerConfig::stereo();
  LossWeights weights;
  AdversarialMode adversarial_mode = AdversarialMode::kLog;
  int warmup_translation_epochs = 10;
  int warmup_stereo_epochs = 50;
  int joint_epochs = 10;
  Ablation ablation;
  double gradient_clip_norm = 10.0;
  int stereo_loss_levels = 0;             // 0 = every pyramid level
  bool generator_gradient_under_fy = false;
  // Stereo warm-up trains on G_x2y translations of the synthetic pairs. When
  // false it trains on the raw synthetic images (source-only baseline).
  bool translate_for_stereo = true;
  int stereo_batch_size = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainingConfig& c);
void from_json(const nlohmann::json& j, TrainingConfig& c);

enum class Phase { kWarmupTranslation, kWarmupStereo, kJoint };
std::string to_string(Phase phase);
Phase parse_phase(const std::string& name);

enum class StepKind { kDiscriminator, kGenerator, kMatcher };
std::string to_string(StepKind kind);

struct PhaseProgress {
  int64_t epoch = 0;          // completed epochs
  int64_t step_in_epoch = 0;  // iterations done in the current epoch
  int64_t global_step = 0;    // iterations done in this phase
  bool complete = false;
};

struct Networks {
  Generator g_x2y{nullptr};
  Generator g_y2x{nullptr};
  Discriminator d_x{nullptr};
  Discriminator d_y{nullptr};
  StereoMatcher matcher{nullptr};

  // Seeds each network's initialization from the "init" sub-stream.
  static Networks create(const TrainingConfig& config);
};

struct TrainingHooks {
  // Called around every optimizer step (before == true, then false).
  std::function<void(Phase, StepKind, bool before)> on_step;
  // Called with every per-iteration log record.
  std::function<void(const nlohmann::json&)> on_record;
};

class TrainingEngine {
 public:
  TrainingEngine(TrainingConfig config, Dataset synthetic, Dataset real);

  // Each stage resumes where its progress left off and is a no-op once
  // complete. Returns false if a stop was requested before completion.
  bool warmup_translation(std::optional<int> epochs = std::nullopt);
  bool warmup_stereo(std::optional<int> epochs = std::nullopt);
  // Requires both warm-ups to be complete (ConfigError otherwise).
  bool joint_train(std::optional<int> epochs = std::nullopt);
  bool run_all();

  // Stop (after checkpointing nothing) once this many iterations have run in
  // this engine's lifetime, counted across phases.
  void stop_after(int64_t iterations) { stop_after_ = iterations; }
  bool stopped() const { return stopped_; }

  void save_checkpoint(const std::string& path) const;
  // Restores networks, optimizer moments, progress counters and config.
  // Throws IoError / FormatError.
  void load_checkpoint(const std::string& path);
  static TrainingEngine resume(const std::string& path, Dataset synthetic, Dataset real);

  // Where a diagnostic checkpoint goes when a loss turns non-finite.
  void set_diagnostic_path(std::string path) { diagnostic_path_ = std::move(path); }
  void set_hooks(TrainingHooks hooks) { hooks_ = std::move(hooks); }
  // Adjusts "chosen at construction" fields for subsequent stages (epoch
  // counts, ablations, weights); networks and optimizers are untouched.
  void update_config(const TrainingConfig& config);

  const TrainingConfig& config() const { return config_; }
  Networks& networks() { return nets_; }
  const Networks& networks() const { return nets_; }
  const PhaseProgress& progress(Phase phase) const { return progress_.at(phase); }
  const std::vector<nlohmann::json>& log() const { return log_; }
  // λ_ms used by joint iteration `step`.
  double mode_seeking_weight(int64_t step) const;
  int64_t joint_total_steps() const;

  torch::optim::Adam& generator_optimizer() { return *opt_generators_; }
  torch::optim::Adam& discriminator_optimizer() { return *opt_discriminators_; }
  torch::optim::Adam& matcher_optimizer() { return *opt_matcher_; }

 private:
  struct RealPair {
    torch::Tensor left, right;
  };

  bool run_phase(Phase phase, int epochs);
  void iterate(Phase phase, int64_t epoch, int64_t step_in_epoch, int64_t global_step);
  RealPair real_pair(Phase phase, int64_t epoch, int64_t step_in_epoch) const;
  StereoSample synthetic_sample(Phase phase, int64_t epoch, int64_t index_in_epoch,
                                int64_t global_step) const;
  NoiseMap noise(Phase phase, int64_t global_step, uint64_t slot, int64_t batch, int64_t h,
                 int64_t w) const;

  double discriminator_step(Phase phase, const torch::Tensor& x, const torch::Tensor& y,
                            const NoiseMap& z);
  std::map<std::string, double> generator_step(Phase phase, int64_t global_step,
                                               const torch::Tensor& x, const torch::Tensor& y,
                                               const DisparityMap& gt);
  std::map<std::string, double> matcher_step(Phase phase, int64_t global_step,
                                             const torch::Tensor& x, const torch::Tensor& y,
                                             const DisparityMap& gt);
  void warmup_stereo_iteration(int64_t epoch, int64_t step_in_epoch, int64_t global_step);

  void record(Phase phase, int64_t epoch, int64_t global_step,
              const std::map<std::string, double>& terms);
  void check_finite(Phase phase, int64_t global_step,
                    const std::map<std::string, double>& terms) const;
  void notify(Phase phase, StepKind kind, bool before) const;
  void build_optimizers();

  TrainingConfig config_;
  Dataset synthetic_;
  Dataset real_;
  Networks nets_;
  std::unique_ptr<torch::optim::Adam> opt_generators_;
  std::unique_ptr<torch::optim::Adam> opt_discriminators_;
  std::unique_ptr<torch::optim::Adam> opt_matcher_;
  std::map<Phase, PhaseProgress> progress_;
  std::vector<nlohmann::json> log_;
  TrainingHooks hooks_;
  std::string diagnostic_path_ = "diagnostic.ckpt";
  int64_t stop_after_ = -1;
  int64_t iterations_run_ = 0;
  bool stopped_ = false;
};

// Networks stored in a training-state checkpoint; optionally returns its
// config. Throws IoError / FormatError.
Networks load_networks(const std::string& path, TrainingConfig* config = nullptr);

// Full-resolution predictor for `evaluate`; pads inputs up to the matcher's
// stride and crops the result back.
Predictor matcher_predictor(StereoMatcher matcher);

// Sets the intra-op thread count from JOINTSTEREO_THREADS (default 1) and
// returns the compute device named by JOINTSTEREO_DEVICE (default "cpu").
torch::Device configure_compute();

}  // namespace jointstereo
