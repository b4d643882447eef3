#include "jointstereo/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <iostream>
#include <random>
#include <sstream>

#include "jointstereo/error.hpp"
#include "jointstereo/seeding.hpp"
#include "jointstereo/tensor_archive.hpp"

namespace jointstereo {

namespace F = torch::nn::functional;

// ---------------------------------------------------------------------------
// Configuration

std::set<std::string> Ablation::terms() const {
  std::set<std::string> out;
  if (fx) out.insert("fx");
  if (fy) out.insert("fy");
  if (corr) out.insert("corr");
  if (ms) out.insert("ms");
  return out;
}

std::string Ablation::tag() const {
  const auto names = terms();
  if (names.empty()) return "full";
  std::string tag;
  for (const auto& name : {"corr", "fx", "fy", "ms"}) {
    if (!names.contains(name)) continue;
    if (!tag.empty()) tag += ", ";
    tag += std::string("w/o L_") + name;
  }
  return tag;
}

Ablation Ablation::parse(const std::string& list) {
  Ablation a;
  std::stringstream items(list);
  std::string item;
  while (std::getline(items, item, ',')) {
    if (item.empty()) continue;
    if (item == "fx") a.fx = true;
    else if (item == "fy") a.fy = true;
    else if (item == "corr") a.corr = true;
    else if (item == "ms") a.ms = true;
    else throw ConfigError("unknown ablation '" + item + "' (expected fx, fy, corr, ms)");
  }
  return a;
}

void TrainingConfig::validate() const {
  auto config_check = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  try {
    generator.validate();
    discriminator.validate();
    matcher.validate();
    weights.validate();
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
  for (const auto* o : {&translation_optimizer, &stereo_optimizer}) {
    config_check(o->learning_rate > 0 && o->beta1 >= 0 && o->beta1 < 1 && o->beta2 >= 0 &&
                     o->beta2 < 1,
                 "optimizer: need lr > 0 and betas in [0, 1)");
  }
  config_check(warmup_translation_epochs >= 0 && warmup_stereo_epochs >= 0 && joint_epochs >= 0,
               "epoch counts must be non-negative");
  config_check(gradient_clip_norm > 0, "gradient_clip_norm must be positive");
  config_check(stereo_loss_levels >= 0, "stereo_loss_levels must be non-negative");
  config_check(stereo_batch_size >= 1, "stereo_batch_size must be positive");
}

namespace {

nlohmann::json optimizer_to_json(const OptimizerConfig& o) {
  return {{"beta1", o.beta1}, {"beta2", o.beta2}, {"learning_rate", o.learning_rate}};
}

OptimizerConfig optimizer_from_json(const nlohmann::json& j, OptimizerConfig d) {
  d.beta1 = j.value("beta1", d.beta1);
  d.beta2 = j.value("beta2", d.beta2);
  d.learning_rate = j.value("learning_rate", d.learning_rate);
  return d;
}

}  // namespace

void to_json(nlohmann::json& j, const TrainingConfig& c) {
  j = {{"seed", c.seed},
       {"generator", c.generator},
       {"discriminator", c.discriminator},
       {"matcher", c.matcher},
       {"translation_optimizer", optimizer_to_json(c.translation_optimizer)},
       {"stereo_optimizer", optimizer_to_json(c.stereo_optimizer)},
       {"weights", c.weights},
       {"adversarial_mode", to_string(c.adversarial_mode)},
       {"warmup_translation_epochs", c.warmup_translation_epochs},
       {"warmup_stereo_epochs", c.warmup_stereo_epochs},
       {"joint_epochs", c.joint_epochs},
       {"ablate", c.ablation.terms()},
       {"gradient_clip_norm", c.gradient_clip_norm},
       {"stereo_loss_levels", c.stereo_loss_levels},
       {"generator_gradient_under_fy", c.generator_gradient_under_fy},
       {"translate_for_stereo", c.translate_for_stereo},
       {"stereo_batch_size", c.stereo_batch_size}};
}

void from_json(const nlohmann::json& j, TrainingConfig& c) {
  const TrainingConfig d;
  c.seed = j.value("seed", d.seed);
  c.generator = j.value("generator", d.generator);
  c.discriminator = j.value("discriminator", d.discriminator);
  c.matcher = j.value("matcher", d.matcher);
  c.translation_optimizer = optimizer_from_json(
      j.value("translation_optimizer", nlohmann::json::object()), d.translation_optimizer);
  c.stereo_optimizer =
      optimizer_from_json(j.value("stereo_optimizer", nlohmann::json::object()), d.stereo_optimizer);
  c.weights = j.value("weights", d.weights);
  try {
    c.adversarial_mode = parse_adversarial_mode(j.value("adversarial_mode", std::string("log")));
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
  c.warmup_translation_epochs = j.value("warmup_translation_epochs", d.warmup_translation_epochs);
  c.warmup_stereo_epochs = j.value("warmup_stereo_epochs", d.warmup_stereo_epochs);
  c.joint_epochs = j.value("joint_epochs", d.joint_epochs);
  c.ablation = Ablation{};
  for (const auto& name : j.value("ablate", std::vector<std::string>{})) {
    const auto one = Ablation::parse(name);
    c.ablation.fx |= one.fx;
    c.ablation.fy |= one.fy;
    c.ablation.corr |= one.corr;
    c.ablation.ms |= one.ms;
  }
  c.gradient_clip_norm = j.value("gradient_clip_norm", d.gradient_clip_norm);
  c.stereo_loss_levels = j.value("stereo_loss_levels", d.stereo_loss_levels);
  c.generator_gradient_under_fy =
      j.value("generator_gradient_under_fy", d.generator_gradient_under_fy);
  c.translate_for_stereo = j.value("translate_for_stereo", d.translate_for_stereo);
  c.stereo_batch_size = j.value("stereo_batch_size", d.stereo_batch_size);
}

std::string to_string(Phase phase) {
  switch (phase) {
    case Phase::kWarmupTranslation: return "warmup-translation";
    case Phase::kWarmupStereo: return "warmup-stereo";
    case Phase::kJoint: return "joint";
  }
  return "?";
}

Phase parse_phase(const std::string& name) {
  if (name == "warmup-translation") return Phase::kWarmupTranslation;
  if (name == "warmup-stereo") return Phase::kWarmupStereo;
  if (name == "joint") return Phase::kJoint;
  throw ConfigError("unknown phase '" + name + "'");
}

std::string to_string(StepKind kind) {
  switch (kind) {
    case StepKind::kDiscriminator: return "D";
    case StepKind::kGenerator: return "G";
    case StepKind::kMatcher: return "F";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Networks

Networks Networks::create(const TrainingConfig& config) {
  auto seeded = [&](uint64_t id) { torch::manual_seed(derive_seed(config.seed, "init", {id})); };
  GeneratorSpec forward_spec = config.generator;
  forward_spec.accepts_noise = true;
  GeneratorSpec backward_spec = config.generator;
  backward_spec.accepts_noise = false;

  Networks nets;
  seeded(0);
  nets.g_x2y = Generator(forward_spec);
  seeded(1);
  nets.g_y2x = Generator(backward_spec);
  seeded(2);
  nets.d_x = Discriminator(config.discriminator);
  seeded(3);
  nets.d_y = Discriminator(config.discriminator);
  seeded(4);
  nets.matcher = StereoMatcher(config.matcher);
  return nets;
}

namespace {

void set_trainable(torch::nn::Module& net, bool trainable) {
  for (auto& p : net.parameters()) p.set_requires_grad(trainable);
}

std::vector<torch::Tensor> concat_parameters(std::initializer_list<torch::nn::Module*> nets) {
  std::vector<torch::Tensor> out;
  for (auto* net : nets) {
    auto p = net->parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

std::vector<FeatureMap> batch_item(const std::vector<FeatureMap>& maps, int64_t index) {
  std::vector<FeatureMap> out;
  out.reserve(maps.size());
  for (const auto& m : maps) out.push_back(FeatureMap{m.data.narrow(0, index, 1), m.scale});
  return out;
}

StereoOutput batch_item(const StereoOutput& output, int64_t index) {
  StereoOutput out;
  for (const auto& d : output.disparities) {
    out.disparities.push_back(
        DisparityMap{d.values.narrow(0, index, 1), d.valid.narrow(0, index, 1), d.scale});
  }
  out.correlation_features = batch_item(output.correlation_features, index);
  return out;
}

double value_of(const torch::Tensor& t) { return t.detach().item<double>(); }

}  // namespace

// ---------------------------------------------------------------------------
// Engine

TrainingEngine::TrainingEngine(TrainingConfig config, Dataset synthetic, Dataset real)
    : config_(std::move(config)), synthetic_(std::move(synthetic)) {
  config_.validate();
  if (synthetic_.empty()) throw ConfigError("training: synthetic dataset is empty");
  if (real.empty()) throw ConfigError("training: real dataset is empty");
  for (const auto& s : synthetic_.samples()) {
    if (!s.disparity) {
      throw ConfigError("training: synthetic sample '" + s.source_id + "' has no disparity");
    }
  }
  // The real domain is unsupervised even if ground truth was loaded.
  std::vector<StereoSample> real_samples = real.samples();
  for (auto& s : real_samples) s.disparity.reset();
  real_ = Dataset(Domain::kReal, std::move(real_samples), real.sampling_rules());

  nets_ = Networks::create(config_);
  build_optimizers();
  for (auto phase : {Phase::kWarmupTranslation, Phase::kWarmupStereo, Phase::kJoint}) {
    progress_[phase] = PhaseProgress{};
  }
}

void TrainingEngine::build_optimizers() {
  auto adam = [](std::vector<torch::Tensor> params, const OptimizerConfig& o) {
    return std::make_unique<torch::optim::Adam>(
        std::move(params),
        torch::optim::AdamOptions(o.learning_rate).betas({o.beta1, o.beta2}));
  };
  opt_generators_ = adam(concat_parameters({nets_.g_x2y.ptr().get(), nets_.g_y2x.ptr().get()}),
                         config_.translation_optimizer);
  opt_discriminators_ = adam(concat_parameters({nets_.d_x.ptr().get(), nets_.d_y.ptr().get()}),
                             config_.translation_optimizer);
  opt_matcher_ = adam(nets_.matcher->parameters(), config_.stereo_optimizer);
}

void TrainingEngine::update_config(const TrainingConfig& config) {
  config.validate();
  JS_REQUIRE(config.seed == config_.seed && config.generator == config_.generator &&
                 config.discriminator == config_.discriminator &&
                 config.matcher == config_.matcher,
             "update_config: seed and architecture cannot change");
  JS_REQUIRE(config.translation_optimizer == config_.translation_optimizer &&
                 config.stereo_optimizer == config_.stereo_optimizer,
             "update_config: optimizer settings cannot change");
  config_ = config;
}

int64_t TrainingEngine::joint_total_steps() const {
  return static_cast<int64_t>(config_.joint_epochs) * static_cast<int64_t>(synthetic_.size());
}

double TrainingEngine::mode_seeking_weight(int64_t step) const {
  LossWeights w = config_.weights;
  // The last joint iteration uses exactly zero.
  w.ms_decay_steps = std::max<int64_t>(1, joint_total_steps() - 1);
  return w.mode_seeking_weight(step);
}

bool TrainingEngine::warmup_translation(std::optional<int> epochs) {
  return run_phase(Phase::kWarmupTranslation, epochs.value_or(config_.warmup_translation_epochs));
}

bool TrainingEngine::warmup_stereo(std::optional<int> epochs) {
  if (config_.translate_for_stereo && !progress_.at(Phase::kWarmupTranslation).complete) {
    throw ConfigError("warmup-stereo needs warmed-up translation networks");
  }
  return run_phase(Phase::kWarmupStereo, epochs.value_or(config_.warmup_stereo_epochs));
}

bool TrainingEngine::joint_train(std::optional<int> epochs) {
  if (!progress_.at(Phase::kWarmupTranslation).complete ||
      !progress_.at(Phase::kWarmupStereo).complete) {
    throw ConfigError("joint training needs both warm-up stages to be complete");
  }
  if (epochs) config_.joint_epochs = *epochs;
  return run_phase(Phase::kJoint, config_.joint_epochs);
}

bool TrainingEngine::run_all() {
  return warmup_translation() && warmup_stereo() && joint_train();
}

bool TrainingEngine::run_phase(Phase phase, int epochs) {
  auto& p = progress_.at(phase);
  if (p.complete && p.epoch >= epochs) return true;
  const int64_t n = static_cast<int64_t>(synthetic_.size());
  const int64_t per_epoch =
      phase == Phase::kWarmupStereo ? (n + config_.stereo_batch_size - 1) / config_.stereo_batch_size
                                    : n;
  while (p.epoch < epochs) {
    while (p.step_in_epoch < per_epoch) {
      if (stop_after_ >= 0 && iterations_run_ >= stop_after_) {
        stopped_ = true;
        return false;
      }
      if (phase == Phase::kWarmupStereo) {
        warmup_stereo_iteration(p.epoch, p.step_in_epoch, p.global_step);
      } else {
        iterate(phase, p.epoch, p.step_in_epoch, p.global_step);
      }
      ++p.step_in_epoch;
      ++p.global_step;
      ++iterations_run_;
    }
    ++p.epoch;
    p.step_in_epoch = 0;
  }
  p.complete = true;
  return true;
}

// ---------------------------------------------------------------------------
// Sampling

StereoSample TrainingEngine::synthetic_sample(Phase phase, int64_t epoch, int64_t index_in_epoch,
                                              int64_t global_step) const {
  const auto phase_id = static_cast<uint64_t>(phase);
  const auto order = epoch_order(synthetic_.size(),
                                 derive_seed(config_.seed, "data", {phase_id, uint64_t(epoch)}));
  std::mt19937_64 crop(derive_seed(config_.seed, "crop", {phase_id, uint64_t(global_step)}));
  const auto& sample = synthetic_[order[static_cast<size_t>(index_in_epoch) % order.size()]];
  return preprocess(sample, synthetic_.sampling_rules(), &crop);
}

TrainingEngine::RealPair TrainingEngine::real_pair(Phase phase, int64_t epoch,
                                                   int64_t step_in_epoch) const {
  const auto phase_id = static_cast<uint64_t>(phase);
  const auto order = epoch_order(
      real_.size(), derive_seed(config_.seed, "data-real", {phase_id, uint64_t(epoch)}));
  std::mt19937_64 crop(
      derive_seed(config_.seed, "crop-real", {phase_id, uint64_t(epoch), uint64_t(step_in_epoch)}));
  const auto sample = preprocess(real_[order[static_cast<size_t>(step_in_epoch) % order.size()]],
                                 real_.sampling_rules(), &crop);
  return RealPair{sample.left, sample.right};
}

NoiseMap TrainingEngine::noise(Phase phase, int64_t global_step, uint64_t slot, int64_t batch,
                               int64_t h, int64_t w) const {
  return NoiseMap::sample(
      derive_seed(config_.seed, "noise", {static_cast<uint64_t>(phase), uint64_t(global_step), slot}),
      batch, h, w);
}

// ---------------------------------------------------------------------------
// Steps

void TrainingEngine::notify(Phase phase, StepKind kind, bool before) const {
  if (hooks_.on_step) hooks_.on_step(phase, kind, before);
}

void TrainingEngine::check_finite(Phase phase, int64_t global_step,
                                  const std::map<std::string, double>& terms) const {
  for (const auto& [name, value] : terms) {
    if (std::isfinite(value)) continue;
    std::string where = to_string(phase) + " step " + std::to_string(global_step);
    try {
      save_checkpoint(diagnostic_path_);
      where += "; diagnostic checkpoint written to " + diagnostic_path_;
    } catch (const std::exception& e) {
      where += "; diagnostic checkpoint failed: " + std::string(e.what());
    }
    throw NumericalAbort("non-finite loss term '" + name + "' at " + where);
  }
}

void TrainingEngine::iterate(Phase phase, int64_t epoch, int64_t step_in_epoch,
                             int64_t global_step) {
  const auto sample = synthetic_sample(phase, epoch, step_in_epoch, global_step);
  const auto x = torch::stack({sample.left, sample.right});
  const auto real = real_pair(phase, epoch, step_in_epoch);
  const auto y = torch::stack({real.left, real.right});
  const auto& gt = *sample.disparity;

  std::map<std::string, double> terms;
  terms["d_adv"] =
      discriminator_step(phase, x, y, noise(phase, global_step, 0, 2, x.size(2), x.size(3)));
  auto g_terms = generator_step(phase, global_step, x, y, gt);
  terms.insert(g_terms.begin(), g_terms.end());
  if (phase == Phase::kJoint) {
    auto f_terms = matcher_step(phase, global_step, x, y, gt);
    terms.insert(f_terms.begin(), f_terms.end());
  }
  record(phase, epoch, global_step, terms);
}

double TrainingEngine::discriminator_step(Phase phase, const torch::Tensor& x,
                                          const torch::Tensor& y, const NoiseMap& z) {
  notify(phase, StepKind::kDiscriminator, true);
  set_trainable(*nets_.g_x2y, false);
  set_trainable(*nets_.g_y2x, false);
  set_trainable(*nets_.matcher, false);
  set_trainable(*nets_.d_x, true);
  set_trainable(*nets_.d_y, true);

  torch::Tensor fake_y, fake_x;
  {
    torch::NoGradGuard no_grad;
    fake_y = nets_.g_x2y->forward(x, z).image;
    fake_x = nets_.g_y2x->forward(y).image;
  }
  const auto mode = config_.adversarial_mode;
  auto objective =
      adversarial_loss(nets_.d_y->forward(y).data, nets_.d_y->forward(fake_y).data,
                       AdversarialSide::kDiscriminator, mode) +
      adversarial_loss(nets_.d_x->forward(x).data, nets_.d_x->forward(fake_x).data,
                       AdversarialSide::kDiscriminator, mode);
  const double value = value_of(objective);
  check_finite(phase, progress_.at(phase).global_step, {{"d_adv", value}});

  opt_discriminators_->zero_grad();
  (-objective).backward();
  opt_discriminators_->step();
  notify(phase, StepKind::kDiscriminator, false);
  return value;
}

std::map<std::string, double> TrainingEngine::generator_step(Phase phase, int64_t global_step,
                                                             const torch::Tensor& x,
                                                             const torch::Tensor& y,
                                                             const DisparityMap& gt) {
  notify(phase, StepKind::kGenerator, true);
  set_trainable(*nets_.d_x, false);
  set_trainable(*nets_.d_y, false);
  set_trainable(*nets_.matcher, false);
  set_trainable(*nets_.g_x2y, true);
  set_trainable(*nets_.g_y2x, true);

  const bool joint = phase == Phase::kJoint;
  const auto& ablate = config_.ablation;
  const auto mode = config_.adversarial_mode;
  const int64_t h = x.size(2), w = x.size(3);

  auto z_forward = noise(phase, global_step, 1, 2, h, w);
  auto translated = nets_.g_x2y->forward(x, z_forward);
  auto back = nets_.g_y2x->forward(translated.image);
  auto to_synthetic = nets_.g_y2x->forward(y);
  auto reconstructed_y =
      nets_.g_x2y->forward(to_synthetic.image, noise(phase, global_step, 2, 2, y.size(2), y.size(3)));

  auto adv_x2y = adversarial_loss({}, nets_.d_y->forward(translated.image).data,
                                  AdversarialSide::kGenerator, mode);
  auto adv_y2x = adversarial_loss({}, nets_.d_x->forward(to_synthetic.image).data,
                                  AdversarialSide::kGenerator, mode);
  auto cyc = cycle_loss(x, back.image, y, reconstructed_y.image);

  std::map<std::string, torch::Tensor> objective;
  objective["cdt"] = cycle_domain_translation_loss(adv_x2y, adv_y2x, cyc, config_.weights);
  if (!ablate.fx) {
    objective["fx"] = feature_reprojection_synthetic(
        batch_item(translated.features, 0), batch_item(translated.features, 1),
        batch_item(back.features, 0), batch_item(back.features, 1), gt);
  }
  if (joint && !ablate.corr) {
    const auto yl = y.narrow(0, 0, 1), yr = y.narrow(0, 1, 1);
    const auto yl2 = reconstructed_y.image.narrow(0, 0, 1);
    const auto yr2 = reconstructed_y.image.narrow(0, 1, 1);
    std::vector<FeatureMap> reference;
    {
      torch::NoGradGuard no_grad;
      reference = nets_.matcher->forward(yl, yr).correlation_features;
    }
    auto crossed = nets_.matcher->forward(torch::cat({yl2, yl, yl2}), torch::cat({yr, yr2, yr2}));
    objective["corr"] = correlation_consistency_loss(
        reference, batch_item(crossed.correlation_features, 0),
        batch_item(crossed.correlation_features, 1), batch_item(crossed.correlation_features, 2));
  }
  if (joint && !ablate.ms) {
    NoiseMap z1{z_forward.data.narrow(0, 0, 1), z_forward.seed};
    auto z2 = noise(phase, global_step, 3, 1, h, w);
    auto second = nets_.g_x2y->forward(x.narrow(0, 0, 1), z2);
    objective["ms"] = mode_seeking_loss(translated.image.narrow(0, 0, 1), second.image, z1, z2);
  }
  if (joint && !ablate.fy && config_.generator_gradient_under_fy) {
    StereoOutput estimate;
    {
      torch::NoGradGuard no_grad;
      estimate = nets_.matcher->forward(y.narrow(0, 0, 1), y.narrow(0, 1, 1));
    }
    RealReprojectionOptions options;
    options.generator_gradient = true;
    objective["fy"] = feature_reprojection_real(
        batch_item(to_synthetic.features, 0), batch_item(to_synthetic.features, 1),
        batch_item(reconstructed_y.features, 0), batch_item(reconstructed_y.features, 1),
        estimate, options);
  }

  LossWeights weights = config_.weights;
  weights.lambda_ms = joint ? mode_seeking_weight(global_step) : 0.0;
  weights.ms_decay_steps = 0;
  auto total = weighted_objective(objective, weights, global_step);

  std::map<std::string, double> values{{"adv_x2y", value_of(adv_x2y)},
                                       {"adv_y2x", value_of(adv_y2x)},
                                       {"cyc", value_of(cyc)}};
  for (const auto& [name, t] : objective) {
    values[name == "fy" ? "fy_generator" : name] = value_of(t);
  }
  check_finite(phase, global_step, values);

  opt_generators_->zero_grad();
  total.backward();
  torch::nn::utils::clip_grad_norm_(opt_generators_->param_groups()[0].params(),
                                    config_.gradient_clip_norm);
  opt_generators_->step();
  notify(phase, StepKind::kGenerator, false);
  return values;
}

std::map<std::string, double> TrainingEngine::matcher_step(Phase phase, int64_t global_step,
                                                           const torch::Tensor& x,
                                                           const torch::Tensor& y,
                                                           const DisparityMap& gt) {
  notify(phase, StepKind::kMatcher, true);
  set_trainable(*nets_.g_x2y, false);
  set_trainable(*nets_.g_y2x, false);
  set_trainable(*nets_.d_x, false);
  set_trainable(*nets_.d_y, false);
  set_trainable(*nets_.matcher, true);

  const bool use_fy = !config_.ablation.fy && !config_.generator_gradient_under_fy;
  torch::Tensor translated;
  TranslationOutput to_synthetic, reconstructed;
  {
    torch::NoGradGuard no_grad;
    translated =
        nets_.g_x2y->forward(x, noise(phase, global_step, 4, 2, x.size(2), x.size(3))).image;
    if (use_fy) {
      to_synthetic = nets_.g_y2x->forward(y);
      reconstructed = nets_.g_x2y->forward(
          to_synthetic.image, noise(phase, global_step, 5, 2, y.size(2), y.size(3)));
    }
  }

  std::map<std::string, torch::Tensor> objective;
  const bool same_size = x.sizes() == y.sizes();
  StereoOutput synthetic_estimate, real_estimate;
  if (use_fy && same_size) {
    auto both = nets_.matcher->forward(torch::cat({translated.narrow(0, 0, 1), y.narrow(0, 0, 1)}),
                                       torch::cat({translated.narrow(0, 1, 1), y.narrow(0, 1, 1)}));
    synthetic_estimate = batch_item(both, 0);
    real_estimate = batch_item(both, 1);
  } else {
    synthetic_estimate =
        nets_.matcher->forward(translated.narrow(0, 0, 1), translated.narrow(0, 1, 1));
    if (use_fy) real_estimate = nets_.matcher->forward(y.narrow(0, 0, 1), y.narrow(0, 1, 1));
  }

  StereoLossOptions sm_options;
  sm_options.levels = config_.stereo_loss_levels;
  objective["sm"] = stereo_matching_loss(synthetic_estimate, gt, sm_options).value;
  if (use_fy) {
    objective["fy"] = feature_reprojection_real(
        batch_item(to_synthetic.features, 0), batch_item(to_synthetic.features, 1),
        batch_item(reconstructed.features, 0), batch_item(reconstructed.features, 1),
        real_estimate);
  }
  auto total = weighted_objective(objective, config_.weights, global_step);

  std::map<std::string, double> values;
  for (const auto& [name, t] : objective) values[name] = value_of(t);
  check_finite(phase, global_step, values);

  opt_matcher_->zero_grad();
  total.backward();
  torch::nn::utils::clip_grad_norm_(nets_.matcher->parameters(), config_.gradient_clip_norm);
  opt_matcher_->step();
  notify(phase, StepKind::kMatcher, false);
  return values;
}

void TrainingEngine::warmup_stereo_iteration(int64_t epoch, int64_t step_in_epoch,
                                             int64_t global_step) {
  const Phase phase = Phase::kWarmupStereo;
  const int64_t batch = config_.stereo_batch_size;
  const int64_t n = static_cast<int64_t>(synthetic_.size());
  std::vector<torch::Tensor> lefts, rights, values, valid;
  for (int64_t k = step_in_epoch * batch; k < std::min(n, (step_in_epoch + 1) * batch); ++k) {
    auto s = synthetic_sample(phase, epoch, k, global_step * batch + (k - step_in_epoch * batch));
    lefts.push_back(s.left);
    rights.push_back(s.right);
    values.push_back(s.disparity->values[0]);
    valid.push_back(s.disparity->valid[0]);
  }
  auto left = torch::stack(lefts), right = torch::stack(rights);
  DisparityMap gt{torch::stack(values), torch::stack(valid), 1};

  notify(phase, StepKind::kMatcher, true);
  set_trainable(*nets_.g_x2y, false);
  set_trainable(*nets_.g_y2x, false);
  set_trainable(*nets_.d_x, false);
  set_trainable(*nets_.d_y, false);
  set_trainable(*nets_.matcher, true);

  if (config_.translate_for_stereo) {
    torch::NoGradGuard no_grad;
    const int64_t m = left.size(0);
    auto z = noise(phase, global_step, 0, 2 * m, left.size(2), left.size(3));
    auto translated = nets_.g_x2y->forward(torch::cat({left, right}), z).image;
    left = translated.narrow(0, 0, m);
    right = translated.narrow(0, m, m);
  }
  StereoLossOptions options;
  options.levels = config_.stereo_loss_levels;
  auto sm = stereo_matching_loss(nets_.matcher->forward(left, right), gt, options).value;
  std::map<std::string, double> terms{{"sm", value_of(sm)}};
  check_finite(phase, global_step, terms);

  opt_matcher_->zero_grad();
  (config_.weights.lambda_sm * sm).backward();
  torch::nn::utils::clip_grad_norm_(nets_.matcher->parameters(), config_.gradient_clip_norm);
  opt_matcher_->step();
  notify(phase, StepKind::kMatcher, false);
  record(phase, epoch, global_step, terms);
}

void TrainingEngine::record(Phase phase, int64_t epoch, int64_t global_step,
                            const std::map<std::string, double>& terms) {
  LossWeights weights = config_.weights;
  const bool joint = phase == Phase::kJoint;
  if (joint) weights.lambda_ms = mode_seeking_weight(global_step);
  weights.ms_decay_steps = 0;
  const auto report = full_objective(terms, weights, global_step, config_.ablation.terms());

  static const auto start = std::chrono::steady_clock::now();
  nlohmann::json record = report.to_json();
  record["phase"] = to_string(phase);
  record["epoch"] = epoch;
  record["step"] = global_step;
  record["tag"] = config_.ablation.tag();
  if (joint) record["lambda_ms"] = weights.lambda_ms;
  record["wall_time"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  log_.push_back(record);
  if (hooks_.on_record) hooks_.on_record(record);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kStateKind = "training-state";

struct NamedNet {
  const char* prefix;
  torch::nn::Module* net;
};

std::vector<NamedNet> named_networks(const Networks& nets) {
  return {{"g_x2y", nets.g_x2y.ptr().get()},
          {"g_y2x", nets.g_y2x.ptr().get()},
          {"d_x", nets.d_x.ptr().get()},
          {"d_y", nets.d_y.ptr().get()},
          {"matcher", nets.matcher.ptr().get()}};
}

struct OptimizerBinding {
  const char* name;
  torch::optim::Adam* optimizer;
  std::vector<NamedNet> nets;
};

void save_optimizer(TensorArchive& archive, const OptimizerBinding& binding) {
  auto& state = binding.optimizer->state();
  for (const auto& [prefix, net] : binding.nets) {
    for (const auto& item : net->named_parameters()) {
      auto it = state.find(item.value().unsafeGetTensorImpl());
      if (it == state.end()) continue;
      const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
      const std::string key =
          std::string("opt.") + binding.name + "/" + prefix + "." + item.key();
      archive.tensors[key + "/exp_avg"] = s.exp_avg();
      archive.tensors[key + "/exp_avg_sq"] = s.exp_avg_sq();
      archive.tensors[key + "/step"] = torch::tensor({s.step()}, torch::kInt64);
    }
  }
}

void load_optimizer(const TensorArchive& archive, const OptimizerBinding& binding) {
  auto& state = binding.optimizer->state();
  state.clear();
  for (const auto& [prefix, net] : binding.nets) {
    for (const auto& item : net->named_parameters()) {
      const std::string key =
          std::string("opt.") + binding.name + "/" + prefix + "." + item.key();
      if (!archive.tensors.contains(key + "/step")) continue;
      auto s = std::make_unique<torch::optim::AdamParamState>();
      s->step(archive.at(key + "/step").item<int64_t>());
      s->exp_avg(archive.at(key + "/exp_avg").clone());
      s->exp_avg_sq(archive.at(key + "/exp_avg_sq").clone());
      state[item.value().unsafeGetTensorImpl()] = std::move(s);
    }
  }
}

nlohmann::json progress_json(const PhaseProgress& p) {
  return {{"epoch", p.epoch},
          {"step_in_epoch", p.step_in_epoch},
          {"global_step", p.global_step},
          {"complete", p.complete}};
}

PhaseProgress progress_from_json(const nlohmann::json& j) {
  return PhaseProgress{j.at("epoch").get<int64_t>(), j.at("step_in_epoch").get<int64_t>(),
                       j.at("global_step").get<int64_t>(), j.at("complete").get<bool>()};
}

}  // namespace

void TrainingEngine::save_checkpoint(const std::string& path) const {
  TensorArchive archive;
  archive.meta["kind"] = kStateKind;
  archive.meta["config"] = config_;
  for (const auto& [phase, p] : progress_) archive.meta["progress"][to_string(phase)] = progress_json(p);
  for (const auto& [prefix, net] : named_networks(nets_)) {
    for (const auto& item : net->named_parameters()) {
      archive.tensors[std::string(prefix) + "." + item.key()] = item.value();
    }
  }
  const auto nets = named_networks(nets_);
  save_optimizer(archive, {"G", opt_generators_.get(), {nets[0], nets[1]}});
  save_optimizer(archive, {"D", opt_discriminators_.get(), {nets[2], nets[3]}});
  save_optimizer(archive, {"F", opt_matcher_.get(), {nets[4]}});
  archive.save(path);
}

namespace {

TrainingConfig config_from_archive(const TensorArchive& archive, const std::string& path) {
  if (archive.meta.value("kind", std::string{}) != kStateKind) {
    throw FormatError(path + ": not a training-state checkpoint");
  }
  try {
    return archive.meta.at("config").get<TrainingConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": corrupt training config (" + e.what() + ")");
  }
}

Networks networks_from_archive(const TensorArchive& archive, const TrainingConfig& config,
                               const std::string& path) {
  Networks nets = Networks::create(config);
  torch::NoGradGuard no_grad;
  for (const auto& [prefix, net] : named_networks(nets)) {
    for (auto& item : net->named_parameters()) {
      const std::string key = std::string(prefix) + "." + item.key();
      if (!archive.tensors.contains(key)) throw FormatError(path + ": missing tensor '" + key + "'");
      const auto& stored = archive.tensors.at(key);
      if (stored.sizes() != item.value().sizes()) {
        throw FormatError(path + ": tensor '" + key + "' has the wrong shape");
      }
      item.value().copy_(stored);
    }
  }
  return nets;
}

}  // namespace

Networks load_networks(const std::string& path, TrainingConfig* config) {
  const auto archive = TensorArchive::load(path);
  const auto stored = config_from_archive(archive, path);
  if (config != nullptr) *config = stored;
  return networks_from_archive(archive, stored, path);
}

void TrainingEngine::load_checkpoint(const std::string& path) {
  auto archive = TensorArchive::load(path);
  config_ = config_from_archive(archive, path);
  config_.validate();
  nets_ = networks_from_archive(archive, config_, path);
  build_optimizers();
  const auto nets = named_networks(nets_);
  load_optimizer(archive, {"G", opt_generators_.get(), {nets[0], nets[1]}});
  load_optimizer(archive, {"D", opt_discriminators_.get(), {nets[2], nets[3]}});
  load_optimizer(archive, {"F", opt_matcher_.get(), {nets[4]}});
  try {
    for (auto& [phase, p] : progress_) {
      p = progress_from_json(archive.meta.at("progress").at(to_string(phase)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": corrupt progress record (" + e.what() + ")");
  }
  log_.clear();
  iterations_run_ = 0;
  stopped_ = false;
  stop_after_ = -1;
}

TrainingEngine TrainingEngine::resume(const std::string& path, Dataset synthetic, Dataset real) {
  const auto config = config_from_archive(TensorArchive::load(path), path);
  TrainingEngine engine(config, std::move(synthetic), std::move(real));
  engine.load_checkpoint(path);
  return engine;
}

// ---------------------------------------------------------------------------

Predictor matcher_predictor(StereoMatcher matcher) {
  return [matcher](const torch::Tensor& left, const torch::Tensor& right,
                   const StereoSample&) mutable {
    torch::NoGradGuard no_grad;
    const int64_t stride = matcher->spec().total_stride();
    const int64_t h = left.size(2), w = left.size(3);
    const int64_t pad_h = (stride - h % stride) % stride;
    const int64_t pad_w = (stride - w % stride) % stride;
    auto pad = [&](const torch::Tensor& t) {
      if (pad_h == 0 && pad_w == 0) return t;
      return F::pad(t, F::PadFuncOptions({0, pad_w, 0, pad_h}).mode(torch::kReplicate));
    };
    auto out = matcher->forward(pad(left), pad(right)).disparities.front().values;
    return out.narrow(1, 0, h).narrow(2, 0, w).contiguous();
  };
}

torch::Device configure_compute() {
  int threads = 1;
  if (const char* env = std::getenv("JOINTSTEREO_THREADS")) {
    try {
      threads = std::max(1, std::stoi(env));
    } catch (const std::exception&) {
      std::cerr << "warning: ignoring malformed JOINTSTEREO_THREADS='" << env << "'\n";
    }
  }
  torch::set_num_threads(threads);
  const char* device = std::getenv("JOINTSTEREO_DEVICE");
  if (device != nullptr && std::string(device) != "cpu") {
    std::cerr << "warning: device '" << device << "' is not supported by this build; using cpu\n";
  }
  return torch::kCPU;
}

}  // namespace jointstereo
