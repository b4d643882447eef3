#include "jointstereo/losses.hpp"

#include <algorithm>
#include <cmath>

#include "jointstereo/error.hpp"

namespace jointstereo {

namespace F = torch::nn::functional;

namespace {

// Mean absolute difference over channels and the masked pixels. An undefined
// mask selects everything; an empty selection yields a graph-connected zero.
torch::Tensor masked_l1(const torch::Tensor& a, const torch::Tensor& b,
                        const torch::Tensor& mask) {
  JS_REQUIRE(a.sizes() == b.sizes(), "loss: operand shapes differ");
  auto diff = (a - b).abs();
  if (!mask.defined()) return diff.mean();
  auto selected = mask.unsqueeze(1).expand_as(diff);
  const auto count = selected.sum().item<int64_t>();
  if (count == 0) return diff.sum() * 0.0;
  return torch::where(selected, diff, torch::zeros_like(diff)).sum() /
         static_cast<double>(count);
}

void require_paired_taps(const std::vector<FeatureMap>& a, const std::vector<FeatureMap>& b,
                         const char* who) {
  JS_REQUIRE(a.size() == b.size(), std::string(who) + ": tap count mismatch (" +
                                       std::to_string(a.size()) + " vs " +
                                       std::to_string(b.size()) + ")");
  for (size_t i = 0; i < a.size(); ++i) {
    JS_REQUIRE(a[i].scale == b[i].scale && a[i].data.sizes() == b[i].data.sizes(),
               std::string(who) + ": tap " + std::to_string(i) + " shapes differ");
  }
}

torch::Tensor reprojection_term(const FeatureMap& left, const FeatureMap& right,
                                const DisparityMap& disparity) {
  auto warped = inverse_warp(right, disparity);
  auto mask = warp_validity_mask(disparity, right.width());
  return masked_l1(warped.data, left.data, mask);
}

torch::Tensor reprojection_sum(const std::vector<FeatureMap>& forward_left,
                               const std::vector<FeatureMap>& forward_right,
                               const std::vector<FeatureMap>& backward_left,
                               const std::vector<FeatureMap>& backward_right,
                               const std::vector<DisparityMap>& per_tap_disparity) {
  torch::Tensor total;
  for (size_t i = 0; i < forward_left.size(); ++i) {
    auto term = reprojection_term(forward_left[i], forward_right[i], per_tap_disparity[i]) +
                reprojection_term(backward_left[i], backward_right[i], per_tap_disparity[i]);
    total = total.defined() ? total + term : term;
  }
  return total / static_cast<double>(forward_left.size());
}

void require_reprojection_inputs(const std::vector<FeatureMap>& forward_left,
                                 const std::vector<FeatureMap>& forward_right,
                                 const std::vector<FeatureMap>& backward_left,
                                 const std::vector<FeatureMap>& backward_right,
                                 const char* who) {
  JS_REQUIRE(!forward_left.empty(), std::string(who) + ": no taps");
  require_paired_taps(forward_left, forward_right, who);
  require_paired_taps(backward_left, backward_right, who);
  JS_REQUIRE(forward_left.size() == backward_left.size(),
             std::string(who) + ": forward and backward tap counts differ");
  for (size_t i = 0; i < forward_left.size(); ++i) {
    JS_REQUIRE(forward_left[i].scale == backward_left[i].scale,
               std::string(who) + ": forward and backward tap scales differ");
  }
}

}  // namespace

AdversarialMode parse_adversarial_mode(const std::string& name) {
  if (name == "log") return AdversarialMode::kLog;
  if (name == "least_squares") return AdversarialMode::kLeastSquares;
  throw ContractViolation("unknown adversarial mode '" + name + "'");
}

std::string to_string(AdversarialMode mode) {
  return mode == AdversarialMode::kLog ? "log" : "least_squares";
}

torch::Tensor adversarial_loss(const torch::Tensor& on_real, const torch::Tensor& on_fake,
                               AdversarialSide side, AdversarialMode mode) {
  JS_REQUIRE(on_fake.defined(), "adversarial_loss: fake logits required");
  if (side == AdversarialSide::kGenerator) {
    if (mode == AdversarialMode::kLog) return -F::logsigmoid(on_fake).mean();
    return 0.5 * (on_fake - 1.0).pow(2).mean();
  }
  JS_REQUIRE(on_real.defined(), "adversarial_loss: real logits required");
  if (mode == AdversarialMode::kLog) {
    return F::logsigmoid(on_real).mean() + F::logsigmoid(-on_fake).mean();
  }
  return -0.5 * ((on_real - 1.0).pow(2).mean() + on_fake.pow(2).mean());
}

torch::Tensor cycle_loss(const torch::Tensor& x, const torch::Tensor& x_roundtrip,
                         const torch::Tensor& y, const torch::Tensor& y_roundtrip) {
  JS_REQUIRE(x.sizes() == x_roundtrip.sizes(), "cycle_loss: x shapes differ");
  JS_REQUIRE(y.sizes() == y_roundtrip.sizes(), "cycle_loss: y shapes differ");
  return (x_roundtrip - x).abs().mean() + (y_roundtrip - y).abs().mean();
}

StereoLossResult stereo_matching_loss(const StereoOutput& prediction,
                                      const DisparityMap& ground_truth,
                                      const StereoLossOptions& options) {
  JS_REQUIRE(!prediction.disparities.empty(), "stereo_matching_loss: empty pyramid");
  JS_REQUIRE(ground_truth.scale == 1, "stereo_matching_loss: ground truth must be full resolution");
  const auto& finest = prediction.disparities.front();
  JS_REQUIRE(finest.values.sizes() == ground_truth.values.sizes(),
             "stereo_matching_loss: prediction and ground truth shapes differ");
  JS_REQUIRE(options.levels >= 0, "stereo_matching_loss: negative level count");

  const size_t levels = options.levels == 0
                            ? prediction.disparities.size()
                            : std::min<size_t>(options.levels, prediction.disparities.size());
  torch::Tensor total;
  double weight_sum = 0.0;
  double weight = 1.0;
  for (size_t k = 0; k < levels; ++k, weight *= 0.5) {
    const auto& level = prediction.disparities[k];
    auto target = rescale_disparity(ground_truth, level.scale);
    auto valid = target.valid & level.valid;
    if (valid.sum().item<int64_t>() == 0) continue;
    auto term = masked_l1(level.values.unsqueeze(1), target.values.unsqueeze(1).detach(),
                          valid);
    total = total.defined() ? total + weight * term : weight * term;
    weight_sum += weight;
  }
  if (!total.defined()) {
    return {finest.values.sum() * 0.0, true};
  }
  return {total / weight_sum, false};
}

torch::Tensor feature_reprojection_synthetic(const std::vector<FeatureMap>& forward_left,
                                             const std::vector<FeatureMap>& forward_right,
                                             const std::vector<FeatureMap>& backward_left,
                                             const std::vector<FeatureMap>& backward_right,
                                             const DisparityMap& ground_truth) {
  require_reprojection_inputs(forward_left, forward_right, backward_left, backward_right,
                              "feature_reprojection_synthetic");
  JS_REQUIRE(ground_truth.scale == 1,
             "feature_reprojection_synthetic: ground truth must be full resolution");
  DisparityMap constant{ground_truth.values.detach(), ground_truth.valid, 1};
  std::vector<DisparityMap> per_tap;
  for (const auto& tap : forward_left) per_tap.push_back(rescale_disparity(constant, tap.scale));
  return reprojection_sum(forward_left, forward_right, backward_left, backward_right, per_tap);
}

torch::Tensor feature_reprojection_real(const std::vector<FeatureMap>& forward_left,
                                        const std::vector<FeatureMap>& forward_right,
                                        const std::vector<FeatureMap>& backward_left,
                                        const std::vector<FeatureMap>& backward_right,
                                        const StereoOutput& estimate,
                                        const RealReprojectionOptions& options) {
  require_reprojection_inputs(forward_left, forward_right, backward_left, backward_right,
                              "feature_reprojection_real");
  JS_REQUIRE(!estimate.disparities.empty(), "feature_reprojection_real: empty pyramid");

  auto disparity_at = [&](int scale) -> DisparityMap {
    const DisparityMap* finer = nullptr;
    for (const auto& level : estimate.disparities) {
      if (level.scale == scale) return level;
      if (level.scale < scale && scale % level.scale == 0 &&
          (finer == nullptr || level.scale > finer->scale)) {
        finer = &level;
      }
    }
    JS_REQUIRE(options.allow_resample && finer != nullptr,
               "feature_reprojection_real: no pyramid level at scale " +
                   std::to_string(scale));
    return rescale_disparity(*finer, scale);
  };

  std::vector<DisparityMap> per_tap;
  for (const auto& tap : forward_left) per_tap.push_back(disparity_at(tap.scale));

  if (options.generator_gradient) {
    return reprojection_sum(forward_left, forward_right, backward_left, backward_right, per_tap);
  }
  auto detached = [](const std::vector<FeatureMap>& taps) {
    std::vector<FeatureMap> out;
    for (const auto& t : taps) out.push_back(FeatureMap{t.data.detach(), t.scale});
    return out;
  };
  return reprojection_sum(detached(forward_left), detached(forward_right),
                          detached(backward_left), detached(backward_right), per_tap);
}

torch::Tensor correlation_consistency_loss(const std::vector<FeatureMap>& reference,
                                           const std::vector<FeatureMap>& left_reconstructed,
                                           const std::vector<FeatureMap>& right_reconstructed,
                                           const std::vector<FeatureMap>& both_reconstructed) {
  JS_REQUIRE(!reference.empty(), "correlation_consistency_loss: no taps");
  require_paired_taps(reference, left_reconstructed, "correlation_consistency_loss");
  require_paired_taps(reference, right_reconstructed, "correlation_consistency_loss");
  require_paired_taps(reference, both_reconstructed, "correlation_consistency_loss");

  torch::Tensor total;
  for (size_t i = 0; i < reference.size(); ++i) {
    auto target = reference[i].data.detach();
    auto term = (left_reconstructed[i].data - target).abs().mean() +
                (right_reconstructed[i].data - target).abs().mean() +
                (both_reconstructed[i].data - target).abs().mean();
    total = total.defined() ? total + term : term;
  }
  return total / static_cast<double>(reference.size());
}

torch::Tensor mode_seeking_loss(const torch::Tensor& out1, const torch::Tensor& out2,
                                const NoiseMap& z1, const NoiseMap& z2) {
  JS_REQUIRE(out1.sizes() == out2.sizes(), "mode_seeking_loss: output shapes differ");
  JS_REQUIRE(z1.data.sizes() == z2.data.sizes(), "mode_seeking_loss: noise shapes differ");
  auto numerator = (z1.data - z2.data).abs().mean().to(out1.scalar_type());
  auto denominator = (out1 - out2).abs().mean() + kModeSeekingEpsilon;
  return (numerator / denominator).clamp_max(kModeSeekingClamp);
}

// ---------------------------------------------------------------------------

void LossWeights::validate() const {
  for (double w : {lambda_cyc, lambda_sm, lambda_fx, lambda_fy, lambda_corr, lambda_ms}) {
    JS_REQUIRE(std::isfinite(w) && w >= 0.0, "loss weights must be finite and non-negative");
  }
  JS_REQUIRE(ms_decay_steps >= 0, "ms_decay_steps must be non-negative");
}

double LossWeights::mode_seeking_weight(int64_t step) const {
  if (ms_decay_steps == 0) return lambda_ms;
  if (step >= ms_decay_steps) return 0.0;
  const double remaining = static_cast<double>(ms_decay_steps - std::max<int64_t>(step, 0));
  return lambda_ms * remaining / static_cast<double>(ms_decay_steps);
}

double LossWeights::weight(const std::string& term, int64_t step) const {
  if (term == "cdt") return 1.0;
  if (term == "sm") return lambda_sm;
  if (term == "fx") return lambda_fx;
  if (term == "fy") return lambda_fy;
  if (term == "corr") return lambda_corr;
  if (term == "ms") return mode_seeking_weight(step);
  throw ContractViolation("unknown objective term '" + term + "'");
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"lambda_cyc", w.lambda_cyc},   {"lambda_sm", w.lambda_sm},
       {"lambda_fx", w.lambda_fx},     {"lambda_fy", w.lambda_fy},
       {"lambda_corr", w.lambda_corr}, {"lambda_ms", w.lambda_ms},
       {"ms_decay_steps", w.ms_decay_steps}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  LossWeights d;
  w.lambda_cyc = j.value("lambda_cyc", d.lambda_cyc);
  w.lambda_sm = j.value("lambda_sm", d.lambda_sm);
  w.lambda_fx = j.value("lambda_fx", d.lambda_fx);
  w.lambda_fy = j.value("lambda_fy", d.lambda_fy);
  w.lambda_corr = j.value("lambda_corr", d.lambda_corr);
  w.lambda_ms = j.value("lambda_ms", d.lambda_ms);
  w.ms_decay_steps = j.value("ms_decay_steps", d.ms_decay_steps);
}

torch::Tensor cycle_domain_translation_loss(const torch::Tensor& adversarial_x2y,
                                            const torch::Tensor& adversarial_y2x,
                                            const torch::Tensor& cycle,
                                            const LossWeights& weights) {
  return adversarial_x2y + adversarial_y2x + weights.lambda_cyc * cycle;
}

nlohmann::json LossReport::to_json() const {
  return {{"terms", terms},
          {"weighted", weighted},
          {"ablated", ablated},
          {"total", total}};
}

LossReport LossReport::from_json(const nlohmann::json& j) {
  LossReport r;
  r.terms = j.at("terms").get<std::map<std::string, double>>();
  r.weighted = j.at("weighted").get<std::map<std::string, double>>();
  r.ablated = j.at("ablated").get<std::set<std::string>>();
  r.total = j.at("total").get<double>();
  return r;
}

LossReport full_objective(const std::map<std::string, double>& terms,
                          const LossWeights& weights, int64_t step,
                          const std::set<std::string>& ablated) {
  weights.validate();
  LossReport report;
  report.terms = terms;
  report.ablated = ablated;
  for (const auto& name : kObjectiveTerms) {
    auto it = terms.find(name);
    if (it == terms.end()) continue;
    JS_REQUIRE(!ablated.contains(name), "full_objective: ablated term '" + name + "' present");
    const double contribution = weights.weight(name, step) * it->second;
    report.weighted[name] = contribution;
    report.total += contribution;
  }
  return report;
}

torch::Tensor weighted_objective(const std::map<std::string, torch::Tensor>& terms,
                                 const LossWeights& weights, int64_t step) {
  weights.validate();
  torch::Tensor total;
  for (const auto& name : kObjectiveTerms) {
    auto it = terms.find(name);
    if (it == terms.end()) continue;
    auto contribution = weights.weight(name, step) * it->second;
    total = total.defined() ? total + contribution : contribution;
  }
  JS_REQUIRE(total.defined(), "weighted_objective: no objective terms");
  return total;
}

}  // namespace jointstereo
