#pragma once

// Disparity error metrics and Table-style reports.
//
// Thresholds are strict: a pixel is erroneous only when its absolute error is
// strictly greater than the threshold.

#include <torch/torch.h>

#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>

#include "jointstereo/data.hpp"
#include "jointstereo/geometry.hpp"

namespace jointstereo {

enum class D1Combine { kAnd, kOr };

D1Combine parse_d1_combine(const std::string& name);
std::string to_string(D1Combine combine);

// Per-pixel error sums over a mask. `accumulate` adds the masked pixels of
// one (pred, gt) pair; aggregating several pairs pools their pixels.
struct ErrorAccumulator {
  double abs_error_sum = 0.0;
  int64_t count = 0;
  int64_t over2 = 0, over4 = 0, over5 = 0;
  int64_t d1 = 0;

  void accumulate(const torch::Tensor& pred, const torch::Tensor& gt,
                  const torch::Tensor& mask, D1Combine combine = D1Combine::kAnd);

  // Throw UndefinedResult when nothing has been accumulated.
  double epe() const;
  double rate(int64_t bad) const;
};

// All inputs are [H, W] (or any identical shape); mask is bool.
double epe(const DisparityMap& pred, const DisparityMap& gt, const torch::Tensor& mask);
double bad_pixel_rate(const DisparityMap& pred, const DisparityMap& gt,
                      const torch::Tensor& mask, double threshold_px);
double d1_all(const DisparityMap& pred, const DisparityMap& gt, const torch::Tensor& mask,
              D1Combine combine = D1Combine::kAnd);

struct MetricSet {
  double d1_all = 0, epe = 0, over2 = 0, over4 = 0, over5 = 0;
};

struct EvalReport {
  std::optional<MetricSet> noc;  // absent when the dataset has no noc masks
  MetricSet all;
  double seconds_per_pair = 0;   // median over timed inferences
  int64_t sample_count = 0;
  D1Combine d1_combine = D1Combine::kAnd;
  std::string label;

  nlohmann::json to_json() const;
  // One header block and one row, columns as in the comparison tables.
  std::string format_table() const;
};

// Maps a (left, right) pair of [1, 3, H, W] images to a full-resolution
// [1, H, W] disparity.
using Predictor = std::function<torch::Tensor(const torch::Tensor&, const torch::Tensor&,
                                              const StereoSample&)>;

struct EvalOptions {
  D1Combine d1_combine = D1Combine::kAnd;
  int min_timed_inferences = 20;
  int warmup_inferences = 2;
  std::string label = "model";
};

// Streams the dataset in order. Every sample must carry ground truth.
EvalReport evaluate(const Predictor& predictor, const Dataset& dataset,
                    const EvalOptions& options = {});

// Writes <stem>.txt (formatted table) and <stem>.json.
void write_report(const EvalReport& report, const std::string& stem);

}  // namespace jointstereo
