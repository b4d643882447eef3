#include "jointstereo/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "jointstereo/error.hpp"

namespace jointstereo {

D1Combine parse_d1_combine(const std::string& name) {
  if (name == "and") return D1Combine::kAnd;
  if (name == "or") return D1Combine::kOr;
  throw ContractViolation("unknown d1 combine mode '" + name + "' (expected and|or)");
}

std::string to_string(D1Combine combine) { return combine == D1Combine::kAnd ? "and" : "or"; }

void ErrorAccumulator::accumulate(const torch::Tensor& pred, const torch::Tensor& gt,
                                  const torch::Tensor& mask, D1Combine combine) {
  JS_REQUIRE(pred.sizes() == gt.sizes() && gt.sizes() == mask.sizes(),
             "metrics: prediction, ground truth and mask shapes differ");
  auto p = pred.detach().to(torch::kFloat32).contiguous();
  auto g = gt.detach().to(torch::kFloat32).contiguous();
  auto m = mask.to(torch::kBool).contiguous();
  const float* pp = p.data_ptr<float>();
  const float* gp = g.data_ptr<float>();
  const bool* mp = m.data_ptr<bool>();
  const int64_t n = p.numel();
  for (int64_t i = 0; i < n; ++i) {
    if (!mp[i]) continue;
    const double gt_value = gp[i];
    const double error = std::abs(static_cast<double>(pp[i]) - gt_value);
    abs_error_sum += error;
    ++count;
    over2 += error > 2.0;
    over4 += error > 4.0;
    over5 += error > 5.0;
    const bool absolute = error > 3.0;
    const bool relative = error > 0.05 * gt_value;
    d1 += combine == D1Combine::kAnd ? (absolute && relative) : (absolute || relative);
  }
}

double ErrorAccumulator::epe() const {
  if (count == 0) throw UndefinedResult("metric over an empty mask");
  return abs_error_sum / static_cast<double>(count);
}

double ErrorAccumulator::rate(int64_t bad) const {
  if (count == 0) throw UndefinedResult("metric over an empty mask");
  return 100.0 * static_cast<double>(bad) / static_cast<double>(count);
}

namespace {

torch::Tensor effective_mask(const DisparityMap& gt, const torch::Tensor& mask) {
  return mask.to(torch::kBool) & gt.valid;
}

ErrorAccumulator accumulate_one(const DisparityMap& pred, const DisparityMap& gt,
                                const torch::Tensor& mask, D1Combine combine) {
  ErrorAccumulator acc;
  acc.accumulate(pred.values, gt.values, effective_mask(gt, mask.view(gt.values.sizes())),
                 combine);
  return acc;
}

}  // namespace

double epe(const DisparityMap& pred, const DisparityMap& gt, const torch::Tensor& mask) {
  return accumulate_one(pred, gt, mask, D1Combine::kAnd).epe();
}

double bad_pixel_rate(const DisparityMap& pred, const DisparityMap& gt,
                      const torch::Tensor& mask, double threshold_px) {
  JS_REQUIRE(threshold_px > 0, "bad_pixel_rate: threshold must be positive");
  auto m = effective_mask(gt, mask.view(gt.values.sizes()));
  auto errors = (pred.values.detach().to(torch::kFloat64) - gt.values.to(torch::kFloat64)).abs();
  const auto count = m.sum().item<int64_t>();
  if (count == 0) throw UndefinedResult("bad_pixel_rate over an empty mask");
  const auto bad = (m & (errors > threshold_px)).sum().item<int64_t>();
  return 100.0 * static_cast<double>(bad) / static_cast<double>(count);
}

double d1_all(const DisparityMap& pred, const DisparityMap& gt, const torch::Tensor& mask,
              D1Combine combine) {
  const auto acc = accumulate_one(pred, gt, mask, combine);
  return acc.rate(acc.d1);
}

// ---------------------------------------------------------------------------

namespace {

MetricSet metrics_of(const ErrorAccumulator& acc) {
  return MetricSet{acc.rate(acc.d1), acc.epe(), acc.rate(acc.over2), acc.rate(acc.over4),
                   acc.rate(acc.over5)};
}

nlohmann::json metrics_json(const MetricSet& m) {
  return {{"d1_all", m.d1_all}, {"epe", m.epe}, {"over2", m.over2},
          {"over4", m.over4},   {"over5", m.over5}};
}

std::string number(double v, int decimals) {
  char buffer[32];
  std::snprintf(buffer, sizeof(buffer), "%.*f", decimals, v);
  return buffer;
}

}  // namespace

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j = {{"label", label},
                      {"all", metrics_json(all)},
                      {"seconds_per_pair", seconds_per_pair},
                      {"sample_count", sample_count},
                      {"d1_combine", to_string(d1_combine)}};
  j["noc"] = noc ? metrics_json(*noc) : nlohmann::json(nullptr);
  return j;
}

std::string EvalReport::format_table() const {
  auto cell = [](const std::string& a, const std::string& b) {
    char buffer[64];
    std::snprintf(buffer, sizeof(buffer), " %-8s %-8s|", a.c_str(), b.c_str());
    return std::string(buffer);
  };
  auto pair = [&](double MetricSet::*field, int decimals) {
    const std::string noc_text = noc ? number((*noc).*field, decimals) : "-";
    return cell(noc_text, number(all.*field, decimals));
  };
  std::ostringstream s;
  char name[64];
  std::snprintf(name, sizeof(name), "%-16s|", "Method");
  s << name;
  for (const char* metric : {"D1-all (%)", "EPE", ">2px (%)", ">4px (%)", ">5px (%)"}) {
    char header[64];
    std::snprintf(header, sizeof(header), " %-17s|", metric);
    s << header;
  }
  s << " Time\n";
  std::snprintf(name, sizeof(name), "%-16s|", "");
  s << name;
  for (int k = 0; k < 5; ++k) s << cell("Noc", "All");
  s << " (s)\n";
  std::snprintf(name, sizeof(name), "%-16s|", label.c_str());
  s << name << pair(&MetricSet::d1_all, 2) << pair(&MetricSet::epe, 3)
    << pair(&MetricSet::over2, 2) << pair(&MetricSet::over4, 2) << pair(&MetricSet::over5, 2)
    << " " << number(seconds_per_pair, 4) << "\n";
  s << "(" << sample_count << " pairs, D1 combine = " << to_string(d1_combine) << ")\n";
  return s.str();
}

EvalReport evaluate(const Predictor& predictor, const Dataset& dataset,
                    const EvalOptions& options) {
  if (dataset.empty()) throw ConfigError("evaluate: dataset is empty");
  bool have_noc = true;
  for (const auto& s : dataset.samples()) {
    if (!s.disparity) {
      throw ConfigError("evaluate: sample '" + s.source_id + "' has no ground-truth disparity");
    }
    have_noc = have_noc && s.noc_mask.has_value();
  }

  using clock = std::chrono::steady_clock;
  auto run = [&](const StereoSample& s) {
    return predictor(batched(s.left), batched(s.right), s);
  };
  for (int k = 0; k < options.warmup_inferences; ++k) run(dataset[0]);

  ErrorAccumulator all, noc;
  std::vector<double> timings;
  for (const auto& s : dataset.samples()) {
    const auto start = clock::now();
    auto pred = run(s);
    timings.push_back(std::chrono::duration<double>(clock::now() - start).count());
    JS_REQUIRE(pred.sizes() == s.disparity->values.sizes(),
               "evaluate: predictor returned a wrongly shaped disparity");
    const auto& gt = *s.disparity;
    all.accumulate(pred, gt.values, gt.valid, options.d1_combine);
    if (have_noc) {
      noc.accumulate(pred, gt.values, gt.valid & s.noc_mask->unsqueeze(0), options.d1_combine);
    }
  }
  for (size_t k = 0; timings.size() < static_cast<size_t>(options.min_timed_inferences); ++k) {
    const auto start = clock::now();
    run(dataset[k % dataset.size()]);
    timings.push_back(std::chrono::duration<double>(clock::now() - start).count());
  }
  std::sort(timings.begin(), timings.end());
  const size_t n = timings.size();
  const double median = n % 2 == 1 ? timings[n / 2] : 0.5 * (timings[n / 2 - 1] + timings[n / 2]);

  EvalReport report;
  report.all = metrics_of(all);
  if (have_noc) report.noc = metrics_of(noc);
  report.seconds_per_pair = median;
  report.sample_count = static_cast<int64_t>(dataset.size());
  report.d1_combine = options.d1_combine;
  report.label = options.label;
  return report;
}

void write_report(const EvalReport& report, const std::string& stem) {
  {
    std::ofstream out(stem + ".txt", std::ios::trunc);
    if (!out) throw IoError(stem + ".txt", "cannot write report");
    out << report.format_table();
  }
  std::ofstream out(stem + ".json", std::ios::trunc);
  if (!out) throw IoError(stem + ".json", "cannot write report");
  out << report.to_json().dump(2) << "\n";
}

}  // namespace jointstereo
