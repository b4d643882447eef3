#include "jointstereo/geometry.hpp"

#include <string>
#include <vector>

#include "jointstereo/error.hpp"

namespace jointstereo {

namespace F = torch::nn::functional;

namespace {

void require_disparity_shape(const DisparityMap& d) {
  JS_REQUIRE(d.values.defined() && d.values.dim() == 3,
             "disparity values must be [N, H, W]");
  JS_REQUIRE(d.valid.defined() && d.valid.sizes() == d.values.sizes(),
             "disparity validity must match values");
  JS_REQUIRE(d.scale >= 1, "disparity scale must be positive");
}

void require_feature_shape(const FeatureMap& f) {
  JS_REQUIRE(f.data.defined() && f.data.dim() == 4,
             "feature map must be [N, C, H, W]");
  JS_REQUIRE(f.height() >= 1 && f.width() >= 1, "feature map must be non-empty");
  JS_REQUIRE(f.scale >= 1, "feature scale must be positive");
}

torch::Tensor sanitized_values(const DisparityMap& d) {
  return torch::where(d.valid, d.values, torch::zeros_like(d.values));
}

// Column coordinate x - d for every pixel.
torch::Tensor source_columns(const torch::Tensor& values) {
  auto columns = torch::arange(values.size(2), values.options()).view({1, 1, -1});
  return columns - values;
}

}  // namespace

DisparityMap DisparityMap::dense(torch::Tensor values, int scale) {
  auto valid = torch::ones(values.sizes(), values.options().dtype(torch::kBool));
  return DisparityMap{std::move(values), std::move(valid), scale};
}

FeatureMap inverse_warp(const FeatureMap& right, const DisparityMap& disparity) {
  require_feature_shape(right);
  require_disparity_shape(disparity);
  JS_REQUIRE(right.batch() == disparity.batch() &&
                 right.height() == disparity.height() &&
                 right.width() == disparity.width(),
             "inverse_warp: feature and disparity spatial shapes differ");
  JS_REQUIRE(right.scale == disparity.scale,
             "inverse_warp: feature scale " + std::to_string(right.scale) +
                 " != disparity scale " + std::to_string(disparity.scale));

  const int64_t width = right.width();
  auto values = sanitized_values(disparity).to(right.data.scalar_type());
  auto position = source_columns(values);
  auto left_index = torch::floor(position);
  auto fraction = (position - left_index).unsqueeze(1);

  auto expanded = [&](const torch::Tensor& t) {
    return t.unsqueeze(1).expand({-1, right.channels(), -1, -1});
  };
  auto tap = [&](const torch::Tensor& index) {
    auto inside = (index >= 0) & (index <= width - 1);
    auto clamped = index.clamp(0, width - 1).to(torch::kLong);
    auto sampled = right.data.gather(3, expanded(clamped));
    return torch::where(expanded(inside), sampled, torch::zeros_like(sampled));
  };

  auto out = tap(left_index) * (1 - fraction) + tap(left_index + 1) * fraction;
  return FeatureMap{out, right.scale};
}

DisparityMap rescale_disparity(const DisparityMap& disparity, int target_scale) {
  require_disparity_shape(disparity);
  JS_REQUIRE(target_scale >= 1, "rescale_disparity: target scale must be positive");
  const int scale = disparity.scale;
  if (target_scale == scale) return disparity;

  auto values = sanitized_values(disparity).unsqueeze(1);
  auto valid = disparity.valid.unsqueeze(1).to(values.scalar_type());

  if (target_scale > scale) {
    JS_REQUIRE(target_scale % scale == 0,
               "rescale_disparity: non-integral scale ratio " +
                   std::to_string(scale) + " -> " + std::to_string(target_scale));
    const int64_t factor = target_scale / scale;
    JS_REQUIRE(disparity.height() % factor == 0 && disparity.width() % factor == 0,
               "rescale_disparity: size not divisible by downsampling factor");
    auto pooled = F::avg_pool2d(values, F::AvgPool2dFuncOptions(factor)) /
                  static_cast<double>(factor);
    auto pooled_valid = F::avg_pool2d(valid, F::AvgPool2dFuncOptions(factor));
    return DisparityMap{pooled.squeeze(1), (pooled_valid > 1.0 - 1e-6).squeeze(1),
                        target_scale};
  }

  JS_REQUIRE(scale % target_scale == 0,
             "rescale_disparity: non-integral scale ratio " + std::to_string(scale) +
                 " -> " + std::to_string(target_scale));
  const int64_t factor = scale / target_scale;
  const std::vector<int64_t> size{disparity.height() * factor, disparity.width() * factor};
  auto options = F::InterpolateFuncOptions()
                     .size(size)
                     .mode(torch::kBilinear)
                     .align_corners(false);
  auto upsampled = F::interpolate(values, options) * static_cast<double>(factor);
  auto upsampled_valid = F::interpolate(valid, options);
  return DisparityMap{upsampled.squeeze(1), (upsampled_valid > 1.0 - 1e-6).squeeze(1),
                      target_scale};
}

torch::Tensor warp_validity_mask(const DisparityMap& disparity, int64_t width) {
  require_disparity_shape(disparity);
  JS_REQUIRE(width == disparity.width(), "warp_validity_mask: width mismatch");
  auto position = source_columns(sanitized_values(disparity).detach());
  return (position >= 0) & (position <= static_cast<double>(width - 1)) &
         disparity.valid;
}

FeatureMap correlation_1d(const FeatureMap& left, const FeatureMap& right,
                          int max_displacement) {
  require_feature_shape(left);
  require_feature_shape(right);
  JS_REQUIRE(left.data.sizes() == right.data.sizes(),
             "correlation_1d: left and right shapes differ");
  JS_REQUIRE(left.scale == right.scale, "correlation_1d: scales differ");
  JS_REQUIRE(max_displacement >= 1, "correlation_1d: max_displacement must be positive");

  const int64_t width = left.width();
  std::vector<torch::Tensor> channels;
  channels.reserve(static_cast<size_t>(max_displacement) + 1);
  for (int64_t d = 0; d <= max_displacement; ++d) {
    torch::Tensor shifted;
    if (d == 0) {
      shifted = right.data;
    } else if (d >= width) {
      shifted = torch::zeros_like(right.data);
    } else {
      shifted = F::pad(right.data.narrow(3, 0, width - d),
                       F::PadFuncOptions({d, 0}));
    }
    channels.push_back((left.data * shifted).mean(1));
  }
  return FeatureMap{torch::stack(channels, 1), left.scale};
}

}  // namespace jointstereo
