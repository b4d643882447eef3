#pragma once

// Differentiable geometric kernels shared by the losses and the matcher.
//
// All tensors carry a leading batch dimension. Feature maps are [N, C, H, W];
// disparity maps are [N, H, W]. A disparity d at pixel (y, x) of the left
// view refers to pixel (y, x - d) of the right view, in pixels of the map's
// own resolution.

#include <torch/torch.h>

#include <cstdint>

namespace jointstereo {

struct FeatureMap {
  torch::Tensor data;  // [N, C, H, W]
  int scale = 1;       // downsampling factor relative to the input image

  int64_t batch() const { return data.size(0); }
  int64_t channels() const { return data.size(1); }
  int64_t height() const { return data.size(2); }
  int64_t width() const { return data.size(3); }
};

struct DisparityMap {
  torch::Tensor values;  // [N, H, W], floating point
  torch::Tensor valid;   // [N, H, W], bool
  int scale = 1;

  // Map whose every pixel is valid.
  static DisparityMap dense(torch::Tensor values, int scale = 1);

  int64_t batch() const { return values.size(0); }
  int64_t height() const { return values.size(1); }
  int64_t width() const { return values.size(2); }
};

// Bilinearly samples right(c, y, x - d(y, x)) with zero padding outside
// [0, W-1]. Invalid disparity entries are treated as zero shift. Gradients
// flow into both the feature values and the disparity values.
FeatureMap inverse_warp(const FeatureMap& right, const DisparityMap& disparity);

// Resamples to `target_scale` (area average down, bilinear up) and rescales
// the shift values so they stay consistent with the new resolution. A cell is
// valid only when every contributing source cell is valid.
DisparityMap rescale_disparity(const DisparityMap& disparity, int target_scale);

// True where x - d(y, x) lies inside [0, width - 1] and d is valid. [N, H, W].
torch::Tensor warp_validity_mask(const DisparityMap& disparity, int64_t width);

// One output channel per candidate shift d in [0, max_displacement]:
// out(d, y, x) = mean_c left(c, y, x) * right(c, y, x - d), zero for x < d.
FeatureMap correlation_1d(const FeatureMap& left, const FeatureMap& right,
                          int max_displacement);

}  // namespace jointstereo
