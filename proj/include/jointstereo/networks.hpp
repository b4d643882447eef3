#pragma once

// The five trainable networks: two translation generators (synthetic->real
// with noise input, real->synthetic without), two patch discriminators and
// the multi-scale correlation stereo matcher.

#include <torch/torch.h>

#include <cstdint>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "jointstereo/geometry.hpp"

namespace jointstereo {

// ---------------------------------------------------------------------------
// Specs

struct GeneratorSpec {
  int base_channels = 8;
  int num_downsampling = 2;
  int num_residual_blocks = 4;
  // Any subset of "down<k>", "res", "up<k>" in forward order. Empty means
  // every stage.
  std::vector<std::string> tap_layers;
  bool accepts_noise = false;

  void validate() const;
  std::vector<std::string> resolved_taps() const;
  int tap_scale(const std::string& tap) const;
  int total_stride() const { return 1 << num_downsampling; }
  bool operator==(const GeneratorSpec&) const = default;
};

struct DiscriminatorSpec {
  int base_channels = 16;
  int num_strided_layers = 3;

  void validate() const;
  bool operator==(const DiscriminatorSpec&) const = default;
};

struct MatcherSpec {
  int base_channels = 16;
  // Candidate shifts searched at the correlation scale (1/4).
  int max_displacement = 16;
  // Pyramid levels; disparities are produced at scales 1, 2, ..., 2^(n-1).
  int num_scales = 5;

  void validate() const;
  int total_stride() const { return 1 << (num_scales - 1); }
  std::vector<int> pyramid_scales() const;
  bool operator==(const MatcherSpec&) const = default;
};

void to_json(nlohmann::json& j, const GeneratorSpec& s);
void from_json(const nlohmann::json& j, GeneratorSpec& s);
void to_json(nlohmann::json& j, const DiscriminatorSpec& s);
void from_json(const nlohmann::json& j, DiscriminatorSpec& s);
void to_json(nlohmann::json& j, const MatcherSpec& s);
void from_json(const nlohmann::json& j, MatcherSpec& s);

// ---------------------------------------------------------------------------
// Forward outputs

// Zero-mean unit-variance Gaussian map, reproducible from its seed.
struct NoiseMap {
  torch::Tensor data;  // [N, 1, H, W]
  uint64_t seed = 0;

  static NoiseMap sample(uint64_t seed, int64_t batch, int64_t height, int64_t width,
                         torch::ScalarType dtype = torch::kFloat32);
};

struct TranslationOutput {
  torch::Tensor image;               // [N, 3, H, W] in [-1, 1]
  std::vector<FeatureMap> features;  // one per tap, forward order
};

struct StereoOutput {
  std::vector<DisparityMap> disparities;         // full resolution first
  std::vector<FeatureMap> correlation_features;  // aggregation taps
};

// ---------------------------------------------------------------------------
// Networks

class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(GeneratorSpec spec);

  // `noise` must be present exactly when `accepts_noise` is set.
  TranslationOutput forward(const torch::Tensor& image,
                            const std::optional<NoiseMap>& noise = std::nullopt);

  const GeneratorSpec& spec() const { return spec_; }

 private:
  GeneratorSpec spec_;
  std::vector<std::string> taps_;
  torch::nn::Sequential stem_{nullptr};
  std::vector<torch::nn::Sequential> down_;
  std::vector<torch::nn::Sequential> residual_;
  std::vector<torch::nn::Sequential> up_;
  torch::nn::Sequential head_{nullptr};
};
TORCH_MODULE(Generator);

class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(DiscriminatorSpec spec);

  // One logit per receptive-field patch, [N, 1, h, w].
  FeatureMap forward(const torch::Tensor& image);

  // Logit grid height/width for an H x W input.
  std::pair<int64_t, int64_t> grid_shape(int64_t height, int64_t width) const;
  int receptive_field() const;
  const DiscriminatorSpec& spec() const { return spec_; }

 private:
  DiscriminatorSpec spec_;
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(Discriminator);

class StereoMatcherImpl : public torch::nn::Module {
 public:
  explicit StereoMatcherImpl(MatcherSpec spec);

  StereoOutput forward(const torch::Tensor& left, const torch::Tensor& right);

  const MatcherSpec& spec() const { return spec_; }

 private:
  MatcherSpec spec_;
  torch::nn::Sequential conv1_{nullptr};
  torch::nn::Sequential conv2_{nullptr};
  torch::nn::Sequential redirect_{nullptr};
  std::vector<torch::nn::Sequential> aggregation_;
  std::vector<torch::nn::Sequential> upconv_;
  std::vector<torch::nn::Sequential> iconv_;
  std::vector<torch::nn::Conv2d> heads_;
};
TORCH_MODULE(StereoMatcher);

// ---------------------------------------------------------------------------
// Parameter utilities and checkpoints

int64_t parameter_count(const torch::nn::Module& net);

// FNV-1a hash over every parameter's bytes, in registration order.
uint64_t parameter_hash(const torch::nn::Module& net);

void save_network(const Generator& net, const std::string& path);
void save_network(const Discriminator& net, const std::string& path);
void save_network(const StereoMatcher& net, const std::string& path);

// Loads parameters into an existing network. Throws FormatError when the file
// holds a different kind of network or a different architecture spec.
void load_network(Generator& net, const std::string& path);
void load_network(Discriminator& net, const std::string& path);
void load_network(StereoMatcher& net, const std::string& path);

}  // namespace jointstereo
