#include "jointstereo/networks.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <cstring>

#include "jointstereo/error.hpp"
#include "jointstereo/tensor_archive.hpp"

namespace jointstereo {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

// ---------------------------------------------------------------------------
// Specs

void GeneratorSpec::validate() const {
  JS_REQUIRE(base_channels >= 1, "generator: base_channels must be positive");
  JS_REQUIRE(num_downsampling >= 1, "generator: num_downsampling must be positive");
  JS_REQUIRE(num_residual_blocks >= 1, "generator: num_residual_blocks must be positive");
  for (const auto& tap : tap_layers) tap_scale(tap);
}

std::vector<std::string> GeneratorSpec::resolved_taps() const {
  std::vector<std::string> all;
  for (int k = 1; k <= num_downsampling; ++k) all.push_back("down" + std::to_string(k));
  all.push_back("res");
  for (int k = 1; k <= num_downsampling; ++k) all.push_back("up" + std::to_string(k));
  if (tap_layers.empty()) return all;

  // Keep forward order regardless of how the list was written.
  std::vector<std::string> ordered;
  for (const auto& name : all) {
    if (std::find(tap_layers.begin(), tap_layers.end(), name) != tap_layers.end()) {
      ordered.push_back(name);
    }
  }
  return ordered;
}

int GeneratorSpec::tap_scale(const std::string& tap) const {
  if (tap == "res") return 1 << num_downsampling;
  auto stage_index = [&](const std::string& prefix) -> int {
    if (tap.rfind(prefix, 0) != 0) return -1;
    try {
      const int k = std::stoi(tap.substr(prefix.size()));
      return (k >= 1 && k <= num_downsampling) ? k : -1;
    } catch (const std::exception&) {
      return -1;
    }
  };
  if (const int k = stage_index("down"); k > 0) return 1 << k;
  if (const int k = stage_index("up"); k > 0) return 1 << (num_downsampling - k);
  throw ContractViolation("generator: unknown tap layer '" + tap + "'");
}

void DiscriminatorSpec::validate() const {
  JS_REQUIRE(base_channels >= 1, "discriminator: base_channels must be positive");
  JS_REQUIRE(num_strided_layers >= 1, "discriminator: num_strided_layers must be positive");
}

void MatcherSpec::validate() const {
  JS_REQUIRE(base_channels >= 2, "matcher: base_channels must be at least 2");
  JS_REQUIRE(max_displacement >= 1, "matcher: max_displacement must be positive");
  JS_REQUIRE(num_scales >= 3, "matcher: num_scales must be at least 3");
}

std::vector<int> MatcherSpec::pyramid_scales() const {
  std::vector<int> scales;
  for (int level = 0; level < num_scales; ++level) scales.push_back(1 << level);
  return scales;
}

void to_json(nlohmann::json& j, const GeneratorSpec& s) {
  j = {{"base_channels", s.base_channels},
       {"num_downsampling", s.num_downsampling},
       {"num_residual_blocks", s.num_residual_blocks},
       {"tap_layers", s.tap_layers},
       {"accepts_noise", s.accepts_noise}};
}
void from_json(const nlohmann::json& j, GeneratorSpec& s) {
  GeneratorSpec d;
  s.base_channels = j.value("base_channels", d.base_channels);
  s.num_downsampling = j.value("num_downsampling", d.num_downsampling);
  s.num_residual_blocks = j.value("num_residual_blocks", d.num_residual_blocks);
  s.tap_layers = j.value("tap_layers", d.tap_layers);
  s.accepts_noise = j.value("accepts_noise", d.accepts_noise);
}
void to_json(nlohmann::json& j, const DiscriminatorSpec& s) {
  j = {{"base_channels", s.base_channels}, {"num_strided_layers", s.num_strided_layers}};
}
void from_json(const nlohmann::json& j, DiscriminatorSpec& s) {
  DiscriminatorSpec d;
  s.base_channels = j.value("base_channels", d.base_channels);
  s.num_strided_layers = j.value("num_strided_layers", d.num_strided_layers);
}
void to_json(nlohmann::json& j, const MatcherSpec& s) {
  j = {{"base_channels", s.base_channels},
       {"max_displacement", s.max_displacement},
       {"num_scales", s.num_scales}};
}
void from_json(const nlohmann::json& j, MatcherSpec& s) {
  MatcherSpec d;
  s.base_channels = j.value("base_channels", d.base_channels);
  s.max_displacement = j.value("max_displacement", d.max_displacement);
  s.num_scales = j.value("num_scales", d.num_scales);
}

NoiseMap NoiseMap::sample(uint64_t seed, int64_t batch, int64_t height, int64_t width,
                          torch::ScalarType dtype) {
  auto generator = at::make_generator<at::CPUGeneratorImpl>(seed);
  auto data = torch::randn({batch, 1, height, width}, generator,
                           torch::TensorOptions().dtype(dtype));
  return NoiseMap{data, seed};
}

// ---------------------------------------------------------------------------
// Building blocks

namespace {

nn::Conv2d conv(int64_t in, int64_t out, int64_t kernel, int64_t stride = 1,
                int64_t padding = 0) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, kernel).stride(stride).padding(padding));
}

nn::InstanceNorm2d instance_norm(int64_t channels) {
  return nn::InstanceNorm2d(nn::InstanceNorm2dOptions(channels));
}

nn::LeakyReLU leaky(double slope) {
  return nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(slope));
}

void require_image(const torch::Tensor& image, const char* who) {
  JS_REQUIRE(image.defined() && image.dim() == 4 && image.size(1) == 3,
             std::string(who) + ": image must be [N, 3, H, W]");
}

// Re-initializes every convolution under `net`. With kaiming == false weights
// are drawn from N(0, 0.02); otherwise Kaiming-normal for LeakyReLU(slope).
void init_convolutions(nn::Module& net, bool kaiming, double slope = 0.0) {
  torch::NoGradGuard no_grad;
  auto init = [&](torch::Tensor& weight, torch::Tensor& bias) {
    if (kaiming) {
      nn::init::kaiming_normal_(weight, slope, torch::kFanIn, torch::kLeakyReLU);
    } else {
      nn::init::normal_(weight, 0.0, 0.02);
    }
    if (bias.defined()) nn::init::zeros_(bias);
  };
  for (auto& module : net.modules(/*include_self=*/false)) {
    if (auto* c = module->as<nn::Conv2d>()) init(c->weight, c->bias);
    if (auto* c = module->as<nn::ConvTranspose2d>()) init(c->weight, c->bias);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Generator: reflection-padded 7x7 stem, strided downsampling, residual trunk,
// transposed-conv upsampling and a tanh head.

GeneratorImpl::GeneratorImpl(GeneratorSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  taps_ = spec_.resolved_taps();
  JS_REQUIRE(!taps_.empty(), "generator: at least one tap layer is required");

  const int64_t in_channels = spec_.accepts_noise ? 4 : 3;
  int64_t channels = spec_.base_channels;
  stem_ = register_module(
      "stem", nn::Sequential(nn::ReflectionPad2d(3), conv(in_channels, channels, 7),
                             instance_norm(channels), nn::ReLU()));

  for (int k = 1; k <= spec_.num_downsampling; ++k) {
    down_.push_back(register_module(
        "down" + std::to_string(k),
        nn::Sequential(conv(channels, channels * 2, 3, 2, 1),
                       instance_norm(channels * 2), nn::ReLU())));
    channels *= 2;
  }
  for (int k = 0; k < spec_.num_residual_blocks; ++k) {
    residual_.push_back(register_module(
        "res" + std::to_string(k),
        nn::Sequential(nn::ReflectionPad2d(1), conv(channels, channels, 3),
                       instance_norm(channels), nn::ReLU(), nn::ReflectionPad2d(1),
                       conv(channels, channels, 3), instance_norm(channels))));
  }
  for (int k = 1; k <= spec_.num_downsampling; ++k) {
    up_.push_back(register_module(
        "up" + std::to_string(k),
        nn::Sequential(nn::ConvTranspose2d(nn::ConvTranspose2dOptions(channels, channels / 2, 3)
                                               .stride(2)
                                               .padding(1)
                                               .output_padding(1)),
                       instance_norm(channels / 2), nn::ReLU())));
    channels /= 2;
  }
  head_ = register_module(
      "head", nn::Sequential(nn::ReflectionPad2d(3), conv(channels, 3, 7), nn::Tanh()));
  init_convolutions(*this, false);
}

TranslationOutput GeneratorImpl::forward(const torch::Tensor& image,
                                         const std::optional<NoiseMap>& noise) {
  require_image(image, "generator");
  JS_REQUIRE(noise.has_value() == spec_.accepts_noise,
             spec_.accepts_noise ? "generator: noise map required"
                                 : "generator: this generator takes no noise map");
  const int64_t stride = spec_.total_stride();
  JS_REQUIRE(image.size(2) % stride == 0 && image.size(3) % stride == 0,
             "generator: image size must be divisible by " + std::to_string(stride));

  torch::Tensor x = image;
  if (noise) {
    JS_REQUIRE(noise->data.size(0) == image.size(0) &&
                   noise->data.size(2) == image.size(2) &&
                   noise->data.size(3) == image.size(3),
               "generator: noise map size must match the image");
    x = torch::cat({x, noise->data.to(image.scalar_type())}, 1);
  }

  TranslationOutput out;
  auto tap = [&](const std::string& name, const torch::Tensor& feature) {
    if (std::find(taps_.begin(), taps_.end(), name) != taps_.end()) {
      out.features.push_back(FeatureMap{feature, spec_.tap_scale(name)});
    }
  };

  x = stem_->forward(x);
  for (size_t k = 0; k < down_.size(); ++k) {
    x = down_[k]->forward(x);
    tap("down" + std::to_string(k + 1), x);
  }
  for (auto& block : residual_) x = x + block->forward(x);
  tap("res", x);
  for (size_t k = 0; k < up_.size(); ++k) {
    x = up_[k]->forward(x);
    tap("up" + std::to_string(k + 1), x);
  }
  out.image = head_->forward(x);
  return out;
}

// ---------------------------------------------------------------------------
// PatchGAN discriminator.

DiscriminatorImpl::DiscriminatorImpl(DiscriminatorSpec spec) : spec_(spec) {
  spec_.validate();
  const int64_t cap = spec_.base_channels * 8;
  int64_t channels = spec_.base_channels;
  body_ = nn::Sequential(conv(3, channels, 4, 2, 1), leaky(0.2));
  for (int k = 1; k < spec_.num_strided_layers; ++k) {
    const int64_t next = std::min(channels * 2, cap);
    body_->push_back(conv(channels, next, 4, 2, 1));
    body_->push_back(instance_norm(next));
    body_->push_back(leaky(0.2));
    channels = next;
  }
  const int64_t next = std::min(channels * 2, cap);
  body_->push_back(conv(channels, next, 4, 1, 1));
  body_->push_back(instance_norm(next));
  body_->push_back(leaky(0.2));
  body_->push_back(conv(next, 1, 4, 1, 1));
  register_module("body", body_);
  init_convolutions(*this, false);
}

FeatureMap DiscriminatorImpl::forward(const torch::Tensor& image) {
  require_image(image, "discriminator");
  const auto [h, w] = grid_shape(image.size(2), image.size(3));
  JS_REQUIRE(h >= 1 && w >= 1, "discriminator: image too small for the patch grid");
  return FeatureMap{body_->forward(image), 1 << spec_.num_strided_layers};
}

std::pair<int64_t, int64_t> DiscriminatorImpl::grid_shape(int64_t height,
                                                          int64_t width) const {
  // k4 p1: stride-2 layers map n -> floor((n - 2) / 2) + 1, stride-1 layers n -> n - 1.
  auto strided = [](int64_t n) { return (n - 2) / 2 + 1; };
  for (int k = 0; k < spec_.num_strided_layers; ++k) {
    height = strided(height);
    width = strided(width);
  }
  return {height - 2, width - 2};
}

int DiscriminatorImpl::receptive_field() const {
  int field = 1 + 3 + 3;
  for (int k = 0; k < spec_.num_strided_layers; ++k) field = field * 2 + 2;
  return field;
}

// ---------------------------------------------------------------------------
// Correlation stereo matcher: shared encoder to 1/4, 1-D correlation,
// aggregation stack down to the coarsest scale, and a refinement decoder that
// predicts a non-negative disparity at every pyramid level.

namespace {

int64_t aggregation_channels(int64_t base, int index) {
  return index == 0 ? base * 2 : base * 4;
}

int64_t decoder_channels(int64_t base, int level) {
  if (level == 0) return std::max<int64_t>(base / 2, 4);
  if (level == 1) return base;
  return base * 2;
}

}  // namespace

StereoMatcherImpl::StereoMatcherImpl(MatcherSpec spec) : spec_(spec) {
  spec_.validate();
  const int64_t b = spec_.base_channels;
  const int levels = spec_.num_scales;

  conv1_ = register_module("conv1", nn::Sequential(conv(3, b, 3, 2, 1), leaky(0.1),
                                                   conv(b, b, 3, 1, 1), leaky(0.1)));
  conv2_ = register_module("conv2", nn::Sequential(conv(b, 2 * b, 3, 2, 1), leaky(0.1),
                                                   conv(2 * b, 2 * b, 3, 1, 1), leaky(0.1)));
  redirect_ = register_module("redirect", nn::Sequential(conv(2 * b, b, 1), leaky(0.1)));

  const int64_t corr_channels = spec_.max_displacement + 1;
  aggregation_.push_back(register_module(
      "agg0", nn::Sequential(conv(corr_channels + b, aggregation_channels(b, 0), 3, 1, 1),
                             leaky(0.1))));
  for (int k = 1; k < levels - 2; ++k) {
    const int64_t in = aggregation_channels(b, k - 1);
    const int64_t out = aggregation_channels(b, k);
    aggregation_.push_back(register_module(
        "agg" + std::to_string(k),
        nn::Sequential(conv(in, out, 3, 2, 1), leaky(0.1), conv(out, out, 3, 1, 1),
                       leaky(0.1))));
  }

  auto skip_channels = [&](int level) -> int64_t {
    if (level == 0) return 3;
    if (level == 1) return b;
    return aggregation_channels(b, level - 2);
  };

  upconv_.resize(static_cast<size_t>(levels - 1));
  iconv_.resize(static_cast<size_t>(levels - 1));
  heads_.resize(static_cast<size_t>(levels), nullptr);
  const int coarsest = levels - 1;
  heads_[coarsest] = register_module("head" + std::to_string(coarsest),
                                     conv(skip_channels(coarsest), 1, 3, 1, 1));
  int64_t previous = skip_channels(coarsest);
  for (int level = coarsest - 1; level >= 0; --level) {
    const int64_t channels = decoder_channels(b, level);
    upconv_[level] = register_module(
        "upconv" + std::to_string(level),
        nn::Sequential(
            nn::ConvTranspose2d(nn::ConvTranspose2dOptions(previous, channels, 4).stride(2).padding(1)),
            leaky(0.1)));
    iconv_[level] = register_module(
        "iconv" + std::to_string(level),
        nn::Sequential(conv(channels + skip_channels(level) + 1, channels, 3, 1, 1),
                       leaky(0.1)));
    heads_[level] = register_module("head" + std::to_string(level),
                                    conv(channels, 1, 3, 1, 1));
    previous = channels;
  }
  init_convolutions(*this, true, 0.1);
}

StereoOutput StereoMatcherImpl::forward(const torch::Tensor& left,
                                        const torch::Tensor& right) {
  require_image(left, "matcher");
  require_image(right, "matcher");
  JS_REQUIRE(left.sizes() == right.sizes(), "matcher: left and right shapes differ");
  const int64_t stride = spec_.total_stride();
  JS_REQUIRE(left.size(2) % stride == 0 && left.size(3) % stride == 0,
             "matcher: image size must be divisible by " + std::to_string(stride));

  const int levels = spec_.num_scales;
  auto left1 = conv1_->forward(left);
  auto right1 = conv1_->forward(right);
  auto left2 = conv2_->forward(left1);
  auto right2 = conv2_->forward(right1);

  // Unit-norm features make the cost volume a cosine similarity, which is
  // informative from initialization onwards.
  auto unit = [](const torch::Tensor& f) {
    return f / (f.pow(2).sum(1, true) + 1e-6).sqrt();
  };
  auto cost = correlation_1d(FeatureMap{unit(left2), 4}, FeatureMap{unit(right2), 4},
                             spec_.max_displacement);
  cost.data = cost.data * static_cast<double>(left2.size(1));
  auto x = torch::cat({F::leaky_relu(cost.data, F::LeakyReLUFuncOptions().negative_slope(0.1)),
                       redirect_->forward(left2)},
                      1);

  StereoOutput out;
  std::vector<torch::Tensor> skips(static_cast<size_t>(levels));
  skips[0] = left;
  skips[1] = left1;
  for (size_t k = 0; k < aggregation_.size(); ++k) {
    x = aggregation_[k]->forward(x);
    skips[k + 2] = x;
    out.correlation_features.push_back(FeatureMap{x, 4 << k});
  }

  std::vector<torch::Tensor> predictions(static_cast<size_t>(levels));
  const int coarsest = levels - 1;
  auto feature = skips[coarsest];
  predictions[coarsest] = F::softplus(heads_[coarsest]->forward(feature));
  for (int level = coarsest - 1; level >= 0; --level) {
    auto up = upconv_[level]->forward(feature);
    auto coarse = F::interpolate(predictions[level + 1],
                                 F::InterpolateFuncOptions()
                                     .scale_factor(std::vector<double>{2.0, 2.0})
                                     .mode(torch::kBilinear)
                                     .align_corners(false)) * 2.0;
    feature = iconv_[level]->forward(torch::cat({up, skips[level], coarse}, 1));
    predictions[level] = F::softplus(heads_[level]->forward(feature));
  }

  for (int level = 0; level < levels; ++level) {
    out.disparities.push_back(
        DisparityMap::dense(predictions[level].squeeze(1), 1 << level));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameters and checkpoints

int64_t parameter_count(const torch::nn::Module& net) {
  int64_t count = 0;
  for (const auto& p : net.parameters()) count += p.numel();
  return count;
}

uint64_t parameter_hash(const torch::nn::Module& net) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : net.parameters()) {
    auto bytes = p.detach().cpu().contiguous();
    const auto* data = static_cast<const unsigned char*>(bytes.data_ptr());
    const size_t n = bytes.numel() * bytes.element_size();
    for (size_t i = 0; i < n; ++i) {
      h ^= data[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

namespace {

template <typename Net>
void save_impl(const Net& net, const char* kind, const std::string& path) {
  TensorArchive archive;
  archive.meta["kind"] = kind;
  archive.meta["spec"] = net->spec();
  for (const auto& item : net->named_parameters()) {
    archive.tensors.emplace(item.key(), item.value());
  }
  archive.save(path);
}

template <typename Net, typename Spec>
void load_impl(Net& net, const char* kind, const std::string& path) {
  auto archive = TensorArchive::load(path);
  const auto stored_kind = archive.meta.value("kind", std::string{});
  if (stored_kind != kind) {
    throw FormatError(path + ": holds a '" + stored_kind + "' network, expected '" +
                      kind + "'");
  }
  if (archive.meta.at("spec").get<Spec>() != net->spec()) {
    throw FormatError(path + ": architecture spec " + archive.meta.at("spec").dump() +
                      " does not match the target network");
  }
  torch::NoGradGuard no_grad;
  for (auto& item : net->named_parameters()) {
    const auto& stored = archive.at(item.key());
    if (stored.sizes() != item.value().sizes()) {
      throw FormatError(path + ": parameter '" + item.key() + "' has the wrong shape");
    }
    item.value().copy_(stored);
  }
}

}  // namespace

void save_network(const Generator& net, const std::string& path) {
  save_impl(net, "generator", path);
}
void save_network(const Discriminator& net, const std::string& path) {
  save_impl(net, "discriminator", path);
}
void save_network(const StereoMatcher& net, const std::string& path) {
  save_impl(net, "matcher", path);
}
void load_network(Generator& net, const std::string& path) {
  load_impl<Generator, GeneratorSpec>(net, "generator", path);
}
void load_network(Discriminator& net, const std::string& path) {
  load_impl<Discriminator, DiscriminatorSpec>(net, "discriminator", path);
}
void load_network(StereoMatcher& net, const std::string& path) {
  load_impl<StereoMatcher, MatcherSpec>(net, "matcher", path);
}

}  // namespace jointstereo
