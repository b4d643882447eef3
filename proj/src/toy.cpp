#include "jointstereo/toy.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <random>
#include <sstream>

#include "jointstereo/error.hpp"
#include "jointstereo/seeding.hpp"

namespace jointstereo {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Shift profiles

bool ShiftProfile::is_identity() const {
  return gamma == 1.0 && gain == std::array<double, 3>{1.0, 1.0, 1.0} && noise_sigma == 0.0;
}

ShiftProfile ShiftProfile::standard() {
  ShiftProfile p;
  p.gamma = 2.0;
  p.gain = {1.2, 0.8, 0.5};
  p.noise_sigma = 0.06;
  return p;
}

ShiftProfile ShiftProfile::parse(const std::string& text) {
  if (text == "identity") return identity();
  if (text == "default" || text.empty()) return standard();
  ShiftProfile p;
  std::stringstream items(text);
  std::string item;
  try {
    while (std::getline(items, item, ',')) {
      const auto eq = item.find('=');
      JS_REQUIRE(eq != std::string::npos, "shift profile: expected key=value in '" + item + "'");
      const auto key = item.substr(0, eq);
      const auto value = item.substr(eq + 1);
      if (key == "gamma") {
        p.gamma = std::stod(value);
      } else if (key == "noise") {
        p.noise_sigma = std::stod(value);
      } else if (key == "gain") {
        std::stringstream parts(value);
        std::string part;
        size_t c = 0;
        while (std::getline(parts, part, ':')) {
          JS_REQUIRE(c < 3, "shift profile: gain takes three values");
          p.gain[c++] = std::stod(part);
        }
        JS_REQUIRE(c == 3, "shift profile: gain takes three values");
      } else {
        throw ContractViolation("shift profile: unknown key '" + key + "'");
      }
    }
  } catch (const std::logic_error& e) {
    if (dynamic_cast<const ContractViolation*>(&e)) throw;
    throw ContractViolation("shift profile: cannot parse '" + text + "'");
  }
  JS_REQUIRE(p.gamma > 0 && p.noise_sigma >= 0, "shift profile: gamma > 0, noise >= 0");
  return p;
}

std::string ShiftProfile::to_string() const {
  std::ostringstream s;
  s << std::setprecision(15) << "gamma=" << gamma << ",gain=" << gain[0] << ":" << gain[1]
    << ":" << gain[2] << ",noise=" << noise_sigma;
  return s.str();
}

void ToyConfig::validate() const {
  JS_REQUIRE(num_pairs >= 1, "toy: num_pairs must be positive");
  JS_REQUIRE(height >= 8 && width >= 8, "toy: image must be at least 8x8");
  JS_REQUIRE(max_disparity >= 1, "toy: max_disparity must be positive");
  JS_REQUIRE(max_disparity * 4 < width, "toy: max_disparity must be below width / 4");
}

// ---------------------------------------------------------------------------
// Scene rendering

namespace {

uint64_t hash3(uint64_t seed, int64_t a, int64_t b) {
  return derive_seed(seed, "texel", {static_cast<uint64_t>(a), static_cast<uint64_t>(b)});
}

// A textured layer: a rectangle in left-view coordinates (the background
// covers the whole frame) shifted by an integer disparity in the right view.
struct Layer {
  int disparity = 0;
  int x0 = 0, y0 = 0, w = 0, h = 0;
  bool background = false;
  std::array<double, 3> base{};
  std::array<double, 3> amplitude{};
  double freq_u = 0, freq_v = 0, phase = 0, gradient = 0;
  double speckle = 0;
  int cell = 1;
  uint64_t texture_seed = 0;

  bool covers(int x, int y) const {
    return background || (x >= x0 && x < x0 + w && y >= y0 && y < y0 + h);
  }

  // Color of texel (u, v) in layer coordinates; u is an integer column.
  std::array<uint8_t, 3> color(int u, int v) const {
    const double wave = std::sin(freq_u * u + freq_v * v + phase);
    // Fine speckle plus coarser blobs keep the texture aperiodic.
    const uint64_t fine = hash3(texture_seed, floor_div(u, cell), floor_div(v, cell));
    const uint64_t blob = hash3(~texture_seed, floor_div(u, 4 * cell), floor_div(v, 4 * cell));
    const double speck = static_cast<double>(fine % 2001) / 1000.0 - 1.0;
    const double blotch = static_cast<double>(blob % 2001) / 1000.0 - 1.0;
    std::array<uint8_t, 3> rgb{};
    for (int c = 0; c < 3; ++c) {
      const double value = base[c] + amplitude[c] * wave + gradient * (u % 64) / 64.0 +
                           speckle * (0.7 * speck + 0.5 * blotch);
      rgb[c] = static_cast<uint8_t>(std::clamp(std::lround(value * 255.0), 0L, 255L));
    }
    return rgb;
  }

  static int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }
};

struct RenderedPair {
  torch::Tensor left, right;  // uint8-valued float [3, H, W] in [0, 255]
  torch::Tensor disparity;    // [H, W] float
  torch::Tensor noc;          // [H, W] bool
};

std::vector<Layer> make_layers(const ToyConfig& cfg, std::mt19937_64& rng) {
  auto uniform = [&](double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  auto integer = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  auto texture = [&](Layer& layer) {
    for (int c = 0; c < 3; ++c) {
      layer.base[c] = uniform(0.25, 0.75);
      layer.amplitude[c] = uniform(0.02, 0.08);
    }
    layer.freq_u = uniform(0.1, 0.9);
    layer.freq_v = uniform(-0.5, 0.5);
    layer.phase = uniform(0.0, 6.283185307179586);
    layer.gradient = uniform(-0.1, 0.1);
    layer.speckle = uniform(0.15, 0.3);
    layer.cell = integer(1, 3);
    layer.texture_seed = rng();
  };

  std::vector<Layer> layers;
  Layer background;
  background.background = true;
  background.disparity = integer(0, std::max(1, cfg.max_disparity / 4));
  texture(background);
  layers.push_back(background);

  const int objects = integer(3, 6);
  for (int k = 0; k < objects; ++k) {
    Layer layer;
    layer.w = integer(cfg.width / 8, cfg.width / 2);
    layer.h = integer(cfg.height / 8, cfg.height / 2);
    layer.x0 = integer(-layer.w / 4, cfg.width - layer.w / 2);
    layer.y0 = integer(-layer.h / 4, cfg.height - layer.h / 2);
    layer.disparity = integer(std::min(background.disparity + 1, cfg.max_disparity),
                              cfg.max_disparity);
    texture(layer);
    layers.push_back(layer);
  }
  // Far to near; nearer layers are drawn on top.
  std::stable_sort(layers.begin() + 1, layers.end(),
                   [](const Layer& a, const Layer& b) { return a.disparity < b.disparity; });
  return layers;
}

RenderedPair render_pair(const ToyConfig& cfg, int index) {
  std::mt19937_64 rng(derive_seed(cfg.seed, "toy-scene", {static_cast<uint64_t>(index)}));
  const auto layers = make_layers(cfg, rng);
  const int H = cfg.height, W = cfg.width;

  auto topmost = [&](int x, int y, bool right_view) -> int {
    for (int k = static_cast<int>(layers.size()) - 1; k >= 0; --k) {
      const int lx = right_view ? x + layers[k].disparity : x;
      if (layers[k].covers(lx, y)) return k;
    }
    return 0;
  };

  RenderedPair out;
  out.left = torch::empty({3, H, W}, torch::kFloat32);
  out.right = torch::empty({3, H, W}, torch::kFloat32);
  out.disparity = torch::empty({H, W}, torch::kFloat32);
  out.noc = torch::empty({H, W}, torch::kBool);
  auto left = out.left.accessor<float, 3>();
  auto right = out.right.accessor<float, 3>();
  auto disp = out.disparity.accessor<float, 2>();
  auto noc = out.noc.accessor<bool, 2>();

  std::vector<int> right_owner(static_cast<size_t>(W));
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      const int k = topmost(x, y, true);
      right_owner[x] = k;
      const auto& layer = layers[k];
      const auto rgb = layer.color(x + layer.disparity - layer.x0, y - layer.y0);
      for (int c = 0; c < 3; ++c) right[c][y][x] = rgb[c];
    }
    for (int x = 0; x < W; ++x) {
      const int k = topmost(x, y, false);
      const auto& layer = layers[k];
      const auto rgb = layer.color(x - layer.x0, y - layer.y0);
      for (int c = 0; c < 3; ++c) left[c][y][x] = rgb[c];
      disp[y][x] = static_cast<float>(layer.disparity);
      const int xr = x - layer.disparity;
      noc[y][x] = xr >= 0 && xr < W && right_owner[xr] == k;
    }
  }
  return out;
}

torch::Tensor apply_shift(const torch::Tensor& image_u8, const ShiftProfile& profile,
                          uint64_t noise_seed) {
  if (profile.is_identity()) return image_u8.clone();
  auto generator = at::make_generator<at::CPUGeneratorImpl>(noise_seed);
  auto v = (image_u8.to(torch::kFloat64) / 255.0).pow(profile.gamma);
  auto gains = torch::tensor({profile.gain[0], profile.gain[1], profile.gain[2]},
                             torch::kFloat64)
                   .view({3, 1, 1});
  v = v * gains;
  if (profile.noise_sigma > 0) {
    v = v + profile.noise_sigma *
                torch::randn(v.sizes(), generator, torch::TensorOptions().dtype(torch::kFloat64));
  }
  return torch::round(v.clamp(0.0, 1.0) * 255.0).to(torch::kFloat32);
}

struct RenderedDomains {
  std::vector<RenderedPair> source;
  std::vector<std::pair<torch::Tensor, torch::Tensor>> target;
};

RenderedDomains render_all(const ToyConfig& config) {
  config.validate();
  RenderedDomains out;
  for (int i = 0; i < config.num_pairs; ++i) {
    auto pair = render_pair(config, i);
    const auto id = static_cast<uint64_t>(i);
    auto tl = apply_shift(pair.left, config.shift, derive_seed(config.seed, "toy-shift", {id, 0}));
    auto tr = apply_shift(pair.right, config.shift, derive_seed(config.seed, "toy-shift", {id, 1}));
    out.target.emplace_back(std::move(tl), std::move(tr));
    out.source.push_back(std::move(pair));
  }
  return out;
}

std::string pair_id(int i) {
  std::ostringstream s;
  s << std::setw(6) << std::setfill('0') << i;
  return s.str();
}

}  // namespace

// ---------------------------------------------------------------------------

ToyDatasets generate_toy_datasets(const ToyConfig& config) {
  const auto rendered = render_all(config);
  PreprocessRules to_unit;
  to_unit.scale_intensity = true;

  std::vector<StereoSample> source, target;
  for (int i = 0; i < config.num_pairs; ++i) {
    const auto& pair = rendered.source[i];
    StereoSample s;
    s.left = pair.left;
    s.right = pair.right;
    s.disparity = DisparityMap::dense(pair.disparity.unsqueeze(0));
    s.noc_mask = pair.noc;
    s.source_id = pair_id(i);
    source.push_back(preprocess(s, to_unit));

    StereoSample t = s;
    t.left = rendered.target[i].first;
    t.right = rendered.target[i].second;
    target.push_back(preprocess(t, to_unit));
  }
  return ToyDatasets{Dataset(Domain::kSynthetic, std::move(source)),
                     Dataset(Domain::kReal, std::move(target))};
}

Dataset ToyDatasets::target_for_training() const {
  std::vector<StereoSample> samples = target.samples();
  for (auto& s : samples) s.disparity.reset();
  return Dataset(Domain::kReal, std::move(samples), target.sampling_rules());
}

ToyManifestPaths write_toy_datasets(const ToyConfig& config, const std::string& out_dir) {
  const auto rendered = render_all(config);
  const fs::path root(out_dir);
  std::error_code ec;
  for (const char* domain : {"source", "target"}) {
    for (const char* sub : {"left", "right", "disparity", "noc"}) {
      fs::create_directories(root / domain / sub, ec);
      if (ec) throw IoError((root / domain / sub).string(), ec.message());
    }
  }

  DatasetManifest source, target;
  source.domain = Domain::kSynthetic;
  target.domain = Domain::kReal;
  for (int i = 0; i < config.num_pairs; ++i) {
    const auto id = pair_id(i);
    const ManifestEntry entry{id, "left/" + id + ".png", "right/" + id + ".png",
                              "disparity/" + id + ".pfm", "noc/" + id + ".png"};
    const auto& pair = rendered.source[i];
    const auto disparity = DisparityMap::dense(pair.disparity.unsqueeze(0));
    for (const auto& [dir, left, right] :
         {std::tuple{root / "source", pair.left, pair.right},
          std::tuple{root / "target", rendered.target[i].first, rendered.target[i].second}}) {
      write_image_u8((dir / entry.left).string(), left);
      write_image_u8((dir / entry.right).string(), right);
      write_pfm_disparity((dir / entry.disparity).string(), disparity);
      write_mask((dir / entry.noc).string(), pair.noc);
    }
    source.entries.push_back(entry);
    target.entries.push_back(entry);
  }
  ToyManifestPaths paths{(root / "source" / "manifest.json").string(),
                         (root / "target" / "manifest.json").string()};
  write_manifest(paths.source, source);
  write_manifest(paths.target, target);
  return paths;
}

}  // namespace jointstereo
