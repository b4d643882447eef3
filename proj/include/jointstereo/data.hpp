#pragma once

// Dataset readers, manifests, preprocessing and the paired / unpaired
// samplers.

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "jointstereo/geometry.hpp"

namespace jointstereo {

enum class Domain { kSynthetic, kReal };

std::string to_string(Domain domain);
Domain parse_domain(const std::string& name);

struct StereoSample {
  torch::Tensor left;   // [3, H, W]
  torch::Tensor right;  // [3, H, W]
  std::optional<DisparityMap> disparity;  // batch dimension of 1
  std::optional<torch::Tensor> noc_mask;  // [H, W] bool
  std::string source_id;

  int64_t height() const { return left.size(1); }
  int64_t width() const { return left.size(2); }
};

// ---------------------------------------------------------------------------
// File formats

// Single-channel portable float map ("Pf"). Rows are stored bottom-up; the
// sign of the scale field encodes byte order (negative = little endian).
// Negative, infinite and NaN values are marked invalid.
DisparityMap read_pfm_disparity(const std::string& path);
// Invalid pixels are written as +inf.
void write_pfm_disparity(const std::string& path, const DisparityMap& disparity);

// KITTI convention: 16-bit grayscale PNG, disparity = value / 256, 0 = invalid.
DisparityMap read_kitti_disparity(const std::string& path);
void write_kitti_disparity(const std::string& path, const DisparityMap& disparity);

// Dispatches on extension (.pfm or .png).
DisparityMap read_disparity(const std::string& path);

// 8-bit RGB image as float [3, H, W] with values in [0, 255].
torch::Tensor read_image_u8(const std::string& path);
// Writes a [3, H, W] image whose values lie in [-1, 1] as 8-bit RGB PNG.
void write_image(const std::string& path, const torch::Tensor& image);
// Writes a [3, H, W] float tensor holding integral values in [0, 255].
void write_image_u8(const std::string& path, const torch::Tensor& image);

torch::Tensor read_mask(const std::string& path);
void write_mask(const std::string& path, const torch::Tensor& mask);

// ---------------------------------------------------------------------------
// Preprocessing

struct CropWindow {
  int64_t y0 = 0, x0 = 0, height = 0, width = 0;
};

struct PreprocessRules {
  bool half_resize = false;  // 2x2 area resize, disparity values halved
  int64_t crop_height = 0;   // 0 = no crop
  int64_t crop_width = 0;
  bool scale_intensity = false;  // [0, 255] -> [-1, 1]

  bool operator==(const PreprocessRules&) const = default;
};

// Applies resize, then crop (explicit window or uniform random from `rng`),
// then intensity scaling. All fields share the same window.
StereoSample preprocess(const StereoSample& sample, const PreprocessRules& rules,
                        std::mt19937_64* rng = nullptr,
                        std::optional<CropWindow> window = std::nullopt);

// ---------------------------------------------------------------------------
// Manifests and datasets

struct ManifestEntry {
  std::string id;
  std::string left, right;
  std::string disparity;  // may be empty
  std::string noc;        // may be empty

  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  Domain domain = Domain::kSynthetic;
  std::vector<ManifestEntry> entries;
  PreprocessRules rules;  // crop applied at sampling time, the rest at load
  std::filesystem::path root;  // entries are relative to this directory

  size_t count() const { return entries.size(); }
};

// Throws IoError / FormatError. Verifies that every referenced file exists and
// that the declared count matches the entries.
DatasetManifest read_manifest(const std::string& path);
void write_manifest(const std::string& path, const DatasetManifest& manifest);

enum class DatasetPurpose { kTraining, kEvaluation };

class Dataset {
 public:
  Dataset() = default;
  Dataset(Domain domain, std::vector<StereoSample> samples, PreprocessRules sampling_rules = {});

  // Loads and preprocesses every sample. Real-domain samples loaded for
  // training never carry disparity.
  static Dataset load(const DatasetManifest& manifest, DatasetPurpose purpose);
  static Dataset load(const std::string& manifest_path, DatasetPurpose purpose);

  Domain domain() const { return domain_; }
  size_t size() const { return samples_.size(); }
  bool empty() const { return samples_.empty(); }
  const StereoSample& operator[](size_t i) const { return samples_.at(i); }
  const std::vector<StereoSample>& samples() const { return samples_; }
  // Crop rules applied whenever a training sample is drawn.
  const PreprocessRules& sampling_rules() const { return sampling_rules_; }

 private:
  Domain domain_ = Domain::kSynthetic;
  std::vector<StereoSample> samples_;
  PreprocessRules sampling_rules_;
};

// Matched (left, right, disparity) tuple, with the dataset's crop applied.
StereoSample sample_paired(const Dataset& set, std::mt19937_64& rng);
// One image drawn uniformly from the flattened {left_1, right_1, ..., right_N}
// pool of 2N candidates.
torch::Tensor sample_unpaired(const Dataset& set, std::mt19937_64& rng);
size_t unpaired_pool_size(const Dataset& set);
// Image `index` of the flattened pool: even = left, odd = right.
const torch::Tensor& unpaired_pool_image(const Dataset& set, size_t index);

// Deterministic visiting order for one epoch.
std::vector<size_t> epoch_order(size_t count, uint64_t seed);

// Adds a batch dimension to a sample's tensors.
torch::Tensor batched(const torch::Tensor& image);

}  // namespace jointstereo
