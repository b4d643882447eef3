#include "jointstereo/data.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <sstream>

#include "jointstereo/error.hpp"

namespace jointstereo {

namespace fs = std::filesystem;
namespace F = torch::nn::functional;

std::string to_string(Domain domain) {
  return domain == Domain::kSynthetic ? "synthetic" : "real";
}

Domain parse_domain(const std::string& name) {
  if (name == "synthetic") return Domain::kSynthetic;
  if (name == "real") return Domain::kReal;
  throw FormatError("unknown domain tag '" + name + "'");
}

// ---------------------------------------------------------------------------
// PFM

namespace {

// Reads one whitespace-delimited header token, tracking the byte offset.
std::string header_token(const std::vector<char>& bytes, size_t& offset,
                         const std::string& path) {
  while (offset < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[offset]))) {
    ++offset;
  }
  const size_t start = offset;
  while (offset < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[offset]))) {
    ++offset;
  }
  if (start == offset) {
    throw FormatError(path + ": truncated PFM header at byte " + std::to_string(start));
  }
  return std::string(bytes.begin() + start, bytes.begin() + offset);
}

std::vector<char> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open file");
  return std::vector<char>((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
}

uint32_t byteswap32(uint32_t v) {
  return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
}

DisparityMap disparity_from_values(torch::Tensor values) {
  auto valid = torch::isfinite(values) & (values >= 0);
  values = torch::where(valid, values, torch::zeros_like(values));
  return DisparityMap{values.unsqueeze(0), valid.unsqueeze(0), 1};
}

torch::Tensor single_map(const DisparityMap& d, const char* who) {
  JS_REQUIRE(d.values.dim() == 3 && d.values.size(0) == 1,
             std::string(who) + ": expected a single [1, H, W] map");
  return d.values[0];
}

}  // namespace

DisparityMap read_pfm_disparity(const std::string& path) {
  const auto bytes = read_bytes(path);
  size_t offset = 0;
  const auto type = header_token(bytes, offset, path);
  if (type == "PF") {
    throw FormatError(path + ": color PFM (PF) is not a disparity map");
  }
  if (type != "Pf") {
    throw FormatError(path + ": bad PFM magic '" + type + "' at byte 0");
  }

  int64_t width = 0, height = 0;
  double scale = 0.0;
  size_t field_offset = offset;
  try {
    width = std::stoll(header_token(bytes, offset, path));
    field_offset = offset;
    height = std::stoll(header_token(bytes, offset, path));
    field_offset = offset;
    scale = std::stod(header_token(bytes, offset, path));
  } catch (const std::logic_error&) {
    throw FormatError(path + ": malformed PFM header field near byte " +
                      std::to_string(field_offset));
  }
  if (width <= 0 || height <= 0) {
    throw FormatError(path + ": invalid PFM dimensions near byte " + std::to_string(field_offset));
  }
  if (scale == 0.0) throw FormatError(path + ": PFM scale must be non-zero");
  // Exactly one whitespace byte separates the header from the payload.
  if (offset >= bytes.size()) {
    throw FormatError(path + ": truncated PFM header at byte " + std::to_string(offset));
  }
  const size_t payload = offset + 1;
  const size_t expected = static_cast<size_t>(width * height) * sizeof(float);
  if (bytes.size() - payload < expected) {
    throw FormatError(path + ": truncated PFM payload at byte " + std::to_string(bytes.size()) +
                      " (expected " + std::to_string(payload + expected) + ")");
  }

  const bool little_endian = scale < 0;
  const bool swap = little_endian != (std::endian::native == std::endian::little);
  auto values = torch::empty({height, width}, torch::kFloat32);
  auto* out = values.data_ptr<float>();
  for (int64_t row = 0; row < height; ++row) {
    const int64_t target_row = height - 1 - row;  // stored bottom-up
    for (int64_t col = 0; col < width; ++col) {
      uint32_t raw;
      std::memcpy(&raw, bytes.data() + payload + (row * width + col) * sizeof(float),
                  sizeof(raw));
      if (swap) raw = byteswap32(raw);
      out[target_row * width + col] = std::bit_cast<float>(raw);
    }
  }
  return disparity_from_values(values);
}

void write_pfm_disparity(const std::string& path, const DisparityMap& disparity) {
  auto values = single_map(disparity, "write_pfm_disparity").to(torch::kFloat32).contiguous();
  auto valid = disparity.valid[0].contiguous();
  const int64_t height = values.size(0), width = values.size(1);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  out << "Pf\n" << width << " " << height << "\n-1.0\n";
  const auto* v = values.data_ptr<float>();
  const auto* ok = valid.data_ptr<bool>();
  for (int64_t row = height - 1; row >= 0; --row) {
    for (int64_t col = 0; col < width; ++col) {
      const int64_t i = row * width + col;
      const float value = ok[i] ? v[i] : std::numeric_limits<float>::infinity();
      out.write(reinterpret_cast<const char*>(&value), sizeof(value));
    }
  }
  if (!out) throw IoError(path, "write failed");
}

// ---------------------------------------------------------------------------
// PNG images (via OpenCV)

namespace {

cv::Mat read_png(const std::string& path, int flags) {
  if (!fs::exists(path)) throw IoError(path, "file does not exist");
  cv::Mat m = cv::imread(path, flags);
  if (m.empty()) throw FormatError(path + ": unreadable image");
  return m;
}

void write_png(const std::string& path, const cv::Mat& m) {
  bool ok = false;
  try {
    ok = cv::imwrite(path, m);
  } catch (const cv::Exception& e) {
    throw IoError(path, e.what());
  }
  if (!ok) throw IoError(path, "cannot write image");
}

}  // namespace

DisparityMap read_kitti_disparity(const std::string& path) {
  cv::Mat m = read_png(path, cv::IMREAD_UNCHANGED);
  if (m.depth() != CV_16U || m.channels() != 1) {
    throw FormatError(path + ": KITTI disparity must be a 16-bit single-channel image");
  }
  auto raw = torch::from_blob(m.data, {m.rows, m.cols}, torch::kUInt16).to(torch::kInt32);
  auto valid = raw > 0;
  auto values = raw.to(torch::kFloat32) / 256.0f;
  return DisparityMap{values.unsqueeze(0), valid.unsqueeze(0), 1};
}

void write_kitti_disparity(const std::string& path, const DisparityMap& disparity) {
  auto values = single_map(disparity, "write_kitti_disparity").to(torch::kFloat64);
  auto encoded = torch::round(values * 256.0).clamp(1, 65535);
  encoded = torch::where(disparity.valid[0], encoded, torch::zeros_like(encoded));
  auto u16 = encoded.to(torch::kInt32).contiguous();
  cv::Mat m(static_cast<int>(u16.size(0)), static_cast<int>(u16.size(1)), CV_16UC1);
  const auto* src = u16.data_ptr<int32_t>();
  for (int r = 0; r < m.rows; ++r) {
    for (int c = 0; c < m.cols; ++c) {
      m.at<uint16_t>(r, c) = static_cast<uint16_t>(src[r * m.cols + c]);
    }
  }
  write_png(path, m);
}

DisparityMap read_disparity(const std::string& path) {
  const auto ext = fs::path(path).extension().string();
  if (ext == ".pfm") return read_pfm_disparity(path);
  if (ext == ".png") return read_kitti_disparity(path);
  throw FormatError(path + ": unsupported disparity format '" + ext + "'");
}

torch::Tensor read_image_u8(const std::string& path) {
  cv::Mat m = read_png(path, cv::IMREAD_COLOR);
  if (m.depth() != CV_8U) throw FormatError(path + ": expected an 8-bit image");
  cv::Mat rgb;
  cv::cvtColor(m, rgb, cv::COLOR_BGR2RGB);
  auto hwc = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8);
  return hwc.permute({2, 0, 1}).to(torch::kFloat32).contiguous();
}

void write_image_u8(const std::string& path, const torch::Tensor& image) {
  JS_REQUIRE(image.dim() == 3 && image.size(0) == 3, "write_image: expected [3, H, W]");
  auto hwc = image.detach().cpu().clamp(0, 255).round().to(torch::kUInt8)
                 .permute({1, 2, 0}).contiguous();
  cv::Mat rgb(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_8UC3,
              hwc.data_ptr<uint8_t>());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  write_png(path, bgr);
}

void write_image(const std::string& path, const torch::Tensor& image) {
  write_image_u8(path, (image.detach().to(torch::kFloat32) + 1.0) * 127.5);
}

torch::Tensor read_mask(const std::string& path) {
  cv::Mat m = read_png(path, cv::IMREAD_GRAYSCALE);
  auto t = torch::from_blob(m.data, {m.rows, m.cols}, torch::kUInt8);
  return (t > 0).clone();
}

void write_mask(const std::string& path, const torch::Tensor& mask) {
  JS_REQUIRE(mask.dim() == 2, "write_mask: expected [H, W]");
  auto u8 = (mask.to(torch::kBool).to(torch::kUInt8) * 255).contiguous();
  cv::Mat m(static_cast<int>(u8.size(0)), static_cast<int>(u8.size(1)), CV_8UC1,
            u8.data_ptr<uint8_t>());
  write_png(path, m.clone());
}

// ---------------------------------------------------------------------------
// Preprocessing

namespace {

torch::Tensor half_image(const torch::Tensor& image) {
  return F::avg_pool2d(image.unsqueeze(0), F::AvgPool2dFuncOptions(2)).squeeze(0);
}

torch::Tensor half_mask(const torch::Tensor& mask) {
  auto pooled = F::avg_pool2d(mask.to(torch::kFloat32).unsqueeze(0).unsqueeze(0),
                              F::AvgPool2dFuncOptions(2));
  return (pooled > 1.0 - 1e-6).squeeze(0).squeeze(0);
}

torch::Tensor crop_last2(const torch::Tensor& t, const CropWindow& w) {
  const int64_t d = t.dim();
  return t.narrow(d - 2, w.y0, w.height).narrow(d - 1, w.x0, w.width).contiguous();
}

}  // namespace

StereoSample preprocess(const StereoSample& sample, const PreprocessRules& rules,
                        std::mt19937_64* rng, std::optional<CropWindow> window) {
  JS_REQUIRE(sample.left.defined() && sample.left.sizes() == sample.right.sizes(),
             "preprocess: left and right shapes differ");
  StereoSample out = sample;

  if (rules.half_resize) {
    JS_REQUIRE(out.height() % 2 == 0 && out.width() % 2 == 0,
               "preprocess: half resize needs even image dimensions");
    out.left = half_image(out.left);
    out.right = half_image(out.right);
    if (out.disparity) {
      auto halved = rescale_disparity(*out.disparity, out.disparity->scale * 2);
      halved.scale = out.disparity->scale;
      out.disparity = halved;
    }
    if (out.noc_mask) out.noc_mask = half_mask(*out.noc_mask);
  }

  if (!window && rules.crop_height > 0 && rules.crop_width > 0) {
    JS_REQUIRE(rules.crop_height <= out.height() && rules.crop_width <= out.width(),
               "preprocess: crop " + std::to_string(rules.crop_height) + "x" +
                   std::to_string(rules.crop_width) + " larger than image " +
                   std::to_string(out.height()) + "x" + std::to_string(out.width()));
    CropWindow w{0, 0, rules.crop_height, rules.crop_width};
    if (rng != nullptr) {
      w.y0 = std::uniform_int_distribution<int64_t>(0, out.height() - w.height)(*rng);
      w.x0 = std::uniform_int_distribution<int64_t>(0, out.width() - w.width)(*rng);
    } else {
      w.y0 = (out.height() - w.height) / 2;
      w.x0 = (out.width() - w.width) / 2;
    }
    window = w;
  }
  if (window) {
    const auto& w = *window;
    JS_REQUIRE(w.y0 >= 0 && w.x0 >= 0 && w.height > 0 && w.width > 0 &&
                   w.y0 + w.height <= out.height() && w.x0 + w.width <= out.width(),
               "preprocess: crop window larger than image");
    out.left = crop_last2(out.left, w);
    out.right = crop_last2(out.right, w);
    if (out.disparity) {
      out.disparity = DisparityMap{crop_last2(out.disparity->values, w),
                                   crop_last2(out.disparity->valid, w), out.disparity->scale};
    }
    if (out.noc_mask) out.noc_mask = crop_last2(*out.noc_mask, w);
  }

  if (rules.scale_intensity) {
    out.left = out.left / 127.5 - 1.0;
    out.right = out.right / 127.5 - 1.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifests

namespace {

constexpr const char* kManifestFormat = "jointstereo-manifest";

nlohmann::json rules_to_json(const PreprocessRules& r) {
  return {{"half_resize", r.half_resize},
          {"crop_height", r.crop_height},
          {"crop_width", r.crop_width}};
}

// Manifests that do not say otherwise train on 128x256 crops; 0 disables.
PreprocessRules rules_from_json(const nlohmann::json& j) {
  PreprocessRules r;
  r.half_resize = j.value("half_resize", false);
  r.crop_height = j.value("crop_height", int64_t{128});
  r.crop_width = j.value("crop_width", int64_t{256});
  return r;
}

}  // namespace

DatasetManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path, "cannot open manifest");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": malformed manifest (" + e.what() + ")");
  }

  DatasetManifest manifest;
  manifest.root = fs::path(path).parent_path();
  try {
    if (j.value("format", std::string{}) != kManifestFormat) {
      throw FormatError(path + ": not a " + std::string(kManifestFormat) + " file");
    }
    manifest.domain = parse_domain(j.at("domain").get<std::string>());
    manifest.rules = rules_from_json(j.value("preprocess", nlohmann::json::object()));
    for (const auto& e : j.at("entries")) {
      manifest.entries.push_back(ManifestEntry{e.at("id").get<std::string>(),
                                               e.at("left").get<std::string>(),
                                               e.at("right").get<std::string>(),
                                               e.value("disparity", std::string{}),
                                               e.value("noc", std::string{})});
    }
    const auto count = j.at("count").get<size_t>();
    if (count != manifest.entries.size()) {
      throw FormatError(path + ": count " + std::to_string(count) + " does not match " +
                        std::to_string(manifest.entries.size()) + " entries");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": malformed manifest (" + e.what() + ")");
  }

  for (const auto& e : manifest.entries) {
    for (const auto* rel : {&e.left, &e.right, &e.disparity, &e.noc}) {
      if (rel->empty()) continue;
      const auto full = manifest.root / *rel;
      if (!fs::exists(full)) throw IoError(full.string(), "referenced by manifest but missing");
    }
  }
  return manifest;
}

void write_manifest(const std::string& path, const DatasetManifest& manifest) {
  nlohmann::json j;
  j["format"] = kManifestFormat;
  j["version"] = 1;
  j["domain"] = to_string(manifest.domain);
  j["count"] = manifest.entries.size();
  j["preprocess"] = rules_to_json(manifest.rules);
  j["entries"] = nlohmann::json::array();
  for (const auto& e : manifest.entries) {
    nlohmann::json entry = {{"id", e.id}, {"left", e.left}, {"right", e.right}};
    if (!e.disparity.empty()) entry["disparity"] = e.disparity;
    if (!e.noc.empty()) entry["noc"] = e.noc;
    j["entries"].push_back(entry);
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path, "cannot write manifest");
  out << j.dump(2) << "\n";
  if (!out) throw IoError(path, "write failed");
}

// ---------------------------------------------------------------------------
// Datasets and samplers

Dataset::Dataset(Domain domain, std::vector<StereoSample> samples, PreprocessRules sampling_rules)
    : domain_(domain), samples_(std::move(samples)), sampling_rules_(sampling_rules) {}

Dataset Dataset::load(const DatasetManifest& manifest, DatasetPurpose purpose) {
  PreprocessRules load_rules = manifest.rules;
  load_rules.crop_height = 0;
  load_rules.crop_width = 0;
  load_rules.scale_intensity = true;
  const bool keep_disparity =
      manifest.domain == Domain::kSynthetic || purpose == DatasetPurpose::kEvaluation;

  std::vector<StereoSample> samples;
  samples.reserve(manifest.count());
  for (const auto& e : manifest.entries) {
    StereoSample raw;
    raw.left = read_image_u8((manifest.root / e.left).string());
    raw.right = read_image_u8((manifest.root / e.right).string());
    if (raw.left.sizes() != raw.right.sizes()) {
      throw FormatError(e.id + ": left and right images differ in size");
    }
    if (keep_disparity && !e.disparity.empty()) {
      raw.disparity = read_disparity((manifest.root / e.disparity).string());
    }
    if (!e.noc.empty()) raw.noc_mask = read_mask((manifest.root / e.noc).string());
    raw.source_id = e.id;
    samples.push_back(preprocess(raw, load_rules));
  }
  PreprocessRules sampling;
  sampling.crop_height = manifest.rules.crop_height;
  sampling.crop_width = manifest.rules.crop_width;
  return Dataset(manifest.domain, std::move(samples), sampling);
}

Dataset Dataset::load(const std::string& manifest_path, DatasetPurpose purpose) {
  return load(read_manifest(manifest_path), purpose);
}

StereoSample sample_paired(const Dataset& set, std::mt19937_64& rng) {
  JS_REQUIRE(!set.empty(), "sample_paired: empty dataset");
  const auto index = std::uniform_int_distribution<size_t>(0, set.size() - 1)(rng);
  return preprocess(set[index], set.sampling_rules(), &rng);
}

size_t unpaired_pool_size(const Dataset& set) { return 2 * set.size(); }

const torch::Tensor& unpaired_pool_image(const Dataset& set, size_t index) {
  JS_REQUIRE(index < unpaired_pool_size(set), "unpaired pool index out of range");
  const auto& sample = set[index / 2];
  return index % 2 == 0 ? sample.left : sample.right;
}

torch::Tensor sample_unpaired(const Dataset& set, std::mt19937_64& rng) {
  JS_REQUIRE(!set.empty(), "sample_unpaired: empty dataset");
  const auto index =
      std::uniform_int_distribution<size_t>(0, unpaired_pool_size(set) - 1)(rng);
  return unpaired_pool_image(set, index);
}

std::vector<size_t> epoch_order(size_t count, uint64_t seed) {
  std::vector<size_t> order(count);
  for (size_t i = 0; i < count; ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  // Fisher-Yates with an explicit draw so the order does not depend on the
  // standard library's shuffle implementation.
  for (size_t i = count; i > 1; --i) {
    const auto j = static_cast<size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

torch::Tensor batched(const torch::Tensor& image) { return image.unsqueeze(0); }

}  // namespace jointstereo
