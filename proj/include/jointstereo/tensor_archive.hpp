#pragma once

// Self-describing binary container for named tensors:
//
//   "JOINTSTEREO-ARCHIVE\n"
//   uint64 little-endian header length
//   JSON header {"format_version", "meta", "tensors": [{name, dtype, shape,
//               offset, nbytes}]}
//   raw little-endian tensor payload
//
// Used for network checkpoints and full training states.

#include <torch/torch.h>

#include <map>
#include <nlohmann/json.hpp>
#include <string>

namespace jointstereo {

inline constexpr int kArchiveFormatVersion = 1;

struct TensorArchive {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, torch::Tensor> tensors;

  // Throws IoError when the file cannot be written.
  void save(const std::string& path) const;
  // Throws IoError when missing/unreadable and FormatError when corrupt or of
  // an unsupported format version.
  static TensorArchive load(const std::string& path);

  const torch::Tensor& at(const std::string& name) const;
};

}  // namespace jointstereo
