#include "jointstereo/tensor_archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include "jointstereo/error.hpp"

namespace jointstereo {

namespace {

constexpr char kMagic[] = "JOINTSTEREO-ARCHIVE\n";
constexpr size_t kMagicLength = sizeof(kMagic) - 1;

static_assert(std::endian::native == std::endian::little,
              "archive payload is written in host byte order");

std::string dtype_name(torch::ScalarType type) {
  switch (type) {
    case torch::kFloat32: return "float32";
    case torch::kFloat64: return "float64";
    case torch::kInt64: return "int64";
    case torch::kBool: return "bool";
    default: throw ContractViolation("archive: unsupported tensor dtype");
  }
}

torch::ScalarType dtype_from_name(const std::string& name) {
  if (name == "float32") return torch::kFloat32;
  if (name == "float64") return torch::kFloat64;
  if (name == "int64") return torch::kInt64;
  if (name == "bool") return torch::kBool;
  throw FormatError("archive: unknown dtype '" + name + "'");
}

}  // namespace

void TensorArchive::save(const std::string& path) const {
  nlohmann::json header;
  header["format_version"] = kArchiveFormatVersion;
  header["meta"] = meta;
  header["tensors"] = nlohmann::json::array();

  std::vector<torch::Tensor> payload;
  uint64_t offset = 0;
  for (const auto& [name, tensor] : tensors) {
    auto contiguous = tensor.detach().cpu().contiguous();
    const uint64_t nbytes = contiguous.numel() * contiguous.element_size();
    header["tensors"].push_back({{"name", name},
                                 {"dtype", dtype_name(contiguous.scalar_type())},
                                 {"shape", contiguous.sizes().vec()},
                                 {"offset", offset},
                                 {"nbytes", nbytes}});
    offset += nbytes;
    payload.push_back(std::move(contiguous));
  }

  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  const uint64_t header_length = text.size();
  out.write(kMagic, kMagicLength);
  out.write(reinterpret_cast<const char*>(&header_length), sizeof(header_length));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : payload) {
    out.write(static_cast<const char*>(t.data_ptr()),
              static_cast<std::streamsize>(t.numel() * t.element_size()));
  }
  if (!out) throw IoError(path, "write failed");
}

TensorArchive TensorArchive::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open checkpoint");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());

  if (bytes.size() < kMagicLength + sizeof(uint64_t) ||
      std::memcmp(bytes.data(), kMagic, kMagicLength) != 0) {
    throw FormatError(path + ": not a jointstereo archive");
  }
  uint64_t header_length = 0;
  std::memcpy(&header_length, bytes.data() + kMagicLength, sizeof(header_length));
  const size_t header_start = kMagicLength + sizeof(uint64_t);
  if (header_length > bytes.size() - header_start) {
    throw FormatError(path + ": truncated header");
  }

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + header_start,
                                   bytes.begin() + header_start + header_length);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": corrupt header (" + e.what() + ")");
  }
  const int version = header.value("format_version", -1);
  if (version != kArchiveFormatVersion) {
    throw FormatError(path + ": unsupported format version " + std::to_string(version));
  }

  TensorArchive archive;
  archive.meta = header.value("meta", nlohmann::json::object());
  const size_t payload_start = header_start + header_length;
  const size_t payload_size = bytes.size() - payload_start;
  try {
    for (const auto& entry : header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto dtype = dtype_from_name(entry.at("dtype").get<std::string>());
      const auto shape = entry.at("shape").get<std::vector<int64_t>>();
      const auto offset = entry.at("offset").get<uint64_t>();
      const auto nbytes = entry.at("nbytes").get<uint64_t>();
      auto tensor = torch::empty(shape, torch::TensorOptions().dtype(dtype));
      if (nbytes != static_cast<uint64_t>(tensor.numel() * tensor.element_size()) ||
          offset > payload_size || nbytes > payload_size - offset) {
        throw FormatError(path + ": truncated or inconsistent tensor '" + name + "'");
      }
      std::memcpy(tensor.data_ptr(), bytes.data() + payload_start + offset, nbytes);
      archive.tensors.emplace(name, std::move(tensor));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": corrupt tensor table (" + e.what() + ")");
  }
  return archive;
}

const torch::Tensor& TensorArchive::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw FormatError("archive: missing tensor '" + name + "'");
  return it->second;
}

}  // namespace jointstereo
