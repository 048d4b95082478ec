#pragma once

// Checkpoints are a directory holding
//   manifest.json  : header fields, tensor index (name -> byte offset, shape), checksum
//   tensors.bin    : little-endian float64 data, each tensor row-major, concatenated

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "drasrl/error.hpp"
#include "drasrl/reward_net.hpp"

namespace drasrl {

using NamedTensor = std::pair<std::string, Matrix>;

inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kBlobFile = "tensors.bin";
inline constexpr const char* kCheckpointFormat = "drasrl-checkpoint-v1";

inline std::uint64_t fnv1a64(std::span<const unsigned char> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << v;
  return out.str();
}

namespace detail {

inline void append_le_double(std::vector<unsigned char>& out, double x) {
  std::uint64_t bits;
  std::memcpy(&bits, &x, sizeof bits);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

inline double read_le_double(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  double x;
  std::memcpy(&x, &bits, sizeof x);
  return x;
}

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

/// Writes header + tensors. `header` is copied into the manifest verbatim.
inline void write_tensor_checkpoint(const std::filesystem::path& dir, const nlohmann::json& header,
                                    const std::vector<NamedTensor>& tensors) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());

  std::vector<unsigned char> blob;
  nlohmann::json index = nlohmann::json::array();
  for (const auto& [name, m] : tensors) {
    index.push_back({{"name", name}, {"offset", blob.size()}, {"shape", {m.rows(), m.cols()}}});
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) detail::append_le_double(blob, m(r, c));
    }
  }

  nlohmann::json manifest = header;
  manifest["format"] = kCheckpointFormat;
  manifest["blob"] = kBlobFile;
  manifest["blob_bytes"] = blob.size();
  manifest["checksum"] = "fnv1a64:" + hex64(fnv1a64(blob));
  manifest["tensors"] = std::move(index);

  {
    std::ofstream out(dir / kBlobFile, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / kBlobFile).string());
    out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("write failed: " + (dir / kBlobFile).string());
  }
  std::ofstream out(dir / kManifestFile, std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / kManifestFile).string());
  out << manifest.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + (dir / kManifestFile).string());
}

struct TensorCheckpoint {
  nlohmann::json manifest;
  std::vector<NamedTensor> tensors;

  const Matrix& get(std::string_view name) const {
    for (const auto& [n, m] : tensors) {
      if (n == name) return m;
    }
    throw IoError("checkpoint has no tensor \"" + std::string(name) + "\"");
  }
};

/// Verifies the checksum before decoding anything; nothing is returned on failure.
inline TensorCheckpoint read_tensor_checkpoint(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    std::ifstream in(dir / kManifestFile);
    if (!in) throw IoError("cannot open " + (dir / kManifestFile).string());
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", std::string()) != kCheckpointFormat) throw IoError("unsupported checkpoint format");

  const std::vector<unsigned char> blob = detail::read_file(dir / manifest.at("blob").get<std::string>());
  const std::string expected = manifest.at("checksum").get<std::string>();
  const std::string actual = "fnv1a64:" + hex64(fnv1a64(blob));
  if (blob.size() != manifest.at("blob_bytes").get<std::size_t>() || actual != expected) {
    throw ChecksumError("checkpoint blob checksum mismatch in " + dir.string());
  }

  TensorCheckpoint out;
  for (const auto& entry : manifest.at("tensors")) {
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto rows = entry.at("shape").at(0).get<Eigen::Index>();
    const auto cols = entry.at("shape").at(1).get<Eigen::Index>();
    if (offset + static_cast<std::size_t>(rows * cols) * 8 > blob.size()) {
      throw IoError("checkpoint tensor " + entry.at("name").get<std::string>() + " exceeds blob");
    }
    Matrix m(rows, cols);
    const unsigned char* p = blob.data() + offset;
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c, p += 8) m(r, c) = detail::read_le_double(p);
    }
    out.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(m));
  }
  out.manifest = std::move(manifest);
  return out;
}

inline std::vector<NamedTensor> named_tensors(const RewardModelParams& p, const std::string& prefix = "") {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < p.tensors.size(); ++i) out.emplace_back(prefix + p.layout.specs[i].name, p.tensors[i]);
  return out;
}

inline RewardModelParams params_from_checkpoint(const TensorCheckpoint& ckpt, const std::string& prefix = "") {
  const ModelDims dims = ckpt.manifest.at("dims").get<ModelDims>();
  RewardModelParams p = RewardModelParams::zeros(dims);
  for (std::size_t i = 0; i < p.tensors.size(); ++i) p.tensors[i] = ckpt.get(prefix + p.layout.specs[i].name);
  p.validate();
  return p;
}

inline void save_model(const RewardModelParams& params, const std::filesystem::path& dir) {
  write_tensor_checkpoint(dir, {{"kind", "reward_model"}, {"dims", params.dims}}, named_tensors(params));
}

inline RewardModelParams load_model(const std::filesystem::path& dir) {
  return params_from_checkpoint(read_tensor_checkpoint(dir));
}

}  // namespace drasrl
