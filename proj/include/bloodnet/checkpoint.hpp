#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "bloodnet/model.hpp"

namespace bloodnet {

// Checkpoint layout, all integers little-endian (see docs/file_formats.md):
//   "BLDNCKPT"  u32 version  u32 arch_len  arch text
//   u32 record_count, then per parameter in registration order:
//   u32 name_len  name  u8 dtype (4 = float32, 8 = float64)  u32 rank  u64 dims[rank]  payload
inline constexpr std::string_view kCheckpointMagic = "BLDNCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

// One "key value" line per field; the volume normaliser is written resolved.
std::string arch_to_text(const ArchConfig& arch);
ArchConfig arch_from_text(const std::string& text);

template <typename T>
std::string serialize_checkpoint(const Model<T>& model);

// Records stored in the other precision are converted.
template <typename T>
Model<T> deserialize_checkpoint(const std::string& bytes);

// Arch and storage precision (4 or 8 bytes per value) without loading tensors.
struct CheckpointInfo {
    ArchConfig arch;
    std::size_t value_bytes = 0;
};
CheckpointInfo inspect_checkpoint(const std::string& bytes);

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path);

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path);

std::string sha256_hex(std::string_view bytes);

// SHA-256 over the parameter's shape and little-endian payload.
template <typename T>
std::string parameter_digest(const Model<T>& model, const std::string& name);

template <typename T>
std::map<std::string, std::string> parameter_digests(const Model<T>& model);

}  // namespace bloodnet
