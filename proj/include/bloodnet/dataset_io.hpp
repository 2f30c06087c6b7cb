#pragma once

#include <filesystem>
#include <stdexcept>
#include <vector>

#include "bloodnet/phantom.hpp"

namespace bloodnet {

// Raised for unreadable, missing or malformed dataset and checkpoint files.
class DataError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// On-disk study layout (see docs/file_formats.md):
//   <dir>/manifest.txt  plain-text key/value manifest
//   <dir>/slices.f32    float32 little-endian HU values, [slice][row][col]
//   <dir>/masks.u8      uint8 0/1 ground-truth masks, same layout
void write_study(const Study& study, const std::filesystem::path& dir);
Study read_study(const std::filesystem::path& dir);

// Every immediate subdirectory holding a manifest, in lexicographic order.
std::vector<std::filesystem::path> list_study_dirs(const std::filesystem::path& root);
std::vector<Study> read_dataset(const std::filesystem::path& root);

}  // namespace bloodnet
