#pragma once

#include <string>
#include <vector>

#include "bloodnet/model.hpp"
#include "bloodnet/phantom.hpp"
#include "bloodnet/rng.hpp"
#include "support/gradcheck.hpp"

namespace bloodnet::testing {

// Small enough for element-wise finite differences over every parameter.
inline ArchConfig tiny_arch(Variant variant, std::size_t size = 8) {
    ArchConfig a;
    a.variant = variant;
    a.input_slices = 3;
    a.height = size;
    a.width = size;
    a.encoder_channels = {2, 3};
    a.bottleneck_channels = 3;
    a.decoder_channels = {3, 2};
    a.head_hidden = 4;
    a.skip_connections = true;
    a.volume_norm_mm3 = 20.0;
    a.reference_voxel_volume_mm3 = 1.25;
    return a;
}

// Replaces every parameter (biases included) with a random draw, so no ReLU
// sits exactly on its kink the way zero-initialised biases can.
template <typename T>
void randomise(Model<T>& model, std::uint64_t seed, double scale = 0.6) {
    Rng rng(seed);
    for (const auto& name : model.params().names()) {
        auto& v = model.params().at(name).mutable_value();
        for (T& x : v.data()) x = static_cast<T>(rng.uniform(-scale, scale));
    }
}

template <typename T>
Tensor<T> random_batch(const ArchConfig& a, std::size_t m, Rng& rng) {
    Tensor<T> t({m, a.input_slices, a.height, a.width});
    for (T& v : t.data()) v = static_cast<T>(rng.uniform());
    return t;
}

inline PhantomConfig small_phantom(std::size_t size = 16, std::size_t slices = 8) {
    PhantomConfig c;
    c.height = size;
    c.width = size;
    c.slices_per_study = slices;
    c.pixel_spacing_mm = 32.0 / static_cast<double>(size);
    c.bleed_radius_min_mm = 2.0;
    c.bleed_radius_max_mm = 4.0;
    return c;
}

inline std::vector<Study> make_studies(const PhantomConfig& c, std::size_t first, std::size_t count) {
    std::vector<Study> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back(generate_study(c, first + i));
    return out;
}

}  // namespace bloodnet::testing

#include <filesystem>
#include <random>

namespace bloodnet::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
  public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("bloodnet_" + tag + "_" + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }

  private:
    std::filesystem::path path_;
};

}  // namespace bloodnet::testing
