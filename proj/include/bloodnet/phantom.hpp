#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace bloodnet {

// Parameters of the synthetic head phantom. Lengths are in millimetres and
// intensities in Hounsfield units.
struct PhantomConfig {
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t slices_per_study = 20;
    double pixel_spacing_mm = 0.5;
    double slice_spacing_mm = 5.0;

    double bleed_probability = 0.5;
    std::size_t max_bleeds = 2;
    double bleed_hu_min = 50.0;
    double bleed_hu_max = 80.0;
    double bleed_radius_min_mm = 1.0;  // in-plane semi-axes
    double bleed_radius_max_mm = 3.5;
    double bleed_depth_min_mm = 4.0;  // through-plane semi-axis
    double bleed_depth_max_mm = 9.0;

    double confounder_rate = 1.0;  // mean calcification count per study
    double confounder_hu_min = 80.0;
    double confounder_hu_max = 250.0;
    double confounder_radius_min_mm = 0.5;
    double confounder_radius_max_mm = 1.2;

    double skull_hu = 1000.0;
    double skull_thickness_mm = 1.5;
    double csf_hu = 5.0;
    double brain_hu_mean = 30.0;
    double brain_hu_std = 6.0;
    double air_hu = -1000.0;

    std::uint64_t seed = 20190508;

    void validate() const;
};

// Ground-truth geometry of one ellipsoidal bleed, in study millimetre
// coordinates (pixel (row i, col j) of slice s has its centre at
// x = (j + 0.5) * px, y = (i + 0.5) * py, z = (s + 0.5) * dz).
struct Bleed {
    double center_x_mm = 0.0;
    double center_y_mm = 0.0;
    double center_z_mm = 0.0;
    double radius_x_mm = 0.0;
    double radius_y_mm = 0.0;
    double radius_z_mm = 0.0;
    double hu = 0.0;

    bool operator==(const Bleed&) const = default;
};

struct Study {
    std::string study_id;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t slice_count = 0;
    std::vector<float> hu;             // [slice_count, height, width]
    std::vector<std::uint8_t> masks;   // same layout, 0/1
    std::vector<int> slice_labels;
    int study_label = 0;
    double pixel_spacing_x_mm = 0.5;
    double pixel_spacing_y_mm = 0.5;
    double slice_spacing_mm = 5.0;
    std::vector<Bleed> bleeds;

    std::size_t pixels_per_slice() const { return height * width; }
    std::span<const float> slice(std::size_t i) const;
    std::span<const std::uint8_t> mask(std::size_t i) const;
    double voxel_volume_mm3() const { return pixel_spacing_x_mm * pixel_spacing_y_mm * slice_spacing_mm; }

    // Throws std::invalid_argument if any structural or label invariant is broken.
    void validate() const;

    bool operator==(const Study&) const = default;
};

std::string study_id_for(std::size_t index);

// Deterministic in (config, index): every random draw comes from a stream keyed
// by (config.seed, index).
Study generate_study(const PhantomConfig& config, std::size_t index);

struct BrainWindow {
    double level = 40.0;
    double width = 80.0;
};

float apply_brain_window(float hu, const BrainWindow& window);
std::vector<float> apply_brain_window(std::span<const float> hu, const BrainWindow& window);

struct SliceWindow {
    std::size_t center_index = 0;
    std::vector<std::size_t> context_indices;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> context;              // [k, height, width], values in [0,1]
    std::vector<std::uint8_t> center_mask;   // [height, width]
    int label = 0;
    double voxel_volume_mm3 = 0.0;

    std::size_t depth() const { return context_indices.size(); }
};

// Indices of the k slices around `center`, clamped to the stack (edge replication).
std::vector<std::size_t> context_indices(std::size_t center, std::size_t k, std::size_t slice_count);

std::vector<SliceWindow> make_slice_windows(const Study& study, std::size_t k, const BrainWindow& window = {});

}  // namespace bloodnet
