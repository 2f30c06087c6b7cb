#include "bloodnet/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "bloodnet/rng.hpp"

namespace bloodnet {
namespace {

// Sub-stream keys; each aspect of a study draws from its own stream so that
// changing one knob does not reshuffle unrelated randomness.
enum Stream : std::uint64_t { kLabel = 1, kAnatomy, kNoise, kBleeds, kConfounders };

void require(bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("phantom config: ") + what);
}

std::size_t poisson(Rng& rng, double mean) {
    const double limit = std::exp(-mean);
    std::size_t k = 0;
    double p = rng.uniform();
    while (p > limit) {
        ++k;
        p *= rng.uniform();
    }
    return k;
}

struct Ellipse {
    double cx, cy, ax, ay;  // pixel units
    bool contains(double x, double y) const {
        const double dx = (x - cx) / ax;
        const double dy = (y - cy) / ay;
        return dx * dx + dy * dy <= 1.0;
    }
};

struct HeadGeometry {
    double cx, cy, ax, ay;
    double skull_px;
    double mid_z_mm, half_extent_mm;

    double scale(double z_mm) const {
        const double r = (z_mm - mid_z_mm) / half_extent_mm;
        return std::sqrt(std::max(0.2, 1.0 - r * r));
    }
    Ellipse outer(double z_mm) const {
        const double s = scale(z_mm);
        return {cx, cy, ax * s, ay * s};
    }
    Ellipse brain(double z_mm) const {
        const double s = scale(z_mm);
        return {cx, cy, ax * s - skull_px, ay * s - skull_px};
    }
};

struct Raster {
    std::size_t h, w, s;
    double px, py, dz;
    double x(std::size_t j) const { return static_cast<double>(j) + 0.5; }  // pixel units
    double y(std::size_t i) const { return static_cast<double>(i) + 0.5; }
    double z_mm(std::size_t k) const { return (static_cast<double>(k) + 0.5) * dz; }
};

// Pixel-unit point uniformly inside an ellipse shrunk by `margin` pixels.
bool sample_inside(Rng& rng, const Ellipse& e, double margin, double& x, double& y) {
    const double ax = e.ax - margin;
    const double ay = e.ay - margin;
    if (ax <= 0.0 || ay <= 0.0) return false;
    for (int i = 0; i < 64; ++i) {
        const double u = rng.uniform(-1.0, 1.0);
        const double v = rng.uniform(-1.0, 1.0);
        if (u * u + v * v <= 1.0) {
            x = e.cx + u * ax;
            y = e.cy + v * ay;
            return true;
        }
    }
    return false;
}

}  // namespace

void PhantomConfig::validate() const {
    require(height >= 8 && width >= 8, "height and width must be at least 8");
    require(slices_per_study >= 1, "slices_per_study must be positive");
    require(pixel_spacing_mm > 0.0 && slice_spacing_mm > 0.0, "spacings must be positive");
    require(bleed_probability >= 0.0 && bleed_probability <= 1.0, "bleed_probability must be in [0,1]");
    require(max_bleeds >= 1, "max_bleeds must be positive");
    require(bleed_hu_min <= bleed_hu_max, "bleed HU range is empty");
    require(bleed_radius_min_mm > 0.0 && bleed_radius_min_mm <= bleed_radius_max_mm, "bleed radius range invalid");
    require(bleed_depth_min_mm > 0.0 && bleed_depth_min_mm <= bleed_depth_max_mm, "bleed depth range invalid");
    require(bleed_depth_max_mm > 0.75 * slice_spacing_mm,
            "bleed_depth_max_mm must exceed 0.75 slice spacings so bleeds can span two slices");
    require(bleed_probability == 0.0 || slices_per_study >= 2, "bleeds need at least two slices");
    require(confounder_rate >= 0.0, "confounder_rate must be non-negative");
    require(confounder_hu_min <= confounder_hu_max, "confounder HU range is empty");
    require(confounder_radius_min_mm > 0.0 && confounder_radius_min_mm <= confounder_radius_max_mm,
            "confounder radius range invalid");
    require(brain_hu_std >= 0.0, "brain_hu_std must be non-negative");
    require(skull_thickness_mm > 0.0, "skull_thickness_mm must be positive");
}

std::span<const float> Study::slice(std::size_t i) const {
    return std::span<const float>(hu).subspan(i * pixels_per_slice(), pixels_per_slice());
}

std::span<const std::uint8_t> Study::mask(std::size_t i) const {
    return std::span<const std::uint8_t>(masks).subspan(i * pixels_per_slice(), pixels_per_slice());
}

void Study::validate() const {
    auto fail = [this](const std::string& what) {
        throw std::invalid_argument("study " + study_id + ": " + what);
    };
    if (height == 0 || width == 0 || slice_count == 0) fail("empty geometry");
    const std::size_t n = slice_count * height * width;
    if (hu.size() != n || masks.size() != n) fail("buffer sizes do not match geometry");
    if (slice_labels.size() != slice_count) fail("slice label count mismatch");
    if (!(pixel_spacing_x_mm > 0.0 && pixel_spacing_y_mm > 0.0 && slice_spacing_mm > 0.0)) {
        fail("spacings must be positive");
    }
    int max_label = 0;
    for (std::size_t s = 0; s < slice_count; ++s) {
        const auto m = mask(s);
        const bool any = std::any_of(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; });
        if (std::any_of(m.begin(), m.end(), [](std::uint8_t v) { return v > 1; })) fail("mask values must be 0/1");
        if (slice_labels[s] != 0 && slice_labels[s] != 1) fail("slice labels must be 0/1");
        if (any && slice_labels[s] != 1) fail("nonempty mask on a negative slice");
        max_label = std::max(max_label, slice_labels[s]);
    }
    if (study_label != max_label) fail("study label differs from max slice label");
}

std::string study_id_for(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "s%03zu", index);
    return buf;
}

Study generate_study(const PhantomConfig& config, std::size_t index) {
    config.validate();
    const std::uint64_t base = derive_seed(config.seed, index);
    Rng label_rng(derive_seed(base, kLabel));
    Rng anatomy_rng(derive_seed(base, kAnatomy));
    Rng noise_rng(derive_seed(base, kNoise));
    Rng bleed_rng(derive_seed(base, kBleeds));
    Rng conf_rng(derive_seed(base, kConfounders));

    const Raster r{config.height, config.width, config.slices_per_study, config.pixel_spacing_mm,
                   config.pixel_spacing_mm, config.slice_spacing_mm};
    const std::size_t plane = r.h * r.w;

    Study study;
    study.study_id = study_id_for(index);
    study.height = r.h;
    study.width = r.w;
    study.slice_count = r.s;
    study.pixel_spacing_x_mm = r.px;
    study.pixel_spacing_y_mm = r.py;
    study.slice_spacing_mm = r.dz;
    study.hu.assign(r.s * plane, 0.0f);
    study.masks.assign(r.s * plane, 0);
    study.slice_labels.assign(r.s, 0);

    const bool positive = label_rng.bernoulli(config.bleed_probability);

    const double w = static_cast<double>(r.w);
    const double h = static_cast<double>(r.h);
    HeadGeometry head{};
    head.cx = w / 2.0 + anatomy_rng.uniform(-1.5, 1.5);
    head.cy = h / 2.0 + anatomy_rng.uniform(-1.5, 1.5);
    head.ax = w * anatomy_rng.uniform(0.40, 0.45);
    head.ay = h * anatomy_rng.uniform(0.43, 0.47);
    head.skull_px = config.skull_thickness_mm / r.px;
    head.mid_z_mm = static_cast<double>(r.s) * r.dz / 2.0;
    head.half_extent_mm = 0.62 * static_cast<double>(r.s) * r.dz;
    const double ventricle_offset = anatomy_rng.uniform(0.10, 0.14);

    // Anatomy: air, skull ring, brain parenchyma with CSF-filled ventricles.
    for (std::size_t s = 0; s < r.s; ++s) {
        const double z = r.z_mm(s);
        const Ellipse outer = head.outer(z);
        const Ellipse brain = head.brain(z);
        const double sc = head.scale(z);
        const Ellipse vent_l{head.cx - ventricle_offset * head.ax * sc, head.cy - 0.05 * head.ay,
                             0.07 * head.ax * sc, 0.18 * head.ay * sc};
        const Ellipse vent_r{head.cx + ventricle_offset * head.ax * sc, head.cy - 0.05 * head.ay,
                             0.07 * head.ax * sc, 0.18 * head.ay * sc};
        const bool has_ventricles = sc > 0.8;
        float* out = study.hu.data() + s * plane;
        for (std::size_t i = 0; i < r.h; ++i) {
            for (std::size_t j = 0; j < r.w; ++j) {
                const double x = r.x(j), y = r.y(i);
                double v = config.air_hu;
                if (brain.contains(x, y)) {
                    const bool csf = has_ventricles && (vent_l.contains(x, y) || vent_r.contains(x, y));
                    v = (csf ? config.csf_hu : config.brain_hu_mean) + noise_rng.normal(0.0, config.brain_hu_std);
                } else if (outer.contains(x, y)) {
                    v = config.skull_hu + noise_rng.normal(0.0, 3.0 * config.brain_hu_std);
                }
                out[i * r.w + j] = static_cast<float>(v);
            }
        }
    }

    // Bleeds: ellipsoids spanning at least two consecutive slices, wholly inside the brain.
    if (positive) {
        const std::size_t n_bleeds = 1 + static_cast<std::size_t>(bleed_rng.below(config.max_bleeds));
        for (std::size_t b = 0; b < n_bleeds; ++b) {
            bool placed = false;
            for (int attempt = 0; attempt < 2000 && !placed; ++attempt) {
                // Geometry that keeps failing is retried with shrunken in-plane radii.
                const double shrink = std::pow(0.85, attempt / 50);
                Bleed bl;
                bl.radius_x_mm = bleed_rng.uniform(config.bleed_radius_min_mm, config.bleed_radius_max_mm) * shrink;
                bl.radius_y_mm = bleed_rng.uniform(config.bleed_radius_min_mm, config.bleed_radius_max_mm) * shrink;
                bl.radius_z_mm = bleed_rng.uniform(config.bleed_depth_min_mm, config.bleed_depth_max_mm);
                const auto gap = static_cast<double>(bleed_rng.below(r.s - 1));  // between slice gap and gap+1
                bl.center_z_mm = (gap + 1.0 + bleed_rng.uniform(-0.25, 0.25)) * r.dz;
                bl.hu = bleed_rng.uniform(config.bleed_hu_min, config.bleed_hu_max);
                const double rx = bl.radius_x_mm / r.px;
                const double ry = bl.radius_y_mm / r.py;
                double cx = 0.0, cy = 0.0;
                if (!sample_inside(bleed_rng, head.brain(bl.center_z_mm), std::max(rx, ry) + 1.0, cx, cy)) continue;
                bl.center_x_mm = cx * r.px;
                bl.center_y_mm = cy * r.py;

                std::vector<std::size_t> voxels;
                std::size_t nonempty_slices = 0;
                bool inside_brain = true;
                for (std::size_t s = 0; s < r.s && inside_brain; ++s) {
                    const double dzr = (r.z_mm(s) - bl.center_z_mm) / bl.radius_z_mm;
                    const double q = 1.0 - dzr * dzr;
                    if (q < 0.0) continue;
                    const Ellipse brain = head.brain(r.z_mm(s));
                    const std::size_t before = voxels.size();
                    for (std::size_t i = 0; i < r.h && inside_brain; ++i) {
                        for (std::size_t j = 0; j < r.w; ++j) {
                            const double dx = (r.x(j) - cx) / rx;
                            const double dy = (r.y(i) - cy) / ry;
                            if (dx * dx + dy * dy > q) continue;
                            if (!brain.contains(r.x(j), r.y(i))) {
                                inside_brain = false;
                                break;
                            }
                            voxels.push_back(s * plane + i * r.w + j);
                        }
                    }
                    if (voxels.size() > before) ++nonempty_slices;
                }
                if (!inside_brain || nonempty_slices < 2) continue;

                for (std::size_t idx : voxels) {
                    const double v = bl.hu + noise_rng.normal(0.0, config.brain_hu_std);
                    study.hu[idx] = static_cast<float>(std::clamp(v, config.bleed_hu_min, config.bleed_hu_max));
                    study.masks[idx] = 1;
                }
                study.bleeds.push_back(bl);
                placed = true;
            }
            if (!placed) {
                throw std::runtime_error("phantom: could not place a bleed in study " + study.study_id +
                                         "; bleed radii are too large for the brain region");
            }
        }
    }

    // Calcification-like confounders: small, very dense, confined to one slice, never masked.
    const std::size_t n_conf = poisson(conf_rng, config.confounder_rate);
    for (std::size_t c = 0; c < n_conf; ++c) {
        const std::size_t s = static_cast<std::size_t>(conf_rng.below(r.s));
        const double radius = conf_rng.uniform(config.confounder_radius_min_mm, config.confounder_radius_max_mm) / r.px;
        const double value = conf_rng.uniform(config.confounder_hu_min, config.confounder_hu_max);
        double cx = 0.0, cy = 0.0;
        if (!sample_inside(conf_rng, head.brain(r.z_mm(s)), radius + 1.0, cx, cy)) continue;
        const double r2 = std::max(radius * radius, 0.5);
        for (std::size_t i = 0; i < r.h; ++i) {
            for (std::size_t j = 0; j < r.w; ++j) {
                const double dx = r.x(j) - cx, dy = r.y(i) - cy;
                const std::size_t idx = s * plane + i * r.w + j;
                if (dx * dx + dy * dy <= r2 && study.masks[idx] == 0) {
                    study.hu[idx] = static_cast<float>(value);
                }
            }
        }
    }

    for (std::size_t s = 0; s < r.s; ++s) {
        const auto m = study.mask(s);
        study.slice_labels[s] = std::any_of(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; }) ? 1 : 0;
    }
    study.study_label = *std::max_element(study.slice_labels.begin(), study.slice_labels.end());
    study.validate();
    return study;
}

float apply_brain_window(float hu, const BrainWindow& window) {
    if (!(window.width > 0.0)) throw std::invalid_argument("brain window width must be positive");
    const double lo = window.level - window.width / 2.0;
    return static_cast<float>(std::clamp((static_cast<double>(hu) - lo) / window.width, 0.0, 1.0));
}

std::vector<float> apply_brain_window(std::span<const float> hu, const BrainWindow& window) {
    if (!(window.width > 0.0)) throw std::invalid_argument("brain window width must be positive");
    std::vector<float> out(hu.size());
    std::transform(hu.begin(), hu.end(), out.begin(), [&](float v) { return apply_brain_window(v, window); });
    return out;
}

std::vector<std::size_t> context_indices(std::size_t center, std::size_t k, std::size_t slice_count) {
    if (k == 0 || k % 2 == 0) throw std::invalid_argument("context depth k must be odd, got " + std::to_string(k));
    if (center >= slice_count) throw std::out_of_range("context center outside the study");
    const auto half = static_cast<std::ptrdiff_t>(k / 2);
    const auto last = static_cast<std::ptrdiff_t>(slice_count) - 1;
    std::vector<std::size_t> out;
    out.reserve(k);
    for (std::ptrdiff_t d = -half; d <= half; ++d) {
        out.push_back(static_cast<std::size_t>(std::clamp(static_cast<std::ptrdiff_t>(center) + d, std::ptrdiff_t{0}, last)));
    }
    return out;
}

std::vector<SliceWindow> make_slice_windows(const Study& study, std::size_t k, const BrainWindow& window) {
    if (k == 0 || k % 2 == 0) throw std::invalid_argument("context depth k must be odd, got " + std::to_string(k));
    if (study.slice_count == 0) throw std::invalid_argument("study " + study.study_id + " has no slices");
    const std::size_t plane = study.pixels_per_slice();
    std::vector<std::vector<float>> windowed;
    windowed.reserve(study.slice_count);
    for (std::size_t s = 0; s < study.slice_count; ++s) windowed.push_back(apply_brain_window(study.slice(s), window));

    std::vector<SliceWindow> out;
    out.reserve(study.slice_count);
    for (std::size_t s = 0; s < study.slice_count; ++s) {
        SliceWindow win;
        win.center_index = s;
        win.context_indices = context_indices(s, k, study.slice_count);
        win.height = study.height;
        win.width = study.width;
        win.context.reserve(k * plane);
        for (std::size_t idx : win.context_indices) {
            win.context.insert(win.context.end(), windowed[idx].begin(), windowed[idx].end());
        }
        const auto m = study.mask(s);
        win.center_mask.assign(m.begin(), m.end());
        win.label = study.slice_labels[s];
        win.voxel_volume_mm3 = study.voxel_volume_mm3();
        out.push_back(std::move(win));
    }
    return out;
}

}  // namespace bloodnet
