#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace bloodnet {

struct Rgb {
    std::uint8_t r, g, b;
    bool operator==(const Rgb&) const = default;
};

inline constexpr Rgb kGroundTruthColour{0, 255, 0};
inline constexpr Rgb kPredictionColour{255, 0, 0};
inline constexpr Rgb kOverlapColour{255, 255, 0};

// Mask pixels with a 4-neighbour outside the mask or on the image border.
std::vector<std::uint8_t> mask_contour(std::span<const std::uint8_t> mask, std::size_t height, std::size_t width);

std::vector<std::uint8_t> threshold_mask(std::span<const float> probs, float threshold = 0.5f);

// Binary P5 greymap; values in [0,1] map to 0..255 (clamped, rounded).
std::string pgm_image(std::span<const float> values, std::size_t height, std::size_t width);

// Binary P6 pixmap of `background` in grey with the ground-truth contour in
// green, the predicted contour in red and pixels on both in yellow.
std::string overlay_ppm(std::span<const float> background, std::span<const std::uint8_t> truth,
                        std::span<const std::uint8_t> predicted, std::size_t height, std::size_t width);

struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;  // 1 for P5, 3 for P6
    std::vector<std::uint8_t> pixels;
};

// Parses a binary P5/P6 file with maxval 255.
Image parse_pnm(const std::string& bytes);

}  // namespace bloodnet
