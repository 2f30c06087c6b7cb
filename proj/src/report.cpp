#include "bloodnet/report.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace bloodnet {
namespace {

void check_plane(std::size_t n, std::size_t height, std::size_t width, const char* what) {
    if (n != height * width) {
        throw std::invalid_argument(std::string(what) + ": " + std::to_string(n) + " values for a " +
                                    std::to_string(height) + "x" + std::to_string(width) + " image");
    }
}

std::uint8_t grey(float v) {
    const float c = std::clamp(std::isfinite(v) ? v : 0.0f, 0.0f, 1.0f);
    return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

}  // namespace

std::vector<std::uint8_t> mask_contour(std::span<const std::uint8_t> mask, std::size_t height, std::size_t width) {
    check_plane(mask.size(), height, width, "mask_contour");
    std::vector<std::uint8_t> out(mask.size(), 0);
    auto inside = [&](std::size_t i, std::size_t j) { return mask[i * width + j] != 0; };
    for (std::size_t i = 0; i < height; ++i) {
        for (std::size_t j = 0; j < width; ++j) {
            if (!inside(i, j)) continue;
            const bool edge = i == 0 || j == 0 || i + 1 == height || j + 1 == width || !inside(i - 1, j) ||
                              !inside(i + 1, j) || !inside(i, j - 1) || !inside(i, j + 1);
            out[i * width + j] = edge ? 1 : 0;
        }
    }
    return out;
}

std::vector<std::uint8_t> threshold_mask(std::span<const float> probs, float threshold) {
    std::vector<std::uint8_t> out(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) out[i] = probs[i] >= threshold ? 1 : 0;
    return out;
}

std::string pgm_image(std::span<const float> values, std::size_t height, std::size_t width) {
    check_plane(values.size(), height, width, "pgm_image");
    std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    for (float v : values) out.push_back(static_cast<char>(grey(v)));
    return out;
}

std::string overlay_ppm(std::span<const float> background, std::span<const std::uint8_t> truth,
                        std::span<const std::uint8_t> predicted, std::size_t height, std::size_t width) {
    check_plane(background.size(), height, width, "overlay_ppm");
    const auto gt = mask_contour(truth, height, width);
    const auto pr = mask_contour(predicted, height, width);
    std::string out = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    for (std::size_t i = 0; i < background.size(); ++i) {
        const std::uint8_t g = grey(background[i]);
        Rgb c{g, g, g};
        if (gt[i] && pr[i]) {
            c = kOverlapColour;
        } else if (gt[i]) {
            c = kGroundTruthColour;
        } else if (pr[i]) {
            c = kPredictionColour;
        }
        out.push_back(static_cast<char>(c.r));
        out.push_back(static_cast<char>(c.g));
        out.push_back(static_cast<char>(c.b));
    }
    return out;
}

Image parse_pnm(const std::string& bytes) {
    std::istringstream in(bytes);
    std::string magic;
    std::size_t maxval = 0;
    Image img;
    in >> magic >> img.width >> img.height >> maxval;
    if (!in || (magic != "P5" && magic != "P6") || maxval != 255) throw std::invalid_argument("not a P5/P6 image");
    in.get();
    img.channels = magic == "P5" ? 1 : 3;
    const std::size_t n = img.height * img.width * img.channels;
    const auto offset = static_cast<std::size_t>(in.tellg());
    if (bytes.size() - offset != n) throw std::invalid_argument("image payload size mismatch");
    img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset), bytes.end());
    return img;
}

}  // namespace bloodnet
