#include "bloodnet/dataset_io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "bloodnet/binary_io.hpp"

namespace bloodnet {
namespace {

constexpr const char* kManifest = "manifest.txt";
constexpr const char* kSlices = "slices.f32";
constexpr const char* kMasks = "masks.u8";
constexpr const char* kFormatLine = "bloodnet-study 1";

std::vector<std::string> split_ws(const std::string& line) {
    std::istringstream in(line);
    std::vector<std::string> out;
    for (std::string tok; in >> tok;) out.push_back(tok);
    return out;
}

template <typename N>
N parse_number(const std::string& tok, const std::string& context) {
    N v{};
    const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size()) {
        throw DataError("manifest: bad number '" + tok + "' for " + context);
    }
    return v;
}

}  // namespace

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    if (in.bad()) throw DataError("error reading " + path.string());
    return buf.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot create " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("error writing " + path.string());
}

void write_study(const Study& study, const std::filesystem::path& dir) {
    study.validate();
    std::filesystem::create_directories(dir);
    std::ostringstream m;
    m << kFormatLine << "\n";
    m << "study_id " << study.study_id << "\n";
    m << "study_label " << study.study_label << "\n";
    m << "height " << study.height << "\n";
    m << "width " << study.width << "\n";
    m << "slice_count " << study.slice_count << "\n";
    m << "pixel_spacing_mm " << format_double(study.pixel_spacing_x_mm) << " "
      << format_double(study.pixel_spacing_y_mm) << "\n";
    m << "slice_spacing_mm " << format_double(study.slice_spacing_mm) << "\n";
    m << "dtype float32\n";
    m << "slice_labels";
    for (int l : study.slice_labels) m << " " << l;
    m << "\n";
    m << "bleed_count " << study.bleeds.size() << "\n";
    for (const Bleed& b : study.bleeds) {
        m << "bleed " << format_double(b.center_x_mm) << " " << format_double(b.center_y_mm) << " "
          << format_double(b.center_z_mm) << " " << format_double(b.radius_x_mm) << " "
          << format_double(b.radius_y_mm) << " " << format_double(b.radius_z_mm) << " " << format_double(b.hu)
          << "\n";
    }
    write_file(dir / kManifest, m.str());

    std::string slices;
    slices.reserve(study.hu.size() * 4);
    for (float v : study.hu) append_le(slices, v);
    write_file(dir / kSlices, slices);
    write_file(dir / kMasks, std::string(study.masks.begin(), study.masks.end()));
}

Study read_study(const std::filesystem::path& dir) {
    const std::string text = read_file(dir / kManifest);
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != kFormatLine) {
        throw DataError("manifest " + (dir / kManifest).string() + ": missing '" + kFormatLine + "' header");
    }
    std::map<std::string, std::vector<std::string>> fields;
    std::vector<std::vector<std::string>> bleed_lines;
    while (std::getline(in, line)) {
        auto toks = split_ws(line);
        if (toks.empty()) continue;
        const std::string key = toks.front();
        toks.erase(toks.begin());
        if (key == "bleed") {
            bleed_lines.push_back(std::move(toks));
        } else {
            fields[key] = std::move(toks);
        }
    }
    auto field = [&](const std::string& key, std::size_t count) -> const std::vector<std::string>& {
        auto it = fields.find(key);
        if (it == fields.end() || it->second.size() != count) {
            throw DataError("manifest " + dir.string() + ": field '" + key + "' missing or malformed");
        }
        return it->second;
    };

    Study s;
    s.study_id = field("study_id", 1)[0];
    s.study_label = parse_number<int>(field("study_label", 1)[0], "study_label");
    s.height = parse_number<std::size_t>(field("height", 1)[0], "height");
    s.width = parse_number<std::size_t>(field("width", 1)[0], "width");
    s.slice_count = parse_number<std::size_t>(field("slice_count", 1)[0], "slice_count");
    const auto& ps = field("pixel_spacing_mm", 2);
    s.pixel_spacing_x_mm = parse_number<double>(ps[0], "pixel_spacing_mm");
    s.pixel_spacing_y_mm = parse_number<double>(ps[1], "pixel_spacing_mm");
    s.slice_spacing_mm = parse_number<double>(field("slice_spacing_mm", 1)[0], "slice_spacing_mm");
    if (field("dtype", 1)[0] != "float32") throw DataError("manifest " + dir.string() + ": unsupported dtype");
    for (const auto& tok : field("slice_labels", s.slice_count)) {
        s.slice_labels.push_back(parse_number<int>(tok, "slice_labels"));
    }
    const auto n_bleeds = parse_number<std::size_t>(field("bleed_count", 1)[0], "bleed_count");
    if (bleed_lines.size() != n_bleeds) throw DataError("manifest " + dir.string() + ": bleed_count mismatch");
    for (const auto& b : bleed_lines) {
        if (b.size() != 7) throw DataError("manifest " + dir.string() + ": malformed bleed line");
        Bleed bl;
        double* dst[] = {&bl.center_x_mm, &bl.center_y_mm, &bl.center_z_mm, &bl.radius_x_mm,
                         &bl.radius_y_mm, &bl.radius_z_mm, &bl.hu};
        for (std::size_t i = 0; i < 7; ++i) *dst[i] = parse_number<double>(b[i], "bleed");
        s.bleeds.push_back(bl);
    }

    const std::size_t n = s.slice_count * s.height * s.width;
    const std::string raw = read_file(dir / kSlices);
    if (raw.size() != n * 4) {
        throw DataError((dir / kSlices).string() + ": expected " + std::to_string(n * 4) + " bytes, found " +
                        std::to_string(raw.size()));
    }
    s.hu.resize(n);
    for (std::size_t i = 0; i < n; ++i) s.hu[i] = read_le<float>(raw.data() + 4 * i);
    const std::string masks = read_file(dir / kMasks);
    if (masks.size() != n) throw DataError((dir / kMasks).string() + ": size does not match manifest geometry");
    s.masks.assign(masks.begin(), masks.end());
    try {
        s.validate();
    } catch (const std::invalid_argument& e) {
        throw DataError(std::string("inconsistent study on disk: ") + e.what());
    }
    return s;
}

std::vector<std::filesystem::path> list_study_dirs(const std::filesystem::path& root) {
    if (!std::filesystem::is_directory(root)) throw DataError("dataset directory not found: " + root.string());
    std::vector<std::filesystem::path> out;
    for (const auto& entry : std::filesystem::directory_iterator(root)) {
        if (entry.is_directory() && std::filesystem::exists(entry.path() / kManifest)) out.push_back(entry.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<Study> read_dataset(const std::filesystem::path& root) {
    std::vector<Study> out;
    for (const auto& dir : list_study_dirs(root)) out.push_back(read_study(dir));
    if (out.empty()) throw DataError("dataset " + root.string() + " contains no studies");
    return out;
}

}  // namespace bloodnet
