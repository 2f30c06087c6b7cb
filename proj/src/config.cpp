#include "bloodnet/config.hpp"

#include <charconv>
#include <functional>
#include <set>
#include <sstream>

#include "bloodnet/binary_io.hpp"
#include "bloodnet/dataset_io.hpp"

namespace bloodnet {
namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

// Drops a trailing comment that is not inside a string.
std::string strip_comment(const std::string& line) {
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') quoted = !quoted;
        if (line[i] == '#' && !quoted) return line.substr(0, i);
    }
    return line;
}

template <typename N>
N parse_num(const std::string& text, const std::string& what) {
    N v{};
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size()) {
        throw ConfigError(what + ": expected a number, got '" + text + "'");
    }
    return v;
}

std::string parse_string(const std::string& text, const std::string& what) {
    if (text.size() < 2 || text.front() != '"' || text.back() != '"') {
        throw ConfigError(what + ": expected a quoted string, got '" + text + "'");
    }
    return text.substr(1, text.size() - 2);
}

bool parse_bool(const std::string& text, const std::string& what) {
    if (text == "true") return true;
    if (text == "false") return false;
    throw ConfigError(what + ": expected true or false, got '" + text + "'");
}

std::vector<std::size_t> parse_sizes(const std::string& text, const std::string& what) {
    if (text.size() < 2 || text.front() != '[' || text.back() != ']') {
        throw ConfigError(what + ": expected an array like [16, 32], got '" + text + "'");
    }
    std::vector<std::size_t> out;
    std::istringstream in(text.substr(1, text.size() - 2));
    for (std::string item; std::getline(in, item, ',');) {
        item = trim(item);
        if (item.empty()) continue;
        out.push_back(parse_num<std::size_t>(item, what));
    }
    return out;
}

std::string quote(std::string_view s) { return "\"" + std::string(s) + "\""; }

std::string sizes_text(const std::vector<std::size_t>& v) {
    std::string out = "[";
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + std::to_string(v[i]);
    return out + "]";
}

std::string number_text(double v) {
    std::string s = format_double(v);
    // Keep floats recognisable as floats when read by other TOML tools.
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    return s;
}

struct Field {
    std::string section;
    std::string key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

template <typename M>
Field make_field(std::string section, std::string key, std::function<M&(RunConfig&)> ref) {
    Field f;
    f.section = std::move(section);
    f.key = std::move(key);
    f.get = [ref](const RunConfig& c) {
        const M& v = ref(const_cast<RunConfig&>(c));
        if constexpr (std::is_same_v<M, bool>) {
            return std::string(v ? "true" : "false");
        } else if constexpr (std::is_same_v<M, double>) {
            return number_text(v);
        } else if constexpr (std::is_same_v<M, std::vector<std::size_t>>) {
            return sizes_text(v);
        } else {
            return std::to_string(v);
        }
    };
    f.set = [ref](RunConfig& c, const std::string& text, const std::string& what) {
        M& v = ref(c);
        if constexpr (std::is_same_v<M, bool>) {
            v = parse_bool(text, what);
        } else if constexpr (std::is_same_v<M, double>) {
            v = parse_num<double>(text, what);
        } else if constexpr (std::is_same_v<M, std::vector<std::size_t>>) {
            v = parse_sizes(text, what);
        } else {
            v = parse_num<M>(text, what);
        }
    };
    return f;
}

#define FIELD(type, section, key, expr) \
    make_field<type>(section, key, [](RunConfig& c) -> type& { return c.expr; })

const std::vector<Field>& fields() {
    static const std::vector<Field> all = [] {
        std::vector<Field> v{
            FIELD(std::size_t, "phantom", "height", phantom.height),
            FIELD(std::size_t, "phantom", "width", phantom.width),
            FIELD(std::size_t, "phantom", "slices_per_study", phantom.slices_per_study),
            FIELD(double, "phantom", "pixel_spacing_mm", phantom.pixel_spacing_mm),
            FIELD(double, "phantom", "slice_spacing_mm", phantom.slice_spacing_mm),
            FIELD(double, "phantom", "bleed_probability", phantom.bleed_probability),
            FIELD(std::size_t, "phantom", "max_bleeds", phantom.max_bleeds),
            FIELD(double, "phantom", "bleed_hu_min", phantom.bleed_hu_min),
            FIELD(double, "phantom", "bleed_hu_max", phantom.bleed_hu_max),
            FIELD(double, "phantom", "bleed_radius_min_mm", phantom.bleed_radius_min_mm),
            FIELD(double, "phantom", "bleed_radius_max_mm", phantom.bleed_radius_max_mm),
            FIELD(double, "phantom", "bleed_depth_min_mm", phantom.bleed_depth_min_mm),
            FIELD(double, "phantom", "bleed_depth_max_mm", phantom.bleed_depth_max_mm),
            FIELD(double, "phantom", "confounder_rate", phantom.confounder_rate),
            FIELD(double, "phantom", "confounder_hu_min", phantom.confounder_hu_min),
            FIELD(double, "phantom", "confounder_hu_max", phantom.confounder_hu_max),
            FIELD(double, "phantom", "confounder_radius_min_mm", phantom.confounder_radius_min_mm),
            FIELD(double, "phantom", "confounder_radius_max_mm", phantom.confounder_radius_max_mm),
            FIELD(double, "phantom", "skull_hu", phantom.skull_hu),
            FIELD(double, "phantom", "skull_thickness_mm", phantom.skull_thickness_mm),
            FIELD(double, "phantom", "csf_hu", phantom.csf_hu),
            FIELD(double, "phantom", "brain_hu_mean", phantom.brain_hu_mean),
            FIELD(double, "phantom", "brain_hu_std", phantom.brain_hu_std),
            FIELD(double, "phantom", "air_hu", phantom.air_hu),
            FIELD(std::uint64_t, "phantom", "seed", phantom.seed),

            FIELD(double, "window", "level", window.level),
            FIELD(double, "window", "width", window.width),

            FIELD(std::size_t, "arch", "input_slices", arch.input_slices),
            FIELD(std::vector<std::size_t>, "arch", "encoder_channels", arch.encoder_channels),
            FIELD(std::size_t, "arch", "bottleneck_channels", arch.bottleneck_channels),
            FIELD(std::vector<std::size_t>, "arch", "decoder_channels", arch.decoder_channels),
            FIELD(std::size_t, "arch", "head_hidden", arch.head_hidden),
            FIELD(bool, "arch", "skip_connections", arch.skip_connections),
            FIELD(double, "arch", "volume_norm_mm3", arch.volume_norm_mm3),
            FIELD(double, "arch", "reference_voxel_volume_mm3", arch.reference_voxel_volume_mm3),
            FIELD(double, "arch", "seg_prior", arch.seg_prior),

            FIELD(std::size_t, "train", "stage1_epochs", train.stage_epochs[0]),
            FIELD(std::size_t, "train", "stage2_epochs", train.stage_epochs[1]),
            FIELD(std::size_t, "train", "stage3_epochs", train.stage_epochs[2]),
            FIELD(std::size_t, "train", "single_task_epochs", train.single_task_epochs),
            FIELD(std::size_t, "train", "batch_size", train.batch_size),
            FIELD(std::uint64_t, "train", "init_seed", train.init_seed),
            FIELD(std::uint64_t, "train", "shuffle_seed", train.shuffle_seed),
            FIELD(double, "train", "positive_fraction", train.sampling.positive_fraction),
            FIELD(std::size_t, "train", "windows_per_epoch", train.sampling.windows_per_epoch),
            FIELD(double, "train", "base_lr", train.adam.base_lr),
            FIELD(double, "train", "decay_rate", train.adam.decay_rate),
            FIELD(std::uint64_t, "train", "decay_period", train.adam.decay_period),
            FIELD(double, "train", "beta1", train.adam.beta1),
            FIELD(double, "train", "beta2", train.adam.beta2),
            FIELD(double, "train", "epsilon", train.adam.epsilon),
            FIELD(double, "train", "pixel_label_smoothing", train.loss.pixel_label_smoothing),
            FIELD(double, "train", "positive_weight", train.loss.positive_weight),
            FIELD(bool, "train", "select_best_epoch", train.select_best_epoch),

            FIELD(std::size_t, "eval", "n_bootstrap", eval.n_bootstrap),
            FIELD(std::uint64_t, "eval", "seed", eval.seed),
            FIELD(double, "eval", "confidence", eval.confidence),
        };
        v.push_back({"arch", "variant", [](const RunConfig& c) { return quote(variant_name(c.arch.variant)); },
                     [](RunConfig& c, const std::string& t, const std::string& w) {
                         try {
                             c.arch.variant = parse_variant(parse_string(t, w));
                         } catch (const ConfigError&) {
                             throw;
                         } catch (const std::invalid_argument& e) {
                             throw ConfigError(w + ": " + e.what());
                         }
                     }});
        v.push_back({"train", "precision",
                     [](const RunConfig& c) { return quote(c.precision == Precision::float32 ? "float32" : "float64"); },
                     [](RunConfig& c, const std::string& t, const std::string& w) {
                         const std::string s = parse_string(t, w);
                         if (s == "float32") {
                             c.precision = Precision::float32;
                         } else if (s == "float64") {
                             c.precision = Precision::float64;
                         } else {
                             throw ConfigError(w + ": expected \"float32\" or \"float64\"");
                         }
                     }});
        v.push_back({"eval", "level", [](const RunConfig& c) { return quote(level_name(c.eval.level)); },
                     [](RunConfig& c, const std::string& t, const std::string& w) {
                         try {
                             c.eval.level = parse_level(parse_string(t, w));
                         } catch (const ConfigError&) {
                             throw;
                         } catch (const std::invalid_argument& e) {
                             throw ConfigError(w + ": " + e.what());
                         }
                     }});
        return v;
    }();
    return all;
}

#undef FIELD

const Field& find_field(const std::string& section, const std::string& key, const std::string& where) {
    bool section_known = false;
    for (const Field& f : fields()) {
        if (f.section == section) {
            section_known = true;
            if (f.key == key) return f;
        }
    }
    if (!section_known) throw ConfigError(where + ": unknown section [" + section + "]");
    throw ConfigError(where + ": unknown key '" + key + "' in [" + section + "]");
}

}  // namespace

void RunConfig::validate() const {
    try {
        phantom.validate();
        ArchConfig a = arch;
        a.height = phantom.height;
        a.width = phantom.width;
        a.validate();
        train.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (!(window.width > 0.0)) throw ConfigError("window.width must be positive");
    if (eval.n_bootstrap == 0) throw ConfigError("eval.n_bootstrap must be positive");
    if (!(eval.confidence > 0.0 && eval.confidence < 1.0)) throw ConfigError("eval.confidence must be in (0,1)");
}

void apply_config_text(RunConfig& config, const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string section;
    std::set<std::string> seen;
    std::size_t line_no = 0;
    for (std::string raw; std::getline(in, raw);) {
        ++line_no;
        const std::string where = origin + ":" + std::to_string(line_no);
        const std::string line = trim(strip_comment(raw));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + ": malformed section header");
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
        if (section.empty()) throw ConfigError(where + ": key outside of a [section]");
        const std::string key = trim(line.substr(0, eq));
        const Field& f = find_field(section, key, where);
        if (!seen.insert(section + "." + key).second) {
            throw ConfigError(where + ": " + section + "." + key + " set twice");
        }
        f.set(config, trim(line.substr(eq + 1)), where + " " + section + "." + key);
    }
    config.arch.height = config.phantom.height;
    config.arch.width = config.phantom.width;
}

RunConfig load_config(const std::filesystem::path& path) {
    RunConfig c;
    std::string text;
    try {
        text = read_file(path);
    } catch (const DataError& e) {
        throw ConfigError(e.what());
    }
    apply_config_text(c, text, path.string());
    c.validate();
    return c;
}

void apply_override(RunConfig& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    const auto dot = assignment.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
        throw ConfigError("override '" + assignment + "' is not section.key=value");
    }
    const std::string section = trim(assignment.substr(0, dot));
    const std::string key = trim(assignment.substr(dot + 1, eq - dot - 1));
    const std::string where = "--set " + assignment;
    find_field(section, key, where).set(config, trim(assignment.substr(eq + 1)), where);
    config.arch.height = config.phantom.height;
    config.arch.width = config.phantom.width;
}

std::string config_to_text(const RunConfig& config) {
    std::ostringstream out;
    for (const std::string_view s : {"phantom", "window", "arch", "train", "eval"}) {
        out << (s == "phantom" ? "" : "\n") << "[" << s << "]\n";
        for (const Field& f : fields()) {
            if (f.section == s) out << f.key << " = " << f.get(config) << "\n";
        }
    }
    return out.str();
}

}  // namespace bloodnet
