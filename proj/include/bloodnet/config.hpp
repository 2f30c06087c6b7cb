#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bloodnet/eval.hpp"
#include "bloodnet/model.hpp"
#include "bloodnet/phantom.hpp"
#include "bloodnet/train.hpp"

namespace bloodnet {

enum class Precision { float32, float64 };

struct EvalSettings {
    std::size_t n_bootstrap = kDefaultBootstrapResamples;
    std::uint64_t seed = 7;
    EvalLevel level = EvalLevel::slice;
    double confidence = 0.95;
};

// Every tunable of a run. Arch height and width always follow the phantom.
struct RunConfig {
    PhantomConfig phantom;
    BrainWindow window;
    ArchConfig arch;
    TrainHyper train;
    Precision precision = Precision::float32;
    EvalSettings eval;

    void validate() const;
};

class ConfigError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

// Reads a small TOML subset: [section] headers, `key = value` lines with
// integers, floats, booleans, "strings" or flat [arrays], and # comments.
// Unknown sections or keys and repeated keys raise ConfigError.
void apply_config_text(RunConfig& config, const std::string& text, const std::string& origin = "config");
RunConfig load_config(const std::filesystem::path& path);

// `section.key=value`, value in the same syntax as the file.
void apply_override(RunConfig& config, const std::string& assignment);

// Full resolved config in the file syntax; parsing it back yields the same config.
std::string config_to_text(const RunConfig& config);

// Environment variable naming the config file used when --config is absent.
inline constexpr const char* kConfigEnvVar = "BLOODNET_CONFIG";

}  // namespace bloodnet
