#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bloodnet/autodiff.hpp"

namespace bloodnet {

enum class Variant {
    single_task,     // encoder -> pooled bottleneck -> classification head
    multi_task,      // + segmentation decoder sharing the encoder
    task_dependent,  // + predicted blood volume fed into the classification head
};

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);
bool has_decoder(Variant v);

struct ArchConfig {
    Variant variant = Variant::task_dependent;
    std::size_t input_slices = 5;
    std::size_t height = 64;
    std::size_t width = 64;
    std::vector<std::size_t> encoder_channels{16, 32, 64};
    std::size_t bottleneck_channels = 64;
    std::vector<std::size_t> decoder_channels{32, 16, 16};
    std::size_t head_hidden = 32;  // 0 = head is a single affine layer
    bool skip_connections = false;
    // The volume feature enters the head as volume_mm3 / volume_norm_mm3, so a
    // bleed of a few dozen voxels contributes O(1).
    double volume_norm_mm3 = 50.0;  // 0 = whole window: input_slices * height * width * reference voxel volume
    double reference_voxel_volume_mm3 = 1.25;  // used when a batch carries no voxel volumes
    double seg_prior = 0.002;  // initial per-pixel segmentation probability

    void validate() const;
    std::size_t head_input_width() const;
    double effective_volume_norm() const;
    bool operator==(const ArchConfig&) const = default;
};

// Named parameter registry; registration order is the canonical order used by
// checkpoints and digests.
template <typename T>
class ParameterStore {
  public:
    void add(const std::string& name, Tensor<T> value);
    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    ad::Var<T>& at(const std::string& name);
    const ad::Var<T>& at(const std::string& name) const;
    const std::vector<std::string>& names() const { return names_; }
    std::size_t size() const { return names_.size(); }
    std::size_t scalar_count() const;

  private:
    std::vector<std::string> names_;
    std::map<std::string, ad::Var<T>> index_;
};

template <typename T>
class Model {
  public:
    // build_model: deterministic in (arch, seed). Each parameter is drawn from
    // a stream keyed by its name, so layers shared between variants start from
    // identical values.
    Model(ArchConfig arch, std::uint64_t seed);

    Model(Model&&) noexcept = default;
    Model& operator=(Model&&) noexcept = default;
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    // Rebuilds a model from stored parameter values; names and shapes must
    // match what build would register for `arch`.
    static Model from_values(ArchConfig arch, const std::vector<std::pair<std::string, Tensor<T>>>& values);

    Model clone() const;

    const ArchConfig& arch() const { return arch_; }
    ParameterStore<T>& params() { return params_; }
    const ParameterStore<T>& params() const { return params_; }

    // Marks exactly the named parameters as trainable.
    void set_trainable(const std::vector<std::string>& names);
    void set_all_trainable(bool flag);

  private:
    Model(ArchConfig arch, ParameterStore<T> params) : arch_(std::move(arch)), params_(std::move(params)) {}

    ArchConfig arch_;
    ParameterStore<T> params_;
};

template <typename T>
struct ForwardGraph {
    ad::Var<T> cls_prob;    // [m,1]
    ad::Var<T> seg_probs;   // [m,1,H,W]; undefined for single_task
    ad::Var<T> volume_mm3;  // [m,1]; undefined for single_task
};

// batch is [m, k, H, W]; voxel_volumes holds one entry per sample (or is empty
// to use the arch reference volume).
template <typename T>
ForwardGraph<T> forward_graph(const Model<T>& model, const Tensor<T>& batch, std::span<const double> voxel_volumes = {});

template <typename T>
struct Predictions {
    std::vector<T> cls_prob;           // m
    std::vector<T> seg_probs;          // m * H * W, empty for single_task
    std::vector<double> volume_mm3;    // m, empty for single_task
};

template <typename T>
Predictions<T> forward(const Model<T>& model, const Tensor<T>& batch, std::span<const double> voxel_volumes = {});

// voxel_volume * sum(probs), in mm^3.
template <typename T>
double blood_volume_feature(std::span<const T> seg_probs, double voxel_volume_mm3);

}  // namespace bloodnet
