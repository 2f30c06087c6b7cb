#include "bloodnet/model.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

#include "bloodnet/rng.hpp"

namespace bloodnet {
namespace {

std::uint64_t name_key(std::string_view name) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : name) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

struct ParamSpec {
    std::string name;
    Shape shape;
    enum class Init { he, xavier, zero, constant } init;
    double constant = 0.0;
};

std::size_t fan_in(const Shape& s) {
    std::size_t f = 1;
    for (std::size_t i = 1; i < s.size(); ++i) f *= s[i];
    return f;
}

std::vector<ParamSpec> layout(const ArchConfig& a) {
    using Init = ParamSpec::Init;
    std::vector<ParamSpec> specs;
    auto conv = [&](const std::string& prefix, std::size_t in, std::size_t out, std::size_t k) {
        specs.push_back({prefix + ".weight", {out, in, k, k}, Init::he});
        specs.push_back({prefix + ".bias", {out}, Init::zero});
    };
    std::size_t ch = a.input_slices;
    for (std::size_t s = 0; s < a.encoder_channels.size(); ++s) {
        const std::string stage = "encoder.stage" + std::to_string(s);
        conv(stage + ".conv1", ch, a.encoder_channels[s], 3);
        conv(stage + ".conv2", a.encoder_channels[s], a.encoder_channels[s], 3);
        ch = a.encoder_channels[s];
    }
    conv("bottleneck.conv", ch, a.bottleneck_channels, 3);

    if (has_decoder(a.variant)) {
        std::size_t dch = a.bottleneck_channels;
        const std::size_t stages = a.encoder_channels.size();
        for (std::size_t d = 0; d < stages; ++d) {
            std::size_t in = dch;
            if (a.skip_connections) in += a.encoder_channels[stages - 1 - d];
            conv("decoder.stage" + std::to_string(d) + ".conv", in, a.decoder_channels[d], 3);
            dch = a.decoder_channels[d];
        }
        const double prior = a.seg_prior;
        specs.push_back({"decoder.out.weight", {1, dch, 1, 1}, Init::xavier});
        specs.push_back({"decoder.out.bias", {1}, Init::constant, std::log(prior / (1.0 - prior))});
    }

    std::size_t head_in = a.head_input_width();
    if (a.head_hidden > 0) {
        specs.push_back({"head.hidden.weight", {a.head_hidden, head_in}, Init::he});
        specs.push_back({"head.hidden.bias", {a.head_hidden}, Init::zero});
        head_in = a.head_hidden;
    }
    specs.push_back({"head.final.weight", {1, head_in}, Init::xavier});
    specs.push_back({"head.final.bias", {1}, Init::zero});
    return specs;
}

template <typename T>
Tensor<T> initial_value(const ParamSpec& spec, std::uint64_t seed) {
    Tensor<T> t(spec.shape, T(0));
    Rng rng(derive_seed(seed, name_key(spec.name)));
    const double f = static_cast<double>(fan_in(spec.shape));
    switch (spec.init) {
        case ParamSpec::Init::he:
            for (T& v : t.data()) v = static_cast<T>(rng.normal(0.0, std::sqrt(2.0 / f)));
            break;
        case ParamSpec::Init::xavier:
            for (T& v : t.data()) v = static_cast<T>(rng.normal(0.0, std::sqrt(1.0 / f)));
            break;
        case ParamSpec::Init::constant:
            t.fill(static_cast<T>(spec.constant));
            break;
        case ParamSpec::Init::zero:
            break;
    }
    return t;
}

}  // namespace

std::string_view variant_name(Variant v) {
    switch (v) {
        case Variant::single_task: return "single_task";
        case Variant::multi_task: return "multi_task";
        case Variant::task_dependent: return "task_dependent";
    }
    return "unknown";
}

Variant parse_variant(std::string_view name) {
    for (Variant v : {Variant::single_task, Variant::multi_task, Variant::task_dependent}) {
        if (variant_name(v) == name) return v;
    }
    throw std::invalid_argument("unknown variant '" + std::string(name) +
                                "' (expected single_task, multi_task or task_dependent)");
}

bool has_decoder(Variant v) { return v != Variant::single_task; }

void ArchConfig::validate() const {
    auto fail = [](const std::string& what) { throw std::invalid_argument("arch config: " + what); };
    if (input_slices == 0 || input_slices % 2 == 0) fail("input_slices must be odd");
    if (encoder_channels.empty()) fail("need at least one encoder stage");
    for (std::size_t c : encoder_channels)
        if (c == 0) fail("encoder channel widths must be positive");
    if (bottleneck_channels == 0) fail("bottleneck_channels must be positive");
    const std::size_t factor = std::size_t{1} << encoder_channels.size();
    if (height % factor != 0 || width % factor != 0) {
        fail("input " + std::to_string(height) + "x" + std::to_string(width) + " not divisible by 2^" +
             std::to_string(encoder_channels.size()) + " for " + std::to_string(encoder_channels.size()) +
             " pooling stages");
    }
    if (has_decoder(variant)) {
        if (decoder_channels.size() != encoder_channels.size()) fail("decoder needs one width per encoder stage");
        for (std::size_t c : decoder_channels)
            if (c == 0) fail("decoder channel widths must be positive");
    }
    if (!(seg_prior > 0.0 && seg_prior < 1.0)) fail("seg_prior must be in (0,1)");
    if (volume_norm_mm3 < 0.0) fail("volume_norm_mm3 must be non-negative");
    if (!(reference_voxel_volume_mm3 > 0.0)) fail("reference_voxel_volume_mm3 must be positive");
}

std::size_t ArchConfig::head_input_width() const {
    return bottleneck_channels + (variant == Variant::task_dependent ? 1 : 0);
}

double ArchConfig::effective_volume_norm() const {
    if (volume_norm_mm3 > 0.0) return volume_norm_mm3;
    return static_cast<double>(input_slices * height * width) * reference_voxel_volume_mm3;
}

template <typename T>
void ParameterStore<T>::add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
    names_.push_back(name);
    index_.emplace(name, ad::Var<T>::leaf(std::move(value), true));
}

template <typename T>
ad::Var<T>& ParameterStore<T>::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return it->second;
}

template <typename T>
const ad::Var<T>& ParameterStore<T>::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return it->second;
}

template <typename T>
std::size_t ParameterStore<T>::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, var] : index_) n += var.value().size();
    return n;
}

template <typename T>
Model<T>::Model(ArchConfig arch, std::uint64_t seed) : arch_(std::move(arch)) {
    arch_.validate();
    for (const ParamSpec& spec : layout(arch_)) params_.add(spec.name, initial_value<T>(spec, seed));
}

template <typename T>
Model<T> Model<T>::from_values(ArchConfig arch, const std::vector<std::pair<std::string, Tensor<T>>>& values) {
    arch.validate();
    const auto specs = layout(arch);
    if (specs.size() != values.size()) {
        throw std::invalid_argument("parameter count " + std::to_string(values.size()) + " does not match arch (" +
                                    std::to_string(specs.size()) + ")");
    }
    ParameterStore<T> store;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        if (specs[i].name != values[i].first || specs[i].shape != values[i].second.shape()) {
            throw std::invalid_argument("parameter " + values[i].first + " " + shape_str(values[i].second.shape()) +
                                        " does not match expected " + specs[i].name + " " +
                                        shape_str(specs[i].shape));
        }
        store.add(values[i].first, values[i].second);
    }
    return Model(std::move(arch), std::move(store));
}

template <typename T>
Model<T> Model<T>::clone() const {
    ParameterStore<T> store;
    for (const std::string& name : params_.names()) {
        store.add(name, params_.at(name).value());
        store.at(name).set_requires_grad(params_.at(name).requires_grad());
    }
    return Model(arch_, std::move(store));
}

template <typename T>
void Model<T>::set_trainable(const std::vector<std::string>& names) {
    const std::set<std::string> wanted(names.begin(), names.end());
    for (const std::string& n : wanted) {
        if (!params_.contains(n)) throw std::out_of_range("no parameter named " + n);
    }
    for (const std::string& n : params_.names()) params_.at(n).set_requires_grad(wanted.count(n) != 0);
}

template <typename T>
void Model<T>::set_all_trainable(bool flag) {
    for (const std::string& n : params_.names()) params_.at(n).set_requires_grad(flag);
}

template <typename T>
ForwardGraph<T> forward_graph(const Model<T>& model, const Tensor<T>& batch, std::span<const double> voxel_volumes) {
    using ad::Var;
    const ArchConfig& a = model.arch();
    const auto& p = model.params();
    const Shape expected{batch.rank() == 4 ? batch.dim(0) : 0, a.input_slices, a.height, a.width};
    if (batch.rank() != 4 || batch.shape() != expected) {
        throw ShapeError("forward: batch shape " + shape_str(batch.shape()) + " does not match expected [m," +
                         std::to_string(a.input_slices) + "," + std::to_string(a.height) + "," +
                         std::to_string(a.width) + "]");
    }
    const std::size_t m = batch.dim(0);
    if (!voxel_volumes.empty() && voxel_volumes.size() != m) {
        throw ShapeError("forward: " + std::to_string(voxel_volumes.size()) + " voxel volumes for a batch of " +
                         std::to_string(m));
    }

    auto conv_relu = [&](const Var<T>& x, const std::string& prefix) {
        Var<T> y = ad::conv2d(x, p.at(prefix + ".weight"), 1, ad::Padding::same);
        return ad::relu(ad::add_channel_bias(y, p.at(prefix + ".bias")));
    };

    Var<T> x = Var<T>::constant(batch);
    std::vector<Var<T>> skips;
    for (std::size_t s = 0; s < a.encoder_channels.size(); ++s) {
        const std::string stage = "encoder.stage" + std::to_string(s);
        x = conv_relu(conv_relu(x, stage + ".conv1"), stage + ".conv2");
        skips.push_back(x);
        x = ad::max_pool2d(x, 2);
    }
    const Var<T> bottleneck = conv_relu(x, "bottleneck.conv");
    Var<T> head_in = ad::global_avg_pool(bottleneck);

    ForwardGraph<T> out;
    if (has_decoder(a.variant)) {
        Var<T> d = bottleneck;
        const std::size_t stages = a.encoder_channels.size();
        for (std::size_t s = 0; s < stages; ++s) {
            d = ad::nearest_upsample2d(d, 2);
            if (a.skip_connections) {
                const std::vector<Var<T>> parts{d, skips[stages - 1 - s]};
                d = ad::concat<T>(parts, 1);
            }
            d = conv_relu(d, "decoder.stage" + std::to_string(s) + ".conv");
        }
        Var<T> logits = ad::conv2d(d, p.at("decoder.out.weight"), 1, ad::Padding::valid);
        logits = ad::add_channel_bias(logits, p.at("decoder.out.bias"));
        out.seg_probs = ad::sigmoid(logits);

        Tensor<T> vv({m, 1});
        for (std::size_t i = 0; i < m; ++i) {
            vv[i] = static_cast<T>(voxel_volumes.empty() ? a.reference_voxel_volume_mm3 : voxel_volumes[i]);
        }
        out.volume_mm3 = ad::mul(ad::sum_per_sample(out.seg_probs), Var<T>::constant(std::move(vv)));
        if (a.variant == Variant::task_dependent) {
            const Var<T> feature = ad::affine(out.volume_mm3, static_cast<T>(1.0 / a.effective_volume_norm()), T(0));
            const std::vector<Var<T>> parts{head_in, feature};
            head_in = ad::concat<T>(parts, 1);
        }
    }

    Var<T> h = head_in;
    if (a.head_hidden > 0) h = ad::relu(ad::dense(h, p.at("head.hidden.weight"), p.at("head.hidden.bias")));
    out.cls_prob = ad::sigmoid(ad::dense(h, p.at("head.final.weight"), p.at("head.final.bias")));
    return out;
}

template <typename T>
Predictions<T> forward(const Model<T>& model, const Tensor<T>& batch, std::span<const double> voxel_volumes) {
    const ad::NoGradGuard no_grad;
    const ForwardGraph<T> g = forward_graph(model, batch, voxel_volumes);
    Predictions<T> out;
    const auto cls = g.cls_prob.value().data();
    out.cls_prob.assign(cls.begin(), cls.end());
    if (g.seg_probs.defined()) {
        const auto seg = g.seg_probs.value().data();
        out.seg_probs.assign(seg.begin(), seg.end());
        for (T v : g.volume_mm3.value().data()) out.volume_mm3.push_back(static_cast<double>(v));
    }
    return out;
}

template <typename T>
double blood_volume_feature(std::span<const T> seg_probs, double voxel_volume_mm3) {
    if (!(voxel_volume_mm3 > 0.0)) throw std::invalid_argument("voxel volume must be positive");
    double acc = 0.0;
    for (T v : seg_probs) acc += static_cast<double>(v);
    return voxel_volume_mm3 * acc;
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template class Model<float>;
template class Model<double>;
template ForwardGraph<float> forward_graph<float>(const Model<float>&, const Tensor<float>&, std::span<const double>);
template ForwardGraph<double> forward_graph<double>(const Model<double>&, const Tensor<double>&, std::span<const double>);
template Predictions<float> forward<float>(const Model<float>&, const Tensor<float>&, std::span<const double>);
template Predictions<double> forward<double>(const Model<double>&, const Tensor<double>&, std::span<const double>);
template double blood_volume_feature<float>(std::span<const float>, double);
template double blood_volume_feature<double>(std::span<const double>, double);

}  // namespace bloodnet
