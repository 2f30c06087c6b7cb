#include "bloodnet/checkpoint.hpp"

#include <openssl/evp.h>

#include <array>
#include <charconv>
#include <map>
#include <memory>
#include <sstream>

#include "bloodnet/binary_io.hpp"
#include "bloodnet/dataset_io.hpp"

namespace bloodnet {
namespace {

std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

std::size_t to_size(const std::string& s, const std::string& key) {
    std::size_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw DataError("checkpoint arch: bad value for " + key);
    return v;
}

double to_double(const std::string& s, const std::string& key) {
    double v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw DataError("checkpoint arch: bad value for " + key);
    return v;
}

std::vector<std::size_t> to_sizes(const std::string& s, const std::string& key) {
    std::vector<std::size_t> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const std::size_t comma = std::min(s.find(',', start), s.size());
        out.push_back(to_size(s.substr(start, comma - start), key));
        start = comma + 1;
    }
    return out;
}

template <typename T>
constexpr std::uint8_t dtype_code() {
    return static_cast<std::uint8_t>(sizeof(T));
}

template <typename T>
void append_tensor_bytes(std::string& out, const Tensor<T>& t) {
    for (T v : t.data()) append_le(out, v);
}

class Reader {
  public:
    explicit Reader(const std::string& bytes) : bytes_(bytes) {}

    const char* take(std::size_t n) {
        if (n > bytes_.size() - pos_) throw DataError("checkpoint truncated at byte " + std::to_string(pos_));
        const char* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }
    template <typename V>
    V get() {
        return read_le<V>(take(sizeof(V)));
    }
    std::string get_string(std::size_t n) { return std::string(take(n), n); }
    bool done() const { return pos_ == bytes_.size(); }

  private:
    const std::string& bytes_;
    std::size_t pos_ = 0;
};

template <typename T, typename S>
Tensor<T> read_payload(Reader& r, Shape shape) {
    Tensor<T> t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(r.get<S>());
    return t;
}

}  // namespace

std::string arch_to_text(const ArchConfig& arch) {
    std::ostringstream out;
    out << "variant " << variant_name(arch.variant) << "\n";
    out << "input_slices " << arch.input_slices << "\n";
    out << "height " << arch.height << "\n";
    out << "width " << arch.width << "\n";
    out << "encoder_channels " << join_sizes(arch.encoder_channels) << "\n";
    out << "bottleneck_channels " << arch.bottleneck_channels << "\n";
    out << "decoder_channels " << join_sizes(arch.decoder_channels) << "\n";
    out << "head_hidden " << arch.head_hidden << "\n";
    out << "skip_connections " << (arch.skip_connections ? 1 : 0) << "\n";
    out << "volume_norm_mm3 " << format_double(arch.effective_volume_norm()) << "\n";
    out << "reference_voxel_volume_mm3 " << format_double(arch.reference_voxel_volume_mm3) << "\n";
    out << "seg_prior " << format_double(arch.seg_prior) << "\n";
    return out.str();
}

ArchConfig arch_from_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        const auto space = line.find(' ');
        if (space == std::string::npos) throw DataError("checkpoint arch: malformed line '" + line + "'");
        kv[line.substr(0, space)] = line.substr(space + 1);
    }
    auto get = [&](const std::string& key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) throw DataError("checkpoint arch: missing " + key);
        return it->second;
    };
    ArchConfig a;
    try {
        a.variant = parse_variant(get("variant"));
    } catch (const std::invalid_argument& e) {
        throw DataError(std::string("checkpoint arch: ") + e.what());
    }
    a.input_slices = to_size(get("input_slices"), "input_slices");
    a.height = to_size(get("height"), "height");
    a.width = to_size(get("width"), "width");
    a.encoder_channels = to_sizes(get("encoder_channels"), "encoder_channels");
    a.bottleneck_channels = to_size(get("bottleneck_channels"), "bottleneck_channels");
    a.decoder_channels = to_sizes(get("decoder_channels"), "decoder_channels");
    a.head_hidden = to_size(get("head_hidden"), "head_hidden");
    a.skip_connections = to_size(get("skip_connections"), "skip_connections") != 0;
    a.volume_norm_mm3 = to_double(get("volume_norm_mm3"), "volume_norm_mm3");
    a.reference_voxel_volume_mm3 = to_double(get("reference_voxel_volume_mm3"), "reference_voxel_volume_mm3");
    a.seg_prior = to_double(get("seg_prior"), "seg_prior");
    if (kv.size() != 12) throw DataError("checkpoint arch: unexpected fields");
    try {
        a.validate();
    } catch (const std::invalid_argument& e) {
        throw DataError(std::string("checkpoint arch: ") + e.what());
    }
    return a;
}

template <typename T>
std::string serialize_checkpoint(const Model<T>& model) {
    std::string out(kCheckpointMagic);
    append_le(out, kCheckpointVersion);
    // The normaliser is stored resolved so later default changes cannot alter a loaded model.
    const std::string arch = arch_to_text(model.arch());
    append_le(out, static_cast<std::uint32_t>(arch.size()));
    out += arch;
    const auto& names = model.params().names();
    append_le(out, static_cast<std::uint32_t>(names.size()));
    for (const std::string& n : names) {
        const Tensor<T>& t = model.params().at(n).value();
        append_le(out, static_cast<std::uint32_t>(n.size()));
        out += n;
        append_le(out, dtype_code<T>());
        append_le(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) append_le(out, static_cast<std::uint64_t>(d));
        append_tensor_bytes(out, t);
    }
    return out;
}

ArchConfig read_header(Reader& r, std::size_t size) {
    if (size < kCheckpointMagic.size() || r.get_string(kCheckpointMagic.size()) != kCheckpointMagic) {
        throw DataError("not a bloodnet checkpoint (bad magic)");
    }
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw DataError("unsupported checkpoint version " + std::to_string(version));
    }
    return arch_from_text(r.get_string(r.get<std::uint32_t>()));
}

CheckpointInfo inspect_checkpoint(const std::string& bytes) {
    Reader r(bytes);
    CheckpointInfo info{read_header(r, bytes.size()), 0};
    if (r.get<std::uint32_t>() == 0) throw DataError("checkpoint holds no parameters");
    r.take(r.get<std::uint32_t>());
    info.value_bytes = r.get<std::uint8_t>();
    return info;
}

template <typename T>
Model<T> deserialize_checkpoint(const std::string& bytes) {
    Reader r(bytes);
    ArchConfig arch = read_header(r, bytes.size());
    const auto count = r.get<std::uint32_t>();
    std::vector<std::pair<std::string, Tensor<T>>> values;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.get_string(r.get<std::uint32_t>());
        const auto dtype = r.get<std::uint8_t>();
        const auto rank = r.get<std::uint32_t>();
        if (rank == 0 || rank > 8) throw DataError("checkpoint record " + name + ": bad rank");
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
        if (dtype == 4) {
            values.emplace_back(std::move(name), read_payload<T, float>(r, std::move(shape)));
        } else if (dtype == 8) {
            values.emplace_back(std::move(name), read_payload<T, double>(r, std::move(shape)));
        } else {
            throw DataError("checkpoint record " + name + ": unknown dtype " + std::to_string(dtype));
        }
    }
    if (!r.done()) throw DataError("checkpoint has trailing bytes");
    try {
        return Model<T>::from_values(std::move(arch), values);
    } catch (const std::invalid_argument& e) {
        throw DataError(std::string("checkpoint does not match its arch: ") + e.what());
    }
}

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path) {
    write_file(path, serialize_checkpoint(model));
}

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
    return deserialize_checkpoint<T>(read_file(path));
}

std::string sha256_hex(std::string_view bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
        throw std::runtime_error("sha256 failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 0xf];
    }
    return out;
}

template <typename T>
std::string parameter_digest(const Model<T>& model, const std::string& name) {
    const Tensor<T>& t = model.params().at(name).value();
    std::string bytes;
    for (std::size_t d : t.shape()) append_le(bytes, static_cast<std::uint64_t>(d));
    append_tensor_bytes(bytes, t);
    return sha256_hex(bytes);
}

template <typename T>
std::map<std::string, std::string> parameter_digests(const Model<T>& model) {
    std::map<std::string, std::string> out;
    for (const std::string& n : model.params().names()) out[n] = parameter_digest(model, n);
    return out;
}

#define BLOODNET_CHECKPOINT_INSTANTIATE(T)                                                    \
    template std::string serialize_checkpoint<T>(const Model<T>&);                            \
    template Model<T> deserialize_checkpoint<T>(const std::string&);                          \
    template void save_checkpoint<T>(const Model<T>&, const std::filesystem::path&);          \
    template Model<T> load_checkpoint<T>(const std::filesystem::path&);                       \
    template std::string parameter_digest<T>(const Model<T>&, const std::string&);            \
    template std::map<std::string, std::string> parameter_digests<T>(const Model<T>&);

BLOODNET_CHECKPOINT_INSTANTIATE(float)
BLOODNET_CHECKPOINT_INSTANTIATE(double)

}  // namespace bloodnet
