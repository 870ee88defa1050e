#include "bioatt/network.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

#include "bioatt/error.hpp"
#include "bioatt/random.hpp"

namespace bioatt {

using nlohmann::json;

std::string to_string(Variant v) {
    switch (v) {
        case Variant::Base: return "base";
        case Variant::Channel: return "channel";
        case Variant::Spatial: return "spatial";
        case Variant::BioAtt: return "bioatt";
    }
    return "unknown";
}

Variant parse_variant(const std::string& name) {
    if (name == "base") return Variant::Base;
    if (name == "channel") return Variant::Channel;
    if (name == "spatial") return Variant::Spatial;
    if (name == "bioatt") return Variant::BioAtt;
    throw UsageError("unknown variant '" + name + "' (expected base, channel, spatial or bioatt)");
}

void ModelConfig::validate() const {
    if (channels == 0) throw UsageError("model needs at least one channel");
    if (kernel < 1) throw UsageError("kernel must be positive");
    if (patch_size < min_extent()) {
        throw UsageError("patch size " + std::to_string(patch_size) + " too small for five valid " +
                         std::to_string(kernel) + "x" + std::to_string(kernel) + " convolutions");
    }
    if (variant == Variant::BioAtt || variant == Variant::Spatial) {
        BioAttBlock{variant == Variant::BioAtt ? n_descriptors : 1, attention_kernel}.validate();
    }
    if (variant == Variant::Channel) (void)SEBlock{channels, se_reduction}.hidden();
}

std::string ModelConfig::to_json() const {
    json j;
    j["variant"] = to_string(variant);
    j["channels"] = channels;
    j["kernel"] = kernel;
    j["n_descriptors"] = n_descriptors;
    j["patch_size"] = patch_size;
    j["attention_kernel"] = attention_kernel;
    j["se_reduction"] = se_reduction;
    j["seed"] = seed;
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    try {
        const json j = json::parse(text);
        ModelConfig c;
        c.variant = parse_variant(j.at("variant").get<std::string>());
        c.channels = j.at("channels").get<std::size_t>();
        c.kernel = j.at("kernel").get<std::size_t>();
        c.n_descriptors = j.at("n_descriptors").get<std::size_t>();
        c.patch_size = j.at("patch_size").get<std::size_t>();
        c.attention_kernel = j.at("attention_kernel").get<std::size_t>();
        c.se_reduction = j.at("se_reduction").get<std::size_t>();
        c.seed = j.at("seed").get<std::uint64_t>();
        return c;
    } catch (const json::exception& e) {
        throw FormatError(std::string("invalid model config: ") + e.what());
    } catch (const UsageError& e) {
        throw FormatError(std::string("invalid model config: ") + e.what());
    }
}

bool ModelConfig::same_architecture(const ModelConfig& other) const {
    ModelConfig a = *this, b = other;
    a.seed = b.seed = 0;
    return a == b;
}

std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& c) {
    c.validate();
    const std::size_t C = c.channels, k = c.kernel;
    std::vector<std::pair<std::string, Shape>> layout;
    for (int i = 1; i <= 5; ++i) {
        const std::string name = "enc" + std::to_string(i);
        layout.emplace_back(name + ".weight", Shape{C, i == 1 ? 1 : C, k, k});
        layout.emplace_back(name + ".bias", Shape{C});
    }
    for (int i = 1; i <= 5; ++i) {
        const std::string name = "dec" + std::to_string(i);
        const std::size_t out = i == 5 ? 1 : C;
        layout.emplace_back(name + ".weight", Shape{C, out, k, k});
        layout.emplace_back(name + ".bias", Shape{out});
    }
    for (const char* site : kAttentionSites) {
        const std::string prefix = std::string("att_") + site;
        switch (c.variant) {
            case Variant::Base: break;
            case Variant::Channel: {
                const std::size_t h = SEBlock{C, c.se_reduction}.hidden();
                layout.emplace_back(prefix + ".fc1.weight", Shape{h, C, 1, 1});
                layout.emplace_back(prefix + ".fc1.bias", Shape{h});
                layout.emplace_back(prefix + ".fc2.weight", Shape{C, h, 1, 1});
                layout.emplace_back(prefix + ".fc2.bias", Shape{C});
                break;
            }
            case Variant::Spatial:
            case Variant::BioAtt: {
                const BioAttBlock block{c.variant == Variant::BioAtt ? c.n_descriptors : 1, c.attention_kernel};
                layout.emplace_back(prefix + ".weight", block.weight_shape());
                layout.emplace_back(prefix + ".bias", block.bias_shape());
                break;
            }
        }
    }
    return layout;
}

namespace {

bool is_attention_conv(const std::string& name) {
    return name.starts_with("att_") && name.find(".fc") == std::string::npos;
}

template <typename T>
Tensor<T> init_parameter(const std::string& name, const Shape& shape, const ModelConfig& config,
                         const std::map<std::string, Shape>& shapes) {
    Rng rng(derive_seed(config.seed, name));
    const bool is_bias = name.ends_with(".bias");
    // fan-in of the layer the tensor belongs to
    const std::string weight_name = name.substr(0, name.rfind('.')) + ".weight";
    const Shape& ws = shapes.at(weight_name);
    const bool transposed = name.starts_with("dec");
    const std::size_t fan_in = (transposed ? ws[0] : ws[1]) * ws[2] * ws[3];
    if (is_attention_conv(name)) {
        // Kaiming-style uniform for the attention conv, zero bias.
        if (is_bias) return Tensor<T>(shape);
        return fan_in_uniform<T>(shape, fan_in, std::sqrt(6.0), rng);
    }
    return fan_in_uniform<T>(shape, fan_in, 1.0, rng);
}

}  // namespace

template <typename T>
Model<T>::Model(ModelConfig config) : config_(config) {
    const auto layout = parameter_layout(config_);
    const std::map<std::string, Shape> shapes(layout.begin(), layout.end());
    for (const auto& [name, shape] : layout) parameters_.emplace(name, init_parameter<T>(name, shape, config_, shapes));
}

template <typename T>
Model<T>::Model(ModelConfig config, ParameterMap<T> parameters)
    : config_(config), parameters_(std::move(parameters)) {
    const auto layout = parameter_layout(config_);
    if (layout.size() != parameters_.size()) {
        throw FormatError("expected " + std::to_string(layout.size()) + " parameter tensors, got " +
                          std::to_string(parameters_.size()));
    }
    for (const auto& [name, shape] : layout) {
        const auto it = parameters_.find(name);
        if (it == parameters_.end()) throw FormatError("missing parameter '" + name + "'");
        if (it->second.shape() != shape) {
            throw FormatError("parameter '" + name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                              shape_str(shape));
        }
    }
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : parameters_) n += t.size();
    return n;
}

template <typename T>
std::size_t Model<T>::attention_parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : parameters_) {
        if (name.starts_with("att_")) n += t.size();
    }
    return n;
}

template <typename T>
ForwardTrace<T> forward(Tape<T>& tape, const Model<T>& model, Var input, const Tensor<T>* priors,
                        const ForwardOptions& options) {
    const ModelConfig& cfg = model.config();
    const Shape& in = tape.value(input).shape();
    if (in.size() != 4 || in[1] != 1) throw UsageError("model input must be [B,1,H,W], got " + shape_str(in));
    if (in[2] < cfg.min_extent() || in[3] < cfg.min_extent()) {
        throw UsageError("input extent " + shape_str(in) + " below the minimum " + std::to_string(cfg.min_extent()));
    }
    if (cfg.variant == Variant::BioAtt) {
        if (!priors) throw UsageError("the bioatt variant needs a prior for every sample");
        if (priors->rank() != 2 || priors->dim(0) != in[0] || priors->dim(1) != cfg.n_descriptors) {
            throw UsageError("priors must be [" + std::to_string(in[0]) + "," + std::to_string(cfg.n_descriptors) +
                             "], got " + shape_str(priors->shape()));
        }
    }

    ForwardTrace<T> trace;
    for (const auto& [name, t] : model.parameters()) {
        trace.parameters.emplace(name, tape.leaf(t, options.parameters_require_grad));
    }
    auto p = [&](const std::string& name) { return trace.parameters.at(name); };
    auto conv = [&](Var x, const std::string& layer) {
        Var y = conv2d(tape, x, p(layer + ".weight"), p(layer + ".bias"));
        trace.extents.push_back(tape.value(y).dim(2));
        return y;
    };
    auto deconv = [&](Var x, const std::string& layer) {
        Var y = conv_transpose2d(tape, x, p(layer + ".weight"), p(layer + ".bias"));
        trace.extents.push_back(tape.value(y).dim(2));
        return y;
    };
    auto attend = [&](Var x, const std::string& site) {
        const std::string prefix = "att_" + site;
        switch (cfg.variant) {
            case Variant::Base: return x;
            case Variant::Channel:
                trace.attention.push_back(se_forward(tape, x, p(prefix + ".fc1.weight"), p(prefix + ".fc1.bias"),
                                                     p(prefix + ".fc2.weight"), p(prefix + ".fc2.bias")));
                break;
            case Variant::Spatial:
                trace.attention.push_back(cbam_spatial_forward(tape, x, p(prefix + ".weight"), p(prefix + ".bias")));
                break;
            case Variant::BioAtt:
                trace.attention.push_back(bioatt_forward(tape, x, *priors, p(prefix + ".weight"), p(prefix + ".bias")));
                break;
        }
        return trace.attention.back().features;
    };

    Var residual1 = input;
    Var h = relu(tape, conv(input, "enc1"));
    h = relu(tape, conv(h, "enc2"));
    Var residual2 = h;
    h = relu(tape, conv(h, "enc3"));
    h = attend(h, "middle");
    h = relu(tape, conv(h, "enc4"));
    Var residual3 = h;
    h = relu(tape, conv(h, "enc5"));
    h = attend(h, "last");
    if (options.encoder_only) {
        trace.output = h;
        return trace;
    }

    h = relu(tape, add(tape, deconv(h, "dec1"), residual3));
    h = relu(tape, deconv(h, "dec2"));
    h = relu(tape, add(tape, deconv(h, "dec3"), residual2));
    h = relu(tape, deconv(h, "dec4"));
    // Standardized CT values are negative in air, so the output stage is linear.
    trace.output = add(tape, deconv(h, "dec5"), residual1);
    return trace;
}

template <typename T>
Tensor<T> predict(const Model<T>& model, const Tensor<T>& input, const Tensor<T>* priors) {
    Tape<T> tape;
    Var x = tape.leaf(input, false);
    return tape.value(forward(tape, model, x, priors).output);
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

namespace {

constexpr char kMagic[4] = {'B', 'A', 'T', 'T'};

class Writer {
public:
    explicit Writer(std::vector<char>& buf) : buf_(buf) {}
    template <typename U>
    void put(U value) {
        static_assert(std::is_trivially_copyable_v<U>);
        unsigned char bytes[sizeof(U)];
        std::memcpy(bytes, &value, sizeof(U));
        if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
        buf_.insert(buf_.end(), bytes, bytes + sizeof(U));
    }
    void put_bytes(const std::string& s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
    void put_record(const std::string& name, const Tensor<float>& t) {
        put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
        put_bytes(name);
        put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) put<std::uint64_t>(d);
        for (float v : t.data()) put<float>(v);
    }

private:
    std::vector<char>& buf_;
};

class Reader {
public:
    Reader(const std::vector<char>& buf, std::string path) : buf_(buf), path_(std::move(path)) {}
    template <typename U>
    U get() {
        need(sizeof(U));
        unsigned char bytes[sizeof(U)];
        std::memcpy(bytes, buf_.data() + pos_, sizeof(U));
        if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
        pos_ += sizeof(U);
        U value;
        std::memcpy(&value, bytes, sizeof(U));
        return value;
    }
    std::string get_bytes(std::size_t n) {
        need(n);
        std::string s(buf_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    std::pair<std::string, Tensor<float>> get_record() {
        std::string name = get_bytes(get<std::uint32_t>());
        const std::uint32_t rank = get<std::uint32_t>();
        if (rank > 8) throw FormatError(path_ + ": implausible tensor rank " + std::to_string(rank));
        Shape shape(rank);
        std::size_t count = 1;
        for (auto& d : shape) {
            d = get<std::uint64_t>();
            if (d != 0 && count > remaining() / d) throw FormatError(path_ + ": tensor '" + name + "' overruns the file");
            count *= d;
        }
        need(count * sizeof(float));
        std::vector<float> data(count);
        for (auto& v : data) v = get<float>();
        return {std::move(name), Tensor<float>(std::move(shape), std::move(data))};
    }
    std::size_t remaining() const { return buf_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (remaining() < n) throw FormatError(path_ + ": truncated checkpoint");
    }
    const std::vector<char>& buf_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    // Validates names and shapes against the config.
    (void)Model<float>(ckpt.config, ckpt.parameters);
    std::vector<char> buf;
    Writer w(buf);
    buf.insert(buf.end(), kMagic, kMagic + 4);
    w.put<std::uint32_t>(kCheckpointVersion);
    const std::string config = ckpt.config.to_json();
    w.put<std::uint32_t>(static_cast<std::uint32_t>(config.size()));
    w.put_bytes(config);
    w.put<std::uint64_t>(ckpt.epoch);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.parameters.size()));
    for (const auto& [name, t] : ckpt.parameters) w.put_record(name, t);
    w.put<std::uint64_t>(ckpt.optimizer.step);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.optimizer.first_moment.size() +
                                                    ckpt.optimizer.second_moment.size()));
    for (const auto& [name, t] : ckpt.optimizer.first_moment) w.put_record("m/" + name, t);
    for (const auto& [name, t] : ckpt.optimizer.second_moment) w.put_record("v/" + name, t);

    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw FormatError("cannot write checkpoint " + tmp.string());
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!out) throw FormatError("failed writing checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

void save_checkpoint(const std::filesystem::path& path, const Model<float>& model, std::uint64_t epoch) {
    save_checkpoint(path, Checkpoint{model.config(), model.parameters(), epoch, {}});
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<ModelConfig>& expected) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint " + path.string());
    const std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    Reader r(buf, path.string());
    if (r.get_bytes(4) != std::string(kMagic, 4)) throw FormatError(path.string() + ": not a checkpoint (bad magic)");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint ckpt;
    ckpt.config = ModelConfig::from_json(r.get_bytes(r.get<std::uint32_t>()));
    if (expected && !expected->same_architecture(ckpt.config)) {
        throw FormatError(path.string() + ": checkpoint config " + ckpt.config.to_json() +
                          " disagrees with requested " + expected->to_json());
    }
    ckpt.epoch = r.get<std::uint64_t>();
    const auto n_params = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < n_params; ++i) {
        auto [name, t] = r.get_record();
        if (!ckpt.parameters.emplace(std::move(name), std::move(t)).second) {
            throw FormatError(path.string() + ": duplicate parameter record");
        }
    }
    ckpt.optimizer.step = r.get<std::uint64_t>();
    const auto n_moments = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < n_moments; ++i) {
        auto [name, t] = r.get_record();
        if (name.starts_with("m/")) {
            ckpt.optimizer.first_moment.emplace(name.substr(2), std::move(t));
        } else if (name.starts_with("v/")) {
            ckpt.optimizer.second_moment.emplace(name.substr(2), std::move(t));
        } else {
            throw FormatError(path.string() + ": unknown optimizer record '" + name + "'");
        }
    }
    if (r.remaining() != 0) throw FormatError(path.string() + ": trailing bytes after checkpoint");
    // Shape check against the architecture.
    (void)Model<float>(ckpt.config, ckpt.parameters);
    for (const auto* moments : {&ckpt.optimizer.first_moment, &ckpt.optimizer.second_moment}) {
        for (const auto& [name, t] : *moments) {
            const auto it = ckpt.parameters.find(name);
            if (it == ckpt.parameters.end() || it->second.shape() != t.shape()) {
                throw FormatError(path.string() + ": optimizer state for '" + name + "' does not match a parameter");
            }
        }
    }
    return ckpt;
}

Model<float> load_model(const std::filesystem::path& path, const std::optional<ModelConfig>& expected) {
    Checkpoint ckpt = load_checkpoint(path, expected);
    return Model<float>(ckpt.config, std::move(ckpt.parameters));
}

template class Model<float>;
template class Model<double>;
template ForwardTrace<float> forward(Tape<float>&, const Model<float>&, Var, const Tensor<float>*, const ForwardOptions&);
template ForwardTrace<double> forward(Tape<double>&, const Model<double>&, Var, const Tensor<double>*,
                                      const ForwardOptions&);
template Tensor<float> predict(const Model<float>&, const Tensor<float>&, const Tensor<float>*);
template Tensor<double> predict(const Model<double>&, const Tensor<double>&, const Tensor<double>*);

}  // namespace bioatt
