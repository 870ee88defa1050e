#ifndef BIOATT_NETWORK_HPP
#define BIOATT_NETWORK_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bioatt/attention.hpp"
#include "bioatt/autodiff.hpp"

namespace bioatt {

enum class Variant { Base, Channel, Spatial, BioAtt };

std::string to_string(Variant v);
Variant parse_variant(const std::string& name);

struct ModelConfig {
    Variant variant = Variant::BioAtt;
    std::size_t channels = 96;
    std::size_t kernel = 5;
    std::size_t n_descriptors = 17;
    std::size_t patch_size = 55;
    std::size_t attention_kernel = 7;
    std::size_t se_reduction = 16;
    std::uint64_t seed = 0;

    void validate() const;
    /// Smallest input extent that survives the five valid convs.
    std::size_t min_extent() const { return 5 * (kernel - 1) + 1; }
    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
    /// Same architecture (everything except the seed).
    bool same_architecture(const ModelConfig& other) const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
using ParameterMap = std::map<std::string, Tensor<T>>;

/// RED-CNN encoder/decoder with the variant's attention block after the third
/// ("middle") and fifth ("last") encoder convolutions.
template <typename T>
class Model {
public:
    /// Builds and initializes from config.seed.
    explicit Model(ModelConfig config);
    Model(ModelConfig config, ParameterMap<T> parameters);

    const ModelConfig& config() const noexcept { return config_; }
    ParameterMap<T>& parameters() noexcept { return parameters_; }
    const ParameterMap<T>& parameters() const noexcept { return parameters_; }
    std::size_t parameter_count() const;
    /// Parameters belonging to attention blocks.
    std::size_t attention_parameter_count() const;

    template <typename U>
    Model<U> cast() const {
        ParameterMap<U> out;
        for (const auto& [name, t] : parameters_) out.emplace(name, t.template cast<U>());
        return Model<U>(config_, std::move(out));
    }

private:
    ModelConfig config_;
    ParameterMap<T> parameters_;
};

/// Parameter names and shapes for a config, in a fixed order.
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config);
/// Prefixes of the two attention insertion points.
inline constexpr const char* kAttentionSites[] = {"middle", "last"};

template <typename T>
struct ForwardTrace {
    Var output;
    /// Parameter name -> its leaf on the tape.
    std::map<std::string, Var> parameters;
    /// One entry per attention site that ran (middle, last); empty for base.
    std::vector<AttentionOutput> attention;
    /// Spatial extent after every conv / deconv stage.
    std::vector<std::size_t> extents;
};

struct ForwardOptions {
    bool parameters_require_grad = false;
    /// Stop after the last attention block (enough for attention-map export).
    bool encoder_only = false;
};

/// input is [B,1,H,W]. priors is [B,N] and required for the bioatt variant;
/// the other variants ignore it.
template <typename T>
ForwardTrace<T> forward(Tape<T>& tape, const Model<T>& model, Var input, const Tensor<T>* priors,
                        const ForwardOptions& options = {});

/// Inference convenience: fresh tape, no gradients, returns the output value.
template <typename T>
Tensor<T> predict(const Model<T>& model, const Tensor<T>& input, const Tensor<T>* priors);

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (little-endian):
//   "BATT" | u32 version | u32 config length | config JSON
//   | u64 epoch | u32 count | count x record          (parameters)
//   | u64 optimizer step | u32 count | count x record (Adam moments "m/<name>", "v/<name>")
// record: u32 name length | name | u32 rank | rank x u64 extent | f32 data

struct OptimizerState {
    std::uint64_t step = 0;
    ParameterMap<float> first_moment;
    ParameterMap<float> second_moment;
};

struct Checkpoint {
    ModelConfig config;
    ParameterMap<float> parameters;
    std::uint64_t epoch = 0;
    OptimizerState optimizer;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
void save_checkpoint(const std::filesystem::path& path, const Model<float>& model, std::uint64_t epoch = 0);
/// When `expected` is given, a checkpoint of a different architecture is an error.
Checkpoint load_checkpoint(const std::filesystem::path& path, const std::optional<ModelConfig>& expected = std::nullopt);
Model<float> load_model(const std::filesystem::path& path, const std::optional<ModelConfig>& expected = std::nullopt);

}  // namespace bioatt

#endif  // BIOATT_NETWORK_HPP
