#ifndef BIOATT_ATTENTION_HPP
#define BIOATT_ATTENTION_HPP

#include <filesystem>
#include <string>
#include <vector>

#include "bioatt/autodiff.hpp"
#include "bioatt/priors.hpp"
#include "bioatt/random.hpp"

namespace bioatt {

/// Organ-aware spatial attention: channel avg/max pooling, a same-padded
/// k x k conv to one sigmoid map per descriptor, prior-weighted sum of the
/// maps, and rescaling of the input by the fused map.
struct BioAttBlock {
    std::size_t n_descriptors = 17;
    std::size_t kernel = 7;

    void validate() const;
    Shape weight_shape() const { return {n_descriptors, 2, kernel, kernel}; }
    Shape bias_shape() const { return {n_descriptors}; }
    std::size_t parameter_count() const { return n_descriptors * (2 * kernel * kernel + 1); }
};

/// Squeeze-and-excitation channel gate: global average pool, C -> C/r -> C
/// pointwise layers with ReLU then sigmoid.
struct SEBlock {
    std::size_t channels = 96;
    std::size_t reduction = 16;

    /// C/r, clamped to at least 1.
    std::size_t hidden() const;
    std::size_t parameter_count() const { return 2 * channels * hidden() + hidden() + channels; }
};

/// Vars of one attention application. organ_maps is A [B,N,H,W] and fused is
/// A' [B,1,H,W]; for the SE gate both refer to the channel gate [B,C,1,1].
struct AttentionOutput {
    Var features;
    Var organ_maps;
    Var fused;
};

/// priors is [B,N] (one row per sample) or [N] (shared by the batch). It is
/// held constant: no gradient flows to it.
template <typename T>
AttentionOutput bioatt_forward(Tape<T>& tape, Var x, const Tensor<T>& priors, Var weight, Var bias);

/// CBAM spatial sub-module: the same block with a single attention channel
/// and no prior weighting.
template <typename T>
AttentionOutput cbam_spatial_forward(Tape<T>& tape, Var x, Var weight, Var bias);

/// w1 [C/r,C,1,1], b1 [C/r], w2 [C,C/r,1,1], b2 [C].
template <typename T>
AttentionOutput se_forward(Tape<T>& tape, Var x, Var w1, Var b1, Var w2, Var b2);

/// Sum over the descriptor axis of W [B,N,H,W] -> [B,1,H,W]. Each pixel's
/// terms are added in sorted order, so reordering descriptors does not change
/// a single bit of the result.
template <typename T>
Var fuse_organ_maps(Tape<T>& tape, Var weighted);

/// Uniform fan-in scaled initialization: U(-bound, bound), bound = gain / sqrt(fan_in).
template <typename T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, double gain, Rng& rng);

/// Writes one 8-bit PGM per organ map, named rank_<r>_<descriptor>.pgm by
/// descending prior, plus fused.pgm for A'. Each map is min-max normalized on
/// its own; a constant map renders as 128. organ_maps is [N,H,W] or [1,N,H,W].
/// Returns the written paths, organ maps first in rank order.
std::vector<std::filesystem::path> export_attention_maps(const Tensor<float>& organ_maps, const Tensor<float>& fused,
                                                         const PriorDistribution& priors,
                                                         const DescriptorSet& descriptors,
                                                         const std::filesystem::path& out_dir);

/// Min-max normalization to 0..255 (128 for a constant plane).
std::vector<unsigned char> to_gray(std::span<const float> plane);
void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               std::span<const unsigned char> pixels);

/// Descriptor name made safe for a filename (spaces and separators to '_').
std::string file_token(const std::string& name);

}  // namespace bioatt

#endif  // BIOATT_ATTENTION_HPP
