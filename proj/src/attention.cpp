#include "bioatt/attention.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "bioatt/error.hpp"

namespace bioatt {

void BioAttBlock::validate() const {
    if (n_descriptors == 0) throw UsageError("attention block needs at least one descriptor");
    if (kernel % 2 == 0) throw UsageError("attention kernel must be odd, got " + std::to_string(kernel));
}

std::size_t SEBlock::hidden() const {
    if (channels == 0 || reduction == 0) throw UsageError("SE block needs positive channels and reduction");
    if (channels < reduction) return 1;
    if (channels % reduction != 0) {
        throw UsageError("SE reduction " + std::to_string(reduction) + " does not divide " + std::to_string(channels) +
                         " channels");
    }
    return channels / reduction;
}

namespace {

template <typename T>
AttentionOutput spatial_attention(Tape<T>& tape, Var x, Var weight, Var bias, const Tensor<T>* priors) {
    const Shape& xs = tape.value(x).shape();
    if (xs.size() != 4) throw UsageError("attention expects x[B,C,H,W], got " + shape_str(xs));
    const Shape& ws = tape.value(weight).shape();
    if (ws.size() != 4 || ws[1] != 2 || ws[2] != ws[3]) {
        throw UsageError("attention weight must be [N,2,k,k], got " + shape_str(ws));
    }
    const std::size_t B = xs[0], N = ws[0];
    if (N == 0) throw UsageError("attention block needs at least one descriptor");

    Var avg = channel_mean(tape, x);
    Var mx = channel_max(tape, x);
    Var pooled = concat_channels(tape, avg, mx);
    Var maps = sigmoid(tape, conv2d(tape, pooled, weight, bias, Padding::Same));
    if (!priors) return {mul(tape, x, maps), maps, maps};

    Tensor<T> broadcast_priors;
    if (priors->rank() == 1 && priors->dim(0) == N) {
        broadcast_priors = priors->reshaped({1, N, 1, 1});
    } else if (priors->rank() == 2 && priors->dim(0) == B && priors->dim(1) == N) {
        broadcast_priors = priors->reshaped({B, N, 1, 1});
    } else {
        throw UsageError("prior shape " + shape_str(priors->shape()) + " does not match " + std::to_string(N) +
                         " attention channels for batch " + std::to_string(B));
    }
    Var p = tape.leaf(std::move(broadcast_priors), false);
    Var fused = fuse_organ_maps(tape, mul(tape, maps, p));
    return {mul(tape, x, fused), maps, fused};
}

}  // namespace

template <typename T>
Var fuse_organ_maps(Tape<T>& tape, Var weighted) {
    const Tensor<T>& w = tape.value(weighted);
    if (w.rank() != 4) throw UsageError("fuse_organ_maps expects [B,N,H,W], got " + shape_str(w.shape()));
    const std::size_t B = w.dim(0), N = w.dim(1), HW = w.dim(2) * w.dim(3);
    Tensor<T> out({B, 1, w.dim(2), w.dim(3)});
    std::vector<T> terms(N);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < HW; ++i) {
            for (std::size_t n = 0; n < N; ++n) terms[n] = w[(b * N + n) * HW + i];
            std::sort(terms.begin(), terms.end());
            double acc = 0;  // one rounding to T at the end
            for (T v : terms) acc += v;
            out[b * HW + i] = static_cast<T>(acc);
        }
    }
    return tape.record(std::move(out), {weighted}, [weighted, B, N, HW](Tape<T>& t, const Tensor<T>& g) {
        Tensor<T>& gw = t.grad_buffer(weighted);
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t i = 0; i < HW; ++i) gw[(b * N + n) * HW + i] += g[b * HW + i];
            }
        }
    });
}

template <typename T>
AttentionOutput bioatt_forward(Tape<T>& tape, Var x, const Tensor<T>& priors, Var weight, Var bias) {
    return spatial_attention(tape, x, weight, bias, &priors);
}

template <typename T>
AttentionOutput cbam_spatial_forward(Tape<T>& tape, Var x, Var weight, Var bias) {
    if (tape.value(weight).dim(0) != 1) throw UsageError("CBAM spatial attention has exactly one output map");
    return spatial_attention<T>(tape, x, weight, bias, nullptr);
}

template <typename T>
AttentionOutput se_forward(Tape<T>& tape, Var x, Var w1, Var b1, Var w2, Var b2) {
    Var squeezed = spatial_mean(tape, x);
    Var hidden = relu(tape, conv2d(tape, squeezed, w1, b1));
    Var gate = sigmoid(tape, conv2d(tape, hidden, w2, b2));
    return {mul(tape, x, gate), gate, gate};
}

template <typename T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, double gain, Rng& rng) {
    const double bound = gain / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    Tensor<T> t(std::move(shape));
    for (auto& v : t.storage()) v = static_cast<T>(rng.uniform(-bound, bound));
    return t;
}

std::vector<unsigned char> to_gray(std::span<const float> plane) {
    std::vector<unsigned char> out(plane.size(), 128);
    if (plane.empty()) return out;
    const auto [lo, hi] = std::minmax_element(plane.begin(), plane.end());
    const double min = *lo, range = static_cast<double>(*hi) - min;
    if (range <= 0) return out;
    for (std::size_t i = 0; i < plane.size(); ++i) {
        out[i] = static_cast<unsigned char>(std::lround(255.0 * (plane[i] - min) / range));
    }
    return out;
}

void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               std::span<const unsigned char> pixels) {
    if (pixels.size() != height * width) throw UsageError("PGM pixel count does not match dimensions");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path.string());
    out << "P5\n" << width << ' ' << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (!out) throw FormatError("failed writing " + path.string());
}

std::string file_token(const std::string& name) {
    std::string out = name;
    for (char& c : out) {
        if (c == ' ' || c == '/' || c == '\\' || c == ':') c = '_';
    }
    return out;
}

std::vector<std::filesystem::path> export_attention_maps(const Tensor<float>& organ_maps, const Tensor<float>& fused,
                                                         const PriorDistribution& priors,
                                                         const DescriptorSet& descriptors,
                                                         const std::filesystem::path& out_dir) {
    Tensor<float> maps = organ_maps;
    if (maps.rank() == 4 && maps.dim(0) == 1) maps = maps.reshaped({maps.dim(1), maps.dim(2), maps.dim(3)});
    if (maps.rank() != 3) throw UsageError("organ maps must be [N,H,W], got " + shape_str(organ_maps.shape()));
    const std::size_t N = maps.dim(0), H = maps.dim(1), W = maps.dim(2);
    if (N != descriptors.size() || N != priors.size()) {
        throw UsageError("organ map count " + std::to_string(N) + " does not match descriptors/priors");
    }
    if (fused.size() != H * W) throw UsageError("fused map does not match the organ map extent");

    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw FormatError("cannot create " + out_dir.string() + ": " + ec.message());

    std::vector<std::filesystem::path> written;
    const auto order = priors.ranking();
    for (std::size_t r = 0; r < order.size(); ++r) {
        const std::size_t n = order[r];
        const auto path = out_dir / ("rank_" + std::to_string(r + 1) + "_" + file_token(descriptors[n]) + ".pgm");
        write_pgm(path, H, W, to_gray(maps.data().subspan(n * H * W, H * W)));
        written.push_back(path);
    }
    const auto fused_path = out_dir / "fused.pgm";
    write_pgm(fused_path, H, W, to_gray(fused.data()));
    written.push_back(fused_path);
    return written;
}

#define BIOATT_INSTANTIATE(T)                                                                     \
    template Var fuse_organ_maps(Tape<T>&, Var);                                                  \
    template AttentionOutput bioatt_forward(Tape<T>&, Var, const Tensor<T>&, Var, Var);           \
    template AttentionOutput cbam_spatial_forward(Tape<T>&, Var, Var, Var);                       \
    template AttentionOutput se_forward(Tape<T>&, Var, Var, Var, Var, Var);                       \
    template Tensor<T> fan_in_uniform(Shape, std::size_t, double, Rng&);

BIOATT_INSTANTIATE(float)
BIOATT_INSTANTIATE(double)

#undef BIOATT_INSTANTIATE

}  // namespace bioatt
