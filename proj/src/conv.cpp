// Convolution and transposed convolution through im2col + GEMM.
//
// Layouts: conv weights are [F, C, k, k] mapping C input channels to F output
// channels. Transposed-conv weights are [F, C, k, k] as well, mapping F input
// channels back to C output channels, so conv_transpose2d with the same
// weight is the adjoint of the valid conv2d.

#include <Eigen/Core>

#include <string>
#include <vector>

#include "bioatt/autodiff.hpp"
#include "bioatt/parallel.hpp"

namespace bioatt {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

// Sliding-window geometry of one sample: `in` planes are the ones the windows
// read from, `out` the window positions.
struct Geometry {
    std::size_t channels, in_h, in_w, k, pad, out_h, out_w;
    std::size_t rows() const { return channels * k * k; }
    std::size_t cols() const { return out_h * out_w; }
};

template <typename T>
void im2col(const T* src, const Geometry& g, T* col) {
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ki = 0; ki < g.k; ++ki) {
            for (std::size_t kj = 0; kj < g.k; ++kj) {
                T* row = col + ((c * g.k + ki) * g.k + kj) * g.cols();
                for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                    const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh + ki) - static_cast<std::ptrdiff_t>(g.pad);
                    T* dst = row + oh * g.out_w;
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h)) {
                        std::fill_n(dst, g.out_w, T{0});
                        continue;
                    }
                    const T* line = src + (c * g.in_h + static_cast<std::size_t>(ih)) * g.in_w;
                    for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                        const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow + kj) - static_cast<std::ptrdiff_t>(g.pad);
                        dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.in_w)) ? T{0} : line[iw];
                    }
                }
            }
        }
    }
}

// Scatter-add of im2col; dst must be zeroed by the caller if needed.
template <typename T>
void col2im(const T* col, const Geometry& g, T* dst) {
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ki = 0; ki < g.k; ++ki) {
            for (std::size_t kj = 0; kj < g.k; ++kj) {
                const T* row = col + ((c * g.k + ki) * g.k + kj) * g.cols();
                for (std::size_t oh = 0; oh < g.out_h; ++oh) {
                    const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh + ki) - static_cast<std::ptrdiff_t>(g.pad);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
                    T* line = dst + (c * g.in_h + static_cast<std::size_t>(ih)) * g.in_w;
                    const T* srcrow = row + oh * g.out_w;
                    for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                        const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow + kj) - static_cast<std::ptrdiff_t>(g.pad);
                        if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.in_w)) line[iw] += srcrow[ow];
                    }
                }
            }
        }
    }
}

void check_stride(int stride) {
    if (stride != 1) throw UsageError("only stride 1 is supported, got " + std::to_string(stride));
}

template <typename T>
Geometry conv_geometry(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Padding padding) {
    if (x.rank() != 4 || weight.rank() != 4 || bias.rank() != 1) {
        throw UsageError("conv2d expects x[B,C,H,W], weight[F,C,k,k], bias[F]; got " + shape_str(x.shape()) + ", " +
                         shape_str(weight.shape()) + ", " + shape_str(bias.shape()));
    }
    const std::size_t C = x.dim(1), k = weight.dim(2);
    if (weight.dim(1) != C) {
        throw UsageError("conv2d channel mismatch: input has " + std::to_string(C) + ", weight expects " +
                         std::to_string(weight.dim(1)));
    }
    if (weight.dim(3) != k) throw UsageError("conv2d needs a square kernel");
    if (bias.dim(0) != weight.dim(0)) throw UsageError("conv2d bias length does not match output channels");
    std::size_t pad = 0;
    if (padding == Padding::Same) {
        if (k % 2 == 0) throw UsageError("same padding requires an odd kernel, got " + std::to_string(k));
        pad = (k - 1) / 2;
    }
    const std::size_t H = x.dim(2), W = x.dim(3);
    if (H + 2 * pad < k || W + 2 * pad < k) {
        throw UsageError("conv2d input " + shape_str(x.shape()) + " smaller than kernel " + std::to_string(k));
    }
    return Geometry{C, H, W, k, pad, H + 2 * pad - k + 1, W + 2 * pad - k + 1};
}

template <typename T>
Geometry transpose_geometry(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    if (x.rank() != 4 || weight.rank() != 4 || bias.rank() != 1) {
        throw UsageError("conv_transpose2d expects x[B,F,H,W], weight[F,C,k,k], bias[C]; got " + shape_str(x.shape()) +
                         ", " + shape_str(weight.shape()) + ", " + shape_str(bias.shape()));
    }
    if (weight.dim(0) != x.dim(1)) {
        throw UsageError("conv_transpose2d channel mismatch: input has " + std::to_string(x.dim(1)) +
                         ", weight expects " + std::to_string(weight.dim(0)));
    }
    const std::size_t k = weight.dim(2);
    if (weight.dim(3) != k) throw UsageError("conv_transpose2d needs a square kernel");
    if (bias.dim(0) != weight.dim(1)) throw UsageError("conv_transpose2d bias length does not match output channels");
    const std::size_t C = weight.dim(1), H = x.dim(2), W = x.dim(3);
    // Windows live on the (H+k-1)x(W+k-1) output; their positions are the HxW input pixels.
    return Geometry{C, H + k - 1, W + k - 1, k, 0, H, W};
}

// Sum of per-sample partials in sample order, so the result does not depend
// on how samples were spread across workers.
template <typename T>
void reduce_partials(const std::vector<std::vector<T>>& partials, std::span<T> out) {
    for (const auto& p : partials) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += p[i];
    }
}

// Convolutions this small (the attention convs) accumulate each output
// channel with the same straight loop, so an output channel's values do not
// depend on its position among the others.
constexpr std::size_t kRowwiseLimit = 8192;

template <typename T>
void rowwise_product(const T* weight, std::size_t F, std::size_t rows, const T* col, std::size_t cols, T* out) {
    for (std::size_t f = 0; f < F; ++f) {
        Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> dst(out + f * cols, cols);
        for (std::size_t r = 0; r < rows; ++r) {
            dst += weight[f * rows + r] * Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>(col + r * cols, cols);
        }
    }
}

}  // namespace

namespace kernels {

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Padding padding) {
    const Geometry g = conv_geometry(x, weight, bias, padding);
    const std::size_t B = x.dim(0), F = weight.dim(0);
    Tensor<T> out({B, F, g.out_h, g.out_w});
    const ConstMapMat<T> wmat(weight.data().data(), F, g.rows());
    parallel_for(B, [&](std::size_t b) {
        std::vector<T> col(g.rows() * g.cols());
        im2col(x.data().data() + b * g.channels * g.in_h * g.in_w, g, col.data());
        MapMat<T> o(out.data().data() + b * F * g.cols(), F, g.cols());
        if (F * g.rows() <= kRowwiseLimit) {
            for (std::size_t f = 0; f < F; ++f) o.row(f).setConstant(bias[f]);
            rowwise_product(weight.data().data(), F, g.rows(), col.data(), g.cols(), o.data());
        } else {
            o.noalias() = wmat * ConstMapMat<T>(col.data(), g.rows(), g.cols());
            for (std::size_t f = 0; f < F; ++f) o.row(f).array() += bias[f];
        }
    });
    return out;
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    const Geometry g = transpose_geometry(x, weight, bias);
    const std::size_t B = x.dim(0), F = x.dim(1), C = g.channels;
    Tensor<T> out({B, C, g.in_h, g.in_w});
    const ConstMapMat<T> wmat(weight.data().data(), F, g.rows());
    parallel_for(B, [&](std::size_t b) {
        RowMat<T> col = wmat.transpose() * ConstMapMat<T>(x.data().data() + b * F * g.cols(), F, g.cols());
        T* dst = out.data().data() + b * C * g.in_h * g.in_w;
        col2im(col.data(), g, dst);
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t i = 0; i < g.in_h * g.in_w; ++i) dst[c * g.in_h * g.in_w + i] += bias[c];
        }
    });
    return out;
}

template Tensor<float> conv2d(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, Padding);
template Tensor<double> conv2d(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&, Padding);
template Tensor<float> conv_transpose2d(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&);
template Tensor<double> conv_transpose2d(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&);

}  // namespace kernels

template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var weight, Var bias, Padding padding, int stride) {
    check_stride(stride);
    Tensor<T> out = kernels::conv2d(tape.value(x), tape.value(weight), tape.value(bias), padding);
    if (!out.all_finite()) throw InvariantError("non-finite value produced by conv2d");
    return tape.record(std::move(out), {x, weight, bias}, [x, weight, bias, padding](Tape<T>& t, const Tensor<T>& grad) {
        const Tensor<T>& vx = t.value(x);
        const Tensor<T>& vw = t.value(weight);
        const Geometry g = conv_geometry(vx, vw, t.value(bias), padding);
        const std::size_t B = vx.dim(0), F = vw.dim(0);
        const bool want_x = t.requires_grad(x), want_w = t.requires_grad(weight);
        const ConstMapMat<T> wmat(vw.data().data(), F, g.rows());
        Tensor<T>* gx = want_x ? &t.grad_buffer(x) : nullptr;
        std::vector<std::vector<T>> w_partials(want_w ? B : 0);
        parallel_for(B, [&](std::size_t b) {
            const ConstMapMat<T> gout(grad.data().data() + b * F * g.cols(), F, g.cols());
            if (want_w) {
                std::vector<T> col(g.rows() * g.cols());
                im2col(vx.data().data() + b * g.channels * g.in_h * g.in_w, g, col.data());
                w_partials[b].resize(F * g.rows());
                MapMat<T>(w_partials[b].data(), F, g.rows()).noalias() =
                    gout * ConstMapMat<T>(col.data(), g.rows(), g.cols()).transpose();
            }
            if (want_x) {
                RowMat<T> dcol = wmat.transpose() * gout;
                col2im(dcol.data(), g, gx->data().data() + b * g.channels * g.in_h * g.in_w);
            }
        });
        if (want_w) reduce_partials<T>(w_partials, t.grad_buffer(weight).data());
        if (t.requires_grad(bias)) {
            Tensor<T>& gb = t.grad_buffer(bias);
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t f = 0; f < F; ++f) {
                    T acc = 0;
                    const T* row = grad.data().data() + (b * F + f) * g.cols();
                    for (std::size_t i = 0; i < g.cols(); ++i) acc += row[i];
                    gb[f] += acc;
                }
            }
        }
    });
}

template <typename T>
Var conv_transpose2d(Tape<T>& tape, Var x, Var weight, Var bias, int stride) {
    check_stride(stride);
    Tensor<T> out = kernels::conv_transpose2d(tape.value(x), tape.value(weight), tape.value(bias));
    if (!out.all_finite()) throw InvariantError("non-finite value produced by conv_transpose2d");
    return tape.record(std::move(out), {x, weight, bias}, [x, weight, bias](Tape<T>& t, const Tensor<T>& grad) {
        const Tensor<T>& vx = t.value(x);
        const Tensor<T>& vw = t.value(weight);
        const Geometry g = transpose_geometry(vx, vw, t.value(bias));
        const std::size_t B = vx.dim(0), F = vx.dim(1), C = g.channels;
        const std::size_t out_plane = g.in_h * g.in_w;
        const bool want_x = t.requires_grad(x), want_w = t.requires_grad(weight);
        const ConstMapMat<T> wmat(vw.data().data(), F, g.rows());
        Tensor<T>* gx = want_x ? &t.grad_buffer(x) : nullptr;
        std::vector<std::vector<T>> w_partials(want_w ? B : 0);
        parallel_for(B, [&](std::size_t b) {
            std::vector<T> col(g.rows() * g.cols());
            im2col(grad.data().data() + b * C * out_plane, g, col.data());
            const ConstMapMat<T> gcol(col.data(), g.rows(), g.cols());
            if (want_x) {
                MapMat<T> dx(gx->data().data() + b * F * g.cols(), F, g.cols());
                dx.noalias() += wmat * gcol;
            }
            if (want_w) {
                w_partials[b].resize(F * g.rows());
                MapMat<T>(w_partials[b].data(), F, g.rows()).noalias() =
                    ConstMapMat<T>(vx.data().data() + b * F * g.cols(), F, g.cols()) * gcol.transpose();
            }
        });
        if (want_w) reduce_partials<T>(w_partials, t.grad_buffer(weight).data());
        if (t.requires_grad(bias)) {
            Tensor<T>& gb = t.grad_buffer(bias);
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t c = 0; c < C; ++c) {
                    T acc = 0;
                    const T* plane = grad.data().data() + (b * C + c) * out_plane;
                    for (std::size_t i = 0; i < out_plane; ++i) acc += plane[i];
                    gb[c] += acc;
                }
            }
        }
    });
}

template Var conv2d(Tape<float>&, Var, Var, Var, Padding, int);
template Var conv2d(Tape<double>&, Var, Var, Var, Padding, int);
template Var conv_transpose2d(Tape<float>&, Var, Var, Var, int);
template Var conv_transpose2d(Tape<double>&, Var, Var, Var, int);

}  // namespace bioatt
