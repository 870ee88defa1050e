#ifndef BIOATT_AUTODIFF_HPP
#define BIOATT_AUTODIFF_HPP

#include <cstddef>
#include <functional>
#include <vector>

#include "bioatt/tensor.hpp"

namespace bioatt {

/// Handle to a value recorded on a Tape. Only meaningful for the tape that
/// produced it.
struct Var {
    std::size_t index = 0;
};

/// Reverse-mode tape. Ops append nodes in execution order; backward() walks
/// them in exact reverse order. A tape belongs to one thread.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    /// Record an input. Parameters pass requires_grad = true.
    Var leaf(Tensor<T> value, bool requires_grad = false);

    /// Record the result of an op. `backward` receives the output cotangent and
    /// must accumulate into the parents via accumulate(). It is dropped when
    /// no parent requires a gradient.
    Var record(Tensor<T> value, std::initializer_list<Var> parents, BackwardFn backward);

    const Tensor<T>& value(Var v) const { return nodes_.at(v.index).value; }
    bool requires_grad(Var v) const { return nodes_.at(v.index).requires_grad; }

    /// Gradient of the last backward() loss w.r.t. v; zeros if none reached it.
    Tensor<T> grad(Var v) const;

    void accumulate(Var v, const Tensor<T>& g);
    /// Direct access to a node's gradient buffer (allocated on first use).
    Tensor<T>& grad_buffer(Var v);

    void backward(Var loss);

    std::size_t size() const noexcept { return nodes_.size(); }
    void clear();

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

enum class Padding { Valid, Same };

// Convolution family. Only stride 1 is supported.
template <typename T>
Var conv2d(Tape<T>& tape, Var x, Var weight, Var bias, Padding padding = Padding::Valid,
           int stride = 1);
template <typename T>
Var conv_transpose2d(Tape<T>& tape, Var x, Var weight, Var bias, int stride = 1);

template <typename T> Var relu(Tape<T>& tape, Var x);
/// Output clamped to the open interval (0,1) of T.
template <typename T> Var sigmoid(Tape<T>& tape, Var x);
/// Elementwise with broadcasting over axes of extent 1.
template <typename T> Var add(Tape<T>& tape, Var a, Var b);
template <typename T> Var mul(Tape<T>& tape, Var a, Var b);
template <typename T> Var scale(Tape<T>& tape, Var x, T factor);

/// [B,C,H,W] -> [B,1,H,W]
template <typename T> Var channel_mean(Tape<T>& tape, Var x);
/// [B,C,H,W] -> [B,1,H,W]; the gradient goes to the first maximal channel.
template <typename T> Var channel_max(Tape<T>& tape, Var x);
/// Concatenate 4-D tensors along the channel axis.
template <typename T> Var concat_channels(Tape<T>& tape, Var a, Var b);
/// Sum over one axis, keeping it with extent 1.
template <typename T> Var sum_over_axis(Tape<T>& tape, Var x, std::size_t axis);
/// [B,C,H,W] -> [B,C,1,1]
template <typename T> Var spatial_mean(Tape<T>& tape, Var x);
template <typename T> Var sum(Tape<T>& tape, Var x);
template <typename T> Var softmax_1d(Tape<T>& tape, Var x);
template <typename T> Var mse_loss(Tape<T>& tape, Var prediction, Var target);

// Non-recording kernels, shared by the ops above and exposed for tests.
namespace kernels {

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Padding padding);
template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// Softmax with max subtraction.
template <typename T>
std::vector<T> softmax(std::span<const T> scores);

}  // namespace kernels

}  // namespace bioatt

#endif  // BIOATT_AUTODIFF_HPP
