#include "bioatt/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

namespace bioatt {

namespace {

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
    if (!t.all_finite()) throw InvariantError(std::string("non-finite value produced by ") + op);
}

void require_rank(const Shape& s, std::size_t rank, const char* op) {
    if (s.size() != rank) {
        throw UsageError(std::string(op) + " expects rank " + std::to_string(rank) + ", got " + shape_str(s));
    }
}

// Operand strides for a broadcast binary op; axes of extent 1 get stride 0.
struct Broadcast {
    Shape out;
    std::vector<std::size_t> a_stride;
    std::vector<std::size_t> b_stride;
    bool trivial = false;

    // fn(flat_out, flat_a, flat_b) for every output element, in order.
    template <typename Fn>
    void for_each(Fn&& fn) const {
        const std::size_t n = shape_size(out);
        if (trivial) {
            for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
            return;
        }
        const std::size_t rank = out.size();
        std::vector<std::size_t> idx(rank, 0);
        std::size_t ia = 0, ib = 0;
        for (std::size_t flat = 0; flat < n; ++flat) {
            fn(flat, ia, ib);
            for (std::size_t ax = rank; ax-- > 0;) {
                ia += a_stride[ax];
                ib += b_stride[ax];
                if (++idx[ax] < out[ax]) break;
                ia -= a_stride[ax] * idx[ax];
                ib -= b_stride[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
    }
};

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
    Broadcast plan;
    if (a == b) {
        plan.out = a;
        plan.trivial = true;
        return plan;
    }
    if (a.size() != b.size()) {
        throw UsageError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
    const std::size_t rank = a.size();
    plan.out.resize(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        if (a[i] != b[i] && a[i] != 1 && b[i] != 1) {
            throw UsageError(std::string(op) + ": incompatible broadcast " + shape_str(a) + " vs " + shape_str(b));
        }
        plan.out[i] = std::max(a[i], b[i]);
    }
    plan.a_stride.resize(rank);
    plan.b_stride.resize(rank);
    std::size_t ka = 1, kb = 1;
    for (std::size_t i = rank; i-- > 0;) {
        plan.a_stride[i] = a[i] == 1 ? 0 : ka;
        plan.b_stride[i] = b[i] == 1 ? 0 : kb;
        ka *= a[i];
        kb *= b[i];
    }
    return plan;
}

}  // namespace

template <typename T>
Var Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
    check_finite(value, "leaf");
    nodes_.push_back(Node{std::move(value), {}, requires_grad, {}});
    return Var{nodes_.size() - 1};
}

template <typename T>
Var Tape<T>::record(Tensor<T> value, std::initializer_list<Var> parents, BackwardFn backward) {
    bool needs = false;
    for (Var p : parents) needs = needs || nodes_.at(p.index).requires_grad;
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : BackwardFn{}});
    return Var{nodes_.size() - 1};
}

template <typename T>
Tensor<T> Tape<T>::grad(Var v) const {
    const Node& node = nodes_.at(v.index);
    if (node.grad.size() == 0 && node.value.size() != 0) return Tensor<T>(node.value.shape());
    return node.grad;
}

template <typename T>
Tensor<T>& Tape<T>::grad_buffer(Var v) {
    Node& node = nodes_.at(v.index);
    if (node.grad.shape() != node.value.shape() || node.grad.size() != node.value.size()) {
        node.grad = Tensor<T>(node.value.shape());
    }
    return node.grad;
}

template <typename T>
void Tape<T>::accumulate(Var v, const Tensor<T>& g) {
    if (!nodes_.at(v.index).requires_grad) return;
    Tensor<T>& buf = grad_buffer(v);
    if (g.size() != buf.size()) {
        throw UsageError("gradient shape " + shape_str(g.shape()) + " does not match " + shape_str(buf.shape()));
    }
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

template <typename T>
void Tape<T>::backward(Var loss) {
    if (backward_done_) throw UsageError("backward called twice on the same tape; re-run forward first");
    const Node& root = nodes_.at(loss.index);
    if (root.value.size() != 1) throw UsageError("backward needs a scalar loss, got " + shape_str(root.value.shape()));
    backward_done_ = true;
    if (!root.requires_grad) return;
    grad_buffer(loss).fill(T{1});
    for (std::size_t i = loss.index + 1; i-- > 0;) {
        Node& node = nodes_[i];
        if (!node.backward || node.grad.size() == 0) continue;
        node.backward(*this, node.grad);
    }
}

template <typename T>
void Tape<T>::clear() {
    nodes_.clear();
    backward_done_ = false;
}

// ---------------------------------------------------------------------------
// Pointwise ops

template <typename T>
Var relu(Tape<T>& tape, Var x) {
    Tensor<T> out = tape.value(x);
    for (auto& v : out.storage()) v = v > T{0} ? v : T{0};
    check_finite(out, "relu");
    return tape.record(std::move(out), {x}, [x](Tape<T>& t, const Tensor<T>& g) {
        const Tensor<T>& in = t.value(x);
        Tensor<T>& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (in[i] > T{0}) gx[i] += g[i];
        }
    });
}

template <typename T>
Var sigmoid(Tape<T>& tape, Var x) {
    Tensor<T> out = tape.value(x);
    for (auto& v : out.storage()) {
        // Split by sign so exp never overflows.
        if (v >= T{0}) {
            v = T{1} / (T{1} + std::exp(-v));
        } else {
            const T e = std::exp(v);
            v = e / (T{1} + e);
        }
        // Keep the output strictly inside (0,1) where rounding would saturate.
        v = std::clamp(v, std::numeric_limits<T>::min(), T{1} - std::numeric_limits<T>::epsilon() / 2);
    }
    check_finite(out, "sigmoid");
    const Var y{tape.size()};  // index the output will get
    return tape.record(std::move(out), {x}, [x, y](Tape<T>& t, const Tensor<T>& g) {
        const Tensor<T>& s = t.value(y);
        Tensor<T>& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s[i] * (T{1} - s[i]);
    });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
    const Tensor<T>& va = tape.value(a);
    const Tensor<T>& vb = tape.value(b);
    const Broadcast plan = plan_broadcast(va.shape(), vb.shape(), "add");
    Tensor<T> out(plan.out);
    plan.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = va[ia] + vb[ib]; });
    check_finite(out, "add");
    return tape.record(std::move(out), {a, b}, [a, b, plan](Tape<T>& t, const Tensor<T>& g) {
        if (t.requires_grad(a)) {
            Tensor<T>& ga = t.grad_buffer(a);
            plan.for_each([&](std::size_t i, std::size_t ia, std::size_t) { ga[ia] += g[i]; });
        }
        if (t.requires_grad(b)) {
            Tensor<T>& gb = t.grad_buffer(b);
            plan.for_each([&](std::size_t i, std::size_t, std::size_t ib) { gb[ib] += g[i]; });
        }
    });
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
    const Tensor<T>& va = tape.value(a);
    const Tensor<T>& vb = tape.value(b);
    const Broadcast plan = plan_broadcast(va.shape(), vb.shape(), "mul");
    Tensor<T> out(plan.out);
    plan.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = va[ia] * vb[ib]; });
    check_finite(out, "mul");
    return tape.record(std::move(out), {a, b}, [a, b, plan](Tape<T>& t, const Tensor<T>& g) {
        const Tensor<T>& va = t.value(a);
        const Tensor<T>& vb = t.value(b);
        if (t.requires_grad(a)) {
            Tensor<T>& ga = t.grad_buffer(a);
            plan.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += g[i] * vb[ib]; });
        }
        if (t.requires_grad(b)) {
            Tensor<T>& gb = t.grad_buffer(b);
            plan.for_each([&](std::size_t i, std::size_t ia, std::size_t ib) { gb[ib] += g[i] * va[ia]; });
        }
    });
}

template <typename T>
Var scale(Tape<T>& tape, Var x, T factor) {
    Tensor<T> out = tape.value(x);
    for (auto& v : out.storage()) v *= factor;
    check_finite(out, "scale");
    return tape.record(std::move(out), {x}, [x, factor](Tape<T>& t, const Tensor<T>& g) {
        Tensor<T>& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
    });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var channel_mean(Tape<T>& tape, Var x) {
    const Tensor<T>& in = tape.value(x);
    require_rank(in.shape(), 4, "channel_mean");
    const std::size_t B = in.dim(0), C = in.dim(1), HW = in.dim(2) * in.dim(3);
    if (C == 0) throw UsageError("channel_mean over zero channels");
    Tensor<T> out({B, 1, in.dim(2), in.dim(3)});
    for (std::size_t b = 0; b < B; ++b) {
        T* o = out.data().data() + b * HW;
        for (std::size_t c = 0; c < C; ++c) {
            const T* src = in.data().data() + (b * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) o[i] += src[i];
        }
        for (std::size_t i = 0; i < HW; ++i) o[i] /= static_cast<T>(C);
    }
    check_finite(out, "channel_mean");
    return tape.record(std::move(out), {x}, [x, B, C, HW](Tape<T>& t, const Tensor<T>& g) {
        Tensor<T>& gx = t.grad_buffer(x);
        const T inv = T{1} / static_cast<T>(C);
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t c = 0; c < C; ++c) {
                for (std::size_t i = 0; i < HW; ++i) gx[(b * C + c) * HW + i] += g[b * HW + i] * inv;
            }
        }
    });
}

template <typename T>
Var channel_max(Tape<T>& tape, Var x) {
    const Tensor<T>& in = tape.value(x);
    require_rank(in.shape(), 4, "channel_max");
    const std::size_t B = in.dim(0), C = in.dim(1), HW = in.dim(2) * in.dim(3);
    if (C == 0) throw UsageError("channel_max over zero channels");
    Tensor<T> out({B, 1, in.dim(2), in.dim(3)});
    auto argmax = std::make_shared<std::vector<std::size_t>>(B * HW, 0);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < HW; ++i) {
            std::size_t best = 0;
            T best_v = in[b * C * HW + i];
            for (std::size_t c = 1; c < C; ++c) {
                const T v = in[(b * C + c) * HW + i];
                if (v > best_v) {  // strict: ties stay on the first index
                    best_v = v;
                    best = c;
                }
            }
            out[b * HW + i] = best_v;
            (*argmax)[b * HW + i] = best;
        }
    }
    check_finite(out, "channel_max");
    return tape.record(std::move(out), {x}, [x, B, C, HW, argmax](Tape<T>& t, const Tensor<T>& g) {
        Tensor<T>& gx = t.grad_buffer(x);
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t i = 0; i < HW; ++i) gx[(b * C + (*argmax)[b * HW + i]) * HW + i] += g[b * HW + i];
        }
    });
}

template <typename T>
Var concat_channels(Tape<T>& tape, Var a, Var b) {
    const Tensor<T>& va = tape.value(a);
    const Tensor<T>& vb = tape.value(b);
    require_rank(va.shape(), 4, "concat_channels");
    require_rank(vb.shape(), 4, "concat_channels");
    if (va.dim(0) != vb.dim(0) || va.dim(2) != vb.dim(2) || va.dim(3) != vb.dim(3)) {
        throw UsageError("concat_channels shape mismatch " + shape_str(va.shape()) + " vs " + shape_str(vb.shape()));
    }
    const std::size_t B = va.dim(0), Ca = va.dim(1), Cb = vb.dim(1), HW = va.dim(2) * va.dim(3);
    Tensor<T> out({B, Ca + Cb, va.dim(2), va.dim(3)});
    for (std::size_t n = 0; n < B; ++n) {
        std::copy_n(va.data().data() + n * Ca * HW, Ca * HW, out.data().data() + n * (Ca + Cb) * HW);
        std::copy_n(vb.data().data() + n * Cb * HW, Cb * HW, out.data().data() + (n * (Ca + Cb) + Ca) * HW);
    }
    return tape.record(std::move(out), {a, b}, [a, b, B, Ca, Cb, HW](Tape<T>& t, const Tensor<T>& g) {
        if (t.requires_grad(a)) {
            Tensor<T>& ga = t.grad_buffer(a);
            for (std::size_t n = 0; n < B; ++n) {
                for (std::size_t i = 0; i < Ca * HW; ++i) ga[n * Ca * HW + i] += g[n * (Ca + Cb) * HW + i];
            }
        }
        if (t.requires_grad(b)) {
            Tensor<T>& gb = t.grad_buffer(b);
            for (std::size_t n = 0; n < B; ++n) {
                for (std::size_t i = 0; i < Cb * HW; ++i) gb[n * Cb * HW + i] += g[(n * (Ca + Cb) + Ca) * HW + i];
            }
        }
    });
}

template <typename T>
Var sum_over_axis(Tape<T>& tape, Var x, std::size_t axis) {
    const Tensor<T>& in = tape.value(x);
    if (axis >= in.rank()) throw UsageError("sum_over_axis: axis out of range for " + shape_str(in.shape()));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= in.dim(i);
    for (std::size_t i = axis + 1; i < in.rank(); ++i) inner *= in.dim(i);
    const std::size_t n = in.dim(axis);
    Shape shape = in.shape();
    shape[axis] = 1;
    Tensor<T> out(shape);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t k = 0; k < n; ++k) {
            const T* src = in.data().data() + (o * n + k) * inner;
            T* dst = out.data().data() + o * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    }
    check_finite(out, "sum_over_axis");
    return tape.record(std::move(out), {x}, [x, outer, n, inner](Tape<T>& t, const Tensor<T>& g) {
        Tensor<T>& gx = t.grad_buffer(x);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t k = 0; k < n; ++k) {
                for (std::size_t i = 0; i < inner; ++i) gx[(o * n + k) * inner + i] += g[o * inner + i];
            }
        }
    });
}

template <typename T>
Var spatial_mean(Tape<T>& tape, Var x) {
    const Tensor<T>& in = tape.value(x);
    require_rank(in.shape(), 4, "spatial_mean");
    const std::size_t BC = in.dim(0) * in.dim(1), HW = in.dim(2) * in.dim(3);
    if (HW == 0) throw UsageError("spatial_mean over empty plane");
    Tensor<T> out({in.dim(0), in.dim(1), 1, 1});
    for (std::size_t i = 0; i < BC; ++i) {
        T acc = 0;
        for (std::size_t j = 0; j < HW; ++j) acc += in[i * HW + j];
        out[i] = acc / static_cast<T>(HW);
    }
    check_finite(out, "spatial_mean");
    return tape.record(std::move(out), {x}, [x, BC, HW](Tape<T>& t, const Tensor<T>& g) {
        Tensor<T>& gx = t.grad_buffer(x);
        const T inv = T{1} / static_cast<T>(HW);
        for (std::size_t i = 0; i < BC; ++i) {
            for (std::size_t j = 0; j < HW; ++j) gx[i * HW + j] += g[i] * inv;
        }
    });
}

template <typename T>
Var sum(Tape<T>& tape, Var x) {
    const Tensor<T>& in = tape.value(x);
    T acc = 0;
    for (T v : in.data()) acc += v;
    Tensor<T> out = Tensor<T>::scalar(acc);
    check_finite(out, "sum");
    return tape.record(std::move(out), {x}, [x](Tape<T>& t, const Tensor<T>& g) {
        Tensor<T>& gx = t.grad_buffer(x);
        for (auto& v : gx.storage()) v += g[0];
    });
}

namespace kernels {

template <typename T>
std::vector<T> softmax(std::span<const T> scores) {
    if (scores.empty()) throw UsageError("softmax of an empty vector");
    for (T s : scores) {
        if (!std::isfinite(s)) throw InvariantError("softmax of a non-finite score");
    }
    const T peak = *std::max_element(scores.begin(), scores.end());
    std::vector<T> out(scores.size());
    T total = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        out[i] = std::exp(scores[i] - peak);
        total += out[i];
    }
    for (auto& v : out) v /= total;
    return out;
}

template std::vector<float> softmax(std::span<const float>);
template std::vector<double> softmax(std::span<const double>);

}  // namespace kernels

template <typename T>
Var softmax_1d(Tape<T>& tape, Var x) {
    const Tensor<T>& in = tape.value(x);
    require_rank(in.shape(), 1, "softmax_1d");
    Tensor<T> out(in.shape(), kernels::softmax<T>(in.data()));
    const Var y{tape.size()};
    return tape.record(std::move(out), {x}, [x, y](Tape<T>& t, const Tensor<T>& g) {
        const Tensor<T>& p = t.value(y);
        T dot = 0;
        for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * p[i];
        Tensor<T>& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += p[i] * (g[i] - dot);
    });
}

template <typename T>
Var mse_loss(Tape<T>& tape, Var prediction, Var target) {
    const Tensor<T>& p = tape.value(prediction);
    const Tensor<T>& q = tape.value(target);
    if (p.shape() != q.shape()) {
        throw UsageError("mse_loss shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(q.shape()));
    }
    if (p.size() == 0) throw UsageError("mse_loss of empty tensors");
    T acc = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const T d = p[i] - q[i];
        acc += d * d;
    }
    Tensor<T> out = Tensor<T>::scalar(acc / static_cast<T>(p.size()));
    check_finite(out, "mse_loss");
    return tape.record(std::move(out), {prediction, target}, [prediction, target](Tape<T>& t, const Tensor<T>& g) {
        const Tensor<T>& p = t.value(prediction);
        const Tensor<T>& q = t.value(target);
        const T k = T{2} * g[0] / static_cast<T>(p.size());
        if (t.requires_grad(prediction)) {
            Tensor<T>& gp = t.grad_buffer(prediction);
            for (std::size_t i = 0; i < p.size(); ++i) gp[i] += k * (p[i] - q[i]);
        }
        if (t.requires_grad(target)) {
            Tensor<T>& gq = t.grad_buffer(target);
            for (std::size_t i = 0; i < p.size(); ++i) gq[i] -= k * (p[i] - q[i]);
        }
    });
}

#define BIOATT_INSTANTIATE(T)                                  \
    template class Tape<T>;                                    \
    template Var relu(Tape<T>&, Var);                          \
    template Var sigmoid(Tape<T>&, Var);                       \
    template Var add(Tape<T>&, Var, Var);                      \
    template Var mul(Tape<T>&, Var, Var);                      \
    template Var scale(Tape<T>&, Var, T);                      \
    template Var channel_mean(Tape<T>&, Var);                  \
    template Var channel_max(Tape<T>&, Var);                   \
    template Var concat_channels(Tape<T>&, Var, Var);          \
    template Var sum_over_axis(Tape<T>&, Var, std::size_t);    \
    template Var spatial_mean(Tape<T>&, Var);                  \
    template Var sum(Tape<T>&, Var);                           \
    template Var softmax_1d(Tape<T>&, Var);                    \
    template Var mse_loss(Tape<T>&, Var, Var);

BIOATT_INSTANTIATE(float)
BIOATT_INSTANTIATE(double)

#undef BIOATT_INSTANTIATE

}  // namespace bioatt
