#include "bioatt/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace bioatt {

std::string shape_str(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

template <typename T>
bool Tensor<T>::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
Tensor<T> batch_slice(const Tensor<T>& t, std::size_t begin, std::size_t end) {
    if (t.rank() == 0 || begin > end || end > t.dim(0)) {
        throw UsageError("batch_slice out of range for shape " + shape_str(t.shape()));
    }
    Shape shape = t.shape();
    const std::size_t stride = t.size() / std::max<std::size_t>(shape[0], 1);
    shape[0] = end - begin;
    auto first = t.storage().begin() + static_cast<std::ptrdiff_t>(begin * stride);
    return Tensor<T>(shape, std::vector<T>(first, first + static_cast<std::ptrdiff_t>((end - begin) * stride)));
}

template <typename T>
Tensor<T> batch_concat(std::span<const Tensor<T>> parts) {
    if (parts.empty()) throw UsageError("batch_concat of nothing");
    Shape shape = parts.front().shape();
    if (shape.empty()) throw UsageError("batch_concat needs rank >= 1");
    std::size_t batch = 0;
    std::vector<T> data;
    for (const auto& p : parts) {
        if (p.rank() != shape.size() || !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1)) {
            throw UsageError("batch_concat shape mismatch: " + shape_str(shape) + " vs " + shape_str(p.shape()));
        }
        batch += p.dim(0);
        data.insert(data.end(), p.storage().begin(), p.storage().end());
    }
    shape[0] = batch;
    return Tensor<T>(shape, std::move(data));
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw UsageError("max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    T m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<T>(std::abs(a[i] - b[i])));
    return m;
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> batch_slice(const Tensor<float>&, std::size_t, std::size_t);
template Tensor<double> batch_slice(const Tensor<double>&, std::size_t, std::size_t);
template Tensor<float> batch_concat(std::span<const Tensor<float>>);
template Tensor<double> batch_concat(std::span<const Tensor<double>>);
template float max_abs_diff(const Tensor<float>&, const Tensor<float>&);
template double max_abs_diff(const Tensor<double>&, const Tensor<double>&);

}  // namespace bioatt
