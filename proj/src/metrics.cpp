#include "bioatt/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>

#include "bioatt/error.hpp"

namespace bioatt {

namespace {

template <typename T>
void check_pair(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw UsageError("metric inputs differ in shape: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    if (a.size() == 0) throw UsageError("metric of an empty image");
}

template <typename T>
std::pair<std::size_t, std::size_t> plane_dims(const Tensor<T>& t) {
    if (t.rank() < 2) throw UsageError("SSIM needs an image, got " + shape_str(t.shape()));
    const std::size_t H = t.dim(t.rank() - 2), W = t.dim(t.rank() - 1);
    if (H * W != t.size()) throw UsageError("SSIM expects a single image, got " + shape_str(t.shape()));
    return {H, W};
}

std::vector<double> gaussian_window(std::size_t size, double sigma) {
    std::vector<double> g(size);
    const double c = (static_cast<double>(size) - 1) / 2;
    double total = 0;
    for (std::size_t i = 0; i < size; ++i) {
        const double d = static_cast<double>(i) - c;
        total += g[i] = std::exp(-d * d / (2 * sigma * sigma));
    }
    for (auto& v : g) v /= total;
    return g;
}

// Valid-mode separable filtering of an H x W plane.
std::vector<double> filter(const std::vector<double>& img, std::size_t H, std::size_t W,
                           const std::vector<double>& g) {
    const std::size_t k = g.size(), Ho = H - k + 1, Wo = W - k + 1;
    std::vector<double> rows(H * Wo);
    for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
            double acc = 0;
            for (std::size_t t = 0; t < k; ++t) acc += g[t] * img[i * W + j + t];
            rows[i * Wo + j] = acc;
        }
    std::vector<double> out(Ho * Wo);
    for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
            double acc = 0;
            for (std::size_t t = 0; t < k; ++t) acc += g[t] * rows[(i + t) * Wo + j];
            out[i * Wo + j] = acc;
        }
    return out;
}

}  // namespace

template <typename T>
double rmse(const Tensor<T>& a, const Tensor<T>& b) {
    check_pair(a, b);
    double acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(a.size()));
}

template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double data_range) {
    if (!(data_range > 0) || !std::isfinite(data_range)) throw UsageError("PSNR data range must be positive");
    const double e = rmse(a, b);
    if (e == 0) return std::numeric_limits<double>::infinity();
    return 20.0 * std::log10(data_range / e);
}

template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, const SsimParams& p) {
    check_pair(a, b);
    const auto [H, W] = plane_dims(a);
    if (p.window == 0 || H < p.window || W < p.window) {
        throw UsageError("image " + std::to_string(H) + "x" + std::to_string(W) + " smaller than the " +
                         std::to_string(p.window) + "-pixel SSIM window");
    }
    if (!(p.data_range > 0)) throw UsageError("SSIM data range must be positive");
    const auto g = gaussian_window(p.window, p.sigma);
    std::vector<double> x(a.size()), y(a.size()), xx(a.size()), yy(a.size()), xy(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        x[i] = static_cast<double>(a[i]);
        y[i] = static_cast<double>(b[i]);
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    const auto mx = filter(x, H, W, g), my = filter(y, H, W, g);
    const auto sxx = filter(xx, H, W, g), syy = filter(yy, H, W, g), sxy = filter(xy, H, W, g);
    const double c1 = (p.k1 * p.data_range) * (p.k1 * p.data_range);
    const double c2 = (p.k2 * p.data_range) * (p.k2 * p.data_range);
    double total = 0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
        const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cov = sxy[i] - mx[i] * my[i];
        const double num = (2 * mx[i] * my[i] + c1) * (2 * cov + c2);
        const double den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
        total += num / den;
    }
    return total / static_cast<double>(mx.size());
}

template <typename T>
double dynamic_range(const Tensor<T>& image) {
    if (image.size() == 0) throw UsageError("dynamic range of an empty image");
    const auto [lo, hi] = std::minmax_element(image.data().begin(), image.data().end());
    return static_cast<double>(*hi) - static_cast<double>(*lo);
}

template <typename T>
ImageMetrics image_metrics(const Tensor<T>& prediction, const Tensor<T>& reference, std::string id,
                           std::optional<double> data_range) {
    double range = data_range ? *data_range : dynamic_range(reference);
    if (!(range > 0)) throw UsageError("image '" + id + "' has zero dynamic range; pass an explicit data range");
    SsimParams params;
    params.data_range = range;
    return {std::move(id), rmse(prediction, reference), psnr(prediction, reference, range),
            ssim(prediction, reference, params), range};
}

namespace {

Summary summarize(const std::vector<double>& v) {
    Summary s;
    if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
    for (double x : v) s.mean += x;
    s.mean /= static_cast<double>(v.size());
    double var = 0;
    for (double x : v) var += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(var / static_cast<double>(v.size()));
    return s;
}

}  // namespace

MetricsReport aggregate(std::vector<ImageMetrics> images, std::string label) {
    if (images.empty()) throw UsageError("cannot aggregate an empty metrics list");
    MetricsReport r;
    r.label = std::move(label);
    std::vector<double> e, p, s;
    for (const auto& m : images) {
        e.push_back(m.rmse);
        s.push_back(m.ssim);
        if (std::isinf(m.psnr)) {
            ++r.psnr_inf_count;
        } else {
            p.push_back(m.psnr);
        }
    }
    r.rmse = summarize(e);
    r.psnr = summarize(p);
    r.ssim = summarize(s);
    r.images = std::move(images);
    return r;
}

namespace {

std::string fixed(double v, int decimals) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    if (std::isnan(v)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    return buf;
}

std::string pad(const std::string& s, std::size_t width) {
    // "±" is two bytes but one column
    std::size_t cols = 0;
    for (unsigned char c : s) cols += (c & 0xC0) != 0x80;
    return s + std::string(width > cols ? width - cols : 0, ' ');
}

}  // namespace

std::string format_number(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    if (std::isnan(v)) return "nan";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string format_summary(const Summary& s, int decimals) {
    if (std::isnan(s.mean)) return "inf";  // every image was a perfect reconstruction
    return fixed(s.mean, decimals) + "±" + fixed(s.std, decimals);
}

std::string format_table(const std::vector<MetricsReport>& reports) {
    std::size_t label_width = std::string("Model").size();
    for (const auto& r : reports) label_width = std::max(label_width, r.label.size());
    std::string out = pad("Model", label_width + 2) + pad("RMSE", 18) + pad("PSNR (dB)", 16) + "SSIM\n";
    for (const auto& r : reports) {
        out += pad(r.label, label_width + 2) + pad(format_summary(r.rmse, 4), 18) + pad(format_summary(r.psnr, 2), 16) +
               format_summary(r.ssim, 4) + "\n";
    }
    out += "(mean ± population standard deviation";
    std::size_t inf = 0;
    for (const auto& r : reports) inf += r.psnr_inf_count;
    if (inf > 0) out += "; " + std::to_string(inf) + " infinite PSNR value(s) excluded";
    out += ")\n";
    return out;
}

std::string format_csv_row(const MetricsReport& r) {
    return r.label + "," + format_number(r.rmse.mean) + "," + format_number(r.rmse.std) + "," +
           format_number(r.psnr.mean) + "," + format_number(r.psnr.std) + "," + format_number(r.ssim.mean) + "," +
           format_number(r.ssim.std);
}

std::string format_csv(const std::vector<MetricsReport>& reports) {
    std::string out = std::string(kReportCsvHeader) + "\n";
    for (const auto& r : reports) out += format_csv_row(r) + "\n";
    return out;
}

std::string format_per_image_csv(const MetricsReport& report) {
    std::string out = "id,rmse,psnr,ssim,data_range\n";
    for (const auto& m : report.images) {
        out += m.id + "," + format_number(m.rmse) + "," + format_number(m.psnr) + "," + format_number(m.ssim) + "," +
               format_number(m.data_range) + "\n";
    }
    return out;
}

#define BIOATT_INSTANTIATE(T)                                                                          \
    template double rmse(const Tensor<T>&, const Tensor<T>&);                                         \
    template double psnr(const Tensor<T>&, const Tensor<T>&, double);                                 \
    template double ssim(const Tensor<T>&, const Tensor<T>&, const SsimParams&);                      \
    template double dynamic_range(const Tensor<T>&);                                                  \
    template ImageMetrics image_metrics(const Tensor<T>&, const Tensor<T>&, std::string, std::optional<double>);

BIOATT_INSTANTIATE(float)
BIOATT_INSTANTIATE(double)

#undef BIOATT_INSTANTIATE

}  // namespace bioatt
