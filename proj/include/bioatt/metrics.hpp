#ifndef BIOATT_METRICS_HPP
#define BIOATT_METRICS_HPP

#include <optional>
#include <string>
#include <vector>

#include "bioatt/tensor.hpp"

namespace bioatt {

/// sqrt(mean((a - b)^2)), accumulated in double.
template <typename T>
double rmse(const Tensor<T>& a, const Tensor<T>& b);

/// 20 log10(data_range / rmse); +infinity for identical images.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double data_range);

struct SsimParams {
    std::size_t window = 11;
    double sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double data_range = 1.0;
};

/// Mean local SSIM over every valid placement of a normalized Gaussian
/// window. Both inputs are single images (all axes but the last two are 1).
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, const SsimParams& params = {});

/// max - min of an image; the default PSNR/SSIM data range (of the reference).
template <typename T>
double dynamic_range(const Tensor<T>& image);

struct ImageMetrics {
    std::string id;
    double rmse = 0;
    double psnr = 0;
    double ssim = 0;
    double data_range = 0;
};

/// Metrics of a prediction against its reference. data_range defaults to the
/// reference's dynamic range.
template <typename T>
ImageMetrics image_metrics(const Tensor<T>& prediction, const Tensor<T>& reference, std::string id = {},
                           std::optional<double> data_range = std::nullopt);

struct Summary {
    double mean = 0;
    double std = 0;  // population
};

struct MetricsReport {
    std::string label;
    std::vector<ImageMetrics> images;
    Summary rmse, psnr, ssim;
    /// Images whose PSNR was infinite and left out of the PSNR summary.
    std::size_t psnr_inf_count = 0;
};

/// Mean and population standard deviation of each metric.
MetricsReport aggregate(std::vector<ImageMetrics> images, std::string label = {});

/// "0.0391 ± 0.0042"-style cells: RMSE and SSIM with 4 decimals, PSNR with 2.
std::string format_summary(const Summary& s, int decimals);
/// Aligned plain-text table, one row per report.
std::string format_table(const std::vector<MetricsReport>& reports);
inline constexpr const char* kReportCsvHeader = "variant,rmse_mean,rmse_std,psnr_mean,psnr_std,ssim_mean,ssim_std";
std::string format_csv_row(const MetricsReport& report);
/// Header plus one row per report.
std::string format_csv(const std::vector<MetricsReport>& reports);
/// Per-image CSV: id,rmse,psnr,ssim,data_range.
std::string format_per_image_csv(const MetricsReport& report);

/// Shortest decimal text that reads back to the same double ("inf" for +inf).
std::string format_number(double v);

}  // namespace bioatt

#endif  // BIOATT_METRICS_HPP
