#ifndef BIOATT_TRAIN_HPP
#define BIOATT_TRAIN_HPP

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bioatt/data.hpp"
#include "bioatt/metrics.hpp"
#include "bioatt/network.hpp"
#include "bioatt/priors.hpp"

namespace bioatt {

/// Where bioatt's per-image priors come from.
enum class Weighting { File, Uniform, Random };

std::string to_string(Weighting w);
/// Accepts "clip-file" (or "file"), "uniform", "random".
Weighting parse_weighting(const std::string& name);

struct TrainConfig {
    ModelConfig model;
    double lr0 = 1e-5;
    std::size_t halve_every = 5;
    double lr_min = 1e-10;
    std::size_t patience = 7;
    /// Patch mode batch; whole-image mode always uses 1.
    std::size_t batch = 16;
    std::size_t max_epochs = 20;
    std::uint64_t seed = 0;
    Weighting weighting = Weighting::File;
    bool whole_image = false;
    double rotation_probability = 0.5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const;
};

/// lr0 * 0.5^floor((epoch - 1) / halve_every), never below lr_min. Epochs are 1-based.
double learning_rate(const TrainConfig& config, std::size_t epoch);

/// Adam with bias correction; moments live in an OptimizerState so they can
/// be checkpointed.
class Adam {
public:
    Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    /// One update of every parameter that has a gradient.
    void step(ParameterMap<float>& params, const ParameterMap<float>& grads, double lr);

    OptimizerState& state() { return state_; }
    const OptimizerState& state() const { return state_; }

private:
    double beta1_, beta2_, eps_;
    OptimizerState state_;
};

/// Counts consecutive evaluations without a strict improvement.
class EarlyStopping {
public:
    explicit EarlyStopping(std::size_t patience);
    /// Records one evaluation; returns true if it is a new best.
    bool update(double value);
    bool should_stop() const { return since_best_ >= patience_; }
    double best() const { return best_; }
    std::size_t since_best() const { return since_best_; }

private:
    std::size_t patience_;
    double best_;
    std::size_t since_best_ = 0;
};

/// Per-image priors, keyed by image id.
using PriorMap = std::map<std::string, PriorDistribution>;

/// Builds the priors a bioatt run uses: the file's vectors (every id must be
/// present), uniform, or per-image random vectors seeded by (seed, id).
PriorMap resolve_priors(Weighting weighting, const std::vector<std::string>& ids, std::size_t n_descriptors,
                        std::uint64_t seed, const PriorFile* file = nullptr);

struct EvalOptions {
    /// Feed whole images instead of covering patches.
    bool whole_image = false;
    /// Patches per forward call.
    std::size_t batch = 16;
    std::optional<double> data_range = std::nullopt;
};

/// LDCT in, denoised standardized image [1,1,H,W] out.
Tensor<float> denoise_image(const Model<float>& model, const CTImage& ldct, const PriorDistribution* prior,
                            const EvalOptions& options = {});

/// Metrics of the denoised LDCT against the NDCT for every listed image.
MetricsReport evaluate(const Model<float>& model, const PairedDataset& data, const std::vector<std::string>& ids,
                       const PriorMap* priors, const EvalOptions& options = {}, std::string label = {});
/// The same metrics for the raw LDCT (no model).
MetricsReport evaluate_identity(const PairedDataset& data, const std::vector<std::string>& ids,
                                const EvalOptions& options = {}, std::string label = "ldct");

struct EpochRecord {
    std::size_t epoch = 0;
    double lr = 0;
    double train_mse = 0;
    double val_rmse = 0;
    double val_psnr = 0;
    double val_ssim = 0;
};

inline constexpr const char* kHistoryCsvHeader = "epoch,lr,train_mse,val_rmse,val_psnr,val_ssim";
std::string format_history_csv(const std::vector<EpochRecord>& history);

struct TrainResult {
    /// Parameters of the epoch with the best validation RMSE.
    Checkpoint best;
    std::size_t best_epoch = 0;
    std::vector<EpochRecord> history;
    bool stopped_early = false;
    /// Shape of the first training batch ([16,1,55,55] in patch mode).
    Shape train_input_shape;
};

/// Called after every epoch (for progress output).
using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains on `train_ids`, validating on `val_ids` once per epoch. `priors`
/// is required for the bioatt variant and must cover every id used.
TrainResult train(const TrainConfig& config, const PairedDataset& data, const std::vector<std::string>& train_ids,
                  const std::vector<std::string>& val_ids, const PriorMap* priors,
                  const EpochCallback& on_epoch = {});

// ---------------------------------------------------------------------------
// Experiments

struct ExperimentConfig {
    std::string name;  // attention | patching | weighting
    TrainConfig train;
    SplitSpec split;
    /// Priors for the bioatt runs; fixture priors computed from the LDCT
    /// images are used when absent.
    std::optional<PriorFile> prior_file;
    std::filesystem::path out_dir;
};

struct ExperimentRun {
    std::string label;
    TrainResult result;
    MetricsReport test_report;
};

struct ExperimentResult {
    std::vector<ExperimentRun> runs;
    std::vector<std::string> shape_log;
    /// Raw LDCT metrics on the test split, for reference.
    MetricsReport ldct_report;
};

/// Trains every arm of the experiment on a shared split and seed, evaluates
/// each on the test split and writes <name>_report.csv/.txt,
/// history_<label>.csv, <label>.ckpt and shapes.log into out_dir.
ExperimentResult run_experiment(const ExperimentConfig& config, const PairedDataset& data,
                                const EpochCallback& on_epoch = {});

}  // namespace bioatt

#endif  // BIOATT_TRAIN_HPP
