#include "bioatt/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "bioatt/error.hpp"

namespace bioatt {

std::string to_string(Weighting w) {
    switch (w) {
        case Weighting::File: return "clip-file";
        case Weighting::Uniform: return "uniform";
        case Weighting::Random: return "random";
    }
    throw UsageError("unknown weighting");
}

Weighting parse_weighting(const std::string& name) {
    if (name == "clip-file" || name == "file") return Weighting::File;
    if (name == "uniform") return Weighting::Uniform;
    if (name == "random") return Weighting::Random;
    throw UsageError("unknown weighting '" + name + "' (expected clip-file, uniform or random)");
}

void TrainConfig::validate() const {
    model.validate();
    if (!(lr0 > 0) || !std::isfinite(lr0)) throw UsageError("learning rate must be positive");
    if (!(lr_min >= 0) || lr_min > lr0) throw UsageError("minimum learning rate must lie in [0, lr0]");
    if (halve_every == 0) throw UsageError("halving interval must be positive");
    if (patience == 0) throw UsageError("patience must be positive");
    if (batch == 0) throw UsageError("batch size must be positive");
    if (max_epochs == 0) throw UsageError("max_epochs must be positive");
    if (!(rotation_probability >= 0 && rotation_probability <= 1)) {
        throw UsageError("rotation probability must lie in [0, 1]");
    }
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1) || !(adam_eps > 0)) {
        throw UsageError("invalid Adam hyper-parameters");
    }
}

double learning_rate(const TrainConfig& config, std::size_t epoch) {
    if (epoch == 0) throw UsageError("epochs are 1-based");
    const double halvings = static_cast<double>((epoch - 1) / config.halve_every);
    return std::max(config.lr0 * std::pow(0.5, halvings), config.lr_min);
}

void Adam::step(ParameterMap<float>& params, const ParameterMap<float>& grads, double lr) {
    const std::uint64_t t = ++state_.step;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t));
    for (const auto& [name, g] : grads) {
        auto it = params.find(name);
        if (it == params.end()) throw UsageError("gradient for unknown parameter '" + name + "'");
        Tensor<float>& p = it->second;
        if (g.shape() != p.shape()) {
            throw UsageError("gradient of '" + name + "' has shape " + shape_str(g.shape()) + ", parameter " +
                             shape_str(p.shape()));
        }
        auto& m = state_.first_moment.try_emplace(name, p.shape()).first->second;
        auto& v = state_.second_moment.try_emplace(name, p.shape()).first->second;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = g[i];
            const double mi = beta1_ * m[i] + (1 - beta1_) * gi;
            const double vi = beta2_ * v[i] + (1 - beta2_) * gi * gi;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            p[i] = static_cast<float>(p[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + eps_));
        }
        if (!p.all_finite()) throw InvariantError("parameter '" + name + "' became non-finite");
    }
}

EarlyStopping::EarlyStopping(std::size_t patience)
    : patience_(patience), best_(std::numeric_limits<double>::infinity()) {
    if (patience == 0) throw UsageError("patience must be positive");
}

bool EarlyStopping::update(double value) {
    if (value < best_) {
        best_ = value;
        since_best_ = 0;
        return true;
    }
    ++since_best_;
    return false;
}

PriorMap resolve_priors(Weighting weighting, const std::vector<std::string>& ids, std::size_t n_descriptors,
                        std::uint64_t seed, const PriorFile* file) {
    PriorMap out;
    for (const auto& id : ids) {
        switch (weighting) {
            case Weighting::Uniform: out.emplace(id, uniform_priors(n_descriptors)); break;
            case Weighting::Random: out.emplace(id, random_priors(n_descriptors, derive_seed(seed, id))); break;
            case Weighting::File: {
                if (!file) throw UsageError("clip-file weighting needs a prior file");
                if (file->descriptors.size() != n_descriptors) {
                    throw UsageError("prior file has " + std::to_string(file->descriptors.size()) +
                                     " descriptors, the model expects " + std::to_string(n_descriptors));
                }
                auto it = file->priors.find(id);
                if (it == file->priors.end()) throw UsageError("prior file has no entry for image '" + id + "'");
                out.emplace(id, it->second);
                break;
            }
        }
    }
    return out;
}

namespace {

const PriorDistribution* lookup(const PriorMap* priors, const std::string& id, const ModelConfig& config) {
    if (config.variant != Variant::BioAtt) return nullptr;
    if (!priors) throw UsageError("the bioatt variant needs priors");
    auto it = priors->find(id);
    if (it == priors->end()) throw UsageError("no priors for image '" + id + "'");
    if (it->second.size() != config.n_descriptors) {
        throw UsageError("priors for '" + id + "' have " + std::to_string(it->second.size()) + " entries, expected " +
                         std::to_string(config.n_descriptors));
    }
    return &it->second;
}

// [rows, N] with the same prior in every row.
Tensor<float> prior_rows(const PriorDistribution& prior, std::size_t rows) {
    const std::size_t n = prior.size();
    Tensor<float> t({rows, n});
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t i = 0; i < n; ++i) t[r * n + i] = static_cast<float>(prior[i]);
    }
    return t;
}

void check_extent(const ModelConfig& config, const CTImage& image, bool whole_image) {
    const std::size_t need = whole_image ? config.min_extent() : config.patch_size;
    if (image.height < need || image.width < need) {
        throw UsageError("image '" + image.id + "' (" + std::to_string(image.height) + "x" +
                         std::to_string(image.width) + ") is smaller than " + std::to_string(need));
    }
}

}  // namespace

Tensor<float> denoise_image(const Model<float>& model, const CTImage& ldct, const PriorDistribution* prior,
                            const EvalOptions& options) {
    const ModelConfig& cfg = model.config();
    if (cfg.variant == Variant::BioAtt && !prior) throw UsageError("the bioatt variant needs priors");
    if (options.batch == 0) throw UsageError("batch size must be positive");
    check_extent(cfg, ldct, options.whole_image);
    const Tensor<float> z = standardize<float>(ldct);
    if (options.whole_image) {
        const Tensor<float> p = prior ? prior_rows(*prior, 1) : Tensor<float>();
        return predict(model, z, prior ? &p : nullptr);
    }
    const PatchGrid grid = PatchGrid::covering(ldct.height, ldct.width, cfg.patch_size);
    const Tensor<float> patches = patchify(z, grid);
    std::vector<Tensor<float>> outputs;
    for (std::size_t b = 0; b < grid.count(); b += options.batch) {
        const std::size_t e = std::min(grid.count(), b + options.batch);
        const Tensor<float> p = prior ? prior_rows(*prior, e - b) : Tensor<float>();
        outputs.push_back(predict(model, batch_slice(patches, b, e), prior ? &p : nullptr));
    }
    return depatchify(batch_concat<float>(outputs), grid);
}

MetricsReport evaluate(const Model<float>& model, const PairedDataset& data, const std::vector<std::string>& ids,
                       const PriorMap* priors, const EvalOptions& options, std::string label) {
    if (ids.empty()) throw UsageError("nothing to evaluate");
    std::vector<ImageMetrics> images;
    for (const auto& id : ids) {
        const ImagePair& pair = data.at(id);
        const Tensor<float> pred = denoise_image(model, pair.ldct, lookup(priors, id, model.config()), options);
        images.push_back(image_metrics(pred, standardize<float>(pair.ndct), id, options.data_range));
    }
    return aggregate(std::move(images), std::move(label));
}

MetricsReport evaluate_identity(const PairedDataset& data, const std::vector<std::string>& ids,
                                const EvalOptions& options, std::string label) {
    if (ids.empty()) throw UsageError("nothing to evaluate");
    std::vector<ImageMetrics> images;
    for (const auto& id : ids) {
        const ImagePair& pair = data.at(id);
        images.push_back(
            image_metrics(standardize<float>(pair.ldct), standardize<float>(pair.ndct), id, options.data_range));
    }
    return aggregate(std::move(images), std::move(label));
}

std::string format_history_csv(const std::vector<EpochRecord>& history) {
    std::string out = std::string(kHistoryCsvHeader) + "\n";
    for (const auto& r : history) {
        out += std::to_string(r.epoch) + "," + format_number(r.lr) + "," + format_number(r.train_mse) + "," +
               format_number(r.val_rmse) + "," + format_number(r.val_psnr) + "," + format_number(r.val_ssim) + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

// One training example: a patch (or whole image) of one image.
struct Sample {
    std::size_t image;  // index into the prepared image list
    std::size_t patch;  // index into that image's patch stack
};

struct PreparedImage {
    std::string id;
    Tensor<float> inputs;   // [P,1,p,p] or [1,1,H,W]
    Tensor<float> targets;  // same shape
    const PriorDistribution* prior = nullptr;
};

Tensor<float> plane(const Tensor<float>& stack, std::size_t k) {
    const std::size_t n = stack.size() / stack.dim(0);
    Tensor<float> out({1, 1, stack.dim(2), stack.dim(3)});
    std::copy_n(stack.data().begin() + static_cast<std::ptrdiff_t>(k * n), n, out.storage().begin());
    return out;
}

}  // namespace

TrainResult train(const TrainConfig& config, const PairedDataset& data, const std::vector<std::string>& train_ids,
                  const std::vector<std::string>& val_ids, const PriorMap* priors, const EpochCallback& on_epoch) {
    config.validate();
    if (train_ids.empty()) throw UsageError("no training images");
    if (val_ids.empty()) throw UsageError("no validation images");
    const ModelConfig& mc = config.model;

    std::vector<PreparedImage> images;
    std::vector<Sample> samples;
    for (const auto& id : train_ids) {
        const ImagePair& pair = data.at(id);
        if (pair.ldct.height != pair.ndct.height || pair.ldct.width != pair.ndct.width) {
            throw UsageError("image '" + id + "': LDCT and NDCT sizes differ");
        }
        check_extent(mc, pair.ldct, config.whole_image);
        PreparedImage img{id, standardize<float>(pair.ldct), standardize<float>(pair.ndct), lookup(priors, id, mc)};
        if (!config.whole_image) {
            const PatchGrid grid = PatchGrid::sampling(pair.ldct.height, pair.ldct.width, mc.patch_size);
            img.inputs = patchify(img.inputs, grid);
            img.targets = patchify(img.targets, grid);
        }
        for (std::size_t k = 0; k < img.inputs.dim(0); ++k) samples.push_back({images.size(), k});
        images.push_back(std::move(img));
    }
    for (const auto& id : val_ids) lookup(priors, id, mc);

    const std::size_t batch = config.whole_image ? 1 : config.batch;
    const EvalOptions eval_options{config.whole_image, config.batch, std::nullopt};

    Model<float> model(mc);
    Adam adam(config.beta1, config.beta2, config.adam_eps);
    EarlyStopping stopper(config.patience);
    TrainResult result;
    result.best = Checkpoint{mc, model.parameters(), 0, {}};

    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
        const double lr = learning_rate(config, epoch);
        const std::uint64_t epoch_seed = derive_seed(config.seed, static_cast<std::uint64_t>(epoch));
        std::vector<std::size_t> order(samples.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle(derive_seed(epoch_seed, "shuffle"));
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

        double loss_sum = 0;
        for (std::size_t b = 0; b < order.size(); b += batch) {
            const std::size_t e = std::min(order.size(), b + batch);
            std::vector<Tensor<float>> xs, ys;
            Tensor<float> prior_batch({e - b, mc.n_descriptors});
            for (std::size_t i = b; i < e; ++i) {
                const Sample& s = samples[order[i]];
                const PreparedImage& img = images[s.image];
                Tensor<float> x = plane(img.inputs, s.patch), y = plane(img.targets, s.patch);
                if (x.dim(2) == x.dim(3)) {
                    Rng rng(derive_seed(epoch_seed, img.id + "#" + std::to_string(s.patch)));
                    const int k = draw_rotation(rng, config.rotation_probability);
                    x = rotate90(x, k);
                    y = rotate90(y, k);
                }
                xs.push_back(std::move(x));
                ys.push_back(std::move(y));
                if (img.prior) {
                    for (std::size_t n = 0; n < mc.n_descriptors; ++n) {
                        prior_batch[(i - b) * mc.n_descriptors + n] = static_cast<float>((*img.prior)[n]);
                    }
                }
            }
            Tape<float> tape;
            const Var x = tape.leaf(batch_concat<float>(xs));
            const Var y = tape.leaf(batch_concat<float>(ys));
            if (result.train_input_shape.empty()) result.train_input_shape = tape.value(x).shape();
            const auto trace = forward(tape, model, x, mc.variant == Variant::BioAtt ? &prior_batch : nullptr,
                                       ForwardOptions{.parameters_require_grad = true});
            const Var loss = mse_loss(tape, trace.output, y);
            tape.backward(loss);
            ParameterMap<float> grads;
            for (const auto& [name, v] : trace.parameters) grads.emplace(name, tape.grad(v));
            adam.step(model.parameters(), grads, lr);
            loss_sum += static_cast<double>(tape.value(loss).item()) * static_cast<double>(e - b);
        }

        const MetricsReport val = evaluate(model, data, val_ids, priors, eval_options, "val");
        const EpochRecord record{epoch,
                                 lr,
                                 loss_sum / static_cast<double>(samples.size()),
                                 val.rmse.mean,
                                 val.psnr.mean,
                                 val.ssim.mean};
        result.history.push_back(record);
        if (on_epoch) on_epoch(record);
        if (stopper.update(val.rmse.mean)) {
            result.best = Checkpoint{mc, model.parameters(), epoch, adam.state()};
            result.best_epoch = epoch;
        }
        if (stopper.should_stop()) {
            result.stopped_early = epoch < config.max_epochs;
            break;
        }
    }
    return result;
}

// ---------------------------------------------------------------------------

namespace {

struct Arm {
    std::string label;
    TrainConfig config;
    const PriorMap* priors;
};

std::string shape_of_eval(const ModelConfig& mc, const CTImage& image, const EvalOptions& options) {
    if (options.whole_image) return shape_str({1, 1, image.height, image.width});
    const std::size_t count = PatchGrid::covering(image.height, image.width, mc.patch_size).count();
    return shape_str({std::min(count, options.batch), 1, mc.patch_size, mc.patch_size});
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config, const PairedDataset& data,
                                const EpochCallback& on_epoch) {
    const std::string& name = config.name;
    if (name != "attention" && name != "patching" && name != "weighting") {
        throw UsageError("unknown experiment '" + name + "' (expected attention, patching or weighting)");
    }
    config.train.validate();
    const DatasetSplit split = split_dataset(data.ids, config.split);
    const std::size_t n = config.train.model.n_descriptors;

    // "File" priors: the given file, or fixture priors computed from the LDCT images.
    PriorFile source{DescriptorSet::defaults(), {}};
    std::string file_label = "clip-file";
    if (config.prior_file) {
        source = *config.prior_file;
    } else {
        if (n != source.descriptors.size()) {
            throw UsageError("fixture priors cover the " + std::to_string(source.descriptors.size()) +
                             " default descriptors; pass a prior file for " + std::to_string(n));
        }
        for (const auto& id : data.ids) source.priors.emplace(id, fixture_priors(data.at(id).ldct, source.descriptors));
        file_label = "fixture";
    }
    const std::uint64_t seed = config.train.seed;
    const PriorMap chosen = config.train.weighting == Weighting::File
                                ? resolve_priors(Weighting::File, data.ids, n, seed, &source)
                                : resolve_priors(config.train.weighting, data.ids, n, seed);

    PriorMap file_priors, uniform, random;
    std::vector<Arm> arms;
    auto with = [&](Variant v, bool whole) {
        TrainConfig c = config.train;
        c.model.variant = v;
        c.whole_image = whole;
        return c;
    };
    if (name == "attention") {
        for (Variant v : {Variant::Base, Variant::Channel, Variant::Spatial, Variant::BioAtt}) {
            arms.push_back({to_string(v), with(v, config.train.whole_image), &chosen});
        }
    } else if (name == "patching") {
        const Variant v = config.train.model.variant;
        arms.push_back({"whole-image", with(v, true), &chosen});
        arms.push_back({"patch", with(v, false), &chosen});
    } else {
        file_priors = resolve_priors(Weighting::File, data.ids, n, seed, &source);
        uniform = resolve_priors(Weighting::Uniform, data.ids, n, seed);
        random = resolve_priors(Weighting::Random, data.ids, n, seed);
        const bool whole = config.train.whole_image;
        arms.push_back({file_label, with(Variant::BioAtt, whole), &file_priors});
        arms.push_back({"uniform", with(Variant::BioAtt, whole), &uniform});
        arms.push_back({"random", with(Variant::BioAtt, whole), &random});
    }

    ExperimentResult out;
    const EvalOptions base_eval{false, config.train.batch, std::nullopt};
    out.ldct_report = evaluate_identity(data, split.test, base_eval, "ldct");
    std::vector<MetricsReport> reports;
    for (const Arm& arm : arms) {
        ExperimentRun run;
        run.label = arm.label;
        run.result = train(arm.config, data, split.train, split.val, arm.priors, on_epoch);
        const Model<float> best(run.result.best.config, run.result.best.parameters);
        const EvalOptions eval{arm.config.whole_image, arm.config.batch, std::nullopt};
        run.test_report = evaluate(best, data, split.test, arm.priors, eval, arm.label);
        out.shape_log.push_back(arm.label + " train_input=" + shape_str(run.result.train_input_shape) +
                                " eval_input=" + shape_of_eval(arm.config.model, data.at(split.test.front()).ldct, eval));
        reports.push_back(run.test_report);
        if (!config.out_dir.empty()) {
            write_text_atomic(config.out_dir / ("history_" + arm.label + ".csv"),
                              format_history_csv(run.result.history));
            save_checkpoint(config.out_dir / (arm.label + ".ckpt"), run.result.best);
        }
        out.runs.push_back(std::move(run));
    }

    if (!config.out_dir.empty()) {
        write_text_atomic(config.out_dir / (name + "_report.csv"), format_csv(reports));
        std::vector<MetricsReport> table = reports;
        table.push_back(out.ldct_report);
        std::ostringstream txt;
        txt << name << " experiment: " << split.train.size() << " train / " << split.val.size() << " val / "
            << split.test.size() << " test images, seed " << seed << "\n\n"
            << format_table(table);
        write_text_atomic(config.out_dir / (name + "_report.txt"), txt.str());
        std::string log;
        for (const auto& line : out.shape_log) log += line + "\n";
        write_text_atomic(config.out_dir / "shapes.log", log);
    }
    return out;
}

}  // namespace bioatt
