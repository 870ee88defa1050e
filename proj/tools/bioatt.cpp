// bioatt command-line driver: phantoms, stub priors, training, evaluation,
// denoising, attention-map export and the ablation experiments.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bioatt/error.hpp"
#include "bioatt/parallel.hpp"
#include "bioatt/train.hpp"
#include "json.hpp"

#ifndef BIOATT_VERSION
#define BIOATT_VERSION "dev"
#endif

using namespace bioatt;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Everything a run needs to be repeated: written next to its outputs.
struct Manifest {
    std::string command;
    json config = json::object();
    std::uint64_t seed = 0;
    json inputs = json::object();
    json outputs = json::array();
    std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();

    void write(const fs::path& path) const {
        json doc;
        doc["command"] = command;
        doc["config"] = config;
        doc["seed"] = seed;
        doc["inputs"] = inputs;
        doc["outputs"] = outputs;
        doc["version"] = BIOATT_VERSION;
        doc["threads"] = worker_count();
        doc["duration_seconds"] =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        write_text_atomic(path, doc.dump(2) + "\n");
    }
};

// Flags shared by train and experiment.
struct TrainFlags {
    std::string variant = "bioatt";
    std::string weighting = "clip-file";
    TrainConfig config;

    void add(CLI::App* app) {
        app->add_option("--variant", variant, "base, channel, spatial or bioatt")->capture_default_str();
        app->add_option("--weighting", weighting, "Prior source for bioatt: clip-file, uniform or random")
            ->capture_default_str();
        app->add_flag("--whole-image", config.whole_image, "Train on full images with batch 1");
        app->add_option("--max-epochs", config.max_epochs)->capture_default_str();
        app->add_option("--seed", config.seed, "Seeds the split, initialization, shuffling and augmentation")
            ->capture_default_str();
        app->add_option("--lr", config.lr0, "Initial learning rate")->capture_default_str();
        app->add_option("--batch", config.batch, "Patches per step in patch mode")->capture_default_str();
        app->add_option("--patience", config.patience)->capture_default_str();
        app->add_option("--channels", config.model.channels, "Backbone width")->capture_default_str();
        app->add_option("--patch-size", config.model.patch_size, "Training and reconstruction patch size")
            ->capture_default_str();
    }

    TrainConfig resolve() const {
        TrainConfig c = config;
        c.model.variant = parse_variant(variant);
        c.model.seed = c.seed;
        c.weighting = parse_weighting(weighting);
        c.validate();
        return c;
    }

    json to_json(const TrainConfig& c) const {
        return {{"model", json::parse(c.model.to_json())},
                {"lr0", c.lr0},
                {"halve_every", c.halve_every},
                {"lr_min", c.lr_min},
                {"patience", c.patience},
                {"batch", c.batch},
                {"max_epochs", c.max_epochs},
                {"weighting", to_string(c.weighting)},
                {"whole_image", c.whole_image},
                {"rotation_probability", c.rotation_probability}};
    }
};

DescriptorSet descriptors_for(std::size_t n) {
    if (n == DescriptorSet::defaults().size()) return DescriptorSet::defaults();
    std::vector<std::string> names;
    for (std::size_t i = 0; i < n; ++i) names.push_back("descriptor_" + std::to_string(i));
    return DescriptorSet(std::move(names));
}

// Priors for every id from a file (clip-file) or generated (uniform/random).
PriorMap priors_for(const ModelConfig& mc, Weighting weighting, const std::string& prior_path,
                    const std::vector<std::string>& ids, std::uint64_t seed) {
    if (mc.variant != Variant::BioAtt) return {};
    if (weighting == Weighting::File) {
        if (prior_path.empty()) throw UsageError("clip-file weighting needs --priors FILE");
        const PriorFile file = load_prior_file(prior_path);
        return resolve_priors(Weighting::File, ids, mc.n_descriptors, seed, &file);
    }
    return resolve_priors(weighting, ids, mc.n_descriptors, seed);
}

// "ph0003_ld" -> "ph0003": CTV stems carry the dose suffix, prior files do not.
std::string image_key(const CTImage& image) {
    for (const char* suffix : {"_ld", "_nd"}) {
        const std::string s = suffix;
        if (image.id.size() > s.size() && image.id.compare(image.id.size() - s.size(), s.size(), s) == 0) {
            return image.id.substr(0, image.id.size() - s.size());
        }
    }
    return image.id;
}

std::vector<std::string> select_ids(const PairedDataset& data, const std::string& subset, std::uint64_t seed) {
    if (subset == "all") return data.ids;
    const DatasetSplit split = split_dataset(data.ids, {.seed = seed});
    if (subset == "train") return split.train;
    if (subset == "val") return split.val;
    if (subset == "test") return split.test;
    throw UsageError("unknown subset '" + subset + "' (expected all, train, val or test)");
}

void print_epoch(const EpochRecord& r) {
    std::printf("epoch %zu  lr %.3g  train_mse %.6f  val_rmse %.6f  val_psnr %.3f  val_ssim %.4f\n", r.epoch, r.lr,
                r.train_mse, r.val_rmse, r.val_psnr, r.val_ssim);
    std::fflush(stdout);
}

// ---------------------------------------------------------------------------

void cmd_gen_phantom(std::size_t count, std::size_t dims, double sigma, std::uint64_t seed, const std::string& out) {
    if (count == 0) throw UsageError("--count must be positive");
    if (dims == 0) throw UsageError("--dims must be positive");
    Manifest m{"gen-phantom"};
    m.seed = seed;
    m.config = {{"count", count}, {"dims", dims}, {"sigma", sigma}};
    for (std::size_t i = 0; i < count; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "ph%04zu", i);
        save_pair(gen_phantom({dims, dims, sigma}, derive_seed(seed, id), id), out);
        m.outputs.push_back(std::string(id) + "_ld.ctv");
        m.outputs.push_back(std::string(id) + "_nd.ctv");
    }
    m.write(fs::path(out) / "manifest.json");
    std::printf("wrote %zu phantom pairs to %s\n", count, out.c_str());
}

void cmd_priors_stub(const std::string& data_dir, const std::string& mode, std::uint64_t seed,
                     const std::string& out) {
    const PairedDataset data = load_dataset(data_dir);
    PriorFile file{DescriptorSet::defaults(), {}};
    const std::size_t n = file.descriptors.size();
    for (std::size_t i = 0; i < data.size(); ++i) {
        const std::string& id = data.ids[i];
        if (mode == "uniform") {
            file.priors.emplace(id, uniform_priors(n));
        } else if (mode == "random") {
            file.priors.emplace(id, random_priors(n, derive_seed(seed, id)));
        } else if (mode == "fixture") {
            file.priors.emplace(id, fixture_priors(data.pairs[i].ldct, file.descriptors));
        } else {
            throw UsageError("unknown --mode '" + mode + "' (expected uniform, random or fixture)");
        }
    }
    const fs::path path(out);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    save_prior_file(path, file);
    Manifest m{"priors-stub"};
    m.seed = seed;
    m.config = {{"mode", mode}};
    m.inputs = {{"data", data_dir}};
    m.outputs.push_back(out);
    m.write(fs::path(out + ".manifest.json"));
    std::printf("wrote %zu prior vectors to %s\n", data.size(), out.c_str());
}

void cmd_train(const TrainFlags& flags, const std::string& data_dir, const std::string& prior_path,
               const std::string& out) {
    const TrainConfig config = flags.resolve();
    const PairedDataset data = load_dataset(data_dir);
    const DatasetSplit split = split_dataset(data.ids, {.seed = config.seed});
    const PriorMap priors = priors_for(config.model, config.weighting, prior_path, data.ids, config.seed);
    std::printf("training %s on %zu images (%zu validation)\n", to_string(config.model.variant).c_str(),
                split.train.size(), split.val.size());

    const TrainResult result = train(config, data, split.train, split.val, &priors, print_epoch);
    const fs::path dir(out);
    fs::create_directories(dir);
    save_checkpoint(dir / "model.ckpt", result.best);
    write_text_atomic(dir / "history.csv", format_history_csv(result.history));
    write_text_atomic(dir / "split.json", json{{"train", split.train}, {"val", split.val}, {"test", split.test}}.dump(2) + "\n");

    Manifest m{"train"};
    m.seed = config.seed;
    m.config = flags.to_json(config);
    m.inputs = {{"data", data_dir}, {"priors", prior_path}};
    m.outputs = {"model.ckpt", "history.csv", "split.json"};
    m.config["best_epoch"] = result.best_epoch;
    m.config["stopped_early"] = result.stopped_early;
    m.write(dir / "manifest.json");
    std::printf("best epoch %zu (val_rmse %.6f); wrote %s\n", result.best_epoch,
                result.history.at(result.best_epoch - 1).val_rmse, (dir / "model.ckpt").c_str());
}

void cmd_eval(const std::string& checkpoint, const std::string& data_dir, const std::string& prior_path,
              const std::string& weighting, const std::string& subset, const std::string& input,
              bool whole_image, std::uint64_t seed, const std::string& out) {
    const Model<float> model = load_model(checkpoint);
    PairedDataset data = load_dataset(data_dir);
    if (input == "ndct") {
        for (auto& pair : data.pairs) pair.ldct = pair.ndct;
    } else if (input != "ldct") {
        throw UsageError("--input must be ldct or ndct");
    }
    const auto ids = select_ids(data, subset, seed);
    const PriorMap priors = priors_for(model.config(), parse_weighting(weighting), prior_path, ids, seed);
    const EvalOptions options{.whole_image = whole_image};
    const MetricsReport report = evaluate(model, data, ids, &priors, options, to_string(model.config().variant));
    const MetricsReport baseline = evaluate_identity(data, ids, options, input);

    const fs::path dir(out);
    fs::create_directories(dir);
    write_text_atomic(dir / "eval_report.csv", format_csv({report, baseline}));
    write_text_atomic(dir / "eval_report.txt", format_table({report, baseline}));
    write_text_atomic(dir / "per_image.csv", format_per_image_csv(report));
    Manifest m{"eval"};
    m.seed = seed;
    m.config = {{"model", json::parse(model.config().to_json())},
                {"weighting", weighting},
                {"subset", subset},
                {"input", input},
                {"whole_image", whole_image}};
    m.inputs = {{"checkpoint", checkpoint}, {"data", data_dir}, {"priors", prior_path}};
    m.outputs = {"eval_report.csv", "eval_report.txt", "per_image.csv"};
    m.write(dir / "manifest.json");
    std::cout << format_table({report, baseline});
}

PriorDistribution single_prior(const ModelConfig& mc, const std::string& prior_path, const std::string& weighting,
                               const std::string& id, std::uint64_t seed) {
    return priors_for(mc, parse_weighting(weighting), prior_path, {id}, seed).at(id);
}

void cmd_denoise(const std::string& checkpoint, const std::string& in, const std::string& prior_path,
                 const std::string& weighting, std::string id, bool whole_image, std::uint64_t seed,
                 const std::string& out) {
    const Model<float> model = load_model(checkpoint);
    const CTImage image = read_ctv(in);
    if (id.empty()) id = image_key(image);
    std::optional<PriorDistribution> prior;
    if (model.config().variant == Variant::BioAtt) prior = single_prior(model.config(), prior_path, weighting, id, seed);
    const Tensor<float> z =
        denoise_image(model, image, prior ? &*prior : nullptr, {.whole_image = whole_image});
    const fs::path path(out);
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_ctv(destandardize(z, id), path);
    Manifest m{"denoise"};
    m.seed = seed;
    m.config = {{"model", json::parse(model.config().to_json())}, {"weighting", weighting}, {"id", id},
                {"whole_image", whole_image}};
    m.inputs = {{"checkpoint", checkpoint}, {"image", in}, {"priors", prior_path}};
    m.outputs.push_back(out);
    m.write(fs::path(out + ".manifest.json"));
    std::printf("wrote %s\n", out.c_str());
}

void cmd_attention_maps(const std::string& checkpoint, const std::string& in, const std::string& prior_path,
                        const std::string& weighting, std::string id, const std::string& tag, std::uint64_t seed,
                        const std::string& out) {
    const Model<float> model = load_model(checkpoint);
    const ModelConfig& mc = model.config();
    if (mc.variant == Variant::Base || mc.variant == Variant::Channel) {
        throw UsageError("the " + to_string(mc.variant) + " variant has no spatial attention maps");
    }
    const CTImage image = read_ctv(in);
    if (id.empty()) id = image_key(image);
    if (image.height < mc.min_extent() || image.width < mc.min_extent()) {
        throw UsageError("image smaller than " + std::to_string(mc.min_extent()) + " pixels");
    }

    // The spatial variant has one unweighted map; label it as such.
    DescriptorSet descriptors({"spatial"});
    PriorDistribution prior = uniform_priors(1);
    Tensor<float> prior_row;
    if (mc.variant == Variant::BioAtt) {
        prior = single_prior(mc, prior_path, weighting, id, seed);
        descriptors = descriptors_for(mc.n_descriptors);
        if (!prior_path.empty() && parse_weighting(weighting) == Weighting::File) {
            descriptors = load_prior_file(prior_path).descriptors;
        }
        prior_row = Tensor<float>({1, prior.size()});
        for (std::size_t i = 0; i < prior.size(); ++i) prior_row[i] = static_cast<float>(prior[i]);
    }

    Tape<float> tape;
    const Var x = tape.leaf(standardize<float>(image));
    const auto trace = forward(tape, model, x, mc.variant == Variant::BioAtt ? &prior_row : nullptr,
                               {.encoder_only = true});
    fs::path dir(out);
    if (!tag.empty()) dir /= tag;
    Manifest m{"attention-maps"};
    m.seed = seed;
    for (std::size_t s = 0; s < trace.attention.size(); ++s) {
        const auto& att = trace.attention[s];
        const fs::path site = dir / kAttentionSites[s];
        fs::create_directories(site);
        for (const auto& p : export_attention_maps(tape.value(att.organ_maps), tape.value(att.fused), prior,
                                                   descriptors, site)) {
            m.outputs.push_back(fs::relative(p, dir).string());
        }
    }
    m.config = {{"model", json::parse(mc.to_json())}, {"weighting", weighting}, {"id", id}, {"epoch_tag", tag}};
    m.inputs = {{"checkpoint", checkpoint}, {"image", in}, {"priors", prior_path}};
    m.write(dir / "manifest.json");
    std::printf("wrote %zu maps to %s\n", m.outputs.size(), dir.c_str());
}

void cmd_experiment(const std::string& name, const TrainFlags& flags, const std::string& data_dir,
                    const std::string& prior_path, const std::string& out) {
    ExperimentConfig cfg;
    cfg.name = name;
    cfg.train = flags.resolve();
    cfg.split.seed = cfg.train.seed;
    cfg.out_dir = out;
    if (!prior_path.empty()) cfg.prior_file = load_prior_file(prior_path);
    const PairedDataset data = load_dataset(data_dir);
    const auto result = run_experiment(cfg, data, print_epoch);

    Manifest m{"experiment"};
    m.seed = cfg.train.seed;
    m.config = flags.to_json(cfg.train);
    m.config["name"] = name;
    m.inputs = {{"data", data_dir}, {"priors", prior_path}};
    m.outputs = {name + "_report.csv", name + "_report.txt", "shapes.log"};
    for (const auto& run : result.runs) {
        m.outputs.push_back("history_" + run.label + ".csv");
        m.outputs.push_back(run.label + ".ckpt");
    }
    m.write(fs::path(out) / "manifest.json");
    std::vector<MetricsReport> table;
    for (const auto& run : result.runs) table.push_back(run.test_report);
    table.push_back(result.ldct_report);
    std::cout << format_table(table);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"BioAtt low-dose CT denoising"};
    app.set_version_flag("--version", std::string(BIOATT_VERSION));
    app.set_config("--config", "", "TOML-style file of defaults; command-line flags win");
    app.require_subcommand(1);

    std::string data_dir, out, prior_path, checkpoint, in, id, weighting = "clip-file";
    std::uint64_t seed = 0;

    auto* gen = app.add_subcommand("gen-phantom", "Write paired synthetic LDCT/NDCT phantoms");
    std::size_t count = 0, dims = 512;
    double sigma = 0.06;
    gen->add_option("--count", count, "Number of image pairs")->required();
    gen->add_option("--dims", dims, "Square image size")->capture_default_str();
    gen->add_option("--sigma", sigma, "Noise level in standardized units")->capture_default_str();
    gen->add_option("--seed", seed)->capture_default_str();
    gen->add_option("--out", out)->required();

    auto* stub = app.add_subcommand("priors-stub", "Write a prior file without a vision-language model");
    std::string mode = "fixture";
    stub->add_option("--data", data_dir)->required();
    stub->add_option("--mode", mode, "uniform, random or fixture")->capture_default_str();
    stub->add_option("--seed", seed)->capture_default_str();
    stub->add_option("--out", out, "Output JSON")->required();

    auto* tr = app.add_subcommand("train", "Train one model");
    TrainFlags train_flags;
    train_flags.add(tr);
    tr->add_option("--data", data_dir)->required();
    tr->add_option("--priors", prior_path, "Prior JSON for clip-file weighting");
    tr->add_option("--out", out)->required();

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint against NDCT references");
    std::string subset = "all", input = "ldct";
    bool whole_image = false;
    ev->add_option("--checkpoint", checkpoint)->required();
    ev->add_option("--data", data_dir)->required();
    ev->add_option("--priors", prior_path);
    ev->add_option("--weighting", weighting)->capture_default_str();
    ev->add_option("--subset", subset, "all, train, val or test (split by --seed)")->capture_default_str();
    ev->add_option("--input", input, "Feed ldct (default) or ndct images to the model")->capture_default_str();
    ev->add_flag("--whole-image", whole_image, "Feed whole images instead of patches");
    ev->add_option("--seed", seed)->capture_default_str();
    ev->add_option("--out", out)->required();

    auto* dn = app.add_subcommand("denoise", "Denoise one CTV image");
    dn->add_option("--checkpoint", checkpoint)->required();
    dn->add_option("--in", in)->required();
    dn->add_option("--priors", prior_path);
    dn->add_option("--weighting", weighting)->capture_default_str();
    dn->add_option("--id", id, "Image id in the prior file (default: file stem without _ld/_nd)");
    dn->add_flag("--whole-image", whole_image);
    dn->add_option("--seed", seed)->capture_default_str();
    dn->add_option("--out", out)->required();

    auto* am = app.add_subcommand("attention-maps", "Export attention maps of one image as PGM files");
    std::string tag;
    am->add_option("--checkpoint", checkpoint)->required();
    am->add_option("--in", in)->required();
    am->add_option("--priors", prior_path);
    am->add_option("--weighting", weighting)->capture_default_str();
    am->add_option("--id", id);
    am->add_option("--epoch-tag", tag, "Subdirectory name, e.g. epoch_10");
    am->add_option("--seed", seed)->capture_default_str();
    am->add_option("--out", out)->required();

    auto* ex = app.add_subcommand("experiment", "Run an ablation: attention, patching or weighting");
    std::string name;
    TrainFlags exp_flags;
    exp_flags.add(ex);
    ex->add_option("--name", name)->required()->check(CLI::IsMember({"attention", "patching", "weighting"}));
    ex->add_option("--data", data_dir)->required();
    ex->add_option("--priors", prior_path, "Prior JSON (default: fixture priors from the LDCT images)");
    ex->add_option("--out", out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*gen) cmd_gen_phantom(count, dims, sigma, seed, out);
        if (*stub) cmd_priors_stub(data_dir, mode, seed, out);
        if (*tr) cmd_train(train_flags, data_dir, prior_path, out);
        if (*ev) cmd_eval(checkpoint, data_dir, prior_path, weighting, subset, input, whole_image, seed, out);
        if (*dn) cmd_denoise(checkpoint, in, prior_path, weighting, id, whole_image, seed, out);
        if (*am) cmd_attention_maps(checkpoint, in, prior_path, weighting, id, tag, seed, out);
        if (*ex) cmd_experiment(name, exp_flags, data_dir, prior_path, out);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const InvariantError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
