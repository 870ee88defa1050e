#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bioatt/error.hpp"
#include "bioatt/train.hpp"
#include "doctest.h"

using namespace bioatt;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / "bioatt_test_train" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

PairedDataset phantoms(std::size_t count, std::size_t extent, std::uint64_t seed) {
    PairedDataset d;
    for (std::size_t i = 0; i < count; ++i) {
        const std::string id = "ph" + std::to_string(10 + i);
        d.ids.push_back(id);
        d.pairs.push_back(gen_phantom({extent, extent, 0.06}, seed + i, id));
    }
    return d;
}

// Small enough that a few epochs run in well under a second.
TrainConfig tiny_config(Variant v = Variant::BioAtt) {
    TrainConfig c;
    c.model.variant = v;
    c.model.channels = 4;
    c.model.patch_size = 25;
    c.model.attention_kernel = 3;
    c.model.se_reduction = 2;
    c.model.seed = 3;
    c.max_epochs = 3;
    c.lr0 = 1e-3;
    c.seed = 11;
    return c;
}

PriorMap fixture_map(const PairedDataset& d) {
    PriorMap m;
    for (const auto& id : d.ids) m.emplace(id, fixture_priors(d.at(id).ldct, DescriptorSet::defaults()));
    return m;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
    TrainConfig c;
    for (std::size_t e = 1; e <= 5; ++e) CHECK(learning_rate(c, e) == 1e-5);
    CHECK(learning_rate(c, 6) == 5e-6);
    CHECK(learning_rate(c, 10) == 5e-6);
    CHECK(learning_rate(c, 11) == 2.5e-6);
    CHECK(learning_rate(c, 151) == 1e-10);
    CHECK(learning_rate(c, 1000) == 1e-10);
    CHECK_THROWS_AS(learning_rate(c, 0), UsageError);
}

TEST_CASE("config validation") {
    TrainConfig c;
    CHECK_NOTHROW(c.validate());
    c.batch = 0;
    CHECK_THROWS_AS(c.validate(), UsageError);
    c = TrainConfig{};
    c.lr0 = 0;
    CHECK_THROWS_AS(c.validate(), UsageError);
    c = TrainConfig{};
    c.rotation_probability = 1.5;
    CHECK_THROWS_AS(c.validate(), UsageError);
    CHECK(parse_weighting("clip-file") == Weighting::File);
    CHECK(parse_weighting("random") == Weighting::Random);
    CHECK(to_string(Weighting::Uniform) == "uniform");
    CHECK_THROWS_AS(parse_weighting("clip"), UsageError);
}

TEST_CASE("early stopping fires after exactly `patience` non-improving evaluations") {
    EarlyStopping s(7);
    CHECK(s.update(1.0));
    for (int i = 0; i < 6; ++i) {
        CHECK_FALSE(s.update(1.0));  // ties are not improvements
        CHECK_FALSE(s.should_stop());
    }
    CHECK_FALSE(s.update(2.0));
    CHECK(s.should_stop());

    EarlyStopping r(3);
    r.update(1.0);
    r.update(1.5);
    r.update(1.2);
    CHECK(r.update(0.9));  // improvement resets the counter
    CHECK(r.since_best() == 0);
    CHECK(r.best() == 0.9);
}

TEST_CASE("Adam first step matches the closed form") {
    ParameterMap<float> p{{"w", Tensor<float>({3}, {1.0f, -2.0f, 0.5f})}};
    const ParameterMap<float> g{{"w", Tensor<float>({3}, {0.3f, -0.01f, 0.0f})}};
    Adam adam;
    adam.step(p, g, 0.1);
    // m_hat = g, v_hat = g^2 after bias correction, so the step is lr * g / (|g| + eps).
    for (std::size_t i = 0; i < 3; ++i) {
        const double gi = g.at("w")[i];
        const double expect = std::vector<double>{1.0, -2.0, 0.5}[i] - 0.1 * gi / (std::abs(gi) + 1e-8);
        CHECK(p.at("w")[i] == doctest::Approx(expect).epsilon(1e-6));
    }
    CHECK(adam.state().step == 1);
    CHECK(adam.state().first_moment.at("w")[0] == doctest::Approx(0.03));
    CHECK(adam.state().second_moment.at("w")[0] == doctest::Approx(0.001 * 0.09));

    const ParameterMap<float> bad{{"nope", Tensor<float>({3})}};
    CHECK_THROWS_AS(adam.step(p, bad, 0.1), UsageError);
}

TEST_CASE("one optimizer step at lr 1e-5 lowers the batch loss") {
    ModelConfig mc;
    mc.channels = 16;
    mc.attention_kernel = 3;
    const auto data = phantoms(4, 128, 500);
    const PatchGrid grid = PatchGrid::sampling(128, 128);
    std::vector<Tensor<float>> xs, ys;
    for (const auto& pair : data.pairs) {
        xs.push_back(batch_slice(patchify(standardize<float>(pair.ldct), grid), 0, 1));
        ys.push_back(batch_slice(patchify(standardize<float>(pair.ndct), grid), 0, 1));
    }
    const Tensor<float> x = batch_concat<float>(xs), y = batch_concat<float>(ys);
    Tensor<float> priors({4, mc.n_descriptors});
    for (std::size_t b = 0; b < 4; ++b) {
        const auto pr = fixture_priors(data.pairs[b].ldct, DescriptorSet::defaults());
        for (std::size_t n = 0; n < mc.n_descriptors; ++n) priors[b * mc.n_descriptors + n] = float(pr[n]);
    }

    int failures = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        mc.seed = seed;
        Model<float> model(mc);
        const double before = rmse(predict(model, x, &priors), y);
        Tape<float> tape;
        const Var vx = tape.leaf(x);
        const auto trace = forward(tape, model, vx, &priors, {.parameters_require_grad = true});
        tape.backward(mse_loss(tape, trace.output, tape.leaf(y)));
        ParameterMap<float> grads;
        for (const auto& [name, v] : trace.parameters) grads.emplace(name, tape.grad(v));
        Adam adam;
        adam.step(model.parameters(), grads, 1e-5);
        const double after = rmse(predict(model, x, &priors), y);
        if (!(after < before)) ++failures;
    }
    CHECK(failures == 0);
}

TEST_CASE("priors resolution") {
    const std::vector<std::string> ids{"a", "b", "c"};
    const auto u = resolve_priors(Weighting::Uniform, ids, 17, 0);
    CHECK(u.size() == 3);
    for (const auto& [id, p] : u) CHECK(p == uniform_priors(17));

    const auto r1 = resolve_priors(Weighting::Random, ids, 17, 5);
    const auto r2 = resolve_priors(Weighting::Random, ids, 17, 5);
    const auto r3 = resolve_priors(Weighting::Random, ids, 17, 6);
    CHECK(r1 == r2);
    CHECK(r1.at("a") != r3.at("a"));
    CHECK(r1.at("a") != r1.at("b"));  // per image, not one shared vector

    PriorFile file{DescriptorSet::defaults(), {{"a", uniform_priors(17)}, {"b", random_priors(17, 1)}}};
    CHECK_THROWS_AS(resolve_priors(Weighting::File, ids, 17, 0, &file), UsageError);
    file.priors.emplace("c", random_priors(17, 2));
    const auto f = resolve_priors(Weighting::File, ids, 17, 0, &file);
    CHECK(f.at("b") == random_priors(17, 1));
    CHECK_THROWS_AS(resolve_priors(Weighting::File, ids, 5, 0, &file), UsageError);
    CHECK_THROWS_AS(resolve_priors(Weighting::File, ids, 17, 0, nullptr), UsageError);
}

TEST_CASE("evaluation of a perfect reconstruction") {
    auto data = phantoms(3, 64, 40);
    for (auto& pair : data.pairs) pair.ldct = pair.ndct;
    const auto report = evaluate_identity(data, data.ids);
    CHECK(report.rmse.mean == 0.0);
    CHECK(report.ssim.mean == 1.0);
    CHECK(report.psnr_inf_count == 3);
    CHECK(format_csv_row(report) == "ldct,0,0,nan,nan,1,0");
}

TEST_CASE("denoising and evaluation") {
    const auto data = phantoms(3, 64, 60);
    const auto priors = fixture_map(data);
    const Model<float> model(tiny_config().model);

    const auto* prior = &priors.at(data.ids[0]);
    const auto patched = denoise_image(model, data.pairs[0].ldct, prior);
    const auto whole = denoise_image(model, data.pairs[0].ldct, prior, {.whole_image = true});
    CHECK(patched.shape() == Shape{1, 1, 64, 64});
    CHECK(whole.shape() == Shape{1, 1, 64, 64});
    CHECK(patched.all_finite());
    // Batch size only changes how patches are grouped.
    CHECK(denoise_image(model, data.pairs[0].ldct, prior, {.batch = 1}) == patched);
    CHECK_THROWS_AS(denoise_image(model, data.pairs[0].ldct, nullptr), UsageError);

    const auto a = evaluate(model, data, data.ids, &priors);
    const auto b = evaluate(model, data, data.ids, &priors);
    CHECK(format_csv_row(a) == format_csv_row(b));
    CHECK(a.images.size() == 3);
    CHECK_THROWS_AS(evaluate(model, data, data.ids, nullptr), UsageError);
    CHECK_THROWS_AS(evaluate(model, data, {"missing"}, &priors), UsageError);

    const CTImage small("s", 20, 20);
    CHECK_THROWS_AS(denoise_image(model, small, prior), UsageError);
}

TEST_CASE("training loop") {
    const auto data = phantoms(8, 64, 80);
    const auto priors = fixture_map(data);
    const std::vector<std::string> train_ids(data.ids.begin(), data.ids.begin() + 6);
    const std::vector<std::string> val_ids(data.ids.begin() + 6, data.ids.end());
    const TrainConfig config = tiny_config();

    std::vector<EpochRecord> seen;
    const auto result = train(config, data, train_ids, val_ids, &priors, [&](const EpochRecord& r) { seen.push_back(r); });
    REQUIRE(result.history.size() == 3);
    CHECK(seen.size() == 3);
    CHECK(result.train_input_shape == Shape{16, 1, 25, 25});
    std::size_t argmin = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(result.history[i].epoch == i + 1);
        CHECK(std::isfinite(result.history[i].train_mse));
        if (result.history[i].val_rmse < result.history[argmin].val_rmse) argmin = i;
    }
    CHECK(result.best_epoch == argmin + 1);
    CHECK(result.best.epoch == result.best_epoch);

    // The best checkpoint reproduces its recorded validation RMSE.
    const Model<float> best(result.best.config, result.best.parameters);
    CHECK(evaluate(best, data, val_ids, &priors).rmse.mean == result.history[argmin].val_rmse);

    SUBCASE("deterministic") {
        const auto again = train(config, data, train_ids, val_ids, &priors);
        CHECK(again.best.parameters == result.best.parameters);
        CHECK(format_history_csv(again.history) == format_history_csv(result.history));
    }
    SUBCASE("save, load, evaluate") {
        const auto path = temp_dir("ckpt") / "best.ckpt";
        save_checkpoint(path, result.best);
        const auto loaded = load_model(path, config.model);
        CHECK(format_csv_row(evaluate(loaded, data, val_ids, &priors)) ==
              format_csv_row(evaluate(best, data, val_ids, &priors)));
    }
    SUBCASE("whole-image mode uses batch 1") {
        TrainConfig w = config;
        w.whole_image = true;
        w.max_epochs = 1;
        const auto r = train(w, data, train_ids, val_ids, &priors);
        CHECK(r.train_input_shape == Shape{1, 1, 64, 64});
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(train(config, data, train_ids, val_ids, nullptr), UsageError);
        CHECK_THROWS_AS(train(config, data, {}, val_ids, &priors), UsageError);
        CHECK_THROWS_AS(train(config, data, train_ids, {}, &priors), UsageError);
        CHECK_NOTHROW(train(tiny_config(Variant::Base), data, train_ids, val_ids, nullptr));
    }
}

TEST_CASE("history CSV") {
    const std::vector<EpochRecord> h{{1, 1e-5, 0.5, 0.25, 12.5, 0.75}};
    CHECK(format_history_csv(h) == "epoch,lr,train_mse,val_rmse,val_psnr,val_ssim\n1,1e-05,0.5,0.25,12.5,0.75\n");
}

TEST_CASE("experiments") {
    const auto data = phantoms(10, 64, 90);
    ExperimentConfig cfg;
    cfg.train = tiny_config();
    cfg.train.max_epochs = 2;
    cfg.split.seed = cfg.train.seed;

    auto rows = [](const std::string& csv) { return std::count(csv.begin(), csv.end(), '\n') - 1; };

    SUBCASE("attention") {
        cfg.name = "attention";
        cfg.out_dir = temp_dir("attention_a");
        const auto result = run_experiment(cfg, data);
        REQUIRE(result.runs.size() == 4);
        const std::string csv = slurp(cfg.out_dir / "attention_report.csv");
        CHECK(csv.rfind(std::string(kReportCsvHeader) + "\n", 0) == 0);
        CHECK(rows(csv) == 4);
        for (const char* label : {"base", "channel", "spatial", "bioatt"}) {
            CHECK(csv.find(std::string("\n") + label + ",") != std::string::npos);
            CHECK(rows(slurp(cfg.out_dir / ("history_" + std::string(label) + ".csv"))) == 2);
            CHECK(fs::exists(cfg.out_dir / (std::string(label) + ".ckpt")));
        }
        CHECK(slurp(cfg.out_dir / "attention_report.txt").find("ldct") != std::string::npos);

        ExperimentConfig again = cfg;
        again.out_dir = temp_dir("attention_b");
        run_experiment(again, data);
        for (const auto& entry : fs::directory_iterator(cfg.out_dir)) {
            CHECK_MESSAGE(slurp(entry.path()) == slurp(again.out_dir / entry.path().filename()),
                          entry.path().filename().string());
        }
    }
    SUBCASE("weighting") {
        cfg.name = "weighting";
        cfg.out_dir = temp_dir("weighting");
        const auto result = run_experiment(cfg, data);
        const std::string csv = slurp(cfg.out_dir / "weighting_report.csv");
        CHECK(rows(csv) == 3);
        CHECK(result.runs[0].label == "fixture");
        CHECK(result.runs[1].label == "uniform");
        CHECK(result.runs[2].label == "random");
    }
    SUBCASE("patching") {
        cfg.name = "patching";
        cfg.out_dir = temp_dir("patching");
        cfg.train.max_epochs = 1;
        const auto result = run_experiment(cfg, data);
        REQUIRE(result.shape_log.size() == 2);
        CHECK(result.shape_log[0] == "whole-image train_input=[1,1,64,64] eval_input=[1,1,64,64]");
        CHECK(result.shape_log[1] == "patch train_input=[16,1,25,25] eval_input=[9,1,25,25]");
        CHECK(rows(slurp(cfg.out_dir / "patching_report.csv")) == 2);
    }
    SUBCASE("bad name") {
        cfg.name = "ablation";
        CHECK_THROWS_AS(run_experiment(cfg, data), UsageError);
    }
}
