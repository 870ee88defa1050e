#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "bioatt/data.hpp"
#include "bioatt/error.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace bioatt;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / "bioatt_test_data" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

CTImage random_image(std::size_t h, std::size_t w, std::uint64_t seed, float lo = kHuMin, float hi = kHuMax) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> dist(lo, hi);
    CTImage img("img", h, w);
    for (auto& v : img.hu) v = dist(rng);
    return img;
}

double std_rmse(const CTImage& a, const CTImage& b) {
    double acc = 0;
    for (std::size_t i = 0; i < a.hu.size(); ++i) {
        const double d = (static_cast<double>(a.hu[i]) - b.hu[i]) / kHuStd;
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(a.hu.size()));
}

}  // namespace

TEST_CASE("standardization constants") {
    const CTImage img("x", 1, 3, std::vector<float>{-500.0f, 0.0f, -1000.0f});
    const auto z = standardize(img);
    CHECK(z.shape() == Shape{1, 1, 1, 3});
    CHECK(z[0] == 0.0f);
    CHECK(z[1] == 1.0f);
    CHECK(z[2] == -1.0f);
}

TEST_CASE("standardization round trip") {
    const auto img = random_image(64, 64, 1);
    const auto back = destandardize(standardize<double>(img), "img");
    double worst = 0;
    for (std::size_t i = 0; i < img.hu.size(); ++i) worst = std::max(worst, double(std::abs(back.hu[i] - img.hu[i])));
    CHECK(worst <= 1e-4);
    CHECK(back == img);

    // At 32 bits the error is half an ulp of z times 500 HU; below 500 HU that
    // is at most 6.1e-5 HU.
    const auto soft = random_image(64, 64, 2, kHuMin, 500.0f);
    const auto back32 = destandardize(standardize<float>(soft));
    worst = 0;
    for (std::size_t i = 0; i < soft.hu.size(); ++i) worst = std::max(worst, double(std::abs(back32.hu[i] - soft.hu[i])));
    CHECK(worst <= 1e-4);

    // the reverse composition
    std::mt19937_64 rng(3);
    const auto z = oracle::random_tensor<double>({1, 1, 8, 8}, rng, -2, 7);
    CHECK(max_abs_diff(standardize<double>(destandardize(z)), z) <= 1e-6);
}

TEST_CASE("sampling anchors") {
    CHECK(sampling_anchors(512) == std::vector<std::size_t>{0, 57, 114, 171, 228, 285, 342, 399, 457});
    CHECK(PatchGrid::sampling(512, 512).count() == 81);
    CHECK(sampling_anchors(55) == std::vector<std::size_t>{0});
    CHECK(sampling_anchors(128) == std::vector<std::size_t>{0, 73});
    CHECK_THROWS_AS(sampling_anchors(54), UsageError);

    // The edge-snapped patch reaches the last pixel, but the 57-pixel stride
    // leaves two-pixel gaps between the other patches.
    const auto grid = PatchGrid::sampling(512, 512);
    CHECK(grid.rows.back() + 55 == 512);
    CHECK_FALSE(grid.covers());
}

TEST_CASE("covering anchors") {
    for (std::size_t extent : {55u, 56u, 100u, 110u, 111u, 128u, 200u, 512u, 513u}) {
        const auto a = covering_anchors(extent);
        CHECK(a.front() == 0);
        CHECK(a.back() + 55 == extent);
        for (std::size_t i = 1; i < a.size(); ++i) {
            CHECK(a[i] > a[i - 1]);
            CHECK(a[i] - a[i - 1] <= 55);
        }
        CHECK(PatchGrid::covering(extent, extent).covers());
    }
    CHECK(covering_anchors(512).size() == 10);
    CHECK(covering_anchors(128) == std::vector<std::size_t>{0, 37, 73});
}

TEST_CASE("patchify then depatchify is the identity") {
    const auto img = standardize(random_image(512, 512, 4));
    const auto grid = PatchGrid::covering(512, 512);
    const auto patches = patchify(img, grid);
    CHECK(patches.shape() == Shape{100, 1, 55, 55});
    CHECK(depatchify(patches, grid) == img);

    // (511, 511) sits in the last patch at its bottom-right corner
    CHECK(patches[99 * 55 * 55 + 54 * 55 + 54] == img[511 * 512 + 511]);

    const auto small = standardize<double>(random_image(128, 100, 5));
    const auto g2 = PatchGrid::covering(128, 100);
    CHECK(depatchify(patchify(small, g2), g2) == small);
}

TEST_CASE("sampling patches land at their anchors") {
    const auto img = standardize(random_image(512, 512, 6));
    const auto grid = PatchGrid::sampling(512, 512);
    const auto patches = patchify(img, grid);
    CHECK(patches.shape() == Shape{81, 1, 55, 55});
    // patch (row 2, col 8) starts at (114, 457)
    const std::size_t k = 2 * 9 + 8;
    CHECK(patches[k * 55 * 55] == img[114 * 512 + 457]);
    CHECK(patches[k * 55 * 55 + 3 * 55 + 4] == img[117 * 512 + 461]);
    // uncovered pixels cannot be reconstructed
    CHECK_THROWS_AS(depatchify(patches, grid), InvariantError);
}

TEST_CASE("depatchify averages overlaps") {
    PatchGrid grid{3, 4, 3, {0}, {0, 1}};
    Tensor<float> patches({2, 1, 3, 3});
    for (std::size_t i = 0; i < 9; ++i) {
        patches[i] = 1.0f;
        patches[9 + i] = 3.0f;
    }
    const auto out = depatchify(patches, grid);
    CHECK(out.at(0, 0, 0, 0) == 1.0f);
    CHECK(out.at(0, 0, 1, 1) == 2.0f);
    CHECK(out.at(0, 0, 2, 3) == 3.0f);
    CHECK_THROWS_AS(patchify(Tensor<float>({1, 1, 3, 5}), grid), UsageError);
}

TEST_CASE("rotations") {
    std::mt19937_64 rng(7);
    const auto p = oracle::random_tensor<float>({1, 1, 55, 55}, rng);
    CHECK(rotate90(rotate90(p, 2), 2) == p);
    CHECK(rotate90(rotate90(p, 1), 3) == p);
    CHECK(rotate90(p, 4) == p);
    const Tensor<float> m({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(rotate90(m, 1) == Tensor<float>({1, 1, 2, 2}, {2, 4, 1, 3}));  // counter-clockwise
    CHECK(rotate90(m, -1) == rotate90(m, 3));
    CHECK_THROWS_AS(rotate90(Tensor<float>({2, 3}), 1), UsageError);

    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        CHECK(rotate_augment(p, seed, 0.0) == p);
        const auto r = rotate_augment(p, seed);
        CHECK(r == rotate_augment(p, seed));
        auto a = std::vector<float>(p.data().begin(), p.data().end());
        auto b = std::vector<float>(r.data().begin(), r.data().end());
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        CHECK(a == b);
    }

    // roughly half of the draws rotate
    Rng draws(11);
    int rotated = 0;
    for (int i = 0; i < 4000; ++i) rotated += draw_rotation(draws) != 0;
    CHECK(rotated == doctest::Approx(4000 * 0.5 * 0.75).epsilon(0.08));
}

TEST_CASE("dataset split") {
    auto ids = [](std::size_t n) {
        std::vector<std::string> v;
        for (std::size_t i = 0; i < n; ++i) v.push_back("img_" + std::to_string(i));
        return v;
    };
    const auto s100 = split_dataset(ids(100));
    CHECK(s100.train.size() == 64);
    CHECK(s100.val.size() == 16);
    CHECK(s100.test.size() == 20);
    const auto s10 = split_dataset(ids(10));
    CHECK(s10.train.size() == 6);
    CHECK(s10.val.size() == 1);
    CHECK(s10.test.size() == 3);
    CHECK_THROWS_AS(split_dataset(ids(4)), UsageError);
    CHECK_THROWS_AS(split_dataset({"a", "b", "c", "d", "a"}), UsageError);

    for (std::size_t m : {5u, 7u, 32u, 100u}) {
        const auto s = split_dataset(ids(m), {0.64, 0.16, 0.20, 9});
        std::set<std::string> all;
        for (const auto* part : {&s.train, &s.val, &s.test}) all.insert(part->begin(), part->end());
        CHECK(all.size() == m);
        CHECK(s.train.size() + s.val.size() + s.test.size() == m);
    }
    // deterministic, order-insensitive, seed-sensitive
    auto shuffled = ids(32);
    std::reverse(shuffled.begin(), shuffled.end());
    CHECK(split_dataset(ids(32), {0.64, 0.16, 0.2, 3}).train == split_dataset(shuffled, {0.64, 0.16, 0.2, 3}).train);
    CHECK(split_dataset(ids(32), {0.64, 0.16, 0.2, 3}).train != split_dataset(ids(32), {0.64, 0.16, 0.2, 4}).train);
}

TEST_CASE("phantoms") {
    const PhantomSpec spec{128, 128, 0.06};
    const auto a = gen_phantom(spec, 5), b = gen_phantom(spec, 5), c = gen_phantom(spec, 6);
    CHECK(a.ldct == b.ldct);
    CHECK(a.ndct == b.ndct);
    CHECK_FALSE(a.ndct == c.ndct);
    for (float v : a.ldct.hu) {
        CHECK(v >= kHuMin);
        CHECK(v <= kHuMax);
    }
    CHECK(*std::min_element(a.ndct.hu.begin(), a.ndct.hu.end()) == -1000.0f);

    const auto clean = gen_phantom({128, 96, 0.0}, 5);
    CHECK(clean.ldct == clean.ndct);
    CHECK(clean.ndct.width == 96);

    CHECK_THROWS_AS(gen_phantom({63, 128, 0.06}, 1), UsageError);
    CHECK_THROWS_AS(gen_phantom({128, 128, -1.0}, 1), UsageError);
}

TEST_CASE("phantom noise level") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto pair = gen_phantom({512, 512, 0.06}, seed);
        // Pixels away from the -1024 HU clamp carry the full noise level.
        double acc = 0;
        std::size_t n = 0;
        for (std::size_t i = 0; i < pair.ndct.hu.size(); ++i) {
            if (pair.ndct.hu[i] < kHuMin + 5 * 0.06 * kHuStd) continue;
            const double d = (static_cast<double>(pair.ldct.hu[i]) - pair.ndct.hu[i]) / kHuStd;
            acc += d * d;
            ++n;
        }
        CHECK(std::sqrt(acc / n) == doctest::Approx(0.06).epsilon(0.05));
        // Over the whole image, clamping in air pulls it down slightly.
        const double all = std_rmse(pair.ldct, pair.ndct);
        CHECK(all == doctest::Approx(0.06).epsilon(0.05));
        CHECK(all <= 0.06 * 1.01);
    }
}

TEST_CASE("CTV round trip and layout") {
    const auto dir = temp_dir("ctv");
    auto img = random_image(37, 53, 8);
    img.id = "sample";
    write_ctv(img, dir / "sample.ctv");
    CHECK(read_ctv(dir / "sample.ctv") == img);

    const CTImage tiny("tiny", 2, 2, std::vector<float>{-1000.0f, 0.0f, 1.0f, 40.5f});
    write_ctv(tiny, dir / "tiny.ctv");
    std::ifstream in(dir / "tiny.ctv", std::ios::binary);
    const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::vector<unsigned char> expected = {
        'C', 'T', 'V', '1', 2, 0, 0, 0, 2, 0, 0, 0,
        0x00, 0x00, 0x7a, 0xc4,  // -1000.0f
        0x00, 0x00, 0x00, 0x00,  // 0.0f
        0x00, 0x00, 0x80, 0x3f,  // 1.0f
        0x00, 0x00, 0x22, 0x42,  // 40.5f
    };
    CHECK(bytes == expected);
}

TEST_CASE("CTV errors") {
    const auto dir = temp_dir("ctv_errors");
    write_ctv(random_image(4, 4, 9), dir / "good.ctv");
    std::ifstream in(dir / "good.ctv", std::ios::binary);
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    auto write = [&](const std::string& name, const std::string& content) {
        std::ofstream(dir / name, std::ios::binary) << content;
        return dir / name;
    };
    CHECK_THROWS_AS(read_ctv(write("short.ctv", bytes.substr(0, bytes.size() - 1))), FormatError);
    CHECK_THROWS_AS(read_ctv(write("header.ctv", bytes.substr(0, 7))), FormatError);
    CHECK_THROWS_AS(read_ctv(write("magic.ctv", "CTV2" + bytes.substr(4))), FormatError);
    CHECK_THROWS_AS(read_ctv(write("long.ctv", bytes + "x")), FormatError);
    std::string huge = bytes;
    huge[4] = huge[5] = huge[6] = huge[7] = '\xff';
    huge[8] = huge[9] = huge[10] = huge[11] = '\xff';
    CHECK_THROWS_AS(read_ctv(write("huge.ctv", huge)), FormatError);
    CHECK_THROWS_AS(read_ctv(dir / "absent.ctv"), FormatError);
}

TEST_CASE("paired dataset directory") {
    const auto dir = temp_dir("dataset");
    for (int i = 0; i < 3; ++i) {
        const std::string id = "ph_" + std::to_string(i);
        save_pair(gen_phantom({64, 64, 0.06}, static_cast<std::uint64_t>(i), id), dir);
    }
    std::ofstream(dir / "notes.txt") << "ignored";
    const auto ds = load_dataset(dir);
    CHECK(ds.ids == std::vector<std::string>{"ph_0", "ph_1", "ph_2"});
    CHECK(ds.at("ph_1").ndct == gen_phantom({64, 64, 0.06}, 1, "ph_1").ndct);
    CHECK_THROWS_AS(ds.at("ph_9"), UsageError);

    fs::remove(dir / "ph_2_nd.ctv");
    CHECK_THROWS_AS(load_dataset(dir), FormatError);
    CHECK_THROWS_AS(load_dataset(temp_dir("empty")), FormatError);
}

TEST_CASE("fixture priors follow HU content") {
    const auto d = DescriptorSet::defaults();
    CTImage lung("l", 64, 64, -700.0f);
    const auto p = fixture_priors(lung, d);
    CHECK(p.ranking()[0] == *d.index_of("lungs"));
    CHECK(std::abs(std::accumulate(p.probs().begin(), p.probs().end(), 0.0) - 1.0) <= 1e-9);
    CTImage bone("b", 64, 64, 400.0f);
    const auto q = fixture_priors(bone, d);
    CHECK((q.ranking()[0] == *d.index_of("spine") || q.ranking()[0] == *d.index_of("ribs")));
    // Unknown descriptors still get a valid distribution.
    const auto r = fixture_priors(lung, DescriptorSet({"lungs", "brain"}));
    CHECK(r[0] > r[1]);
}
