#include "bioatt/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>

#include "bioatt/error.hpp"

namespace bioatt {

CTImage::CTImage(std::string id_, std::size_t h, std::size_t w, float fill)
    : id(std::move(id_)), height(h), width(w), hu(h * w, fill) {}

CTImage::CTImage(std::string id_, std::size_t h, std::size_t w, std::vector<float> values)
    : id(std::move(id_)), height(h), width(w), hu(std::move(values)) {
    if (hu.size() != h * w) {
        throw UsageError("image " + id + ": " + std::to_string(hu.size()) + " pixels for " + std::to_string(h) + "x" +
                         std::to_string(w));
    }
}

template <typename T>
Tensor<T> standardize(const CTImage& image) {
    Tensor<T> z({1, 1, image.height, image.width});
    for (std::size_t i = 0; i < image.hu.size(); ++i) {
        z[i] = static_cast<T>((static_cast<double>(image.hu[i]) - kHuMean) / kHuStd);
    }
    return z;
}

template <typename T>
CTImage destandardize(const Tensor<T>& z, std::string id) {
    if (z.rank() < 2) throw UsageError("destandardize needs at least two axes, got " + shape_str(z.shape()));
    const std::size_t H = z.dim(z.rank() - 2), W = z.dim(z.rank() - 1);
    if (z.size() != H * W) throw UsageError("destandardize expects a single image, got " + shape_str(z.shape()));
    CTImage out(std::move(id), H, W);
    for (std::size_t i = 0; i < z.size(); ++i) {
        out.hu[i] = static_cast<float>(static_cast<double>(z[i]) * kHuStd + kHuMean);
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

void check_extent(std::size_t extent, std::size_t patch) {
    if (patch == 0) throw UsageError("patch size must be positive");
    if (extent < patch) {
        throw UsageError("image extent " + std::to_string(extent) + " smaller than patch " + std::to_string(patch));
    }
}

}  // namespace

std::vector<std::size_t> sampling_anchors(std::size_t extent, std::size_t patch) {
    check_extent(extent, patch);
    const std::size_t stride = patch + 2;
    const std::size_t span = extent - patch;
    const std::size_t n = static_cast<std::size_t>(std::lround(static_cast<double>(span) / stride)) + 1;
    std::vector<std::size_t> anchors;
    for (std::size_t i = 0; i + 1 < n; ++i) anchors.push_back(i * stride);
    if (anchors.empty() || anchors.back() != span) anchors.push_back(span);
    return anchors;
}

std::vector<std::size_t> covering_anchors(std::size_t extent, std::size_t patch) {
    check_extent(extent, patch);
    const std::size_t span = extent - patch;
    if (span == 0) return {0};
    const std::size_t n = (span + patch - 1) / patch + 1;
    std::vector<std::size_t> anchors(n);
    for (std::size_t i = 0; i < n; ++i) anchors[i] = (i * span + (n - 1) / 2) / (n - 1);
    return anchors;
}

bool PatchGrid::covers() const {
    auto axis = [&](const std::vector<std::size_t>& anchors, std::size_t extent) {
        std::size_t reach = 0;  // first uncovered index
        for (std::size_t a : anchors) {
            if (a > reach) return false;
            reach = std::max(reach, a + patch);
        }
        return reach >= extent;
    };
    return axis(rows, height) && axis(cols, width);
}

PatchGrid PatchGrid::sampling(std::size_t height, std::size_t width, std::size_t patch) {
    return {height, width, patch, sampling_anchors(height, patch), sampling_anchors(width, patch)};
}

PatchGrid PatchGrid::covering(std::size_t height, std::size_t width, std::size_t patch) {
    return {height, width, patch, covering_anchors(height, patch), covering_anchors(width, patch)};
}

namespace {

template <typename T>
void check_image(const Tensor<T>& image, const PatchGrid& grid) {
    const bool ok = (image.rank() == 2 || (image.rank() == 4 && image.dim(0) == 1 && image.dim(1) == 1)) &&
                    image.dim(image.rank() - 2) == grid.height && image.dim(image.rank() - 1) == grid.width;
    if (!ok) {
        throw UsageError("image " + shape_str(image.shape()) + " does not match a " + std::to_string(grid.height) + "x" +
                         std::to_string(grid.width) + " patch grid");
    }
    for (std::size_t r : grid.rows) {
        if (r + grid.patch > grid.height) throw UsageError("patch row anchor outside the image");
    }
    for (std::size_t c : grid.cols) {
        if (c + grid.patch > grid.width) throw UsageError("patch column anchor outside the image");
    }
}

}  // namespace

template <typename T>
Tensor<T> patchify(const Tensor<T>& image, const PatchGrid& grid) {
    check_image(image, grid);
    const std::size_t p = grid.patch, W = grid.width;
    Tensor<T> out({grid.count(), 1, p, p});
    std::size_t k = 0;
    for (std::size_t r : grid.rows) {
        for (std::size_t c : grid.cols) {
            T* dst = out.storage().data() + k * p * p;
            for (std::size_t i = 0; i < p; ++i) {
                std::copy_n(image.data().data() + (r + i) * W + c, p, dst + i * p);
            }
            ++k;
        }
    }
    return out;
}

template <typename T>
Tensor<T> depatchify(const Tensor<T>& patches, const PatchGrid& grid) {
    const std::size_t p = grid.patch, H = grid.height, W = grid.width;
    if (patches.shape() != Shape{grid.count(), 1, p, p}) {
        throw UsageError("patches " + shape_str(patches.shape()) + " do not match the grid's " +
                         std::to_string(grid.count()) + " patches of " + std::to_string(p));
    }
    std::vector<double> acc(H * W, 0.0);
    std::vector<std::uint32_t> hits(H * W, 0);
    std::size_t k = 0;
    for (std::size_t r : grid.rows) {
        for (std::size_t c : grid.cols) {
            if (r + p > H || c + p > W) throw UsageError("patch anchor outside the image");
            const T* src = patches.data().data() + k * p * p;
            for (std::size_t i = 0; i < p; ++i) {
                for (std::size_t j = 0; j < p; ++j) {
                    acc[(r + i) * W + c + j] += static_cast<double>(src[i * p + j]);
                    ++hits[(r + i) * W + c + j];
                }
            }
            ++k;
        }
    }
    Tensor<T> out({1, 1, H, W});
    for (std::size_t i = 0; i < H * W; ++i) {
        if (hits[i] == 0) {
            throw InvariantError("patch grid leaves pixel (" + std::to_string(i / W) + "," + std::to_string(i % W) +
                                 ") uncovered");
        }
        out[i] = static_cast<T>(acc[i] / hits[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------

int draw_rotation(Rng& rng, double probability) {
    if (rng.uniform() >= probability) return 0;
    return static_cast<int>(rng.below(4));
}

template <typename T>
Tensor<T> rotate90(const Tensor<T>& t, int quarter_turns) {
    if (t.rank() < 2) throw UsageError("rotate90 needs at least two axes");
    const std::size_t n = t.dim(t.rank() - 1);
    if (t.dim(t.rank() - 2) != n) throw UsageError("rotation needs square planes, got " + shape_str(t.shape()));
    const int k = ((quarter_turns % 4) + 4) % 4;
    if (k == 0) return t;
    Tensor<T> out(t.shape());
    const std::size_t planes = t.size() / (n * n);
    for (std::size_t p = 0; p < planes; ++p) {
        const T* src = t.data().data() + p * n * n;
        T* dst = out.storage().data() + p * n * n;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                // counter-clockwise: dst(i,j) = src(j, n-1-i) for one turn
                std::size_t si, sj;
                switch (k) {
                    case 1: si = j, sj = n - 1 - i; break;
                    case 2: si = n - 1 - i, sj = n - 1 - j; break;
                    default: si = n - 1 - j, sj = i; break;
                }
                dst[i * n + j] = src[si * n + sj];
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> rotate_augment(const Tensor<T>& patch, std::uint64_t seed, double probability) {
    Rng rng(seed);
    return rotate90(patch, draw_rotation(rng, probability));
}

// ---------------------------------------------------------------------------

DatasetSplit split_dataset(std::vector<std::string> ids, const SplitSpec& spec) {
    const std::size_t M = ids.size();
    if (M < 5) throw UsageError("need at least 5 images to split, got " + std::to_string(M));
    for (double r : {spec.train, spec.val, spec.test}) {
        if (!(r >= 0.0)) throw UsageError("split ratios must be non-negative");
    }
    if (std::abs(spec.train + spec.val + spec.test - 1.0) > 1e-9) throw UsageError("split ratios must sum to 1");
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw UsageError("duplicate image id in split");
    Rng rng(derive_seed(spec.seed, std::string_view("split")));
    for (std::size_t i = M - 1; i > 0; --i) std::swap(ids[i], ids[rng.below(i + 1)]);

    // The products are nudged so 0.64 * 100 lands on 64, not 63.99...
    const auto n_train = static_cast<std::size_t>(std::floor(spec.train * static_cast<double>(M) + 1e-9));
    const auto n_val = static_cast<std::size_t>(std::floor(spec.val * static_cast<double>(M) + 1e-9));
    DatasetSplit out;
    out.train.assign(ids.begin(), ids.begin() + static_cast<long>(n_train));
    out.val.assign(ids.begin() + static_cast<long>(n_train), ids.begin() + static_cast<long>(n_train + n_val));
    out.test.assign(ids.begin() + static_cast<long>(n_train + n_val), ids.end());
    return out;
}

// ---------------------------------------------------------------------------

namespace {

struct Ellipse {
    double cy, cx, ry, rx, angle;
    float hu;
};

// Paints with 4x4 supersampled coverage so edges are anti-aliased.
void paint(CTImage& img, const Ellipse& e) {
    constexpr int kSub = 4;
    const double reach = std::max(e.ry, e.rx) + 1.0;
    const auto lo_r = static_cast<std::size_t>(std::max(0.0, std::floor(e.cy - reach)));
    const auto hi_r = static_cast<std::size_t>(std::clamp(std::ceil(e.cy + reach), 0.0, double(img.height)));
    const auto lo_c = static_cast<std::size_t>(std::max(0.0, std::floor(e.cx - reach)));
    const auto hi_c = static_cast<std::size_t>(std::clamp(std::ceil(e.cx + reach), 0.0, double(img.width)));
    const double ca = std::cos(e.angle), sa = std::sin(e.angle);
    for (std::size_t r = lo_r; r < hi_r; ++r) {
        for (std::size_t c = lo_c; c < hi_c; ++c) {
            int inside = 0;
            for (int i = 0; i < kSub; ++i) {
                for (int j = 0; j < kSub; ++j) {
                    const double y = r + (i + 0.5) / kSub - e.cy, x = c + (j + 0.5) / kSub - e.cx;
                    const double u = (x * ca + y * sa) / e.rx, v = (-x * sa + y * ca) / e.ry;
                    inside += u * u + v * v <= 1.0;
                }
            }
            if (inside == 0) continue;
            const double alpha = static_cast<double>(inside) / (kSub * kSub);
            float& px = img.at(r, c);
            px = static_cast<float>(px + alpha * (e.hu - px));
        }
    }
}

struct Tissue {
    float hu;
    double min_radius, max_radius;  // fraction of the smaller image side
};

constexpr Tissue kTissues[] = {
    {-700.0f, 0.10, 0.20},  // lung
    {60.0f, 0.08, 0.18},    // liver
    {50.0f, 0.04, 0.09},    // spleen
    {400.0f, 0.02, 0.06},   // bone
    {45.0f, 0.015, 0.035},  // aorta
};
constexpr float kSoftTissueHu = 40.0f;
constexpr float kAirHu = -1000.0f;

}  // namespace

ImagePair gen_phantom(const PhantomSpec& spec, std::uint64_t seed, const std::string& id) {
    if (spec.height < 64 || spec.width < 64) {
        throw UsageError("phantom dims must be at least 64, got " + std::to_string(spec.height) + "x" +
                         std::to_string(spec.width));
    }
    if (!(spec.sigma >= 0.0) || !std::isfinite(spec.sigma)) throw UsageError("phantom sigma must be >= 0");
    const double H = static_cast<double>(spec.height), W = static_cast<double>(spec.width);
    const double side = std::min(H, W);
    Rng geo(derive_seed(seed, std::string_view("geometry")));

    CTImage nd(id, spec.height, spec.width, kAirHu);
    // Body outline filling most of the field of view, as in a clinical scan.
    const Ellipse body{H / 2 + geo.uniform(-0.02, 0.02) * H, W / 2 + geo.uniform(-0.02, 0.02) * W,
                       geo.uniform(0.46, 0.49) * H, geo.uniform(0.47, 0.495) * W, geo.uniform(-0.1, 0.1),
                       kSoftTissueHu};
    paint(nd, body);

    const std::size_t organs = 3 + geo.below(6);  // 3..8
    for (std::size_t i = 0; i < organs; ++i) {
        const Tissue& t = kTissues[geo.below(std::size(kTissues))];
        // centre inside the inner part of the body
        const double rho = 0.6 * std::sqrt(geo.uniform()), phi = geo.uniform(0, 2 * std::numbers::pi);
        Ellipse e{body.cy + rho * body.ry * std::sin(phi), body.cx + rho * body.rx * std::cos(phi),
                  geo.uniform(t.min_radius, t.max_radius) * side, geo.uniform(t.min_radius, t.max_radius) * side,
                  geo.uniform(0, std::numbers::pi), t.hu};
        paint(nd, e);
    }

    CTImage ld = nd;
    if (spec.sigma > 0) {
        Rng noise(derive_seed(seed, std::string_view("noise")));
        const double hu_sigma = spec.sigma * kHuStd;
        for (float& v : ld.hu) {
            v = std::clamp(static_cast<float>(v + hu_sigma * noise.normal()), kHuMin, kHuMax);
        }
    }
    return {std::move(ld), std::move(nd)};
}

// ---------------------------------------------------------------------------

namespace {

template <typename U>
void put_le(std::string& buf, U value) {
    unsigned char b[sizeof(U)];
    std::memcpy(b, &value, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
    buf.append(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U get_le(const char* p) {
    unsigned char b[sizeof(U)];
    std::memcpy(b, p, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
    U v;
    std::memcpy(&v, b, sizeof(U));
    return v;
}

}  // namespace

void write_ctv(const CTImage& image, const std::filesystem::path& path) {
    if (image.hu.size() != image.height * image.width) throw UsageError("image pixel count does not match its dims");
    if (image.height > UINT32_MAX || image.width > UINT32_MAX) throw UsageError("image too large for CTV");
    std::string buf = "CTV1";
    buf.reserve(12 + 4 * image.hu.size());
    put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(image.height));
    put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(image.width));
    for (float v : image.hu) put_le<float>(buf, v);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw FormatError("failed writing " + path.string());
}

CTImage read_ctv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 12) throw FormatError(path.string() + ": truncated CTV header");
    if (buf.compare(0, 4, "CTV1") != 0) throw FormatError(path.string() + ": not a CTV file (bad magic)");
    const std::uint64_t H = get_le<std::uint32_t>(buf.data() + 4), W = get_le<std::uint32_t>(buf.data() + 8);
    if (H == 0 || W == 0) throw FormatError(path.string() + ": zero image dimension");
    const std::uint64_t payload = buf.size() - 12;
    if (H > payload / 4 / W) throw FormatError(path.string() + ": dimensions " + std::to_string(H) + "x" +
                                               std::to_string(W) + " exceed the file (truncated?)");
    if (payload != H * W * 4) {
        throw FormatError(path.string() + ": payload of " + std::to_string(payload) + " bytes, expected " +
                          std::to_string(H * W * 4));
    }
    std::vector<float> hu(H * W);
    for (std::size_t i = 0; i < hu.size(); ++i) hu[i] = get_le<float>(buf.data() + 12 + 4 * i);
    return CTImage(path.stem().string(), H, W, std::move(hu));
}

const ImagePair& PairedDataset::at(const std::string& id) const {
    const auto it = std::lower_bound(ids.begin(), ids.end(), id);
    if (it == ids.end() || *it != id) throw UsageError("no image '" + id + "' in the dataset");
    return pairs[static_cast<std::size_t>(it - ids.begin())];
}

PairedDataset load_dataset(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw FormatError("dataset directory " + dir.string() + " not found");
    std::map<std::string, std::pair<std::filesystem::path, std::filesystem::path>> found;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (!entry.is_regular_file() || entry.path().extension() != ".ctv") continue;
        const std::string stem = entry.path().stem().string();
        if (stem.size() > 3 && stem.ends_with("_ld")) {
            found[stem.substr(0, stem.size() - 3)].first = entry.path();
        } else if (stem.size() > 3 && stem.ends_with("_nd")) {
            found[stem.substr(0, stem.size() - 3)].second = entry.path();
        }
    }
    PairedDataset ds;
    for (const auto& [id, paths] : found) {
        if (paths.first.empty() || paths.second.empty()) {
            throw FormatError("image '" + id + "' in " + dir.string() + " lacks its " +
                              (paths.first.empty() ? "_ld" : "_nd") + ".ctv partner");
        }
        ImagePair pair{read_ctv(paths.first), read_ctv(paths.second)};
        if (pair.ldct.height != pair.ndct.height || pair.ldct.width != pair.ndct.width) {
            throw FormatError("image '" + id + "': LDCT and NDCT dimensions differ");
        }
        pair.ldct.id = pair.ndct.id = id;
        ds.ids.push_back(id);
        ds.pairs.push_back(std::move(pair));
    }
    if (ds.ids.empty()) throw FormatError("no <id>_ld.ctv / <id>_nd.ctv pairs in " + dir.string());
    return ds;
}

void save_pair(const ImagePair& pair, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw FormatError("cannot create " + dir.string() + ": " + ec.message());
    write_ctv(pair.ldct, dir / (pair.ldct.id + "_ld.ctv"));
    write_ctv(pair.ndct, dir / (pair.ndct.id + "_nd.ctv"));
}

void write_text_atomic(const std::filesystem::path& path, const std::string& content) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
        if (ec) throw FormatError("cannot create " + path.parent_path().string() + ": " + ec.message());
    }
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw FormatError("cannot write " + tmp.string());
        out << content;
        if (!out) throw FormatError("failed writing " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw FormatError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------

PriorDistribution fixture_priors(const CTImage& image, const DescriptorSet& descriptors, double scale) {
    static const std::map<std::string, std::pair<float, float>> kBands = {
        {"lungs", {-950, -450}},     {"mediastinum", {-100, 80}}, {"spleen", {40, 60}},
        {"ventricles", {0, 20}},     {"spine", {250, 1200}},      {"liver", {50, 75}},
        {"kidneys", {20, 45}},       {"abdominal aorta", {35, 55}}, {"heart", {25, 50}},
        {"trachea", {-1024, -960}},  {"esophagus", {-60, 40}},    {"stomach", {-120, 20}},
        {"pancreas", {30, 50}},      {"gallbladder", {-10, 25}},  {"bowel", {-80, 40}},
        {"urinary bladder", {-5, 15}}, {"ribs", {300, 1500}},
    };
    if (image.hu.empty()) throw UsageError("fixture priors of an empty image");
    std::vector<double> scores(descriptors.size(), 0.0);
    for (std::size_t n = 0; n < descriptors.size(); ++n) {
        const auto it = kBands.find(descriptors[n]);
        if (it == kBands.end()) continue;
        const auto [lo, hi] = it->second;
        const auto inside = std::count_if(image.hu.begin(), image.hu.end(), [&](float v) { return v >= lo && v <= hi; });
        scores[n] = scale * static_cast<double>(inside) / static_cast<double>(image.hu.size());
    }
    return compute_priors({scores}, descriptors);
}

template Tensor<float> standardize(const CTImage&);
template Tensor<double> standardize(const CTImage&);
template CTImage destandardize(const Tensor<float>&, std::string);
template CTImage destandardize(const Tensor<double>&, std::string);
template Tensor<float> patchify(const Tensor<float>&, const PatchGrid&);
template Tensor<double> patchify(const Tensor<double>&, const PatchGrid&);
template Tensor<float> depatchify(const Tensor<float>&, const PatchGrid&);
template Tensor<double> depatchify(const Tensor<double>&, const PatchGrid&);
template Tensor<float> rotate90(const Tensor<float>&, int);
template Tensor<double> rotate90(const Tensor<double>&, int);
template Tensor<float> rotate_augment(const Tensor<float>&, std::uint64_t, double);
template Tensor<double> rotate_augment(const Tensor<double>&, std::uint64_t, double);

}  // namespace bioatt
