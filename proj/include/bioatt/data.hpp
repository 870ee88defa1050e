#ifndef BIOATT_DATA_HPP
#define BIOATT_DATA_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bioatt/priors.hpp"
#include "bioatt/random.hpp"
#include "bioatt/tensor.hpp"

namespace bioatt {

inline constexpr float kHuMin = -1024.0f;
inline constexpr float kHuMax = 3071.0f;
inline constexpr double kHuMean = -500.0;
inline constexpr double kHuStd = 500.0;

/// Row-major H x W raster in Hounsfield units.
struct CTImage {
    std::string id;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> hu;

    CTImage() = default;
    CTImage(std::string id, std::size_t height, std::size_t width, float fill = kHuMin);
    CTImage(std::string id, std::size_t height, std::size_t width, std::vector<float> hu);

    float& at(std::size_t r, std::size_t c) { return hu[r * width + c]; }
    float at(std::size_t r, std::size_t c) const { return hu[r * width + c]; }

    friend bool operator==(const CTImage&, const CTImage&) = default;
};

/// z = (HU + 500) / 500 as a [1,1,H,W] tensor. Arithmetic is done in double;
/// Tensor<double> keeps the round trip exact to ~1e-12 HU, Tensor<float> to
/// half an ulp of z (see README).
template <typename T = float>
Tensor<T> standardize(const CTImage& image);
/// Inverse of standardize. Accepts any tensor whose last two axes are H, W
/// and whose other axes are 1. No clamping.
template <typename T>
CTImage destandardize(const Tensor<T>& z, std::string id = {});

// ---------------------------------------------------------------------------
// Patch grids

inline constexpr std::size_t kPatchSize = 55;

/// Training grid: stride patch+2 (57 for 55-pixel patches) with the last
/// anchor snapped to the edge; 9 anchors {0,57,...,399,457} for 512.
std::vector<std::size_t> sampling_anchors(std::size_t extent, std::size_t patch = kPatchSize);
/// Reconstruction grid: the fewest evenly spaced anchors whose patches cover
/// every pixel (10 anchors for 512, 3 for 128).
std::vector<std::size_t> covering_anchors(std::size_t extent, std::size_t patch = kPatchSize);

struct PatchGrid {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t patch = kPatchSize;
    std::vector<std::size_t> rows;
    std::vector<std::size_t> cols;

    std::size_t count() const { return rows.size() * cols.size(); }
    /// Every pixel lies in at least one patch.
    bool covers() const;

    static PatchGrid sampling(std::size_t height, std::size_t width, std::size_t patch = kPatchSize);
    static PatchGrid covering(std::size_t height, std::size_t width, std::size_t patch = kPatchSize);
};

/// Cuts [1,1,H,W] (or [H,W]) into [P,1,p,p], row-major over (row anchor,
/// column anchor).
template <typename T>
Tensor<T> patchify(const Tensor<T>& image, const PatchGrid& grid);
/// Stitches [P,1,p,p] back to [1,1,H,W], averaging overlaps in double.
/// Throws InvariantError if the grid leaves a pixel uncovered.
template <typename T>
Tensor<T> depatchify(const Tensor<T>& patches, const PatchGrid& grid);

// ---------------------------------------------------------------------------
// Augmentation

/// Quarter turns to apply: 0 with probability 1 - probability, otherwise a
/// uniform choice among 0..3.
int draw_rotation(Rng& rng, double probability = 0.5);
/// Rotates the last two (square) axes counter-clockwise by quarter_turns * 90 degrees.
template <typename T>
Tensor<T> rotate90(const Tensor<T>& t, int quarter_turns);
/// draw_rotation + rotate90 with a generator seeded from `seed`.
template <typename T>
Tensor<T> rotate_augment(const Tensor<T>& patch, std::uint64_t seed, double probability = 0.5);

// ---------------------------------------------------------------------------
// Splitting

struct SplitSpec {
    double train = 0.64;
    double val = 0.16;
    double test = 0.20;
    std::uint64_t seed = 0;
};

struct DatasetSplit {
    std::vector<std::string> train;
    std::vector<std::string> val;
    std::vector<std::string> test;
};

/// Image-level split: train = floor(train*M), val = floor(val*M), test = the
/// rest, after a seeded shuffle of the sorted ids.
DatasetSplit split_dataset(std::vector<std::string> ids, const SplitSpec& spec = {});

// ---------------------------------------------------------------------------
// Phantoms

struct PhantomSpec {
    std::size_t height = 512;
    std::size_t width = 512;
    /// Noise standard deviation in standardized units.
    double sigma = 0.06;
};

struct ImagePair {
    CTImage ldct;
    CTImage ndct;
};

/// Air background, an elliptical soft-tissue body and 3-8 anti-aliased organ
/// ellipses; LDCT adds Gaussian noise and clamps to the HU range.
ImagePair gen_phantom(const PhantomSpec& spec, std::uint64_t seed, const std::string& id = "phantom");

// ---------------------------------------------------------------------------
// I/O

/// "CTV1" | u32 H | u32 W | H*W f32, little-endian, row-major, HU.
void write_ctv(const CTImage& image, const std::filesystem::path& path);
/// The image id is the file stem.
CTImage read_ctv(const std::filesystem::path& path);

struct PairedDataset {
    std::vector<std::string> ids;  // sorted
    std::vector<ImagePair> pairs;  // same order

    const ImagePair& at(const std::string& id) const;
    std::size_t size() const { return ids.size(); }
};

/// Reads every <id>_ld.ctv / <id>_nd.ctv pair in a directory.
PairedDataset load_dataset(const std::filesystem::path& dir);
void save_pair(const ImagePair& pair, const std::filesystem::path& dir);

/// Writes via a temporary file and rename, so readers never see a partial file.
void write_text_atomic(const std::filesystem::path& path, const std::string& content);

// ---------------------------------------------------------------------------
// Stub priors (no vision-language model needed)

/// Softmax over HU-band occupancy: each known descriptor has a typical HU
/// band and scores `scale` times the fraction of pixels inside it. Unknown
/// descriptors score 0.
PriorDistribution fixture_priors(const CTImage& image, const DescriptorSet& descriptors, double scale = 8.0);

}  // namespace bioatt

#endif  // BIOATT_DATA_HPP
