#ifndef BIOATT_PRIORS_HPP
#define BIOATT_PRIORS_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace bioatt {

/// Ordered anatomical descriptor names. Position i is the attention channel
/// that descriptor i weights.
class DescriptorSet {
public:
    explicit DescriptorSet(std::vector<std::string> names);

    /// The 17-entry default list.
    static DescriptorSet defaults();

    std::size_t size() const noexcept { return names_.size(); }
    const std::vector<std::string>& names() const noexcept { return names_; }
    const std::string& operator[](std::size_t i) const { return names_.at(i); }
    std::optional<std::size_t> index_of(const std::string& name) const;

    friend bool operator==(const DescriptorSet&, const DescriptorSet&) = default;

private:
    std::vector<std::string> names_;
};

/// Raw image-text similarity scores, one per descriptor.
struct SimilarityScores {
    std::vector<double> scores;
};

/// Probability vector over descriptors: entries in [0, 1], sum within 1e-6 of 1.
class PriorDistribution {
public:
    static constexpr double kSumTolerance = 1e-6;

    explicit PriorDistribution(std::vector<double> probs);

    std::size_t size() const noexcept { return probs_.size(); }
    const std::vector<double>& probs() const noexcept { return probs_; }
    double operator[](std::size_t i) const { return probs_.at(i); }

    /// Descriptor indices sorted by descending probability (ties by index).
    std::vector<std::size_t> ranking() const;

    friend bool operator==(const PriorDistribution&, const PriorDistribution&) = default;

private:
    std::vector<double> probs_;
};

/// Softmax of the similarity scores.
PriorDistribution compute_priors(const SimilarityScores& scores, const DescriptorSet& descriptors);
PriorDistribution uniform_priors(std::size_t n);
/// i.i.d. uniform(0,1) entries divided by their sum.
PriorDistribution random_priors(std::size_t n, std::uint64_t seed);

/// Contents of a prior JSON file:
///   {"descriptors": [N names], "priors": {"<image-id>": [N floats], ...}}
struct PriorFile {
    DescriptorSet descriptors;
    std::map<std::string, PriorDistribution> priors;
};

struct PriorLoadOptions {
    /// Vectors whose sum is off by more than this are rejected...
    double reject_tolerance = 1e-4;
    /// ...unless explicitly allowed to be renormalized.
    bool renormalize = false;
};

/// Loads and validates a prior file. The descriptor list must equal
/// `expected` exactly, in order.
PriorFile load_prior_file(const std::filesystem::path& path, const DescriptorSet& expected,
                          const PriorLoadOptions& options = {});
/// Parses without checking the descriptor list against a configured set.
PriorFile load_prior_file(const std::filesystem::path& path, const PriorLoadOptions& options = {});
void save_prior_file(const std::filesystem::path& path, const PriorFile& file);

}  // namespace bioatt

#endif  // BIOATT_PRIORS_HPP
