#include "bioatt/priors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "json.hpp"

#include "bioatt/autodiff.hpp"
#include "bioatt/error.hpp"
#include "bioatt/random.hpp"

namespace bioatt {

using nlohmann::json;

DescriptorSet::DescriptorSet(std::vector<std::string> names) : names_(std::move(names)) {
    if (names_.empty()) throw InvariantError("descriptor list is empty");
    std::set<std::string> seen;
    for (const auto& n : names_) {
        if (n.empty()) throw InvariantError("descriptor names must be non-empty");
        if (!seen.insert(n).second) throw InvariantError("duplicate descriptor name '" + n + "'");
    }
}

DescriptorSet DescriptorSet::defaults() {
    // The first eight appear in the attention-map figures; the rest are
    // common thoraco-abdominal CT structures.
    return DescriptorSet({"lungs", "mediastinum", "spleen", "ventricles", "spine", "liver", "kidneys",
                          "abdominal aorta", "heart", "trachea", "esophagus", "stomach", "pancreas",
                          "gallbladder", "bowel", "urinary bladder", "ribs"});
}

std::optional<std::size_t> DescriptorSet::index_of(const std::string& name) const {
    const auto it = std::find(names_.begin(), names_.end(), name);
    if (it == names_.end()) return std::nullopt;
    return static_cast<std::size_t>(it - names_.begin());
}

PriorDistribution::PriorDistribution(std::vector<double> probs) : probs_(std::move(probs)) {
    if (probs_.empty()) throw InvariantError("prior distribution is empty");
    double total = 0;
    for (double p : probs_) {
        if (!std::isfinite(p) || p < 0.0 || p > 1.0) {
            throw InvariantError("prior probability " + std::to_string(p) + " outside [0, 1]");
        }
        total += p;
    }
    if (std::abs(total - 1.0) > kSumTolerance) {
        throw InvariantError("prior probabilities sum to " + std::to_string(total) + ", not 1");
    }
}

std::vector<std::size_t> PriorDistribution::ranking() const {
    std::vector<std::size_t> order(probs_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs_[a] > probs_[b]; });
    return order;
}

PriorDistribution compute_priors(const SimilarityScores& scores, const DescriptorSet& descriptors) {
    if (scores.scores.size() != descriptors.size()) {
        throw UsageError("got " + std::to_string(scores.scores.size()) + " similarity scores for " +
                         std::to_string(descriptors.size()) + " descriptors");
    }
    return PriorDistribution(kernels::softmax<double>(scores.scores));
}

PriorDistribution uniform_priors(std::size_t n) {
    if (n == 0) throw UsageError("uniform_priors needs n >= 1");
    return PriorDistribution(std::vector<double>(n, 1.0 / static_cast<double>(n)));
}

PriorDistribution random_priors(std::size_t n, std::uint64_t seed) {
    if (n == 0) throw UsageError("random_priors needs n >= 1");
    Rng rng(seed);
    std::vector<double> draws(n);
    double total = 0;
    do {
        total = 0;
        for (auto& v : draws) {
            v = rng.uniform();
            total += v;
        }
    } while (total == 0.0);
    for (auto& v : draws) v /= total;
    return PriorDistribution(std::move(draws));
}

namespace {

[[noreturn]] void schema_error(const std::filesystem::path& path, const std::string& what) {
    throw FormatError("prior file " + path.string() + ": " + what);
}

}  // namespace

PriorFile load_prior_file(const std::filesystem::path& path, const PriorLoadOptions& options) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open prior file " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        schema_error(path, std::string("invalid JSON: ") + e.what());
    }
    if (!doc.is_object() || !doc.contains("descriptors") || !doc.contains("priors")) {
        schema_error(path, "expected an object with \"descriptors\" and \"priors\"");
    }
    const json& names = doc["descriptors"];
    if (!names.is_array()) schema_error(path, "\"descriptors\" must be an array of strings");
    std::vector<std::string> descriptor_names;
    for (const auto& n : names) {
        if (!n.is_string()) schema_error(path, "\"descriptors\" must be an array of strings");
        descriptor_names.push_back(n.get<std::string>());
    }
    PriorFile file{DescriptorSet(std::move(descriptor_names)), {}};

    const json& priors = doc["priors"];
    if (!priors.is_object()) schema_error(path, "\"priors\" must be an object keyed by image id");
    for (const auto& [id, vec] : priors.items()) {
        if (!vec.is_array() || vec.size() != file.descriptors.size()) {
            schema_error(path, "prior for '" + id + "' must be an array of " +
                                   std::to_string(file.descriptors.size()) + " numbers");
        }
        std::vector<double> probs;
        double total = 0;
        for (const auto& v : vec) {
            if (!v.is_number()) schema_error(path, "prior for '" + id + "' contains a non-number");
            probs.push_back(v.get<double>());
            total += probs.back();
        }
        if (std::abs(total - 1.0) > options.reject_tolerance && !options.renormalize) {
            throw InvariantError("prior for '" + id + "' sums to " + std::to_string(total) +
                                 "; refusing to renormalize (normalization error)");
        }
        // Sums off by no more than reject_tolerance are float round-off from
        // the writer; pull them back inside the distribution invariant.
        if (total > 0 && std::abs(total - 1.0) > PriorDistribution::kSumTolerance) {
            for (auto& p : probs) p /= total;
        }
        try {
            file.priors.emplace(id, PriorDistribution(std::move(probs)));
        } catch (const InvariantError& e) {
            throw InvariantError("prior for '" + id + "': " + e.what());
        }
    }
    return file;
}

PriorFile load_prior_file(const std::filesystem::path& path, const DescriptorSet& expected,
                          const PriorLoadOptions& options) {
    PriorFile file = load_prior_file(path, options);
    for (const auto& name : file.descriptors.names()) {
        if (!expected.index_of(name)) throw InvariantError("prior file names unknown descriptor '" + name + "'");
    }
    if (!(file.descriptors == expected)) {
        throw InvariantError("prior file descriptor order differs from the configured descriptor set");
    }
    return file;
}

void save_prior_file(const std::filesystem::path& path, const PriorFile& file) {
    json doc;
    doc["descriptors"] = file.descriptors.names();
    json priors = json::object();
    for (const auto& [id, dist] : file.priors) {
        if (dist.size() != file.descriptors.size()) {
            throw UsageError("prior for '" + id + "' does not match the descriptor count");
        }
        priors[id] = dist.probs();
    }
    doc["priors"] = std::move(priors);
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write prior file " + path.string());
    // nlohmann emits doubles with round-trip (17 significant digit) precision.
    out << doc.dump(2) << '\n';
    if (!out) throw FormatError("failed writing prior file " + path.string());
}

}  // namespace bioatt
