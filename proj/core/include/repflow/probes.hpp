#pragma once

#include "repflow/activations.hpp"
#include "repflow/flow.hpp"
#include "repflow/numerics.hpp"

#include <nlohmann/json_fwd.hpp>

#include <optional>
#include <string>
#include <vector>

namespace repflow {

/// Source-token occurrences of a dump (frame rows removed) with neighbor metadata.
struct OccurrenceSet {
    const LayerActivations* acts = nullptr;
    /// Row of each member in `acts`.
    std::vector<std::size_t> rows;
    std::vector<TokenId> token;
    std::vector<std::uint32_t> sentence;
    /// Index of the token within its source sentence.
    std::vector<std::uint32_t> position;
    /// Previous / next source token; BOS / EOS at sentence edges.
    std::vector<TokenId> left, right;
    /// Optional external label per member.
    std::vector<std::optional<std::string>> annotation;

    std::size_t size() const noexcept { return rows.size(); }
    /// Representations of members `members` (default: all) at `layer`.
    Matrix representations(std::size_t layer, std::span<const std::size_t> members) const;
    Matrix representations(std::size_t layer) const;
};

OccurrenceSet build_occurrence_set(const LayerActivations& acts, const Annotations* annotations = nullptr);

/// Splits a CCG category into the parts looking left (backward, '\') and right
/// (forward, '/'). Outer brackets are peeled and the category is decomposed
/// along its outermost slashes: arguments taken with '\' go to the left part,
/// arguments taken with '/' to the right part. An atomic category has empty parts.
struct CcgParts {
    std::string left;
    std::string right;
};
CcgParts split_ccg(const std::string& tag);

struct ProbeOptions {
    std::size_t k = 5;
    Metric metric = Metric::Cosine;
    /// Subtract the mean representation before measuring distances.
    bool center = true;
};

std::string_view to_string(Metric m);
Metric metric_from_string(std::string_view s);

/// k nearest neighbors of every row among the other rows.
std::vector<std::vector<std::int32_t>> probe_neighbors(const Matrix& reps, const ProbeOptions& options);

/// Mean over rows of mean |position - neighbor position| over the k nearest neighbors.
double position_preservation_score(const Matrix& reps, std::span<const std::uint32_t> positions,
                                   const ProbeOptions& options);

struct PropertyScore {
    double score = 0.0;
    std::size_t n_rows = 0;
    std::size_t n_excluded = 0;
};

/// Fraction of the k nearest neighbors sharing the row's value; rows without a
/// value are dropped from both queries and pool.
PropertyScore property_preservation_score(const Matrix& reps, std::span<const std::optional<std::int64_t>> values,
                                          const ProbeOptions& options);

struct ContrastivePool {
    TokenId main = 0;
    std::vector<TokenId> contrastive;
    /// Members of the OccurrenceSet forming the pool; main-token members first.
    std::vector<std::size_t> members;
    std::size_t n_main = 0;
    /// Requested minus obtained occurrences.
    std::size_t shortfall = 0;
};

struct PoolOptions {
    std::size_t n_main = 200;
    std::size_t n_contrastive_total = 1800;
    std::size_t n_contrastive_types = 10;
    std::uint64_t seed = 0;
};

/// Contrastive types are the nearest non-reserved embedding rows to `word`
/// (cosine, ties to the lower id). Occurrences are sampled without replacement;
/// when the main token falls short, the contrastive budget shrinks in proportion.
ContrastivePool build_contrastive_pool(const MatrixF& embeddings, TokenId word, const OccurrenceSet& occs,
                                       const PoolOptions& options);

/// Mean over main-token rows of the fraction of their k nearest pool members
/// that are main-token rows.
double identity_preservation_score(const Matrix& pool_reps, std::size_t n_main, const ProbeOptions& options);

/// Expected identity score when representations carry no identity information.
inline double identity_chance_rate(std::size_t n_main, std::size_t n_pool) {
    return static_cast<double>(n_main - 1) / static_cast<double>(n_pool - 1);
}

/// Word types for identity probing: `count` types drawn with `seed` among ranks
/// [1, max_rank] having at least `min_occurrences` occurrences in `occs`.
std::vector<TokenId> sample_probe_words(const OccurrenceSet& occs, std::size_t count, std::size_t max_rank,
                                        std::size_t min_occurrences, std::uint64_t seed);

struct ProbeRecord {
    std::string probe;
    std::size_t layer = 0;
    double score = 0.0;
    std::size_t k = 0;
    std::string metric;
    std::size_t n_rows = 0;
    std::optional<TokenId> word_type;
};

nlohmann::json to_json(const ProbeRecord& r);

}  // namespace repflow
