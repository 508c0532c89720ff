#pragma once

#include "repflow/activations.hpp"
#include "repflow/numerics.hpp"

#include <nlohmann/json_fwd.hpp>

#include <span>
#include <string>
#include <vector>

namespace repflow {

struct MIEstimate {
    double mi_nats = 0.0;
    double h_a = 0.0;
    double h_b = 0.0;
    std::size_t n = 0;
};

/// Plug-in entropy in nats. Labels may be any integers.
double entropy(std::span<const std::int32_t> labels);

/// Plug-in mutual information over the observed joint cells.
MIEstimate plugin_mi(std::span<const std::int32_t> a, std::span<const std::int32_t> b);

/// Clusters layer `layer` restricted to `rows` and returns the assignment of each row.
std::vector<std::int32_t> discretize(const LayerActivations& acts, std::size_t layer, std::span<const std::size_t> rows,
                                     const KMeansOptions& options);

enum class MiTarget { InputToken, OutputLabel };

std::string_view to_string(MiTarget t);
MiTarget mi_target_from_string(std::string_view s);

struct MiCurveOptions {
    MiTarget target = MiTarget::InputToken;
    /// Keep occurrences whose target token is among the K most frequent types.
    std::size_t top_k = 250;
    /// Output-label curves: keep only positions whose input was replaced by a random token.
    bool random_replaced_only = true;
    /// Upper bound on the sampled occurrences (0 = all).
    std::size_t max_occurrences = 0;
    std::size_t clusters = 1000;
    std::size_t batch_size = 100;
    double epochs = 10.0;
    std::size_t bootstrap = 20;
    std::uint64_t seed = 0;
    /// Layers to evaluate; empty means every stored layer.
    std::vector<std::size_t> layers;
};

struct MiPoint {
    std::size_t layer = 0;
    double mi_nats = 0.0;
    double h_labels = 0.0;
    double h_clusters = 0.0;
    std::size_t n = 0;
    double bootstrap_lo = 0.0;
    double bootstrap_hi = 0.0;
};

/// Rows used by mi_curve: non-frame occurrences whose target token is a
/// frequent type, optionally restricted to random replacements, optionally
/// subsampled with the "sample" substream of `seed`.
std::vector<std::size_t> mi_rows(const LayerActivations& acts, const MiCurveOptions& options);

/// MI between clustered representations and token labels, one point per layer.
/// Every layer clusters the same rows with the "cluster" substream of the seed.
std::vector<MiPoint> mi_curve(const LayerActivations& acts, const MiCurveOptions& options);

/// Same, over caller-chosen rows and labels (`options.target` and the row
/// filter fields are ignored).
std::vector<MiPoint> mi_curve(const LayerActivations& acts, std::span<const std::size_t> rows,
                              std::span<const std::int32_t> labels, const MiCurveOptions& options);

/// Percentile interval of plug-in MI over `reps` resamples of the (a, b) pairs.
std::pair<double, double> bootstrap_interval(std::span<const std::int32_t> a, std::span<const std::int32_t> b,
                                             std::size_t reps, Rng rng, double lo = 0.025, double hi = 0.975);

nlohmann::json to_json(const MiPoint& p);

}  // namespace repflow
