#include "repflow/mi.hpp"

#include "repflow/parallel.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace repflow {

namespace {

struct PairHash {
    std::size_t operator()(std::uint64_t k) const noexcept { return static_cast<std::size_t>(Rng::mix(k)); }
};

std::uint64_t pack(std::int32_t a, std::int32_t b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
}

double entropy_of_counts(const std::unordered_map<std::int32_t, std::size_t>& counts, double n) {
    double h = 0.0;
    for (const auto& [_, c] : counts) {
        const double p = static_cast<double>(c) / n;
        h -= p * std::log(p);
    }
    return h;
}

}  // namespace

double entropy(std::span<const std::int32_t> labels) {
    if (labels.empty()) throw InvalidArgument("entropy: empty label sequence");
    std::unordered_map<std::int32_t, std::size_t> counts;
    for (auto l : labels) ++counts[l];
    return std::max(0.0, entropy_of_counts(counts, static_cast<double>(labels.size())));
}

MIEstimate plugin_mi(std::span<const std::int32_t> a, std::span<const std::int32_t> b) {
    if (a.size() != b.size())
        throw InvalidArgument("plugin_mi: sequences differ in length (" + std::to_string(a.size()) + " vs " +
                              std::to_string(b.size()) + ")");
    if (a.empty()) throw InvalidArgument("plugin_mi: empty label sequences");
    std::unordered_map<std::int32_t, std::size_t> ca, cb;
    std::unordered_map<std::uint64_t, std::size_t, PairHash> joint;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ++ca[a[i]];
        ++cb[b[i]];
        ++joint[pack(a[i], b[i])];
    }
    const double n = static_cast<double>(a.size());
    MIEstimate e;
    e.n = a.size();
    e.h_a = std::max(0.0, entropy_of_counts(ca, n));
    e.h_b = std::max(0.0, entropy_of_counts(cb, n));
    // Terms are summed in sorted order so I(a,b) and I(b,a) agree bitwise.
    std::vector<double> terms;
    terms.reserve(joint.size());
    for (const auto& [k, c] : joint) {
        const auto x = static_cast<std::int32_t>(k >> 32), y = static_cast<std::int32_t>(k & 0xFFFFFFFFu);
        const double pxy = static_cast<double>(c) / n;
        terms.push_back(pxy * std::log(static_cast<double>(c) * n / (static_cast<double>(ca[x]) * static_cast<double>(cb[y]))));
    }
    std::sort(terms.begin(), terms.end());
    double mi = 0.0;
    for (double t : terms) mi += t;
    e.mi_nats = std::clamp(mi, 0.0, std::min(e.h_a, e.h_b));
    return e;
}

std::vector<std::int32_t> discretize(const LayerActivations& acts, std::size_t layer, std::span<const std::size_t> rows,
                                     const KMeansOptions& options) {
    if (rows.size() < options.clusters)
        throw InvalidArgument("discretize: " + std::to_string(rows.size()) + " occurrences cannot fill " +
                              std::to_string(options.clusters) + " clusters");
    return minibatch_kmeans(acts.view(layer, rows), options).assignments;
}

std::string_view to_string(MiTarget t) { return t == MiTarget::InputToken ? "input_token" : "output_label"; }

MiTarget mi_target_from_string(std::string_view s) {
    if (s == "input_token") return MiTarget::InputToken;
    if (s == "output_label") return MiTarget::OutputLabel;
    throw InvalidArgument("unknown MI target '" + std::string(s) + "' (expected input_token or output_label)");
}

std::vector<std::size_t> mi_rows(const LayerActivations& acts, const MiCurveOptions& o) {
    const auto frequent = [&](std::int32_t t) {
        return t >= Vocab::kNumReserved && (o.top_k == 0 || static_cast<std::size_t>(t) < Vocab::kNumReserved + o.top_k);
    };
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < acts.size(); ++i) {
        const auto& oc = acts.occurrences[i];
        if (is_frame(oc)) continue;
        if (o.target == MiTarget::InputToken) {
            if (!frequent(oc.input_token)) continue;
        } else {
            if (oc.label_token < 0 || !frequent(oc.label_token)) continue;
            if (o.random_replaced_only &&
                (oc.input_token == oc.label_token || Vocab::is_reserved(oc.input_token)))
                continue;
        }
        rows.push_back(i);
    }
    if (o.max_occurrences && rows.size() > o.max_occurrences) {
        Rng rng = Rng(o.seed).substream("sample");
        rng.shuffle(rows.begin(), rows.end());
        rows.resize(o.max_occurrences);
        std::sort(rows.begin(), rows.end());
    }
    return rows;
}

std::pair<double, double> bootstrap_interval(std::span<const std::int32_t> a, std::span<const std::int32_t> b,
                                             std::size_t reps, Rng rng, double lo, double hi) {
    if (reps == 0) return {0.0, 0.0};
    std::vector<double> vals;
    std::vector<std::int32_t> ra(a.size()), rb(b.size());
    for (std::size_t r = 0; r < reps; ++r) {
        for (std::size_t i = 0; i < a.size(); ++i) {
            const auto j = rng.uniform_int(a.size());
            ra[i] = a[j];
            rb[i] = b[j];
        }
        vals.push_back(plugin_mi(ra, rb).mi_nats);
    }
    std::sort(vals.begin(), vals.end());
    auto pick = [&](double q) {
        const double pos = q * static_cast<double>(vals.size() - 1);
        const auto i = static_cast<std::size_t>(std::floor(pos));
        const auto j = std::min(i + 1, vals.size() - 1);
        return vals[i] + (pos - static_cast<double>(i)) * (vals[j] - vals[i]);
    };
    return {pick(lo), pick(hi)};
}

std::vector<MiPoint> mi_curve(const LayerActivations& acts, const MiCurveOptions& o) {
    const auto rows = mi_rows(acts, o);
    std::vector<std::int32_t> labels;
    labels.reserve(rows.size());
    for (auto r : rows)
        labels.push_back(o.target == MiTarget::InputToken ? acts.occurrences[r].input_token : acts.occurrences[r].label_token);
    return mi_curve(acts, rows, labels, o);
}

std::vector<MiPoint> mi_curve(const LayerActivations& acts, std::span<const std::size_t> rows,
                              std::span<const std::int32_t> labels, const MiCurveOptions& o) {
    if (rows.empty()) throw InvalidArgument("mi_curve: the occurrence filter left no rows");
    if (rows.size() != labels.size()) throw InvalidArgument("mi_curve: rows and labels differ in length");
    std::vector<std::size_t> layers = o.layers;
    if (layers.empty())
        for (std::size_t l = 0; l < acts.n_layers(); ++l) layers.push_back(l);
    for (auto l : layers)
        if (l >= acts.n_layers()) throw InvalidArgument("mi_curve: layer " + std::to_string(l) + " is not in the dump");

    const double h_labels = entropy(labels);
    std::vector<MiPoint> out(layers.size());
    parallel_for(layers.size(), [&](std::size_t i) {
        KMeansOptions km;
        km.clusters = o.clusters;
        km.batch_size = o.batch_size;
        km.epochs = o.epochs;
        km.seed = Rng(o.seed).substream("cluster").key();
        const auto clusters = discretize(acts, layers[i], rows, km);
        const auto est = plugin_mi(clusters, labels);
        const auto [lo, hi] = bootstrap_interval(clusters, labels, o.bootstrap, Rng(o.seed).substream("bootstrap").substream(layers[i]));
        out[i] = MiPoint{layers[i], est.mi_nats, h_labels, est.h_a, rows.size(), lo, hi};
    });
    return out;
}

nlohmann::json to_json(const MiPoint& p) {
    return {{"layer", p.layer},         {"mi_nats", p.mi_nats}, {"h_labels", p.h_labels},
            {"h_clusters", p.h_clusters}, {"n", p.n},             {"bootstrap_lo", p.bootstrap_lo},
            {"bootstrap_hi", p.bootstrap_hi}};
}

}  // namespace repflow
