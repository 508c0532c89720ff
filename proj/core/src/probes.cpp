#include "repflow/probes.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <map>
#include <numeric>

namespace repflow {

Matrix OccurrenceSet::representations(std::size_t layer, std::span<const std::size_t> members) const {
    std::vector<std::size_t> r;
    r.reserve(members.size());
    for (auto m : members) r.push_back(rows.at(m));
    return acts->view(layer, r);
}

Matrix OccurrenceSet::representations(std::size_t layer) const { return acts->view(layer, rows); }

OccurrenceSet build_occurrence_set(const LayerActivations& acts, const Annotations* annotations) {
    OccurrenceSet s;
    s.acts = &acts;
    const auto idx = content_index(acts);
    for (std::size_t i = 0; i < acts.size(); ++i) {
        if (idx[i] < 0) continue;
        const auto& o = acts.occurrences[i];
        s.rows.push_back(i);
        s.token.push_back(o.input_token);
        s.sentence.push_back(o.sentence_id);
        s.position.push_back(static_cast<std::uint32_t>(idx[i]));
        if (annotations) {
            const auto* l = annotations->find(o.sentence_id, static_cast<std::uint32_t>(idx[i]));
            s.annotation.push_back(l ? std::optional<std::string>(*l) : std::nullopt);
        }
    }
    const std::size_t n = s.rows.size();
    s.left.assign(n, Vocab::kBos);
    s.right.assign(n, Vocab::kEos);
    for (std::size_t m = 0; m < n; ++m) {
        if (m > 0 && s.sentence[m - 1] == s.sentence[m]) s.left[m] = s.token[m - 1];
        if (m + 1 < n && s.sentence[m + 1] == s.sentence[m]) s.right[m] = s.token[m + 1];
    }
    return s;
}

namespace {

std::string strip_brackets(std::string t) {
    while (t.size() >= 2 && t.front() == '(' && t.back() == ')') {
        int depth = 0;
        bool wraps = true;
        for (std::size_t i = 0; i < t.size(); ++i) {
            if (t[i] == '(') ++depth;
            if (t[i] == ')') --depth;
            if (depth == 0 && i + 1 < t.size()) {
                wraps = false;
                break;
            }
        }
        if (!wraps) break;
        t = t.substr(1, t.size() - 2);
    }
    return t;
}

}  // namespace

CcgParts split_ccg(const std::string& tag) {
    // Arguments per side, outermost first.
    std::vector<std::string> left, right;
    std::string cur = strip_brackets(tag);
    for (;;) {
        int depth = 0;
        std::ptrdiff_t slash = -1;
        for (std::size_t i = 0; i < cur.size(); ++i) {
            const char c = cur[i];
            if (c == '(') ++depth;
            else if (c == ')') --depth;
            else if (depth == 0 && (c == '/' || c == '\\')) slash = static_cast<std::ptrdiff_t>(i);
        }
        if (slash < 0) break;
        const auto pos = static_cast<std::size_t>(slash);
        (cur[pos] == '/' ? right : left).push_back(strip_brackets(cur.substr(pos + 1)));
        cur = strip_brackets(cur.substr(0, pos));
    }
    auto join = [](const std::vector<std::string>& args, char slash) {
        std::string out;
        for (auto it = args.rbegin(); it != args.rend(); ++it) {
            const bool complex = args.size() > 1 && it->find_first_of("/\\") != std::string::npos;
            if (!out.empty()) out += slash;
            out += complex ? "(" + *it + ")" : *it;
        }
        return out;
    };
    return {join(left, '\\'), join(right, '/')};
}

std::string_view to_string(Metric m) { return m == Metric::Cosine ? "cosine" : "euclidean"; }

Metric metric_from_string(std::string_view s) {
    if (s == "cosine") return Metric::Cosine;
    if (s == "euclidean") return Metric::Euclidean;
    throw InvalidArgument("unknown metric '" + std::string(s) + "' (expected cosine or euclidean)");
}

std::vector<std::vector<std::int32_t>> probe_neighbors(const Matrix& reps, const ProbeOptions& o) {
    if (static_cast<std::size_t>(reps.rows()) <= o.k)
        throw InvalidArgument("probe: k = " + std::to_string(o.k) + " needs more than " + std::to_string(reps.rows()) +
                              " rows");
    if (o.center) {
        const Matrix c = reps.rowwise() - reps.colwise().mean();
        return knn_self(c, o.k, o.metric);
    }
    return knn_self(reps, o.k, o.metric);
}

double position_preservation_score(const Matrix& reps, std::span<const std::uint32_t> positions, const ProbeOptions& o) {
    if (positions.size() != static_cast<std::size_t>(reps.rows()))
        throw InvalidArgument("position probe: metadata length differs from row count");
    const auto nn = probe_neighbors(reps, o);
    double total = 0.0;
    for (std::size_t i = 0; i < nn.size(); ++i) {
        double s = 0.0;
        for (auto j : nn[i])
            s += std::abs(static_cast<double>(positions[i]) - static_cast<double>(positions[static_cast<std::size_t>(j)]));
        total += s / static_cast<double>(nn[i].size());
    }
    return total / static_cast<double>(nn.size());
}

PropertyScore property_preservation_score(const Matrix& reps, std::span<const std::optional<std::int64_t>> values,
                                          const ProbeOptions& o) {
    if (values.size() != static_cast<std::size_t>(reps.rows()))
        throw InvalidArgument("property probe: metadata length differs from row count");
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < values.size(); ++i)
        if (values[i]) keep.push_back(i);
    if (keep.empty()) throw InvalidArgument("property probe: the property is undefined for every row");
    Matrix sub(static_cast<Eigen::Index>(keep.size()), reps.cols());
    for (std::size_t i = 0; i < keep.size(); ++i) sub.row(static_cast<Eigen::Index>(i)) = reps.row(static_cast<Eigen::Index>(keep[i]));
    const auto nn = probe_neighbors(sub, o);
    double total = 0.0;
    for (std::size_t i = 0; i < nn.size(); ++i) {
        std::size_t same = 0;
        for (auto j : nn[i]) same += *values[keep[static_cast<std::size_t>(j)]] == *values[keep[i]];
        total += static_cast<double>(same) / static_cast<double>(nn[i].size());
    }
    return {total / static_cast<double>(nn.size()), keep.size(), values.size() - keep.size()};
}

ContrastivePool build_contrastive_pool(const MatrixF& embeddings, TokenId word, const OccurrenceSet& occs,
                                       const PoolOptions& o) {
    const auto V = static_cast<TokenId>(embeddings.rows());
    if (word < Vocab::kNumReserved || word >= V)
        throw InvalidArgument("contrastive pool: token id " + std::to_string(word) + " is not a vocabulary word");
    const Eigen::VectorXd w = embeddings.row(word).cast<double>().transpose();
    const double wn = w.norm();
    std::vector<std::pair<double, TokenId>> cand;
    for (TokenId t = Vocab::kNumReserved; t < V; ++t) {
        if (t == word) continue;
        const Eigen::VectorXd e = embeddings.row(t).cast<double>().transpose();
        const double denom = wn * e.norm();
        const double cos_dist = denom > 0 ? 1.0 - w.dot(e) / denom : 1.0;
        cand.emplace_back(cos_dist, t);
    }
    const auto n_types = std::min(o.n_contrastive_types, cand.size());
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(n_types), cand.end());

    std::map<TokenId, std::vector<std::size_t>> by_token;
    for (std::size_t m = 0; m < occs.size(); ++m) by_token[occs.token[m]].push_back(m);
    const Rng root = Rng(o.seed).substream("pool").substream(static_cast<std::uint64_t>(word));
    auto sample = [&](TokenId t, std::size_t want) {
        std::vector<std::size_t> ids = by_token.count(t) ? by_token[t] : std::vector<std::size_t>{};
        Rng r = root.substream(static_cast<std::uint64_t>(t));
        r.shuffle(ids.begin(), ids.end());
        if (ids.size() > want) ids.resize(want);
        std::sort(ids.begin(), ids.end());
        return ids;
    };

    ContrastivePool pool;
    pool.main = word;
    pool.members = sample(word, o.n_main);
    pool.n_main = pool.members.size();
    const std::size_t budget = o.n_main ? o.n_contrastive_total * pool.n_main / o.n_main : 0;
    for (std::size_t i = 0; i < n_types; ++i) {
        const TokenId t = cand[i].second;
        pool.contrastive.push_back(t);
        const std::size_t quota = budget / n_types + (i < budget % n_types ? 1 : 0);
        const auto got = sample(t, quota);
        pool.members.insert(pool.members.end(), got.begin(), got.end());
    }
    const std::size_t wanted = o.n_main + o.n_contrastive_total;
    pool.shortfall = wanted > pool.members.size() ? wanted - pool.members.size() : 0;
    return pool;
}

double identity_preservation_score(const Matrix& pool_reps, std::size_t n_main, const ProbeOptions& o) {
    if (n_main < 2 || n_main >= static_cast<std::size_t>(pool_reps.rows()))
        throw InvalidArgument("identity probe: degenerate pool (" + std::to_string(n_main) + " main rows of " +
                              std::to_string(pool_reps.rows()) + ")");
    const auto nn = probe_neighbors(pool_reps, o);
    double total = 0.0;
    for (std::size_t i = 0; i < n_main; ++i) {
        std::size_t hits = 0;
        for (auto j : nn[i]) hits += static_cast<std::size_t>(j) < n_main;
        total += static_cast<double>(hits) / static_cast<double>(nn[i].size());
    }
    return total / static_cast<double>(n_main);
}

std::vector<TokenId> sample_probe_words(const OccurrenceSet& occs, std::size_t count, std::size_t max_rank,
                                        std::size_t min_occurrences, std::uint64_t seed) {
    std::map<TokenId, std::size_t> freq;
    for (auto t : occs.token) ++freq[t];
    std::vector<TokenId> cand;
    for (const auto& [t, c] : freq)
        if (!Vocab::is_reserved(t) && Vocab::rank(t) <= max_rank && c >= min_occurrences) cand.push_back(t);
    Rng rng = Rng(seed).substream("probe_words");
    rng.shuffle(cand.begin(), cand.end());
    if (cand.size() > count) cand.resize(count);
    std::sort(cand.begin(), cand.end());
    return cand;
}

nlohmann::json to_json(const ProbeRecord& r) {
    nlohmann::json j = {{"probe", r.probe}, {"layer", r.layer},   {"score", r.score},
                        {"k", r.k},         {"metric", r.metric}, {"n_rows", r.n_rows}};
    if (r.word_type) j["word_type"] = *r.word_type;
    return j;
}

}  // namespace repflow
