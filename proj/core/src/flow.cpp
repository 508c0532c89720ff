#include "repflow/flow.hpp"

#include "repflow/parallel.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace repflow {

Annotations Annotations::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open annotation file " + path.string());
    Annotations a;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto t1 = line.find('\t');
        const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
        if (t2 == std::string::npos)
            throw CorruptFile(path.string() + ":" + std::to_string(lineno) + ": expected three tab-separated fields");
        auto index = [&](std::size_t from, std::size_t to) {
            std::uint32_t v = 0;
            const auto [end, ec] = std::from_chars(line.data() + from, line.data() + to, v);
            if (ec != std::errc() || end != line.data() + to || from == to)
                throw CorruptFile(path.string() + ":" + std::to_string(lineno) + ": indices must be non-negative integers");
            return v;
        };
        const auto s = index(0, t1);
        const auto t = index(t1 + 1, t2);
        a.set(s, t, line.substr(t2 + 1));
    }
    return a;
}

void Annotations::set(std::uint32_t sentence, std::uint32_t token, std::string label) {
    labels_[{sentence, token}] = std::move(label);
}

const std::string* Annotations::find(std::uint32_t sentence, std::uint32_t token) const {
    auto it = labels_.find({sentence, token});
    return it == labels_.end() ? nullptr : &it->second;
}

GroupSpec GroupSpec::frequency(std::size_t lo, std::size_t hi) {
    GroupSpec g;
    g.kind = Kind::FrequencyBucket;
    g.rank_lo = lo;
    g.rank_hi = hi;
    return g;
}

GroupSpec GroupSpec::token_set(std::set<TokenId> tokens) {
    GroupSpec g;
    g.kind = Kind::TokenSet;
    g.tokens = std::move(tokens);
    return g;
}

GroupSpec GroupSpec::annotation(const Annotations& ann, std::string label) {
    GroupSpec g;
    g.kind = Kind::Annotation;
    g.annotations = &ann;
    g.label = std::move(label);
    return g;
}

bool GroupSpec::matches(TokenId token, std::uint32_t sentence, std::uint32_t token_index) const {
    if (Vocab::is_reserved(token) && kind != Kind::TokenSet && kind != Kind::Annotation) return kind == Kind::All;
    switch (kind) {
    case Kind::All:
        return true;
    case Kind::FrequencyBucket: {
        const auto r = Vocab::rank(token);
        return r >= rank_lo && (rank_hi == 0 || r < rank_hi);
    }
    case Kind::TokenSet:
        return tokens.count(token) > 0;
    case Kind::Annotation: {
        const auto* l = annotations ? annotations->find(sentence, token_index) : nullptr;
        return l && *l == label;
    }
    }
    return false;
}

std::string GroupSpec::describe() const {
    switch (kind) {
    case Kind::All:
        return "all";
    case Kind::FrequencyBucket:
        return "rank[" + std::to_string(rank_lo) + "," + (rank_hi ? std::to_string(rank_hi) : std::string("inf")) + ")";
    case Kind::TokenSet: {
        std::string s = "tokens{";
        bool first = true;
        for (auto t : tokens) {
            s += (first ? "" : ",") + std::to_string(t);
            first = false;
        }
        return s + "}";
    }
    case Kind::Annotation:
        return "label=" + label;
    }
    return "";
}

std::vector<GroupSpec> default_frequency_buckets() {
    return {GroupSpec::frequency(1, 100), GroupSpec::frequency(100, 1000), GroupSpec::frequency(1000, 5000),
            GroupSpec::frequency(5000, 0)};
}

std::vector<std::size_t> select_rows(const LayerActivations& acts, const GroupSpec& group) {
    const auto idx = content_index(acts);
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < acts.size(); ++i) {
        if (idx[i] < 0) continue;
        const auto& o = acts.occurrences[i];
        if (group.matches(o.input_token, o.sentence_id, static_cast<std::uint32_t>(idx[i]))) rows.push_back(i);
    }
    return rows;
}

Profile layer_change_profile(const LayerActivations& acts, const GroupSpec& group) {
    const auto rows = select_rows(acts, group);
    if (rows.empty()) throw InvalidArgument("layer_change_profile: group " + group.describe() + " selects no occurrences");
    if (acts.n_layers() < 2) throw InvalidArgument("layer_change_profile: dump stores a single layer");
    Profile p;
    p.kind = "change";
    p.group = group.describe();
    p.points.resize(acts.n_layers() - 1);
    parallel_for(p.points.size(), [&](std::size_t l) {
        const auto r = pwcca(acts.view(l, rows), acts.view(l + 1, rows));
        p.points[l] = {l, r.distance, r.distance_xy, r.distance_yx, rows.size()};
    });
    return p;
}

Profile model_distance_profile(const LayerActivations& a, const LayerActivations& b, const GroupSpec& group,
                               std::size_t max_rows, std::uint64_t seed) {
    const auto pairs = align_occurrences(a, b);
    const auto ka = content_index(a);
    const auto kb = content_index(b);
    const auto count = [](const std::vector<std::int32_t>& k) {
        return static_cast<std::size_t>(std::count_if(k.begin(), k.end(), [](std::int32_t v) { return v >= 0; }));
    };
    if (pairs.size() != count(ka) || pairs.size() != count(kb))
        throw InvalidArgument("model_distance_profile: occurrence mismatch between dumps (" + std::to_string(count(ka)) +
                              " vs " + std::to_string(count(kb)) + " source tokens, " + std::to_string(pairs.size()) +
                              " aligned)");
    std::vector<std::size_t> ra, rb;
    for (const auto& [i, j] : pairs) {
        const auto& oa = a.occurrences[i];
        if (oa.input_token != b.occurrences[j].input_token)
            throw InvalidArgument("model_distance_profile: occurrence mismatch at sentence " +
                                  std::to_string(oa.sentence_id) + " (different tokens)");
        if (!group.matches(oa.input_token, oa.sentence_id, static_cast<std::uint32_t>(ka[i]))) continue;
        ra.push_back(i);
        rb.push_back(j);
    }
    if (ra.empty()) throw InvalidArgument("model_distance_profile: group " + group.describe() + " selects no occurrences");
    if (max_rows && ra.size() > max_rows) {
        std::vector<std::size_t> order(ra.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng = Rng(seed).substream("sample");
        rng.shuffle(order.begin(), order.end());
        order.resize(max_rows);
        std::sort(order.begin(), order.end());
        std::vector<std::size_t> na, nb;
        for (auto k : order) {
            na.push_back(ra[k]);
            nb.push_back(rb[k]);
        }
        ra.swap(na);
        rb.swap(nb);
    }
    Profile p;
    p.kind = "distance";
    p.group = group.describe();
    p.points.resize(std::min(a.n_layers(), b.n_layers()));
    parallel_for(p.points.size(), [&](std::size_t l) {
        const auto r = pwcca(a.view(l, ra), b.view(l, rb));
        p.points[l] = {l, r.distance, r.distance_xy, r.distance_yx, ra.size()};
    });
    return p;
}

namespace {

std::size_t frame_offset(Task t) { return t == Task::MT ? 0 : 1; }

std::vector<TokenId> encoder_row(Task t, const Encoded& s) {
    std::vector<TokenId> row;
    if (t != Task::MT) row.push_back(Vocab::kBos);
    row.insert(row.end(), s.begin(), s.end());
    if (t == Task::MLM) row.push_back(Vocab::kEos);
    return row;
}

TaskBatch encoder_batch(Task task, const std::vector<std::vector<TokenId>>& rows) {
    TaskBatch b;
    b.task = task;
    b.rows = rows.size();
    for (const auto& r : rows) b.cols = std::max(b.cols, r.size());
    b.input.assign(b.rows * b.cols, Vocab::kPad);
    for (std::size_t r = 0; r < rows.size(); ++r)
        std::copy(rows[r].begin(), rows[r].end(), b.input.begin() + static_cast<std::ptrdiff_t>(r * b.cols));
    const std::size_t lc = task == Task::MT ? 1 : b.cols;
    if (task == Task::MT) {
        b.dec_cols = 1;
        b.decoder_input.assign(b.rows, Vocab::kBos);
    }
    b.labels.assign(b.rows * lc, -1);
    b.predict_mask.assign(b.rows * lc, 0);
    return b;
}

}  // namespace

std::pair<Matrix, Matrix> influence_views(const Model& model, std::span<const Encoded> sentences,
                                          std::span<const std::pair<std::size_t, std::size_t>> picks, std::size_t layer,
                                          const InfluenceOptions& o) {
    const auto task = model.config().task;
    const auto off = frame_offset(task);
    const std::size_t compare = o.at_top_layer ? model.config().n_layers : layer;
    // Chunks share the ablated position so one AblationSpec covers the batch.
    std::vector<std::vector<std::size_t>> chunks;
    {
        std::vector<std::size_t> order(picks.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return picks[x].second < picks[y].second; });
        const std::size_t per = std::max<std::size_t>(1, o.batch_sentences);
        for (std::size_t i = 0; i < order.size();) {
            std::vector<std::size_t> ch{order[i]};
            std::size_t j = i + 1;
            while (j < order.size() && picks[order[j]].second == picks[order[i]].second && ch.size() < per)
                ch.push_back(order[j++]);
            chunks.push_back(std::move(ch));
            i = j;
        }
    }
    std::vector<std::pair<MatrixF, MatrixF>> parts(chunks.size());
    parallel_for(chunks.size(), [&](std::size_t c) {
        std::vector<std::vector<TokenId>> rows;
        for (auto k : chunks[c]) rows.push_back(encoder_row(task, sentences[picks[k].first]));
        const auto batch = encoder_batch(task, rows);
        const std::size_t pos = picks[chunks[c].front()].second + off;
        ForwardOptions fo;
        fo.skip_logits = true;
        const auto normal = model.forward(batch, fo);
        fo.ablation = AblationSpec{layer, pos};
        const auto ablated = model.forward(batch, fo);
        std::vector<Eigen::Index> keep;
        for (std::size_t r = 0; r < rows.size(); ++r)
            for (std::size_t t = 0; t < rows[r].size(); ++t) {
                const auto tok = rows[r][t];
                if (t == pos || tok == Vocab::kBos || tok == Vocab::kEos) continue;
                keep.push_back(static_cast<Eigen::Index>(normal.segments[r].offset + t));
            }
        MatrixF xn(static_cast<Eigen::Index>(keep.size()), normal.encoder_layers[compare].cols());
        MatrixF xa(xn.rows(), xn.cols());
        for (std::size_t i = 0; i < keep.size(); ++i) {
            xn.row(static_cast<Eigen::Index>(i)) = normal.encoder_layers[compare].row(keep[i]);
            xa.row(static_cast<Eigen::Index>(i)) = ablated.encoder_layers[compare].row(keep[i]);
        }
        parts[c] = {std::move(xn), std::move(xa)};
    });
    Eigen::Index total = 0;
    for (const auto& p : parts) total += p.first.rows();
    const auto d = static_cast<Eigen::Index>(model.config().d_model);
    Matrix xn(total, d), xa(total, d);
    Eigen::Index off_rows = 0;
    for (const auto& p : parts) {
        xn.middleRows(off_rows, p.first.rows()) = p.first.cast<double>();
        xa.middleRows(off_rows, p.second.rows()) = p.second.cast<double>();
        off_rows += p.first.rows();
    }
    return {std::move(xn), std::move(xa)};
}

Profile token_influence_profile(const Model& model, std::span<const Encoded> sentences, const GroupSpec& group,
                                const InfluenceOptions& o) {
    std::vector<std::size_t> order(sentences.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = Rng(o.seed).substream("sample");
    rng.shuffle(order.begin(), order.end());
    std::vector<std::pair<std::size_t, std::size_t>> picks;
    bool any_long = false;
    for (auto s : order) {
        if (picks.size() >= o.max_sentences) break;
        if (sentences[s].size() < 2) continue;
        any_long = true;
        std::vector<std::size_t> cand;
        for (std::size_t t = 0; t < sentences[s].size(); ++t)
            if (group.matches(sentences[s][t], static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(t))) cand.push_back(t);
        if (cand.empty()) continue;
        picks.emplace_back(s, cand[rng.uniform_int(cand.size())]);
    }
    if (!any_long) throw InvalidArgument("token_influence_profile: every selected sentence has a single token");
    if (picks.empty()) throw InvalidArgument("token_influence_profile: group " + group.describe() + " matches no token");
    std::sort(picks.begin(), picks.end());

    Profile p;
    p.kind = o.at_top_layer ? "influence_top" : "influence";
    p.group = group.describe() + " sentences=" + std::to_string(picks.size());
    for (std::size_t l = 1; l <= model.config().n_layers; ++l) {
        const auto [xn, xa] = influence_views(model, sentences, picks, l, o);
        const auto r = pwcca(xn, xa);
        p.points.push_back({l, r.distance, r.distance_xy, r.distance_yx, static_cast<std::size_t>(xn.rows())});
    }
    return p;
}

nlohmann::json to_json(const Profile& p, const std::string& direction) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& pt : p.points) {
        const double score = direction == "ab" ? pt.score_ab : direction == "ba" ? pt.score_ba : pt.score;
        out.push_back({{"kind", p.kind},
                       {"layer", pt.layer},
                       {"score", score},
                       {"group", p.group},
                       {"n", pt.n},
                       {"model_a", p.model_a},
                       {"model_b", p.model_b},
                       {"direction", direction}});
    }
    return out;
}

}  // namespace repflow
