#include "repflow/probes.hpp"

#include "oracles.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <cmath>
#include <set>

using namespace repflow;
using repflow::testing::gaussian;

namespace {

/// Dump over the given sentences with random layer values; BOS/EOS framed.
LayerActivations framed(const std::vector<std::vector<TokenId>>& sentences, std::size_t d, Rng& rng) {
    LayerActivations a;
    for (std::size_t s = 0; s < sentences.size(); ++s) {
        std::uint16_t p = 0;
        a.occurrences.push_back({static_cast<std::uint32_t>(s), p++, Vocab::kBos, -1});
        for (auto t : sentences[s]) a.occurrences.push_back({static_cast<std::uint32_t>(s), p++, t, t});
        a.occurrences.push_back({static_cast<std::uint32_t>(s), p++, Vocab::kEos, -1});
    }
    a.layers.push_back(gaussian(static_cast<Eigen::Index>(a.size()), static_cast<Eigen::Index>(d), rng).cast<float>());
    return a;
}

ProbeOptions euclid(std::size_t k) {
    ProbeOptions o;
    o.k = k;
    o.metric = Metric::Euclidean;
    o.center = false;
    return o;
}

}  // namespace

TEST_CASE("CCG splitter") {
    auto check = [](const std::string& tag, const std::string& left, const std::string& right) {
        CAPTURE(tag);
        const auto p = split_ccg(tag);
        CHECK(p.left == left);
        CHECK(p.right == right);
    };
    check("N", "", "");
    check("NP/N", "", "N");
    check("S\\NP", "NP", "");
    check("(S\\NP)/NP", "NP", "NP");
    check("((S\\NP)/NP)", "NP", "NP");
    check("(N\\N)/(S/NP)", "N", "S/NP");
    check("((S\\NP)\\(S\\NP))/NP", "NP\\(S\\NP)", "NP");
    check("(S/NP)/NP", "", "NP/NP");
    check("(S\\NP)\\NP", "NP\\NP", "");
    check("S[dcl]\\NP", "NP", "");
}

TEST_CASE("metric names") {
    CHECK(to_string(Metric::Cosine) == "cosine");
    CHECK(metric_from_string("euclidean") == Metric::Euclidean);
    CHECK_THROWS_AS(metric_from_string("manhattan"), InvalidArgument);
}

TEST_CASE("occurrence set metadata") {
    Rng rng(1);
    const auto acts = framed({{7, 8, 9}, {10}}, 3, rng);
    Annotations ann;
    ann.set(0, 2, "V");
    const auto s = build_occurrence_set(acts, &ann);
    REQUIRE(s.size() == 4);
    CHECK(s.rows == std::vector<std::size_t>{1, 2, 3, 6});
    CHECK(s.position == std::vector<std::uint32_t>{0, 1, 2, 0});
    CHECK(s.left == std::vector<TokenId>{Vocab::kBos, 7, 8, Vocab::kBos});
    CHECK(s.right == std::vector<TokenId>{8, 9, Vocab::kEos, Vocab::kEos});
    CHECK_FALSE(s.annotation[0].has_value());
    CHECK(s.annotation[2] == std::optional<std::string>("V"));
    CHECK(s.representations(0).rows() == 4);
    const std::size_t two[] = {3, 0};
    const Matrix r = s.representations(0, two);
    CHECK(r.row(0) == acts.view(0).row(6));
    CHECK(build_occurrence_set(acts).annotation.empty());
}

TEST_CASE("position probe on a 1-d position line") {
    Matrix reps(100, 1);
    std::vector<std::uint32_t> pos(100);
    for (int i = 0; i < 100; ++i) {
        reps(i, 0) = i + 1;
        pos[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(i + 1);
    }
    // Interior points: neighbors at offsets 1,1,2,2,3 (ties to the lower index).
    const auto nn = probe_neighbors(reps, euclid(5));
    double sum = 0;
    for (auto j : nn[50]) sum += std::abs(static_cast<double>(pos[50]) - pos[static_cast<std::size_t>(j)]);
    CHECK(sum / 5 == doctest::Approx(1.8));

    // Exhaustive oracle over all rows.
    double oracle = 0;
    for (int i = 0; i < 100; ++i) {
        std::vector<std::pair<double, int>> d;
        for (int j = 0; j < 100; ++j)
            if (j != i) d.emplace_back(std::abs(i - j), j);
        std::sort(d.begin(), d.end());
        double s = 0;
        for (int t = 0; t < 5; ++t) s += d[static_cast<std::size_t>(t)].first;
        oracle += s / 5;
    }
    oracle /= 100;
    CHECK(position_preservation_score(reps, pos, euclid(5)) == doctest::Approx(oracle).epsilon(1e-12));
    CHECK(oracle > 1.8);
    CHECK_THROWS_AS(position_preservation_score(reps, std::vector<std::uint32_t>(3), euclid(5)), InvalidArgument);
    CHECK_THROWS_AS(position_preservation_score(reps.topRows(5), std::vector<std::uint32_t>(5), euclid(5)), InvalidArgument);
}

TEST_CASE("property probe on separated clusters scores 1") {
    Rng rng(2);
    Matrix reps(60, 3);
    std::vector<std::optional<std::int64_t>> values(60);
    for (int i = 0; i < 60; ++i) {
        const int c = i % 3;
        reps.row(i) = Eigen::RowVector3d::Unit(c) * 100.0 + gaussian(1, 3, rng).row(0) * 0.01;
        values[static_cast<std::size_t>(i)] = c;
    }
    for (Metric m : {Metric::Cosine, Metric::Euclidean}) {
        ProbeOptions o;
        o.metric = m;
        CHECK(property_preservation_score(reps, values, o).score == 1.0);
    }
    values[0].reset();
    values[1].reset();
    const auto s = property_preservation_score(reps, values, ProbeOptions{});
    CHECK(s.score == 1.0);
    CHECK(s.n_rows == 58);
    CHECK(s.n_excluded == 2);
    std::vector<std::optional<std::int64_t>> none(60);
    CHECK_THROWS_AS(property_preservation_score(reps, none, ProbeOptions{}), InvalidArgument);
}

TEST_CASE("property probe under random labels hits 1/m") {
    Rng rng(3);
    const Matrix reps = gaussian(4000, 8, rng);
    for (std::int64_t m : {2, 5, 10}) {
        std::vector<std::optional<std::int64_t>> values(4000);
        for (auto& v : values) v = static_cast<std::int64_t>(rng.uniform_int(static_cast<std::uint64_t>(m)));
        const double s = property_preservation_score(reps, values, ProbeOptions{}).score;
        // 4000 rows x 5 neighbours; generous 4 sigma with neighbour overlap.
        const double sigma = std::sqrt((1.0 / m) * (1 - 1.0 / m) / 4000.0 / 5.0) * 2;
        CHECK(std::abs(s - 1.0 / static_cast<double>(m)) < 4 * sigma);
    }
}

TEST_CASE("probe scores are invariant to rigid motions") {
    Rng rng(4);
    const Matrix reps = gaussian(200, 5, rng);
    Eigen::HouseholderQR<Matrix> qr(gaussian(5, 5, rng));
    const Matrix Q = qr.householderQ() * Matrix::Identity(5, 5);
    Matrix moved = reps * Q;
    moved.rowwise() += gaussian(1, 5, rng).row(0);
    std::vector<std::uint32_t> pos(200);
    std::vector<std::optional<std::int64_t>> values(200);
    for (std::size_t i = 0; i < 200; ++i) {
        pos[i] = static_cast<std::uint32_t>(rng.uniform_int(30));
        values[i] = static_cast<std::int64_t>(rng.uniform_int(4));
    }
    for (Metric m : {Metric::Cosine, Metric::Euclidean}) {
        ProbeOptions o;
        o.metric = m;
        CHECK(probe_neighbors(reps, o) == probe_neighbors(moved, o));
        CHECK(position_preservation_score(reps, pos, o) == doctest::Approx(position_preservation_score(moved, pos, o)));
        CHECK(property_preservation_score(reps, values, o).score ==
              doctest::Approx(property_preservation_score(moved, values, o).score));
    }
    for (const auto& row : probe_neighbors(reps, ProbeOptions{}))
        CHECK(std::set<std::int32_t>(row.begin(), row.end()).size() == row.size());
    const auto nn = probe_neighbors(reps, ProbeOptions{});
    for (std::size_t i = 0; i < nn.size(); ++i)
        for (auto j : nn[i]) CHECK(static_cast<std::size_t>(j) != i);
}

TEST_CASE("contrastive pools") {
    Rng rng(5);
    const std::size_t V = 30;
    MatrixF emb = gaussian(V, 6, rng).cast<float>();
    emb.row(17) = emb.row(8);  // exact duplicate of the main token

    std::vector<std::vector<TokenId>> sentences;
    for (int s = 0; s < 400; ++s) {
        std::vector<TokenId> sent;
        for (int t = 0; t < 6; ++t) sent.push_back(static_cast<TokenId>(Vocab::kNumReserved + rng.uniform_int(V - 5)));
        sentences.push_back(sent);
    }
    const auto acts = framed(sentences, 4, rng);
    const auto occs = build_occurrence_set(acts);

    PoolOptions o;
    o.n_main = 20;
    o.n_contrastive_total = 180;
    o.n_contrastive_types = 10;
    o.seed = 1;
    const auto pool = build_contrastive_pool(emb, 8, occs, o);
    CHECK(pool.main == 8);
    REQUIRE(pool.contrastive.size() == 10);
    CHECK(pool.contrastive[0] == 17);
    CHECK(std::find(pool.contrastive.begin(), pool.contrastive.end(), 8) == pool.contrastive.end());
    for (auto t : pool.contrastive) CHECK_FALSE(Vocab::is_reserved(t));
    CHECK(pool.n_main == 20);
    CHECK(pool.members.size() == 200);
    CHECK(pool.shortfall == 0);
    for (std::size_t i = 0; i < pool.members.size(); ++i) {
        const auto tok = occs.token[pool.members[i]];
        if (i < pool.n_main) CHECK(tok == 8);
        else CHECK(tok != 8);
    }
    CHECK(std::set<std::size_t>(pool.members.begin(), pool.members.end()).size() == 200);

    const auto again = build_contrastive_pool(emb, 8, occs, o);
    CHECK(again.members == pool.members);
    CHECK(again.contrastive == pool.contrastive);

    // Shortfall shrinks the contrastive budget in proportion.
    o.n_main = 1000;
    o.n_contrastive_total = 9000;
    const auto small = build_contrastive_pool(emb, 8, occs, o);
    CHECK(small.n_main < 1000);
    CHECK(small.shortfall > 0);

    CHECK_THROWS_AS(build_contrastive_pool(emb, Vocab::kMask, occs, o), InvalidArgument);
    CHECK_THROWS_AS(build_contrastive_pool(emb, 30, occs, o), InvalidArgument);
}

TEST_CASE("identity probe: constructed clusters and permutation chance") {
    Rng rng(6);
    const std::size_t n_main = 100, n_pool = 1000;
    Matrix reps = gaussian(n_pool, 8, rng);
    reps.topRows(n_main) = gaussian(n_main, 8, rng) * 0.01;
    reps.topRows(n_main).rowwise() += Eigen::RowVectorXd::Constant(8, 50.0);
    ProbeOptions o;
    o.k = 10;
    CHECK(identity_preservation_score(reps, n_main, o) == 1.0);

    CHECK(identity_chance_rate(n_main, n_pool) == doctest::Approx(99.0 / 999.0));
    double total = 0;
    for (int t = 0; t < 100; ++t) total += identity_preservation_score(gaussian(n_pool, 8, rng), n_main, o);
    CHECK(std::abs(total / 100 - identity_chance_rate(n_main, n_pool)) < 0.02);

    CHECK_THROWS_AS(identity_preservation_score(reps, 1, o), InvalidArgument);
    CHECK_THROWS_AS(identity_preservation_score(reps, n_pool, o), InvalidArgument);
}

TEST_CASE("probe word sampling") {
    Rng rng(7);
    std::vector<std::vector<TokenId>> sentences;
    for (int s = 0; s < 200; ++s) sentences.push_back({5, 6, 7, static_cast<TokenId>(8 + s % 50)});
    const auto acts = framed(sentences, 2, rng);
    const auto occs = build_occurrence_set(acts);
    const auto words = sample_probe_words(occs, 3, 10, 100, 9);
    CHECK(words == std::vector<TokenId>{5, 6, 7});
    CHECK(sample_probe_words(occs, 2, 10, 4, 9).size() == 2);
    CHECK(sample_probe_words(occs, 2, 10, 4, 9) == sample_probe_words(occs, 2, 10, 4, 9));
    for (auto w : sample_probe_words(occs, 100, 6, 1, 9)) CHECK(Vocab::rank(w) <= 6);
}

TEST_CASE("probe records") {
    ProbeRecord r{"identity", 2, 0.5, 10, "cosine", 200, 42};
    const auto j = to_json(r);
    CHECK(j["word_type"] == 42);
    CHECK(j["k"] == 10);
    r.word_type.reset();
    CHECK_FALSE(to_json(r).contains("word_type"));
}
