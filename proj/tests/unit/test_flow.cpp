#include "repflow/activations.hpp"
#include "repflow/cca.hpp"
#include "repflow/flow.hpp"
#include "repflow/train.hpp"

#include "fixtures.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

using namespace repflow;
using repflow::testing::gaussian;

namespace {

/// Sentences of one content token each (BOS t EOS), with layer l+1 = f(layer l).
LayerActivations stacked(std::size_t n, std::size_t d, std::size_t layers, Rng& rng,
                         const std::function<Matrix(const Matrix&, std::size_t)>& next) {
    LayerActivations a;
    Matrix cur = gaussian(static_cast<Eigen::Index>(3 * n), static_cast<Eigen::Index>(d), rng);
    a.layers.push_back(cur.cast<float>());
    for (std::size_t l = 1; l < layers; ++l) {
        cur = next(cur, l);
        a.layers.push_back(cur.cast<float>());
    }
    for (std::size_t s = 0; s < n; ++s) {
        const auto tok = static_cast<TokenId>(Vocab::kNumReserved + s % 400);
        a.occurrences.push_back({static_cast<std::uint32_t>(s), 0, Vocab::kBos, -1});
        a.occurrences.push_back({static_cast<std::uint32_t>(s), 1, tok, tok});
        a.occurrences.push_back({static_cast<std::uint32_t>(s), 2, Vocab::kEos, -1});
    }
    return a;
}

Model trained_tiny(Task task, std::size_t steps) {
    auto cfg = fixtures::tiny_config(task, 13);
    Model m(cfg);
    TrainingSet data;
    data.task = task;
    data.source = fixtures::random_sentences(200, 2, 6, 13, 3);
    if (task == Task::MT) data.target = fixtures::random_sentences(200, 1, 5, 15, 4);
    TrainOptions o;
    o.steps = steps;
    o.batch_tokens = 200;
    o.log_every = 0;
    o.adam.warmup = 20;
    train(m, data, o, Rng(1));
    return m;
}

}  // namespace

TEST_CASE("annotations load and match") {
    const auto p = std::filesystem::temp_directory_path() / "repflow_flow_ann.tsv";
    std::ofstream(p) << "# comment\n0\t0\tNN\n\n0\t1\tVB\n1\t0\tNN\n";
    const auto ann = Annotations::load(p);
    CHECK(ann.size() == 3);
    REQUIRE(ann.find(0, 1));
    CHECK(*ann.find(0, 1) == "VB");
    CHECK(ann.find(2, 0) == nullptr);
    const auto g = GroupSpec::annotation(ann, "NN");
    CHECK(g.matches(9, 1, 0));
    CHECK_FALSE(g.matches(9, 0, 1));
    CHECK(g.describe() == "label=NN");

    std::ofstream(p) << "0\t0\n";
    CHECK_THROWS_AS(Annotations::load(p), CorruptFile);
    std::ofstream(p) << "0\t-1\tX\n";
    CHECK_THROWS_AS(Annotations::load(p), CorruptFile);
}

TEST_CASE("group specs") {
    const auto buckets = default_frequency_buckets();
    REQUIRE(buckets.size() == 4);
    const TokenId rank1 = Vocab::kNumReserved, rank100 = Vocab::kNumReserved + 99;
    CHECK(buckets[0].matches(rank1, 0, 0));
    CHECK_FALSE(buckets[0].matches(rank100, 0, 0));
    CHECK(buckets[1].matches(rank100, 0, 0));
    CHECK(buckets[3].matches(Vocab::kNumReserved + 100000, 0, 0));
    CHECK_FALSE(buckets[0].matches(Vocab::kUnk, 0, 0));
    CHECK(buckets[3].describe() == "rank[5000,inf)");
    CHECK(GroupSpec::all().matches(Vocab::kUnk, 0, 0));
    const auto ts = GroupSpec::token_set({7, 9});
    CHECK(ts.matches(9, 0, 0));
    CHECK_FALSE(ts.matches(8, 0, 0));
    CHECK(ts.describe() == "tokens{7,9}");
}

TEST_CASE("select_rows skips framing and keys annotations by content index") {
    LayerActivations a;
    a.occurrences = {{0, 0, Vocab::kBos, -1}, {0, 1, 7, -1}, {0, 2, 8, -1}, {0, 3, Vocab::kEos, -1}};
    a.layers.assign(1, MatrixF::Zero(4, 2));
    CHECK(select_rows(a, GroupSpec::all()) == std::vector<std::size_t>{1, 2});
    Annotations ann;
    ann.set(0, 1, "X");
    CHECK(select_rows(a, GroupSpec::annotation(ann, "X")) == std::vector<std::size_t>{2});
}

TEST_CASE("layer change on constructed layers") {
    Rng rng(1);
    Eigen::HouseholderQR<Matrix> qr(gaussian(8, 8, rng));
    const Matrix Q = qr.householderQ() * Matrix::Identity(8, 8);
    const auto acts = stacked(1500, 8, 4, rng, [&](const Matrix& x, std::size_t l) -> Matrix {
        if (l == 1) return x;
        if (l == 2) return x * Q;
        Rng fresh(99);
        return gaussian(x.rows(), x.cols(), fresh);
    });
    const auto p = layer_change_profile(acts, GroupSpec::all());
    REQUIRE(p.points.size() == 3);
    CHECK(p.kind == "change");
    CHECK(p.points[0].score < 1e-6);
    CHECK(p.points[1].score < 1e-4);
    CHECK(p.points[2].score > 0.5);
    CHECK(p.points[0].n == 1500);
    for (const auto& pt : p.points) CHECK((pt.score >= 0.0 && pt.score <= 1.0));

    const auto j = to_json(p, "ab");
    REQUIRE(j.size() == 3);
    CHECK(j[0]["direction"] == "ab");
    CHECK(j[2]["score"] == p.points[2].score_ab);
    for (const char* key : {"kind", "layer", "score", "group", "n", "model_a", "model_b", "direction"})
        CHECK(j[0].contains(key));
}

TEST_CASE("independent adjacent layers are far apart") {
    Rng rng(2);
    const auto acts = stacked(20000, 32, 2, rng, [&](const Matrix& x, std::size_t) -> Matrix {
        return gaussian(x.rows(), x.cols(), rng);
    });
    CHECK(layer_change_profile(acts, GroupSpec::all()).points[0].score > 0.9);
}

TEST_CASE("layer change errors") {
    Rng rng(3);
    const auto acts = stacked(100, 4, 2, rng, [](const Matrix& x, std::size_t) { return x; });
    CHECK_THROWS_AS(layer_change_profile(acts, GroupSpec::token_set({1000})), InvalidArgument);
    LayerActivations one = acts;
    one.layers.resize(1);
    CHECK_THROWS_AS(layer_change_profile(one, GroupSpec::all()), InvalidArgument);
}

TEST_CASE("model distance profile") {
    Rng rng(4);
    const auto a = stacked(800, 6, 3, rng, [&](const Matrix& x, std::size_t) -> Matrix {
        return (x * gaussian(6, 6, rng)).array().tanh().matrix();
    });
    const auto self = model_distance_profile(a, a, GroupSpec::all());
    REQUIRE(self.points.size() == 3);
    CHECK(self.kind == "distance");
    for (const auto& pt : self.points) CHECK(pt.score < 1e-6);

    auto b = a;
    for (auto& L : b.layers) L = gaussian(L.rows(), L.cols(), rng).cast<float>();
    const auto d = model_distance_profile(a, b, GroupSpec::all(), 500, 7);
    for (const auto& pt : d.points) {
        CHECK(pt.score > 0.0);
        CHECK(pt.n == 500);
    }
    CHECK(model_distance_profile(a, b, GroupSpec::all(), 500, 7).points[1].score == d.points[1].score);

    // A dump without BOS/EOS framing aligns on content index.
    LayerActivations bare;
    std::vector<Eigen::Index> keep;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (!is_frame(a.occurrences[i])) {
            auto o = a.occurrences[i];
            o.position = 0;
            bare.occurrences.push_back(o);
            keep.push_back(static_cast<Eigen::Index>(i));
        }
    for (const auto& L : a.layers) bare.layers.push_back(L(keep, Eigen::all));
    for (const auto& pt : model_distance_profile(a, bare, GroupSpec::all()).points) CHECK(pt.score < 1e-6);

    auto wrong = a;
    wrong.occurrences[1].input_token += 1;
    CHECK_THROWS_WITH_AS(model_distance_profile(a, wrong, GroupSpec::all()), doctest::Contains("mismatch"), InvalidArgument);
    wrong = a;
    wrong.occurrences.resize(30);
    for (auto& L : wrong.layers) L.conservativeResize(30, L.cols());
    CHECK_THROWS_AS(model_distance_profile(a, wrong, GroupSpec::all()), InvalidArgument);
}

TEST_CASE("influence of a token nobody attends to is zero") {
    // In the causal LM the last token is invisible to every other position.
    const auto m = trained_tiny(Task::LM, 30);
    auto sents = fixtures::random_sentences(120, 2, 6, 12, 8);
    for (auto& s : sents) s.back() = 12;
    for (auto& s : sents)
        for (std::size_t i = 0; i + 1 < s.size(); ++i)
            if (s[i] == 12) s[i] = 11;
    InfluenceOptions o;
    o.max_sentences = 120;
    const auto p = token_influence_profile(m, sents, GroupSpec::token_set({12}), o);
    REQUIRE(p.points.size() == 2);
    for (const auto& pt : p.points) CHECK(pt.score < 1e-6);
    CHECK(p.group == "tokens{12} sentences=120");
}

TEST_CASE("two-token sentences: the other token loses its only context") {
    for (Task task : {Task::LM, Task::MLM, Task::MT}) {
        CAPTURE(to_string(task));
        const auto m = trained_tiny(task, 60);
        auto sents = fixtures::random_sentences(300, 2, 2, 13, 9);
        InfluenceOptions o;
        o.max_sentences = 300;
        o.seed = 3;
        // Ablate the first token so that the causal LM is affected too.
        std::vector<std::pair<std::size_t, std::size_t>> picks;
        for (std::size_t s = 0; s < sents.size(); ++s) picks.emplace_back(s, 0);
        for (std::size_t l = 1; l <= 2; ++l) {
            const auto [xn, xa] = influence_views(m, sents, picks, l, o);
            CHECK(xn.rows() == 300);
            CHECK(pwcca_distance(xn, xa) > 0.0);
            CHECK(pwcca_distance(xn, xn) < 1e-6);
        }
        const auto p = token_influence_profile(m, sents, GroupSpec::all(), o);
        for (const auto& pt : p.points) CHECK(pt.score > 0.0);
        CHECK(token_influence_profile(m, sents, GroupSpec::all(), o).points[1].score == p.points[1].score);
        o.at_top_layer = true;
        CHECK(token_influence_profile(m, sents, GroupSpec::all(), o).kind == "influence_top");
    }
}

TEST_CASE("influence views match extracted activations") {
    const auto m = trained_tiny(Task::MLM, 10);
    const auto sents = fixtures::random_sentences(40, 3, 5, 13, 10);
    std::vector<std::pair<std::size_t, std::size_t>> picks;
    for (std::size_t s = 0; s < sents.size(); ++s) picks.emplace_back(s, 1);
    const auto [xn, xa] = influence_views(m, sents, picks, 2, {});
    const auto acts = extract_activations(m, sents);
    const auto idx = content_index(acts);
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < acts.size(); ++i)
        if (idx[i] >= 0 && idx[i] != 1) rows.push_back(i);
    CHECK((xn - acts.view(2, rows)).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("influence errors") {
    const auto m = trained_tiny(Task::MLM, 1);
    const std::vector<Encoded> single{{5}, {6}};
    CHECK_THROWS_AS(token_influence_profile(m, single, GroupSpec::all()), InvalidArgument);
    const std::vector<Encoded> pair{{5, 6}};
    CHECK_THROWS_AS(token_influence_profile(m, pair, GroupSpec::token_set({9})), InvalidArgument);
}
