#include "repflow/corpus.hpp"
#include "repflow/synthetic.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>

using namespace repflow;
namespace fs = std::filesystem;

namespace {

fs::path write_temp(const std::string& name, const std::string& content) {
    const auto dir = fs::temp_directory_path() / "repflow_corpus_test";
    fs::create_directories(dir);
    const auto p = dir / name;
    std::ofstream(p, std::ios::binary) << content;
    return p;
}

Vocab vocab_of(const std::vector<Sentence>& s, std::size_t max_size = 100, std::size_t min_freq = 1) {
    return Vocab::build(s, max_size, min_freq);
}

}  // namespace

TEST_CASE("load_corpus splits lines and drops blanks") {
    auto c = load_corpus(write_temp("a.txt", "a b\nc\n"));
    REQUIRE(c.size() == 2);
    CHECK(c.sentences[0] == Sentence{"a", "b"});
    CHECK(c.sentences[1] == Sentence{"c"});

    c = load_corpus(write_temp("b.txt", "x y\n\n  \nz\r\n"));
    REQUIRE(c.size() == 2);
    CHECK(c.sentences[1] == Sentence{"z"});
    CHECK_FALSE(c.is_parallel());
}

TEST_CASE("load_corpus errors") {
    CHECK_THROWS_AS(load_corpus("/nonexistent/file.txt"), Error);
    CHECK_THROWS_AS(load_corpus(write_temp("bad.txt", "ok\n\xff\xfe\n")), Error);
    CHECK_THROWS_WITH_AS(load_corpus(write_temp("trunc.txt", "caf\xc3")), doctest::Contains("invalid UTF-8"), Error);
    CHECK_THROWS_AS(load_corpus(write_temp("s3.txt", "a\nb\nc\n"), write_temp("t2.txt", "x\ny\n")), Error);
}

TEST_CASE("parallel corpus pairs lines") {
    auto c = load_corpus(write_temp("s.txt", "a b\nc\n"), write_temp("t.txt", "x\ny z\n"));
    REQUIRE(c.is_parallel());
    CHECK(c.targets[1] == Sentence{"y", "z"});
    CHECK(load_corpus(write_temp("u.txt", "caf\xc3\xa9 \xe2\x82\xac\n")).sentences[0][0] == "caf\xc3\xa9");
}

TEST_CASE("build_vocab ranks by frequency then lexicographically") {
    const std::vector<Sentence> aab{{"a", "a", "b"}};
    auto v = vocab_of(aab);
    REQUIRE(v.size() == 7);
    CHECK(v.token(5) == "a");
    CHECK(v.freq(5) == 2);
    CHECK(v.token(6) == "b");
    CHECK(v.freq(6) == 1);

    v = vocab_of(aab, Vocab::kNumReserved + 1);
    CHECK(v.size() == 6);
    CHECK(v.token(5) == "a");

    const std::vector<Sentence> tie{{"b", "a"}};
    v = vocab_of(tie, Vocab::kNumReserved + 1);
    CHECK(v.token(5) == "a");

    v = vocab_of({{"a", "a", "b"}}, 100, 2);
    CHECK(v.size() == 6);

    CHECK_THROWS_AS(Vocab::build(std::vector<Sentence>{}, 10, 1), InvalidArgument);
    CHECK_THROWS_AS(Vocab::build(aab, Vocab::kNumReserved, 1), InvalidArgument);
}

TEST_CASE("reserved ids are fixed") {
    Vocab v = vocab_of({{"x"}});
    CHECK(v.id("<pad>") == 0);
    CHECK(v.id("<unk>") == 1);
    CHECK(v.id("<s>") == 2);
    CHECK(v.id("</s>") == 3);
    CHECK(v.id("<mask>") == 4);
    const auto j = v.to_json();
    CHECK(j["reserved"]["mask"] == 4);
    CHECK(Vocab::from_json(j) == v);
}

TEST_CASE("encode and decode") {
    Vocab v = vocab_of({{"a"}});
    const Sentence s{"a", "zzz"};
    CHECK(v.encode(s) == Encoded{5, Vocab::kUnk});
    CHECK(v.encode(Sentence{}).empty());
    const Sentence in{"a", "a"};
    CHECK(v.decode(v.encode(in)) == in);
}

TEST_CASE("vocab file round trip and validation") {
    Vocab v = vocab_of({{"the", "cat", "the"}});
    const auto p = fs::temp_directory_path() / "repflow_corpus_test" / "vocab.json";
    fs::create_directories(p.parent_path());
    v.save(p);
    CHECK(Vocab::load(p) == v);
    auto j = v.to_json();
    j["tokens"][5] = j["tokens"][6];
    CHECK_THROWS_AS(Vocab::from_json(j), CorruptFile);
}

TEST_CASE("LM batch framing") {
    const std::vector<Encoded> one{{5, 6}};
    auto b = make_lm_batch(one, 0);
    CHECK(b.input == std::vector<TokenId>{Vocab::kBos, 5, 6});
    CHECK(b.labels == std::vector<TokenId>{5, 6, Vocab::kEos});
    CHECK(b.num_predicted() == 3);

    const std::vector<Encoded> single{{5}};
    b = make_lm_batch(single, 0);
    CHECK(b.input == std::vector<TokenId>{Vocab::kBos, 5});
    CHECK(b.labels == std::vector<TokenId>{5, Vocab::kEos});

    const std::vector<Encoded> two{{5, 6}, {7}};
    b = make_lm_batch(two, 0);
    REQUIRE(b.cols == 3);
    CHECK(b.input_at(1, 2) == Vocab::kPad);
    CHECK_FALSE(b.predicted(1, 2));
    CHECK(b.label_at(1, 2) == -1);
    CHECK(b.row_length(1) == 2);
    for (std::size_t r = 0; r < b.rows; ++r)
        for (std::size_t t = 0; t + 1 < b.row_length(r); ++t) CHECK(b.label_at(r, t) == b.input_at(r, t + 1));
}

TEST_CASE("MT batch framing") {
    const std::vector<EncodedPair> p{{{5}, {7, 8}}};
    auto b = make_mt_batch(p, 0);
    CHECK(b.input == std::vector<TokenId>{5});
    CHECK(b.decoder_input == std::vector<TokenId>{Vocab::kBos, 7, 8});
    CHECK(b.labels == std::vector<TokenId>{7, 8, Vocab::kEos});

    const std::vector<EncodedPair> empty_target{{{5, 6}, {}}};
    b = make_mt_batch(empty_target, 0);
    CHECK(b.decoder_input == std::vector<TokenId>{Vocab::kBos});
    CHECK(b.labels == std::vector<TokenId>{Vocab::kEos});

    const std::vector<EncodedPair> two{{{5, 6}, {7}}, {{5}, {7, 8, 9}}};
    b = make_mt_batch(two, 0);
    CHECK(b.input_at(1, 1) == Vocab::kPad);
    CHECK(b.decoder_row_length(0) == 2);
    CHECK_FALSE(b.predicted(0, 2));
}

TEST_CASE("MLM with zero selection leaves input unchanged") {
    const std::vector<Encoded> s{{5, 6, 7}};
    Rng rng(1);
    MlmRates r;
    r.select_rate = 0.0;
    const auto b = make_mlm_batch(s, rng, 20, r);
    CHECK(b.input == std::vector<TokenId>{Vocab::kBos, 5, 6, 7, Vocab::kEos});
    CHECK(b.num_predicted() == 0);
}

TEST_CASE("MLM corruption rates over 1e5 positions") {
    std::vector<Encoded> s(2000, Encoded(60));
    for (auto& row : s)
        for (std::size_t i = 0; i < row.size(); ++i) row[i] = static_cast<TokenId>(5 + i % 40);
    Rng rng(7);
    const auto b = make_mlm_batch(s, rng, 45);
    std::size_t positions = 0, selected = 0, masked = 0, random = 0, same = 0;
    for (std::size_t r = 0; r < b.rows; ++r)
        for (std::size_t t = 1; t + 1 < b.row_length(r); ++t) {
            ++positions;
            if (!b.predicted(r, t)) {
                CHECK(b.label_at(r, t) == -1);
                continue;
            }
            ++selected;
            CHECK(b.label_at(r, t) == s[r][t - 1]);
            const auto in = b.input_at(r, t);
            if (in == Vocab::kMask) ++masked;
            else if (in == s[r][t - 1]) ++same;
            else {
                ++random;
                CHECK(in >= Vocab::kNumReserved);
            }
        }
    REQUIRE(positions == 120000);
    const double sel = static_cast<double>(selected) / static_cast<double>(positions);
    CHECK(sel == doctest::Approx(0.15).epsilon(0.01 / 0.15));
    CHECK(static_cast<double>(masked) / static_cast<double>(selected) == doctest::Approx(0.8).epsilon(0.02 / 0.8));
    // Random draws may coincide with the original token (1 in 40), counted as unchanged.
    CHECK(static_cast<double>(random) / static_cast<double>(selected) == doctest::Approx(0.1 * 39.0 / 40.0).epsilon(0.2));
    // Frame positions are never selected.
    for (std::size_t r = 0; r < b.rows; ++r) {
        CHECK_FALSE(b.predicted(r, 0));
        CHECK_FALSE(b.predicted(r, b.row_length(r) - 1));
    }
}

TEST_CASE("MLM batches are deterministic in the rng state") {
    const std::vector<Encoded> s{{5, 6, 7, 8, 9, 10}};
    Rng a(3), b(3);
    const auto x = make_mlm_batch(s, a, 20);
    const auto y = make_mlm_batch(s, b, 20);
    CHECK(x.input == y.input);
    CHECK(x.labels == y.labels);
    CHECK(x.predict_mask == y.predict_mask);
}

TEST_CASE("MLM rate validation") {
    const std::vector<Encoded> s{{5}};
    Rng rng(1);
    MlmRates bad;
    bad.mask_frac = 0.95;
    CHECK_THROWS_AS(make_mlm_batch(s, rng, 20, bad), InvalidArgument);
    bad = {};
    bad.select_rate = 1.5;
    CHECK_THROWS_AS(make_mlm_batch(s, rng, 20, bad), InvalidArgument);
}

TEST_CASE("word dropout replaces about the configured fraction") {
    std::vector<Encoded> s(1000, Encoded(50, 7));
    auto b = make_lm_batch(s, 0);
    const auto labels = b.labels;
    Rng rng(11);
    const auto replaced = apply_word_dropout(b, 0.1, 500, rng);
    const auto positions = count_content_positions(b);
    CHECK(positions == 50000);
    CHECK(static_cast<double>(replaced) / static_cast<double>(positions) == doctest::Approx(0.1).epsilon(0.1));
    CHECK(b.labels == labels);
    CHECK(b.input_at(0, 0) == Vocab::kBos);
}

TEST_CASE("synthetic language is deterministic and annotated") {
    SyntheticLanguage lang;
    Rng a(5), b(5);
    const auto x = lang.generate(50, a);
    const auto y = lang.generate(50, b);
    REQUIRE(x.size() == 50);
    for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK(x[i].source == y[i].source);
        CHECK(x[i].target == y[i].target);
        CHECK(x[i].pos.size() == x[i].source.size());
        CHECK(x[i].ccg.size() == x[i].source.size());
        CHECK_FALSE(x[i].target.empty());
    }
}

TEST_CASE("bigram corpus follows its transition rule") {
    Rng rng(2);
    const auto c = bigram_corpus(10, 12, 20, rng);
    REQUIRE(c.size() == 20);
    for (const auto& s : c) {
        REQUIRE(s.size() == 12);
        for (std::size_t i = 1; i < s.size(); ++i) {
            const int a = std::stoi(s[i - 1].substr(1)), b = std::stoi(s[i].substr(1));
            CHECK((b == (a + 1) % 10 || b == (a + 3) % 10));
        }
    }
}
