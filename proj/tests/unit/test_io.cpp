#include "repflow/activations.hpp"
#include "repflow/io.hpp"

#include "fixtures.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

using namespace repflow;
namespace fs = std::filesystem;

namespace {

fs::path tmp(const std::string& name) {
    const auto d = fs::temp_directory_path() / "repflow_io_test";
    fs::create_directories(d);
    return d / name;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& bytes) { std::ofstream(p, std::ios::binary) << bytes; }

Vocab small_vocab(std::size_t n) {
    Sentence s;
    for (std::size_t i = 0; i < n; ++i) s.push_back("w" + std::to_string(i));
    return Vocab::build(std::vector<Sentence>{s}, 100, 1);
}

}  // namespace

TEST_CASE("checkpoint round trip preserves logits bitwise") {
    for (Task task : {Task::LM, Task::MLM, Task::MT}) {
        CAPTURE(to_string(task));
        const Vocab v = small_vocab(8), tv = small_vocab(10);
        auto cfg = fixtures::tiny_config(task, v.size());
        if (task == Task::MT) cfg.tgt_vocab = tv.size();
        const Model m(cfg);
        const auto p = tmp("m.rfck");
        save_checkpoint(p, m, v, task == Task::MT ? &tv : nullptr);
        const auto ck = load_checkpoint(p, cfg);
        CHECK(ck.vocab == v);
        CHECK(ck.target_vocab.has_value() == (task == Task::MT));
        CHECK(ck.model.config() == cfg);
        const auto batch = fixtures::tiny_batch(task, v.size(), 3);
        const auto a = m.forward(batch, {}), b = ck.model.forward(batch, {});
        CHECK(a.logits == b.logits);
        // Re-saving the loaded model reproduces the file byte for byte.
        const auto q = tmp("m2.rfck");
        save_checkpoint(q, ck.model, ck.vocab, ck.target_vocab ? &*ck.target_vocab : nullptr);
        CHECK(slurp(p) == slurp(q));
    }
}

TEST_CASE("checkpoint layout") {
    const Vocab v = small_vocab(8);
    const Model m(fixtures::tiny_config(Task::LM, v.size()));
    const auto p = tmp("layout.rfck");
    save_checkpoint(p, m, v);
    const auto bytes = slurp(p);
    CHECK(bytes.substr(0, 4) == "RFCK");
    CHECK(static_cast<unsigned char>(bytes[4]) == kCheckpointVersion);
    std::uint32_t len = 0;
    for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
    const auto header = nlohmann::json::parse(bytes.substr(12, len));
    CHECK(header["model"]["d_model"] == 16);
}

TEST_CASE("checkpoint errors") {
    const Vocab v = small_vocab(8);
    const auto cfg = fixtures::tiny_config(Task::LM, v.size());
    const Model m(cfg);
    const auto p = tmp("e.rfck");
    save_checkpoint(p, m, v);
    const auto good = slurp(p);

    const auto bad = tmp("bad.rfck");
    for (std::size_t cut : {std::size_t{2}, std::size_t{10}, good.size() / 2, good.size() - 1}) {
        CAPTURE(cut);
        spit(bad, good.substr(0, cut));
        CHECK_THROWS_AS(load_checkpoint(bad), CorruptFile);
    }
    spit(bad, "XXXX" + good.substr(4));
    CHECK_THROWS_AS(load_checkpoint(bad), CorruptFile);

    auto ver = good;
    ver[4] = 9;
    spit(bad, ver);
    CHECK_THROWS_AS(load_checkpoint(bad), VersionMismatch);

    auto other = cfg;
    other.d_model = 32;
    other.d_ff = 48;
    CHECK_THROWS_WITH_AS(load_checkpoint(p, other), doctest::Contains("d_model"), InvalidArgument);

    auto nan = good;
    const float q = std::numeric_limits<float>::quiet_NaN();
    std::memcpy(nan.data() + nan.size() - 4, &q, 4);
    spit(bad, nan);
    CHECK_THROWS_AS(load_checkpoint(bad), CorruptFile);

    CHECK_THROWS_AS(load_checkpoint(tmp("missing.rfck")), Error);
}

TEST_CASE("activation extraction") {
    const auto sents = fixtures::random_sentences(20, 1, 6, 13, 4);
    SUBCASE("LM rows are BOS plus the sentence with shifted labels") {
        const Model m(fixtures::tiny_config(Task::LM));
        const auto a = extract_activations(m, sents);
        CHECK(a.n_layers() == 3);
        std::size_t row = 0;
        for (std::size_t s = 0; s < sents.size(); ++s) {
            CHECK(a.occurrences[row].input_token == Vocab::kBos);
            for (std::size_t t = 0; t <= sents[s].size(); ++t, ++row) {
                CHECK(a.occurrences[row].sentence_id == s);
                CHECK(a.occurrences[row].position == t);
                CHECK(a.occurrences[row].label_token == (t < sents[s].size() ? sents[s][t] : Vocab::kEos));
            }
        }
        CHECK(row == a.size());
    }
    SUBCASE("clean MLM labels equal inputs") {
        const Model m(fixtures::tiny_config(Task::MLM));
        const auto a = extract_activations(m, sents);
        for (const auto& o : a.occurrences) CHECK(o.input_token == o.label_token);
        CHECK(a.size() == [&] {
            std::size_t n = 0;
            for (const auto& s : sents) n += s.size() + 2;
            return n;
        }());
    }
    SUBCASE("corrupted MLM is seeded per sentence") {
        const Model m(fixtures::tiny_config(Task::MLM));
        ExtractOptions o;
        o.mlm_mode = MlmMode::Corrupted;
        o.mask_seed = 3;
        o.rates.select_rate = 0.5;
        const auto a = extract_activations(m, sents, o);
        o.batch_sentences = 3;
        const auto b = extract_activations(m, sents, o);
        CHECK(a.occurrences == b.occurrences);
        std::size_t masked = 0;
        for (const auto& x : a.occurrences) masked += x.input_token == Vocab::kMask;
        CHECK(masked > 0);

        o.rates = {1.0, 0.0, 1.0};
        o.replacement_vocab = Vocab::kNumReserved + 2;
        const auto r = extract_activations(m, sents, o);
        std::size_t replaced = 0;
        for (const auto& x : r.occurrences) {
            if (x.label_token < 0) continue;
            CHECK(x.input_token >= Vocab::kNumReserved);
            CHECK(x.input_token < Vocab::kNumReserved + 2);
            ++replaced;
        }
        CHECK(replaced > 0);
    }
    SUBCASE("MT rows are the bare source") {
        const Model m(fixtures::tiny_config(Task::MT));
        const auto a = extract_activations(m, sents);
        for (const auto& o : a.occurrences) {
            CHECK_FALSE(is_frame(o));
            CHECK(o.label_token == -1);
        }
    }
    SUBCASE("layer 0 is embedding plus position, and rows are stable") {
        const Model m(fixtures::tiny_config(Task::MLM));
        const auto a = extract_activations(m, sents);
        ExtractOptions o;
        o.batch_sentences = 1;
        o.max_layer = 1;
        const auto b = extract_activations(m, sents, o);
        CHECK(b.n_layers() == 2);
        CHECK(a.occurrences == b.occurrences);
        CHECK(a.layers[0] == b.layers[0]);
        CHECK((a.layers[1] - b.layers[1]).cwiseAbs().maxCoeff() < 1e-5f);
        const auto pe = sinusoidal_positions<float>(32, 16);
        const float scale = std::sqrt(16.0f);
        for (std::size_t i = 0; i < a.size(); ++i) {
            const auto& oc = a.occurrences[i];
            const Eigen::RowVectorXf want = m.params().src_embed.row(oc.input_token) * scale + pe.row(oc.position);
            CHECK((a.layers[0].row(static_cast<Eigen::Index>(i)) - want).cwiseAbs().maxCoeff() < 1e-6f);
        }
    }
    const Model m(fixtures::tiny_config(Task::LM));
    ExtractOptions o;
    o.max_layer = 3;
    CHECK_THROWS_AS(extract_activations(m, sents, o), InvalidArgument);
    const std::vector<Encoded> empty{{}};
    CHECK_THROWS_AS(extract_activations(m, empty), InvalidArgument);
}

TEST_CASE("content index and alignment across framings") {
    const auto sents = fixtures::random_sentences(10, 1, 5, 13, 5);
    const auto lm = extract_activations(Model(fixtures::tiny_config(Task::LM)), sents);
    const auto mt = extract_activations(Model(fixtures::tiny_config(Task::MT)), sents);
    const auto idx = content_index(lm);
    CHECK(idx[0] == -1);
    CHECK(idx[1] == 0);
    const auto pairs = align_occurrences(lm, mt);
    std::size_t content = 0;
    for (const auto& s : sents) content += s.size();
    CHECK(pairs.size() == content);
    for (const auto& [i, j] : pairs) CHECK(lm.occurrences[i].input_token == mt.occurrences[j].input_token);
}

TEST_CASE("activation dump round trip and validation") {
    const auto sents = fixtures::random_sentences(12, 1, 6, 13, 6);
    const auto a = extract_activations(Model(fixtures::tiny_config(Task::LM)), sents);
    const auto p = tmp("a.rfac");
    save_activations(p, a);
    const auto b = load_activations(p);
    CHECK(a.occurrences == b.occurrences);
    REQUIRE(a.n_layers() == b.n_layers());
    for (std::size_t l = 0; l < a.n_layers(); ++l) CHECK(a.layers[l] == b.layers[l]);
    const auto bytes = slurp(p);
    CHECK(bytes.size() == 24 + a.size() * 14 + a.n_layers() * a.size() * 16 * 4);
    CHECK(bytes.substr(0, 4) == "RFAC");

    const auto bad = tmp("bad.rfac");
    spit(bad, bytes.substr(0, bytes.size() - 3));
    CHECK_THROWS_AS(load_activations(bad), CorruptFile);
    spit(bad, bytes + "x");
    CHECK_THROWS_AS(load_activations(bad), CorruptFile);
    spit(bad, "RFCK" + bytes.substr(4));
    CHECK_THROWS_AS(load_activations(bad), CorruptFile);
    auto ver = bytes;
    ver[4] = 2;
    spit(bad, ver);
    CHECK_THROWS_AS(load_activations(bad), VersionMismatch);

    save_activations(tmp("a2.rfac"), b);
    CHECK(slurp(tmp("a2.rfac")) == bytes);
}
