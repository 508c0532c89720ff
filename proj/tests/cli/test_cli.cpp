#include "config.hpp"
#include "hash.hpp"
#include "pipeline.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <fstream>
#include <iterator>

using namespace repflow;
using namespace repflow::cli;
using nlohmann::json;

namespace {

const fs::path kSource = REPFLOW_SOURCE_DIR;

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

json minimal() {
    return {{"task", "mlm"}, {"out_dir", "runs/x"}, {"corpus", {{"source", "data/sample.src"}}}};
}

std::string field_of(const json& j) {
    try {
        parse_config(j, kSource);
    } catch (const ConfigError& e) {
        return e.field();
    }
    return "<accepted>";
}

fs::path scratch(const std::string& name) {
    const auto d = fs::temp_directory_path() / "repflow_cli_test" / name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

/// A run small enough for unit tests, over the bundled sample corpus.
RunConfig tiny_run(Task task, const fs::path& out) {
    json j = minimal();
    j["task"] = std::string(task == Task::LM ? "lm" : task == Task::MLM ? "mlm" : "mt");
    j["corpus"] = {{"source", "data/sample.src"},
                   {"target", "data/sample.tgt"},
                   {"pos", "data/sample.pos.tsv"},
                   {"analysis_sentences", 60}};
    j["model"] = {{"n_layers", 2}, {"d_model", 16}, {"n_heads", 2}, {"d_ff", 32}, {"max_position", 64}};
    j["train"] = {{"steps", 12}, {"batch_tokens", 400}, {"max_len", 40}, {"warmup", 5}, {"log_every", 4}};
    j["extract"] = {{"mlm_corruption_passes", 2}};
    j["mi"] = {{"top_k", 30}, {"clusters", 10}, {"replaced_clusters", 4}, {"bootstrap", 3}};
    j["probe"] = {{"words", 3}, {"identity_k", 4}, {"n_main", 5}, {"n_contrastive", 20}, {"max_rank", 100}, {"max_rows", 300}};
    Overrides ov;
    ov.out_dir = out;
    return parse_config(j, kSource, ov);
}

}  // namespace

TEST_CASE("validation errors name the offending field") {
    auto j = minimal();
    j["corpus"].erase("source");
    CHECK(field_of(j) == "corpus.source");
    j = minimal();
    j.erase("corpus");
    CHECK(field_of(j) == "corpus");
    j = minimal();
    j.erase("task");
    CHECK(field_of(j) == "task");
    j = minimal();
    j["task"] = "cbow";
    CHECK(field_of(j) == "task");
    j = minimal();
    j["model"] = {{"d_modl", 64}};
    CHECK(field_of(j) == "model.d_modl");
    j = minimal();
    j["model"] = {{"d_model", 30}, {"n_heads", 4}};
    CHECK(field_of(j) == "model.n_heads");
    j = minimal();
    j["train"] = {{"steps", -3}};
    CHECK(field_of(j) == "train.steps");
    j = minimal();
    j["model"] = {{"dropout", "high"}};
    CHECK(field_of(j) == "model.dropout");
    j = minimal();
    j["task"] = "mt";
    CHECK(field_of(j) == "corpus.target");
    j = minimal();
    j["cca"] = {{"compare", {"a", 3}}};
    CHECK(field_of(j) == "cca.compare[1]");
    j = minimal();
    j.erase("out_dir");
    CHECK(field_of(j) == "out_dir");
    CHECK(field_of(minimal()) == "<accepted>");

    const auto bad = fs::temp_directory_path() / "repflow_bad_config.json";
    std::ofstream(bad) << "{ \"task\": ";
    CHECK_THROWS_AS(load_config(bad), ConfigError);
}

TEST_CASE("overrides and hashing") {
    const auto base = parse_config(minimal(), kSource);
    CHECK(base.name == "mlm-s1");
    CHECK(base.out_dir == (kSource / "runs/x").lexically_normal());

    Overrides ov;
    ov.seed = 9;
    ov.out_dir = "/tmp/elsewhere";
    const auto c = parse_config(minimal(), kSource, ov);
    CHECK(c.seed == 9);
    CHECK(c.model.seed == 9);
    CHECK(c.out_dir == "/tmp/elsewhere");
    CHECK(c.hash() != base.hash());

    Overrides only_out;
    only_out.out_dir = "/tmp/other";
    CHECK(parse_config(minimal(), kSource, only_out).hash() == base.hash());
    CHECK(base.hash().size() == 64);

    Overrides paper;
    paper.paper_scale = true;
    const auto p = parse_config(minimal(), kSource, paper);
    CHECK(p.model.n_layers == 6);
    CHECK(p.model.d_model == 512);
    CHECK(p.model.n_heads == 8);
    CHECK(p.model.d_ff == 2048);
    CHECK(p.to_json()["paper_scale"] == true);
}

TEST_CASE("published schema matches the parser") {
    std::ifstream in(kSource / "docs/config.schema.json");
    const auto schema = json::parse(in);
    const auto cfg = parse_config(minimal(), kSource).to_json();
    // Every parsed field is documented and every documented default is the parser's default.
    for (const auto& [key, value] : cfg.items()) {
        if (key == "paper_scale") continue;
        CAPTURE(key);
        REQUIRE(schema["properties"].contains(key));
        if (!value.is_object()) continue;
        const auto& props = schema["properties"][key]["properties"];
        for (const auto& [sub, v] : value.items()) {
            CAPTURE(sub);
            REQUIRE(props.contains(sub));
            if (props[sub].contains("default")) CHECK(props[sub]["default"] == v);
        }
        CHECK(props.size() == value.size());
    }
    for (const auto& [key, value] : schema["properties"].items()) {
        CAPTURE(key);
        CHECK(cfg.contains(key));
    }
}

TEST_CASE("sha256 known answers") {
    CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("numbers carry 9 significant digits") {
    CHECK(format_number(0.1) == "0.1");
    CHECK(format_number(1.0 / 3.0) == "0.333333333");
    CHECK(format_number(123456789012.0) == "1.23456789e+11");
    CHECK(format_number(2.0) == "2");
}

TEST_CASE("stages need their inputs") {
    const auto c = tiny_run(Task::LM, scratch("missing"));
    CHECK_THROWS_WITH_AS(run_extract(c), doctest::Contains("missing input artifact"), Error);
    CHECK_THROWS_WITH_AS(run_mi(c), doctest::Contains("missing input artifact"), Error);
}

TEST_CASE("identical seeds give byte-identical artifacts") {
    for (Task task : {Task::LM, Task::MLM, Task::MT}) {
        CAPTURE(to_string(task));
        const auto a = tiny_run(task, scratch("det_a"));
        const auto b = tiny_run(task, scratch("det_b"));
        for (const auto* c : {&a, &b}) {
            run_train(*c);
            run_extract(*c);
            run_mi(*c);
            run_change(*c);
            run_probe(*c);
            run_report(*c);
        }
        for (const char* f : {files::kCheckpoint, files::kRun, files::kTrainLog, files::kActs, files::kMi, files::kChange,
                              files::kProbe, files::kSummary}) {
            CAPTURE(f);
            REQUIRE(fs::exists(a.out_dir / f));
            CHECK(sha256_file(a.out_dir / f) == sha256_file(b.out_dir / f));
        }
        if (task == Task::MLM)
            CHECK(sha256_file(a.out_dir / files::kActsCorrupted) == sha256_file(b.out_dir / files::kActsCorrupted));

        auto other = tiny_run(task, scratch("det_c"));
        other.seed = other.model.seed = 2;
        run_train(other);
        CHECK(sha256_file(other.out_dir / files::kCheckpoint) != sha256_file(a.out_dir / files::kCheckpoint));
    }
}

TEST_CASE("report merges, deduplicates and refuses mixed versions") {
    const auto dir = scratch("report");
    const auto c = tiny_run(Task::LM, dir / "run");
    run_train(c);
    run_extract(c);
    run_mi(c);
    const auto mi = read_jsonl(c.out_dir / files::kMi);
    REQUIRE(!mi.empty());

    auto rc = c;
    rc.out_dir = dir / "report";
    rc.report.inputs = {c.out_dir / files::kMi, c.out_dir / files::kMi};
    auto r = run_report(rc);
    CHECK(r.records == mi.size());
    CHECK(r.duplicates == mi.size());
    CHECK(r.plot_files.size() == 7);
    const auto csv = slurp(rc.out_dir / files::kSummary);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(mi.size() + 1));
    CHECK(csv.rfind("analysis,kind,run,task,seed,model_a,model_b,group,direction,layer,score,n,", 0) == 0);
    const auto manifest = json::parse(slurp(rc.out_dir / files::kManifest));
    CHECK(manifest["inputs"].size() == 2);
    CHECK(manifest["inputs"][0]["sha256"] == sha256_file(c.out_dir / files::kMi));
    CHECK(manifest["outputs"].size() == 8);

    // Re-running over the same inputs reproduces every output byte.
    const auto before = slurp(rc.out_dir / files::kSummary);
    const auto token_mi = slurp(rc.out_dir / "plot/token_mi.csv");
    run_report(rc);
    CHECK(slurp(rc.out_dir / files::kSummary) == before);
    CHECK(slurp(rc.out_dir / "plot/token_mi.csv") == token_mi);

    // Empty input: header-only tables.
    const auto empty = dir / "empty.jsonl";
    std::ofstream(empty).flush();
    rc.report.inputs = {empty};
    r = run_report(rc);
    CHECK(r.records == 0);
    const auto header = slurp(rc.out_dir / files::kSummary);
    CHECK(std::count(header.begin(), header.end(), '\n') == 1);
    for (const auto& f : figure_names()) CHECK(slurp(rc.out_dir / "plot" / (f + ".csv")) == header);

    // Mixed tool versions.
    auto old = mi.front();
    old["provenance"]["tool_version"] = "0.1.0";
    const auto mixed = dir / "old.jsonl";
    std::ofstream(mixed) << old.dump() << "\n";
    rc.report.inputs = {c.out_dir / files::kMi, mixed};
    CHECK_THROWS_WITH_AS(run_report(rc), doctest::Contains("--force"), Error);
    CHECK(run_report(rc, true).records == mi.size() + 1);

    // Malformed records.
    std::ofstream(mixed) << "{\"layer\": 1}\n";
    CHECK_THROWS_AS(run_report(rc), CorruptFile);
}

TEST_CASE("every record carries provenance") {
    const auto c = tiny_run(Task::MLM, scratch("prov"));
    run_train(c);
    run_extract(c);
    run_mi(c);
    const auto ck = sha256_file(c.out_dir / files::kCheckpoint);
    const auto records = read_jsonl(c.out_dir / files::kMi);
    bool replaced = false;
    for (const auto& r : records) {
        CHECK(r["provenance"]["checkpoint_hash"] == ck);
        CHECK(r["provenance"]["config_hash"] == c.hash());
        CHECK(r["provenance"]["tool_version"] == kToolVersion);
        CHECK(r["provenance"]["seed"] == 1);
        replaced = replaced || r["group"].get<std::string>().find("random_replaced") != std::string::npos;
    }
    CHECK(replaced);
    const auto run = json::parse(slurp(c.out_dir / files::kRun));
    CHECK(run["checkpoint_hash"] == ck);
    CHECK(run["inputs"].size() == 2);
}
