#include "pipeline.hpp"

#include "hash.hpp"

#include "repflow/activations.hpp"
#include "repflow/io.hpp"
#include "repflow/mi.hpp"
#include "repflow/parallel.hpp"
#include "repflow/probes.hpp"
#include "repflow/synthetic.hpp"
#include "repflow/train.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

namespace repflow::cli {

using nlohmann::json;

namespace {

fs::path in_run(const RunConfig& c, const char* file) { return c.out_dir / file; }

fs::path require(const fs::path& p, const char* stage) {
    if (!fs::exists(p))
        throw Error("missing input artifact " + p.string() + " (run `repflow " + stage + "` for this configuration first)");
    return p;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write " + p.string());
    out << text;
}

/// Records of one analysis file, written sorted as produced.
class JsonlWriter {
public:
    explicit JsonlWriter(json provenance) : prov_(std::move(provenance)) {}
    void add(json record) {
        record["provenance"] = prov_;
        lines_ += record.dump() + "\n";
        ++count_;
    }
    void save(const fs::path& p) const {
        write_text(p, lines_);
        spdlog::info("wrote {} records to {}", count_, p.string());
    }

private:
    json prov_;
    std::string lines_;
    std::size_t count_ = 0;
};

json provenance(const RunConfig& c) {
    const auto ck = in_run(c, files::kCheckpoint);
    return {{"run", c.name},
            {"task", std::string(to_string(c.task))},
            {"seed", c.seed},
            {"config_hash", c.hash()},
            {"checkpoint_hash", fs::exists(ck) ? sha256_file(ck) : std::string()},
            {"tool_version", kToolVersion}};
}

std::vector<Encoded> encode_all(const Vocab& v, const std::vector<Sentence>& sents) {
    std::vector<Encoded> out;
    out.reserve(sents.size());
    for (const auto& s : sents) out.push_back(v.encode(s));
    return out;
}

Annotations split_annotations(const Annotations& ccg, const std::vector<Sentence>& sents, bool left) {
    Annotations out;
    for (std::uint32_t s = 0; s < sents.size(); ++s)
        for (std::uint32_t t = 0; t < sents[s].size(); ++t)
            if (const auto* tag = ccg.find(s, t)) {
                const auto parts = split_ccg(*tag);
                out.set(s, t, left ? parts.left : parts.right);
            }
    return out;
}

/// Groups for change and influence: every token, then the frequency buckets.
std::vector<GroupSpec> standard_groups() {
    std::vector<GroupSpec> g{GroupSpec::all()};
    for (auto& b : default_frequency_buckets()) g.push_back(b);
    return g;
}

std::string run_name(const fs::path& dir) {
    const auto p = dir / files::kRun;
    if (!fs::exists(p)) return dir.filename().string();
    std::ifstream in(p);
    return json::parse(in).value("name", dir.filename().string());
}

}  // namespace

Material load_material(const RunConfig& c) {
    Material m;
    const auto& k = c.corpus;
    if (k.synthetic) {
        SyntheticLanguage lang;
        Rng rng(k.synthetic->seed);
        const auto samples = lang.generate(k.synthetic->train_sentences + k.synthetic->analysis_sentences, rng);
        Annotations pos, ccg;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const auto& s = samples[i];
            if (i < k.synthetic->train_sentences) {
                m.train.sentences.push_back(s.source);
                if (c.task == Task::MT) m.train.targets.push_back(s.target);
                continue;
            }
            const auto a = static_cast<std::uint32_t>(m.analysis.size());
            m.analysis.push_back(s.source);
            for (std::uint32_t t = 0; t < s.source.size(); ++t) {
                pos.set(a, t, s.pos[t]);
                ccg.set(a, t, s.ccg[t]);
            }
        }
        m.pos = std::move(pos);
        m.ccg = std::move(ccg);
    } else {
        m.train = c.task == Task::MT ? load_corpus(*k.source, k.target) : load_corpus(*k.source);
        m.inputs.emplace_back(k.source->generic_string(), sha256_file(*k.source));
        if (c.task == Task::MT) m.inputs.emplace_back(k.target->generic_string(), sha256_file(*k.target));
        if (k.analysis_source) {
            m.analysis = load_corpus(*k.analysis_source).sentences;
            m.inputs.emplace_back(k.analysis_source->generic_string(), sha256_file(*k.analysis_source));
        } else {
            m.analysis = m.train.sentences;
        }
        if (m.analysis.size() > k.analysis_sentences) m.analysis.resize(k.analysis_sentences);
        if (k.pos) {
            m.pos = Annotations::load(*k.pos);
            m.inputs.emplace_back(k.pos->generic_string(), sha256_file(*k.pos));
        }
        if (k.ccg) {
            m.ccg = Annotations::load(*k.ccg);
            m.inputs.emplace_back(k.ccg->generic_string(), sha256_file(*k.ccg));
        }
    }
    if (m.ccg) {
        m.ccg_left = split_annotations(*m.ccg, m.analysis, true);
        m.ccg_right = split_annotations(*m.ccg, m.analysis, false);
    }
    for (auto& [path, hash] : m.inputs) path = fs::path(path).lexically_relative(c.base_dir).generic_string();
    return m;
}

void run_train(const RunConfig& c) {
    fs::create_directories(c.out_dir);
    const auto material = load_material(c);
    const Vocab vocab = build_vocab(material.train, c.corpus.max_vocab, c.corpus.min_freq);
    std::optional<Vocab> tvocab;
    if (c.task == Task::MT) {
        Corpus t;
        t.sentences = material.train.targets;
        tvocab = build_vocab(t, c.corpus.max_vocab, c.corpus.min_freq);
    }
    auto mc = c.model;
    mc.src_vocab = vocab.size();
    mc.tgt_vocab = tvocab ? tvocab->size() : 0;
    if (c.paper_scale) spdlog::warn("paper-scale model (6 layers, d_model 512); full-length training at this size is far beyond a desk machine");
    spdlog::info("training {} on {} sentences (vocab {}), {} steps", c.name, material.train.size(), vocab.size(), c.train.steps);

    Model model(mc);
    const auto data = make_training_set(c.task, material.train, vocab, tvocab ? &*tvocab : nullptr);
    TrainHooks hooks;
    hooks.checkpoint = [&](std::size_t step, const Model& m) {
        if (step < c.train.steps)
            save_checkpoint(c.out_dir / ("model-" + std::to_string(step) + ".rfck"), m, vocab, tvocab ? &*tvocab : nullptr);
    };
    const auto summary = train(model, data, c.train, Rng(c.seed).substream("train"), hooks);
    save_checkpoint(in_run(c, files::kCheckpoint), model, vocab, tvocab ? &*tvocab : nullptr);

    JsonlWriter log(provenance(c));
    for (const auto& p : summary.losses) log.add({{"step", p.step}, {"loss", p.loss}, {"lr", p.lr}});
    log.save(in_run(c, files::kTrainLog));

    auto cfg = c.to_json();
    cfg.erase("out_dir");
    json inputs = json::array();
    for (const auto& [path, hash] : material.inputs) inputs.push_back({{"path", path}, {"sha256", hash}});
    const json run{{"name", c.name},
                   {"task", std::string(to_string(c.task))},
                   {"seed", c.seed},
                   {"config", cfg},
                   {"config_hash", c.hash()},
                   {"tool_version", kToolVersion},
                   {"inputs", inputs},
                   {"checkpoint_hash", sha256_file(in_run(c, files::kCheckpoint))},
                   {"train_sentences", material.train.size()},
                   {"vocab", vocab.size()},
                   {"word_dropout_replaced", summary.word_dropout_replaced},
                   {"word_dropout_positions", summary.word_dropout_positions}};
    write_text(in_run(c, files::kRun), run.dump(2) + "\n");
}

void run_extract(const RunConfig& c) {
    const auto ck = load_checkpoint(require(in_run(c, files::kCheckpoint), "train"));
    const auto material = load_material(c);
    const auto sents = encode_all(ck.vocab, material.analysis);
    ExtractOptions o;
    o.batch_sentences = c.extract.batch_sentences;
    o.max_len = c.train.max_len;
    const auto acts = extract_activations(ck.model, sents, o);
    save_activations(in_run(c, files::kActs), acts);
    spdlog::info("extracted {} occurrences x {} layers", acts.size(), acts.n_layers());

    if (c.task != Task::MLM || c.extract.mlm_corruption_passes == 0) return;
    o.mlm_mode = MlmMode::Corrupted;
    o.rates = c.train.mlm;
    if (c.extract.replacement_top_k) o.replacement_vocab = Vocab::kNumReserved + c.extract.replacement_top_k;
    LayerActivations all;
    const Rng mask = Rng(c.seed).substream("mask");
    for (std::size_t pass = 0; pass < c.extract.mlm_corruption_passes; ++pass) {
        o.mask_seed = mask.substream(pass).key();
        auto a = extract_activations(ck.model, sents, o);
        for (auto& oc : a.occurrences) oc.sentence_id += static_cast<std::uint32_t>(pass * sents.size());
        if (all.layers.empty()) {
            all = std::move(a);
            continue;
        }
        all.occurrences.insert(all.occurrences.end(), a.occurrences.begin(), a.occurrences.end());
        for (std::size_t l = 0; l < all.layers.size(); ++l) {
            MatrixF stacked(all.layers[l].rows() + a.layers[l].rows(), all.layers[l].cols());
            stacked << all.layers[l], a.layers[l];
            all.layers[l] = std::move(stacked);
        }
    }
    save_activations(in_run(c, files::kActsCorrupted), all);
    spdlog::info("extracted {} corrupted occurrences over {} passes", all.size(), c.extract.mlm_corruption_passes);
}

void run_mi(const RunConfig& c) {
    const auto acts = load_activations(require(in_run(c, files::kActs), "extract"));
    JsonlWriter out(provenance(c));
    MiCurveOptions o;
    o.top_k = c.mi.top_k;
    o.clusters = c.mi.clusters;
    o.batch_size = c.mi.batch_size;
    o.epochs = c.mi.epochs;
    o.bootstrap = c.mi.bootstrap;
    o.max_occurrences = c.mi.max_occurrences;
    o.seed = c.seed;
    const std::string top = "top" + std::to_string(c.mi.top_k);

    auto emit = [&](const std::vector<MiPoint>& curve, MiTarget target, const std::string& group, std::size_t clusters) {
        for (const auto& p : curve) {
            auto r = to_json(p);
            r["analysis"] = "mi";
            r["kind"] = std::string(to_string(target));
            r["group"] = group;
            r["score"] = p.mi_nats;
            r["clusters"] = clusters;
            out.add(r);
        }
    };

    o.target = MiTarget::InputToken;
    emit(mi_curve(acts, o), MiTarget::InputToken, top, o.clusters);
    if (c.task == Task::LM) {
        o.target = MiTarget::OutputLabel;
        o.random_replaced_only = false;
        emit(mi_curve(acts, o), MiTarget::OutputLabel, top, o.clusters);
    }
    if (c.task == Task::MLM && c.extract.mlm_corruption_passes > 0) {
        const auto cor = load_activations(require(in_run(c, files::kActsCorrupted), "extract"));
        o.target = MiTarget::OutputLabel;
        o.random_replaced_only = true;
        o.clusters = c.mi.replaced_clusters;
        const auto rows = mi_rows(cor, o);
        if (rows.size() <= o.clusters) {
            spdlog::warn("only {} random-replacement occurrences; skipping the replaced-token curves", rows.size());
        } else {
            std::vector<std::int32_t> labels, inputs;
            for (auto r : rows) {
                labels.push_back(cor.occurrences[r].label_token);
                inputs.push_back(cor.occurrences[r].input_token);
            }
            const std::string group = top + " random_replaced";
            emit(mi_curve(cor, rows, labels, o), MiTarget::OutputLabel, group, o.clusters);
            emit(mi_curve(cor, rows, inputs, o), MiTarget::InputToken, group, o.clusters);
        }
    }
    out.save(in_run(c, files::kMi));
}

void run_cca(const RunConfig& c) {
    const auto mine = load_activations(require(in_run(c, files::kActs), "extract"));
    JsonlWriter out(provenance(c));
    if (c.cca.compare.empty()) spdlog::warn("cca.compare lists no other runs; nothing to compare");
    for (const auto& dir : c.cca.compare) {
        const auto other = load_activations(require(dir / files::kActs, "extract"));
        auto p = model_distance_profile(mine, other, GroupSpec::all(), c.cca.max_rows, c.seed);
        p.model_a = c.name;
        p.model_b = run_name(dir);
        for (const char* dir_name : {"avg", "ab", "ba"})
            for (auto r : to_json(p, dir_name)) {
                r["analysis"] = "cca";
                out.add(r);
            }
    }
    out.save(in_run(c, files::kCca));
}

void run_change(const RunConfig& c) {
    const auto acts = load_activations(require(in_run(c, files::kActs), "extract"));
    const auto material = load_material(c);
    auto groups = standard_groups();
    std::set<std::string> tags;
    if (material.pos) {
        const auto occs = build_occurrence_set(acts, &*material.pos);
        for (const auto& a : occs.annotation)
            if (a) tags.insert(*a);
        for (const auto& t : tags) groups.push_back(GroupSpec::annotation(*material.pos, t));
    }
    JsonlWriter out(provenance(c));
    for (const auto& g : groups) {
        const auto rows = select_rows(acts, g);
        if (rows.size() <= 2 * acts.d_model()) {
            spdlog::warn("change: group {} has {} rows for d_model {}; skipped", g.describe(), rows.size(), acts.d_model());
            continue;
        }
        auto p = layer_change_profile(acts, g);
        p.model_a = p.model_b = c.name;
        for (auto r : to_json(p)) {
            r["analysis"] = "change";
            out.add(r);
        }
    }
    out.save(in_run(c, files::kChange));
}

void run_influence(const RunConfig& c) {
    const auto ck = load_checkpoint(require(in_run(c, files::kCheckpoint), "train"));
    const auto material = load_material(c);
    const auto sents = encode_all(ck.vocab, material.analysis);
    InfluenceOptions o;
    o.max_sentences = c.influence.max_sentences;
    o.at_top_layer = c.influence.at_top_layer;
    o.seed = c.seed;
    o.batch_sentences = c.extract.batch_sentences;
    JsonlWriter out(provenance(c));
    for (const auto& g : standard_groups()) {
        Profile p;
        try {
            p = token_influence_profile(ck.model, sents, g, o);
        } catch (const InvalidArgument& e) {
            spdlog::warn("influence: group {} skipped ({})", g.describe(), e.what());
            continue;
        }
        p.model_a = p.model_b = c.name;
        for (auto r : to_json(p)) {
            r["analysis"] = "influence";
            out.add(r);
        }
    }
    out.save(in_run(c, files::kInfluence));
}

void run_probe(const RunConfig& c) {
    const auto ck = load_checkpoint(require(in_run(c, files::kCheckpoint), "train"));
    const auto acts = load_activations(require(in_run(c, files::kActs), "extract"));
    const auto material = load_material(c);
    const auto occs = build_occurrence_set(acts);
    const Rng root(c.seed);
    JsonlWriter out(provenance(c));
    auto add = [&](ProbeRecord r) {
        auto j = to_json(r);
        j["analysis"] = "probe";
        out.add(j);
    };

    std::vector<std::size_t> members(occs.size());
    std::iota(members.begin(), members.end(), std::size_t{0});
    if (members.size() > c.probe.max_rows) {
        Rng rng = root.substream("sample").substream("probe");
        rng.shuffle(members.begin(), members.end());
        members.resize(c.probe.max_rows);
        std::sort(members.begin(), members.end());
    }
    std::vector<std::uint32_t> positions;
    using Values = std::vector<std::optional<std::int64_t>>;
    std::vector<std::pair<std::string, Values>> properties(3);
    properties[0].first = "input_token";
    properties[1].first = "left_neighbor";
    properties[2].first = "right_neighbor";
    for (auto m : members) {
        positions.push_back(occs.position[m]);
        properties[0].second.emplace_back(occs.token[m]);
        properties[1].second.emplace_back(occs.left[m]);
        properties[2].second.emplace_back(occs.right[m]);
    }
    auto annotated = [&](const char* name, const std::optional<Annotations>& ann) {
        if (!ann) return;
        std::map<std::string, std::int64_t> ids;
        Values v;
        for (auto m : members) {
            const auto* l = ann->find(occs.sentence[m], occs.position[m]);
            if (!l) {
                v.emplace_back(std::nullopt);
                continue;
            }
            const auto [it, fresh] = ids.emplace(*l, static_cast<std::int64_t>(ids.size()));
            v.emplace_back(it->second);
        }
        properties.emplace_back(std::string("annotation:") + name, std::move(v));
    };
    annotated("pos", material.pos);
    annotated("ccg", material.ccg);
    annotated("ccg_left", material.ccg_left);
    annotated("ccg_right", material.ccg_right);

    ProbeOptions po;
    po.k = c.probe.k;
    po.metric = c.probe.metric;
    const std::string metric(to_string(po.metric));
    for (std::size_t l = 0; l < acts.n_layers(); ++l) {
        const Matrix reps = occs.representations(l, members);
        add({"position", l, position_preservation_score(reps, positions, po), po.k, metric, members.size(), std::nullopt});
        for (const auto& [name, values] : properties) {
            const auto s = property_preservation_score(reps, values, po);
            add({name, l, s.score, po.k, metric, s.n_rows, std::nullopt});
        }
    }

    const auto words = sample_probe_words(occs, c.probe.words, c.probe.max_rank, c.probe.n_main,
                                          root.substream("sample").substream("words").key());
    if (words.empty()) {
        spdlog::warn("identity probe: no word type has {} occurrences; skipped", c.probe.n_main);
    } else {
        PoolOptions pool_opts;
        pool_opts.n_main = c.probe.n_main;
        pool_opts.n_contrastive_total = c.probe.n_contrastive;
        ProbeOptions io = po;
        io.k = c.probe.identity_k;
        // scores[w][l]
        std::vector<std::vector<double>> scores(words.size());
        std::vector<std::size_t> pool_rows(words.size());
        parallel_for(words.size(), [&](std::size_t w) {
            auto opts = pool_opts;
            opts.seed = root.substream("sample").substream("pool").substream(w).key();
            const auto pool = build_contrastive_pool(ck.model.params().src_embed, words[w], occs, opts);
            pool_rows[w] = pool.members.size();
            if (pool.members.size() <= io.k || pool.members.size() <= pool.n_main) return;
            for (std::size_t l = 0; l < acts.n_layers(); ++l)
                scores[w].push_back(identity_preservation_score(occs.representations(l, pool.members), pool.n_main, io));
        });
        std::size_t scored = 0;
        for (std::size_t w = 0; w < words.size(); ++w) {
            if (scores[w].empty())
                spdlog::warn("identity probe: pool for '{}' has {} rows, too few for k = {} or without contrastive rows; skipped", words[w],
                             pool_rows[w], io.k);
            else
                ++scored;
        }
        for (std::size_t l = 0; scored > 0 && l < acts.n_layers(); ++l) {
            double mean = 0.0;
            std::size_t rows = 0;
            for (std::size_t w = 0; w < words.size(); ++w) {
                if (scores[w].empty()) continue;
                add({"identity", l, scores[w][l], io.k, metric, pool_rows[w], words[w]});
                mean += scores[w][l];
                rows += pool_rows[w];
            }
            add({"identity", l, mean / static_cast<double>(scored), io.k, metric, rows, std::nullopt});
        }
    }
    out.save(in_run(c, files::kProbe));
}

// ---------------------------------------------------------------------------

const std::vector<std::string>& summary_columns() {
    static const std::vector<std::string> cols{
        "analysis", "kind",    "run",   "task",     "seed",     "model_a",     "model_b",         "group",
        "direction", "layer",  "score", "n",        "k",        "metric",      "word_type",       "ci_lo",
        "ci_hi",    "h_labels", "clusters", "config_hash", "checkpoint_hash", "tool_version"};
    return cols;
}

const std::vector<std::string>& figure_names() {
    static const std::vector<std::string> f{"token_mi",  "token_identity",     "layer_distance",   "change_by_frequency",
                                            "influence", "position_neighbors", "annotation_probes"};
    return f;
}

std::string format_number(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", x);
    return buf;
}

std::vector<json> read_jsonl(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::vector<json> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        try {
            out.push_back(json::parse(line));
        } catch (const json::parse_error& e) {
            throw CorruptFile(path.string() + ":" + std::to_string(n) + ": " + e.what());
        }
        if (!out.back().is_object() || !out.back().contains("analysis") || !out.back().contains("provenance"))
            throw CorruptFile(path.string() + ":" + std::to_string(n) + ": record lacks analysis or provenance");
    }
    return out;
}

namespace {

std::string cell(const json& v) {
    if (v.is_null()) return "";
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_number_integer() || v.is_number_unsigned()) return v.dump();
    if (v.is_number()) return format_number(v.get<double>());
    return v.dump();
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char ch : s) {
        if (ch == '"') out += '"';
        out += ch;
    }
    return out + "\"";
}

/// Flattens a record into the summary columns.
std::map<std::string, json> flatten(const json& r) {
    const auto& prov = r.at("provenance");
    std::map<std::string, json> row;
    auto get = [&](const json& obj, const char* key) { return obj.contains(key) ? obj.at(key) : json(nullptr); };
    row["analysis"] = r.at("analysis");
    row["kind"] = r.contains("kind") ? r.at("kind") : get(r, "probe");
    for (const char* key : {"run", "task", "seed", "config_hash", "checkpoint_hash", "tool_version"}) row[key] = get(prov, key);
    for (const char* key : {"model_a", "model_b", "group", "direction", "layer", "score", "k", "metric", "word_type",
                            "h_labels", "clusters"})
        row[key] = get(r, key);
    row["n"] = r.contains("n") ? r.at("n") : get(r, "n_rows");
    row["ci_lo"] = get(r, "bootstrap_lo");
    row["ci_hi"] = get(r, "bootstrap_hi");
    return row;
}

bool starts_with(const json& v, std::string_view prefix) {
    return v.is_string() && v.get<std::string>().rfind(prefix, 0) == 0;
}

bool contains(const json& v, std::string_view needle) {
    return v.is_string() && v.get<std::string>().find(needle) != std::string::npos;
}

/// Which figure analogues a summary row feeds.
std::vector<std::string> figures_for(const std::map<std::string, json>& row) {
    const auto& a = row.at("analysis");
    const auto& kind = row.at("kind");
    const auto& group = row.at("group");
    std::vector<std::string> out;
    if (a == "mi") {
        const bool replaced = contains(group, "random_replaced");
        if (kind == "input_token" && !replaced) out.push_back("token_mi");
        if (replaced || kind == "output_label") out.push_back("token_identity");
    } else if (a == "probe") {
        if (kind == "identity" && row.at("word_type").is_null()) out.push_back("token_identity");
        if (kind == "position" || kind == "left_neighbor" || kind == "right_neighbor") out.push_back("position_neighbors");
        if (starts_with(kind, "annotation:")) out.push_back("annotation_probes");
    } else if (a == "cca") {
        if (row.at("direction") == "avg") out.push_back("layer_distance");
    } else if (a == "change") {
        if (group == "all") out.push_back("layer_distance");
        if (starts_with(group, "rank[")) out.push_back("change_by_frequency");
    } else if (a == "influence") {
        out.push_back("influence");
    }
    return out;
}

std::vector<fs::path> input_files(const std::vector<fs::path>& inputs) {
    std::vector<fs::path> out;
    for (const auto& in : inputs) {
        if (fs::is_directory(in)) {
            std::vector<fs::path> found;
            for (const auto& e : fs::directory_iterator(in))
                if (e.path().extension() == ".jsonl" && e.path().filename() != files::kTrainLog) found.push_back(e.path());
            std::sort(found.begin(), found.end());
            out.insert(out.end(), found.begin(), found.end());
        } else if (fs::exists(in)) {
            out.push_back(in);
        } else {
            throw Error("missing input artifact " + in.string());
        }
    }
    return out;
}

}  // namespace

ReportResult run_report(const RunConfig& c, bool force) {
    const auto inputs = input_files(c.report.inputs.empty() ? std::vector<fs::path>{c.out_dir} : c.report.inputs);
    std::vector<std::map<std::string, json>> rows;
    std::set<std::string> seen, versions;
    ReportResult result;
    json manifest_inputs = json::array();
    for (const auto& f : inputs) {
        manifest_inputs.push_back({{"path", f.lexically_relative(c.base_dir).generic_string()}, {"sha256", sha256_file(f)}});
        for (const auto& r : read_jsonl(f)) {
            if (!seen.insert(r.dump()).second) {
                ++result.duplicates;
                continue;
            }
            versions.insert(r.at("provenance").value("tool_version", ""));
            rows.push_back(flatten(r));
        }
    }
    if (result.duplicates) spdlog::warn("report: dropped {} duplicate records", result.duplicates);
    if (rows.empty()) spdlog::warn("report: no records found; writing header-only tables");
    if (versions.size() > 1) {
        std::string list;
        for (const auto& v : versions) list += (list.empty() ? "" : ", ") + v;
        if (!force) throw Error("report: inputs come from different tool versions (" + list + "); pass --force to merge anyway");
        spdlog::warn("report: merging records from tool versions {}", list);
    }
    result.records = rows.size();

    const auto& cols = summary_columns();
    auto header = [&] {
        std::string h;
        for (std::size_t i = 0; i < cols.size(); ++i) h += (i ? "," : "") + cols[i];
        return h + "\n";
    };
    auto line = [&](const std::map<std::string, json>& row) {
        std::string s;
        for (std::size_t i = 0; i < cols.size(); ++i) s += (i ? "," : "") + csv_escape(cell(row.at(cols[i])));
        return s + "\n";
    };
    std::string summary = header();
    std::map<std::string, std::string> plots;
    for (const auto& f : figure_names()) plots[f] = header();
    for (const auto& row : rows) {
        const auto l = line(row);
        summary += l;
        for (const auto& f : figures_for(row)) plots[f] += l;
    }

    fs::create_directories(c.out_dir / "plot");
    json outputs = json::array();
    auto save = [&](const fs::path& rel_path, const std::string& text) {
        write_text(c.out_dir / rel_path, text);
        outputs.push_back({{"path", rel_path.generic_string()}, {"sha256", sha256_hex(text)}});
    };
    save(files::kSummary, summary);
    for (const auto& f : figure_names()) {
        save(fs::path("plot") / (f + ".csv"), plots[f]);
        result.plot_files.push_back((c.out_dir / "plot" / (f + ".csv")).string());
    }
    const json manifest{{"tool_version", kToolVersion},
                        {"config_hash", c.hash()},
                        {"records", result.records},
                        {"duplicates", result.duplicates},
                        {"inputs", manifest_inputs},
                        {"outputs", outputs}};
    write_text(c.out_dir / files::kManifest, manifest.dump(2) + "\n");
    spdlog::info("report: {} records from {} files", result.records, inputs.size());
    return result;
}

}  // namespace repflow::cli
