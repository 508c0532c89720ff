#include "config.hpp"

#include "hash.hpp"

#include "repflow/probes.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace repflow::cli {

using nlohmann::json;

namespace {

/// One JSON object of the configuration. Reads are type-checked against the
/// field's path; finish() rejects keys nobody read.
class Section {
public:
    Section(const json* j, std::string path, fs::path base) : j_(j), path_(std::move(path)), base_(std::move(base)) {
        if (j_ && !j_->is_object()) fail("", "must be an object");
    }

    [[noreturn]] void fail(const std::string& key, const std::string& what) const { throw ConfigError(name(key), what); }

    std::string name(const std::string& key) const {
        if (key.empty()) return path_.empty() ? "<root>" : path_;
        return path_.empty() ? key : path_ + "." + key;
    }

    const json* find(const std::string& key) {
        seen_.insert(key);
        if (!j_) return nullptr;
        const auto it = j_->find(key);
        return it == j_->end() || it->is_null() ? nullptr : &*it;
    }

    bool has(const std::string& key) const { return j_ && j_->contains(key) && !(*j_)[key].is_null(); }

    std::size_t count(const std::string& key, std::size_t def, std::size_t min = 0) {
        const json* v = find(key);
        if (!v) return def;
        if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<std::int64_t>() >= 0))
            fail(key, "must be a non-negative integer");
        const auto x = v->get<std::uint64_t>();
        if (x < min) fail(key, "must be at least " + std::to_string(min));
        return static_cast<std::size_t>(x);
    }

    double number(const std::string& key, double def, double lo, double hi) {
        const json* v = find(key);
        if (!v) return def;
        if (!v->is_number()) fail(key, "must be a number");
        const double x = v->get<double>();
        if (!(x >= lo && x <= hi)) fail(key, "must lie in [" + fmt(lo) + ", " + fmt(hi) + "]");
        return x;
    }

    bool flag(const std::string& key, bool def) {
        const json* v = find(key);
        if (!v) return def;
        if (!v->is_boolean()) fail(key, "must be true or false");
        return v->get<bool>();
    }

    std::optional<std::string> text(const std::string& key) {
        const json* v = find(key);
        if (!v) return std::nullopt;
        if (!v->is_string() || v->get<std::string>().empty()) fail(key, "must be a non-empty string");
        return v->get<std::string>();
    }

    std::optional<fs::path> path(const std::string& key) {
        const auto t = text(key);
        if (!t) return std::nullopt;
        return (base_ / *t).lexically_normal();
    }

    std::vector<fs::path> paths(const std::string& key) {
        const json* v = find(key);
        std::vector<fs::path> out;
        if (!v) return out;
        if (!v->is_array()) fail(key, "must be an array of paths");
        for (std::size_t i = 0; i < v->size(); ++i) {
            if (!(*v)[i].is_string()) fail(key + "[" + std::to_string(i) + "]", "must be a string");
            out.push_back((base_ / (*v)[i].get<std::string>()).lexically_normal());
        }
        return out;
    }

    Section child(const std::string& key) {
        const json* v = find(key);
        return Section(v, name(key), base_);
    }

    bool present() const { return j_ != nullptr; }

    void finish() const {
        if (!j_) return;
        for (const auto& [k, v] : j_->items())
            if (!seen_.count(k)) fail(k, "unknown field");
    }

private:
    static std::string fmt(double x) {
        std::ostringstream os;
        os << x;
        return os.str();
    }

    const json* j_;
    std::string path_;
    fs::path base_;
    std::set<std::string> seen_;
};

std::string rel(const fs::path& p, const fs::path& base) {
    const auto r = p.lexically_relative(base);
    return (r.empty() ? p : r).generic_string();
}

json opt_path(const std::optional<fs::path>& p, const fs::path& base) { return p ? json(rel(*p, base)) : json(nullptr); }

}  // namespace

RunConfig parse_config(const json& j, const fs::path& base_dir, const Overrides& ov) {
    RunConfig c;
    c.base_dir = base_dir;
    Section root(&j, "", base_dir);

    const auto task = root.text("task");
    if (!task) root.fail("task", "required (one of lm, mlm, mt)");
    try {
        c.task = task_from_string(*task);
    } catch (const Error&) {
        root.fail("task", "must be one of lm, mlm, mt");
    }
    c.seed = root.count("seed", 1);
    if (ov.seed) c.seed = *ov.seed;
    c.name = root.text("name").value_or(*task + "-s" + std::to_string(c.seed));
    if (ov.seed && root.has("name")) c.name += "-s" + std::to_string(c.seed);
    if (auto out = root.path("out_dir")) c.out_dir = *out;
    if (ov.out_dir) c.out_dir = *ov.out_dir;
    if (c.out_dir.empty()) root.fail("out_dir", "required (or pass --out)");

    {
        auto s = root.child("corpus");
        if (!s.present()) root.fail("corpus", "required");
        auto& k = c.corpus;
        k.source = s.path("source");
        k.target = s.path("target");
        k.analysis_source = s.path("analysis_source");
        k.analysis_sentences = s.count("analysis_sentences", k.analysis_sentences, 1);
        k.pos = s.path("pos");
        k.ccg = s.path("ccg");
        k.max_vocab = s.count("max_vocab", k.max_vocab, 1);
        k.min_freq = s.count("min_freq", k.min_freq, 1);
        auto syn = s.child("synthetic");
        if (syn.present()) {
            SyntheticSource src;
            src.train_sentences = syn.count("train_sentences", 0, 1);
            if (!syn.has("train_sentences")) syn.fail("train_sentences", "required");
            src.analysis_sentences = syn.count("analysis_sentences", 0, 1);
            if (!syn.has("analysis_sentences")) syn.fail("analysis_sentences", "required");
            src.seed = syn.count("seed", 1);
            syn.finish();
            k.synthetic = src;
            if (k.source) s.fail("source", "cannot be combined with corpus.synthetic");
        } else {
            if (!k.source) s.fail("source", "required (or give corpus.synthetic)");
            if (c.task == Task::MT && !k.target) s.fail("target", "required for the mt task");
        }
        s.finish();
    }
    {
        auto s = root.child("model");
        auto& m = c.model;
        m.task = c.task;
        m.n_layers = s.count("n_layers", m.n_layers, 1);
        m.d_model = s.count("d_model", m.d_model, 1);
        m.n_heads = s.count("n_heads", m.n_heads, 1);
        m.d_ff = s.count("d_ff", m.d_ff, 1);
        m.dropout = s.number("dropout", m.dropout, 0.0, 0.99);
        m.word_dropout = s.number("word_dropout", m.word_dropout, 0.0, 0.99);
        m.max_position = s.count("max_position", m.max_position, 2);
        m.tie_output = s.flag("tie_output", m.tie_output);
        s.finish();
        if (ov.paper_scale) {
            c.paper_scale = true;
            m.n_layers = 6;
            m.d_model = 512;
            m.n_heads = 8;
            m.d_ff = 2048;
        }
        if (m.d_model % m.n_heads != 0) s.fail("n_heads", "must divide model.d_model");
        m.seed = c.seed;
    }
    {
        auto s = root.child("train");
        auto& t = c.train;
        t.steps = s.count("steps", t.steps, 1);
        t.batch_tokens = s.count("batch_tokens", t.batch_tokens, 1);
        t.max_len = s.count("max_len", t.max_len, 1);
        if (t.max_len + 2 > c.model.max_position) s.fail("max_len", "must leave room for BOS/EOS below model.max_position");
        t.adam.lr_scale = s.number("lr_scale", t.adam.lr_scale, 0.0, 1e3);
        t.adam.warmup = s.count("warmup", t.adam.warmup, 1);
        t.log_every = s.count("log_every", t.log_every);
        t.checkpoint_every = s.count("checkpoint_every", t.checkpoint_every);
        t.mlm.select_rate = s.number("mlm_select_rate", t.mlm.select_rate, 0.0, 1.0);
        t.mlm.mask_frac = s.number("mlm_mask_frac", t.mlm.mask_frac, 0.0, 1.0);
        t.mlm.rand_frac = s.number("mlm_rand_frac", t.mlm.rand_frac, 0.0, 1.0);
        if (t.mlm.mask_frac + t.mlm.rand_frac > 1.0) s.fail("mlm_rand_frac", "mlm_mask_frac + mlm_rand_frac must not exceed 1");
        s.finish();
    }
    {
        auto s = root.child("extract");
        c.extract.batch_sentences = s.count("batch_sentences", c.extract.batch_sentences, 1);
        c.extract.mlm_corruption_passes = s.count("mlm_corruption_passes", c.extract.mlm_corruption_passes);
        c.extract.replacement_top_k = s.count("replacement_top_k", c.extract.replacement_top_k);
        s.finish();
    }
    {
        auto s = root.child("mi");
        auto& m = c.mi;
        m.top_k = s.count("top_k", m.top_k);
        m.clusters = s.count("clusters", m.clusters, 1);
        m.replaced_clusters = s.count("replaced_clusters", m.replaced_clusters, 1);
        m.batch_size = s.count("batch_size", m.batch_size, 1);
        m.epochs = s.number("epochs", m.epochs, 1e-3, 1e6);
        m.bootstrap = s.count("bootstrap", m.bootstrap);
        m.max_occurrences = s.count("max_occurrences", m.max_occurrences);
        s.finish();
    }
    {
        auto s = root.child("cca");
        c.cca.compare = s.paths("compare");
        c.cca.max_rows = s.count("max_rows", c.cca.max_rows);
        s.finish();
    }
    {
        auto s = root.child("influence");
        c.influence.max_sentences = s.count("max_sentences", c.influence.max_sentences, 1);
        c.influence.at_top_layer = s.flag("at_top_layer", c.influence.at_top_layer);
        s.finish();
    }
    {
        auto s = root.child("probe");
        auto& p = c.probe;
        p.k = s.count("k", p.k, 1);
        p.identity_k = s.count("identity_k", p.identity_k, 1);
        if (auto m = s.text("metric")) {
            try {
                p.metric = metric_from_string(*m);
            } catch (const Error&) {
                s.fail("metric", "must be cosine or euclidean");
            }
        }
        p.words = s.count("words", p.words);
        p.n_main = s.count("n_main", p.n_main, 2);
        p.n_contrastive = s.count("n_contrastive", p.n_contrastive, 1);
        p.max_rank = s.count("max_rank", p.max_rank, 1);
        p.max_rows = s.count("max_rows", p.max_rows, 2);
        s.finish();
    }
    {
        auto s = root.child("report");
        c.report.inputs = s.paths("inputs");
        s.finish();
    }
    root.finish();
    return c;
}

RunConfig load_config(const fs::path& path, const Overrides& overrides) {
    std::ifstream in(path);
    if (!in) throw ConfigError("--config", "cannot open " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("--config", std::string("invalid JSON: ") + e.what());
    }
    return parse_config(j, fs::absolute(path).parent_path(), overrides);
}

json RunConfig::to_json() const {
    const auto& b = base_dir;
    json syn = nullptr;
    if (corpus.synthetic)
        syn = {{"train_sentences", corpus.synthetic->train_sentences},
               {"analysis_sentences", corpus.synthetic->analysis_sentences},
               {"seed", corpus.synthetic->seed}};
    auto path_list = [&](const std::vector<fs::path>& ps) {
        json a = json::array();
        for (const auto& p : ps) a.push_back(rel(p, b));
        return a;
    };
    return {
        {"name", name},
        {"task", std::string(to_string(task))},
        {"seed", seed},
        {"out_dir", out_dir.generic_string()},
        {"paper_scale", paper_scale},
        {"corpus",
         {{"source", opt_path(corpus.source, b)},
          {"target", opt_path(corpus.target, b)},
          {"analysis_source", opt_path(corpus.analysis_source, b)},
          {"analysis_sentences", corpus.analysis_sentences},
          {"pos", opt_path(corpus.pos, b)},
          {"ccg", opt_path(corpus.ccg, b)},
          {"synthetic", syn},
          {"max_vocab", corpus.max_vocab},
          {"min_freq", corpus.min_freq}}},
        {"model",
         {{"n_layers", model.n_layers},
          {"d_model", model.d_model},
          {"n_heads", model.n_heads},
          {"d_ff", model.d_ff},
          {"dropout", model.dropout},
          {"word_dropout", model.word_dropout},
          {"max_position", model.max_position},
          {"tie_output", model.tie_output}}},
        {"train",
         {{"steps", train.steps},
          {"batch_tokens", train.batch_tokens},
          {"max_len", train.max_len},
          {"lr_scale", train.adam.lr_scale},
          {"warmup", train.adam.warmup},
          {"log_every", train.log_every},
          {"checkpoint_every", train.checkpoint_every},
          {"mlm_select_rate", train.mlm.select_rate},
          {"mlm_mask_frac", train.mlm.mask_frac},
          {"mlm_rand_frac", train.mlm.rand_frac}}},
        {"extract", {{"batch_sentences", extract.batch_sentences}, {"mlm_corruption_passes", extract.mlm_corruption_passes},
                     {"replacement_top_k", extract.replacement_top_k}}},
        {"mi",
         {{"top_k", mi.top_k},
          {"clusters", mi.clusters},
          {"replaced_clusters", mi.replaced_clusters},
          {"batch_size", mi.batch_size},
          {"epochs", mi.epochs},
          {"bootstrap", mi.bootstrap},
          {"max_occurrences", mi.max_occurrences}}},
        {"cca", {{"compare", path_list(cca.compare)}, {"max_rows", cca.max_rows}}},
        {"influence", {{"max_sentences", influence.max_sentences}, {"at_top_layer", influence.at_top_layer}}},
        {"probe",
         {{"k", probe.k},
          {"identity_k", probe.identity_k},
          {"metric", std::string(repflow::to_string(probe.metric))},
          {"words", probe.words},
          {"n_main", probe.n_main},
          {"n_contrastive", probe.n_contrastive},
          {"max_rank", probe.max_rank},
          {"max_rows", probe.max_rows}}},
        {"report", {{"inputs", path_list(report.inputs)}}},
    };
}

std::string RunConfig::hash() const {
    auto j = to_json();
    j.erase("out_dir");
    return sha256_hex(j.dump());
}

}  // namespace repflow::cli
