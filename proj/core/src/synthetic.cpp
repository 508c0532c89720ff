#include "repflow/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace repflow {

namespace {

class WordForge {
public:
    WordForge(std::string onsets, std::string vowels, Rng rng)
        : onsets_(std::move(onsets)), vowels_(std::move(vowels)), rng_(rng) {}

    std::string make() {
        for (;;) {
            const auto syllables = 1 + rng_.uniform_int(3);
            std::string w;
            for (std::uint64_t s = 0; s < syllables; ++s) {
                w += onsets_[rng_.uniform_int(onsets_.size())];
                w += vowels_[rng_.uniform_int(vowels_.size())];
            }
            if (rng_.bernoulli(0.3)) w += onsets_[rng_.uniform_int(onsets_.size())];
            if (w.size() >= 3 && used_.insert(w).second) return w;
        }
    }

    /// Marks derived forms as taken so later stems cannot collide with them.
    bool reserve(const std::string& w) { return used_.insert(w).second; }

private:
    std::string onsets_;
    std::string vowels_;
    Rng rng_;
    std::set<std::string> used_;
};

std::vector<double> zipf_cdf(std::size_t n, double s) {
    std::vector<double> cdf(n);
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
        acc += 1.0 / std::pow(static_cast<double>(i) + 2.0, s);
        cdf[i] = acc;
    }
    for (auto& c : cdf) c /= acc;
    return cdf;
}

std::size_t draw(const std::vector<double>& cdf, Rng& rng) {
    const double u = rng.uniform();
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    return std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), cdf.size() - 1);
}

std::size_t zipf_draw(std::size_t n, double s, Rng& rng) {
    // Class sizes are small; recomputing per draw would dominate, so cache by size.
    thread_local std::vector<std::pair<std::pair<std::size_t, double>, std::vector<double>>> cache;
    for (const auto& [key, cdf] : cache)
        if (key.first == n && key.second == s) return draw(cdf, rng);
    cache.emplace_back(std::make_pair(n, s), zipf_cdf(n, s));
    return draw(cache.back().second, rng);
}

template <class T>
void append(std::vector<T>& dst, const std::vector<T>& src) {
    dst.insert(dst.end(), src.begin(), src.end());
}

}  // namespace

struct SyntheticLanguage::Out {
    Sentence src;
    std::vector<std::string> pos;
    std::vector<std::string> ccg;

    void push(const std::string& w, const char* tag, const char* cat) {
        src.push_back(w);
        pos.emplace_back(tag);
        ccg.emplace_back(cat);
    }
};

SyntheticLanguage::SyntheticLanguage(const SyntheticLanguageConfig& config) : cfg_(config) {
    if (cfg_.topics == 0 || cfg_.nouns < cfg_.topics || cfg_.transitive_verbs < cfg_.topics ||
        cfg_.intransitive_verbs < cfg_.topics || cfg_.adjectives == 0 || cfg_.adverbs == 0 || cfg_.prepositions == 0)
        throw InvalidArgument("synthetic language: every class needs at least one entry per topic");
    const Rng root(cfg_.lexicon_seed);
    WordForge src("bdfgklmnprstvz", "aeiou", root.substream("source-words"));
    WordForge tgt("chjkqwxy", "aeiouy", root.substream("target-words"));
    Rng assign = root.substream("assignments");

    auto word = [&] { return Word{src.make(), tgt.make()}; };

    for (std::size_t i = 0; i < cfg_.nouns; ++i) {
        NounEntry n;
        n.sg = word();
        n.pl = Word{n.sg.src + "s", n.sg.tgt + "en"};
        while (!src.reserve(n.pl.src) || !tgt.reserve(n.pl.tgt)) {
            n.sg = word();
            n.pl = Word{n.sg.src + "s", n.sg.tgt + "en"};
        }
        n.topic = i % cfg_.topics;
        n.gender = static_cast<int>(assign.uniform_int(3));
        nouns_.push_back(std::move(n));
    }
    auto make_verbs = [&](std::size_t count, std::vector<VerbEntry>& out) {
        for (std::size_t i = 0; i < count; ++i) {
            VerbEntry v;
            for (;;) {
                const auto stem = src.make();
                const auto tstem = tgt.make();
                v.pl = Word{stem, tstem + "n"};
                v.sg = Word{stem + "s", tstem + "t"};
                if (src.reserve(v.sg.src) && tgt.reserve(v.sg.tgt) && tgt.reserve(v.pl.tgt)) break;
            }
            v.topic = i % cfg_.topics;
            out.push_back(std::move(v));
        }
    };
    make_verbs(cfg_.intransitive_verbs, intransitive_);
    make_verbs(cfg_.transitive_verbs, transitive_);
    for (std::size_t i = 0; i < cfg_.adjectives; ++i) {
        adjectives_.push_back(word());
        adjective_topic_.push_back(i % cfg_.topics);
    }
    for (std::size_t i = 0; i < cfg_.adverbs; ++i) adverbs_.push_back(word());
    for (std::size_t i = 0; i < cfg_.prepositions; ++i) prepositions_.push_back(word());
    for (int i = 0; i < 5; ++i) det_sg_.push_back(word());
    for (int i = 0; i < 5; ++i) det_pl_.push_back(word());
    target_det_.resize(6);
    for (auto& variants : target_det_)
        for (int i = 0; i < 5; ++i) variants.push_back(tgt.make());
    conjunctions_ = {word(), word()};
    rel_ = word();

    nouns_by_topic_.resize(cfg_.topics);
    tverbs_by_topic_.resize(cfg_.topics);
    iverbs_by_topic_.resize(cfg_.topics);
    for (std::size_t i = 0; i < nouns_.size(); ++i) nouns_by_topic_[nouns_[i].topic].push_back(i);
    for (std::size_t i = 0; i < transitive_.size(); ++i) tverbs_by_topic_[transitive_[i].topic].push_back(i);
    for (std::size_t i = 0; i < intransitive_.size(); ++i) iverbs_by_topic_[intransitive_[i].topic].push_back(i);

    source_types_ = 2 * nouns_.size() + adjectives_.size() + 2 * intransitive_.size() + 2 * transitive_.size() +
                    adverbs_.size() + prepositions_.size() + det_sg_.size() + det_pl_.size() + conjunctions_.size() + 1;
}

const SyntheticLanguage::NounEntry& SyntheticLanguage::pick_noun(Rng& rng, std::ptrdiff_t topic) const {
    if (topic >= 0 && rng.bernoulli(0.8)) {
        const auto& pool = nouns_by_topic_[static_cast<std::size_t>(topic)];
        return nouns_[pool[zipf_draw(pool.size(), cfg_.zipf, rng)]];
    }
    return nouns_[zipf_draw(nouns_.size(), cfg_.zipf, rng)];
}

const SyntheticLanguage::VerbEntry& SyntheticLanguage::pick_verb(Rng& rng, const std::vector<VerbEntry>& pool,
                                                                   std::ptrdiff_t topic) const {
    const auto& by_topic = (&pool == &transitive_) ? tverbs_by_topic_ : iverbs_by_topic_;
    if (topic >= 0 && rng.bernoulli(0.7)) {
        const auto& idx = by_topic[static_cast<std::size_t>(topic)];
        return pool[idx[zipf_draw(idx.size(), cfg_.zipf, rng)]];
    }
    return pool[zipf_draw(pool.size(), cfg_.zipf, rng)];
}

SyntheticLanguage::Phrase SyntheticLanguage::gen_np(Rng& rng, Out& out, bool plural, std::ptrdiff_t topic,
                                                    int depth) const {
    const auto& noun = pick_noun(rng, topic);
    const auto& dets = plural ? det_pl_ : det_sg_;
    const auto det_idx = zipf_draw(dets.size(), 0.8, rng);
    std::size_t n_adj = 0;
    if (rng.bernoulli(0.35)) n_adj = rng.bernoulli(0.25) ? 2 : 1;

    Phrase np;
    np.topic = noun.topic;
    out.push(dets[det_idx].src, "DT", "NP/N");
    np.target.push_back(target_det_[static_cast<std::size_t>(noun.gender * 2 + (plural ? 1 : 0))][det_idx]);
    std::vector<std::string> adj_tgt;
    for (std::size_t a = 0; a < n_adj; ++a) {
        std::size_t idx;
        if (rng.bernoulli(0.6)) {
            // Adjectives of topic t sit at indices congruent to t.
            const auto per_topic = (adjectives_.size() + cfg_.topics - 1 - noun.topic) / cfg_.topics;
            idx = noun.topic + cfg_.topics * zipf_draw(std::max<std::size_t>(per_topic, 1), cfg_.zipf, rng);
            idx = std::min(idx, adjectives_.size() - 1);
        } else {
            idx = zipf_draw(adjectives_.size(), cfg_.zipf, rng);
        }
        out.push(adjectives_[idx].src, "JJ", "N/N");
        adj_tgt.push_back(adjectives_[idx].tgt);
    }
    const auto& form = plural ? noun.pl : noun.sg;
    out.push(form.src, plural ? "NNS" : "NN", "N");
    np.target.push_back(form.tgt);
    // Adjectives follow the noun on the target side, in reverse order.
    np.target.insert(np.target.end(), adj_tgt.rbegin(), adj_tgt.rend());

    if (depth < 2 && rng.bernoulli(0.12)) {
        const auto& prep = prepositions_[zipf_draw(prepositions_.size(), cfg_.zipf, rng)];
        out.push(prep.src, "IN", "(NP\\NP)/NP");
        np.target.push_back(prep.tgt);
        append(np.target, gen_np(rng, out, rng.bernoulli(0.3), static_cast<std::ptrdiff_t>(noun.topic), depth + 1).target);
    } else if (depth == 0 && rng.bernoulli(0.08)) {
        out.push(rel_.src, "WDT", "(NP\\NP)/(S\\NP)");
        np.target.push_back(rel_.tgt);
        append(np.target, gen_vp(rng, out, plural, noun.topic, depth + 1).target);
    }
    return np;
}

SyntheticLanguage::Phrase SyntheticLanguage::gen_vp(Rng& rng, Out& out, bool plural, std::size_t subj_topic,
                                                    int depth) const {
    Phrase vp;
    const auto topic = static_cast<std::ptrdiff_t>(subj_topic);
    if (rng.bernoulli(0.4)) {
        const auto& v = pick_verb(rng, intransitive_, topic);
        vp.topic = v.topic;
        const auto& form = plural ? v.pl : v.sg;
        out.push(form.src, plural ? "VBP" : "VBZ", "S\\NP");
        vp.target.push_back(form.tgt);
        if (rng.bernoulli(0.3)) {
            const auto& adv = adverbs_[zipf_draw(adverbs_.size(), cfg_.zipf, rng)];
            out.push(adv.src, "RB", "(S\\NP)\\(S\\NP)");
            vp.target.push_back(adv.tgt);
        }
        if (depth < 2 && rng.bernoulli(0.2)) {
            const auto& prep = prepositions_[zipf_draw(prepositions_.size(), cfg_.zipf, rng)];
            out.push(prep.src, "IN", "((S\\NP)\\(S\\NP))/NP");
            vp.target.push_back(prep.tgt);
            append(vp.target, gen_np(rng, out, rng.bernoulli(0.3), static_cast<std::ptrdiff_t>(v.topic), depth + 1).target);
        }
    } else {
        const auto& v = pick_verb(rng, transitive_, topic);
        vp.topic = v.topic;
        const auto& form = plural ? v.pl : v.sg;
        out.push(form.src, plural ? "VBP" : "VBZ", "(S\\NP)/NP");
        // Verb-final on the target side.
        vp.target = gen_np(rng, out, rng.bernoulli(0.35), static_cast<std::ptrdiff_t>(v.topic), depth + 1).target;
        vp.target.push_back(form.tgt);
        if (rng.bernoulli(0.2)) {
            const auto& adv = adverbs_[zipf_draw(adverbs_.size(), cfg_.zipf, rng)];
            out.push(adv.src, "RB", "(S\\NP)\\(S\\NP)");
            vp.target.push_back(adv.tgt);
        }
    }
    return vp;
}

SyntheticLanguage::Phrase SyntheticLanguage::gen_clause(Rng& rng, Out& out) const {
    const bool plural = rng.bernoulli(0.35);
    Phrase clause = gen_np(rng, out, plural, -1, 0);
    append(clause.target, gen_vp(rng, out, plural, clause.topic, 0).target);
    return clause;
}

SyntheticSample SyntheticLanguage::sample(Rng& rng) const {
    Out out;
    auto tgt = gen_clause(rng, out).target;
    if (rng.bernoulli(0.15)) {
        const auto& c = conjunctions_[rng.uniform_int(conjunctions_.size())];
        out.push(c.src, "CC", "conj");
        tgt.push_back(c.tgt);
        append(tgt, gen_clause(rng, out).target);
    }
    return SyntheticSample{std::move(out.src), std::move(tgt), std::move(out.pos), std::move(out.ccg)};
}

std::vector<SyntheticSample> SyntheticLanguage::generate(std::size_t n, Rng& rng) const {
    std::vector<SyntheticSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(sample(rng));
    return out;
}

SyntheticFiles write_synthetic_corpus(const std::filesystem::path& prefix, const std::vector<SyntheticSample>& samples) {
    SyntheticFiles files{prefix.string() + ".src", prefix.string() + ".tgt", prefix.string() + ".pos.tsv",
                         prefix.string() + ".ccg.tsv"};
    std::ofstream src(files.source, std::ios::binary), tgt(files.target, std::ios::binary),
        pos(files.pos, std::ios::binary), ccg(files.ccg, std::ios::binary);
    if (!src || !tgt || !pos || !ccg) throw Error("cannot write synthetic corpus at " + prefix.string());
    auto join = [](const Sentence& s) {
        std::string line;
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) line += ' ';
            line += s[i];
        }
        return line;
    };
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        src << join(s.source) << '\n';
        tgt << join(s.target) << '\n';
        for (std::size_t t = 0; t < s.source.size(); ++t) {
            pos << i << '\t' << t << '\t' << s.pos[t] << '\n';
            ccg << i << '\t' << t << '\t' << s.ccg[t] << '\n';
        }
    }
    return files;
}

std::vector<Sentence> bigram_corpus(std::size_t vocab, std::size_t length, std::size_t n, Rng& rng) {
    if (vocab < 4 || length == 0) throw InvalidArgument("bigram_corpus: need vocab >= 4 and length >= 1");
    std::vector<Sentence> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Sentence s;
        auto v = rng.uniform_int(vocab);
        for (std::size_t t = 0; t < length; ++t) {
            s.push_back("w" + std::to_string(v));
            v = (v + (rng.bernoulli(0.5) ? 1 : 3)) % vocab;
        }
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace repflow
