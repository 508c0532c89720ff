#pragma once

#include "repflow/corpus.hpp"
#include "repflow/rng.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace repflow {

/// Sizes of the lexical classes of the generated language.
struct SyntheticLanguageConfig {
    std::size_t nouns = 300;
    std::size_t adjectives = 120;
    std::size_t intransitive_verbs = 60;
    std::size_t transitive_verbs = 100;
    std::size_t adverbs = 40;
    std::size_t prepositions = 15;
    std::size_t topics = 10;
    /// Zipf exponent for within-class sampling.
    double zipf = 1.0;
    std::uint64_t lexicon_seed = 7331;
};

/// One generated sentence pair. `pos` and `ccg` annotate `source` token by token.
struct SyntheticSample {
    Sentence source;
    Sentence target;
    std::vector<std::string> pos;
    std::vector<std::string> ccg;
};

/// Small English-like language: number agreement between determiner, noun and
/// verb; topic-driven selectional preferences; relative clauses and PPs. The
/// "translation" maps every word through a bijective lexicon, chooses target
/// determiners by noun gender, postposes adjectives and makes transitive VPs
/// verb-final.
class SyntheticLanguage {
public:
    explicit SyntheticLanguage(const SyntheticLanguageConfig& config = {});

    SyntheticSample sample(Rng& rng) const;
    std::vector<SyntheticSample> generate(std::size_t n, Rng& rng) const;

    std::size_t num_source_types() const noexcept { return source_types_; }

    struct Word {
        std::string src;
        std::string tgt;
    };

private:
    struct NounEntry {
        Word sg, pl;
        std::size_t topic;
        int gender;
    };
    struct VerbEntry {
        Word sg, pl;
        std::size_t topic;
    };

    const NounEntry& pick_noun(Rng& rng, std::ptrdiff_t topic) const;
    const VerbEntry& pick_verb(Rng& rng, const std::vector<VerbEntry>& pool, std::ptrdiff_t topic) const;

    struct Out;
    struct Phrase {
        std::vector<std::string> target;
        std::size_t topic = 0;
    };
    // Each generator appends source tokens to `out` and returns the target rendering.
    Phrase gen_np(Rng& rng, Out& out, bool plural, std::ptrdiff_t topic, int depth) const;
    Phrase gen_vp(Rng& rng, Out& out, bool plural, std::size_t subj_topic, int depth) const;
    Phrase gen_clause(Rng& rng, Out& out) const;

    SyntheticLanguageConfig cfg_;
    std::vector<NounEntry> nouns_;
    std::vector<Word> adjectives_;
    std::vector<std::size_t> adjective_topic_;
    std::vector<VerbEntry> intransitive_;
    std::vector<VerbEntry> transitive_;
    std::vector<Word> adverbs_;
    std::vector<Word> prepositions_;
    std::vector<Word> det_sg_, det_pl_;
    std::vector<std::vector<std::string>> target_det_;  // [gender*2 + plural][variant]
    std::vector<Word> conjunctions_;
    Word rel_;
    std::vector<std::vector<std::size_t>> nouns_by_topic_;
    std::vector<std::vector<std::size_t>> tverbs_by_topic_, iverbs_by_topic_;
    std::size_t source_types_ = 0;
};

struct SyntheticFiles {
    std::filesystem::path source;
    std::filesystem::path target;
    std::filesystem::path pos;
    std::filesystem::path ccg;
};

/// Writes `<prefix>.src`, `<prefix>.tgt`, `<prefix>.pos.tsv` and `<prefix>.ccg.tsv`.
SyntheticFiles write_synthetic_corpus(const std::filesystem::path& prefix, const std::vector<SyntheticSample>& samples);

/// Fixed-length sentences over `vocab` symbols where each token is followed by
/// (v+1) mod V or (v+3) mod V with equal probability; the first token is uniform.
std::vector<Sentence> bigram_corpus(std::size_t vocab, std::size_t length, std::size_t n, Rng& rng);

}  // namespace repflow
