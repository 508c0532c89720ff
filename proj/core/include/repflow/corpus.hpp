#pragma once

#include "repflow/common.hpp"
#include "repflow/rng.hpp"

#include <nlohmann/json_fwd.hpp>

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace repflow {

enum class Task { LM, MLM, MT };

std::string_view to_string(Task t);
Task task_from_string(std::string_view s);

using Sentence = std::vector<std::string>;
using Encoded = std::vector<TokenId>;

struct Corpus {
    std::vector<Sentence> sentences;
    /// Aligned target side; empty unless loaded in MT mode.
    std::vector<Sentence> targets;
    std::string source_path;

    bool is_parallel() const noexcept { return !targets.empty(); }
    std::size_t size() const noexcept { return sentences.size(); }
};

/// Reads one sentence per line, whitespace-split. Blank lines are dropped; in
/// parallel mode a line pair is dropped when either side is blank, and the
/// raw line counts must agree.
Corpus load_corpus(const std::filesystem::path& path,
                   const std::optional<std::filesystem::path>& target_path = std::nullopt);

/// Reserved ids are fixed: PAD=0, UNK=1, BOS=2, EOS=3, MASK=4.
class Vocab {
public:
    static constexpr TokenId kPad = 0;
    static constexpr TokenId kUnk = 1;
    static constexpr TokenId kBos = 2;
    static constexpr TokenId kEos = 3;
    static constexpr TokenId kMask = 4;
    static constexpr TokenId kNumReserved = 5;

    Vocab();

    /// Most frequent types first, ties broken lexicographically.
    static Vocab build(std::span<const Sentence> sentences, std::size_t max_size, std::size_t min_freq);

    std::size_t size() const noexcept { return tokens_.size(); }
    TokenId id(std::string_view token) const;
    const std::string& token(TokenId id) const;
    std::size_t freq(TokenId id) const { return freqs_.at(static_cast<std::size_t>(id)); }
    static bool is_reserved(TokenId id) noexcept { return id >= 0 && id < kNumReserved; }

    /// 1-based frequency rank of a non-reserved id (id kNumReserved has rank 1).
    static std::size_t rank(TokenId id) noexcept { return static_cast<std::size_t>(id - kNumReserved) + 1; }

    Encoded encode(std::span<const std::string> sentence) const;
    Sentence decode(std::span<const TokenId> ids) const;

    nlohmann::json to_json() const;
    static Vocab from_json(const nlohmann::json& j);
    void save(const std::filesystem::path& path) const;
    static Vocab load(const std::filesystem::path& path);

    bool operator==(const Vocab& other) const { return tokens_ == other.tokens_ && freqs_ == other.freqs_; }

private:
    void reindex();

    std::vector<std::string> tokens_;
    std::vector<std::size_t> freqs_;
    std::unordered_map<std::string, TokenId> index_;
};

Vocab build_vocab(const Corpus& corpus, std::size_t max_size, std::size_t min_freq);

inline Encoded encode(const Vocab& vocab, std::span<const std::string> sentence) { return vocab.encode(sentence); }

/// Padded batch. All matrices are row-major `rows x cols`. For MT the labels and
/// predict mask refer to decoder positions (`rows x dec_cols`).
struct TaskBatch {
    Task task = Task::LM;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<TokenId> input;
    /// -1 wherever predict_mask is false.
    std::vector<TokenId> labels;
    std::vector<std::uint8_t> predict_mask;

    std::size_t dec_cols = 0;
    std::vector<TokenId> decoder_input;

    TokenId input_at(std::size_t r, std::size_t c) const { return input[r * cols + c]; }
    std::size_t label_cols() const noexcept { return task == Task::MT ? dec_cols : cols; }
    TokenId label_at(std::size_t r, std::size_t c) const { return labels[r * label_cols() + c]; }
    bool predicted(std::size_t r, std::size_t c) const { return predict_mask[r * label_cols() + c] != 0; }
    std::size_t num_predicted() const;
    /// Length of the non-PAD prefix of encoder row r.
    std::size_t row_length(std::size_t r) const;
    std::size_t decoder_row_length(std::size_t r) const;
};

/// input = BOS + sentence; label[t] = input[t+1], with EOS after the last token.
TaskBatch make_lm_batch(std::span<const Encoded> sentences, std::size_t max_len);

struct MlmRates {
    double select_rate = 0.15;
    double mask_frac = 0.8;
    double rand_frac = 0.1;
};

/// input = BOS + sentence + EOS, then BERT-style corruption of non-reserved positions.
/// `vocab_size` bounds the random replacement draw to [kNumReserved, vocab_size).
TaskBatch make_mlm_batch(std::span<const Encoded> sentences, Rng& rng, std::size_t vocab_size,
                         const MlmRates& rates = {}, std::size_t max_len = 0);

struct EncodedPair {
    Encoded source;
    Encoded target;
};

/// encoder input = source; decoder input = BOS + target; labels = target + EOS.
TaskBatch make_mt_batch(std::span<const EncodedPair> pairs, std::size_t max_len);

/// Replaces each non-reserved encoder input token with a uniformly random
/// non-reserved token with probability `rate`. Labels are untouched.
/// Returns the number of replacement events.
std::size_t apply_word_dropout(TaskBatch& batch, double rate, std::size_t vocab_size, Rng& rng);

/// Number of non-reserved encoder input positions (denominator for word-dropout rates).
std::size_t count_content_positions(const TaskBatch& batch);

}  // namespace repflow
