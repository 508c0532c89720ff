#include "repflow/corpus.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

namespace repflow {

std::string_view to_string(Task t) {
    switch (t) {
        case Task::LM: return "LM";
        case Task::MLM: return "MLM";
        case Task::MT: return "MT";
    }
    return "?";
}

Task task_from_string(std::string_view s) {
    if (s == "LM" || s == "lm") return Task::LM;
    if (s == "MLM" || s == "mlm") return Task::MLM;
    if (s == "MT" || s == "mt") return Task::MT;
    throw InvalidArgument("unknown task '" + std::string(s) + "' (expected LM, MLM or MT)");
}

namespace {

bool valid_utf8(std::string_view s) {
    std::size_t i = 0;
    while (i < s.size()) {
        const auto c = static_cast<unsigned char>(s[i]);
        std::size_t extra = 0;
        std::uint32_t cp = 0;
        if (c < 0x80) {
            ++i;
            continue;
        } else if ((c & 0xE0) == 0xC0) {
            extra = 1;
            cp = c & 0x1F;
        } else if ((c & 0xF0) == 0xE0) {
            extra = 2;
            cp = c & 0x0F;
        } else if ((c & 0xF8) == 0xF0) {
            extra = 3;
            cp = c & 0x07;
        } else {
            return false;
        }
        if (i + extra >= s.size()) return false;
        for (std::size_t k = 1; k <= extra; ++k) {
            const auto cc = static_cast<unsigned char>(s[i + k]);
            if ((cc & 0xC0) != 0x80) return false;
            cp = (cp << 6) | (cc & 0x3F);
        }
        // Overlong encodings and surrogates.
        if ((extra == 1 && cp < 0x80) || (extra == 2 && cp < 0x800) || (extra == 3 && cp < 0x10000) ||
            cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF))
            return false;
        i += extra + 1;
    }
    return true;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open corpus file: " + path.string());
    std::vector<std::string> lines;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!valid_utf8(line))
            throw Error(path.string() + ":" + std::to_string(lineno) + ": invalid UTF-8");
        lines.push_back(std::move(line));
    }
    return lines;
}

Sentence split_ws(const std::string& line) {
    Sentence out;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) out.push_back(std::move(tok));
    return out;
}

}  // namespace

Corpus load_corpus(const std::filesystem::path& path, const std::optional<std::filesystem::path>& target_path) {
    Corpus corpus;
    corpus.source_path = path.string();
    const auto src = read_lines(path);
    if (!target_path) {
        for (const auto& l : src) {
            auto s = split_ws(l);
            if (!s.empty()) corpus.sentences.push_back(std::move(s));
        }
        return corpus;
    }
    const auto tgt = read_lines(*target_path);
    if (src.size() != tgt.size())
        throw Error("line count mismatch: " + path.string() + " has " + std::to_string(src.size()) + " lines, " +
                    target_path->string() + " has " + std::to_string(tgt.size()));
    for (std::size_t i = 0; i < src.size(); ++i) {
        auto s = split_ws(src[i]);
        auto t = split_ws(tgt[i]);
        if (s.empty() || t.empty()) continue;
        corpus.sentences.push_back(std::move(s));
        corpus.targets.push_back(std::move(t));
    }
    return corpus;
}

Vocab::Vocab() {
    tokens_ = {"<pad>", "<unk>", "<s>", "</s>", "<mask>"};
    freqs_.assign(tokens_.size(), 0);
    reindex();
}

void Vocab::reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<TokenId>(i));
}

Vocab Vocab::build(std::span<const Sentence> sentences, std::size_t max_size, std::size_t min_freq) {
    if (max_size <= static_cast<std::size_t>(kNumReserved))
        throw InvalidArgument("max_size must exceed the number of reserved tokens (" +
                              std::to_string(kNumReserved) + ")");
    std::map<std::string, std::size_t> counts;
    std::size_t total = 0;
    for (const auto& s : sentences)
        for (const auto& t : s) {
            ++counts[t];
            ++total;
        }
    if (total == 0) throw InvalidArgument("cannot build a vocabulary from an empty corpus");

    std::vector<std::pair<std::string, std::size_t>> entries(counts.begin(), counts.end());
    // std::map iteration is lexicographic, so a stable sort by count keeps the tie-break.
    std::stable_sort(entries.begin(), entries.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });

    Vocab v;
    for (const auto& [tok, n] : entries) {
        if (v.tokens_.size() >= max_size) break;
        if (n < min_freq) break;
        v.tokens_.push_back(tok);
        v.freqs_.push_back(n);
    }
    v.reindex();
    return v;
}

Vocab build_vocab(const Corpus& corpus, std::size_t max_size, std::size_t min_freq) {
    return Vocab::build(corpus.sentences, max_size, min_freq);
}

TokenId Vocab::id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
        throw InvalidArgument("token id out of range: " + std::to_string(id));
    return tokens_[static_cast<std::size_t>(id)];
}

Encoded Vocab::encode(std::span<const std::string> sentence) const {
    Encoded out;
    out.reserve(sentence.size());
    for (const auto& t : sentence) out.push_back(id(t));
    return out;
}

Sentence Vocab::decode(std::span<const TokenId> ids) const {
    Sentence out;
    out.reserve(ids.size());
    for (auto i : ids) out.push_back(token(i));
    return out;
}

nlohmann::json Vocab::to_json() const {
    return {{"tokens", tokens_},
            {"freqs", freqs_},
            {"reserved", {{"pad", kPad}, {"unk", kUnk}, {"bos", kBos}, {"eos", kEos}, {"mask", kMask}}}};
}

Vocab Vocab::from_json(const nlohmann::json& j) {
    Vocab v;
    try {
        v.tokens_ = j.at("tokens").get<std::vector<std::string>>();
        v.freqs_ = j.at("freqs").get<std::vector<std::size_t>>();
        const auto& r = j.at("reserved");
        if (r.at("pad").get<int>() != kPad || r.at("unk").get<int>() != kUnk || r.at("bos").get<int>() != kBos ||
            r.at("eos").get<int>() != kEos || r.at("mask").get<int>() != kMask)
            throw CorruptFile("vocab: reserved ids differ from the fixed layout");
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFile(std::string("vocab: ") + e.what());
    }
    if (v.tokens_.size() != v.freqs_.size() || v.tokens_.size() < static_cast<std::size_t>(kNumReserved))
        throw CorruptFile("vocab: tokens/freqs length mismatch");
    v.reindex();
    if (v.index_.size() != v.tokens_.size()) throw CorruptFile("vocab: duplicate tokens");
    return v;
}

void Vocab::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << to_json().dump() << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFile(path.string() + ": " + e.what());
    }
    return from_json(j);
}

std::size_t TaskBatch::num_predicted() const {
    return static_cast<std::size_t>(std::count(predict_mask.begin(), predict_mask.end(), std::uint8_t{1}));
}

std::size_t TaskBatch::row_length(std::size_t r) const {
    std::size_t n = 0;
    while (n < cols && input[r * cols + n] != Vocab::kPad) ++n;
    return n;
}

std::size_t TaskBatch::decoder_row_length(std::size_t r) const {
    std::size_t n = 0;
    while (n < dec_cols && decoder_input[r * dec_cols + n] != Vocab::kPad) ++n;
    return n;
}

namespace {

std::size_t capped(std::size_t n, std::size_t max_len) { return max_len == 0 ? n : std::min(n, max_len); }

}  // namespace

TaskBatch make_lm_batch(std::span<const Encoded> sentences, std::size_t max_len) {
    if (sentences.empty()) throw InvalidArgument("make_lm_batch: no sentences");
    TaskBatch b;
    b.task = Task::LM;
    b.rows = sentences.size();
    for (const auto& s : sentences) b.cols = std::max(b.cols, capped(s.size(), max_len) + 1);
    b.input.assign(b.rows * b.cols, Vocab::kPad);
    b.labels.assign(b.rows * b.cols, -1);
    b.predict_mask.assign(b.rows * b.cols, 0);
    for (std::size_t r = 0; r < b.rows; ++r) {
        const auto& s = sentences[r];
        const auto n = capped(s.size(), max_len);
        b.input[r * b.cols] = Vocab::kBos;
        for (std::size_t t = 0; t < n; ++t) b.input[r * b.cols + t + 1] = s[t];
        for (std::size_t t = 0; t <= n; ++t) {
            b.labels[r * b.cols + t] = t < n ? s[t] : Vocab::kEos;
            b.predict_mask[r * b.cols + t] = 1;
        }
    }
    return b;
}

TaskBatch make_mlm_batch(std::span<const Encoded> sentences, Rng& rng, std::size_t vocab_size, const MlmRates& rates,
                         std::size_t max_len) {
    if (sentences.empty()) throw InvalidArgument("make_mlm_batch: no sentences");
    auto in_unit = [](double x) { return x >= 0.0 && x <= 1.0; };
    if (!in_unit(rates.select_rate) || !in_unit(rates.mask_frac) || !in_unit(rates.rand_frac) ||
        rates.mask_frac + rates.rand_frac > 1.0 + 1e-12)
        throw InvalidArgument("make_mlm_batch: rates must lie in [0,1] with mask_frac + rand_frac <= 1");
    if (vocab_size <= static_cast<std::size_t>(Vocab::kNumReserved) && rates.rand_frac > 0)
        throw InvalidArgument("make_mlm_batch: vocabulary has no non-reserved tokens to sample");

    TaskBatch b;
    b.task = Task::MLM;
    b.rows = sentences.size();
    for (const auto& s : sentences) b.cols = std::max(b.cols, capped(s.size(), max_len) + 2);
    b.input.assign(b.rows * b.cols, Vocab::kPad);
    b.labels.assign(b.rows * b.cols, -1);
    b.predict_mask.assign(b.rows * b.cols, 0);
    const auto n_content = vocab_size - static_cast<std::size_t>(Vocab::kNumReserved);
    for (std::size_t r = 0; r < b.rows; ++r) {
        const auto& s = sentences[r];
        const auto n = capped(s.size(), max_len);
        auto* row = &b.input[r * b.cols];
        row[0] = Vocab::kBos;
        for (std::size_t t = 0; t < n; ++t) row[t + 1] = s[t];
        row[n + 1] = Vocab::kEos;
        for (std::size_t t = 1; t <= n; ++t) {
            const TokenId original = row[t];
            // Draws are consumed identically for every position so the stream
            // position depends only on the batch shape.
            const double u_select = rng.uniform();
            const double u_kind = rng.uniform();
            const auto replacement =
                static_cast<TokenId>(Vocab::kNumReserved + static_cast<TokenId>(rng.uniform_int(std::max<std::size_t>(n_content, 1))));
            if (u_select >= rates.select_rate) continue;
            b.labels[r * b.cols + t] = original;
            b.predict_mask[r * b.cols + t] = 1;
            if (u_kind < rates.mask_frac)
                row[t] = Vocab::kMask;
            else if (u_kind < rates.mask_frac + rates.rand_frac)
                row[t] = replacement;
        }
    }
    return b;
}

TaskBatch make_mt_batch(std::span<const EncodedPair> pairs, std::size_t max_len) {
    if (pairs.empty()) throw InvalidArgument("make_mt_batch: no sentence pairs");
    TaskBatch b;
    b.task = Task::MT;
    b.rows = pairs.size();
    for (const auto& p : pairs) {
        b.cols = std::max(b.cols, capped(p.source.size(), max_len));
        b.dec_cols = std::max(b.dec_cols, capped(p.target.size(), max_len) + 1);
    }
    if (b.cols == 0) throw InvalidArgument("make_mt_batch: all source sentences are empty");
    b.input.assign(b.rows * b.cols, Vocab::kPad);
    b.decoder_input.assign(b.rows * b.dec_cols, Vocab::kPad);
    b.labels.assign(b.rows * b.dec_cols, -1);
    b.predict_mask.assign(b.rows * b.dec_cols, 0);
    for (std::size_t r = 0; r < b.rows; ++r) {
        const auto& p = pairs[r];
        const auto ns = capped(p.source.size(), max_len);
        if (ns == 0) throw InvalidArgument("make_mt_batch: empty source sentence in row " + std::to_string(r));
        for (std::size_t t = 0; t < ns; ++t) b.input[r * b.cols + t] = p.source[t];
        const auto nt = capped(p.target.size(), max_len);
        b.decoder_input[r * b.dec_cols] = Vocab::kBos;
        for (std::size_t t = 0; t < nt; ++t) b.decoder_input[r * b.dec_cols + t + 1] = p.target[t];
        for (std::size_t t = 0; t <= nt; ++t) {
            b.labels[r * b.dec_cols + t] = t < nt ? p.target[t] : Vocab::kEos;
            b.predict_mask[r * b.dec_cols + t] = 1;
        }
    }
    return b;
}

std::size_t count_content_positions(const TaskBatch& batch) {
    return static_cast<std::size_t>(std::count_if(batch.input.begin(), batch.input.end(),
                                                  [](TokenId t) { return !Vocab::is_reserved(t); }));
}

std::size_t apply_word_dropout(TaskBatch& batch, double rate, std::size_t vocab_size, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw InvalidArgument("word dropout rate must lie in [0,1)");
    if (rate == 0.0) return 0;
    const auto n_content = vocab_size - static_cast<std::size_t>(Vocab::kNumReserved);
    std::size_t replaced = 0;
    for (auto& t : batch.input) {
        if (Vocab::is_reserved(t)) continue;
        if (rng.uniform() < rate) {
            t = static_cast<TokenId>(Vocab::kNumReserved + static_cast<TokenId>(rng.uniform_int(n_content)));
            ++replaced;
        }
    }
    return replaced;
}

}  // namespace repflow
