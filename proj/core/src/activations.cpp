#include "repflow/activations.hpp"

#include "repflow/io.hpp"
#include "repflow/parallel.hpp"

#include <cstring>
#include <fstream>
#include <limits>
#include <map>

namespace repflow {

Matrix LayerActivations::view(std::size_t layer, std::span<const std::size_t> rows) const {
    const auto& L = layers.at(layer);
    Matrix out(static_cast<Eigen::Index>(rows.size()), L.cols());
    for (std::size_t i = 0; i < rows.size(); ++i)
        out.row(static_cast<Eigen::Index>(i)) = L.row(static_cast<Eigen::Index>(rows[i])).cast<double>();
    return out;
}

Matrix LayerActivations::view(std::size_t layer) const { return layers.at(layer).cast<double>(); }

namespace {

struct Row {
    std::vector<TokenId> input;
    std::vector<TokenId> labels;
};

Row frame_row(Task task, const Encoded& s, std::size_t sentence, const ExtractOptions& o, std::size_t vocab) {
    const std::size_t n = o.max_len ? std::min(s.size(), o.max_len) : s.size();
    const Encoded cut(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(n));
    Row row;
    switch (task) {
    case Task::LM:
        row.input.push_back(Vocab::kBos);
        row.input.insert(row.input.end(), cut.begin(), cut.end());
        row.labels = cut;
        row.labels.push_back(Vocab::kEos);
        break;
    case Task::MLM:
        if (o.mlm_mode == MlmMode::Clean) {
            row.input.push_back(Vocab::kBos);
            row.input.insert(row.input.end(), cut.begin(), cut.end());
            row.input.push_back(Vocab::kEos);
            row.labels = row.input;
        } else {
            Rng rng = Rng(o.mask_seed).substream(sentence);
            const Encoded one[1] = {cut};
            const auto b = make_mlm_batch(one, rng, o.replacement_vocab ? std::min(o.replacement_vocab, vocab) : vocab, o.rates, 0);
            row.input = b.input;
            row.labels = b.labels;
        }
        break;
    case Task::MT:
        row.input = cut;
        row.labels.assign(cut.size(), -1);
        break;
    }
    return row;
}

TaskBatch pack(Task task, const std::vector<Row>& rows) {
    TaskBatch b;
    b.task = task;
    b.rows = rows.size();
    for (const auto& r : rows) b.cols = std::max(b.cols, r.input.size());
    b.input.assign(b.rows * b.cols, Vocab::kPad);
    for (std::size_t r = 0; r < rows.size(); ++r)
        std::copy(rows[r].input.begin(), rows[r].input.end(), b.input.begin() + static_cast<std::ptrdiff_t>(r * b.cols));
    if (task == Task::MT) {
        b.dec_cols = 1;
        b.decoder_input.assign(b.rows, Vocab::kBos);
        b.labels.assign(b.rows, -1);
        b.predict_mask.assign(b.rows, 0);
    } else {
        b.labels.assign(b.rows * b.cols, -1);
        b.predict_mask.assign(b.rows * b.cols, 0);
    }
    return b;
}

}  // namespace

LayerActivations extract_activations(const Model& model, std::span<const Encoded> sentences, const ExtractOptions& o) {
    const auto& cfg = model.config();
    const std::size_t top = o.max_layer.value_or(cfg.n_layers);
    if (top > cfg.n_layers) throw InvalidArgument("extract_activations: max_layer beyond the model depth");
    if (sentences.size() > std::numeric_limits<std::uint32_t>::max())
        throw InvalidArgument("extract_activations: too many sentences for the dump format");
    const std::size_t per = std::max<std::size_t>(1, o.batch_sentences);
    const std::size_t n_chunks = (sentences.size() + per - 1) / per;

    struct Chunk {
        std::vector<Occurrence> occ;
        std::vector<MatrixF> layers;
    };
    std::vector<Chunk> chunks(n_chunks);
    parallel_for(n_chunks, [&](std::size_t c) {
        const std::size_t lo = c * per, hi = std::min(sentences.size(), lo + per);
        std::vector<Row> rows;
        for (std::size_t s = lo; s < hi; ++s) {
            if (sentences[s].empty()) throw InvalidArgument("extract_activations: empty sentence " + std::to_string(s));
            rows.push_back(frame_row(cfg.task, sentences[s], s, o, cfg.src_vocab));
            if (rows.back().input.size() > std::numeric_limits<std::uint16_t>::max())
                throw InvalidArgument("extract_activations: sentence too long for the dump format");
        }
        const auto batch = pack(cfg.task, rows);
        ForwardOptions fo;
        fo.skip_logits = true;
        const auto fr = model.forward(batch, fo);
        auto& ch = chunks[c];
        for (std::size_t r = 0; r < rows.size(); ++r)
            for (std::size_t t = 0; t < rows[r].input.size(); ++t)
                ch.occ.push_back({static_cast<std::uint32_t>(lo + r), static_cast<std::uint16_t>(t), rows[r].input[t],
                                  rows[r].labels[t]});
        for (std::size_t l = 0; l <= top; ++l) ch.layers.push_back(fr.encoder_layers[l]);
    });

    LayerActivations acts;
    std::size_t total = 0;
    for (const auto& ch : chunks) total += ch.occ.size();
    acts.occurrences.reserve(total);
    acts.layers.assign(top + 1, MatrixF(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(cfg.d_model)));
    std::size_t off = 0;
    for (const auto& ch : chunks) {
        acts.occurrences.insert(acts.occurrences.end(), ch.occ.begin(), ch.occ.end());
        for (std::size_t l = 0; l <= top; ++l)
            acts.layers[l].middleRows(static_cast<Eigen::Index>(off), static_cast<Eigen::Index>(ch.occ.size())) = ch.layers[l];
        off += ch.occ.size();
    }
    return acts;
}

std::vector<std::int32_t> content_index(const LayerActivations& acts) {
    std::vector<std::int32_t> out(acts.size(), -1);
    std::uint32_t sentence = std::numeric_limits<std::uint32_t>::max();
    std::int32_t k = 0;
    for (std::size_t i = 0; i < acts.size(); ++i) {
        const auto& o = acts.occurrences[i];
        if (o.sentence_id != sentence) {
            sentence = o.sentence_id;
            k = 0;
        }
        if (!is_frame(o)) out[i] = k++;
    }
    return out;
}

std::vector<std::pair<std::size_t, std::size_t>> align_occurrences(const LayerActivations& a, const LayerActivations& b) {
    const auto ka = content_index(a);
    const auto kb = content_index(b);
    std::map<std::pair<std::uint32_t, std::int32_t>, std::size_t> index;
    for (std::size_t j = 0; j < b.size(); ++j)
        if (kb[j] >= 0) index.emplace(std::make_pair(b.occurrences[j].sentence_id, kb[j]), j);
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (ka[i] < 0) continue;
        auto it = index.find({a.occurrences[i].sentence_id, ka[i]});
        if (it != index.end()) out.emplace_back(i, it->second);
    }
    return out;
}

namespace {
constexpr char kActMagic[4] = {'R', 'F', 'A', 'C'};
}

void save_activations(const std::filesystem::path& path, const LayerActivations& acts) {
    using namespace binio;
    for (const auto& L : acts.layers)
        if (static_cast<std::size_t>(L.rows()) != acts.size() || static_cast<std::size_t>(L.cols()) != acts.d_model())
            throw InvalidArgument("save_activations: layer shapes disagree with the occurrence table");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write activation dump " + path.string());
    os.write(kActMagic, 4);
    write_u32(os, kActivationVersion);
    write_u32(os, static_cast<std::uint32_t>(acts.n_layers()));
    write_u32(os, static_cast<std::uint32_t>(acts.d_model()));
    write_u64(os, acts.size());
    for (const auto& o : acts.occurrences) {
        write_u32(os, o.sentence_id);
        write_u16(os, o.position);
        write_u32(os, static_cast<std::uint32_t>(o.input_token));
        write_i32(os, o.label_token);
    }
    for (const auto& L : acts.layers) {
        const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = L;
        write_f32(os, rm.data(), static_cast<std::size_t>(rm.size()));
    }
    if (!os) throw Error("failed writing activation dump " + path.string());
}

LayerActivations load_activations(const std::filesystem::path& path) {
    using namespace binio;
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open activation dump " + path.string());
    try {
        char magic[4];
        read_bytes(is, magic, 4);
        if (std::memcmp(magic, kActMagic, 4) != 0) throw CorruptFile("bad magic");
        const auto version = read_u32(is);
        if (version != kActivationVersion)
            throw VersionMismatch(path.string() + ": activation dump version " + std::to_string(version) + ", expected " +
                                  std::to_string(kActivationVersion));
        const auto n_layers = read_u32(is);
        const auto d = read_u32(is);
        const auto n = read_u64(is);
        const auto file_size = std::filesystem::file_size(path);
        const auto need = 24 + n * 14 + static_cast<std::uint64_t>(n_layers) * n * d * 4;
        if (n_layers == 0 || d == 0 || need != file_size) throw CorruptFile("size does not match the header");
        LayerActivations acts;
        acts.occurrences.resize(n);
        for (auto& o : acts.occurrences) {
            o.sentence_id = read_u32(is);
            o.position = read_u16(is);
            o.input_token = static_cast<std::int32_t>(read_u32(is));
            o.label_token = read_i32(is);
        }
        for (std::uint32_t l = 0; l < n_layers; ++l) {
            Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(static_cast<Eigen::Index>(n), d);
            read_f32(is, rm.data(), static_cast<std::size_t>(rm.size()));
            acts.layers.emplace_back(rm);
        }
        return acts;
    } catch (const CorruptFile& e) {
        throw CorruptFile(path.string() + ": corrupt activation dump (" + e.what() + ")");
    }
}

}  // namespace repflow
