#pragma once

#include "repflow/corpus.hpp"
#include "repflow/model.hpp"

#include <filesystem>
#include <span>
#include <vector>

namespace repflow {

/// One encoder input position. `position` counts from the start of the encoder
/// row, so BOS (when the task adds one) sits at 0.
struct Occurrence {
    std::uint32_t sentence_id = 0;
    std::uint16_t position = 0;
    std::int32_t input_token = 0;
    /// -1 when the position carries no label.
    std::int32_t label_token = -1;

    bool operator==(const Occurrence&) const = default;
};

struct LayerActivations {
    std::vector<Occurrence> occurrences;
    /// layers[l] is (occurrences x d_model); layer 0 is embedding + position.
    std::vector<MatrixF> layers;

    std::size_t size() const noexcept { return occurrences.size(); }
    std::size_t d_model() const noexcept { return layers.empty() ? 0 : static_cast<std::size_t>(layers[0].cols()); }
    std::size_t n_layers() const noexcept { return layers.size(); }

    /// Layer `l` restricted to `rows`, converted to double.
    Matrix view(std::size_t layer, std::span<const std::size_t> rows) const;
    Matrix view(std::size_t layer) const;
};

enum class MlmMode { Clean, Corrupted };

struct ExtractOptions {
    MlmMode mlm_mode = MlmMode::Clean;
    MlmRates rates;
    /// Seeds the corruption draws in MlmMode::Corrupted; sentence s uses substream(s).
    std::uint64_t mask_seed = 0;
    /// Random replacements draw ids below this bound in MlmMode::Corrupted (0 = the model vocabulary).
    std::size_t replacement_vocab = 0;
    /// Highest layer stored; layers 0..max_layer are kept. Defaults to the top layer.
    std::optional<std::size_t> max_layer;
    std::size_t batch_sentences = 64;
    std::size_t max_len = 0;
};

/// Runs the encoder (dropout off) over `sentences` and records every encoder
/// position. LM rows are BOS + sentence with labels shifted by one; MLM rows are
/// BOS + sentence + EOS, labelled with the input itself in clean mode and with
/// the corrupted-position originals in corrupted mode; MT rows are the bare
/// source without labels.
LayerActivations extract_activations(const Model& model, std::span<const Encoded> sentences,
                                     const ExtractOptions& options = {});

/// True for rows holding sentence framing (BOS/EOS) rather than a source token.
inline bool is_frame(const Occurrence& o) noexcept { return o.input_token == Vocab::kBos || o.input_token == Vocab::kEos; }

/// Index of each row among the non-frame rows of its sentence, -1 for frame
/// rows. Gives a task-independent key (sentence_id, content index).
std::vector<std::int32_t> content_index(const LayerActivations& acts);

/// Row pairs (a_row, b_row) of occurrences present in both dumps under the
/// (sentence_id, content index) key, ordered by a_row.
std::vector<std::pair<std::size_t, std::size_t>> align_occurrences(const LayerActivations& a, const LayerActivations& b);

/// "RFAC" dump: u32 version, u32 n_layers_stored, u32 d_model, u64 n_occurrences,
/// occurrence table (u32 sentence_id, u16 position, u32 input_token, i32 label),
/// then one row-major float32 matrix per layer starting at layer 0.
void save_activations(const std::filesystem::path& path, const LayerActivations& acts);
LayerActivations load_activations(const std::filesystem::path& path);

}  // namespace repflow
