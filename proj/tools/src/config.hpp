#pragma once

#include "repflow/corpus.hpp"
#include "repflow/model.hpp"
#include "repflow/numerics.hpp"
#include "repflow/train.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace repflow::cli {

namespace fs = std::filesystem;

struct SyntheticSource {
    std::size_t train_sentences = 0;
    std::size_t analysis_sentences = 0;
    std::uint64_t seed = 1;
};

struct CorpusConfig {
    std::optional<fs::path> source, target;
    /// Sentences analyzed after training; defaults to the head of `source`.
    std::optional<fs::path> analysis_source;
    std::size_t analysis_sentences = 500;
    /// Annotation TSVs keyed by analysis sentence index.
    std::optional<fs::path> pos, ccg;
    std::optional<SyntheticSource> synthetic;
    std::size_t max_vocab = 8000;
    std::size_t min_freq = 1;
};

struct ExtractConfig {
    std::size_t batch_sentences = 64;
    /// MLM only: corrupted re-encodings of the analysis set, concatenated.
    std::size_t mlm_corruption_passes = 4;
    /// Corrupted passes replace with one of the K most frequent types (0 = any type).
    std::size_t replacement_top_k = 0;
};

struct MiConfig {
    std::size_t top_k = 250;
    std::size_t clusters = 500;
    /// Cluster count for the (much smaller) random-replacement row set.
    std::size_t replaced_clusters = 100;
    std::size_t batch_size = 100;
    double epochs = 10.0;
    std::size_t bootstrap = 20;
    std::size_t max_occurrences = 0;
};

struct CcaConfig {
    /// Other run directories whose clean dumps are compared with this run.
    std::vector<fs::path> compare;
    std::size_t max_rows = 20000;
};

struct InfluenceConfig {
    std::size_t max_sentences = 500;
    bool at_top_layer = false;
};

struct ProbeConfig {
    std::size_t k = 5;
    std::size_t identity_k = 10;
    Metric metric = Metric::Cosine;
    std::size_t words = 50;
    std::size_t n_main = 200;
    std::size_t n_contrastive = 1800;
    std::size_t max_rank = 5000;
    /// Cap on rows for the position, neighbor and annotation probes.
    std::size_t max_rows = 5000;
};

struct ReportConfig {
    /// Run directories merged by `report`; defaults to the run's own output directory.
    std::vector<fs::path> inputs;
};

struct RunConfig {
    std::string name;
    Task task = Task::LM;
    std::uint64_t seed = 1;
    fs::path out_dir;
    CorpusConfig corpus;
    ModelConfig model;
    TrainOptions train;
    ExtractConfig extract;
    MiConfig mi;
    CcaConfig cca;
    InfluenceConfig influence;
    ProbeConfig probe;
    ReportConfig report;
    bool paper_scale = false;
    /// Directory of the configuration file; relative paths in to_json() are relative to it.
    fs::path base_dir;

    /// Effective configuration as JSON.
    nlohmann::json to_json() const;
    /// SHA-256 of the canonical JSON without the output directory.
    std::string hash() const;
};

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<fs::path> out_dir;
    bool paper_scale = false;
};

/// Parses and validates; relative paths resolve against `base_dir`.
/// Throws ConfigError naming the offending field.
RunConfig parse_config(const nlohmann::json& j, const fs::path& base_dir, const Overrides& overrides = {});

RunConfig load_config(const fs::path& path, const Overrides& overrides = {});

}  // namespace repflow::cli
