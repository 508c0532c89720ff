#pragma once

#include "config.hpp"

#include "repflow/flow.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace repflow::cli {

/// Files inside a run directory.
namespace files {
inline constexpr const char* kRun = "run.json";
inline constexpr const char* kCheckpoint = "model.rfck";
inline constexpr const char* kTrainLog = "train.jsonl";
inline constexpr const char* kActs = "acts.rfac";
inline constexpr const char* kActsCorrupted = "acts_corrupted.rfac";
inline constexpr const char* kMi = "mi.jsonl";
inline constexpr const char* kCca = "cca.jsonl";
inline constexpr const char* kChange = "change.jsonl";
inline constexpr const char* kInfluence = "influence.jsonl";
inline constexpr const char* kProbe = "probe.jsonl";
inline constexpr const char* kSummary = "summary.csv";
inline constexpr const char* kManifest = "manifest.json";
}  // namespace files

/// Training and analysis sentences plus their annotations.
struct Material {
    Corpus train;
    std::vector<Sentence> analysis;
    std::optional<Annotations> pos, ccg, ccg_left, ccg_right;
    /// Input file -> SHA-256 (empty for generated corpora).
    std::vector<std::pair<std::string, std::string>> inputs;
};

Material load_material(const RunConfig& config);

void run_train(const RunConfig& config);
void run_extract(const RunConfig& config);
void run_mi(const RunConfig& config);
void run_cca(const RunConfig& config);
void run_change(const RunConfig& config);
void run_influence(const RunConfig& config);
void run_probe(const RunConfig& config);

struct ReportResult {
    std::size_t records = 0;
    std::size_t duplicates = 0;
    std::vector<std::string> plot_files;
};

/// Merges the JSONL records of the configured inputs into summary.csv, one
/// plot-data CSV per figure analogue and manifest.json. Refuses inputs written
/// by different tool versions unless `force`.
ReportResult run_report(const RunConfig& config, bool force = false);

/// Stable column order of summary.csv.
const std::vector<std::string>& summary_columns();

/// Figure analogues with a plot-data file.
const std::vector<std::string>& figure_names();

/// Shortest decimal form with 9 significant digits.
std::string format_number(double x);

std::vector<nlohmann::json> read_jsonl(const fs::path& path);

}  // namespace repflow::cli
