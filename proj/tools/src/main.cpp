#include "config.hpp"
#include "pipeline.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <functional>
#include <iostream>
#include <map>

using namespace repflow;
using namespace repflow::cli;

int main(int argc, char** argv) {
    CLI::App app{"repflow: train small transformers and measure how token representations evolve across layers"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kToolVersion));

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    bool paper_scale = false;
    bool force = false;
    bool quiet = false;

    const std::map<std::string, std::pair<std::string, std::function<void(const RunConfig&)>>> stages{
        {"train", {"Train a model and write model.rfck", run_train}},
        {"extract", {"Dump per-layer activations of the analysis sentences", run_extract}},
        {"mi", {"Mutual information between clustered representations and tokens", run_mi}},
        {"cca", {"PWCCA distance to the runs listed in cca.compare", run_cca}},
        {"change", {"PWCCA distance between adjacent layers per token group", run_change}},
        {"influence", {"PWCCA distance caused by masking attention to one token", run_influence}},
        {"probe", {"Nearest-neighbor probes: identity, position, neighbors, annotations", run_probe}},
        {"report", {"Merge JSONL records into summary.csv and plot data", nullptr}},
    };
    for (const auto& [name, stage] : stages) {
        auto* sub = app.add_subcommand(name, stage.first);
        sub->add_option("--config", config_path, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "Override the global seed");
        sub->add_option("--out", out, "Override the output directory");
        sub->add_flag("--paper-scale", paper_scale, "Use the 6-layer, d_model 512, 8-head, d_ff 2048 model");
        sub->add_flag("-q,--quiet", quiet, "Only log warnings and errors");
        if (name == "report") sub->add_flag("--force", force, "Merge records written by different tool versions");
    }
    CLI11_PARSE(app, argc, argv);
    if (quiet) spdlog::set_level(spdlog::level::warn);

    const std::string name = app.get_subcommands().front()->get_name();
    try {
        Overrides ov;
        ov.seed = seed;
        if (out) ov.out_dir = std::filesystem::absolute(*out);
        ov.paper_scale = paper_scale;
        const auto config = load_config(config_path, ov);
        if (name == "report") {
            const auto r = run_report(config, force);
            std::cout << r.records << " records, " << r.duplicates << " duplicates dropped\n";
        } else {
            stages.at(name).second(config);
        }
    } catch (const ConfigError& e) {
        std::cerr << "repflow " << name << ": invalid configuration: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "repflow " << name << ": " << e.what() << "\n";
        return 1;
    }
    return 0;
}
