#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "cbm/experiment.hpp"

namespace fs = std::filesystem;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw cbm::ParseError("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

// Relative output paths land under $CBMKIT_OUT_ROOT when set.
std::string resolve_out_dir(const std::string& dir) {
    const char* root = std::getenv("CBMKIT_OUT_ROOT");
    if (root != nullptr && root[0] != '\0' && fs::path(dir).is_relative())
        return (fs::path(root) / dir).string();
    return dir;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cbmkit - concept bottleneck training, shift protocols and interventions"};
    app.require_subcommand(1);

    // run
    auto* run_cmd = app.add_subcommand("run", "execute an experiment grid from a JSON config");
    std::string config_path;
    std::vector<std::string> overrides;
    std::vector<std::uint64_t> seed_override;
    std::string out_override;
    std::size_t jobs_override = 0;
    run_cmd->add_option("config", config_path, "experiment config (JSON)")->required();
    run_cmd->add_option("--override", overrides, "dotted-path config override, key=value");
    run_cmd->add_option("--seed", seed_override, "replace the config's seed list");
    run_cmd->add_option("--out", out_override, "output directory");
    run_cmd->add_option("--jobs", jobs_override, "parallel grid cells");

    // histogram
    auto* hist_cmd = app.add_subcommand("histogram", "concept-probability histogram of a checkpoint");
    std::string checkpoint_path, dataset_path, hist_out = "histogram.csv";
    std::size_t bins = 10;
    hist_cmd->add_option("checkpoint", checkpoint_path, "params.json checkpoint")->required();
    hist_cmd->add_option("dataset", dataset_path, "dataset CSV")->required();
    hist_cmd->add_option("--bins", bins, "number of equal-width bins over [0,1]");
    hist_cmd->add_option("--out", hist_out, "output CSV path");

    // compare
    auto* cmp_cmd = app.add_subcommand("compare", "diff two results_summary.csv tables");
    std::string table_a, table_b, cmp_out;
    cmp_cmd->add_option("a", table_a, "first results_summary.csv")->required();
    cmp_cmd->add_option("b", table_b, "second results_summary.csv")->required();
    cmp_cmd->add_option("--out", cmp_out, "write the diff report here");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run_cmd) {
            std::string text = read_file(config_path);
            for (const auto& kv : overrides) text = cbm::apply_override(text, kv);
            cbm::ExperimentConfig config = cbm::ExperimentConfig::from_json_text(text);
            if (!seed_override.empty()) config.seeds = seed_override;
            if (!out_override.empty()) config.output_dir = out_override;
            if (jobs_override > 0) config.jobs = jobs_override;
            config.output_dir = resolve_out_dir(config.output_dir);
            const cbm::ExperimentOutcome outcome = cbm::run_experiment(config);
            std::size_t failed = 0;
            for (const auto& cell : outcome.cells)
                if (!cell.ok) ++failed;
            std::cout << "grid done: " << outcome.cells.size() - failed << "/" << outcome.cells.size()
                      << " cells ok, results in " << outcome.output_dir << " (config "
                      << outcome.config_hash << ")\n";
            return outcome.exit_code;
        }
        if (*hist_cmd) {
            const cbm::ModelParams params = cbm::load_params(checkpoint_path);
            const cbm::LabeledDataset ds = cbm::load_csv(dataset_path);
            const auto counts = cbm::concept_prob_histogram(params, ds, bins);
            cbm::write_histogram_csv(counts, resolve_out_dir(hist_out));
            std::cout << "histogram written to " << resolve_out_dir(hist_out) << "\n";
            return 0;
        }
        if (*cmp_cmd) {
            const std::string report = cbm::compare_tables(table_a, table_b, cmp_out);
            std::cout << report;
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
