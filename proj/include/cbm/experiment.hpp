#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cbm/data.hpp"
#include "cbm/intervention.hpp"
#include "cbm/training.hpp"

namespace cbm {

inline constexpr const char* kToolVersion = "0.1.0";

// One shift protocol instance; `kind` selects which parameters apply.
struct ShiftSpec {
    std::string kind = "none";  // none|spurious|corruption|concept_noise|sparsity|duplication
    // spurious
    double p_train = kSpuriousPTrain;
    double p_out = kSpuriousPOut;
    std::size_t block_width = 4;
    // corruption
    std::string corruption = "gaussian_noise";
    double severity = 1.0;
    // concept_noise
    std::size_t num_groups = 10;
    std::vector<double> sigma_levels;
    // sparsity / duplication
    double fraction = 1.0;

    std::string label() const;  // results-table identifier, e.g. "spurious(p=0.8/0.3,w=4)"
    void validate() const;
};

struct DatasetConfig {
    bool from_csv = false;
    // generator
    std::size_t num_classes = 10;
    std::size_t num_concepts = 16;
    std::size_t input_dim = 32;
    std::size_t samples_per_class = 200;
    double concept_flip_prob = 0.1;
    double input_noise_sigma = 1.0;
    std::optional<SplitSizes> split_sizes;
    // csv
    std::string train_path, val_path, test_path;
};

struct InterventionConfig {
    bool enabled = false;
    std::vector<std::string> policies = {"random"};
    double k1 = 1.0, k2 = 1.0, k3 = 1.0;
    std::size_t t_samples = 20;
    std::size_t random_repeats = 5;
    double error_rate = 0.0;
    std::vector<double> scs_gamma;
};

struct ExperimentConfig {
    DatasetConfig dataset;
    std::vector<ShiftSpec> shifts;  // empty -> the unshifted baseline only
    // model
    std::vector<std::size_t> encoder_layers = {32};
    std::size_t penultimate_dim = 32;
    double dropout_rate = 0.2;
    // train
    std::vector<Regime> regimes = {Regime::coop};
    TrainConfig train;  // regime and seed are filled per grid cell
    InterventionConfig intervention;
    std::vector<std::uint64_t> seeds = {1};
    std::string output_dir = "out";
    std::size_t jobs = 1;

    void validate() const;
    std::string to_json_text() const;
    static ExperimentConfig from_json_text(const std::string& text);
    static ExperimentConfig load(const std::string& path);
};

// Dotted-path override applied to the raw config JSON, e.g.
// "train.learning_rate=0.02" or "seeds=[1,2,3]". Values parse as JSON
// scalars/arrays, falling back to strings.
std::string apply_override(const std::string& config_text, const std::string& key_value);

struct ResultRow {
    std::uint64_t seed = 0;
    std::string regime;
    std::string shift;
    std::string split;  // val | test_in | test_out
    double task_accuracy = 0.0;
    std::optional<double> concept_accuracy;
};

struct ResultsSummaryRow {
    std::string regime, shift, split;
    std::size_t n_seeds = 0;
    double task_mean = 0.0;
    std::optional<double> task_std;  // absent below 2 seeds
    std::optional<double> concept_mean;
    std::optional<double> concept_std;
};

struct ResultsTable {
    std::vector<ResultRow> rows;
    std::vector<ResultsSummaryRow> summary() const;
    std::string to_csv() const;
    std::string summary_csv() const;
};

struct CellStatus {
    std::string regime, shift;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    std::string directory;
};

struct ExperimentOutcome {
    ResultsTable results;
    std::vector<CellStatus> cells;
    std::string output_dir;
    std::string config_hash;
    int exit_code = 0;  // nonzero when every cell failed
};

// Executes the regimes x shifts x seeds grid: per-cell checkpoints,
// reports and intervention curves, plus results.csv / results_summary.csv
// / results.json and a manifest. Cell failures are recorded and the grid
// continues.
ExperimentOutcome run_experiment(const ExperimentConfig& config);

// Shifted view of the per-seed base data used by one grid cell; exposed
// for tests and the acceptance suite.
struct ShiftedData {
    DataSplits splits;
    std::optional<LabeledDataset> test_out;
    std::string label;
};

DataSplits build_base_splits(const ExperimentConfig& config, std::uint64_t seed);
ShiftedData apply_shift(const ShiftSpec& shift, const DataSplits& base, std::uint64_t seed,
                        std::size_t shift_index);

// Concept-probability histogram with `bins` equal-width bins over [0,1].
std::vector<std::size_t> concept_prob_histogram(const ModelParams& params, const LabeledDataset& ds,
                                                std::size_t bins);
void write_histogram_csv(const std::vector<std::size_t>& counts, const std::string& path);

// Diff of two results_summary.csv files with matching grids; returns the
// report text (also written to `out_path` when non-empty).
std::string compare_tables(const std::string& summary_a_path, const std::string& summary_b_path,
                           const std::string& out_path = "");

// write-temp-then-rename
void atomic_write(const std::string& path, const std::string& content);

std::uint64_t fnv1a_hash(const std::string& text);

}  // namespace cbm
