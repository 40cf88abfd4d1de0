#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cbm/data.hpp"
#include "cbm/losses.hpp"
#include "cbm/model.hpp"

namespace cbm {

// independent: f on concept CE alone, g on ground-truth concepts, composed
//              at inference.
// sequential:  f first, then g on frozen f's predicted concepts.
// joint:       f and g end-to-end on alpha*L_C + L_y.
// coop:        f, h, g end-to-end on the full composite objective.
// standard:    no-concept baseline, task CE straight from the encoder.
enum class Regime { independent, sequential, joint, coop, standard };

Regime regime_from_string(const std::string& name);
std::string regime_name(Regime regime);

enum class OptimizerKind { sgd, adam };

struct TrainConfig {
    Regime regime = Regime::joint;
    OptimizerKind optimizer = OptimizerKind::sgd;
    double learning_rate = 1e-2;
    double momentum = 0.9;
    double weight_decay = 5e-5;
    std::size_t batch_size = 128;
    std::size_t max_epochs = 150;
    double plateau_factor = 0.1;
    std::size_t plateau_patience = 15;
    std::size_t early_stop_patience = 200;
    LossWeights weights;
    ClipMode clip_mode = ClipMode::none;
    std::uint64_t seed = 0;

    void validate() const;
};

// Multiplies the learning rate by `factor` after `patience` consecutive
// epochs without a strict improvement of the best validation loss; the
// counter restarts after each reduction.
class PlateauScheduler {
  public:
    PlateauScheduler(double lr, double factor, std::size_t patience)
        : lr_(lr), factor_(factor), patience_(patience) {}

    double step(double val_loss) {
        if (!has_best_ || val_loss < best_) {
            best_ = val_loss;
            has_best_ = true;
            bad_epochs_ = 0;
        } else if (++bad_epochs_ >= patience_) {
            lr_ *= factor_;
            bad_epochs_ = 0;
        }
        return lr_;
    }

    double lr() const { return lr_; }

  private:
    double lr_;
    double factor_;
    std::size_t patience_;
    double best_ = 0.0;
    bool has_best_ = false;
    std::size_t bad_epochs_ = 0;
};

struct TrainReport {
    std::vector<LossBreakdown> train_losses;  // one entry per epoch run
    std::vector<LossBreakdown> val_losses;
    std::vector<std::size_t> phase_epochs;  // per training phase (1 or 2)
    std::size_t epochs_run = 0;
    std::string stop_reason;  // "max_epochs" or "early_stop"
    double final_task_accuracy = 0.0;     // test split
    double final_concept_accuracy = 0.0;  // test split; NaN for standard arch
    double wall_time_sec = 0.0;           // informational only, not in results tables
};

struct TrainResult {
    ModelParams params;
    TrainReport report;
};

struct EvalResult {
    double task_accuracy = 0.0;
    std::optional<double> concept_accuracy;  // absent for the standard arch
};

TrainResult train(const ModelSpec& spec, const DataSplits& data, const TrainConfig& cfg);

// Task accuracy = fraction argmax(task_logits) == y; concept accuracy =
// mean of 1[(c_hat >= 0.5) == (c >= 0.5)]. `clip` selects hard concept
// inputs to g at evaluation time.
EvalResult evaluate(const ModelParams& params, const LabeledDataset& ds,
                    ClipMode clip = ClipMode::none);

std::string report_to_json(const TrainReport& report);

// Row subsets used for minibatching; exposed for reuse in tests/tools.
Tensor gather_rows(const Tensor& m, const std::vector<std::size_t>& idx);

}  // namespace cbm
