#pragma once

#include <optional>
#include <vector>

#include "cbm/model.hpp"
#include "cbm/tensor.hpp"

namespace cbm {

// Weights of the composite objective: alpha on the concept loss, beta on
// the immediate-label loss, gamma_col on the orthogonality penalty and
// lambda_d2 on the different-concept term inside it. gamma_col keeps the
// loss weight distinct from the supervisor-confidence score, which uses
// the same letter elsewhere.
struct LossWeights {
    double alpha = 0.01;
    double beta = 0.01;
    double gamma_col = 0.01;
    double lambda_d2 = 0.05;
};

// Batch-level mean cosine similarities in the penultimate space: d1 over
// same-concept (pair, concept) combinations, d2 over differing ones. A
// sample pair whose concept vectors partially match contributes to both.
// A distance with no contributing combinations is reported absent.
struct ColBatchStats {
    std::optional<double> d1;
    std::optional<double> d2;
    std::size_t d1_count = 0;  // contributing (pair, concept) combinations
    std::size_t d2_count = 0;
};

// q: batch x d representations, c: batch x a concept matrix (entries are
// grouped by the bit c >= 0.5, so binary and noisy real-valued targets
// both work). Requires batch >= 2 and nonzero-norm rows.
ColBatchStats col_distances(const Tensor& q, const Tensor& c);

// (1 - d1) + lambda * |d2|; absent terms contribute 0.
double col_loss(const ColBatchStats& stats, double lambda_d2);

// Per-concept binary cross-entropy, summed over concepts and averaged over
// the batch. Probabilities are clamped to [1e-12, 1-1e-12] before the logs.
// 1-D inputs are treated as a single sample.
Tensor concept_ce(Tape& tape, const Tensor& c_hat, const Tensor& c);

// Squared-error variant for real-valued concept targets (concept-noise
// protocol); same sum-over-concepts, mean-over-batch normalization.
Tensor concept_squared_error(Tape& tape, const Tensor& c_hat, const Tensor& c);

// Mean over the batch of -log softmax(logits)[label].
Tensor classification_ce(Tape& tape, const Tensor& logits, const std::vector<int>& labels);

// Differentiable orthogonality penalty on q; forward value equals
// col_loss(col_distances(q, c), lambda_d2). The |d2| subgradient at
// d2 == 0 is 0.
Tensor col_penalty(Tape& tape, const Tensor& q, const Tensor& c, double lambda_d2);

struct LossBreakdown {
    double concept_term = 0.0;  // unweighted values
    double aux_term = 0.0;
    double task_term = 0.0;
    double col_term = 0.0;
    bool has_aux = false;
    bool has_col = false;
    LossWeights weights;
    double total = 0.0;

    double recombined() const {
        return weights.alpha * concept_term + (has_aux ? weights.beta * aux_term : 0.0) + task_term +
               (has_col ? weights.gamma_col * col_term : 0.0);
    }
};

struct TotalLoss {
    Tensor loss;  // scalar, recorded on the tape
    LossBreakdown breakdown;
};

// Composite objective: alpha*L_C + beta*L_y' + L_y + gamma_col*L_COL.
// The aux head must be present when beta > 0. The COL term is computed
// when gamma_col > 0 and the batch has at least two samples. With
// squared_error_concepts the concept term switches to squared error.
TotalLoss total_loss(Tape& tape, const ForwardOutput& out, const Tensor& c, const std::vector<int>& y,
                     const LossWeights& w, bool squared_error_concepts = false);

}  // namespace cbm
