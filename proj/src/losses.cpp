#include "cbm/losses.hpp"

#include <algorithm>
#include <cmath>

#include "cbm/errors.hpp"

namespace cbm {

namespace {

constexpr double kProbEps = 1e-12;

double clamp_prob(double p) { return std::min(1.0 - kProbEps, std::max(kProbEps, p)); }

// Rows/columns interpretation shared by the concept losses: 2-D input is
// batch x concepts, 1-D input is one sample.
void batch_dims(const Tensor& t, std::size_t* batch, std::size_t* width) {
    if (t.ndim() == 2) {
        *batch = t.rows();
        *width = t.cols();
    } else {
        *batch = 1;
        *width = t.size();
    }
}

struct PairWeights {
    // For each unordered sample pair (i < j): the number of concepts on
    // which the pair agrees; disagreement count is `concepts - agree`.
    std::vector<std::size_t> agree;  // indexed by pair id
    std::size_t batch = 0;
    std::size_t concepts = 0;
};

PairWeights pair_weights(const Tensor& c, std::size_t batch) {
    std::size_t cb, ca;
    batch_dims(c, &cb, &ca);
    if (cb != batch)
        throw ShapeError("col: q has " + std::to_string(batch) + " rows but c has " + std::to_string(cb));
    PairWeights pw;
    pw.batch = batch;
    pw.concepts = ca;
    pw.agree.reserve(batch * (batch - 1) / 2);
    std::vector<char> bits(batch * ca);
    for (std::size_t i = 0; i < batch * ca; ++i) bits[i] = c[i] >= 0.5 ? 1 : 0;
    for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t j = i + 1; j < batch; ++j) {
            std::size_t same = 0;
            for (std::size_t a = 0; a < ca; ++a)
                if (bits[i * ca + a] == bits[j * ca + a]) ++same;
            pw.agree.push_back(same);
        }
    return pw;
}

}  // namespace

ColBatchStats col_distances(const Tensor& q, const Tensor& c) {
    if (q.ndim() != 2) throw ShapeError("col_distances: q must be 2-D, got " + shape_str(q.shape()));
    const std::size_t batch = q.rows(), dim = q.cols();
    if (batch < 2) throw ValueError("col_distances: batch must have at least 2 samples");
    std::vector<double> norms(batch);
    for (std::size_t i = 0; i < batch; ++i) {
        norms[i] = norm_kernel(q.data().data() + i * dim, dim);
        if (norms[i] == 0.0)
            throw ValueError("col_distances: degenerate zero-norm q row " + std::to_string(i));
    }
    const PairWeights pw = pair_weights(c, batch);

    double sum1 = 0.0, sum2 = 0.0;
    std::size_t n1 = 0, n2 = 0;
    std::size_t pair = 0;
    for (std::size_t i = 0; i < batch; ++i)
        for (std::size_t j = i + 1; j < batch; ++j, ++pair) {
            const double cosv =
                dot_kernel(q.data().data() + i * dim, q.data().data() + j * dim, dim) /
                (norms[i] * norms[j]);
            const std::size_t w1 = pw.agree[pair];
            const std::size_t w2 = pw.concepts - w1;
            sum1 += static_cast<double>(w1) * cosv;
            sum2 += static_cast<double>(w2) * cosv;
            n1 += w1;
            n2 += w2;
        }
    ColBatchStats stats;
    stats.d1_count = n1;
    stats.d2_count = n2;
    if (n1 > 0) stats.d1 = sum1 / static_cast<double>(n1);
    if (n2 > 0) stats.d2 = sum2 / static_cast<double>(n2);
    return stats;
}

double col_loss(const ColBatchStats& stats, double lambda_d2) {
    double loss = 0.0;
    if (stats.d1) loss += 1.0 - *stats.d1;
    if (stats.d2) loss += lambda_d2 * std::abs(*stats.d2);
    return loss;
}

Tensor concept_ce(Tape& tape, const Tensor& c_hat, const Tensor& c) {
    if (c_hat.shape() != c.shape())
        throw ShapeError("concept_ce: shape mismatch " + shape_str(c_hat.shape()) + " vs " +
                         shape_str(c.shape()));
    for (std::size_t i = 0; i < c.size(); ++i)
        if (c[i] != 0.0 && c[i] != 1.0)
            throw ValueError("concept_ce: target " + std::to_string(c[i]) + " is not binary");
    std::size_t batch, width;
    batch_dims(c_hat, &batch, &width);
    double total = 0.0;
    for (std::size_t i = 0; i < c_hat.size(); ++i) {
        const double p = clamp_prob(c_hat[i]);
        total += c[i] == 1.0 ? -std::log(p) : -std::log(1.0 - p);
    }
    const double value = total / static_cast<double>(batch);
    const int input = c_hat.recorded() ? c_hat.node() : tape.leaf(c_hat).node();
    return tape.custom(
        "concept_ce", Shape{}, {value}, {input},
        [input, chat = c_hat.data(), cval = c.data(), batch](Tape& t, const std::vector<double>& g) {
            auto& gp = t.grad_buffer(input);
            const double scale = g[0] / static_cast<double>(batch);
            for (std::size_t i = 0; i < chat.size(); ++i) {
                // zero gradient where the clamp is engaged
                if (chat[i] <= kProbEps || chat[i] >= 1.0 - kProbEps) continue;
                gp[i] += scale * (cval[i] == 1.0 ? -1.0 / chat[i] : 1.0 / (1.0 - chat[i]));
            }
        });
}

Tensor concept_squared_error(Tape& tape, const Tensor& c_hat, const Tensor& c) {
    if (c_hat.shape() != c.shape())
        throw ShapeError("concept_squared_error: shape mismatch " + shape_str(c_hat.shape()) + " vs " +
                         shape_str(c.shape()));
    std::size_t batch, width;
    batch_dims(c_hat, &batch, &width);
    double total = 0.0;
    for (std::size_t i = 0; i < c_hat.size(); ++i) {
        const double d = c_hat[i] - c[i];
        total += d * d;
    }
    const double value = total / static_cast<double>(batch);
    const int input = c_hat.recorded() ? c_hat.node() : tape.leaf(c_hat).node();
    return tape.custom("concept_squared_error", Shape{}, {value}, {input},
                       [input, chat = c_hat.data(), cval = c.data(), batch](
                           Tape& t, const std::vector<double>& g) {
                           auto& gp = t.grad_buffer(input);
                           const double scale = g[0] * 2.0 / static_cast<double>(batch);
                           for (std::size_t i = 0; i < chat.size(); ++i)
                               gp[i] += scale * (chat[i] - cval[i]);
                       });
}

Tensor classification_ce(Tape& tape, const Tensor& logits, const std::vector<int>& labels) {
    if (logits.ndim() != 2)
        throw ShapeError("classification_ce: logits must be 2-D, got " + shape_str(logits.shape()));
    const std::size_t batch = logits.rows(), classes = logits.cols();
    if (labels.size() != batch)
        throw ShapeError("classification_ce: " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(batch));
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= classes)
            throw ValueError("classification_ce: label " + std::to_string(y) + " out of range [0," +
                             std::to_string(classes) + ")");
    // log-sum-exp per row, stabilized by the row max
    std::vector<double> softmax(batch * classes);
    double total = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
        const double* row = logits.data().data() + i * classes;
        const double mx = *std::max_element(row, row + classes);
        double z = 0.0;
        for (std::size_t k = 0; k < classes; ++k) z += std::exp(row[k] - mx);
        const double log_z = mx + std::log(z);
        for (std::size_t k = 0; k < classes; ++k) softmax[i * classes + k] = std::exp(row[k] - log_z);
        total += log_z - row[labels[i]];
    }
    const double value = total / static_cast<double>(batch);
    const int input = logits.recorded() ? logits.node() : tape.leaf(logits).node();
    return tape.custom("classification_ce", Shape{}, {value}, {input},
                       [input, softmax = std::move(softmax), labels, batch, classes](
                           Tape& t, const std::vector<double>& g) {
                           auto& gl = t.grad_buffer(input);
                           const double scale = g[0] / static_cast<double>(batch);
                           for (std::size_t i = 0; i < batch; ++i)
                               for (std::size_t k = 0; k < classes; ++k) {
                                   double v = softmax[i * classes + k];
                                   if (static_cast<std::size_t>(labels[i]) == k) v -= 1.0;
                                   gl[i * classes + k] += scale * v;
                               }
                       });
}

Tensor col_penalty(Tape& tape, const Tensor& q, const Tensor& c, double lambda_d2) {
    const ColBatchStats stats = col_distances(q, c);
    const double value = col_loss(stats, lambda_d2);
    const std::size_t batch = q.rows(), dim = q.cols();
    const PairWeights pw = pair_weights(c, batch);

    const int input = q.recorded() ? q.node() : tape.leaf(q).node();
    const double d2_sign = stats.d2 ? (*stats.d2 > 0.0 ? 1.0 : (*stats.d2 < 0.0 ? -1.0 : 0.0)) : 0.0;
    const double inv_n1 = stats.d1 ? 1.0 / static_cast<double>(stats.d1_count) : 0.0;
    const double inv_n2 = stats.d2 ? 1.0 / static_cast<double>(stats.d2_count) : 0.0;

    return tape.custom(
        "col_penalty", Shape{}, {value}, {input},
        [input, qval = q.data(), pw, batch, dim, lambda_d2, d2_sign, inv_n1, inv_n2](
            Tape& t, const std::vector<double>& g) {
            auto& gq = t.grad_buffer(input);
            std::vector<double> norms(batch);
            for (std::size_t i = 0; i < batch; ++i)
                norms[i] = norm_kernel(qval.data() + i * dim, dim);
            std::size_t pair = 0;
            for (std::size_t i = 0; i < batch; ++i)
                for (std::size_t j = i + 1; j < batch; ++j, ++pair) {
                    const double w1 = static_cast<double>(pw.agree[pair]);
                    const double w2 = static_cast<double>(pw.concepts - pw.agree[pair]);
                    // d(loss)/d(cos_ij): -w1/N1 from (1 - d1), plus
                    // lambda * sign(d2) * w2/N2 from |d2|.
                    const double coeff = g[0] * (-w1 * inv_n1 + lambda_d2 * d2_sign * w2 * inv_n2);
                    if (coeff == 0.0) continue;
                    const double* qi = qval.data() + i * dim;
                    const double* qj = qval.data() + j * dim;
                    const double ni = norms[i], nj = norms[j];
                    const double cosv = dot_kernel(qi, qj, dim) / (ni * nj);
                    for (std::size_t k = 0; k < dim; ++k) {
                        gq[i * dim + k] += coeff * (qj[k] / (ni * nj) - cosv * qi[k] / (ni * ni));
                        gq[j * dim + k] += coeff * (qi[k] / (ni * nj) - cosv * qj[k] / (nj * nj));
                    }
                }
        });
}

TotalLoss total_loss(Tape& tape, const ForwardOutput& out, const Tensor& c, const std::vector<int>& y,
                     const LossWeights& w, bool squared_error_concepts) {
    if (out.concept_probs.size() == 0)
        throw ValueError("total_loss: model output has no concept predictions");
    if (w.beta > 0.0 && !out.aux_logits)
        throw ValueError("total_loss: beta > 0 requires an aux head");

    LossBreakdown bd;
    bd.weights = w;

    Tensor concept_term = squared_error_concepts ? concept_squared_error(tape, out.concept_probs, c)
                                                 : concept_ce(tape, out.concept_probs, c);
    bd.concept_term = concept_term.item();
    Tensor task_term = classification_ce(tape, out.task_logits, y);
    bd.task_term = task_term.item();

    Tensor loss = task_term;
    if (w.alpha > 0.0) loss = tape.add(loss, tape.scale(concept_term, w.alpha));
    if (out.aux_logits) {
        Tensor aux_term = classification_ce(tape, *out.aux_logits, y);
        bd.aux_term = aux_term.item();
        bd.has_aux = true;
        if (w.beta > 0.0) loss = tape.add(loss, tape.scale(aux_term, w.beta));
    }
    if (w.gamma_col > 0.0 && out.q.ndim() == 2 && out.q.rows() >= 2) {
        Tensor col_term = col_penalty(tape, out.q, c, w.lambda_d2);
        bd.col_term = col_term.item();
        bd.has_col = true;
        loss = tape.add(loss, tape.scale(col_term, w.gamma_col));
    }
    bd.total = loss.item();
    return TotalLoss{loss, bd};
}

}  // namespace cbm
