#pragma once

// Test-only oracle: central finite differences over every parameter
// element, compared against the engine's reverse-mode gradients. Kept
// independent of the tape internals on purpose; it only re-evaluates the
// loss through whatever closure the test supplies.

#include <cmath>
#include <functional>
#include <vector>

#include "cbm/model.hpp"

namespace cbmtest {

struct GradCheckOutcome {
    bool pass = true;
    double worst_rel = 0.0;
    std::size_t checked = 0;
};

// loss_value(params): fresh forward pass, returns the scalar loss.
// analytic(params): gradients per ModelParams::layers() order, W then b.
inline GradCheckOutcome check_model_gradients(
    cbm::ModelParams& params, const std::function<double(const cbm::ModelParams&)>& loss_value,
    const std::function<std::vector<cbm::Tensor>(const cbm::ModelParams&)>& analytic, double h = 1e-5,
    double rel_tol = 1e-4, double abs_tol = 1e-7) {
    GradCheckOutcome outcome;
    const std::vector<cbm::Tensor> grads = analytic(params);
    auto refs = params.layers();
    std::size_t gi = 0;
    for (auto& ref : refs) {
        for (cbm::Tensor* t : {ref.W, ref.b}) {
            const cbm::Tensor& ad = grads.at(gi++);
            for (std::size_t i = 0; i < t->size(); ++i) {
                const double saved = (*t)[i];
                (*t)[i] = saved + h;
                const double up = loss_value(params);
                (*t)[i] = saved - h;
                const double down = loss_value(params);
                (*t)[i] = saved;
                const double fd = (up - down) / (2.0 * h);
                const double err = std::abs(fd - ad[i]);
                const double denom = std::max(std::abs(fd), std::abs(ad[i]));
                const double rel = denom > 0.0 ? err / denom : 0.0;
                ++outcome.checked;
                if (err > abs_tol && rel > rel_tol) {
                    outcome.pass = false;
                    outcome.worst_rel = std::max(outcome.worst_rel, rel);
                } else if (err > abs_tol) {
                    outcome.worst_rel = std::max(outcome.worst_rel, rel);
                }
            }
        }
    }
    return outcome;
}

}  // namespace cbmtest
