#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cbm/data.hpp"
#include "cbm/model.hpp"

namespace cbm {

// Supervisor model for simulated interventions: per-concept confidence
// scores (SCS) and the probability that a performed correction writes the
// wrong bit.
struct SupervisorProfile {
    std::vector<double> scs_gamma;  // empty -> uniform 1.0
    double error_rate = 0.0;

    void validate(std::size_t num_concepts) const;
    std::vector<double> gammas(std::size_t num_concepts) const;
};

enum class PolicyKind { random, cus, cws, scs, aiselect };

PolicyKind policy_from_string(const std::string& name);
std::string policy_name(PolicyKind kind);

struct InterventionPolicy {
    PolicyKind kind = PolicyKind::random;
    double k1 = 1.0, k2 = 1.0, k3 = 1.0;  // AISelect combination weights
    std::size_t t_samples = 20;           // MC-dropout passes for CUS
    std::size_t random_repeats = 5;       // orderings averaged by the random policy
    bool dataset_mean_scores = false;     // average scores over samples before ranking
    std::optional<double> threshold;      // I_th alternative to a fixed budget

    void validate() const;
};

struct InterventionCurve {
    std::vector<std::size_t> num_intervened;  // 0..a, strictly increasing
    std::vector<double> accuracy;
    std::string policy;
    std::string dataset;
};

// Binary entropy in nats of a probability (clamped like the losses).
double binary_entropy(double p);

// CUS: per-(sample, concept) entropy of the MC-dropout mean probability.
// Requires t_samples >= 2.
Tensor compute_cus(const ModelParams& params, const Tensor& x, std::size_t t_samples, RngState& rng);

// CWS: beta_i = 1[c_hat_i >= 0.5] * sum_j |w_ij| over the task head's
// weights. The task head must be the linear concepts-to-classes layer.
Tensor compute_cws(const ModelParams& params, const Tensor& concept_probs);

// AISelect: k1*H + k2*beta + k3*gamma per concept after min-max
// normalizing each component across the concept axis (constant components
// normalize to 0).
std::vector<double> aiselect_score(const std::vector<double>& cus, const std::vector<double>& cws,
                                   const std::vector<double>& scs, double k1, double k2, double k3);

// Descending-score concept order; ties broken by lower concept index.
std::vector<std::size_t> rank_by_score(const std::vector<double>& scores);

// Indices whose score reaches the supervisor threshold I_th, in ranked order.
std::vector<std::size_t> select_by_threshold(const std::vector<double>& scores, double threshold);

// Replaces the first n concepts of `order` with the true bit, each flipped
// with probability error_rate; remaining entries stay at the prediction.
// Inference-only; nothing is backpropagated.
std::vector<double> apply_interventions(const std::vector<double>& c_hat,
                                        const std::vector<double>& c_true,
                                        const std::vector<std::size_t>& order, std::size_t n,
                                        const SupervisorProfile& profile, RngState& rng);

// Accuracy-vs-interventions curve over n = 0..a. Per-sample rankings come
// from the policy; the random policy averages `random_repeats` orderings.
InterventionCurve intervention_curve(const ModelParams& params, const LabeledDataset& ds,
                                     const InterventionPolicy& policy, const SupervisorProfile& profile,
                                     RngState& rng);

// Task-head predictions from a batch of (possibly corrected) concept rows.
std::vector<int> task_head_predict(const ModelParams& params, const Tensor& concepts);

void save_curve_csv(const InterventionCurve& curve, std::uint64_t seed, const std::string& path);
std::string curve_to_json(const InterventionCurve& curve, std::uint64_t seed);

}  // namespace cbm
