#include "cbm/intervention.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "cbm/errors.hpp"

namespace cbm {

namespace {

constexpr double kProbEps = 1e-12;

std::vector<double> minmax_normalize(const std::vector<double>& v) {
    std::vector<double> out(v.size(), 0.0);
    if (v.empty()) return out;
    const auto [mn, mx] = std::minmax_element(v.begin(), v.end());
    const double range = *mx - *mn;
    if (range == 0.0) return out;  // constant component carries no ordering signal
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - *mn) / range;
    return out;
}

std::vector<double> row_of(const Tensor& m, std::size_t i) {
    std::vector<double> out(m.cols());
    for (std::size_t j = 0; j < m.cols(); ++j) out[j] = m.at(i, j);
    return out;
}

std::vector<double> column_mean(const Tensor& m) {
    std::vector<double> out(m.cols(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) out[j] += m.at(i, j);
    for (double& v : out) v /= static_cast<double>(m.rows());
    return out;
}

}  // namespace

void SupervisorProfile::validate(std::size_t num_concepts) const {
    if (!(error_rate >= 0.0 && error_rate <= 1.0))
        throw ValueError("SupervisorProfile: error_rate must be in [0,1]");
    if (!scs_gamma.empty() && scs_gamma.size() != num_concepts)
        throw ValueError("SupervisorProfile: " + std::to_string(scs_gamma.size()) +
                         " SCS scores for " + std::to_string(num_concepts) + " concepts");
    for (double g : scs_gamma)
        if (!(g >= 0.0 && g <= 1.0)) throw ValueError("SupervisorProfile: SCS scores must be in [0,1]");
}

std::vector<double> SupervisorProfile::gammas(std::size_t num_concepts) const {
    if (scs_gamma.empty()) return std::vector<double>(num_concepts, 1.0);
    return scs_gamma;
}

PolicyKind policy_from_string(const std::string& name) {
    if (name == "random") return PolicyKind::random;
    if (name == "cus") return PolicyKind::cus;
    if (name == "cws") return PolicyKind::cws;
    if (name == "scs") return PolicyKind::scs;
    if (name == "aiselect") return PolicyKind::aiselect;
    throw ValueError("unknown intervention policy '" + name + "'");
}

std::string policy_name(PolicyKind kind) {
    switch (kind) {
        case PolicyKind::random: return "random";
        case PolicyKind::cus: return "cus";
        case PolicyKind::cws: return "cws";
        case PolicyKind::scs: return "scs";
        case PolicyKind::aiselect: return "aiselect";
    }
    throw ValueError("bad policy enum");
}

void InterventionPolicy::validate() const {
    if (k1 < 0.0 || k2 < 0.0 || k3 < 0.0)
        throw ValueError("InterventionPolicy: combination weights must be >= 0");
    if (kind == PolicyKind::aiselect && t_samples < 2)
        throw ValueError("InterventionPolicy: aiselect requires t_samples >= 2");
    if (kind == PolicyKind::random && random_repeats < 1)
        throw ValueError("InterventionPolicy: random policy needs at least one ordering");
}

double binary_entropy(double p) {
    const double q = std::min(1.0 - kProbEps, std::max(kProbEps, p));
    return -q * std::log(q) - (1.0 - q) * std::log(1.0 - q);
}

Tensor compute_cus(const ModelParams& params, const Tensor& x, std::size_t t_samples, RngState& rng) {
    if (t_samples < 2) throw ValueError("compute_cus: need at least 2 MC-dropout samples");
    const std::vector<Tensor> probs = mc_dropout_forward(params, x, t_samples, rng);
    Tensor mean(probs[0].shape(), 0.0);
    for (const Tensor& p : probs)
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += p[i];
    Tensor h(mean.shape());
    for (std::size_t i = 0; i < mean.size(); ++i)
        h[i] = binary_entropy(mean[i] / static_cast<double>(t_samples));
    return h;
}

Tensor compute_cws(const ModelParams& params, const Tensor& concept_probs) {
    if (params.spec.arch != Arch::cbm)
        throw ValueError("compute_cws: task head does not consume concepts (unsupported head)");
    const Tensor& w = params.task_head.W;  // num_concepts x num_classes
    if (w.rows() != params.spec.num_concepts)
        throw ValueError("compute_cws: task head is not a linear concepts-to-classes layer");
    if (concept_probs.ndim() != 2 || concept_probs.cols() != w.rows())
        throw ShapeError("compute_cws: concept matrix shape " + shape_str(concept_probs.shape()) +
                         " does not match " + std::to_string(w.rows()) + " concepts");
    std::vector<double> abs_row_sum(w.rows(), 0.0);
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j) abs_row_sum[i] += std::abs(w.at(i, j));
    Tensor beta(concept_probs.shape());
    for (std::size_t s = 0; s < concept_probs.rows(); ++s)
        for (std::size_t i = 0; i < w.rows(); ++i)
            beta.at(s, i) = (concept_probs.at(s, i) >= 0.5 ? 1.0 : 0.0) * abs_row_sum[i];
    return beta;
}

std::vector<double> aiselect_score(const std::vector<double>& cus, const std::vector<double>& cws,
                                   const std::vector<double>& scs, double k1, double k2, double k3) {
    if (cus.size() != cws.size() || cus.size() != scs.size())
        throw ShapeError("aiselect_score: component lengths differ (" + std::to_string(cus.size()) +
                         ", " + std::to_string(cws.size()) + ", " + std::to_string(scs.size()) + ")");
    const auto hn = minmax_normalize(cus);
    const auto bn = minmax_normalize(cws);
    const auto gn = minmax_normalize(scs);
    std::vector<double> score(cus.size());
    for (std::size_t i = 0; i < score.size(); ++i) score[i] = k1 * hn[i] + k2 * bn[i] + k3 * gn[i];
    return score;
}

std::vector<std::size_t> rank_by_score(const std::vector<double>& scores) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&scores](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return order;
}

std::vector<std::size_t> select_by_threshold(const std::vector<double>& scores, double threshold) {
    std::vector<std::size_t> picked;
    for (std::size_t i : rank_by_score(scores))
        if (scores[i] >= threshold) picked.push_back(i);
    return picked;
}

std::vector<double> apply_interventions(const std::vector<double>& c_hat,
                                        const std::vector<double>& c_true,
                                        const std::vector<std::size_t>& order, std::size_t n,
                                        const SupervisorProfile& profile, RngState& rng) {
    if (c_hat.size() != c_true.size())
        throw ShapeError("apply_interventions: prediction/truth lengths differ");
    if (n > order.size())
        throw ValueError("apply_interventions: n=" + std::to_string(n) + " exceeds order length " +
                         std::to_string(order.size()));
    std::set<std::size_t> seen;
    for (std::size_t i : order) {
        if (i >= c_hat.size())
            throw ValueError("apply_interventions: concept index " + std::to_string(i) + " out of range");
        if (!seen.insert(i).second)
            throw ValueError("apply_interventions: duplicate concept index " + std::to_string(i));
    }
    std::vector<double> corrected = c_hat;
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t i = order[k];
        double bit = c_true[i] >= 0.5 ? 1.0 : 0.0;
        if (profile.error_rate > 0.0 && rng.bernoulli(profile.error_rate)) bit = 1.0 - bit;
        corrected[i] = bit;
    }
    return corrected;
}

std::vector<int> task_head_predict(const ModelParams& params, const Tensor& concepts) {
    const Tensor& w = params.task_head.W;
    const Tensor& b = params.task_head.b;
    if (concepts.ndim() != 2 || concepts.cols() != w.rows())
        throw ShapeError("task_head_predict: concept shape " + shape_str(concepts.shape()) +
                         " does not match head input " + std::to_string(w.rows()));
    std::vector<double> logits;
    matmul_kernel(concepts.data(), concepts.rows(), w.rows(), w.data(), w.cols(), logits);
    std::vector<int> pred(concepts.rows());
    for (std::size_t i = 0; i < concepts.rows(); ++i) {
        const double* row = logits.data() + i * w.cols();
        std::size_t best = 0;
        double best_v = row[0] + b[0];
        for (std::size_t j = 1; j < w.cols(); ++j) {
            const double v = row[j] + b[j];
            if (v > best_v) {
                best_v = v;
                best = j;
            }
        }
        pred[i] = static_cast<int>(best);
    }
    return pred;
}

InterventionCurve intervention_curve(const ModelParams& params, const LabeledDataset& ds,
                                     const InterventionPolicy& policy, const SupervisorProfile& profile,
                                     RngState& rng) {
    policy.validate();
    if (params.spec.arch != Arch::cbm)
        throw ValueError("intervention_curve: model has no concept bottleneck");
    const std::size_t n_samples = ds.size();
    const std::size_t a = params.spec.num_concepts;
    if (ds.num_concepts() != a)
        throw ShapeError("intervention_curve: dataset has " + std::to_string(ds.num_concepts()) +
                         " concepts, model expects " + std::to_string(a));
    profile.validate(a);

    const ForwardOutput out = forward(params, ds.x, Mode::eval, nullptr);
    const Tensor& c_hat = out.concept_probs;

    // Policy scores, computed once per dataset.
    Tensor cus, cws;
    std::vector<double> gammas = profile.gammas(a);
    const bool needs_cus = policy.kind == PolicyKind::cus || policy.kind == PolicyKind::aiselect;
    const bool needs_cws = policy.kind == PolicyKind::cws || policy.kind == PolicyKind::aiselect;
    if (needs_cus) {
        RngState cus_rng = rng.derive(0xC05);
        cus = compute_cus(params, ds.x, policy.t_samples, cus_rng);
    }
    if (needs_cws) cws = compute_cws(params, c_hat);

    std::vector<double> cus_mean, cws_mean;
    if (policy.dataset_mean_scores) {
        if (needs_cus) cus_mean = column_mean(cus);
        if (needs_cws) cws_mean = column_mean(cws);
    }

    auto scores_for_sample = [&](std::size_t i) -> std::vector<double> {
        switch (policy.kind) {
            case PolicyKind::cus:
                return policy.dataset_mean_scores ? cus_mean : row_of(cus, i);
            case PolicyKind::cws:
                return policy.dataset_mean_scores ? cws_mean : row_of(cws, i);
            case PolicyKind::scs:
                return gammas;
            case PolicyKind::aiselect:
                return aiselect_score(policy.dataset_mean_scores ? cus_mean : row_of(cus, i),
                                      policy.dataset_mean_scores ? cws_mean : row_of(cws, i), gammas,
                                      policy.k1, policy.k2, policy.k3);
            case PolicyKind::random:
                break;
        }
        return {};
    };

    const std::size_t repeats = policy.kind == PolicyKind::random ? policy.random_repeats : 1;
    RngState base_rng = rng.derive(0x1A7);

    InterventionCurve curve;
    curve.policy = policy_name(policy.kind);
    curve.dataset = ds.split;
    curve.num_intervened.resize(a + 1);
    curve.accuracy.assign(a + 1, 0.0);
    std::iota(curve.num_intervened.begin(), curve.num_intervened.end(), 0);

    Tensor corrected(Shape{n_samples, a});
    for (std::size_t r = 0; r < repeats; ++r) {
        // Per (sample, repeat): an ordering and the supervisor's error
        // outcomes, fixed up front so the n-budget prefixes nest.
        std::vector<std::vector<std::size_t>> orders(n_samples);
        std::vector<std::vector<char>> flips(n_samples);
        for (std::size_t i = 0; i < n_samples; ++i) {
            RngState sample_rng = base_rng.derive(i).derive(r);
            if (policy.kind == PolicyKind::random) {
                std::vector<std::size_t> order(a);
                std::iota(order.begin(), order.end(), 0);
                for (std::size_t j = 0; j + 1 < a; ++j) {
                    const std::size_t k = j + sample_rng.uniform_int(a - j);
                    std::swap(order[j], order[k]);
                }
                orders[i] = std::move(order);
            } else {
                orders[i] = rank_by_score(scores_for_sample(i));
            }
            flips[i].assign(a, 0);
            if (profile.error_rate > 0.0)
                for (std::size_t j = 0; j < a; ++j)
                    flips[i][j] = sample_rng.bernoulli(profile.error_rate) ? 1 : 0;
        }

        for (std::size_t i = 0; i < n_samples; ++i)
            for (std::size_t j = 0; j < a; ++j) corrected.at(i, j) = c_hat.at(i, j);
        for (std::size_t n = 0; n <= a; ++n) {
            if (n > 0) {
                // extend each sample's intervened prefix by one concept
                for (std::size_t i = 0; i < n_samples; ++i) {
                    const std::size_t idx = orders[i][n - 1];
                    double bit = ds.c.at(i, idx) >= 0.5 ? 1.0 : 0.0;
                    if (flips[i][idx]) bit = 1.0 - bit;
                    corrected.at(i, idx) = bit;
                }
            }
            const std::vector<int> pred = task_head_predict(params, corrected);
            std::size_t hits = 0;
            for (std::size_t i = 0; i < n_samples; ++i)
                if (pred[i] == ds.y[i]) ++hits;
            curve.accuracy[n] += static_cast<double>(hits) / static_cast<double>(n_samples);
        }
    }
    for (double& acc : curve.accuracy) acc /= static_cast<double>(repeats);
    return curve;
}

void save_curve_csv(const InterventionCurve& curve, std::uint64_t seed, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ParseError("save_curve_csv: cannot open " + path + " for writing");
    out << "n,accuracy,policy,seed\n";
    char buf[64];
    for (std::size_t i = 0; i < curve.num_intervened.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.6f", curve.accuracy[i]);
        out << curve.num_intervened[i] << "," << buf << "," << curve.policy << "," << seed << "\n";
    }
    if (!out) throw ParseError("save_curve_csv: write failed for " + path);
}

std::string curve_to_json(const InterventionCurve& curve, std::uint64_t seed) {
    nlohmann::json j;
    j["policy"] = curve.policy;
    j["dataset"] = curve.dataset;
    j["seed"] = seed;
    j["n"] = curve.num_intervened;
    j["accuracy"] = curve.accuracy;
    return j.dump(2);
}

}  // namespace cbm
