#include "cbm/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "cbm/errors.hpp"

namespace cbm {

namespace {

constexpr std::uint64_t kParamStream = (1ULL << 32) + 1;
constexpr std::uint64_t kPhaseTwoBase = 1ULL << 33;

struct Batch {
    Tensor x;
    Tensor c;
    std::vector<int> y;
};

Batch make_batch(const LabeledDataset& ds, const std::vector<std::size_t>& idx) {
    Batch b;
    b.x = gather_rows(ds.x, idx);
    b.c = gather_rows(ds.c, idx);
    b.y.reserve(idx.size());
    for (std::size_t i : idx) b.y.push_back(ds.y[i]);
    return b;
}

// Momentum SGD with decoupled-from-nothing classic L2: v = mu*v + (g + wd*w),
// w -= lr*v. Adam is the plain textbook variant.
class Optimizer {
  public:
    Optimizer(const TrainConfig& cfg, const std::vector<LayerRef>& layers) : cfg_(cfg) {
        for (const auto& ref : layers) {
            velocity_.emplace_back(ref.W->shape(), 0.0);
            velocity_.emplace_back(ref.b->shape(), 0.0);
            if (cfg.optimizer == OptimizerKind::adam) {
                second_.emplace_back(ref.W->shape(), 0.0);
                second_.emplace_back(ref.b->shape(), 0.0);
            }
        }
    }

    void step(const std::vector<LayerRef>& layers, const std::vector<Tensor>& grads,
              const std::vector<bool>& trainable, double lr) {
        ++t_;
        for (std::size_t li = 0; li < layers.size(); ++li) {
            if (!trainable[li]) continue;
            update(*layers[li].W, grads[2 * li], velocity_[2 * li],
                   cfg_.optimizer == OptimizerKind::adam ? &second_[2 * li] : nullptr, lr);
            update(*layers[li].b, grads[2 * li + 1], velocity_[2 * li + 1],
                   cfg_.optimizer == OptimizerKind::adam ? &second_[2 * li + 1] : nullptr, lr);
        }
    }

  private:
    void update(Tensor& w, const Tensor& g, Tensor& v, Tensor* s, double lr) {
        if (s == nullptr) {
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double grad = g[i] + cfg_.weight_decay * w[i];
                v[i] = cfg_.momentum * v[i] + grad;
                w[i] -= lr * v[i];
            }
        } else {
            constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
            const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
            const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double grad = g[i] + cfg_.weight_decay * w[i];
                v[i] = b1 * v[i] + (1.0 - b1) * grad;
                (*s)[i] = b2 * (*s)[i] + (1.0 - b2) * grad * grad;
                w[i] -= lr * (v[i] / bc1) / (std::sqrt((*s)[i] / bc2) + eps);
            }
        }
    }

    TrainConfig cfg_;
    std::vector<Tensor> velocity_;
    std::vector<Tensor> second_;
    std::size_t t_ = 0;
};

// Builds the regime loss for one batch of forward outputs.
using LossFn = std::function<TotalLoss(Tape&, const ForwardOutput&, const Batch&)>;

LossBreakdown scale_breakdown(const LossBreakdown& acc, double inv_n) {
    LossBreakdown out = acc;
    out.concept_term *= inv_n;
    out.aux_term *= inv_n;
    out.task_term *= inv_n;
    out.col_term *= inv_n;
    out.total *= inv_n;
    return out;
}

void accumulate(LossBreakdown& acc, const LossBreakdown& bd, double weight) {
    acc.concept_term += weight * bd.concept_term;
    acc.aux_term += weight * bd.aux_term;
    acc.task_term += weight * bd.task_term;
    acc.col_term += weight * bd.col_term;
    acc.total += weight * bd.total;
    acc.has_aux = acc.has_aux || bd.has_aux;
    acc.has_col = acc.has_col || bd.has_col;
    acc.weights = bd.weights;
}

std::vector<std::vector<std::size_t>> minibatches(std::size_t n, std::size_t batch_size,
                                                  RngState* shuffle_rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    if (shuffle_rng != nullptr)
        for (std::size_t i = 0; i + 1 < n; ++i) {
            const std::size_t j = i + shuffle_rng->uniform_int(n - i);
            std::swap(order[i], order[j]);
        }
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t end = std::min(n, start + batch_size);
        batches.emplace_back(order.begin() + start, order.begin() + end);
    }
    return batches;
}

// One phase of minibatch training over a subset of layers. Scheduler and
// early stopping run on the phase's validation loss.
struct PhaseResult {
    std::vector<LossBreakdown> train_losses;
    std::vector<LossBreakdown> val_losses;
    std::size_t epochs = 0;
    std::string stop_reason = "max_epochs";
};

PhaseResult run_phase(ModelParams& params, const LabeledDataset& train_ds, const LabeledDataset& val_ds,
                      const TrainConfig& cfg, const LossFn& loss_fn, Mode forward_mode,
                      ClipMode train_clip, ClipMode eval_clip,
                      const std::function<bool(const std::string&)>& trainable_role,
                      std::uint64_t stream_base) {
    RngState run_rng(cfg.seed);
    auto layer_refs = params.layers();
    std::vector<bool> trainable;
    trainable.reserve(layer_refs.size());
    for (const auto& ref : layer_refs) trainable.push_back(trainable_role(ref.role));

    Optimizer opt(cfg, layer_refs);
    PlateauScheduler scheduler(cfg.learning_rate, cfg.plateau_factor, cfg.plateau_patience);
    double best_val = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;

    PhaseResult result;
    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        RngState shuffle_rng = run_rng.derive(stream_base + 2 * epoch);
        RngState dropout_rng = run_rng.derive(stream_base + 2 * epoch + 1);

        LossBreakdown train_acc;
        double seen = 0.0;
        for (const auto& idx : minibatches(train_ds.size(), cfg.batch_size, &shuffle_rng)) {
            const Batch batch = make_batch(train_ds, idx);
            Tape tape;
            BoundParams bp = bind_params(tape, params);
            ForwardOutput out = forward_bound(tape, bp, batch.x, forward_mode, &dropout_rng, train_clip);
            TotalLoss tl = loss_fn(tape, out, batch);
            tape.backward(tl.loss);

            auto bound_refs = bp.layers();
            std::vector<Tensor> grads;
            grads.reserve(bound_refs.size() * 2);
            for (const auto& ref : bound_refs) {
                grads.push_back(tape.grad(*ref.W));
                grads.push_back(tape.grad(*ref.b));
            }
            opt.step(layer_refs, grads, trainable, scheduler.lr());

            const double w = static_cast<double>(idx.size());
            accumulate(train_acc, tl.breakdown, w);
            seen += w;
        }
        result.train_losses.push_back(scale_breakdown(train_acc, 1.0 / seen));

        LossBreakdown val_acc;
        double val_seen = 0.0;
        for (const auto& idx : minibatches(val_ds.size(), cfg.batch_size, nullptr)) {
            const Batch batch = make_batch(val_ds, idx);
            Tape tape;
            BoundParams bp = bind_params(tape, params);
            ForwardOutput out = forward_bound(tape, bp, batch.x, Mode::eval, nullptr, eval_clip);
            TotalLoss tl = loss_fn(tape, out, batch);
            const double w = static_cast<double>(idx.size());
            accumulate(val_acc, tl.breakdown, w);
            val_seen += w;
        }
        const LossBreakdown val_bd = scale_breakdown(val_acc, 1.0 / val_seen);
        result.val_losses.push_back(val_bd);
        ++result.epochs;

        if (val_bd.total < best_val) {
            best_val = val_bd.total;
            since_best = 0;
        } else if (++since_best >= cfg.early_stop_patience) {
            result.stop_reason = "early_stop";
            break;
        }
        scheduler.step(val_bd.total);
    }
    return result;
}

// g trained alone on a fixed concept-input matrix (ground-truth bits for
// the independent regime, frozen predictions for the sequential one).
PhaseResult run_head_phase(ModelParams& params, const Tensor& train_in, const std::vector<int>& train_y,
                           const Tensor& val_in, const std::vector<int>& val_y, const TrainConfig& cfg) {
    LabeledDataset train_ds;
    train_ds.x = train_in;
    train_ds.c = Tensor(Shape{train_in.rows(), 1}, 0.0);
    train_ds.y = train_y;
    train_ds.num_classes = params.spec.num_classes;
    LabeledDataset val_ds;
    val_ds.x = val_in;
    val_ds.c = Tensor(Shape{val_in.rows(), 1}, 0.0);
    val_ds.y = val_y;
    val_ds.num_classes = params.spec.num_classes;

    // Treat g as a standalone one-layer model over concept inputs.
    ModelSpec head_spec;
    head_spec.arch = Arch::standard;
    head_spec.input_dim = train_in.cols();
    head_spec.penultimate_dim = train_in.cols();
    head_spec.num_classes = params.spec.num_classes;
    head_spec.dropout_rate = 0.0;

    ModelParams head;
    head.spec = head_spec;
    // Identity penultimate keeps g a single linear layer over its inputs.
    head.penultimate.W = Tensor(Shape{head_spec.input_dim, head_spec.input_dim}, 0.0);
    for (std::size_t i = 0; i < head_spec.input_dim; ++i) head.penultimate.W.at(i, i) = 1.0;
    head.penultimate.b = Tensor(Shape{head_spec.input_dim}, 0.0);
    head.task_head = {params.task_head.W, params.task_head.b};

    LossFn loss_fn = [](Tape& tape, const ForwardOutput& out, const Batch& batch) {
        TotalLoss tl;
        tl.loss = classification_ce(tape, out.task_logits, batch.y);
        tl.breakdown.task_term = tl.loss.item();
        tl.breakdown.total = tl.loss.item();
        return tl;
    };
    PhaseResult result = run_phase(
        head, train_ds, val_ds, cfg, loss_fn, Mode::eval, ClipMode::none, ClipMode::none,
        [](const std::string& role) { return role == "task-head"; }, kPhaseTwoBase);
    params.task_head = head.task_head;
    return result;
}

LossFn composite_loss_fn(const LossWeights& weights, bool squared_error) {
    return [weights, squared_error](Tape& tape, const ForwardOutput& out, const Batch& batch) {
        return total_loss(tape, out, batch.c, batch.y, weights, squared_error);
    };
}

}  // namespace

Regime regime_from_string(const std::string& name) {
    if (name == "independent") return Regime::independent;
    if (name == "sequential") return Regime::sequential;
    if (name == "joint") return Regime::joint;
    if (name == "coop") return Regime::coop;
    if (name == "standard") return Regime::standard;
    throw ValueError("unknown regime '" + name + "'");
}

std::string regime_name(Regime regime) {
    switch (regime) {
        case Regime::independent: return "independent";
        case Regime::sequential: return "sequential";
        case Regime::joint: return "joint";
        case Regime::coop: return "coop";
        case Regime::standard: return "standard";
    }
    throw ValueError("bad regime enum");
}

void TrainConfig::validate() const {
    if (learning_rate < 0.0) throw ValueError("TrainConfig: learning_rate must be >= 0");
    if (batch_size < 1) throw ValueError("TrainConfig: batch_size must be >= 1");
    if (plateau_patience < 1 || early_stop_patience < 1)
        throw ValueError("TrainConfig: patience values must be positive");
    if (max_epochs < 1) throw ValueError("TrainConfig: max_epochs must be >= 1");
}

Tensor gather_rows(const Tensor& m, const std::vector<std::size_t>& idx) {
    const std::size_t cols = m.cols();
    Tensor out(Shape{idx.size(), cols});
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < cols; ++j) out.at(i, j) = m.at(idx[i], j);
    return out;
}

TrainResult train(const ModelSpec& spec, const DataSplits& data, const TrainConfig& cfg) {
    const auto start = std::chrono::steady_clock::now();
    cfg.validate();
    spec.validate();
    if (data.train.size() == 0 || data.val.size() == 0)
        throw ValueError("train: empty train or val split");
    data.train.validate();
    data.val.validate();

    switch (cfg.regime) {
        case Regime::coop:
            if (spec.arch != Arch::cbm || !spec.with_aux_head)
                throw ValueError("train: coop regime requires a cbm spec with an aux head");
            break;
        case Regime::independent:
        case Regime::sequential:
            if (spec.arch != Arch::cbm || spec.with_aux_head)
                throw ValueError("train: " + regime_name(cfg.regime) +
                                 " regime requires a plain cbm spec (no aux head)");
            break;
        case Regime::joint:
            if (spec.arch != Arch::cbm) throw ValueError("train: joint regime requires a cbm spec");
            break;
        case Regime::standard:
            if (spec.arch != Arch::standard)
                throw ValueError("train: standard regime requires the standard arch");
            break;
    }
    const bool squared_error = !data.train.concepts_binary;

    RngState param_rng = RngState(cfg.seed).derive(kParamStream);
    TrainResult result;
    result.params = init_params(spec, param_rng);

    auto all_roles = [](const std::string&) { return true; };
    // Concept-side layers: everything except the task head.
    auto f_side_roles = [](const std::string& role) { return role != "task-head"; };

    const ClipMode train_clip = cfg.clip_mode == ClipMode::train_clip ? ClipMode::train_clip
                                                                      : ClipMode::none;
    // A hard-trained bottleneck is also evaluated hard; eval_clip clips
    // only at evaluation time (Table-3 Exp1 vs Exp2 protocol).
    const ClipMode eval_clip = cfg.clip_mode != ClipMode::none ? ClipMode::eval_clip : ClipMode::none;

    TrainReport& report = result.report;
    switch (cfg.regime) {
        case Regime::joint: {
            LossWeights w = cfg.weights;
            w.beta = 0.0;  // no immediate-label term in the joint regime
            PhaseResult phase = run_phase(result.params, data.train, data.val, cfg,
                                          composite_loss_fn(w, squared_error), Mode::train, train_clip,
                                          eval_clip, all_roles, 0);
            report.train_losses = std::move(phase.train_losses);
            report.val_losses = std::move(phase.val_losses);
            report.phase_epochs = {phase.epochs};
            report.stop_reason = phase.stop_reason;
            break;
        }
        case Regime::coop: {
            PhaseResult phase = run_phase(result.params, data.train, data.val, cfg,
                                          composite_loss_fn(cfg.weights, squared_error), Mode::train,
                                          train_clip, eval_clip, all_roles, 0);
            report.train_losses = std::move(phase.train_losses);
            report.val_losses = std::move(phase.val_losses);
            report.phase_epochs = {phase.epochs};
            report.stop_reason = phase.stop_reason;
            break;
        }
        case Regime::standard: {
            LossFn loss_fn = [](Tape& tape, const ForwardOutput& out, const Batch& batch) {
                TotalLoss tl;
                tl.loss = classification_ce(tape, out.task_logits, batch.y);
                tl.breakdown.task_term = tl.loss.item();
                tl.breakdown.total = tl.loss.item();
                return tl;
            };
            PhaseResult phase = run_phase(result.params, data.train, data.val, cfg, loss_fn, Mode::train,
                                          ClipMode::none, ClipMode::none, all_roles, 0);
            report.train_losses = std::move(phase.train_losses);
            report.val_losses = std::move(phase.val_losses);
            report.phase_epochs = {phase.epochs};
            report.stop_reason = phase.stop_reason;
            break;
        }
        case Regime::independent:
        case Regime::sequential: {
            // Phase 1: concept side on concept loss (+COL when weighted).
            const LossWeights w = cfg.weights;
            LossFn f_loss = [w, squared_error](Tape& tape, const ForwardOutput& out, const Batch& batch) {
                TotalLoss tl;
                Tensor concept_term = squared_error
                                          ? concept_squared_error(tape, out.concept_probs, batch.c)
                                          : concept_ce(tape, out.concept_probs, batch.c);
                tl.breakdown.concept_term = concept_term.item();
                tl.breakdown.weights = w;
                Tensor loss = concept_term;
                if (w.gamma_col > 0.0 && batch.x.rows() >= 2) {
                    Tensor col_term = col_penalty(tape, out.q, batch.c, w.lambda_d2);
                    tl.breakdown.col_term = col_term.item();
                    tl.breakdown.has_col = true;
                    loss = tape.add(loss, tape.scale(col_term, w.gamma_col));
                }
                tl.loss = loss;
                tl.breakdown.total = loss.item();
                return tl;
            };
            PhaseResult f_phase = run_phase(result.params, data.train, data.val, cfg, f_loss, Mode::train,
                                            ClipMode::none, ClipMode::none, f_side_roles, 0);

            // Phase 2: g on ground-truth concepts (independent) or on the
            // frozen concept predictions (sequential).
            Tensor train_in, val_in;
            if (cfg.regime == Regime::independent) {
                train_in = data.train.c;
                val_in = data.val.c;
            } else {
                train_in = forward(result.params, data.train.x, Mode::eval, nullptr).concept_probs;
                val_in = forward(result.params, data.val.x, Mode::eval, nullptr).concept_probs;
            }
            PhaseResult g_phase =
                run_head_phase(result.params, train_in, data.train.y, val_in, data.val.y, cfg);

            report.train_losses = std::move(f_phase.train_losses);
            report.val_losses = std::move(f_phase.val_losses);
            report.train_losses.insert(report.train_losses.end(), g_phase.train_losses.begin(),
                                       g_phase.train_losses.end());
            report.val_losses.insert(report.val_losses.end(), g_phase.val_losses.begin(),
                                     g_phase.val_losses.end());
            report.phase_epochs = {f_phase.epochs, g_phase.epochs};
            report.stop_reason = g_phase.stop_reason;
            break;
        }
    }

    report.epochs_run = report.train_losses.size();
    const EvalResult ev = evaluate(result.params, data.test.size() > 0 ? data.test : data.val, eval_clip);
    report.final_task_accuracy = ev.task_accuracy;
    report.final_concept_accuracy =
        ev.concept_accuracy ? *ev.concept_accuracy : std::numeric_limits<double>::quiet_NaN();
    report.wall_time_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

EvalResult evaluate(const ModelParams& params, const LabeledDataset& ds, ClipMode clip) {
    if (ds.size() == 0) throw ValueError("evaluate: empty dataset");
    const ClipMode eval_clip = clip == ClipMode::none ? ClipMode::none : ClipMode::eval_clip;
    ForwardOutput out = forward(params, ds.x, Mode::eval, nullptr, eval_clip);
    const std::size_t n = ds.size(), classes = params.spec.num_classes;
    std::size_t task_hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = out.task_logits.data().data() + i * classes;
        const std::size_t pred = static_cast<std::size_t>(
            std::max_element(row, row + classes) - row);
        if (static_cast<int>(pred) == ds.y[i]) ++task_hits;
    }
    EvalResult ev;
    ev.task_accuracy = static_cast<double>(task_hits) / static_cast<double>(n);
    if (params.spec.arch == Arch::cbm) {
        const std::size_t a = ds.num_concepts();
        std::size_t hits = 0;
        for (std::size_t i = 0; i < out.concept_probs.size(); ++i) {
            const bool pred = out.concept_probs[i] >= 0.5;
            const bool truth = ds.c[i] >= 0.5;
            if (pred == truth) ++hits;
        }
        ev.concept_accuracy = static_cast<double>(hits) / static_cast<double>(n * a);
    }
    return ev;
}

std::string report_to_json(const TrainReport& report) {
    auto breakdowns = [](const std::vector<LossBreakdown>& v) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& bd : v)
            arr.push_back({{"concept", bd.concept_term},
                           {"aux", bd.aux_term},
                           {"task", bd.task_term},
                           {"col", bd.col_term},
                           {"total", bd.total}});
        return arr;
    };
    nlohmann::json j;
    j["train_losses"] = breakdowns(report.train_losses);
    j["val_losses"] = breakdowns(report.val_losses);
    j["phase_epochs"] = report.phase_epochs;
    j["epochs_run"] = report.epochs_run;
    j["stop_reason"] = report.stop_reason;
    j["final_task_accuracy"] = report.final_task_accuracy;
    if (std::isnan(report.final_concept_accuracy))
        j["final_concept_accuracy"] = nullptr;
    else
        j["final_concept_accuracy"] = report.final_concept_accuracy;
    j["wall_time_sec"] = report.wall_time_sec;
    return j.dump(2);
}

}  // namespace cbm
