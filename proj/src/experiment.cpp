#include "cbm/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "cbm/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cbm {

namespace {

constexpr std::uint64_t kDataStream = 0xDA7A;
constexpr std::uint64_t kShiftStream = 0x5417;
constexpr std::uint64_t kCurveStream = 0xC04E;

std::string fmt_acc(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::string fmt_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

}  // namespace

std::uint64_t fnv1a_hash(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

void atomic_write(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw ParseError("atomic_write: cannot open " + tmp);
        out << content;
        if (!out) throw ParseError("atomic_write: write failed for " + tmp);
    }
    fs::rename(tmp, path);
}

// --- ShiftSpec ---

std::string ShiftSpec::label() const {
    if (kind == "none") return "none";
    if (kind == "spurious")
        return "spurious(p=" + fmt_num(p_train) + "/" + fmt_num(p_out) + ",w=" +
               std::to_string(block_width) + ")";
    if (kind == "corruption") return "corruption(" + corruption + ",s=" + fmt_num(severity) + ")";
    if (kind == "concept_noise") return "concept_noise(g=" + std::to_string(num_groups) + ")";
    if (kind == "sparsity") return "sparsity(f=" + fmt_num(fraction) + ")";
    if (kind == "duplication") return "duplication(f=" + fmt_num(fraction) + ")";
    return kind;
}

void ShiftSpec::validate() const {
    if (kind == "none") return;
    if (kind == "spurious") {
        if (!(p_train >= 0.0 && p_train <= 1.0 && p_out >= 0.0 && p_out <= 1.0))
            throw ValueError("shift: spurious probabilities must be in [0,1]");
        if (block_width < 1) throw ValueError("shift: spurious block_width must be >= 1");
        return;
    }
    if (kind == "corruption") {
        corruption_from_string(corruption);
        if (severity < 0.0) throw ValueError("shift: corruption severity must be >= 0");
        return;
    }
    if (kind == "concept_noise") {
        if (sigma_levels.size() != num_groups)
            throw ValueError("shift: concept_noise needs one sigma per group");
        return;
    }
    if (kind == "sparsity" || kind == "duplication") {
        if (!(fraction > 0.0 && fraction <= 1.0))
            throw ValueError("shift: fraction must be in (0,1]");
        return;
    }
    throw ValueError("shift: unknown kind '" + kind + "'");
}

// --- config serialization ---

void ExperimentConfig::validate() const {
    if (seeds.empty()) throw ValueError("config: at least one seed required");
    if (regimes.empty()) throw ValueError("config: at least one regime required");
    if (output_dir.empty()) throw ValueError("config: output_dir must be set");
    if (jobs < 1) throw ValueError("config: jobs must be >= 1");
    for (const auto& s : shifts) s.validate();
    train.validate();
    if (!dataset.from_csv) {
        if (dataset.num_classes < 2) throw ValueError("config: generator needs >= 2 classes");
        if (dataset.num_concepts < 1 || dataset.input_dim < 1 || dataset.samples_per_class < 1)
            throw ValueError("config: generator dimensions must be >= 1");
    } else if (dataset.train_path.empty() || dataset.val_path.empty() || dataset.test_path.empty()) {
        throw ValueError("config: csv dataset needs train/val/test paths");
    }
}

namespace {

json shift_to_json(const ShiftSpec& s) {
    json j;
    j["kind"] = s.kind;
    if (s.kind == "spurious") {
        j["p_train"] = s.p_train;
        j["p_out"] = s.p_out;
        j["block_width"] = s.block_width;
    } else if (s.kind == "corruption") {
        j["corruption"] = s.corruption;
        j["severity"] = s.severity;
    } else if (s.kind == "concept_noise") {
        j["num_groups"] = s.num_groups;
        j["sigma_levels"] = s.sigma_levels;
    } else if (s.kind == "sparsity" || s.kind == "duplication") {
        j["fraction"] = s.fraction;
    }
    return j;
}

ShiftSpec shift_from_json(const json& j) {
    ShiftSpec s;
    s.kind = j.value("kind", "none");
    s.p_train = j.value("p_train", kSpuriousPTrain);
    s.p_out = j.value("p_out", kSpuriousPOut);
    s.block_width = j.value("block_width", std::size_t{4});
    s.corruption = j.value("corruption", "gaussian_noise");
    s.severity = j.value("severity", 1.0);
    s.num_groups = j.value("num_groups", std::size_t{10});
    s.sigma_levels = j.value("sigma_levels", std::vector<double>{});
    s.fraction = j.value("fraction", 1.0);
    s.validate();
    return s;
}

}  // namespace

std::string ExperimentConfig::to_json_text() const {
    json j;
    json d;
    d["type"] = dataset.from_csv ? "csv" : "generator";
    if (dataset.from_csv) {
        d["train"] = dataset.train_path;
        d["val"] = dataset.val_path;
        d["test"] = dataset.test_path;
    } else {
        d["num_classes"] = dataset.num_classes;
        d["num_concepts"] = dataset.num_concepts;
        d["input_dim"] = dataset.input_dim;
        d["samples_per_class"] = dataset.samples_per_class;
        d["concept_flip_prob"] = dataset.concept_flip_prob;
        d["input_noise_sigma"] = dataset.input_noise_sigma;
        if (dataset.split_sizes)
            d["splits"] = {{"train", dataset.split_sizes->train},
                           {"val", dataset.split_sizes->val},
                           {"test", dataset.split_sizes->test}};
    }
    j["dataset"] = d;
    json shifts_json = json::array();
    for (const auto& s : shifts) shifts_json.push_back(shift_to_json(s));
    j["shifts"] = shifts_json;
    j["model"] = {{"encoder_layers", encoder_layers},
                  {"penultimate_dim", penultimate_dim},
                  {"dropout_rate", dropout_rate}};
    json regs = json::array();
    for (Regime r : regimes) regs.push_back(regime_name(r));
    j["train"] = {{"regimes", regs},
                  {"optimizer", train.optimizer == OptimizerKind::adam ? "adam" : "sgd"},
                  {"learning_rate", train.learning_rate},
                  {"momentum", train.momentum},
                  {"weight_decay", train.weight_decay},
                  {"batch_size", train.batch_size},
                  {"max_epochs", train.max_epochs},
                  {"plateau_factor", train.plateau_factor},
                  {"plateau_patience", train.plateau_patience},
                  {"early_stop_patience", train.early_stop_patience},
                  {"clip_mode", train.clip_mode == ClipMode::none
                                    ? "none"
                                    : (train.clip_mode == ClipMode::train_clip ? "train_clip"
                                                                               : "eval_clip")},
                  {"weights",
                   {{"alpha", train.weights.alpha},
                    {"beta", train.weights.beta},
                    {"gamma_col", train.weights.gamma_col},
                    {"lambda_d2", train.weights.lambda_d2}}}};
    j["intervention"] = {{"enabled", intervention.enabled},
                         {"policies", intervention.policies},
                         {"k1", intervention.k1},
                         {"k2", intervention.k2},
                         {"k3", intervention.k3},
                         {"t_samples", intervention.t_samples},
                         {"random_repeats", intervention.random_repeats},
                         {"error_rate", intervention.error_rate},
                         {"scs_gamma", intervention.scs_gamma}};
    j["seeds"] = seeds;
    j["output_dir"] = output_dir;
    j["jobs"] = jobs;
    return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("config: invalid JSON: ") + e.what());
    }
    ExperimentConfig cfg;
    try {
        if (j.contains("dataset")) {
            const json& d = j.at("dataset");
            cfg.dataset.from_csv = d.value("type", "generator") == "csv";
            if (cfg.dataset.from_csv) {
                cfg.dataset.train_path = d.value("train", "");
                cfg.dataset.val_path = d.value("val", "");
                cfg.dataset.test_path = d.value("test", "");
            } else {
                cfg.dataset.num_classes = d.value("num_classes", std::size_t{10});
                cfg.dataset.num_concepts = d.value("num_concepts", std::size_t{16});
                cfg.dataset.input_dim = d.value("input_dim", std::size_t{32});
                cfg.dataset.samples_per_class = d.value("samples_per_class", std::size_t{200});
                cfg.dataset.concept_flip_prob = d.value("concept_flip_prob", 0.1);
                cfg.dataset.input_noise_sigma = d.value("input_noise_sigma", 1.0);
                if (d.contains("splits")) {
                    SplitSizes sz;
                    sz.train = d.at("splits").value("train", std::size_t{0});
                    sz.val = d.at("splits").value("val", std::size_t{0});
                    sz.test = d.at("splits").value("test", std::size_t{0});
                    cfg.dataset.split_sizes = sz;
                }
            }
        }
        for (const json& s : j.value("shifts", json::array())) cfg.shifts.push_back(shift_from_json(s));
        if (j.contains("model")) {
            const json& m = j.at("model");
            cfg.encoder_layers = m.value("encoder_layers", std::vector<std::size_t>{32});
            cfg.penultimate_dim = m.value("penultimate_dim", std::size_t{32});
            cfg.dropout_rate = m.value("dropout_rate", 0.2);
        }
        if (j.contains("train")) {
            const json& t = j.at("train");
            cfg.regimes.clear();
            for (const auto& r : t.value("regimes", std::vector<std::string>{"coop"}))
                cfg.regimes.push_back(regime_from_string(r));
            cfg.train.optimizer =
                t.value("optimizer", "sgd") == "adam" ? OptimizerKind::adam : OptimizerKind::sgd;
            cfg.train.learning_rate = t.value("learning_rate", 1e-2);
            cfg.train.momentum = t.value("momentum", 0.9);
            cfg.train.weight_decay = t.value("weight_decay", 5e-5);
            cfg.train.batch_size = t.value("batch_size", std::size_t{128});
            cfg.train.max_epochs = t.value("max_epochs", std::size_t{150});
            cfg.train.plateau_factor = t.value("plateau_factor", 0.1);
            cfg.train.plateau_patience = t.value("plateau_patience", std::size_t{15});
            cfg.train.early_stop_patience = t.value("early_stop_patience", std::size_t{200});
            const std::string clip = t.value("clip_mode", "none");
            cfg.train.clip_mode = clip == "train_clip"
                                      ? ClipMode::train_clip
                                      : (clip == "eval_clip" ? ClipMode::eval_clip : ClipMode::none);
            if (clip != "none" && clip != "train_clip" && clip != "eval_clip")
                throw ValueError("config: unknown clip_mode '" + clip + "'");
            if (t.contains("weights")) {
                const json& w = t.at("weights");
                cfg.train.weights.alpha = w.value("alpha", 0.01);
                cfg.train.weights.beta = w.value("beta", 0.01);
                cfg.train.weights.gamma_col = w.value("gamma_col", 0.01);
                cfg.train.weights.lambda_d2 = w.value("lambda_d2", 0.05);
            }
        }
        if (j.contains("intervention")) {
            const json& iv = j.at("intervention");
            cfg.intervention.enabled = iv.value("enabled", false);
            cfg.intervention.policies = iv.value("policies", std::vector<std::string>{"random"});
            cfg.intervention.k1 = iv.value("k1", 1.0);
            cfg.intervention.k2 = iv.value("k2", 1.0);
            cfg.intervention.k3 = iv.value("k3", 1.0);
            cfg.intervention.t_samples = iv.value("t_samples", std::size_t{20});
            cfg.intervention.random_repeats = iv.value("random_repeats", std::size_t{5});
            cfg.intervention.error_rate = iv.value("error_rate", 0.0);
            cfg.intervention.scs_gamma = iv.value("scs_gamma", std::vector<double>{});
            for (const auto& p : cfg.intervention.policies) policy_from_string(p);
        }
        cfg.seeds = j.value("seeds", std::vector<std::uint64_t>{1});
        cfg.output_dir = j.value("output_dir", "out");
        cfg.jobs = j.value("jobs", std::size_t{1});
    } catch (const json::exception& e) {
        throw ParseError(std::string("config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("config: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_json_text(buf.str());
}

std::string apply_override(const std::string& config_text, const std::string& key_value) {
    const auto eq = key_value.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ValueError("override: expected key=value, got '" + key_value + "'");
    const std::string key = key_value.substr(0, eq);
    const std::string raw = key_value.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;  // unquoted strings
    }
    json root;
    try {
        root = json::parse(config_text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("override: config is not valid JSON: ") + e.what());
    }
    json* cur = &root;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
        if (part.empty()) throw ValueError("override: empty path segment in '" + key + "'");
        if (dot == std::string::npos) {
            (*cur)[part] = value;
            break;
        }
        cur = &(*cur)[part];
        start = dot + 1;
    }
    return root.dump(2);
}

// --- data assembly per cell ---

DataSplits build_base_splits(const ExperimentConfig& config, std::uint64_t seed) {
    if (config.dataset.from_csv) {
        DataSplits splits;
        splits.train = load_csv(config.dataset.train_path, "train");
        splits.val = load_csv(config.dataset.val_path, "val");
        splits.test = load_csv(config.dataset.test_path, "test_in");
        const std::size_t classes =
            std::max({splits.train.num_classes, splits.val.num_classes, splits.test.num_classes});
        splits.train.num_classes = splits.val.num_classes = splits.test.num_classes = classes;
        return splits;
    }
    RngState data_rng = RngState(seed).derive(kDataStream);
    GeneratorSpec spec = GeneratorSpec::make(
        config.dataset.num_classes, config.dataset.num_concepts, config.dataset.input_dim,
        config.dataset.concept_flip_prob, config.dataset.input_noise_sigma,
        config.dataset.samples_per_class, data_rng);
    const SplitSizes sizes =
        config.dataset.split_sizes ? *config.dataset.split_sizes : default_split_sizes(spec);
    return generate(spec, sizes, data_rng);
}

ShiftedData apply_shift(const ShiftSpec& shift, const DataSplits& base, std::uint64_t seed,
                        std::size_t shift_index) {
    shift.validate();
    ShiftedData out;
    out.label = shift.label();
    RngState rng = RngState(seed).derive(kShiftStream + shift_index);
    if (shift.kind == "none") {
        out.splits = base;
        return out;
    }
    if (shift.kind == "spurious") {
        SpuriousShift sig(base.train.num_classes, shift.block_width, rng);
        RngState train_rng = rng.derive(1), val_rng = rng.derive(2);
        RngState in_rng = rng.derive(3), out_rng = rng.derive(4);
        out.splits.train = sig.apply(base.train, shift.p_train, train_rng);
        out.splits.val = sig.apply(base.val, shift.p_train, val_rng);
        out.splits.test = sig.apply(base.test, shift.p_train, in_rng);
        out.test_out = sig.apply(base.test, shift.p_out, out_rng);
        out.test_out->split = "test_out";
        return out;
    }
    if (shift.kind == "corruption") {
        out.splits = base;
        const CorruptionKind kind = corruption_from_string(shift.corruption);
        out.test_out = apply_corruption(base.test, kind, shift.severity, rng);
        out.test_out->split = "test_out";
        return out;
    }
    if (shift.kind == "concept_noise") {
        out.splits = base;
        RngState train_rng = rng.derive(1), val_rng = rng.derive(2);
        out.splits.train = apply_concept_noise(base.train, shift.num_groups, shift.sigma_levels,
                                               train_rng);
        out.splits.val = apply_concept_noise(base.val, shift.num_groups, shift.sigma_levels, val_rng);
        // test concepts stay clean: metrics are against uncontaminated truth
        return out;
    }
    if (shift.kind == "sparsity") {
        const auto cols = choose_concept_subset(base.train.num_concepts(), shift.fraction, rng);
        out.splits.train = keep_concepts(base.train, cols);
        out.splits.val = keep_concepts(base.val, cols);
        out.splits.test = keep_concepts(base.test, cols);
        return out;
    }
    if (shift.kind == "duplication") {
        const auto cols = choose_duplicate_columns(base.train.num_concepts(), shift.fraction, rng);
        out.splits.train = append_concept_columns(base.train, cols);
        out.splits.val = append_concept_columns(base.val, cols);
        out.splits.test = append_concept_columns(base.test, cols);
        return out;
    }
    throw ValueError("apply_shift: unknown kind '" + shift.kind + "'");
}

// --- results table ---

std::vector<ResultsSummaryRow> ResultsTable::summary() const {
    // insertion-ordered grouping by (regime, shift, split)
    std::vector<ResultsSummaryRow> out;
    for (const auto& r : rows) {
        const bool known = std::any_of(out.begin(), out.end(), [&r](const ResultsSummaryRow& s) {
            return s.regime == r.regime && s.shift == r.shift && s.split == r.split;
        });
        if (!known) out.push_back(ResultsSummaryRow{r.regime, r.shift, r.split, 0, 0.0, {}, {}, {}});
    }
    for (auto& s : out) {
        std::vector<double> task_vals, concept_vals;
        for (const auto& r : rows) {
            if (s.regime != r.regime || s.shift != r.shift || s.split != r.split) continue;
            task_vals.push_back(r.task_accuracy);
            if (r.concept_accuracy) concept_vals.push_back(*r.concept_accuracy);
        }
        s.n_seeds = task_vals.size();
        double mean = 0.0;
        for (double v : task_vals) mean += v;
        mean /= static_cast<double>(task_vals.size());
        s.task_mean = mean;
        if (task_vals.size() >= 2) {
            double var = 0.0;
            for (double v : task_vals) var += (v - mean) * (v - mean);
            s.task_std = std::sqrt(var / static_cast<double>(task_vals.size() - 1));
        }
        if (!concept_vals.empty()) {
            double cmean = 0.0;
            for (double v : concept_vals) cmean += v;
            cmean /= static_cast<double>(concept_vals.size());
            s.concept_mean = cmean;
            if (concept_vals.size() >= 2) {
                double var = 0.0;
                for (double v : concept_vals) var += (v - cmean) * (v - cmean);
                s.concept_std = std::sqrt(var / static_cast<double>(concept_vals.size() - 1));
            }
        }
    }
    return out;
}

std::string ResultsTable::to_csv() const {
    std::ostringstream os;
    os << "seed,regime,shift,split,task_accuracy,concept_accuracy\n";
    for (const auto& r : rows) {
        os << r.seed << "," << r.regime << "," << r.shift << "," << r.split << ","
           << fmt_acc(r.task_accuracy) << ",";
        if (r.concept_accuracy) os << fmt_acc(*r.concept_accuracy);
        os << "\n";
    }
    return os.str();
}

std::string ResultsTable::summary_csv() const {
    std::ostringstream os;
    os << "regime,shift,split,n_seeds,task_mean,task_std,concept_mean,concept_std\n";
    for (const auto& s : summary()) {
        os << s.regime << "," << s.shift << "," << s.split << "," << s.n_seeds << ","
           << fmt_acc(s.task_mean) << ",";
        if (s.task_std) os << fmt_acc(*s.task_std);
        os << ",";
        if (s.concept_mean) os << fmt_acc(*s.concept_mean);
        os << ",";
        if (s.concept_std) os << fmt_acc(*s.concept_std);
        os << "\n";
    }
    return os.str();
}

// --- grid execution ---

namespace {

struct CellSpec {
    Regime regime;
    std::size_t shift_index;  // into padded shift list
    std::uint64_t seed;
};

struct CellOutput {
    CellStatus status;
    std::vector<ResultRow> rows;
};

std::string sanitize(std::string s) {
    for (char& ch : s)
        if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '-' && ch != '_') ch = '_';
    return s;
}

CellOutput run_cell(const ExperimentConfig& config, const ShiftSpec& shift, const CellSpec& cell,
                    const std::string& out_root) {
    CellOutput result;
    const std::string shift_label = shift.label();
    result.status.regime = regime_name(cell.regime);
    result.status.shift = shift_label;
    result.status.seed = cell.seed;
    const std::string dir_name = sanitize(regime_name(cell.regime)) + "__" + sanitize(shift_label) +
                                 "__seed" + std::to_string(cell.seed);
    const fs::path cell_dir = fs::path(out_root) / "cells" / dir_name;
    result.status.directory = cell_dir.string();
    try {
        fs::create_directories(cell_dir);
        const DataSplits base = build_base_splits(config, cell.seed);
        const ShiftedData shifted = apply_shift(shift, base, cell.seed, cell.shift_index);

        ModelSpec spec;
        spec.input_dim = shifted.splits.train.num_features();
        spec.encoder_layers = config.encoder_layers;
        spec.penultimate_dim = config.penultimate_dim;
        spec.num_concepts = shifted.splits.train.num_concepts();
        spec.num_classes = shifted.splits.train.num_classes;
        spec.dropout_rate = config.dropout_rate;
        spec.with_aux_head = cell.regime == Regime::coop;
        spec.arch = cell.regime == Regime::standard ? Arch::standard : Arch::cbm;

        TrainConfig tc = config.train;
        tc.regime = cell.regime;
        tc.seed = cell.seed;

        TrainResult trained = train(spec, shifted.splits, tc);
        const ClipMode eval_clip = tc.clip_mode == ClipMode::none ? ClipMode::none : ClipMode::eval_clip;

        auto add_row = [&](const LabeledDataset& ds) {
            const EvalResult ev = evaluate(trained.params, ds, eval_clip);
            ResultRow row;
            row.seed = cell.seed;
            row.regime = regime_name(cell.regime);
            row.shift = shift_label;
            row.split = ds.split;
            row.task_accuracy = ev.task_accuracy;
            row.concept_accuracy = ev.concept_accuracy;
            result.rows.push_back(row);
        };
        add_row(shifted.splits.val);
        add_row(shifted.splits.test);
        if (shifted.test_out) add_row(*shifted.test_out);

        atomic_write((cell_dir / "params.json").string(), params_to_json(trained.params));
        atomic_write((cell_dir / "report.json").string(), report_to_json(trained.report));

        if (config.intervention.enabled && spec.arch == Arch::cbm) {
            SupervisorProfile profile;
            profile.scs_gamma = config.intervention.scs_gamma;
            profile.error_rate = config.intervention.error_rate;
            std::ostringstream curves_csv;
            curves_csv << "n,accuracy,policy,seed\n";
            json curves_json = json::array();
            for (std::size_t pi = 0; pi < config.intervention.policies.size(); ++pi) {
                InterventionPolicy policy;
                policy.kind = policy_from_string(config.intervention.policies[pi]);
                policy.k1 = config.intervention.k1;
                policy.k2 = config.intervention.k2;
                policy.k3 = config.intervention.k3;
                policy.t_samples = config.intervention.t_samples;
                policy.random_repeats = config.intervention.random_repeats;
                RngState curve_rng = RngState(cell.seed).derive(kCurveStream + pi);
                const InterventionCurve curve =
                    intervention_curve(trained.params, shifted.splits.test, policy, profile, curve_rng);
                for (std::size_t i = 0; i < curve.num_intervened.size(); ++i)
                    curves_csv << curve.num_intervened[i] << "," << fmt_acc(curve.accuracy[i]) << ","
                               << curve.policy << "," << cell.seed << "\n";
                curves_json.push_back(json::parse(curve_to_json(curve, cell.seed)));
            }
            atomic_write((cell_dir / "interventions.csv").string(), curves_csv.str());
            atomic_write((cell_dir / "interventions.json").string(), curves_json.dump(2));
        }
        result.status.ok = true;
    } catch (const std::exception& e) {
        result.status.ok = false;
        result.status.error = e.what();
        result.rows.clear();
    }
    return result;
}

}  // namespace

ExperimentOutcome run_experiment(const ExperimentConfig& config) {
    config.validate();
    const std::string config_text = config.to_json_text();

    std::vector<ShiftSpec> shifts = config.shifts;
    if (shifts.empty()) shifts.push_back(ShiftSpec{});

    std::vector<CellSpec> cells;
    for (Regime regime : config.regimes)
        for (std::size_t si = 0; si < shifts.size(); ++si)
            for (std::uint64_t seed : config.seeds) cells.push_back(CellSpec{regime, si, seed});

    ExperimentOutcome outcome;
    outcome.output_dir = config.output_dir;
    char hash_buf[32];
    std::snprintf(hash_buf, sizeof(hash_buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a_hash(config_text)));
    outcome.config_hash = hash_buf;
    fs::create_directories(fs::path(config.output_dir) / "cells");

    std::vector<CellOutput> outputs(cells.size());
    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;
    auto worker = [&]() {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= cells.size()) break;
            outputs[i] = run_cell(config, shifts[cells[i].shift_index], cells[i], config.output_dir);
            std::lock_guard<std::mutex> lock(log_mutex);
            const CellStatus& st = outputs[i].status;
            std::cout << "[cell] " << st.regime << " / " << st.shift << " / seed " << st.seed << ": "
                      << (st.ok ? "ok" : ("FAILED: " + st.error)) << "\n";
        }
    };
    const std::size_t jobs = std::min<std::size_t>(std::max<std::size_t>(config.jobs, 1), cells.size());
    if (jobs <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(jobs);
        for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    for (auto& out : outputs) {
        outcome.cells.push_back(out.status);
        for (auto& row : out.rows) outcome.results.rows.push_back(row);
    }

    atomic_write((fs::path(config.output_dir) / "results.csv").string(), outcome.results.to_csv());
    atomic_write((fs::path(config.output_dir) / "results_summary.csv").string(),
                 outcome.results.summary_csv());

    json results_json;
    results_json["rows"] = json::array();
    for (const auto& r : outcome.results.rows) {
        json row = {{"seed", r.seed},         {"regime", r.regime},
                    {"shift", r.shift},       {"split", r.split},
                    {"task_accuracy", r.task_accuracy}};
        if (r.concept_accuracy) row["concept_accuracy"] = *r.concept_accuracy;
        results_json["rows"].push_back(row);
    }
    results_json["summary"] = json::array();
    for (const auto& s : outcome.results.summary()) {
        json row = {{"regime", s.regime}, {"shift", s.shift},         {"split", s.split},
                    {"n_seeds", s.n_seeds}, {"task_mean", s.task_mean}};
        if (s.task_std) row["task_std"] = *s.task_std;
        if (s.concept_mean) row["concept_mean"] = *s.concept_mean;
        if (s.concept_std) row["concept_std"] = *s.concept_std;
        results_json["summary"].push_back(row);
    }
    atomic_write((fs::path(config.output_dir) / "results.json").string(), results_json.dump(2));

    json manifest;
    manifest["tool"] = "cbmkit";
    manifest["version"] = kToolVersion;
    manifest["config_hash"] = outcome.config_hash;
    manifest["config"] = json::parse(config_text);
    manifest["cells"] = json::array();
    for (const auto& st : outcome.cells)
        manifest["cells"].push_back({{"regime", st.regime},
                                     {"shift", st.shift},
                                     {"seed", st.seed},
                                     {"ok", st.ok},
                                     {"error", st.error},
                                     {"directory", st.directory}});
    atomic_write((fs::path(config.output_dir) / "manifest.json").string(), manifest.dump(2));

    const bool all_failed =
        std::none_of(outcome.cells.begin(), outcome.cells.end(), [](const CellStatus& s) { return s.ok; });
    outcome.exit_code = all_failed ? 2 : 0;
    return outcome;
}

// --- histogram ---

std::vector<std::size_t> concept_prob_histogram(const ModelParams& params, const LabeledDataset& ds,
                                                std::size_t bins) {
    if (bins < 2) throw ValueError("histogram: bins must be >= 2");
    if (params.spec.arch != Arch::cbm) throw ValueError("histogram: model has no concept head");
    const ForwardOutput out = forward(params, ds.x, Mode::eval, nullptr);
    std::vector<std::size_t> counts(bins, 0);
    for (std::size_t i = 0; i < out.concept_probs.size(); ++i) {
        const double v = out.concept_probs[i];
        const auto idx = std::min<std::size_t>(
            bins - 1, static_cast<std::size_t>(std::floor(v * static_cast<double>(bins))));
        ++counts[idx];
    }
    return counts;
}

void write_histogram_csv(const std::vector<std::size_t>& counts, const std::string& path) {
    std::ostringstream os;
    os << "bin_left,bin_right,count\n";
    const double width = 1.0 / static_cast<double>(counts.size());
    char buf[64];
    for (std::size_t i = 0; i < counts.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.6f,%.6f,", width * static_cast<double>(i),
                      width * static_cast<double>(i + 1));
        os << buf << counts[i] << "\n";
    }
    atomic_write(path, os.str());
}

// --- compare ---

namespace {

struct SummaryEntry {
    double task_mean = 0.0;
    std::optional<double> concept_mean;
};

std::map<std::string, SummaryEntry> load_summary(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("compare: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw ParseError("compare: " + path + " is empty");
    if (line.rfind("regime,shift,split", 0) != 0)
        throw ParseError("compare: " + path + " is not a results_summary.csv");
    std::map<std::string, SummaryEntry> entries;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::string cur;
        for (char ch : line) {
            if (ch == ',') {
                fields.push_back(cur);
                cur.clear();
            } else if (ch != '\r') {
                cur += ch;
            }
        }
        fields.push_back(cur);
        if (fields.size() != 8)
            throw ParseError("compare: " + path + " line " + std::to_string(line_no) +
                             ": expected 8 fields");
        SummaryEntry e;
        e.task_mean = std::stod(fields[4]);
        if (!fields[6].empty()) e.concept_mean = std::stod(fields[6]);
        entries[fields[0] + "," + fields[1] + "," + fields[2]] = e;
    }
    return entries;
}

}  // namespace

std::string compare_tables(const std::string& summary_a_path, const std::string& summary_b_path,
                           const std::string& out_path) {
    const auto a = load_summary(summary_a_path);
    const auto b = load_summary(summary_b_path);
    if (a.size() != b.size())
        throw ValueError("compare: grid shapes differ (" + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()) + " cells)");
    for (const auto& [key, _] : a)
        if (!b.count(key)) throw ValueError("compare: cell '" + key + "' missing from second table");

    std::ostringstream os;
    os << "regime,shift,split,task_a,task_b,task_delta,concept_a,concept_b,concept_delta\n";
    std::size_t up = 0, down = 0, same = 0;
    for (const auto& [key, ea] : a) {
        const SummaryEntry& eb = b.at(key);
        const double delta = ea.task_mean - eb.task_mean;
        if (delta > 0)
            ++up;
        else if (delta < 0)
            ++down;
        else
            ++same;
        os << key << "," << fmt_acc(ea.task_mean) << "," << fmt_acc(eb.task_mean) << ","
           << fmt_acc(delta) << ",";
        if (ea.concept_mean) os << fmt_acc(*ea.concept_mean);
        os << ",";
        if (eb.concept_mean) os << fmt_acc(*eb.concept_mean);
        os << ",";
        if (ea.concept_mean && eb.concept_mean) os << fmt_acc(*ea.concept_mean - *eb.concept_mean);
        os << "\n";
    }
    os << "# sign summary: task a>b in " << up << ", a<b in " << down << ", equal in " << same
       << " cells\n";
    const std::string report = os.str();
    if (!out_path.empty()) atomic_write(out_path, report);
    return report;
}

}  // namespace cbm
