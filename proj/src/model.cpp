#include "cbm/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cbm/errors.hpp"

namespace cbm {

namespace {

constexpr int kParamsFormatVersion = 1;

Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, RngState& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor w(Shape{fan_in, fan_out});
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-limit, limit);
    return w;
}

LayerParams init_layer(std::size_t in, std::size_t out, RngState& rng) {
    return LayerParams{glorot_uniform(in, out, rng), Tensor(Shape{out}, 0.0)};
}

template <typename Params>
std::vector<LayerRef> collect_layers(Params& p) {
    std::vector<LayerRef> out;
    for (std::size_t i = 0; i < p.encoder.size(); ++i)
        out.push_back({"encoder-" + std::to_string(i), &p.encoder[i].W, &p.encoder[i].b});
    out.push_back({"penultimate", &p.penultimate.W, &p.penultimate.b});
    const ModelSpec* spec = nullptr;
    if constexpr (std::is_same_v<std::remove_const_t<Params>, ModelParams>)
        spec = &p.spec;
    else
        spec = p.spec;
    if (spec->arch == Arch::cbm) {
        out.push_back({"concept-head", &p.concept_head.W, &p.concept_head.b});
        if (spec->with_aux_head) out.push_back({"aux-head", &p.aux_head.W, &p.aux_head.b});
    }
    out.push_back({"task-head", &p.task_head.W, &p.task_head.b});
    return out;
}

Tensor hard_threshold(const Tensor& probs) {
    Tensor out(probs.shape());
    for (std::size_t i = 0; i < probs.size(); ++i) out[i] = probs[i] >= 0.5 ? 1.0 : 0.0;
    return out;
}

}  // namespace

void ModelSpec::validate() const {
    if (input_dim < 1) throw ValueError("ModelSpec: input_dim must be >= 1");
    if (penultimate_dim < 1) throw ValueError("ModelSpec: penultimate_dim must be >= 1");
    if (num_classes < 1) throw ValueError("ModelSpec: num_classes must be >= 1");
    if (arch == Arch::cbm && num_concepts < 1) throw ValueError("ModelSpec: num_concepts must be >= 1");
    for (std::size_t w : encoder_layers)
        if (w < 1) throw ValueError("ModelSpec: encoder layer width must be >= 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
        throw ValueError("ModelSpec: dropout_rate must be in [0,1)");
    if (arch == Arch::standard && with_aux_head)
        throw ValueError("ModelSpec: standard arch has no aux head");
}

std::vector<LayerRef> ModelParams::layers() { return collect_layers(*this); }

std::vector<LayerRef> ModelParams::layers() const {
    return collect_layers(const_cast<ModelParams&>(*this));
}

std::vector<LayerRef> BoundParams::layers() { return collect_layers(*this); }

ModelParams init_params(const ModelSpec& spec, RngState& rng) {
    spec.validate();
    ModelParams p;
    p.spec = spec;
    std::size_t in = spec.input_dim;
    for (std::size_t width : spec.encoder_layers) {
        p.encoder.push_back(init_layer(in, width, rng));
        in = width;
    }
    p.penultimate = init_layer(in, spec.penultimate_dim, rng);
    if (spec.arch == Arch::cbm) {
        p.concept_head = init_layer(spec.penultimate_dim, spec.num_concepts, rng);
        if (spec.with_aux_head) p.aux_head = init_layer(spec.penultimate_dim, spec.num_classes, rng);
        p.task_head = init_layer(spec.num_concepts, spec.num_classes, rng);
    } else {
        p.task_head = init_layer(spec.penultimate_dim, spec.num_classes, rng);
    }
    return p;
}

BoundParams bind_params(Tape& tape, const ModelParams& params) {
    BoundParams bp;
    bp.spec = &params.spec;
    for (const auto& layer : params.encoder)
        bp.encoder.push_back({tape.leaf(layer.W), tape.leaf(layer.b)});
    bp.penultimate = {tape.leaf(params.penultimate.W), tape.leaf(params.penultimate.b)};
    if (params.spec.arch == Arch::cbm) {
        bp.concept_head = {tape.leaf(params.concept_head.W), tape.leaf(params.concept_head.b)};
        if (params.spec.with_aux_head)
            bp.aux_head = {tape.leaf(params.aux_head.W), tape.leaf(params.aux_head.b)};
    }
    bp.task_head = {tape.leaf(params.task_head.W), tape.leaf(params.task_head.b)};
    return bp;
}

ForwardOutput forward_bound(Tape& tape, const BoundParams& bp, const Tensor& x, Mode mode,
                            RngState* rng, ClipMode clip) {
    const ModelSpec& spec = *bp.spec;
    if (x.ndim() != 2 || x.cols() != spec.input_dim)
        throw ShapeError("forward: input shape " + shape_str(x.shape()) + " does not match input_dim " +
                         std::to_string(spec.input_dim));
    const bool train = mode == Mode::train;
    if (train && spec.dropout_rate > 0.0 && rng == nullptr)
        throw ValueError("forward: train mode with dropout needs an RngState");

    Tensor h = x.recorded() ? x : tape.leaf(x);
    for (const auto& layer : bp.encoder)
        h = tape.relu(tape.add_rowvec(tape.matmul(h, layer.W), layer.b));
    Tensor q = tape.add_rowvec(tape.matmul(h, bp.penultimate.W), bp.penultimate.b);
    Tensor qd = (train && spec.dropout_rate > 0.0) ? tape.dropout(q, spec.dropout_rate, *rng) : q;

    ForwardOutput out;
    out.q = q;
    if (spec.arch == Arch::standard) {
        out.task_logits = tape.add_rowvec(tape.matmul(qd, bp.task_head.W), bp.task_head.b);
        out.g_input = qd;
        return out;
    }

    out.concept_logits = tape.add_rowvec(tape.matmul(qd, bp.concept_head.W), bp.concept_head.b);
    out.concept_probs = tape.sigmoid(out.concept_logits);
    if (spec.with_aux_head)
        out.aux_logits = tape.add_rowvec(tape.matmul(qd, bp.aux_head.W), bp.aux_head.b);

    if (clip == ClipMode::none) {
        out.g_input = out.concept_probs;
    } else {
        // Hard labels enter g as a fresh leaf: no gradient flows back into
        // the concept side through the task head.
        out.g_input = tape.leaf(hard_threshold(out.concept_probs));
    }
    out.task_logits = tape.add_rowvec(tape.matmul(out.g_input, bp.task_head.W), bp.task_head.b);
    return out;
}

ForwardOutput forward(const ModelParams& params, const Tensor& x, Mode mode, RngState* rng,
                      ClipMode clip) {
    Tape tape;
    BoundParams bp = bind_params(tape, params);
    return forward_bound(tape, bp, x, mode, rng, clip);
}

ForwardOutput forward_clipped(const ModelParams& params, const Tensor& x, ClipMode phase,
                              RngState* rng) {
    if (phase == ClipMode::none) throw ValueError("forward_clipped: phase must be train_clip or eval_clip");
    const Mode mode = phase == ClipMode::train_clip ? Mode::train : Mode::eval;
    return forward(params, x, mode, rng, phase);
}

std::vector<Tensor> mc_dropout_forward(const ModelParams& params, const Tensor& x, std::size_t t_samples,
                                       RngState& rng) {
    if (t_samples < 1) throw ValueError("mc_dropout_forward: sample count must be >= 1");
    if (params.spec.arch != Arch::cbm) throw ValueError("mc_dropout_forward: model has no concept head");
    std::vector<Tensor> probs;
    probs.reserve(t_samples);
    for (std::size_t t = 0; t < t_samples; ++t)
        probs.push_back(forward(params, x, Mode::train, &rng).concept_probs);
    return probs;
}

// --- save/load ---

namespace {

nlohmann::json layer_to_json(const Tensor& w, const Tensor& b) {
    return nlohmann::json{{"in", w.rows()}, {"out", w.cols()}, {"w", w.data()}, {"b", b.data()}};
}

void layer_from_json(const nlohmann::json& j, Tensor* w, Tensor* b) {
    const auto in = j.at("in").get<std::size_t>();
    const auto out = j.at("out").get<std::size_t>();
    *w = Tensor(Shape{in, out}, j.at("w").get<std::vector<double>>());
    *b = Tensor(Shape{out}, j.at("b").get<std::vector<double>>());
}

}  // namespace

std::string params_to_json(const ModelParams& params) {
    nlohmann::json j;
    j["format"] = "cbm-params";
    j["version"] = kParamsFormatVersion;
    const ModelSpec& s = params.spec;
    j["spec"] = {{"input_dim", s.input_dim},
                 {"encoder_layers", s.encoder_layers},
                 {"penultimate_dim", s.penultimate_dim},
                 {"num_concepts", s.num_concepts},
                 {"num_classes", s.num_classes},
                 {"with_aux_head", s.with_aux_head},
                 {"dropout_rate", s.dropout_rate},
                 {"arch", s.arch == Arch::cbm ? "cbm" : "standard"}};
    nlohmann::json layers = nlohmann::json::object();
    for (const auto& ref : params.layers()) layers[ref.role] = layer_to_json(*ref.W, *ref.b);
    j["layers"] = std::move(layers);
    return j.dump();
}

ModelParams params_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("params: invalid JSON: ") + e.what());
    }
    if (j.value("format", "") != "cbm-params") throw ParseError("params: not a cbm-params container");
    if (j.value("version", -1) != kParamsFormatVersion)
        throw ParseError("params: unsupported version " + std::to_string(j.value("version", -1)));
    ModelParams p;
    const auto& js = j.at("spec");
    p.spec.input_dim = js.at("input_dim").get<std::size_t>();
    p.spec.encoder_layers = js.at("encoder_layers").get<std::vector<std::size_t>>();
    p.spec.penultimate_dim = js.at("penultimate_dim").get<std::size_t>();
    p.spec.num_concepts = js.at("num_concepts").get<std::size_t>();
    p.spec.num_classes = js.at("num_classes").get<std::size_t>();
    p.spec.with_aux_head = js.at("with_aux_head").get<bool>();
    p.spec.dropout_rate = js.at("dropout_rate").get<double>();
    p.spec.arch = js.at("arch").get<std::string>() == "standard" ? Arch::standard : Arch::cbm;
    p.spec.validate();
    p.encoder.resize(p.spec.encoder_layers.size());
    const auto& layers = j.at("layers");
    for (const auto& ref : p.layers()) {
        if (!layers.contains(ref.role)) throw ParseError("params: missing layer " + ref.role);
        layer_from_json(layers.at(ref.role), ref.W, ref.b);
    }
    return p;
}

void save_params(const ModelParams& params, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ParseError("params: cannot open " + path + " for writing");
    out << params_to_json(params);
    if (!out) throw ParseError("params: write failed for " + path);
}

ModelParams load_params(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("params: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return params_from_json(buf.str());
}

}  // namespace cbm
