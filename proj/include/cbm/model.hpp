#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cbm/rng.hpp"
#include "cbm/tensor.hpp"

namespace cbm {

// cbm: encoder -> penultimate q -> concept head f (+ optional auxiliary
// label head h) -> task head g over the predicted concepts.
// standard: encoder -> penultimate q -> task head directly; no concept
// bottleneck. Used as the no-concept baseline.
enum class Arch { cbm, standard };

enum class Mode { train, eval };

// How the task head consumes concepts: soft probabilities (default), or
// hard 0/1 labels thresholded at 0.5 during training or evaluation.
enum class ClipMode { none, train_clip, eval_clip };

struct ModelSpec {
    std::size_t input_dim = 0;
    std::vector<std::size_t> encoder_layers;  // hidden widths, may be empty
    std::size_t penultimate_dim = 0;
    std::size_t num_concepts = 0;
    std::size_t num_classes = 0;
    bool with_aux_head = false;
    double dropout_rate = 0.2;
    Arch arch = Arch::cbm;

    void validate() const;  // throws ValueError on bad dimensions/rate
};

struct LayerParams {
    Tensor W;  // in_dim x out_dim
    Tensor b;  // out_dim
};

// Layer roles used for optimizer iteration and the save format:
// "encoder-<i>", "penultimate", "concept-head", "aux-head", "task-head".
struct LayerRef {
    std::string role;
    Tensor* W;
    Tensor* b;
};

struct ModelParams {
    ModelSpec spec;
    std::vector<LayerParams> encoder;
    LayerParams penultimate;
    LayerParams concept_head;  // unused for Arch::standard
    LayerParams aux_head;      // present only when with_aux_head
    LayerParams task_head;     // single linear layer

    std::vector<LayerRef> layers();
    std::vector<LayerRef> layers() const;  // refs are non-owning views
};

// Same layer structure, registered as leaves on a tape.
struct BoundParams {
    const ModelSpec* spec = nullptr;
    std::vector<LayerParams> encoder;
    LayerParams penultimate;
    LayerParams concept_head;
    LayerParams aux_head;
    LayerParams task_head;

    std::vector<LayerRef> layers();
};

struct ForwardOutput {
    Tensor q;               // penultimate activations, pre-dropout
    Tensor concept_logits;  // empty for Arch::standard
    Tensor concept_probs;   // sigmoid(concept_logits)
    Tensor g_input;         // what the task head consumed (soft or clipped)
    std::optional<Tensor> aux_logits;
    Tensor task_logits;
};

// Glorot-uniform weights, zero biases. Deterministic given the rng seed.
ModelParams init_params(const ModelSpec& spec, RngState& rng);

BoundParams bind_params(Tape& tape, const ModelParams& params);

// Forward pass over a bound parameter set. Dropout is applied to q in
// train mode only (rng required then). The penultimate layer is affine
// (no ReLU) so q rows keep nonzero norm almost surely; encoder hidden
// layers use ReLU.
ForwardOutput forward_bound(Tape& tape, const BoundParams& bp, const Tensor& x, Mode mode,
                            RngState* rng, ClipMode clip = ClipMode::none);

// Convenience forward on a private tape (inference paths).
ForwardOutput forward(const ModelParams& params, const Tensor& x, Mode mode, RngState* rng,
                      ClipMode clip = ClipMode::none);

// Table 3 style clipped forward: g consumes hard labels 1[c_hat >= 0.5].
// In train_clip the threshold blocks gradient flow from the task loss into
// the concept side; concept gradients come only from the concept loss.
ForwardOutput forward_clipped(const ModelParams& params, const Tensor& x, ClipMode phase,
                              RngState* rng);

// T stochastic forward passes with dropout active on q; returns the T
// concept-probability tensors.
std::vector<Tensor> mc_dropout_forward(const ModelParams& params, const Tensor& x, std::size_t t_samples,
                                       RngState& rng);

// Versioned JSON parameter container keyed by layer role.
void save_params(const ModelParams& params, const std::string& path);
ModelParams load_params(const std::string& path);
std::string params_to_json(const ModelParams& params);
ModelParams params_from_json(const std::string& text);

}  // namespace cbm
