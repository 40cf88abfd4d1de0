#pragma once

#include <string>
#include <vector>

#include "cbm/rng.hpp"
#include "cbm/tensor.hpp"

namespace cbm {

// Generative story y -> c -> x: class drawn uniformly, concepts looked up
// in concept_map and bit-flipped with concept_flip_prob, inputs mixed as
// x = W c + noise with W ~ N(0,1) drawn at seed time.
struct GeneratorSpec {
    std::size_t num_classes = 0;   // K
    std::size_t num_concepts = 0;  // a
    Tensor concept_map;            // K x a binary, rows pairwise distinct
    double concept_flip_prob = 0.0;
    std::size_t input_dim = 0;  // m
    Tensor mixing;              // m x a
    double input_noise_sigma = 0.0;
    std::size_t samples_per_class = 0;

    void validate() const;

    // Draws the mixing matrix and a concept map of pairwise-distinct,
    // balanced-weight rows (classes stay identifiable and linearly
    // separable through their codes).
    static GeneratorSpec make(std::size_t num_classes, std::size_t num_concepts, std::size_t input_dim,
                              double concept_flip_prob, double input_noise_sigma,
                              std::size_t samples_per_class, RngState& rng);
};

// Desk-scale default: K=10, a=16, m=32, 200 samples/class, flip 0.1,
// input noise sigma 1.0.
GeneratorSpec default_generator_spec(RngState& rng);

struct LabeledDataset {
    Tensor x;  // N x m
    Tensor c;  // N x a; binary unless a concept-noise shift ran
    std::vector<int> y;
    std::size_t num_classes = 0;
    std::string split;
    bool concepts_binary = true;
    std::vector<std::string> provenance;

    std::size_t size() const { return y.size(); }
    std::size_t num_features() const { return x.ndim() == 2 ? x.cols() : 0; }
    std::size_t num_concepts() const { return c.ndim() == 2 ? c.cols() : 0; }
    void validate() const;
};

struct SplitSizes {
    std::size_t train = 0;
    std::size_t val = 0;
    std::size_t test = 0;
};

struct DataSplits {
    LabeledDataset train;
    LabeledDataset val;
    LabeledDataset test;
};

SplitSizes default_split_sizes(const GeneratorSpec& spec);

DataSplits generate(const GeneratorSpec& spec, const SplitSizes& sizes, RngState& rng);
LabeledDataset generate_split(const GeneratorSpec& spec, std::size_t n, const std::string& split_tag,
                              RngState& rng);

// --- spurious background correlation (appended per-class signature block) ---

// Paper protocol probabilities: train/in-domain 0.8, out-domain 0.3.
inline constexpr double kSpuriousPTrain = 0.8;
inline constexpr double kSpuriousPOut = 0.3;

// Signatures are drawn once and reused across splits, so the out-domain
// set differs only in the correlation probability.
class SpuriousShift {
  public:
    SpuriousShift(std::size_t num_classes, std::size_t block_width, RngState& rng);

    // With probability p the appended block is the sample's own class
    // signature, otherwise the signature of a uniformly drawn other class.
    LabeledDataset apply(const LabeledDataset& ds, double p, RngState& rng) const;

    const Tensor& signatures() const { return signatures_; }
    std::size_t block_width() const { return signatures_.cols(); }

  private:
    Tensor signatures_;  // K x block_width
};

// --- feature-space corruption analogues ---

enum class CorruptionKind {
    gaussian_noise,  // adds N(0, s^2)
    blur,            // box kernel of width 2*round(s)+1
    zoom_blur,       // mean of the vector with round(s) index-dilated copies
    snow,            // zeroes a random s-fraction, adds +1 to another
    fog,             // (1-s) x + s mean(x)
    brightness,      // x + s
    contrast,        // mean(x) + (1+s)(x - mean(x))
};

CorruptionKind corruption_from_string(const std::string& name);  // ValueError on unknown kind
std::string corruption_name(CorruptionKind kind);
inline constexpr std::size_t kNumCorruptionKinds = 7;

LabeledDataset apply_corruption(const LabeledDataset& ds, CorruptionKind kind, double severity,
                                RngState& rng);

// --- concept-space noise ---

// Classes are split into num_groups contiguous groups; every sample's
// concept vector gets additive N(0, sigma_g^2) noise with its group's
// level. Targets become real-valued; the concept criterion switches to
// squared error downstream.
LabeledDataset apply_concept_noise(const LabeledDataset& ds, std::size_t num_groups,
                                   const std::vector<double>& sigma_levels, RngState& rng);

// --- concept sparsity / duplication stressors ---

std::vector<std::size_t> choose_concept_subset(std::size_t num_concepts, double fraction, RngState& rng);
LabeledDataset keep_concepts(const LabeledDataset& ds, const std::vector<std::size_t>& columns);
LabeledDataset subsample_concepts(const LabeledDataset& ds, double fraction, RngState& rng);

std::vector<std::size_t> choose_duplicate_columns(std::size_t num_concepts, double fraction,
                                                  RngState& rng);
LabeledDataset append_concept_columns(const LabeledDataset& ds, const std::vector<std::size_t>& columns);
LabeledDataset duplicate_concepts(const LabeledDataset& ds, double fraction, RngState& rng);

// --- CSV ingestion ---
// Header row annotates roles: feature:<name>, concept:<name>, label.
// Values are plain numerics, comma separated, no quoting.

void save_csv(const LabeledDataset& ds, const std::string& path);
LabeledDataset load_csv(const std::string& path, const std::string& split_tag = "test_in");

}  // namespace cbm
