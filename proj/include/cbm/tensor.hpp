#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "cbm/errors.hpp"
#include "cbm/rng.hpp"

namespace cbm {

// Dimension sizes, row-major storage order.
using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

// Dense 64-bit float tensor. A tensor may carry a reference (`node`) into
// the Tape that produced it; tensors built directly are unrecorded
// constants until an op or Tape::leaf touches them.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
    static Tensor vec(std::vector<double> v);
    static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> data);

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(std::size_t i, std::size_t j);
    double at(std::size_t i, std::size_t j) const;

    // Value of a single-element tensor.
    double item() const;

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    int node() const { return node_; }
    bool recorded() const { return node_ >= 0; }

    bool all_finite() const;
    bool same_values(const Tensor& other) const;  // bit-identical shape+data

  private:
    friend class Tape;
    Shape shape_;
    std::vector<double> data_;
    int node_ = -1;
    std::uint64_t tape_id_ = 0;  // which tape `node_` refers to
};

// Reverse-mode computation record. Nodes are appended in forward order, so
// the append order is already topological; backward() walks it in reverse,
// invoking each node's closure to accumulate gradients into its inputs.
//
// The tape is rebuilt per forward pass (define-by-run). A tape and the
// tensors recorded on it belong to one thread at a time.
class Tape {
  public:
    // Closure contract: read the output gradient, accumulate into the
    // gradients of this node's inputs via grad_buffer().
    using BackwardFn = std::function<void(Tape&, const std::vector<double>& out_grad)>;

    Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Registers `value` as an input/parameter node and returns the recorded
    // handle. Leaves receive gradients but propagate nothing further.
    Tensor leaf(const Tensor& value);

    // --- primitive operations (all record gradients) ---
    Tensor matmul(const Tensor& a, const Tensor& b);
    Tensor add(const Tensor& a, const Tensor& b);          // same shape
    Tensor sub(const Tensor& a, const Tensor& b);
    Tensor mul(const Tensor& a, const Tensor& b);          // elementwise
    Tensor scale(const Tensor& a, double k);
    Tensor add_rowvec(const Tensor& m, const Tensor& v);   // m: r×c, v: length c
    Tensor sigmoid(const Tensor& x);
    Tensor relu(const Tensor& x);                          // subgradient at 0 is 0
    Tensor log(const Tensor& x);                           // requires positive entries
    Tensor sum(const Tensor& x);                           // -> scalar
    Tensor mean(const Tensor& x);                          // -> scalar

    // Inverted dropout: zero with probability `rate`, scale survivors by
    // 1/(1-rate). Deterministic given rng. rate must be in [0, 1).
    Tensor dropout(const Tensor& x, double rate, RngState& rng);

    // u^T v / (|u| |v|) for equal-length vectors with nonzero norms.
    Tensor cosine_similarity(const Tensor& u, const Tensor& v);

    // Extension point for fused operations defined outside the core (the
    // loss kernels use this). `inputs` lists recorded nodes the backward
    // closure will accumulate into.
    Tensor custom(const char* op_name, Shape out_shape, std::vector<double> out_value,
                  std::vector<int> inputs, BackwardFn backward);

    // Propagates gradients from a recorded scalar loss to every node that
    // feeds it. Gradients accumulate; call once per tape.
    void backward(const Tensor& loss);

    // Gradient of the last backward() target w.r.t. a recorded tensor.
    // Unreached nodes yield zeros.
    Tensor grad(const Tensor& t) const;
    bool reached(const Tensor& t) const;

    std::size_t num_nodes() const { return nodes_.size(); }

    // For backward closures: mutable gradient buffer of a node, allocated
    // zero-filled on first use.
    std::vector<double>& grad_buffer(int node);
    const std::vector<double>& node_value(int node) const;
    const Shape& node_shape(int node) const;

  private:
    struct Node {
        const char* op;
        Shape shape;
        std::vector<double> value;
        std::vector<int> inputs;
        BackwardFn backward;
    };

    int record(const char* op, Shape shape, std::vector<double> value, std::vector<int> inputs,
               BackwardFn backward);
    Tensor wrap(int node) const;
    // Node id of `t` on this tape; tensors from other tapes (or plain
    // values) are re-registered as constant leaves.
    int require_recorded(const Tensor& t, const char* op);
    bool on_this_tape(const Tensor& t) const;

    std::uint64_t id_;
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
    bool ran_backward_ = false;
};

// Plain kernels shared by ops and inference-only call sites.
void matmul_kernel(const std::vector<double>& a, std::size_t m, std::size_t k,
                   const std::vector<double>& b, std::size_t n, std::vector<double>& out);
double dot_kernel(const double* a, const double* b, std::size_t n);
double norm_kernel(const double* a, std::size_t n);

}  // namespace cbm
