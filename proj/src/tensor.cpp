#include "cbm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

namespace cbm {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
    data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size())
        throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match data length " +
                         std::to_string(data_.size()));
}

Tensor Tensor::vec(std::vector<double> v) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v));
}

Tensor Tensor::matrix(std::size_t r, std::size_t c, std::vector<double> data) {
    return Tensor(Shape{r, c}, std::move(data));
}

std::size_t Tensor::rows() const {
    if (shape_.size() != 2) throw ShapeError("rows(): tensor is not 2-D, shape " + shape_str(shape_));
    return shape_[0];
}

std::size_t Tensor::cols() const {
    if (shape_.size() != 2) throw ShapeError("cols(): tensor is not 2-D, shape " + shape_str(shape_));
    return shape_[1];
}

double& Tensor::at(std::size_t i, std::size_t j) { return data_[i * cols() + j]; }
double Tensor::at(std::size_t i, std::size_t j) const { return data_[i * cols() + j]; }

double Tensor::item() const {
    if (data_.size() != 1)
        throw ShapeError("item(): tensor has " + std::to_string(data_.size()) + " elements, expected 1");
    return data_[0];
}

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

bool Tensor::same_values(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
}

// --- kernels ---

void matmul_kernel(const std::vector<double>& a, std::size_t m, std::size_t k,
                   const std::vector<double>& b, std::size_t n, std::vector<double>& out) {
    out.assign(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            if (av == 0.0) continue;
            const double* brow = b.data() + p * n;
            double* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

double dot_kernel(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

double norm_kernel(const double* a, std::size_t n) { return std::sqrt(dot_kernel(a, a, n)); }

// --- tape ---

namespace {
std::atomic<std::uint64_t> g_next_tape_id{1};
}

Tape::Tape() : id_(g_next_tape_id.fetch_add(1)) {}

int Tape::record(const char* op, Shape shape, std::vector<double> value, std::vector<int> inputs,
                 BackwardFn backward) {
    nodes_.push_back(Node{op, std::move(shape), std::move(value), std::move(inputs), std::move(backward)});
    return static_cast<int>(nodes_.size() - 1);
}

Tensor Tape::wrap(int node) const {
    Tensor t;
    t.shape_ = nodes_[node].shape;
    t.data_ = nodes_[node].value;
    t.node_ = node;
    t.tape_id_ = id_;
    return t;
}

bool Tape::on_this_tape(const Tensor& t) const {
    return t.recorded() && t.tape_id_ == id_ && static_cast<std::size_t>(t.node()) < nodes_.size();
}

int Tape::require_recorded(const Tensor& t, const char*) {
    if (on_this_tape(t)) return t.node();
    // Operands from plain values or other tapes become constant leaves.
    return record("leaf", t.shape(), t.data(), {}, nullptr);
}

Tensor Tape::leaf(const Tensor& value) {
    const int id = record("leaf", value.shape(), value.data(), {}, nullptr);
    return wrap(id);
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows())
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out;
    matmul_kernel(a.data(), m, k, b.data(), n, out);
    const int ia = require_recorded(a, "matmul");
    const int ib = require_recorded(b, "matmul");
    auto aval = a.data();
    auto bval = b.data();
    const int id = record(
        "matmul", Shape{m, n}, std::move(out), {ia, ib},
        [ia, ib, aval, bval, m, k, n](Tape& tape, const std::vector<double>& g) {
            auto& ga = tape.grad_buffer(ia);
            auto& gb = tape.grad_buffer(ib);
            // dA = g . B^T
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bval[p * n + j];
                    ga[i * k + p] += s;
                }
            // dB = A^T . g
            for (std::size_t p = 0; p < k; ++p)
                for (std::size_t j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < m; ++i) s += aval[i * k + p] * g[i * n + j];
                    gb[p * n + j] += s;
                }
        });
    return wrap(id);
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    const int ia = require_recorded(a, "add");
    const int ib = require_recorded(b, "add");
    const int id = record("add", a.shape(), std::move(out), {ia, ib},
                          [ia, ib](Tape& tape, const std::vector<double>& g) {
                              auto& ga = tape.grad_buffer(ia);
                              auto& gb = tape.grad_buffer(ib);
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                  ga[i] += g[i];
                                  gb[i] += g[i];
                              }
                          });
    return wrap(id);
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    const int ia = require_recorded(a, "sub");
    const int ib = require_recorded(b, "sub");
    const int id = record("sub", a.shape(), std::move(out), {ia, ib},
                          [ia, ib](Tape& tape, const std::vector<double>& g) {
                              auto& ga = tape.grad_buffer(ia);
                              auto& gb = tape.grad_buffer(ib);
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                  ga[i] += g[i];
                                  gb[i] -= g[i];
                              }
                          });
    return wrap(id);
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    const int ia = require_recorded(a, "mul");
    const int ib = require_recorded(b, "mul");
    auto aval = a.data();
    auto bval = b.data();
    const int id = record("mul", a.shape(), std::move(out), {ia, ib},
                          [ia, ib, aval, bval](Tape& tape, const std::vector<double>& g) {
                              auto& ga = tape.grad_buffer(ia);
                              auto& gb = tape.grad_buffer(ib);
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                  ga[i] += g[i] * bval[i];
                                  gb[i] += g[i] * aval[i];
                              }
                          });
    return wrap(id);
}

Tensor Tape::scale(const Tensor& a, double k) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * k;
    const int ia = require_recorded(a, "scale");
    const int id = record("scale", a.shape(), std::move(out), {ia},
                          [ia, k](Tape& tape, const std::vector<double>& g) {
                              auto& ga = tape.grad_buffer(ia);
                              for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * k;
                          });
    return wrap(id);
}

Tensor Tape::add_rowvec(const Tensor& m, const Tensor& v) {
    if (m.ndim() != 2 || v.ndim() != 1 || v.size() != m.cols())
        throw ShapeError("add_rowvec: shapes " + shape_str(m.shape()) + " and " + shape_str(v.shape()));
    const std::size_t r = m.rows(), c = m.cols();
    std::vector<double> out(m.size());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = m[i * c + j] + v[j];
    const int im = require_recorded(m, "add_rowvec");
    const int iv = require_recorded(v, "add_rowvec");
    const int id = record("add_rowvec", m.shape(), std::move(out), {im, iv},
                          [im, iv, r, c](Tape& tape, const std::vector<double>& g) {
                              auto& gm = tape.grad_buffer(im);
                              auto& gv = tape.grad_buffer(iv);
                              for (std::size_t i = 0; i < r; ++i)
                                  for (std::size_t j = 0; j < c; ++j) {
                                      gm[i * c + j] += g[i * c + j];
                                      gv[j] += g[i * c + j];
                                  }
                          });
    return wrap(id);
}

Tensor Tape::sigmoid(const Tensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x[i];
        // Split by sign to avoid overflow in exp.
        out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    const int ix = require_recorded(x, "sigmoid");
    auto saved = out;
    const int id = record("sigmoid", x.shape(), std::move(out), {ix},
                          [ix, saved](Tape& tape, const std::vector<double>& g) {
                              auto& gx = tape.grad_buffer(ix);
                              for (std::size_t i = 0; i < g.size(); ++i)
                                  gx[i] += g[i] * saved[i] * (1.0 - saved[i]);
                          });
    return wrap(id);
}

Tensor Tape::relu(const Tensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
    const int ix = require_recorded(x, "relu");
    auto xval = x.data();
    const int id = record("relu", x.shape(), std::move(out), {ix},
                          [ix, xval](Tape& tape, const std::vector<double>& g) {
                              auto& gx = tape.grad_buffer(ix);
                              for (std::size_t i = 0; i < g.size(); ++i)
                                  if (xval[i] > 0.0) gx[i] += g[i];
                          });
    return wrap(id);
}

Tensor Tape::log(const Tensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (x[i] <= 0.0) throw ValueError("log: non-positive input " + std::to_string(x[i]));
        out[i] = std::log(x[i]);
    }
    const int ix = require_recorded(x, "log");
    auto xval = x.data();
    const int id = record("log", x.shape(), std::move(out), {ix},
                          [ix, xval](Tape& tape, const std::vector<double>& g) {
                              auto& gx = tape.grad_buffer(ix);
                              for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / xval[i];
                          });
    return wrap(id);
}

Tensor Tape::sum(const Tensor& x) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i];
    const int ix = require_recorded(x, "sum");
    const std::size_t n = x.size();
    const int id = record("sum", Shape{}, {s}, {ix},
                          [ix, n](Tape& tape, const std::vector<double>& g) {
                              auto& gx = tape.grad_buffer(ix);
                              for (std::size_t i = 0; i < n; ++i) gx[i] += g[0];
                          });
    return wrap(id);
}

Tensor Tape::mean(const Tensor& x) {
    if (x.size() == 0) throw ShapeError("mean: empty tensor");
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i];
    const std::size_t n = x.size();
    const int ix = require_recorded(x, "mean");
    const int id = record("mean", Shape{}, {s / static_cast<double>(n)}, {ix},
                          [ix, n](Tape& tape, const std::vector<double>& g) {
                              auto& gx = tape.grad_buffer(ix);
                              const double gi = g[0] / static_cast<double>(n);
                              for (std::size_t i = 0; i < n; ++i) gx[i] += gi;
                          });
    return wrap(id);
}

Tensor Tape::dropout(const Tensor& x, double rate, RngState& rng) {
    if (!(rate >= 0.0 && rate < 1.0))
        throw ValueError("dropout: rate must be in [0,1), got " + std::to_string(rate));
    std::vector<double> mask(x.size(), 1.0);
    if (rate > 0.0) {
        const double keep_scale = 1.0 / (1.0 - rate);
        for (std::size_t i = 0; i < mask.size(); ++i)
            mask[i] = rng.uniform() < rate ? 0.0 : keep_scale;
    }
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * mask[i];
    const int ix = require_recorded(x, "dropout");
    const int id = record("dropout", x.shape(), std::move(out), {ix},
                          [ix, mask](Tape& tape, const std::vector<double>& g) {
                              auto& gx = tape.grad_buffer(ix);
                              for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
                          });
    return wrap(id);
}

Tensor Tape::cosine_similarity(const Tensor& u, const Tensor& v) {
    if (u.size() != v.size() || u.size() == 0)
        throw ShapeError("cosine_similarity: shapes " + shape_str(u.shape()) + " and " +
                         shape_str(v.shape()));
    const std::size_t n = u.size();
    const double nu = norm_kernel(u.data().data(), n);
    const double nv = norm_kernel(v.data().data(), n);
    if (nu == 0.0 || nv == 0.0) throw ValueError("cosine_similarity: degenerate zero-norm vector");
    const double dot = dot_kernel(u.data().data(), v.data().data(), n);
    const double cosv = dot / (nu * nv);
    const int iu = require_recorded(u, "cosine_similarity");
    const int iv = require_recorded(v, "cosine_similarity");
    auto uval = u.data();
    auto vval = v.data();
    const int id = record("cosine_similarity", Shape{}, {cosv}, {iu, iv},
                          [iu, iv, uval, vval, nu, nv, cosv, n](Tape& tape, const std::vector<double>& g) {
                              auto& gu = tape.grad_buffer(iu);
                              auto& gv = tape.grad_buffer(iv);
                              for (std::size_t i = 0; i < n; ++i) {
                                  gu[i] += g[0] * (vval[i] / (nu * nv) - cosv * uval[i] / (nu * nu));
                                  gv[i] += g[0] * (uval[i] / (nu * nv) - cosv * vval[i] / (nv * nv));
                              }
                          });
    return wrap(id);
}

Tensor Tape::custom(const char* op_name, Shape out_shape, std::vector<double> out_value,
                    std::vector<int> inputs, BackwardFn backward) {
    for (int i : inputs)
        if (i < 0 || static_cast<std::size_t>(i) >= nodes_.size())
            throw ValueError(std::string(op_name) + ": input node out of range");
    const int id = record(op_name, std::move(out_shape), std::move(out_value), std::move(inputs),
                          std::move(backward));
    return wrap(id);
}

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1)
        throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (!loss.recorded() || static_cast<std::size_t>(loss.node()) >= nodes_.size())
        throw ValueError("backward: loss is not recorded on this tape");
    grads_.assign(nodes_.size(), {});
    grads_[loss.node()].assign(1, 1.0);
    ran_backward_ = true;
    for (int id = loss.node(); id >= 0; --id) {
        if (grads_[id].empty()) continue;  // not reachable from the loss
        const Node& node = nodes_[id];
        if (node.backward) node.backward(*this, grads_[id]);
    }
}

std::vector<double>& Tape::grad_buffer(int node) {
    auto& buf = grads_[node];
    if (buf.empty()) buf.assign(nodes_[node].value.size(), 0.0);
    return buf;
}

Tensor Tape::grad(const Tensor& t) const {
    if (!t.recorded() || static_cast<std::size_t>(t.node()) >= nodes_.size())
        throw ValueError("grad: tensor is not recorded on this tape");
    if (!ran_backward_) throw ValueError("grad: backward() has not been run");
    const Node& node = nodes_[t.node()];
    const auto& buf = grads_[t.node()];
    if (buf.empty()) return Tensor(node.shape, 0.0);
    return Tensor(node.shape, buf);
}

bool Tape::reached(const Tensor& t) const {
    if (!t.recorded() || static_cast<std::size_t>(t.node()) >= nodes_.size())
        throw ValueError("reached: tensor is not recorded on this tape");
    return ran_backward_ && !grads_[t.node()].empty();
}

const std::vector<double>& Tape::node_value(int node) const { return nodes_[node].value; }
const Shape& Tape::node_shape(int node) const { return nodes_[node].shape; }

}  // namespace cbm
