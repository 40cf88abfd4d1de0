#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <optional>
#include <vector>

#include "cbm/losses.hpp"
#include "cbm/rng.hpp"

using namespace cbm;

namespace {

// Independent O(batch^2 * a) oracle: enumerate every (pair, concept)
// combination explicitly and average the raw cosine contributions.
struct BruteCol {
    std::optional<double> d1, d2;
    std::size_t n1 = 0, n2 = 0;
};

BruteCol brute_force_col(const Tensor& q, const Tensor& c) {
    const std::size_t batch = q.rows(), dim = q.cols(), a = c.cols();
    BruteCol out;
    double s1 = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < batch; ++i) {
        for (std::size_t j = i + 1; j < batch; ++j) {
            double dot = 0.0, ni = 0.0, nj = 0.0;
            for (std::size_t k = 0; k < dim; ++k) {
                dot += q.at(i, k) * q.at(j, k);
                ni += q.at(i, k) * q.at(i, k);
                nj += q.at(j, k) * q.at(j, k);
            }
            const double cosv = dot / (std::sqrt(ni) * std::sqrt(nj));
            for (std::size_t attr = 0; attr < a; ++attr) {
                const bool bi = c.at(i, attr) >= 0.5;
                const bool bj = c.at(j, attr) >= 0.5;
                if (bi == bj) {
                    s1 += cosv;
                    ++out.n1;
                } else {
                    s2 += cosv;
                    ++out.n2;
                }
            }
        }
    }
    if (out.n1) out.d1 = s1 / static_cast<double>(out.n1);
    if (out.n2) out.d2 = s2 / static_cast<double>(out.n2);
    return out;
}

Tensor random_matrix(std::size_t r, std::size_t cols, RngState& rng) {
    Tensor m(Shape{r, cols});
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.normal();
    return m;
}

Tensor random_bits(std::size_t r, std::size_t cols, RngState& rng) {
    Tensor m(Shape{r, cols});
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    return m;
}

}  // namespace

TEST_CASE("concept_ce scalar evaluations") {
    Tape tape;
    // perfect prediction collapses to ~0 after the clamp
    Tensor perfect = Tensor::vec({1.0, 0.0});
    CHECK(concept_ce(tape, perfect, perfect).item() == doctest::Approx(0.0).epsilon(1e-10));
    // c=[1], c_hat=[0.5] -> ln 2
    CHECK(concept_ce(tape, Tensor::vec({0.5}), Tensor::vec({1.0})).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
    // two concepts at 0.5 -> 2 ln 2
    CHECK(concept_ce(tape, Tensor::vec({0.5, 0.5}), Tensor::vec({1.0, 0.0})).item() ==
          doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
    // batch mean: two identical rows keep the per-sample value
    Tensor probs = Tensor::matrix(2, 1, {0.5, 0.5});
    Tensor bits = Tensor::matrix(2, 1, {1.0, 1.0});
    CHECK(concept_ce(tape, probs, bits).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK_THROWS_AS(concept_ce(tape, Tensor::vec({0.5}), Tensor::vec({0.3})), ValueError);
}

TEST_CASE("concept_ce gradient matches finite differences with clamped edges") {
    Tape tape;
    Tensor probs = tape.leaf(Tensor::vec({0.3, 0.8, 0.5}));
    Tensor bits = Tensor::vec({1.0, 0.0, 1.0});
    Tensor loss = concept_ce(tape, probs, bits);
    tape.backward(loss);
    Tensor g = tape.grad(probs);
    auto value = [&bits](std::vector<double> p) {
        Tape t;
        return concept_ce(t, Tensor::vec(p), bits).item();
    };
    const double h = 1e-7;
    std::vector<double> base = {0.3, 0.8, 0.5};
    for (std::size_t i = 0; i < base.size(); ++i) {
        auto up = base, down = base;
        up[i] += h;
        down[i] -= h;
        CHECK(g[i] == doctest::Approx((value(up) - value(down)) / (2 * h)).epsilon(1e-5));
    }
}

TEST_CASE("col_distances degenerate and trivial cases") {
    // identical q, identical concepts: d1 = 1, d2 absent
    Tensor q = Tensor::matrix(2, 2, {1, 1, 1, 1});
    Tensor c = Tensor::matrix(2, 1, {1, 1});
    ColBatchStats s = col_distances(q, c);
    CHECK(s.d1.has_value());
    CHECK(*s.d1 == doctest::Approx(1.0).epsilon(1e-14));
    CHECK_FALSE(s.d2.has_value());

    // orthogonal q, all concepts differ: d2 = 0, d1 absent
    Tensor q2 = Tensor::matrix(2, 2, {1, 0, 0, 1});
    Tensor c2 = Tensor::matrix(2, 1, {1, 0});
    ColBatchStats s2 = col_distances(q2, c2);
    CHECK_FALSE(s2.d1.has_value());
    CHECK(*s2.d2 == doctest::Approx(0.0));

    CHECK_THROWS_AS(col_distances(Tensor::matrix(1, 2, {1, 0}), Tensor::matrix(1, 1, {1})), ValueError);
    CHECK_THROWS_AS(col_distances(Tensor::matrix(2, 2, {0, 0, 1, 0}), c2), ValueError);
}

TEST_CASE("col_distances three-sample worked example") {
    // q1=[1,0], q2=[1,1], q3=[0,1]; c1=c2=[1], c3=[0]
    Tensor q = Tensor::matrix(3, 2, {1, 0, 1, 1, 0, 1});
    Tensor c = Tensor::matrix(3, 1, {1, 1, 0});
    ColBatchStats s = col_distances(q, c);
    CHECK(*s.d1 == doctest::Approx(0.7071067811865475).epsilon(1e-12));
    CHECK(*s.d2 == doctest::Approx(0.35355339059327373).epsilon(1e-12));
    CHECK(s.d1_count == 1);
    CHECK(s.d2_count == 2);
}

TEST_CASE("col_distances matches the brute-force enumeration") {
    RngState rng(404);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t batch = 2 + rng.uniform_int(7);
        const std::size_t dim = 1 + rng.uniform_int(5);
        const std::size_t a = 1 + rng.uniform_int(6);
        Tensor q = random_matrix(batch, dim, rng);
        Tensor c = random_bits(batch, a, rng);
        const ColBatchStats fast = col_distances(q, c);
        const BruteCol ref = brute_force_col(q, c);
        CHECK(fast.d1.has_value() == ref.d1.has_value());
        CHECK(fast.d2.has_value() == ref.d2.has_value());
        if (ref.d1) CHECK(*fast.d1 == doctest::Approx(*ref.d1).epsilon(1e-12));
        if (ref.d2) CHECK(*fast.d2 == doctest::Approx(*ref.d2).epsilon(1e-12));
        CHECK(fast.d1_count == ref.n1);
        CHECK(fast.d2_count == ref.n2);
    }
}

TEST_CASE("col_loss hand values") {
    ColBatchStats s;
    s.d1 = 1.0;
    s.d2 = 0.0;
    CHECK(col_loss(s, 0.05) == doctest::Approx(0.0));
    s.d1 = 0.5;
    s.d2 = -0.2;
    CHECK(col_loss(s, 0.05) == doctest::Approx(0.51).epsilon(1e-14));
    s.d2.reset();
    CHECK(col_loss(s, 0.05) == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("col_penalty forward equals col_loss of col_distances") {
    RngState rng(88);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor q = random_matrix(2 + rng.uniform_int(6), 3, rng);
        Tensor c = random_bits(q.rows(), 4, rng);
        Tape tape;
        CHECK(col_penalty(tape, q, c, 0.05).item() ==
              doctest::Approx(col_loss(col_distances(q, c), 0.05)).epsilon(1e-13));
    }
}

TEST_CASE("col_penalty gradient matches finite differences") {
    RngState rng(1234);
    for (int trial = 0; trial < 8; ++trial) {
        const std::size_t batch = 2 + rng.uniform_int(4);
        const std::size_t dim = 2 + rng.uniform_int(3);
        Tensor q = random_matrix(batch, dim, rng);
        Tensor c = random_bits(batch, 3, rng);
        Tape tape;
        Tensor leaf = tape.leaf(q);
        tape.backward(col_penalty(tape, leaf, c, 0.05));
        Tensor g = tape.grad(leaf);
        const double h = 1e-6;
        for (std::size_t i = 0; i < q.size(); ++i) {
            Tensor up = q, down = q;
            up[i] += h;
            down[i] -= h;
            Tape t1, t2;
            const double fd = (col_penalty(t1, up, c, 0.05).item() -
                               col_penalty(t2, down, c, 0.05).item()) /
                              (2 * h);
            const double err = std::abs(fd - g[i]);
            CHECK((err <= 1e-7 || err / std::max(std::abs(fd), std::abs(g[i])) <= 1e-4));
        }
    }
}

TEST_CASE("classification_ce values and label validation") {
    Tape tape;
    Tensor uniform(Shape{1, 4}, 0.7);
    CHECK(classification_ce(tape, uniform, {2}).item() ==
          doctest::Approx(std::log(4.0)).epsilon(1e-13));
    Tensor margin = Tensor::matrix(1, 3, {50.0, 0.0, 0.0});
    CHECK(classification_ce(tape, margin, {0}).item() == doctest::Approx(0.0).epsilon(1e-15));
    Tensor single(Shape{2, 1}, 3.0);
    CHECK(classification_ce(tape, single, {0, 0}).item() == 0.0);
    CHECK_THROWS_AS(classification_ce(tape, uniform, {4}), ValueError);
    CHECK_THROWS_AS(classification_ce(tape, uniform, {-1}), ValueError);
}

TEST_CASE("permutation invariance of col distances and losses") {
    RngState rng(55);
    Tensor q = random_matrix(6, 4, rng);
    Tensor c = random_bits(6, 5, rng);
    const ColBatchStats base = col_distances(q, c);
    // rotate rows by two
    std::vector<std::size_t> perm = {2, 3, 4, 5, 0, 1};
    Tensor qp(Shape{6, 4}), cp(Shape{6, 5});
    for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t j = 0; j < 4; ++j) qp.at(i, j) = q.at(perm[i], j);
        for (std::size_t j = 0; j < 5; ++j) cp.at(i, j) = c.at(perm[i], j);
    }
    const ColBatchStats permuted = col_distances(qp, cp);
    CHECK(*permuted.d1 == doctest::Approx(*base.d1).epsilon(1e-12));
    CHECK(*permuted.d2 == doctest::Approx(*base.d2).epsilon(1e-12));
}

TEST_CASE("aligning a same-concept pair never increases col_loss") {
    RngState rng(777);
    for (int trial = 0; trial < 100; ++trial) {
        // two-sample batch; the pair must share at least one concept
        Tensor c = random_bits(2, 4, rng);
        std::size_t shared = 0;
        for (std::size_t k = 0; k < 4; ++k)
            if (c.at(0, k) == c.at(1, k)) ++shared;
        if (shared == 0) continue;
        Tensor q = random_matrix(2, 3, rng);
        const double before = col_loss(col_distances(q, c), 0.05);
        // move row 1 toward row 0 (increases their cosine)
        Tensor q2 = q;
        for (std::size_t k = 0; k < 3; ++k) q2.at(1, k) = 0.5 * q.at(1, k) + 0.5 * q.at(0, k);
        double n = 0.0;
        for (std::size_t k = 0; k < 3; ++k) n += q2.at(1, k) * q2.at(1, k);
        if (n == 0.0) continue;
        double cos_before = 0.0, cos_after = 0.0, n0 = 0.0, n1b = 0.0, n1a = 0.0;
        for (std::size_t k = 0; k < 3; ++k) {
            n0 += q.at(0, k) * q.at(0, k);
            n1b += q.at(1, k) * q.at(1, k);
            n1a += q2.at(1, k) * q2.at(1, k);
            cos_before += q.at(0, k) * q.at(1, k);
            cos_after += q.at(0, k) * q2.at(1, k);
        }
        cos_before /= std::sqrt(n0) * std::sqrt(n1b);
        cos_after /= std::sqrt(n0) * std::sqrt(n1a);
        if (cos_after < cos_before) continue;  // interpolation can only move cosine up
        const double after = col_loss(col_distances(q2, c), 0.05);
        CHECK(after <= before + 1e-12);
    }
}

TEST_CASE("total_loss composition and breakdown recombine") {
    RngState rng(9);
    Tape tape;
    ForwardOutput out;
    out.q = tape.leaf(random_matrix(4, 3, rng));
    Tensor logits = tape.leaf(random_matrix(4, 2, rng));
    out.concept_probs = tape.sigmoid(tape.leaf(random_matrix(4, 5, rng)));
    out.task_logits = logits;
    out.aux_logits = tape.leaf(random_matrix(4, 2, rng));
    Tensor c = random_bits(4, 5, rng);
    std::vector<int> y = {0, 1, 1, 0};

    LossWeights w;  // defaults: alpha=beta=gamma_col=0.01, lambda=0.05
    CHECK(w.alpha == 0.01);
    CHECK(w.beta == 0.01);
    CHECK(w.gamma_col == 0.01);
    CHECK(w.lambda_d2 == 0.05);

    TotalLoss tl = total_loss(tape, out, c, y, w);
    CHECK(tl.breakdown.total == doctest::Approx(tl.breakdown.recombined()).epsilon(1e-12));
    CHECK(tl.breakdown.has_aux);
    CHECK(tl.breakdown.has_col);

    // all weights zero: task CE alone
    LossWeights zero;
    zero.alpha = zero.beta = zero.gamma_col = 0.0;
    Tape t2;
    ForwardOutput out2;
    out2.q = t2.leaf(out.q);
    out2.concept_probs = t2.leaf(out.concept_probs);
    out2.task_logits = t2.leaf(logits);
    TotalLoss task_only = total_loss(t2, out2, c, y, zero);
    Tape t3;
    CHECK(task_only.loss.item() ==
          doctest::Approx(classification_ce(t3, logits, y).item()).epsilon(1e-14));
}

TEST_CASE("total_loss requires the aux head when beta > 0") {
    Tape tape;
    ForwardOutput out;
    out.q = tape.leaf(Tensor::matrix(2, 2, {1, 0, 0, 1}));
    out.concept_probs = tape.leaf(Tensor::matrix(2, 1, {0.4, 0.6}));
    out.task_logits = tape.leaf(Tensor::matrix(2, 2, {0, 1, 1, 0}));
    LossWeights w;
    CHECK_THROWS_AS(total_loss(tape, out, Tensor::matrix(2, 1, {1, 0}), {0, 1}, w), ValueError);
}

TEST_CASE("total_loss gradient matches finite differences through every term") {
    RngState rng(31);
    // tiny coop-style computation: params -> q -> heads -> composite
    Tensor w_enc = random_matrix(3, 4, rng);
    Tensor w_con = random_matrix(4, 3, rng);
    Tensor w_aux = random_matrix(4, 2, rng);
    Tensor w_task = random_matrix(3, 2, rng);
    Tensor x = random_matrix(5, 3, rng);
    Tensor c = random_bits(5, 3, rng);
    std::vector<int> y = {0, 1, 0, 1, 1};
    LossWeights w;

    auto eval = [&](Tape* keep, std::vector<Tensor>* leaves) {
        Tape local;
        Tape& tape = keep ? *keep : local;
        Tensor le = tape.leaf(w_enc), lc = tape.leaf(w_con), la = tape.leaf(w_aux),
               lt = tape.leaf(w_task);
        if (leaves) *leaves = {le, lc, la, lt};
        ForwardOutput out;
        out.q = tape.matmul(x, le);
        out.concept_probs = tape.sigmoid(tape.matmul(out.q, lc));
        out.aux_logits = tape.matmul(out.q, la);
        out.task_logits = tape.matmul(out.concept_probs, lt);
        return total_loss(tape, out, c, y, w).loss;
    };

    Tape tape;
    std::vector<Tensor> leaves;
    Tensor loss = eval(&tape, &leaves);
    tape.backward(loss);

    std::vector<Tensor*> params = {&w_enc, &w_con, &w_aux, &w_task};
    const double h = 1e-5;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor analytic = tape.grad(leaves[pi]);
        for (std::size_t i = 0; i < params[pi]->size(); ++i) {
            const double saved = (*params[pi])[i];
            (*params[pi])[i] = saved + h;
            const double up = eval(nullptr, nullptr).item();
            (*params[pi])[i] = saved - h;
            const double down = eval(nullptr, nullptr).item();
            (*params[pi])[i] = saved;
            const double fd = (up - down) / (2 * h);
            const double err = std::abs(fd - analytic[i]);
            CHECK((err <= 1e-7 || err / std::max(std::abs(fd), std::abs(analytic[i])) <= 1e-4));
        }
    }
}

TEST_CASE("concept_squared_error values and gradient") {
    Tape tape;
    Tensor pred = tape.leaf(Tensor::vec({0.2, 0.9}));
    Tensor target = Tensor::vec({0.0, 1.0});
    Tensor loss = concept_squared_error(tape, pred, target);
    CHECK(loss.item() == doctest::Approx(0.04 + 0.01).epsilon(1e-12));
    tape.backward(loss);
    Tensor g = tape.grad(pred);
    CHECK(g[0] == doctest::Approx(2.0 * 0.2).epsilon(1e-12));
    CHECK(g[1] == doctest::Approx(2.0 * (0.9 - 1.0)).epsilon(1e-12));
}
