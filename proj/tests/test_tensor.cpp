#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cbm/rng.hpp"
#include "cbm/tensor.hpp"

using namespace cbm;

TEST_CASE("matmul identity and hand values") {
    Tape tape;
    Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
    Tensor b = Tensor::matrix(2, 2, {3, 4, 5, 6});
    Tensor out = tape.matmul(eye, b);
    CHECK(out.same_values(b));

    Tensor row = Tensor::matrix(1, 2, {1, 2});
    Tensor col = Tensor::matrix(2, 1, {3, 4});
    CHECK(tape.matmul(row, col).item() == doctest::Approx(11.0).epsilon(1e-15));
}

TEST_CASE("matmul rejects mismatched shapes naming both") {
    Tape tape;
    Tensor a(Shape{2, 3}, 1.0);
    Tensor b(Shape{2, 3}, 1.0);
    CHECK_THROWS_WITH_AS(tape.matmul(a, b), doctest::Contains("[2x3]"), ShapeError);
}

TEST_CASE("matmul gradients follow g.b^T and a^T.g") {
    Tape tape;
    Tensor a = tape.leaf(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
    Tensor b = tape.leaf(Tensor::matrix(3, 2, {1, 0, 0, 1, 1, 1}));
    Tensor loss = tape.sum(tape.matmul(a, b));
    tape.backward(loss);
    // dA = ones(2x2) . B^T
    Tensor ga = tape.grad(a);
    CHECK(ga.at(0, 0) == doctest::Approx(1.0));
    CHECK(ga.at(0, 2) == doctest::Approx(2.0));
    // dB = A^T . ones(2x2)
    Tensor gb = tape.grad(b);
    CHECK(gb.at(0, 0) == doctest::Approx(5.0));
    CHECK(gb.at(2, 1) == doctest::Approx(9.0));
}

TEST_CASE("sigmoid values") {
    Tape tape;
    Tensor x = Tensor::vec({0.0, 50.0, 1.0, -50.0});
    Tensor s = tape.sigmoid(x);
    CHECK(s[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(std::abs(s[1] - 1.0) < 1e-15);
    CHECK(s[2] == doctest::Approx(0.7310585786300049).epsilon(1e-14));
    CHECK(s[3] > 0.0);  // no underflow to exactly representable garbage
    CHECK(s.all_finite());
}

TEST_CASE("relu values and zero subgradient at 0") {
    Tape tape;
    Tensor x = tape.leaf(Tensor::vec({-3.0, 0.0, 3.0}));
    Tensor r = tape.relu(x);
    CHECK(r[0] == 0.0);
    CHECK(r[1] == 0.0);
    CHECK(r[2] == 3.0);
    Tensor loss = tape.sum(r);
    tape.backward(loss);
    Tensor g = tape.grad(x);
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 0.0);  // stated convention
    CHECK(g[2] == 1.0);
}

TEST_CASE("cosine similarity values and errors") {
    Tape tape;
    Tensor u = Tensor::vec({1, 2, 3});
    CHECK(tape.cosine_similarity(u, u).item() == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(tape.cosine_similarity(Tensor::vec({1, 0}), Tensor::vec({0, 1})).item() ==
          doctest::Approx(0.0));
    // 1/sqrt(2) by the direct formula
    CHECK(tape.cosine_similarity(Tensor::vec({1, 0}), Tensor::vec({1, 1})).item() ==
          doctest::Approx(0.7071067811865475).epsilon(1e-14));
    CHECK_THROWS_AS(tape.cosine_similarity(Tensor::vec({0, 0}), Tensor::vec({1, 1})), ValueError);
}

TEST_CASE("cosine similarity stays within [-1,1] up to 1e-12 on random vectors") {
    RngState rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        Tape tape;
        const std::size_t d = 1 + rng.uniform_int(8);
        Tensor u(Shape{d}), v(Shape{d});
        for (std::size_t i = 0; i < d; ++i) {
            u[i] = rng.normal();
            v[i] = rng.normal();
        }
        if (norm_kernel(u.data().data(), d) == 0.0 || norm_kernel(v.data().data(), d) == 0.0) continue;
        const double c = tape.cosine_similarity(u, v).item();
        CHECK(c >= -1.0 - 1e-12);
        CHECK(c <= 1.0 + 1e-12);
    }
}

TEST_CASE("cosine similarity gradient matches finite differences") {
    RngState rng(11);
    std::vector<double> uv = {0.3, -1.2, 0.7};
    std::vector<double> vv = {1.1, 0.4, -0.2};
    auto value = [&](const std::vector<double>& a, const std::vector<double>& b) {
        Tape tape;
        return tape.cosine_similarity(Tensor::vec(a), Tensor::vec(b)).item();
    };
    Tape tape;
    Tensor u = tape.leaf(Tensor::vec(uv));
    Tensor v = tape.leaf(Tensor::vec(vv));
    tape.backward(tape.cosine_similarity(u, v));
    Tensor gu = tape.grad(u), gv = tape.grad(v);
    const double h = 1e-6;
    for (std::size_t i = 0; i < 3; ++i) {
        auto up = uv, down = uv;
        up[i] += h;
        down[i] -= h;
        CHECK(gu[i] == doctest::Approx((value(up, vv) - value(down, vv)) / (2 * h)).epsilon(1e-6));
        auto vup = vv, vdown = vv;
        vup[i] += h;
        vdown[i] -= h;
        CHECK(gv[i] == doctest::Approx((value(uv, vup) - value(uv, vdown)) / (2 * h)).epsilon(1e-6));
    }
}

TEST_CASE("dropout identity at rate 0 and invalid rates") {
    Tape tape;
    RngState rng(3);
    Tensor x = Tensor::vec({1, 2, 3});
    CHECK(tape.dropout(x, 0.0, rng).same_values(x));
    CHECK_THROWS_AS(tape.dropout(x, 1.0, rng), ValueError);
    CHECK_THROWS_AS(tape.dropout(x, -0.1, rng), ValueError);
}

TEST_CASE("dropout survivors scale by 1/(1-rate) and mean stays near 1") {
    Tape tape;
    RngState rng(17);
    const std::size_t n = 1000000;
    Tensor x(Shape{n}, 1.0);
    Tensor d = tape.dropout(x, 0.2, rng);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double v = d[i];
        CHECK((v == 0.0 || v == doctest::Approx(1.25)));
        sum += v;
    }
    CHECK(sum / static_cast<double>(n) == doctest::Approx(1.0).epsilon(0.005));
}

TEST_CASE("dropout is deterministic given the seed") {
    Tensor x(Shape{128}, 1.0);
    Tape t1, t2;
    RngState r1(99), r2(99);
    CHECK(t1.dropout(x, 0.5, r1).same_values(t2.dropout(x, 0.5, r2)));
}

TEST_CASE("backward of sum gives ones") {
    Tape tape;
    Tensor x = tape.leaf(Tensor::vec({4.0, -2.0, 0.5}));
    tape.backward(tape.sum(x));
    Tensor g = tape.grad(x);
    CHECK(g[0] == 1.0);
    CHECK(g[1] == 1.0);
    CHECK(g[2] == 1.0);
}

TEST_CASE("backward of sigmoid(w*x) at w=0, x=1 is 0.25") {
    Tape tape;
    Tensor w = tape.leaf(Tensor::matrix(1, 1, {0.0}));
    Tensor x = Tensor::matrix(1, 1, {1.0});
    Tensor loss = tape.sum(tape.sigmoid(tape.matmul(x, w)));
    tape.backward(loss);
    CHECK(tape.grad(w)[0] == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("backward rejects non-scalar losses") {
    Tape tape;
    Tensor x = tape.leaf(Tensor::vec({1.0, 2.0}));
    CHECK_THROWS_AS(tape.backward(x), ShapeError);
}

TEST_CASE("gradients of unreached parameters read as zeros") {
    Tape tape;
    Tensor used = tape.leaf(Tensor::vec({1.0}));
    Tensor unused = tape.leaf(Tensor::vec({5.0}));
    tape.backward(tape.sum(used));
    CHECK_FALSE(tape.reached(unused));
    CHECK(tape.grad(unused)[0] == 0.0);
}

TEST_CASE("forward+backward is bit-identical across replays with one seed") {
    auto run = [] {
        Tape tape;
        RngState rng(123);
        Tensor w = tape.leaf(Tensor::matrix(4, 3, {0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8, 0.9,
                                                   1.0, -1.1, 1.2}));
        Tensor x(Shape{2, 4});
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
        Tensor h = tape.dropout(tape.relu(tape.matmul(x, w)), 0.3, rng);
        Tensor loss = tape.mean(tape.sigmoid(h));
        tape.backward(loss);
        auto out = tape.grad(w).data();
        out.push_back(loss.item());
        return out;
    };
    CHECK(run() == run());
}

TEST_CASE("mlp gradients match finite differences on random small nets") {
    RngState rng(2024);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t in = 2 + rng.uniform_int(4);
        const std::size_t hidden = 2 + rng.uniform_int(6);
        const std::size_t out_dim = 1 + rng.uniform_int(3);
        Tensor w1(Shape{in, hidden}), b1(Shape{hidden}), w2(Shape{hidden, out_dim}), b2(Shape{out_dim});
        for (auto* t : {&w1, &w2})
            for (std::size_t i = 0; i < t->size(); ++i) (*t)[i] = rng.normal() * 0.7;
        for (auto* t : {&b1, &b2})
            for (std::size_t i = 0; i < t->size(); ++i) (*t)[i] = rng.normal() * 0.2;
        Tensor x(Shape{3, in});
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();

        auto eval = [&](Tensor& w1v, Tensor& b1v, Tensor& w2v, Tensor& b2v, Tape* out_tape,
                        std::vector<Tensor>* leaves) {
            Tape local;
            Tape& tape = out_tape ? *out_tape : local;
            Tensor lw1 = tape.leaf(w1v), lb1 = tape.leaf(b1v);
            Tensor lw2 = tape.leaf(w2v), lb2 = tape.leaf(b2v);
            if (leaves) *leaves = {lw1, lb1, lw2, lb2};
            Tensor h = tape.relu(tape.add_rowvec(tape.matmul(x, lw1), lb1));
            Tensor o = tape.sigmoid(tape.add_rowvec(tape.matmul(h, lw2), lb2));
            return tape.mean(tape.mul(o, o));
        };

        Tape tape;
        std::vector<Tensor> leaves;
        Tensor loss = eval(w1, b1, w2, b2, &tape, &leaves);
        tape.backward(loss);

        std::vector<Tensor*> params = {&w1, &b1, &w2, &b2};
        const double h = 1e-5;
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
            Tensor analytic = tape.grad(leaves[pi]);
            for (std::size_t i = 0; i < params[pi]->size(); ++i) {
                const double saved = (*params[pi])[i];
                (*params[pi])[i] = saved + h;
                const double up = eval(w1, b1, w2, b2, nullptr, nullptr).item();
                (*params[pi])[i] = saved - h;
                const double down = eval(w1, b1, w2, b2, nullptr, nullptr).item();
                (*params[pi])[i] = saved;
                const double fd = (up - down) / (2 * h);
                const double err = std::abs(fd - analytic[i]);
                const double denom = std::max(std::abs(fd), std::abs(analytic[i]));
                CHECK((err <= 1e-7 || err / denom <= 1e-4));
            }
        }
    }
}

TEST_CASE("rng streams are reproducible and splittable") {
    RngState a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    RngState parent(7);
    RngState c1 = parent.derive(1), c2 = parent.derive(2), c1_again = parent.derive(1);
    CHECK(c1.next_u64() == c1_again.next_u64());
    CHECK(c1.next_u64() != c2.next_u64());

    RngState u(5);
    for (int i = 0; i < 1000; ++i) {
        const double v = u.uniform();
        CHECK(v >= 0.0);
        CHECK(v < 1.0);
    }
}

TEST_CASE("rng normal moments") {
    RngState rng(31337);
    const int n = 200000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double v = rng.normal();
        sum += v;
        sq += v * v;
    }
    CHECK(sum / n == doctest::Approx(0.0).epsilon(0.02));
    CHECK(sq / n == doctest::Approx(1.0).epsilon(0.02));
}
