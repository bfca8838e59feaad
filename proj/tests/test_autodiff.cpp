#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "oracles.hpp"
#include "tpl/rng.hpp"
#include "tpl/tensor.hpp"

using tpl::Tape;
using tpl::Tensor;

namespace {

Tensor random_tensor(tpl::Rng& rng, std::vector<std::size_t> shape, bool requires_grad = false,
                     double scl = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (std::size_t i = 0; i < t.size(); ++i) t.at(i) = rng.gaussian() * scl;
    return t;
}

}  // namespace

TEST_CASE("matmul computes standard products") {
    Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor b = Tensor::from({2, 2}, {3, 4, 5, 6});
    Tensor c = tpl::matmul(nullptr, eye, b);
    for (std::size_t i = 0; i < 4; ++i) CHECK(c.at(i) == b.at(i));

    Tensor row = Tensor::from({1, 2}, {1, 2});
    Tensor col = Tensor::from({2, 1}, {3, 4});
    CHECK(tpl::matmul(nullptr, row, col).item() == 11.0);
}

TEST_CASE("matmul rejects mismatched shapes, naming both") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    try {
        tpl::matmul(nullptr, a, b);
        FAIL("expected ShapeError");
    } catch (const tpl::ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("(2x3)") != std::string::npos);
        CHECK(msg.find("(4x2)") != std::string::npos);
    }
}

TEST_CASE("matmul gradient matches finite differences") {
    tpl::Rng rng(101);
    Tensor a = random_tensor(rng, {5, 4}, true);
    Tensor b = random_tensor(rng, {4, 3}, true);
    auto res = oracle::finite_diff_check(
        [&](Tape& t) { return tpl::sum_all(&t, tpl::matmul(&t, a, b)); }, {a, b});
    CHECK(res.max_rel_err <= 1e-6);
}

TEST_CASE("softmax_rows basics") {
    SECTION("uniform row") {
        Tensor l = Tensor::from({1, 3}, {0, 0, 0});
        Tensor y = tpl::softmax_rows(nullptr, l);
        for (std::size_t j = 0; j < 3; ++j) CHECK(y.at(0, j) == Catch::Approx(1.0 / 3.0));
    }
    SECTION("single survivor under mask") {
        Tensor l = Tensor::from({1, 2}, {5, 5});
        Tensor m = Tensor::from({1, 2}, {0, tpl::kNegInf});
        Tensor y = tpl::softmax_rows(nullptr, l, &m);
        CHECK(y.at(0, 0) == 1.0);
        CHECK(y.at(0, 1) == 0.0);
    }
    SECTION("causal mask sparsity pattern") {
        tpl::Rng rng(7);
        Tensor l = random_tensor(rng, {3, 3});
        Tensor m = tpl::make_causal_mask(3);
        Tensor y = tpl::softmax_rows(nullptr, l, &m);
        for (std::size_t i = 0; i < 3; ++i) {
            std::size_t nonzeros = 0;
            for (std::size_t j = 0; j < 3; ++j)
                if (y.at(i, j) != 0.0) ++nonzeros;
            CHECK(nonzeros == i + 1);
        }
    }
    SECTION("fully masked row is rejected") {
        Tensor l = Tensor::from({1, 2}, {1, 2});
        Tensor m = Tensor::from({1, 2}, {tpl::kNegInf, tpl::kNegInf});
        CHECK_THROWS_AS(tpl::softmax_rows(nullptr, l, &m), tpl::ContractError);
    }
}

TEST_CASE("softmax rows sum to one under random masks") {
    tpl::Rng rng(202);
    for (int it = 0; it < 40; ++it) {
        const std::size_t n = 2 + rng.below(6), m = 2 + rng.below(6);
        Tensor l = random_tensor(rng, {n, m}, false, 3.0);
        Tensor mask = Tensor::zeros({n, m});
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < m; ++j)
                if (rng.uniform() < 0.3) mask.at(i, j) = tpl::kNegInf;
            mask.at(i, rng.below(m)) = 0.0;  // keep every row alive
        }
        const double scl = rng.uniform() < 0.5 ? 1.0 : 1.0 / std::sqrt(8.0);
        Tensor y = tpl::softmax_rows(nullptr, l, &mask, scl);
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < m; ++j) s += y.at(i, j);
            CHECK(std::fabs(s - 1.0) <= 1e-9);
        }
    }
}

TEST_CASE("softmax_rows gradient matches finite differences") {
    tpl::Rng rng(303);
    Tensor l = random_tensor(rng, {4, 5}, true);
    Tensor mask = Tensor::zeros({4, 5});
    mask.at(0, 3) = tpl::kNegInf;
    mask.at(2, 0) = tpl::kNegInf;
    Tensor w = random_tensor(rng, {4, 5});
    auto res = oracle::finite_diff_check(
        [&](Tape& t) {
            Tensor y = tpl::softmax_rows(&t, l, &mask, 0.5);
            return tpl::sum_all(&t, tpl::mul(&t, y, w));
        },
        {l});
    CHECK(res.max_rel_err <= 1e-4);
}

TEST_CASE("masked_softmax_pruned with all-ones keep equals plain softmax") {
    tpl::Rng rng(404);
    Tensor l = random_tensor(rng, {6, 6}, false, 2.0);
    Tensor keep = Tensor::ones({6});
    Tensor a = tpl::masked_softmax_pruned(nullptr, l, keep);
    Tensor b = tpl::softmax_rows(nullptr, l);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::fabs(a.at(i) - b.at(i)) <= 1e-12);
}

TEST_CASE("masked_softmax_pruned diagonal survives alone") {
    // keep = e_1: row 0 may attend to itself (diagonal) and token 1 only.
    Tensor l = Tensor::from({3, 3}, {0.3, -0.2, 0.9, 0.1, 0.4, -0.5, 1.2, 0.0, 0.7});
    Tensor keep = Tensor::from({3}, {0, 1, 0});
    Tensor a = tpl::masked_softmax_pruned(nullptr, l, keep);
    CHECK(a.at(0, 0) > 0.0);
    CHECK(a.at(0, 1) > 0.0);
    CHECK(a.at(0, 2) == 0.0);
    double s = a.at(0, 0) + a.at(0, 1);
    CHECK(std::fabs(s - 1.0) <= 1e-12);
}

TEST_CASE("masked_softmax_pruned rows always sum to one") {
    tpl::Rng rng(505);
    for (int it = 0; it < 40; ++it) {
        const std::size_t n = 2 + rng.below(7);
        Tensor l = random_tensor(rng, {n, n}, false, 2.0);
        Tensor keep = Tensor::zeros({n});
        keep.at(rng.below(n)) = 1.0;
        for (std::size_t j = 0; j < n; ++j)
            if (rng.uniform() < 0.5) keep.at(j) = 1.0;
        Tensor a = tpl::masked_softmax_pruned(nullptr, l, keep);
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += a.at(i, j);
            CHECK(std::fabs(s - 1.0) <= 1e-9);
        }
    }
}

TEST_CASE("masked_softmax_pruned equals physical deletion on kept rows") {
    tpl::Rng rng(606);
    for (int it = 0; it < 30; ++it) {
        const std::size_t n = 3 + rng.below(6);
        Tensor l = random_tensor(rng, {n, n}, false, 2.0);
        std::vector<std::size_t> kept;
        Tensor keep = Tensor::zeros({n});
        for (std::size_t j = 0; j < n; ++j)
            if (rng.uniform() < 0.6) {
                keep.at(j) = 1.0;
                kept.push_back(j);
            }
        if (kept.empty()) {
            keep.at(0) = 1.0;
            kept.push_back(0);
        }
        Tensor a = tpl::masked_softmax_pruned(nullptr, l, keep);
        auto ref = oracle::deleted_softmax(l, kept);
        for (std::size_t r = 0; r < kept.size(); ++r)
            for (std::size_t c = 0; c < kept.size(); ++c)
                CHECK(std::fabs(a.at(kept[r], kept[c]) - ref[r][c]) <= 1e-6);
    }
}

TEST_CASE("masked_softmax_pruned composes with a causal mask") {
    tpl::Rng rng(707);
    const std::size_t n = 5;
    Tensor l = random_tensor(rng, {n, n});
    Tensor causal = tpl::make_causal_mask(n);
    Tensor masked_logits = tpl::add(nullptr, l, causal);
    Tensor keep = Tensor::from({n}, {1, 0, 1, 1, 0});
    Tensor a = tpl::masked_softmax_pruned(nullptr, masked_logits, keep);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) CHECK(a.at(i, j) == 0.0);  // causal zeros survive
    // Row 3 sees kept columns {0, 2} plus itself.
    CHECK(a.at(3, 1) == 0.0);
    CHECK(a.at(3, 0) > 0.0);
    CHECK(a.at(3, 2) > 0.0);
    CHECK(a.at(3, 3) > 0.0);
}

TEST_CASE("masked_softmax_pruned gradients match finite differences") {
    tpl::Rng rng(808);
    for (int it = 0; it < 8; ++it) {
        const std::size_t n = 3 + rng.below(4);
        Tensor l = random_tensor(rng, {n, n}, true);
        Tensor keep = Tensor::zeros({n}, true);
        for (std::size_t j = 0; j < n; ++j)
            keep.at(j) = it % 2 == 0 ? rng.uniform(0.05, 0.95)        // soft interior values
                                     : (rng.uniform() < 0.5 ? 0.0 : 1.0);  // hard mask values
        double mx = 0.0;
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, keep.at(j));
        if (mx == 0.0) keep.at(0) = 1.0;
        Tensor w = random_tensor(rng, {n, n});
        auto res = oracle::finite_diff_check(
            [&](Tape& t) {
                Tensor a = tpl::masked_softmax_pruned(&t, l, keep);
                return tpl::sum_all(&t, tpl::mul(&t, a, w));
            },
            {l, keep});
        CHECK(res.max_rel_err <= 1e-4);
    }
}

TEST_CASE("backward basics") {
    SECTION("gradient of sum is ones") {
        Tensor x = Tensor::from({3}, {0.5, -1.0, 2.0}, true);
        Tape t;
        Tensor loss = tpl::sum_all(&t, x);
        t.backward(loss);
        for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == 1.0);
    }
    SECTION("sum of softmax has vanishing gradient") {
        tpl::Rng rng(11);
        Tensor x = random_tensor(rng, {2, 4}, true);
        Tape t;
        Tensor loss = tpl::sum_all(&t, tpl::softmax_rows(&t, x));
        t.backward(loss);
        for (double g : x.grad()) CHECK(std::fabs(g) <= 1e-12);
    }
    SECTION("non-scalar loss is rejected") {
        Tensor x = Tensor::from({2}, {1, 2}, true);
        Tape t;
        Tensor y = tpl::scale(&t, x, 2.0);
        CHECK_THROWS_AS(t.backward(y), tpl::ContractError);
    }
}

TEST_CASE("two-layer perceptron with cross-entropy matches finite differences") {
    tpl::Rng rng(909);
    const std::size_t n = 4, d = 5, h = 6, v = 3;
    Tensor x = random_tensor(rng, {n, d});
    Tensor w1 = random_tensor(rng, {d, h}, true, 0.7);
    Tensor b1 = random_tensor(rng, {h}, true, 0.1);
    Tensor w2 = random_tensor(rng, {h, v}, true, 0.7);
    Tensor b2 = random_tensor(rng, {v}, true, 0.1);
    std::vector<int> targets = {0, 2, 1, 2};
    std::vector<std::size_t> rows = {0, 1, 2, 3};
    auto res = oracle::finite_diff_check(
        [&](Tape& t) {
            Tensor hdn = tpl::relu(&t, tpl::linear(&t, x, w1, b1));
            Tensor logits = tpl::linear(&t, hdn, w2, b2);
            return tpl::nll_rows(&t, logits, targets, rows);
        },
        {w1, b1, w2, b2});
    CHECK(res.max_rel_err <= 1e-4);
}

TEST_CASE("remaining kernels pass the finite-difference oracle") {
    tpl::Rng rng(1010);
    SECTION("layer_norm") {
        Tensor x = random_tensor(rng, {3, 6}, true);
        Tensor g = random_tensor(rng, {6}, true, 0.5);
        Tensor b = random_tensor(rng, {6}, true, 0.5);
        Tensor w = random_tensor(rng, {3, 6});
        auto res = oracle::finite_diff_check(
            [&](Tape& t) {
                return tpl::sum_all(&t, tpl::mul(&t, tpl::layer_norm(&t, x, g, b), w));
            },
            {x, g, b});
        CHECK(res.max_rel_err <= 1e-4);
    }
    SECTION("structural ops") {
        Tensor a = random_tensor(rng, {3, 4}, true);
        Tensor b = random_tensor(rng, {2, 4}, true);
        Tensor w = random_tensor(rng, {4, 2});
        auto res = oracle::finite_diff_check(
            [&](Tape& t) {
                Tensor c = tpl::concat_rows(&t, a, b);          // 5x4
                Tensor g = tpl::gather_rows(&t, c, {4, 0, 2});  // 3x4
                Tensor s = tpl::slice_cols(&t, g, 1, 3);        // 3x2
                Tensor cc = tpl::concat_cols(&t, {s, s});       // 3x4
                Tensor nt = tpl::matmul_nt(&t, cc, c);          // 3x5
                Tensor mm = tpl::matmul(&t, tpl::matmul(&t, nt, c), w);  // 3x2
                return tpl::mean_all(&t, tpl::relu(&t, mm));
            },
            {a, b});
        CHECK(res.max_rel_err <= 1e-4);
    }
    SECTION("column and elementwise") {
        Tensor a = random_tensor(rng, {4, 3}, true);
        auto res = oracle::finite_diff_check(
            [&](Tape& t) {
                Tensor c = tpl::column(&t, a, 1);
                Tensor d = tpl::add_const(&t, tpl::scale(&t, c, -1.5), 0.25);
                return tpl::sum_all(&t, tpl::mul(&t, d, d));
            },
            {a});
        CHECK(res.max_rel_err <= 1e-4);
    }
    SECTION("embedding_rows") {
        Tensor table = random_tensor(rng, {5, 3}, true);
        auto res = oracle::finite_diff_check(
            [&](Tape& t) {
                Tensor e = tpl::embedding_rows(&t, table, {1, 4, 1});
                return tpl::sum_all(&t, tpl::mul(&t, e, e));
            },
            {table});
        CHECK(res.max_rel_err <= 1e-4);
    }
}

TEST_CASE("ste_passthrough forwards hard values and backpropagates identity") {
    Tensor soft = Tensor::from({4}, {0.2, 0.8, 0.5, 0.9}, true);
    std::vector<double> hard = {0, 1, 1, 1};
    Tape t;
    Tensor m = tpl::ste_passthrough(&t, soft, hard);
    for (std::size_t i = 0; i < 4; ++i) CHECK(m.at(i) == hard[i]);
    Tensor loss = tpl::sum_all(&t, m);
    t.backward(loss);
    for (std::size_t i = 0; i < 4; ++i) CHECK(soft.grad()[i] == 1.0);
}

TEST_CASE("embedding overflow is reported as vocabulary overflow") {
    Tensor table = Tensor::zeros({4, 2});
    CHECK_THROWS_AS(tpl::embedding_rows(nullptr, table, {5}), tpl::ContractError);
}
