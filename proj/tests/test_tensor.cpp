#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "capsroute/rng.hpp"
#include "capsroute/tensor.hpp"

using namespace capsroute;

namespace {

// Independent softmax oracle: direct definition in long double, no
// max-subtraction. The library path must agree with it.
std::vector<double> softmax_oracle(const std::vector<double>& xs) {
    long double sum = 0.0L;
    std::vector<long double> es;
    for (const double x : xs) {
        es.push_back(std::exp(static_cast<long double>(x)));
        sum += es.back();
    }
    std::vector<double> out;
    for (const long double e : es) out.push_back(static_cast<double>(e / sum));
    return out;
}

} // namespace

TEST_CASE("matmul identity and annihilator") {
    SeededRng rng(7);
    Tensor b = random_normal(rng, {3, 5}, 0.0, 1.0);
    Tensor idb = matmul(Tensor::identity(3), b);
    REQUIRE(max_abs_diff(idb, b) == 0.0);

    Tensor z = matmul(b, Tensor::zeros({5, 4}));
    REQUIRE(max_abs(z) == 0.0);
}

TEST_CASE("matmul hand example") {
    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor b({2, 1}, {5, 6});
    Tensor c = matmul(a, b);
    REQUIRE(c.shape() == Shape{2, 1});
    REQUIRE(c[0] == 17.0);
    REQUIRE(c[1] == 39.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        REQUIRE(msg.find("[2x3]") != std::string::npos);
        REQUIRE(msg.find("[4x2]") != std::string::npos);
    }
}

TEST_CASE("matmul is bilinear") {
    SeededRng rng(11);
    for (int trial = 0; trial < 30; ++trial) {
        Tensor a = random_normal(rng, {4, 3}, 0.0, 1.0);
        Tensor b = random_normal(rng, {3, 5}, 0.0, 1.0);
        Tensor c = random_normal(rng, {3, 5}, 0.0, 1.0);
        const double alpha = rng.uniform(-2.0, 2.0);

        // matmul(a, b + alpha c) == matmul(a, b) + alpha matmul(a, c)
        Tensor lhs = matmul(a, add(b, scale(c, alpha)));
        Tensor rhs = add(matmul(a, b), scale(matmul(a, c), alpha));
        const double scl = std::max(1.0, max_abs(lhs));
        REQUIRE(max_abs_diff(lhs, rhs) / scl < 1e-12);

        // negating one factor negates the product exactly
        Tensor neg_prod = matmul(a, neg(b));
        REQUIRE(max_abs_diff(neg_prod, neg(matmul(a, b))) == 0.0);
    }
}

TEST_CASE("softmax uniform on zeros") {
    Tensor x = Tensor::zeros({6});
    Tensor y = softmax(x, 0);
    for (std::size_t i = 0; i < y.size(); ++i) REQUIRE(y[i] == Catch::Approx(1.0 / 6).margin(1e-15));
}

TEST_CASE("softmax matches direct oracle") {
    const auto expect = softmax_oracle({1.0, 2.0, 3.0});
    Tensor y = softmax(Tensor({3}, {1, 2, 3}), 0);
    // frozen from the oracle: 0.09003057317038046, 0.24472847105479764, 0.6652409557748219
    REQUIRE(y[0] == Catch::Approx(0.09003057317038046).epsilon(1e-14));
    REQUIRE(y[1] == Catch::Approx(0.24472847105479764).epsilon(1e-14));
    REQUIRE(y[2] == Catch::Approx(0.6652409557748219).epsilon(1e-14));
    for (int i = 0; i < 3; ++i) REQUIRE(y[i] == Catch::Approx(expect[i]).epsilon(1e-14));
}

TEST_CASE("softmax shift invariance and normalization") {
    SeededRng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor x = random_normal(rng, {4, 7}, 0.0, 3.0);
        const double c = rng.uniform(-10.0, 10.0);
        Tensor shifted = x;
        for (std::size_t i = 0; i < x.size(); ++i) shifted[i] += c;

        for (std::size_t axis = 0; axis < 2; ++axis) {
            Tensor y = softmax(x, axis);
            Tensor ys = softmax(shifted, axis);
            REQUIRE(max_abs_diff(y, ys) < 1e-12);

            const std::size_t len = x.extent(axis);
            const std::size_t other = x.size() / len;
            for (std::size_t o = 0; o < other; ++o) {
                double sum = 0.0;
                for (std::size_t j = 0; j < len; ++j) {
                    const std::size_t idx = axis == 1 ? o * len + j : j * other + o;
                    REQUIRE(y[idx] > 0.0);
                    REQUIRE(y[idx] <= 1.0);
                    sum += y[idx];
                }
                REQUIRE(std::fabs(sum - 1.0) < 1e-12);
            }
        }
    }
}

TEST_CASE("softmax axis out of range") {
    REQUIRE_THROWS_AS(softmax(Tensor::zeros({2, 2}), 2), ContractError);
}

TEST_CASE("l2_norm basics") {
    REQUIRE(l2_norm(Tensor::zeros({4})) == 0.0);
    REQUIRE(l2_norm(Tensor({2}, {3, 4})) == 5.0);

    SeededRng rng(99);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor x = random_normal(rng, {6}, 0.0, 2.0);
        REQUIRE(l2_norm(neg(x)) == l2_norm(x)); // bit-exact evenness
    }
}

TEST_CASE("tensor invariants") {
    REQUIRE_THROWS_AS(Tensor({2}, {1.0, 2.0, 3.0}), ShapeError);
    REQUIRE_THROWS_AS(Tensor({1}, {std::nan("")}), ValueError);
    REQUIRE_THROWS_AS(Tensor::zeros({2, 0}), ShapeError);
    REQUIRE_THROWS_AS(Tensor::zeros({3}).reshaped({2, 2}), ShapeError);
    Tensor t = Tensor::zeros({2, 3});
    REQUIRE(shape_numel(t.shape()) == t.size());
}
