#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "capsroute/rng.hpp"

using namespace capsroute;

TEST_CASE("same seed gives identical streams") {
    SeededRng a(42), b(42);
    for (int i = 0; i < 1000; ++i) REQUIRE(a.next_u64() == b.next_u64());

    SeededRng c(42), d(42);
    Tensor ta = random_normal(c, {37}, 0.5, 2.0);
    Tensor tb = random_normal(d, {37}, 0.5, 2.0);
    REQUIRE(max_abs_diff(ta, tb) == 0.0);
}

TEST_CASE("different seeds diverge") {
    SeededRng a(1), b(2);
    int equal = 0;
    for (int i = 0; i < 64; ++i) equal += a.next_u64() == b.next_u64();
    REQUIRE(equal == 0);
}

TEST_CASE("stddev zero pins every entry to the mean") {
    SeededRng rng(5);
    Tensor t = random_normal(rng, {100}, 1.25, 0.0);
    for (std::size_t i = 0; i < t.size(); ++i) REQUIRE(t[i] == 1.25);
}

TEST_CASE("sample mean within the 5 sigma / sqrt(n) band") {
    SeededRng rng(42);
    const std::size_t n = 100000;
    Tensor t = random_normal(rng, {n}, 0.0, 1.0);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) sum += t[i];
    const double mean = sum / static_cast<double>(n);
    REQUIRE(std::fabs(mean) < 5.0 / std::sqrt(static_cast<double>(n))); // 0.0158...

    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) sq += (t[i] - mean) * (t[i] - mean);
    const double var = sq / static_cast<double>(n);
    REQUIRE(var == Catch::Approx(1.0).margin(0.05));
}

TEST_CASE("uniform draws stay in range") {
    SeededRng rng(8);
    for (int i = 0; i < 1000; ++i) {
        const double u = rng.uniform(-1.0, 1.0);
        REQUIRE(u >= -1.0);
        REQUIRE(u < 1.0);
    }
}

TEST_CASE("split streams are deterministic and distinct") {
    SeededRng base(7);
    SeededRng s1 = base.split(0);
    SeededRng s2 = base.split(1);
    SeededRng s1_again = SeededRng(7).split(0);
    REQUIRE(s1.next_u64() == s1_again.next_u64());
    REQUIRE(s1.next_u64() != s2.next_u64());
}

TEST_CASE("negative stddev rejected") {
    SeededRng rng(1);
    REQUIRE_THROWS_AS(rng.normal(0.0, -1.0), ContractError);
}
