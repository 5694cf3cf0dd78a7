#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "capsroute/autodiff.hpp"
#include "capsroute/rng.hpp"
#include "capsroute/routing.hpp"

using namespace capsroute;

namespace {

// Runs grad_check at `points` random draws and returns the worst error.
double check_at_random_points(const LossBuilder& build, const std::vector<Shape>& shapes,
                              std::uint64_t seed, int points = 20, double eps = 1e-5,
                              double keep_away_from_zero = 0.0) {
    double worst = 0.0;
    for (int p = 0; p < points; ++p) {
        SeededRng rng(seed + static_cast<std::uint64_t>(p));
        std::vector<Tensor> params;
        for (const Shape& s : shapes) {
            Tensor t = random_normal(rng, s, 0.0, 1.0);
            if (keep_away_from_zero > 0.0) {
                for (std::size_t i = 0; i < t.size(); ++i) {
                    while (std::fabs(t[i]) < keep_away_from_zero) t[i] = rng.normal(0.0, 1.0);
                }
            }
            params.push_back(std::move(t));
        }
        worst = std::max(worst, grad_check(build, params, eps));
    }
    return worst;
}

} // namespace

TEST_CASE("backward of sum is all-ones") {
    Tape tape;
    Parameter p{"x", Tensor({2, 3}, {1, -2, 3, 4, -5, 6})};
    Var x = tape.param(p);
    auto grads = tape.backward(sum_all(x));
    REQUIRE(grads.count("x") == 1);
    for (std::size_t i = 0; i < grads["x"].size(); ++i) REQUIRE(grads["x"][i] == 1.0);
}

TEST_CASE("gradient of squared norm is 2x") {
    Tape tape;
    Parameter p{"x", Tensor({1, 2}, {3, 4})};
    Var x = tape.param(p);
    Var loss = square(l2norm_lastaxis(x));
    auto grads = tape.backward(loss);
    REQUIRE(grads["x"][0] == Catch::Approx(6.0).epsilon(1e-12));
    REQUIRE(grads["x"][1] == Catch::Approx(8.0).epsilon(1e-12));
}

TEST_CASE("non-scalar loss is a contract error") {
    Tape tape;
    Var x = tape.leaf(Tensor::zeros({3}), true);
    REQUIRE_THROWS_AS(tape.backward(x), ContractError);
}

TEST_CASE("gradients accumulate over shared subgraphs") {
    Tape tape;
    Parameter p{"x", Tensor({2}, {1.5, -0.5})};
    Var x = tape.param(p);
    // loss = sum(x*x + x*x): d/dx = 4x
    Var y = add(mul(x, x), mul(x, x));
    auto grads = tape.backward(sum_all(y));
    REQUIRE(grads["x"][0] == Catch::Approx(6.0));
    REQUIRE(grads["x"][1] == Catch::Approx(-2.0));
}

TEST_CASE("grad_check is near-exact for a linear function") {
    const LossBuilder build = [](Tape&, const std::vector<Var>& vs) {
        return sum_all(scale(vs[0], 3.5));
    };
    const double err = check_at_random_points(build, {{4, 3}}, 100, 5);
    REQUIRE(err <= 1e-10);
}

TEST_CASE("grad_check of a squash composition") {
    const LossBuilder build = [](Tape&, const std::vector<Var>& vs) {
        Var s = squash_lastaxis(vs[0], 1e-12);
        return sum_all(mul(s, s));
    };
    const double err = check_at_random_points(build, {{3, 5}}, 200, 20);
    REQUIRE(err <= 1e-4);
}

TEST_CASE("every differentiable op passes grad_check at 20 random points") {
    struct Case {
        const char* name;
        LossBuilder build;
        std::vector<Shape> shapes;
        double tol;
        double away;       // reject draws this close to a kink
        double eps = 1e-5; // finite-difference step
    };
    const std::vector<Case> cases = {
        {"add", [](Tape&, const std::vector<Var>& v) { return sum_all(add(v[0], v[1])); },
         {{3, 4}, {3, 4}}, 1e-6, 0.0},
        {"sub", [](Tape&, const std::vector<Var>& v) { return sum_all(square(sub(v[0], v[1]))); },
         {{3, 4}, {3, 4}}, 1e-6, 0.0},
        {"mul", [](Tape&, const std::vector<Var>& v) { return sum_all(mul(v[0], v[1])); },
         {{2, 5}, {2, 5}}, 1e-6, 0.0},
        {"relu", [](Tape&, const std::vector<Var>& v) { return sum_all(square(relu(v[0]))); },
         {{4, 4}}, 1e-4, 1e-3},
        {"logistic", [](Tape&, const std::vector<Var>& v) { return sum_all(logistic(v[0])); },
         {{4, 4}}, 1e-4, 0.0},
        {"exp", [](Tape&, const std::vector<Var>& v) { return sum_all(exp(scale(v[0], 0.3))); },
         {{3, 3}}, 1e-4, 0.0},
        {"log", [](Tape&, const std::vector<Var>& v) {
             return sum_all(log(add_const(square(v[0]), 0.5)));
         }, {{3, 3}}, 1e-4, 0.0},
        {"sqrt", [](Tape&, const std::vector<Var>& v) {
             return sum_all(sqrt(add_const(square(v[0]), 0.5)));
         }, {{3, 3}}, 1e-4, 0.0},
        {"max_const", [](Tape&, const std::vector<Var>& v) {
             return sum_all(square(max_const(v[0], 0.25)));
         }, {{4, 4}}, 1e-4, 0.0},
        {"sum_lastaxis", [](Tape&, const std::vector<Var>& v) {
             return sum_all(square(sum_lastaxis(v[0])));
         }, {{2, 3, 4}}, 1e-6, 0.0},
        {"sum_axis1", [](Tape&, const std::vector<Var>& v) {
             return sum_all(square(sum_axis1(v[0])));
         }, {{2, 3, 4}}, 1e-6, 0.0},
        {"matmul", [](Tape&, const std::vector<Var>& v) {
             return sum_all(square(matmul(v[0], v[1])));
         }, {{3, 4}, {4, 2}}, 1e-5, 0.0},
        {"add_rowvec", [](Tape&, const std::vector<Var>& v) {
             return sum_all(square(add_rowvec(v[0], v[1])));
         }, {{3, 4}, {4}}, 1e-6, 0.0},
        {"softmax_lastaxis", [](Tape&, const std::vector<Var>& v) {
             return sum_all(square(softmax_lastaxis(v[0])));
         }, {{2, 3, 4}}, 1e-4, 0.0},
        {"l2norm_lastaxis", [](Tape&, const std::vector<Var>& v) {
             return sum_all(square(l2norm_lastaxis(v[0])));
         }, {{3, 4}}, 1e-4, 0.0},
        {"reshape", [](Tape&, const std::vector<Var>& v) {
             return sum_all(square(reshape(v[0], {6, 2})));
         }, {{3, 4}}, 1e-6, 0.0},
        {"mul_bcast_last", [](Tape&, const std::vector<Var>& v) {
             return sum_all(square(mul_bcast_last(v[0], v[1])));
         }, {{2, 3, 4}, {2, 3}}, 1e-5, 0.0},
        {"add_bcast_axis1", [](Tape&, const std::vector<Var>& v) {
             return sum_all(square(add_bcast_axis1(v[0], v[1])));
         }, {{2, 3, 4}, {2, 4}}, 1e-6, 0.0},
        {"add_last2", [](Tape&, const std::vector<Var>& v) {
             return sum_all(square(add_last2(v[0], v[1])));
         }, {{2, 3, 4}, {3, 4}}, 1e-6, 0.0},
        {"add_vec_mid", [](Tape&, const std::vector<Var>& v) {
             return sum_all(square(add_vec_mid(v[0], v[1])));
         }, {{2, 3, 4}, {3}}, 1e-6, 0.0},
        {"vec_sub_bcast", [](Tape&, const std::vector<Var>& v) {
             return sum_all(square(vec_sub_bcast(v[0], v[1])));
         }, {{4}, {3, 4}}, 1e-6, 0.0},
        {"rba_predictions", [](Tape&, const std::vector<Var>& v) {
             return sum_all(square(rba_predictions(v[0], v[1])));
         }, {{2, 3, 4}, {3, 2, 3, 4}}, 1e-4, 0.0},
        {"weighted_sum_i", [](Tape&, const std::vector<Var>& v) {
             return sum_all(square(weighted_sum_i(v[0], v[1])));
         }, {{2, 3, 4}, {2, 3, 4, 5}}, 1e-4, 0.0, 1e-4},
        {"caps_agreement", [](Tape&, const std::vector<Var>& v) {
             return sum_all(square(caps_agreement(v[0], v[1])));
         }, {{2, 4, 5}, {2, 3, 4, 5}}, 1e-4, 0.0},
        {"squash_lastaxis", [](Tape&, const std::vector<Var>& v) {
             return sum_all(square(squash_lastaxis(v[0], 1e-12)));
         }, {{3, 4}}, 1e-4, 0.0},
        {"em_votes", [](Tape&, const std::vector<Var>& v) {
             return sum_all(square(em_votes(v[0], v[1])));
         }, {{2, 3, 16}, {3, 2, 16}}, 1e-4, 0.0},
        {"resp_softmax", [](Tape&, const std::vector<Var>& v) {
             return sum_all(square(resp_softmax(v[0])));
         }, {{2, 3, 4}}, 1e-4, 0.0},
    };
    for (const auto& c : cases) {
        INFO(c.name);
        const double err = check_at_random_points(
            c.build, c.shapes, std::hash<std::string>{}(c.name) % 100000, 20, c.eps, c.away);
        CHECK(err <= c.tol);
    }
}

TEST_CASE("stop_gradient detaches exactly one factor") {
    // loss = sum(stop_gradient(x) * x): gradient must be x, not 2x.
    Tape tape;
    Parameter p{"x", Tensor({3}, {1.0, -2.0, 0.5})};
    Var x = tape.param(p);
    auto grads = tape.backward(sum_all(mul(stop_gradient(x), x)));
    REQUIRE(max_abs_diff(grads["x"], p.value) == 0.0);
}

TEST_CASE("weighted statistics and gaussian log-density pass grad_check") {
    // w must stay positive (responsibilities); draw it through a logistic.
    const LossBuilder stats_build = [](Tape&, const std::vector<Var>& v) {
        Var w = logistic(v[0]); // [B,I,J] in (0,1)
        Var x = v[1];           // [B,I,J,H]
        Var denom = sum_axis1(w);
        Var mu = weighted_mean(w, x, denom);
        Var var_raw = weighted_var(w, x, mu, denom);
        Var sig = max_const(var_raw, 1e-8);
        Var lp = gaussian_logp(x, mu, sig);
        return add(sum_all(square(mu)), add(sum_all(sqrt(sig)), sum_all(scale(lp, 0.01))));
    };
    const double err = check_at_random_points(stats_build, {{2, 3, 2}, {2, 3, 2, 4}}, 777, 20);
    REQUIRE(err <= 1e-4);
}

TEST_CASE("full RBA layer gradients match central differences") {
    const std::size_t I = 3, J = 2, H = 4, Hi = 3;
    RoutingConfig cfg;
    cfg.iterations = 2;
    const LossBuilder build = [cfg](Tape&, const std::vector<Var>& v) {
        Var uhat = rba_predictions(v[0], v[1]);
        Var out = rba_route(uhat, v[2], cfg);
        return sum_all(square(out));
    };
    const double err =
        check_at_random_points(build, {{1, I, Hi}, {I, J, H, Hi}, {J, H}}, 4242, 20, 1e-5);
    REQUIRE(err < 1e-4);
}

TEST_CASE("unrolled EM routing with logistic output matches central differences") {
    const std::size_t I = 3, J = 2;
    RoutingConfig cfg;
    cfg.iterations = 2;
    cfg.lambda_schedule = {0.7, 1.3};
    cfg.bias_enabled = true;
    const LossBuilder build = [cfg](Tape&, const std::vector<Var>& v) {
        Var a = logistic(v[0]); // [1,I] activations in (0,1)
        Var V = em_votes(v[1], v[2]);
        V = add_last2(V, v[3]);
        EmRouteVars out = em_route(a, V, v[4], v[5], cfg);
        return add(sum_all(out.activations), scale(sum_all(square(out.poses)), 0.1));
    };
    // Step 1e-4 sits at the bottom of the central-difference error V-curve for
    // this composition (1e-5 lands in the roundoff-dominated regime).
    const double err = check_at_random_points(
        build, {{1, I}, {1, I, 16}, {I, J, 16}, {J, 16}, {J}, {J}}, 515, 10, 1e-4);
    REQUIRE(err <= 1e-3);
}

TEST_CASE("routing loop equals the manually unrolled graph at r=2") {
    SeededRng rng(31);
    const std::size_t B = 1, I = 3, J = 2, H = 4;
    Tensor uhat_t = random_normal(rng, {B, I, J, H}, 0.0, 1.0);
    Tensor bias_t = Tensor::zeros({J, H});

    RoutingConfig cfg;
    cfg.iterations = 2;

    Tape t1;
    Parameter pu{"uhat", uhat_t};
    Var u1 = t1.param(pu);
    Var v_loop = rba_route(u1, t1.constant(bias_t), cfg);
    auto g_loop = t1.backward(sum_all(square(v_loop)));

    // Manual unroll: the identical primitive sequence, written out twice.
    Tape t2;
    Var u2 = t2.param(pu);
    Var bias2 = t2.constant(bias_t);
    Var b = t2.constant(Tensor::zeros({B, I, J}));
    Var v{};
    for (int iter = 0; iter < 2; ++iter) {
        Var c = softmax_lastaxis(b);
        Var s = add_last2(weighted_sum_i(c, u2), bias2);
        v = squash_lastaxis(s, cfg.squash_epsilon);
        b = add(b, caps_agreement(v, u2));
    }
    auto g_manual = t2.backward(sum_all(square(v)));

    REQUIRE(max_abs_diff(v_loop.value(), v.value()) == 0.0);
    REQUIRE(max_abs_diff(g_loop["uhat"], g_manual["uhat"]) == 0.0);
}

TEST_CASE("stop_routing_gradients blocks the coupling path only") {
    SeededRng rng(77);
    const std::size_t I = 4, J = 3, H = 4, Hi = 3;
    Tensor u = random_normal(rng, {1, I, Hi}, 0.0, 1.0);
    Tensor W = random_normal(rng, {I, J, H, Hi}, 0.0, 0.5);

    auto run = [&](bool stop) {
        Tape t;
        Parameter pw{"W", W};
        Var uhat = rba_predictions(t.constant(u), t.param(pw));
        RoutingConfig cfg;
        cfg.iterations = 3;
        cfg.stop_routing_gradients = stop;
        Var v = rba_route(uhat, t.constant(Tensor::zeros({J, H})), cfg);
        return t.backward(sum_all(square(v)))["W"];
    };
    Tensor g_flow = run(false);
    Tensor g_stop = run(true);
    REQUIRE(g_flow.all_finite());
    REQUIRE(g_stop.all_finite());
    REQUIRE(max_abs_diff(g_flow, g_stop) > 1e-9); // the two semantics genuinely differ
}
