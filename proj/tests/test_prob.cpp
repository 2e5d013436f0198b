#include <cmath>
#include <random>

#include "doctest.h"
#include "sfb/prob.hpp"

using namespace sfb;

TEST_CASE("Probability rejects out-of-range construction") {
    CHECK_THROWS_AS(Probability(-0.1), Error);
    CHECK_THROWS_AS(Probability(1.1), Error);
    CHECK(Probability(0.0).value() == 0.0);
    CHECK(Probability(1.0).value() == 1.0);
}

TEST_CASE("logit basics") {
    CHECK(logit(0.5) == doctest::Approx(0.0));
    CHECK(logit(0.75) == doctest::Approx(std::log(3.0)));  // ln 3 = 1.0986...
    CHECK(std::isinf(logit(1.0)));
    CHECK(logit(1.0) > 0);
    CHECK(logit(0.0) < 0);
    CHECK(sigmoid(logit(1.0)) == 1.0);
    CHECK(sigmoid(logit(0.0)) == 0.0);
}

TEST_CASE("sigmoid o logit is the identity away from saturation") {
    for (double p : {1e-12, 1e-6, 0.01, 0.3, 0.5, 0.9, 1.0 - 1e-6, 1.0 - 1e-12}) {
        CHECK(std::abs(sigmoid(logit(p)) - p) < 1e-10);
    }
}

TEST_CASE("combine_binary examples") {
    // Uninformative p_U equal to the prior leaves p_S unchanged.
    CHECK(combine_binary(Probability(0.75), Probability(0.5), Probability(0.5)).value() ==
          doctest::Approx(0.75));
    // AC posterior at beta=0.1, x_S = x_U = +1 (enumeration oracle below).
    CHECK(combine_binary(Probability(0.75), Probability(0.1), Probability(0.5)).value() ==
          doctest::Approx(0.25).epsilon(1e-12));
    // Saturated stable prediction dominates.
    CHECK(combine_binary(Probability(1.0), Probability(0.3), Probability(0.5)).value() == 1.0);
    CHECK(combine_binary(Probability(0.3), Probability(0.0), Probability(0.5)).value() == 0.0);
}

TEST_CASE("combine_binary rejects conflicting certainty") {
    CHECK_THROWS_AS(combine_binary(Probability(1.0), Probability(0.0), Probability(0.5)),
                    ConflictingCertainty);
    CHECK(combine_binary(Probability(1.0), Probability(1.0), Probability(0.5)).value() == 1.0);
}

TEST_CASE("combine_binary identity and symmetry properties") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> unif(0.01, 0.99);
    for (int i = 0; i < 200; ++i) {
        double p = unif(rng), q = unif(rng), prior = unif(rng);
        CHECK(combine_binary(Probability(p), Probability(prior), Probability(prior)).value() ==
              doctest::Approx(p).epsilon(1e-10));
        CHECK(combine_binary(Probability(p), Probability(q), Probability(prior)).value() ==
              doctest::Approx(
                  combine_binary(Probability(q), Probability(p), Probability(prior)).value())
                  .epsilon(1e-12));
    }
}

TEST_CASE("SimplexVector renormalizes within tolerance, rejects otherwise") {
    SimplexVector ok({0.5, 0.5 + 5e-10});
    CHECK(ok[0] + ok[1] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK_THROWS_AS(SimplexVector({0.5, 0.6}), Error);
    CHECK_THROWS_AS(SimplexVector({1.0}), Error);
    CHECK_THROWS_AS(SimplexVector({1.2, -0.2}), Error);
}

TEST_CASE("combine_multiclass examples") {
    SimplexVector a({0.25, 0.75}), b({0.9, 0.1}), prior2({0.5, 0.5});
    auto r = combine_multiclass(a, b, prior2);
    CHECK(r[0] == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(r[1] == doctest::Approx(0.25).epsilon(1e-12));

    auto u3 = SimplexVector::uniform(3);
    auto fix = combine_multiclass(u3, u3, u3);
    for (int i = 0; i < 3; ++i) CHECK(fix[i] == doctest::Approx(1.0 / 3).epsilon(1e-12));

    SimplexVector p({0.2, 0.3, 0.5}), prior3({0.6, 0.3, 0.1});
    auto cancel = combine_multiclass(p, prior3, prior3);
    for (int i = 0; i < 3; ++i) CHECK(cancel[i] == doctest::Approx(p[i]).epsilon(1e-12));
}

TEST_CASE("combine_multiclass zero mass") {
    SimplexVector a({1.0, 0.0}), b({0.0, 1.0});
    CHECK_THROWS_AS(combine_multiclass(a, b, SimplexVector({0.5, 0.5})), ZeroMass);
}

TEST_CASE("combine_multiclass K=2 agrees with combine_binary on a grid") {
    for (int i = 1; i < 50; ++i) {
        for (int j = 1; j < 50; ++j) {
            for (int k = 1; k < 10; ++k) {
                double ps = i / 50.0, pu = j / 50.0, pr = k / 10.0;
                double bin =
                    combine_binary(Probability(ps), Probability(pu), Probability(pr)).value();
                auto mc = combine_multiclass(SimplexVector({1 - ps, ps}),
                                             SimplexVector({1 - pu, pu}),
                                             SimplexVector({1 - pr, pr}));
                CHECK(std::abs(mc[1] - bin) < 1e-12);
            }
        }
    }
}

namespace {

// Brute-force oracle: grid minimization of ||x - v||^2 over the simplex.
std::vector<double> grid_project_2d(const std::vector<double>& v) {
    double best = 1e18;
    std::vector<double> arg(2);
    for (int i = 0; i <= 10000; ++i) {
        double a = i / 10000.0;
        double d = (a - v[0]) * (a - v[0]) + (1 - a - v[1]) * (1 - a - v[1]);
        if (d < best) {
            best = d;
            arg = {a, 1 - a};
        }
    }
    return arg;
}

}  // namespace

TEST_CASE("project_to_simplex") {
    auto id = project_to_simplex({0.5, 0.5});
    CHECK(id[0] == doctest::Approx(0.5));

    auto clip = project_to_simplex({1.2, -0.2});
    auto oracle = grid_project_2d({1.2, -0.2});
    CHECK(clip[0] == doctest::Approx(oracle[0]).epsilon(1e-3));
    CHECK(clip[0] == doctest::Approx(1.0));
    CHECK(clip[1] == doctest::Approx(0.0));

    auto sym = project_to_simplex({2.0, 2.0, 2.0});
    for (int i = 0; i < 3; ++i) CHECK(sym[i] == doctest::Approx(1.0 / 3));

    CHECK_THROWS_AS(project_to_simplex({1.0, std::nan("")}), Error);
}

TEST_CASE("project_to_simplex is a fixed point on simplex inputs and always valid") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> unif(-3.0, 3.0);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> v(4);
        for (auto& x : v) x = unif(rng);
        auto p = project_to_simplex(v);
        double sum = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            CHECK(p[i] >= 0.0);
            CHECK(p[i] <= 1.0);
            sum += p[i];
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
        auto again = project_to_simplex(p.entries());
        for (std::size_t i = 0; i < p.size(); ++i) {
            CHECK(again[i] == doctest::Approx(p[i]).epsilon(1e-9));
        }
    }
}
