#include <cmath>
#include <random>

#include "doctest.h"
#include "sfb/calibration.hpp"

using namespace sfb;

TEST_CASE("ece basics") {
    // Perfect confident predictor.
    CHECK(ece(std::vector<double>{1.0, 1.0, 0.0}, {1, 1, 0}, 10) == doctest::Approx(0.0));
    // Maximally overconfident.
    CHECK(ece(std::vector<double>{1.0, 1.0, 1.0, 1.0}, {1, 0, 1, 0}, 10) == doctest::Approx(0.5));
    CHECK_THROWS_AS(ece(std::vector<double>{0.5}, {1, 0}, 10), LengthMismatch);
}

TEST_CASE("ece on matched confidence is near zero") {
    // probs all 0.7 on class 1, labels 70% class 1.
    std::vector<double> probs(1000, 0.7);
    std::vector<int> labels(1000, 0);
    for (int i = 0; i < 700; ++i) labels[i] = 1;
    CHECK(ece(probs, labels, 10) == doctest::Approx(0.0).epsilon(2e-3));
}

TEST_CASE("single-bin ece equals |mean confidence - accuracy|") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<double> probs;
    std::vector<int> labels;
    double conf_sum = 0.0;
    double acc_sum = 0.0;
    for (int i = 0; i < 500; ++i) {
        double p = unif(rng);
        int y = unif(rng) < 0.5 ? 1 : 0;
        probs.push_back(p);
        labels.push_back(y);
        conf_sum += std::max(p, 1 - p);
        acc_sum += ((p >= 0.5 ? 1 : 0) == y) ? 1.0 : 0.0;
    }
    CHECK(ece(probs, labels, 1) ==
          doctest::Approx(std::abs(conf_sum / 500 - acc_sum / 500)).epsilon(1e-12));
}

TEST_CASE("apply_temperature") {
    CHECK(apply_temperature(std::vector<double>{0.0}, Temperature(5.0))[0] ==
          doctest::Approx(0.5));
    // sigma(ln 9) = 0.9
    CHECK(apply_temperature(std::vector<double>{std::log(9.0)}, Temperature(1.0))[0] ==
          doctest::Approx(0.9));
    CHECK(apply_temperature(std::vector<double>{std::log(9.0)}, Temperature(1e6))[0] ==
          doctest::Approx(0.5).epsilon(1e-5));
    CHECK_THROWS_AS(Temperature(0.0), Error);
}

TEST_CASE("softmax temperature preserves argmax") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> unif(-4.0, 4.0);
    for (double t : {0.25, 1.0, 3.0, 50.0}) {
        for (int i = 0; i < 100; ++i) {
            std::vector<double> z = {unif(rng), unif(rng), unif(rng)};
            auto p = apply_temperature(std::vector<std::vector<double>>{z}, Temperature(t))[0];
            auto zmax = std::max_element(z.begin(), z.end()) - z.begin();
            const auto& e = p.entries();
            auto pmax = std::max_element(e.begin(), e.end()) - e.begin();
            CHECK(zmax == pmax);
        }
    }
}

namespace {

// A calibrated binary sample: y ~ Bernoulli(sigmoid(z)).
void make_calibrated(std::vector<double>& logits, std::vector<int>& labels, int n,
                     std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(-2.5, 2.5);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    for (int i = 0; i < n; ++i) {
        double z = unif(rng);
        logits.push_back(z);
        labels.push_back(coin(rng) < sigmoid(z) ? 1 : 0);
    }
}

}  // namespace

TEST_CASE("fit_temperature recovers scale") {
    std::vector<double> logits;
    std::vector<int> labels;
    make_calibrated(logits, labels, 20000, 17);

    SUBCASE("already calibrated -> T = 1") {
        CHECK(fit_temperature(logits, labels, default_temperature_grid()).value() == 1.0);
    }
    SUBCASE("logits scaled by 3 -> T = 3 from the grid") {
        std::vector<double> scaled = logits;
        for (auto& z : scaled) z *= 3.0;
        CHECK(fit_temperature(scaled, labels, default_temperature_grid()).value() == 3.0);
    }
    SUBCASE("single-point grid") {
        CHECK(fit_temperature(logits, labels, {2.0}).value() == 2.0);
    }
    SUBCASE("selected temperature never increases fitting-set ECE") {
        for (double scale : {0.3, 1.0, 2.0, 4.0}) {
            std::vector<double> scaled = logits;
            for (auto& z : scaled) z *= scale;
            auto t = fit_temperature(scaled, labels, default_temperature_grid());
            double before = ece(apply_temperature(scaled, Temperature(1.0)), labels, 15);
            double after = ece(apply_temperature(scaled, t), labels, 15);
            CHECK(after <= before + 1e-12);
        }
    }
}
