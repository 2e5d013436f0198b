#pragma once

#include <vector>

#include "sfb/errors.hpp"
#include "sfb/prob.hpp"

namespace sfb {

/// Softmax/sigmoid temperature; value 1 is the identity.
class Temperature {
public:
    explicit Temperature(double v) : value_(v) {
        if (!(v > 0.0)) throw Error("Temperature must be > 0");
    }
    double value() const { return value_; }

private:
    double value_;
};

struct ReliabilityBin {
    double confidence = 0.0;
    double accuracy = 0.0;
    std::size_t count = 0;
};

struct CalibrationReport {
    double ece_before = 0.0;
    double ece_after = 0.0;
    double temperature = 1.0;
    int bins = 0;
    std::vector<ReliabilityBin> reliability_curve;
};

/// Expected calibration error over equal-width bins of max-class confidence.
/// Binary probs are treated as two-class with confidence max(p, 1-p).
double ece(const std::vector<double>& probs, const std::vector<int>& labels, int bins);
double ece(const std::vector<SimplexVector>& probs, const std::vector<int>& labels, int bins);

std::vector<ReliabilityBin> reliability_curve(const std::vector<double>& probs,
                                              const std::vector<int>& labels, int bins);

/// sigmoid(z / T) per logit.
std::vector<double> apply_temperature(const std::vector<double>& logits, Temperature t);
/// Row-wise softmax(z / T).
std::vector<SimplexVector> apply_temperature(const std::vector<std::vector<double>>& logits,
                                             Temperature t);

/// Grid search minimizing post-scaling ECE; ties broken toward T closest to 1.
Temperature fit_temperature(const std::vector<double>& logits, const std::vector<int>& labels,
                            const std::vector<double>& grid, int bins = 15);
Temperature fit_temperature(const std::vector<std::vector<double>>& logits,
                            const std::vector<int>& labels, const std::vector<double>& grid,
                            int bins = 15);

/// Default search grid from the calibration recipe.
const std::vector<double>& default_temperature_grid();

}  // namespace sfb
