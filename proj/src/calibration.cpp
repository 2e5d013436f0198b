#include "sfb/calibration.hpp"

#include <algorithm>
#include <cmath>

namespace sfb {

namespace {

struct ConfAcc {
    double conf;
    bool correct;
};

double ece_impl(const std::vector<ConfAcc>& points, int bins) {
    if (bins < 1) throw Error("ece: bins must be >= 1");
    const std::size_t n = points.size();
    if (n == 0) return 0.0;
    std::vector<double> conf_sum(bins, 0.0), acc_sum(bins, 0.0);
    std::vector<std::size_t> counts(bins, 0);
    for (const auto& p : points) {
        int b = std::min(bins - 1, static_cast<int>(p.conf * bins));
        conf_sum[b] += p.conf;
        acc_sum[b] += p.correct ? 1.0 : 0.0;
        counts[b]++;
    }
    double e = 0.0;
    for (int b = 0; b < bins; ++b) {
        if (counts[b] == 0) continue;
        double nb = static_cast<double>(counts[b]);
        e += (nb / static_cast<double>(n)) * std::abs(acc_sum[b] / nb - conf_sum[b] / nb);
    }
    return e;
}

std::vector<ConfAcc> binary_points(const std::vector<double>& probs,
                                   const std::vector<int>& labels) {
    if (probs.size() != labels.size()) throw LengthMismatch("ece: probs/labels length mismatch");
    std::vector<ConfAcc> pts(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
        int pred = probs[i] >= 0.5 ? 1 : 0;
        pts[i] = {std::max(probs[i], 1.0 - probs[i]), pred == labels[i]};
    }
    return pts;
}

std::vector<ConfAcc> multiclass_points(const std::vector<SimplexVector>& probs,
                                       const std::vector<int>& labels) {
    if (probs.size() != labels.size()) throw LengthMismatch("ece: probs/labels length mismatch");
    std::vector<ConfAcc> pts;
    pts.reserve(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const auto& e = probs[i].entries();
        auto it = std::max_element(e.begin(), e.end());
        int pred = static_cast<int>(it - e.begin());
        pts.push_back({*it, pred == labels[i]});
    }
    return pts;
}

}  // namespace

double ece(const std::vector<double>& probs, const std::vector<int>& labels, int bins) {
    return ece_impl(binary_points(probs, labels), bins);
}

double ece(const std::vector<SimplexVector>& probs, const std::vector<int>& labels, int bins) {
    return ece_impl(multiclass_points(probs, labels), bins);
}

std::vector<ReliabilityBin> reliability_curve(const std::vector<double>& probs,
                                              const std::vector<int>& labels, int bins) {
    auto pts = binary_points(probs, labels);
    std::vector<ReliabilityBin> curve(bins);
    for (const auto& p : pts) {
        int b = std::min(bins - 1, static_cast<int>(p.conf * bins));
        curve[b].confidence += p.conf;
        curve[b].accuracy += p.correct ? 1.0 : 0.0;
        curve[b].count++;
    }
    for (auto& c : curve) {
        if (c.count > 0) {
            c.confidence /= static_cast<double>(c.count);
            c.accuracy /= static_cast<double>(c.count);
        }
    }
    return curve;
}

std::vector<double> apply_temperature(const std::vector<double>& logits, Temperature t) {
    std::vector<double> out(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = sigmoid(logits[i] / t.value());
    return out;
}

std::vector<SimplexVector> apply_temperature(const std::vector<std::vector<double>>& logits,
                                             Temperature t) {
    std::vector<SimplexVector> out;
    out.reserve(logits.size());
    for (const auto& row : logits) {
        double zmax = *std::max_element(row.begin(), row.end());
        std::vector<double> p(row.size());
        double sum = 0.0;
        for (std::size_t j = 0; j < row.size(); ++j) {
            p[j] = std::exp((row[j] - zmax) / t.value());
            sum += p[j];
        }
        for (double& x : p) x = std::min(1.0, x / sum);
        out.emplace_back(std::move(p));
    }
    return out;
}

namespace {

template <typename Logits, typename Eval>
Temperature fit_impl(const Logits& logits, const std::vector<int>& labels,
                     const std::vector<double>& grid, Eval eval) {
    if (grid.empty()) throw Error("fit_temperature: empty grid");
    if (logits.size() != labels.size())
        throw LengthMismatch("fit_temperature: logits/labels length mismatch");
    double best_t = grid.front();
    double best_e = eval(best_t);
    for (std::size_t i = 1; i < grid.size(); ++i) {
        double e = eval(grid[i]);
        bool closer_to_one = std::abs(grid[i] - 1.0) < std::abs(best_t - 1.0);
        if (e < best_e - 1e-15 || (std::abs(e - best_e) <= 1e-15 && closer_to_one)) {
            best_e = e;
            best_t = grid[i];
        }
    }
    return Temperature(best_t);
}

}  // namespace

Temperature fit_temperature(const std::vector<double>& logits, const std::vector<int>& labels,
                            const std::vector<double>& grid, int bins) {
    return fit_impl(logits, labels, grid, [&](double t) {
        return ece(apply_temperature(logits, Temperature(t)), labels, bins);
    });
}

Temperature fit_temperature(const std::vector<std::vector<double>>& logits,
                            const std::vector<int>& labels, const std::vector<double>& grid,
                            int bins) {
    return fit_impl(logits, labels, grid, [&](double t) {
        return ece(apply_temperature(logits, Temperature(t)), labels, bins);
    });
}

const std::vector<double>& default_temperature_grid() {
    static const std::vector<double> grid = {0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 5.0};
    return grid;
}

}  // namespace sfb
