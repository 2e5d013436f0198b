#include "sfb/prob.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

namespace sfb {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

Probability::Probability(double v) : value_(v) {
    if (!(v >= 0.0 && v <= 1.0)) {
        throw Error("Probability out of [0,1]: " + std::to_string(v));
    }
}

Probability Probability::clamped(double v) {
    return Probability(std::min(1.0 - kProbClamp, std::max(kProbClamp, v)));
}

double logit(double p) {
    if (p <= 0.0) return -kInf;
    if (p >= 1.0) return kInf;
    return std::log(p / (1.0 - p));
}

double logit(Probability p) { return logit(p.value()); }

double sigmoid(double z) {
    if (z >= 0.0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    double e = std::exp(z);
    return e / (1.0 + e);
}

SimplexVector::SimplexVector(std::vector<double> entries) : entries_(std::move(entries)) {
    if (entries_.size() < 2) throw Error("SimplexVector needs K >= 2");
    double sum = 0.0;
    for (double e : entries_) {
        if (!(e >= 0.0 && e <= 1.0)) throw Error("SimplexVector entry out of [0,1]");
        sum += e;
    }
    if (std::abs(sum - 1.0) > kSimplexTol) {
        throw Error("SimplexVector entries sum to " + std::to_string(sum));
    }
    for (double& e : entries_) e /= sum;
}

SimplexVector SimplexVector::uniform(std::size_t k) {
    return SimplexVector(std::vector<double>(k, 1.0 / static_cast<double>(k)));
}

Probability combine_binary(Probability p_s, Probability p_u, Probability prior) {
    const double s = p_s.value();
    const double u = p_u.value();
    if (!(prior.value() > 0.0 && prior.value() < 1.0)) {
        throw Error("combine_binary: prior must lie in (0,1)");
    }
    const bool s_sat = (s == 0.0 || s == 1.0);
    const bool u_sat = (u == 0.0 || u == 1.0);
    if (s_sat && u_sat) {
        if (s != u) throw ConflictingCertainty("combine_binary: saturated inputs disagree");
        return p_s;
    }
    if (s_sat) return p_s;
    if (u_sat) return p_u;
    return Probability(sigmoid(logit(s) + logit(u) - logit(prior)));
}

SimplexVector combine_multiclass(const SimplexVector& p_s, const SimplexVector& p_u,
                                 const SimplexVector& prior) {
    const std::size_t k = p_s.size();
    if (p_u.size() != k || prior.size() != k) {
        throw Error("combine_multiclass: dimension mismatch");
    }
    std::vector<double> q(k);
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        if (!(prior[i] > 0.0)) throw Error("combine_multiclass: prior must be strictly positive");
        q[i] = p_s[i] * p_u[i] / prior[i];
        sum += q[i];
    }
    if (sum <= 0.0) throw ZeroMass("combine_multiclass: product has zero mass");
    std::vector<double> out(k);
    for (std::size_t i = 0; i < k; ++i) out[i] = std::min(1.0, q[i] / sum);
    return SimplexVector(std::move(out));
}

SimplexVector project_to_simplex(const std::vector<double>& v) {
    const std::size_t k = v.size();
    if (k < 2) throw Error("project_to_simplex needs K >= 2");
    for (double x : v) {
        if (!std::isfinite(x)) throw Error("project_to_simplex: non-finite entry");
    }
    std::vector<double> u = v;
    std::sort(u.begin(), u.end(), std::greater<double>());
    double cssv = 0.0;
    double theta = 0.0;
    std::size_t rho = 0;
    double running = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        running += u[i];
        double t = (running - 1.0) / static_cast<double>(i + 1);
        if (u[i] - t > 0.0) {
            rho = i + 1;
            cssv = running;
        }
    }
    theta = (cssv - 1.0) / static_cast<double>(rho);
    std::vector<double> out(k);
    for (std::size_t i = 0; i < k; ++i) out[i] = std::min(1.0, std::max(0.0, v[i] - theta));
    return SimplexVector(std::move(out));
}

}  // namespace sfb
