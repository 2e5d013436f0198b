#pragma once

#include <cmath>
#include <vector>

#include "sfb/errors.hpp"

namespace sfb {

// Clamp applied before logits inside training paths; combine_* accepts true 0/1.
inline constexpr double kProbClamp = 1e-7;
inline constexpr double kSimplexTol = 1e-9;

/// A probability value, validated to lie in [0, 1].
class Probability {
public:
    explicit Probability(double v);
    double value() const { return value_; }

    static Probability clamped(double v);

private:
    double value_;
};

/// log(p / (1-p)); saturates to +/-inf at the endpoints.
double logit(Probability p);
double logit(double p);

double sigmoid(double z);

/// A point on the probability simplex over K >= 2 classes.
/// Construction renormalizes when the entry sum is within kSimplexTol of 1,
/// rejects otherwise.
class SimplexVector {
public:
    explicit SimplexVector(std::vector<double> entries);
    const std::vector<double>& entries() const { return entries_; }
    double operator[](std::size_t i) const { return entries_[i]; }
    std::size_t size() const { return entries_.size(); }

    static SimplexVector uniform(std::size_t k);

private:
    std::vector<double> entries_;
};

/// sigma(logit p_S + logit p_U - logit prior).
/// A single saturated input dominates; two saturated inputs that disagree
/// throw ConflictingCertainty.
Probability combine_binary(Probability p_s, Probability p_u, Probability prior);

/// Normalize(p_S * p_U / prior), elementwise. Throws ZeroMass when the
/// unnormalized product vanishes identically.
SimplexVector combine_multiclass(const SimplexVector& p_s, const SimplexVector& p_u,
                                 const SimplexVector& prior);

/// Exact sort-based Euclidean projection onto the probability simplex.
SimplexVector project_to_simplex(const std::vector<double>& v);

}  // namespace sfb
