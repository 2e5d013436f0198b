#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "sfb/errors.hpp"
#include "sfb/prob.hpp"

namespace sfb {

// Finite-sample guard on the bias-correction denominator eps0 + eps1 - 1
// (and on sigma_min of the confusion matrix in the multiclass case).
inline constexpr double kInformativenessThreshold = 1e-3;

/// Class-wise pseudo-label accuracies (binary) or a KxK confusion matrix
/// with confusion(y, y') = Pr[Yhat = y | Y = y'] (columns sum to 1).
struct PseudoLabelStats {
    double eps0 = 0.0;
    double eps1 = 0.0;
    Eigen::MatrixXd confusion;  // empty in binary mode

    bool multiclass() const { return confusion.size() > 0; }
};

struct SoftPseudoLabels {
    std::vector<double> labels;  // Pr[Y=1|X_S] per sample
    double soft_count_1 = 0.0;   // n1 = sum of labels
};

/// Identity copy of the calibrated stable outputs, plus the soft class count.
SoftPseudoLabels soft_pseudo_labels(const std::vector<double>& stable_probs);

/// eps1 = sum(p^2)/n1, eps0 = sum((1-p)^2)/(n-n1); the plug-in estimate of the
/// class-wise pseudo-label accuracies from unlabeled data.
PseudoLabelStats estimate_binary_accuracies(const std::vector<double>& stable_probs);

/// eps = F^T * Normalize_columns(F) for the n x K matrix F of stable outputs.
PseudoLabelStats estimate_confusion(const std::vector<SimplexVector>& stable_probs);

/// clamp_[0,1]((tilde_p + eps0 - 1) / (eps0 + eps1 - 1)).
/// Throws UninformativeStable when the denominator is at or below the guard.
double bias_correct_binary(double tilde_p, const PseudoLabelStats& stats);

/// argmin over the simplex of ||eps * p - tilde_p||_2, via unconstrained least
/// squares, simplex projection, and projected-gradient refinement when the
/// projection raises the residual.
SimplexVector bias_correct_multiclass(const SimplexVector& tilde_p,
                                      const PseudoLabelStats& stats);

/// Fits soft (fractional) targets; predict_proba returns one column per class
/// (a single Pr[Y=1] column in binary mode).
class UnstableLearner {
public:
    virtual ~UnstableLearner() = default;
    virtual void fit(const Eigen::MatrixXd& features, const Eigen::MatrixXd& soft_targets) = 0;
    virtual Eigen::MatrixXd predict_proba(const Eigen::MatrixXd& features) const = 0;
    virtual nlohmann::json params_json() const = 0;
};

/// Exact conditional mean of the soft targets per distinct feature row; cells
/// unseen at fit time fall back to the global prior.
class TabularLearner : public UnstableLearner {
public:
    void fit(const Eigen::MatrixXd& features, const Eigen::MatrixXd& soft_targets) override;
    Eigen::MatrixXd predict_proba(const Eigen::MatrixXd& features) const override;
    nlohmann::json params_json() const override;

private:
    friend std::shared_ptr<UnstableLearner> learner_from_json(const nlohmann::json&);
    std::vector<std::pair<std::vector<double>, Eigen::VectorXd>> cells_;
    Eigen::VectorXd prior_;
};

/// Binary logistic head trained with Adam on cross-entropy against
/// fractional targets.
class LogisticLearner : public UnstableLearner {
public:
    explicit LogisticLearner(double lr = 0.01, int steps = 20, double l2 = 0.0,
                             std::uint64_t seed = 0);
    void fit(const Eigen::MatrixXd& features, const Eigen::MatrixXd& soft_targets) override;
    Eigen::MatrixXd predict_proba(const Eigen::MatrixXd& features) const override;
    nlohmann::json params_json() const override;

    void set_steps(int steps) { steps_ = steps; }
    int steps() const { return steps_; }

private:
    friend std::shared_ptr<UnstableLearner> learner_from_json(const nlohmann::json&);
    double lr_;
    int steps_;
    double l2_;
    std::uint64_t seed_;
    Eigen::VectorXd weights_;
    double bias_ = 0.0;
};

using StableFn = std::function<double(const Eigen::RowVectorXd&)>;
using LearnerFactory = std::function<std::unique_ptr<UnstableLearner>()>;

/// Inverse of params_json() for the built-in learner kinds.
std::shared_ptr<UnstableLearner> learner_from_json(const nlohmann::json& j);

struct AdaptationRound {
    PseudoLabelStats stats;
    double prior = 0.5;
    std::shared_ptr<UnstableLearner> learner;
};

/// Joint classifier: calibrated stable head fused with the bias-corrected
/// unstable head of each pseudo-labeling round.
class AdaptedClassifier {
public:
    double predict(const Eigen::RowVectorXd& x_s, const Eigen::RowVectorXd& x_u) const;
    std::vector<double> predict_batch(const Eigen::MatrixXd& x_s, const Eigen::MatrixXd& x_u) const;

    /// Bias-corrected unstable prediction of the final round.
    double predict_unstable(const Eigen::RowVectorXd& x_u) const;

    bool stable_only() const { return rounds_.empty(); }
    const std::vector<AdaptationRound>& rounds() const { return rounds_; }
    nlohmann::json to_json() const;

    StableFn stable;
    std::string stable_ref = "stable";

private:
    friend struct AdaptBuilder;
    std::vector<AdaptationRound> rounds_;
};

struct AdaptResult {
    AdaptedClassifier adapted;
    // Same procedure with round-1 stats frozen across rounds; present when
    // rounds > 1 so the harness can report both variants.
    std::optional<AdaptedClassifier> frozen_stats_variant;
    bool fell_back_to_stable = false;
    std::vector<PseudoLabelStats> per_round_stats;
};

/// Inverse of AdaptedClassifier::to_json(); the stable function is supplied by
/// the caller (the checkpoint only records stable_ref).
AdaptedClassifier adapted_from_json(const nlohmann::json& j, StableFn stable);

/// Multi-round bias-corrected pseudo-labeling in the unlabeled test domain.
/// Round 1 runs the base procedure; round r > 1 uses the previous round's
/// joint predictor as the pseudo-label source and re-estimates the stats.
AdaptResult adapt(const StableFn& stable, const LearnerFactory& make_learner,
                  const Eigen::MatrixXd& x_s, const Eigen::MatrixXd& x_u, int rounds);

using StableFnMulti = std::function<SimplexVector(const Eigen::RowVectorXd&)>;

/// Multiclass joint classifier (confusion-matrix bias correction,
/// product-normalize combination).
class AdaptedClassifierMulti {
public:
    SimplexVector predict(const Eigen::RowVectorXd& x_s, const Eigen::RowVectorXd& x_u) const;
    bool stable_only() const { return rounds_.empty(); }

    StableFnMulti stable;

    struct Round {
        PseudoLabelStats stats;
        SimplexVector prior;
        std::shared_ptr<UnstableLearner> learner;
    };
    const std::vector<Round>& rounds() const { return rounds_; }

private:
    friend struct AdaptBuilder;
    std::vector<Round> rounds_;
};

struct AdaptResultMulti {
    AdaptedClassifierMulti adapted;
    bool fell_back_to_stable = false;
};

AdaptResultMulti adapt_multiclass(const StableFnMulti& stable, const LearnerFactory& make_learner,
                                  const Eigen::MatrixXd& x_s, const Eigen::MatrixXd& x_u,
                                  int rounds, int num_classes);

}  // namespace sfb
