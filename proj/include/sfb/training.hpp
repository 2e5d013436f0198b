#pragma once

#include <Eigen/Dense>
#include <map>
#include <string>
#include <vector>

#include "sfb/envs.hpp"
#include "sfb/errors.hpp"
#include "sfb/nn.hpp"

namespace sfb {

enum class StabilityPenalty { kIrmV1, kVRex };

struct TrainConfig {
    double lambda_s = 0.0;
    double lambda_c = 0.0;
    double lr = 1e-3;
    long steps = 500;
    long pretrain_steps = 0;  // penalties off for the first pretrain_steps
    StabilityPenalty penalty = StabilityPenalty::kIrmV1;
    std::uint64_t seed = 0;
    int dim_s = 4;
    std::vector<int> hidden = {8, 8};  // trunk hidden widths
    int phi_dim = 8;                   // trunk output width (dim_s + dim_u)
    double dropout = 0.0;
    bool cosine_schedule = false;
    std::string metrics_path;  // step-indexed CSV log; empty disables
};

struct LinearHead {
    Eigen::VectorXd w;
    double b = 0.0;
};

/// Shared trunk split into stable/unstable halves, one stable head, one
/// unstable head per training environment.
struct SfbModel {
    DenseNet trunk;
    int dim_s = 0;
    LinearHead stable_head;
    std::map<std::string, LinearHead> unstable_heads;
    double temperature = 1.0;  // set post-training by calibration
    double train_prior = 0.5;

    Eigen::VectorXd stable_logits(const Eigen::MatrixXd& x);
    /// Calibrated stable probabilities (logits / temperature through sigmoid).
    std::vector<double> stable_probs(const Eigen::MatrixXd& x);
    Eigen::MatrixXd unstable_features(const Eigen::MatrixXd& x);
};

struct EnvBatch {
    std::string env_id;
    Eigen::MatrixXd x;
    Eigen::VectorXd y;  // fractional labels permitted
};

/// Mean negative log-likelihood against (possibly fractional) targets.
double cross_entropy_risk(const std::vector<double>& probs, const std::vector<double>& labels);
double cross_entropy_risk(const Eigen::VectorXd& probs, const Eigen::VectorXd& labels);

struct PenaltyValueGrad {
    double value = 0.0;
    Eigen::VectorXd grad;
};

/// IRMv1-style penalty on per-environment logits:
/// D = (mean_i (sigmoid(z_i) - y_i) * z_i)^2, with its closed-form gradient
/// in z so only first-order machinery is needed.
PenaltyValueGrad irmv1_penalty(const Eigen::VectorXd& logits, const Eigen::VectorXd& labels);

/// Population variance of per-environment risks; grad 2(R_e - mean)/m.
PenaltyValueGrad vrex_penalty(const std::vector<double>& risks);

struct CondIndepValueGrad {
    double value = 0.0;
    Eigen::MatrixXd grad_phi_s;
    Eigen::MatrixXd grad_phi_u;
};

/// Class-frequency-weighted Frobenius norm of the within-class cross-covariance
/// between phi_S and phi_U; zero iff all within-class cross-covariances vanish.
CondIndepValueGrad cond_indep_penalty(const Eigen::MatrixXd& phi_s, const Eigen::MatrixXd& phi_u,
                                      const std::vector<int>& labels);

/// Flat parameter order: trunk, stable head, unstable heads by env id.
Eigen::VectorXd flat_params(const SfbModel& model);
void set_flat_params(SfbModel& model, const Eigen::VectorXd& flat);

struct ObjectiveResult {
    double value = 0.0;
    Eigen::VectorXd grads;  // aligned with flat_params
    std::map<std::string, double> env_stable_risk;
    std::map<std::string, double> env_joint_risk;
    double stability_penalty = 0.0;
    double cond_indep_penalty = 0.0;
};

/// sum_e [R^e(stable) + R^e(joint)] + lambda_S * P_Stability + lambda_C * P_CondIndep,
/// with the joint prediction fused in logit space against the pooled prior.
ObjectiveResult sfb_objective(SfbModel& model, const std::vector<EnvBatch>& batches,
                              const TrainConfig& cfg, bool train_mode = false);

/// Full-batch multi-environment training: pretrain_steps pure-risk steps, then
/// the full objective; deterministic per cfg.seed.
SfbModel train(const std::vector<EnvDataset>& datasets, const TrainConfig& cfg);

// Baselines for the harness: a plain net (trunk + single linear head on the
// full representation) trained on the pooled risk, optionally with the IRMv1
// penalty per environment.
struct BaselineModel {
    DenseNet trunk;
    LinearHead head;
    Eigen::VectorXd logits(const Eigen::MatrixXd& x);
};

enum class BaselineKind { kErm, kIrm };

BaselineModel train_baseline(const std::vector<EnvDataset>& datasets, const TrainConfig& cfg,
                             BaselineKind kind);

double binary_accuracy(const std::vector<double>& probs, const std::vector<int>& labels);

}  // namespace sfb
