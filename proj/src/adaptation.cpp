#include "sfb/adaptation.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <nlohmann/json.hpp>

#include "sfb/nn.hpp"

namespace sfb {

SoftPseudoLabels soft_pseudo_labels(const std::vector<double>& stable_probs) {
    if (stable_probs.empty()) throw EmptyInput("soft_pseudo_labels: empty input");
    SoftPseudoLabels out;
    out.labels = stable_probs;
    for (double p : stable_probs) out.soft_count_1 += p;
    return out;
}

PseudoLabelStats estimate_binary_accuracies(const std::vector<double>& stable_probs) {
    auto pl = soft_pseudo_labels(stable_probs);
    const double n = static_cast<double>(stable_probs.size());
    const double n1 = pl.soft_count_1;
    if (n1 <= 1e-12 || n - n1 <= 1e-12) {
        throw DegenerateClassMass("estimate_binary_accuracies: soft class mass is degenerate");
    }
    double sum_sq = 0.0, sum_comp_sq = 0.0;
    for (double p : stable_probs) {
        sum_sq += p * p;
        sum_comp_sq += (1.0 - p) * (1.0 - p);
    }
    PseudoLabelStats stats;
    stats.eps1 = sum_sq / n1;
    stats.eps0 = sum_comp_sq / (n - n1);
    return stats;
}

PseudoLabelStats estimate_confusion(const std::vector<SimplexVector>& stable_probs) {
    if (stable_probs.empty()) throw EmptyInput("estimate_confusion: empty input");
    const int k = static_cast<int>(stable_probs.front().size());
    const int n = static_cast<int>(stable_probs.size());
    Eigen::MatrixXd f(n, k);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < k; ++j) f(i, j) = stable_probs[i][j];
    }
    Eigen::VectorXd counts = f.colwise().sum();
    for (int j = 0; j < k; ++j) {
        if (counts(j) <= 1e-12) {
            throw DegenerateClassMass("estimate_confusion: soft class mass is degenerate");
        }
    }
    PseudoLabelStats stats;
    stats.confusion = f.transpose() * (f * counts.cwiseInverse().asDiagonal());
    return stats;
}

double bias_correct_binary(double tilde_p, const PseudoLabelStats& stats) {
    const double denom = stats.eps0 + stats.eps1 - 1.0;
    if (denom <= kInformativenessThreshold) {
        throw UninformativeStable("bias_correct_binary: eps0 + eps1 - 1 <= threshold");
    }
    return std::min(1.0, std::max(0.0, (tilde_p + stats.eps0 - 1.0) / denom));
}

SimplexVector bias_correct_multiclass(const SimplexVector& tilde_p,
                                      const PseudoLabelStats& stats) {
    const Eigen::MatrixXd& eps = stats.confusion;
    const int k = static_cast<int>(eps.rows());
    if (k == 0 || eps.cols() != k || static_cast<int>(tilde_p.size()) != k) {
        throw Error("bias_correct_multiclass: shape mismatch");
    }
    Eigen::VectorXd t(k);
    for (int i = 0; i < k; ++i) t(i) = tilde_p[i];

    Eigen::JacobiSVD<Eigen::MatrixXd> svd(eps, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (svd.singularValues()(k - 1) <= kInformativenessThreshold) {
        throw UninformativeStable("bias_correct_multiclass: confusion matrix is near-singular");
    }
    Eigen::VectorXd unconstrained = svd.solve(t);
    double best_residual = (eps * unconstrained - t).norm();

    SimplexVector projected = project_to_simplex(
        std::vector<double>(unconstrained.data(), unconstrained.data() + k));
    Eigen::VectorXd p(k);
    for (int i = 0; i < k; ++i) p(i) = projected[i];

    if ((eps * p - t).norm() - best_residual > 1e-9) {
        // Projected gradient on 0.5 * ||eps p - t||^2 with a 1/L step.
        const double step = 1.0 / std::pow(svd.singularValues()(0), 2);
        for (int it = 0; it < 500; ++it) {
            Eigen::VectorXd grad = eps.transpose() * (eps * p - t);
            Eigen::VectorXd next = p - step * grad;
            SimplexVector proj =
                project_to_simplex(std::vector<double>(next.data(), next.data() + k));
            for (int i = 0; i < k; ++i) p(i) = proj[i];
            if (grad.norm() < 1e-12) break;
        }
    }
    return project_to_simplex(std::vector<double>(p.data(), p.data() + k));
}

// ---------------------------------------------------------------------------
// Learners

void TabularLearner::fit(const Eigen::MatrixXd& features, const Eigen::MatrixXd& soft_targets) {
    if (features.rows() != soft_targets.rows()) throw LearnerFailure("TabularLearner: row mismatch");
    if (features.rows() == 0) throw LearnerFailure("TabularLearner: empty fit data");
    std::map<std::vector<double>, std::pair<Eigen::VectorXd, long>> acc;
    for (Eigen::Index i = 0; i < features.rows(); ++i) {
        std::vector<double> key(features.row(i).begin(), features.row(i).end());
        auto [it, inserted] = acc.try_emplace(
            key, std::make_pair(Eigen::VectorXd::Zero(soft_targets.cols()).eval(), 0L));
        it->second.first += soft_targets.row(i).transpose();
        it->second.second += 1;
    }
    cells_.clear();
    for (auto& [key, val] : acc) {
        cells_.emplace_back(key, val.first / static_cast<double>(val.second));
    }
    prior_ = soft_targets.colwise().mean().transpose();
}

Eigen::MatrixXd TabularLearner::predict_proba(const Eigen::MatrixXd& features) const {
    Eigen::MatrixXd out(features.rows(), prior_.size());
    for (Eigen::Index i = 0; i < features.rows(); ++i) {
        std::vector<double> key(features.row(i).begin(), features.row(i).end());
        auto it = std::find_if(cells_.begin(), cells_.end(),
                               [&](const auto& c) { return c.first == key; });
        out.row(i) = (it != cells_.end() ? it->second : prior_).transpose();
    }
    return out;
}

nlohmann::json TabularLearner::params_json() const {
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& [key, mean] : cells_) {
        cells.push_back({{"x", key},
                         {"p", std::vector<double>(mean.data(), mean.data() + mean.size())}});
    }
    return {{"kind", "tabular"},
            {"cells", cells},
            {"prior", std::vector<double>(prior_.data(), prior_.data() + prior_.size())}};
}

LogisticLearner::LogisticLearner(double lr, int steps, double l2, std::uint64_t seed)
    : lr_(lr), steps_(steps), l2_(l2), seed_(seed) {}

void LogisticLearner::fit(const Eigen::MatrixXd& features, const Eigen::MatrixXd& soft_targets) {
    if (features.rows() != soft_targets.rows() || soft_targets.cols() != 1) {
        throw LearnerFailure("LogisticLearner: expects one soft target column");
    }
    const Eigen::Index n = features.rows();
    if (n == 0) throw LearnerFailure("LogisticLearner: empty fit data");
    weights_ = Eigen::VectorXd::Zero(features.cols());
    bias_ = 0.0;
    AdamState w_state, b_state;
    Eigen::VectorXd bias_vec(1);
    for (int s = 0; s < steps_; ++s) {
        Eigen::VectorXd z = features * weights_ + Eigen::VectorXd::Constant(n, bias_);
        Eigen::VectorXd p = z.unaryExpr([](double v) { return sigmoid(v); });
        Eigen::VectorXd err = (p - soft_targets.col(0)) / static_cast<double>(n);
        Eigen::VectorXd gw = features.transpose() * err + l2_ * weights_;
        double gb = err.sum();
        adam_step(weights_, gw, w_state, lr_);
        bias_vec(0) = bias_;
        adam_step(bias_vec, Eigen::VectorXd::Constant(1, gb), b_state, lr_);
        bias_ = bias_vec(0);
    }
}

Eigen::MatrixXd LogisticLearner::predict_proba(const Eigen::MatrixXd& features) const {
    Eigen::VectorXd z = features * weights_ + Eigen::VectorXd::Constant(features.rows(), bias_);
    return z.unaryExpr([](double v) { return sigmoid(v); });
}

nlohmann::json LogisticLearner::params_json() const {
    return {{"kind", "logistic"},
            {"lr", lr_},
            {"steps", steps_},
            {"l2", l2_},
            {"weights", std::vector<double>(weights_.data(), weights_.data() + weights_.size())},
            {"bias", bias_}};
}

// ---------------------------------------------------------------------------
// Adaptation

double AdaptedClassifier::predict(const Eigen::RowVectorXd& x_s,
                                  const Eigen::RowVectorXd& x_u) const {
    double p = stable(x_s);
    for (const auto& r : rounds_) {
        double tilde = r.learner->predict_proba(x_u)(0, 0);
        // Keep the corrected estimate strictly inside (0,1): an exactly
        // saturated learner output would otherwise conflict with the stable
        // channel in combine_binary.
        double corrected = std::min(1.0 - 1e-7, std::max(1e-7, bias_correct_binary(tilde, r.stats)));
        p = combine_binary(Probability(p), Probability(corrected), Probability(r.prior)).value();
    }
    return p;
}

std::vector<double> AdaptedClassifier::predict_batch(const Eigen::MatrixXd& x_s,
                                                     const Eigen::MatrixXd& x_u) const {
    std::vector<double> out(x_s.rows());
    for (Eigen::Index i = 0; i < x_s.rows(); ++i) out[i] = predict(x_s.row(i), x_u.row(i));
    return out;
}

double AdaptedClassifier::predict_unstable(const Eigen::RowVectorXd& x_u) const {
    if (rounds_.empty()) throw Error("predict_unstable: stable-only classifier");
    const auto& r = rounds_.back();
    return bias_correct_binary(r.learner->predict_proba(x_u)(0, 0), r.stats);
}

nlohmann::json AdaptedClassifier::to_json() const {
    nlohmann::json rounds = nlohmann::json::array();
    for (const auto& r : rounds_) {
        rounds.push_back({{"stats", {{"eps0", r.stats.eps0}, {"eps1", r.stats.eps1}}},
                          {"prior", r.prior},
                          {"unstable_params", r.learner->params_json()}});
    }
    return {{"version", 1}, {"mode", "binary"}, {"stable_ref", stable_ref}, {"rounds", rounds}};
}

struct AdaptBuilder {
    static void push_round(AdaptedClassifier& c, AdaptationRound r) {
        c.rounds_.push_back(std::move(r));
    }
    static void push_round(AdaptedClassifierMulti& c, AdaptedClassifierMulti::Round r) {
        c.rounds_.push_back(std::move(r));
    }
};

AdaptResult adapt(const StableFn& stable, const LearnerFactory& make_learner,
                  const Eigen::MatrixXd& x_s, const Eigen::MatrixXd& x_u, int rounds) {
    if (x_s.rows() == 0) throw EmptyInput("adapt: no unlabeled data");
    if (x_s.rows() != x_u.rows()) throw LengthMismatch("adapt: x_s/x_u row mismatch");
    if (rounds < 1) throw Error("adapt: rounds must be >= 1");
    const Eigen::Index n = x_s.rows();

    AdaptResult result;
    result.adapted.stable = stable;

    std::vector<double> pseudo(n);
    for (Eigen::Index i = 0; i < n; ++i) pseudo[i] = stable(x_s.row(i));

    std::optional<PseudoLabelStats> frozen_stats;
    std::vector<double> pseudo_frozen = pseudo;

    for (int r = 0; r < rounds; ++r) {
        PseudoLabelStats stats;
        try {
            stats = estimate_binary_accuracies(pseudo);
            if (stats.eps0 + stats.eps1 - 1.0 <= kInformativenessThreshold) {
                throw UninformativeStable("adapt: stable classifier is uninformative");
            }
        } catch (const Error&) {
            if (r == 0) result.fell_back_to_stable = true;
            break;
        }
        result.per_round_stats.push_back(stats);

        auto pl = soft_pseudo_labels(pseudo);
        double prior = pl.soft_count_1 / static_cast<double>(n);

        Eigen::MatrixXd targets(n, 1);
        for (Eigen::Index i = 0; i < n; ++i) targets(i, 0) = pseudo[i];
        std::shared_ptr<UnstableLearner> learner = make_learner();
        learner->fit(x_u, targets);

        AdaptationRound round{stats, prior, learner};
        AdaptBuilder::push_round(result.adapted, std::move(round));

        // Frozen-stats variant: same learners, round-1 stats throughout.
        if (!frozen_stats) frozen_stats = stats;
        if (rounds > 1) {
            if (!result.frozen_stats_variant) {
                result.frozen_stats_variant = AdaptedClassifier{};
                result.frozen_stats_variant->stable = stable;
            }
            Eigen::MatrixXd targets_f(n, 1);
            for (Eigen::Index i = 0; i < n; ++i) targets_f(i, 0) = pseudo_frozen[i];
            std::shared_ptr<UnstableLearner> learner_f = make_learner();
            learner_f->fit(x_u, targets_f);
            double prior_f = std::accumulate(pseudo_frozen.begin(), pseudo_frozen.end(), 0.0) /
                             static_cast<double>(n);
            AdaptBuilder::push_round(*result.frozen_stats_variant,
                                     AdaptationRound{*frozen_stats, prior_f, learner_f});
            pseudo_frozen = result.frozen_stats_variant->predict_batch(x_s, x_u);
        }

        pseudo = result.adapted.predict_batch(x_s, x_u);
    }
    return result;
}

SimplexVector AdaptedClassifierMulti::predict(const Eigen::RowVectorXd& x_s,
                                              const Eigen::RowVectorXd& x_u) const {
    SimplexVector p = stable(x_s);
    for (const auto& r : rounds_) {
        Eigen::MatrixXd tilde_row = r.learner->predict_proba(x_u);
        std::vector<double> tilde(tilde_row.data(), tilde_row.data() + tilde_row.cols());
        double s = std::accumulate(tilde.begin(), tilde.end(), 0.0);
        for (double& v : tilde) v = std::min(1.0, std::max(0.0, v / s));
        SimplexVector corrected = bias_correct_multiclass(SimplexVector(tilde), r.stats);
        p = combine_multiclass(p, corrected, r.prior);
    }
    return p;
}

AdaptResultMulti adapt_multiclass(const StableFnMulti& stable, const LearnerFactory& make_learner,
                                  const Eigen::MatrixXd& x_s, const Eigen::MatrixXd& x_u,
                                  int rounds, int num_classes) {
    if (x_s.rows() == 0) throw EmptyInput("adapt_multiclass: no unlabeled data");
    if (x_s.rows() != x_u.rows()) throw LengthMismatch("adapt_multiclass: x_s/x_u row mismatch");
    const Eigen::Index n = x_s.rows();
    const int k = num_classes;

    AdaptResultMulti result;
    result.adapted.stable = stable;

    std::vector<SimplexVector> pseudo;
    pseudo.reserve(n);
    for (Eigen::Index i = 0; i < n; ++i) pseudo.push_back(stable(x_s.row(i)));

    for (int r = 0; r < rounds; ++r) {
        PseudoLabelStats stats;
        try {
            stats = estimate_confusion(pseudo);
            Eigen::JacobiSVD<Eigen::MatrixXd> svd(stats.confusion);
            if (svd.singularValues()(k - 1) <= kInformativenessThreshold) {
                throw UninformativeStable("adapt_multiclass: confusion near-singular");
            }
        } catch (const Error&) {
            if (r == 0) result.fell_back_to_stable = true;
            break;
        }

        Eigen::MatrixXd targets(n, k);
        Eigen::VectorXd counts = Eigen::VectorXd::Zero(k);
        for (Eigen::Index i = 0; i < n; ++i) {
            for (int j = 0; j < k; ++j) targets(i, j) = pseudo[i][j];
            counts += targets.row(i).transpose();
        }
        std::vector<double> prior_v(k);
        for (int j = 0; j < k; ++j) prior_v[j] = counts(j) / static_cast<double>(n);

        std::shared_ptr<UnstableLearner> learner = make_learner();
        learner->fit(x_u, targets);

        AdaptBuilder::push_round(result.adapted, AdaptedClassifierMulti::Round{
                                                     stats, SimplexVector(prior_v), learner});

        pseudo.clear();
        for (Eigen::Index i = 0; i < n; ++i) {
            pseudo.push_back(result.adapted.predict(x_s.row(i), x_u.row(i)));
        }
    }
    return result;
}

std::shared_ptr<UnstableLearner> learner_from_json(const nlohmann::json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "tabular") {
        auto lr = std::make_shared<TabularLearner>();
        auto prior = j.at("prior").get<std::vector<double>>();
        lr->prior_ = Eigen::Map<const Eigen::VectorXd>(prior.data(), prior.size());
        for (const auto& cell : j.at("cells")) {
            auto p = cell.at("p").get<std::vector<double>>();
            lr->cells_.emplace_back(cell.at("x").get<std::vector<double>>(),
                                    Eigen::Map<const Eigen::VectorXd>(p.data(), p.size()));
        }
        return lr;
    }
    if (kind == "logistic") {
        auto lr = std::make_shared<LogisticLearner>(j.at("lr").get<double>(),
                                                    j.at("steps").get<int>(),
                                                    j.at("l2").get<double>());
        auto w = j.at("weights").get<std::vector<double>>();
        lr->weights_ = Eigen::Map<const Eigen::VectorXd>(w.data(), w.size());
        lr->bias_ = j.at("bias").get<double>();
        return lr;
    }
    throw Error("learner_from_json: unknown kind " + kind);
}

AdaptedClassifier adapted_from_json(const nlohmann::json& j, StableFn stable) {
    if (j.at("version").get<int>() != 1 || j.at("mode").get<std::string>() != "binary") {
        throw Error("adapted_from_json: unsupported checkpoint");
    }
    AdaptedClassifier clf;
    clf.stable = std::move(stable);
    clf.stable_ref = j.at("stable_ref").get<std::string>();
    for (const auto& r : j.at("rounds")) {
        AdaptationRound round;
        round.stats.eps0 = r.at("stats").at("eps0").get<double>();
        round.stats.eps1 = r.at("stats").at("eps1").get<double>();
        round.prior = r.at("prior").get<double>();
        round.learner = learner_from_json(r.at("unstable_params"));
        AdaptBuilder::push_round(clf, std::move(round));
    }
    return clf;
}

}  // namespace sfb
