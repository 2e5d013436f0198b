#include "sfb/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "sfb/prob.hpp"

namespace sfb {

namespace {

double clamp_prob(double p) {
    return std::min(1.0 - kProbClamp, std::max(kProbClamp, p));
}

Eigen::VectorXd sigmoid_vec(const Eigen::VectorXd& z) {
    return z.unaryExpr([](double v) { return sigmoid(v); });
}

DenseNet make_trunk(int input_dim, const TrainConfig& cfg) {
    std::vector<LayerSpec> specs;
    int in = input_dim;
    for (int h : cfg.hidden) {
        specs.push_back({in, h, Activation::kRelu});
        in = h;
    }
    specs.push_back({in, cfg.phi_dim, Activation::kIdentity});
    return DenseNet(specs, cfg.dropout, cfg.seed);
}

}  // namespace

Eigen::VectorXd SfbModel::stable_logits(const Eigen::MatrixXd& x) {
    Eigen::MatrixXd phi = trunk.forward(x, /*train_mode=*/false);
    auto rep = split(phi, dim_s);
    return rep.phi_s * stable_head.w + Eigen::VectorXd::Constant(x.rows(), stable_head.b);
}

std::vector<double> SfbModel::stable_probs(const Eigen::MatrixXd& x) {
    Eigen::VectorXd z = stable_logits(x) / temperature;
    std::vector<double> out(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) out[i] = sigmoid(z(i));
    return out;
}

Eigen::MatrixXd SfbModel::unstable_features(const Eigen::MatrixXd& x) {
    Eigen::MatrixXd phi = trunk.forward(x, /*train_mode=*/false);
    return split(phi, dim_s).phi_u;
}

double cross_entropy_risk(const Eigen::VectorXd& probs, const Eigen::VectorXd& labels) {
    if (probs.size() != labels.size()) throw LengthMismatch("cross_entropy_risk: length mismatch");
    if (probs.size() == 0) throw EmptyEnvironment("cross_entropy_risk: empty input");
    double s = 0.0;
    for (Eigen::Index i = 0; i < probs.size(); ++i) {
        double p = clamp_prob(probs(i));
        s += -(labels(i) * std::log(p) + (1.0 - labels(i)) * std::log(1.0 - p));
    }
    return s / static_cast<double>(probs.size());
}

double cross_entropy_risk(const std::vector<double>& probs, const std::vector<double>& labels) {
    return cross_entropy_risk(
        Eigen::Map<const Eigen::VectorXd>(probs.data(), static_cast<Eigen::Index>(probs.size())),
        Eigen::Map<const Eigen::VectorXd>(labels.data(), static_cast<Eigen::Index>(labels.size())));
}

PenaltyValueGrad irmv1_penalty(const Eigen::VectorXd& logits, const Eigen::VectorXd& labels) {
    if (logits.size() == 0) throw EmptyEnvironment("irmv1_penalty: empty environment");
    if (logits.size() != labels.size()) throw LengthMismatch("irmv1_penalty: length mismatch");
    const double n = static_cast<double>(logits.size());
    Eigen::VectorXd p = sigmoid_vec(logits);
    double m = (p - labels).cwiseProduct(logits).mean();
    PenaltyValueGrad out;
    out.value = m * m;
    out.grad.resize(logits.size());
    for (Eigen::Index j = 0; j < logits.size(); ++j) {
        double sp = p(j) * (1.0 - p(j));  // sigma'(z_j)
        out.grad(j) = 2.0 * m * (sp * logits(j) + p(j) - labels(j)) / n;
    }
    return out;
}

PenaltyValueGrad vrex_penalty(const std::vector<double>& risks) {
    if (risks.size() < 2) throw TooFewEnvironments("vrex_penalty: need >= 2 environments");
    const double m = static_cast<double>(risks.size());
    double mean = std::accumulate(risks.begin(), risks.end(), 0.0) / m;
    PenaltyValueGrad out;
    out.grad.resize(risks.size());
    for (std::size_t e = 0; e < risks.size(); ++e) {
        double d = risks[e] - mean;
        out.value += d * d / m;
        out.grad(static_cast<Eigen::Index>(e)) = 2.0 * d / m;
    }
    return out;
}

CondIndepValueGrad cond_indep_penalty(const Eigen::MatrixXd& phi_s, const Eigen::MatrixXd& phi_u,
                                      const std::vector<int>& labels) {
    const Eigen::Index n = phi_s.rows();
    if (phi_u.rows() != n || static_cast<Eigen::Index>(labels.size()) != n) {
        throw LengthMismatch("cond_indep_penalty: batch misaligned");
    }
    CondIndepValueGrad out;
    out.grad_phi_s = Eigen::MatrixXd::Zero(phi_s.rows(), phi_s.cols());
    out.grad_phi_u = Eigen::MatrixXd::Zero(phi_u.rows(), phi_u.cols());

    std::map<int, std::vector<Eigen::Index>> classes;
    for (Eigen::Index i = 0; i < n; ++i) classes[labels[i]].push_back(i);

    for (const auto& [y, idx] : classes) {
        if (idx.size() < 2) throw DegenerateClass("cond_indep_penalty: class with < 2 samples");
        const double ny = static_cast<double>(idx.size());
        const double wy = ny / static_cast<double>(n);
        Eigen::MatrixXd s(idx.size(), phi_s.cols()), u(idx.size(), phi_u.cols());
        for (std::size_t j = 0; j < idx.size(); ++j) {
            s.row(static_cast<Eigen::Index>(j)) = phi_s.row(idx[j]);
            u.row(static_cast<Eigen::Index>(j)) = phi_u.row(idx[j]);
        }
        Eigen::RowVectorXd s_mean = s.colwise().mean();
        Eigen::RowVectorXd u_mean = u.colwise().mean();
        Eigen::MatrixXd sc = s.rowwise() - s_mean;
        Eigen::MatrixXd uc = u.rowwise() - u_mean;
        Eigen::MatrixXd cov = sc.transpose() * uc / ny;  // d_s x d_u
        out.value += wy * cov.squaredNorm();
        // d/ds_i = wy * (2/ny) * cov * (u_i - u_mean); centering terms cancel.
        Eigen::MatrixXd gs = (2.0 * wy / ny) * (uc * cov.transpose());
        Eigen::MatrixXd gu = (2.0 * wy / ny) * (sc * cov);
        for (std::size_t j = 0; j < idx.size(); ++j) {
            out.grad_phi_s.row(idx[j]) += gs.row(static_cast<Eigen::Index>(j));
            out.grad_phi_u.row(idx[j]) += gu.row(static_cast<Eigen::Index>(j));
        }
    }
    return out;
}

Eigen::VectorXd flat_params(const SfbModel& model) {
    Eigen::VectorXd trunk = flatten_parameters(model.trunk);
    long total = trunk.size() + model.stable_head.w.size() + 1;
    for (const auto& [id, h] : model.unstable_heads) total += h.w.size() + 1;
    Eigen::VectorXd flat(total);
    long off = 0;
    flat.segment(off, trunk.size()) = trunk;
    off += trunk.size();
    flat.segment(off, model.stable_head.w.size()) = model.stable_head.w;
    off += model.stable_head.w.size();
    flat(off++) = model.stable_head.b;
    for (const auto& [id, h] : model.unstable_heads) {
        flat.segment(off, h.w.size()) = h.w;
        off += h.w.size();
        flat(off++) = h.b;
    }
    return flat;
}

void set_flat_params(SfbModel& model, const Eigen::VectorXd& flat) {
    long trunk_size = flatten_parameters(model.trunk).size();
    set_parameters(model.trunk, flat.head(trunk_size));
    long off = trunk_size;
    model.stable_head.w = flat.segment(off, model.stable_head.w.size());
    off += model.stable_head.w.size();
    model.stable_head.b = flat(off++);
    for (auto& [id, h] : model.unstable_heads) {
        h.w = flat.segment(off, h.w.size());
        off += h.w.size();
        h.b = flat(off++);
    }
    if (off != flat.size()) throw ShapeMismatch("set_flat_params: size mismatch");
}

ObjectiveResult sfb_objective(SfbModel& model, const std::vector<EnvBatch>& batches,
                              const TrainConfig& cfg, bool train_mode) {
    if (batches.empty()) throw EmptyEnvironment("sfb_objective: no environments");
    for (const auto& b : batches) {
        if (!model.unstable_heads.count(b.env_id)) {
            throw Error("sfb_objective: no unstable head for env " + b.env_id);
        }
    }

    // Pooled training prior.
    double total_y = 0.0;
    long total_n = 0;
    for (const auto& b : batches) {
        total_y += b.y.sum();
        total_n += b.y.size();
    }
    const double prior = clamp_prob(total_y / static_cast<double>(total_n));
    const double prior_logit = logit(prior);
    model.train_prior = prior;

    struct EnvState {
        GradientTape tape;
        Eigen::MatrixXd phi;
        Eigen::VectorXd z_s, z_u, p_s, p_joint;
        Eigen::VectorXd dz_s, dz_u;
        double stable_risk = 0.0, joint_risk = 0.0;
    };
    std::vector<EnvState> states(batches.size());

    ObjectiveResult result;
    std::vector<double> stable_risks;

    for (std::size_t e = 0; e < batches.size(); ++e) {
        const EnvBatch& b = batches[e];
        EnvState& st = states[e];
        const Eigen::Index n = b.x.rows();
        const double dn = static_cast<double>(n);
        st.phi = model.trunk.forward(b.x, train_mode, &st.tape);
        auto rep = split(st.phi, model.dim_s);
        const LinearHead& hu = model.unstable_heads.at(b.env_id);
        st.z_s = rep.phi_s * model.stable_head.w + Eigen::VectorXd::Constant(n, model.stable_head.b);
        st.z_u = rep.phi_u * hu.w + Eigen::VectorXd::Constant(n, hu.b);
        st.p_s = sigmoid_vec(st.z_s);
        Eigen::VectorXd z_joint = st.z_s + st.z_u - Eigen::VectorXd::Constant(n, prior_logit);
        st.p_joint = sigmoid_vec(z_joint);

        st.stable_risk = cross_entropy_risk(st.p_s, b.y);
        st.joint_risk = cross_entropy_risk(st.p_joint, b.y);
        result.env_stable_risk[b.env_id] = st.stable_risk;
        result.env_joint_risk[b.env_id] = st.joint_risk;
        stable_risks.push_back(st.stable_risk);
        result.value += st.stable_risk + st.joint_risk;

        st.dz_s = (st.p_s - b.y) / dn + (st.p_joint - b.y) / dn;
        st.dz_u = (st.p_joint - b.y) / dn;

        if (cfg.lambda_s > 0.0 && cfg.penalty == StabilityPenalty::kIrmV1) {
            auto irm = irmv1_penalty(st.z_s, b.y);
            result.stability_penalty += irm.value;
            st.dz_s += cfg.lambda_s * irm.grad;
        }
    }

    if (cfg.lambda_s > 0.0 && cfg.penalty == StabilityPenalty::kVRex) {
        auto vrex = vrex_penalty(stable_risks);
        result.stability_penalty = vrex.value;
        for (std::size_t e = 0; e < batches.size(); ++e) {
            // dR_e/dz_s flows through the clamped cross-entropy.
            const Eigen::Index n = batches[e].x.rows();
            Eigen::VectorXd d_risk =
                (states[e].p_s - batches[e].y) / static_cast<double>(n);
            states[e].dz_s += cfg.lambda_s * vrex.grad(static_cast<Eigen::Index>(e)) * d_risk;
        }
    }
    result.value += cfg.lambda_s * result.stability_penalty;

    // Backprop per environment and accumulate parameter gradients.
    auto trunk_grads = zero_like_gradients(model.trunk);
    Eigen::VectorXd gw_s = Eigen::VectorXd::Zero(model.stable_head.w.size());
    double gb_s = 0.0;
    std::map<std::string, std::pair<Eigen::VectorXd, double>> gu_heads;
    for (const auto& [id, h] : model.unstable_heads) {
        gu_heads[id] = {Eigen::VectorXd::Zero(h.w.size()), 0.0};
    }

    for (std::size_t e = 0; e < batches.size(); ++e) {
        const EnvBatch& b = batches[e];
        EnvState& st = states[e];
        auto rep = split(st.phi, model.dim_s);
        const LinearHead& hu = model.unstable_heads.at(b.env_id);

        gw_s += rep.phi_s.transpose() * st.dz_s;
        gb_s += st.dz_s.sum();
        auto& [gw_u, gb_u] = gu_heads[b.env_id];
        gw_u += rep.phi_u.transpose() * st.dz_u;
        gb_u += st.dz_u.sum();

        Eigen::MatrixXd dphi = Eigen::MatrixXd::Zero(st.phi.rows(), st.phi.cols());
        dphi.leftCols(model.dim_s) = st.dz_s * model.stable_head.w.transpose();
        dphi.rightCols(st.phi.cols() - model.dim_s) = st.dz_u * hu.w.transpose();

        if (cfg.lambda_c > 0.0) {
            std::vector<int> hard_labels(b.y.size());
            for (Eigen::Index i = 0; i < b.y.size(); ++i) {
                hard_labels[i] = b.y(i) >= 0.5 ? 1 : 0;
            }
            auto ci = cond_indep_penalty(rep.phi_s, rep.phi_u, hard_labels);
            result.cond_indep_penalty += ci.value;
            dphi.leftCols(model.dim_s) += cfg.lambda_c * ci.grad_phi_s;
            dphi.rightCols(st.phi.cols() - model.dim_s) += cfg.lambda_c * ci.grad_phi_u;
        }

        auto env_grads = st.tape.backward(dphi);
        for (std::size_t li = 0; li < trunk_grads.size(); ++li) {
            trunk_grads[li].first += env_grads[li].first;
            trunk_grads[li].second += env_grads[li].second;
        }
    }
    result.value += cfg.lambda_c * result.cond_indep_penalty;

    // Assemble flat gradient in flat_params order.
    Eigen::VectorXd trunk_flat = flatten_gradients(trunk_grads);
    long total = trunk_flat.size() + gw_s.size() + 1;
    for (const auto& [id, g] : gu_heads) total += g.first.size() + 1;
    result.grads.resize(total);
    long off = 0;
    result.grads.segment(off, trunk_flat.size()) = trunk_flat;
    off += trunk_flat.size();
    result.grads.segment(off, gw_s.size()) = gw_s;
    off += gw_s.size();
    result.grads(off++) = gb_s;
    for (const auto& [id, g] : gu_heads) {
        result.grads.segment(off, g.first.size()) = g.first;
        off += g.first.size();
        result.grads(off++) = g.second;
    }
    return result;
}

SfbModel train(const std::vector<EnvDataset>& datasets, const TrainConfig& cfg) {
    if (datasets.size() < 2) throw TooFewEnvironments("train: need >= 2 training environments");
    if (cfg.pretrain_steps > cfg.steps) throw Error("train: pretrain_steps > steps");
    const int input_dim = static_cast<int>(datasets.front().features.cols());

    SfbModel model{make_trunk(input_dim, cfg), cfg.dim_s, {}, {}, 1.0, 0.5};
    const int dim_u = cfg.phi_dim - cfg.dim_s;
    model.stable_head.w = Eigen::VectorXd::Zero(cfg.dim_s);
    for (const auto& ds : datasets) {
        model.unstable_heads[ds.env_id] = {Eigen::VectorXd::Zero(dim_u), 0.0};
    }

    std::vector<EnvBatch> batches;
    for (const auto& ds : datasets) {
        Eigen::VectorXd y(ds.labels.size());
        for (std::size_t i = 0; i < ds.labels.size(); ++i) {
            y(static_cast<Eigen::Index>(i)) = ds.labels[i];
        }
        batches.push_back({ds.env_id, ds.features, std::move(y)});
    }

    Eigen::VectorXd params = flat_params(model);
    AdamState adam;
    std::ofstream metrics;
    if (!cfg.metrics_path.empty()) {
        metrics.open(cfg.metrics_path);
        metrics << "step,objective,stability_penalty,cond_indep_penalty";
        for (const auto& b : batches) metrics << ",risk_" << b.env_id;
        metrics << "\n";
    }

    for (long step = 0; step < cfg.steps; ++step) {
        TrainConfig step_cfg = cfg;
        if (step < cfg.pretrain_steps) {
            step_cfg.lambda_s = 0.0;
            step_cfg.lambda_c = 0.0;
        } else if (step == cfg.pretrain_steps) {
            // The gradient scale changes abruptly when the penalties switch
            // on; stale Adam moments at the boundary push the stable head
            // toward the trivial zero solution, so restart the optimizer.
            adam = AdamState{};
        }
        auto res = sfb_objective(model, batches, step_cfg, /*train_mode=*/true);
        if (!std::isfinite(res.value)) {
            throw NonFiniteLoss("train: non-finite loss at step " + std::to_string(step));
        }
        // Large penalty weights rescale the whole objective so the risk terms
        // keep a usable gradient scale under Adam.
        if (step >= cfg.pretrain_steps && cfg.lambda_s > 1.0) {
            res.value /= cfg.lambda_s;
            res.grads /= cfg.lambda_s;
        }
        if (metrics.is_open()) {
            metrics << step << "," << res.value << "," << res.stability_penalty << ","
                    << res.cond_indep_penalty;
            for (const auto& b : batches) metrics << "," << res.env_stable_risk[b.env_id];
            metrics << "\n";
        }
        double lr = cfg.cosine_schedule ? cosine_lr(cfg.lr, step, cfg.steps) : cfg.lr;
        adam_step(params, res.grads, adam, lr);
        set_flat_params(model, params);
    }
    return model;
}

Eigen::VectorXd BaselineModel::logits(const Eigen::MatrixXd& x) {
    Eigen::MatrixXd phi = trunk.forward(x, /*train_mode=*/false);
    return phi * head.w + Eigen::VectorXd::Constant(x.rows(), head.b);
}

BaselineModel train_baseline(const std::vector<EnvDataset>& datasets, const TrainConfig& cfg,
                             BaselineKind kind) {
    if (datasets.empty()) throw TooFewEnvironments("train_baseline: no environments");
    const int input_dim = static_cast<int>(datasets.front().features.cols());
    BaselineModel model{make_trunk(input_dim, cfg), {Eigen::VectorXd::Zero(cfg.phi_dim), 0.0}};

    std::vector<EnvBatch> batches;
    for (const auto& ds : datasets) {
        Eigen::VectorXd y(ds.labels.size());
        for (std::size_t i = 0; i < ds.labels.size(); ++i) {
            y(static_cast<Eigen::Index>(i)) = ds.labels[i];
        }
        batches.push_back({ds.env_id, ds.features, std::move(y)});
    }

    long trunk_size = flatten_parameters(model.trunk).size();
    Eigen::VectorXd params(trunk_size + cfg.phi_dim + 1);
    params.head(trunk_size) = flatten_parameters(model.trunk);
    params.segment(trunk_size, cfg.phi_dim) = model.head.w;
    params(trunk_size + cfg.phi_dim) = model.head.b;
    AdamState adam;

    for (long step = 0; step < cfg.steps; ++step) {
        const double lambda =
            (kind == BaselineKind::kIrm && step >= cfg.pretrain_steps) ? cfg.lambda_s : 0.0;
        auto trunk_grads = zero_like_gradients(model.trunk);
        Eigen::VectorXd gw = Eigen::VectorXd::Zero(cfg.phi_dim);
        double gb = 0.0;
        double loss = 0.0;
        for (const auto& b : batches) {
            GradientTape tape;
            Eigen::MatrixXd phi = model.trunk.forward(b.x, /*train_mode=*/true, &tape);
            const Eigen::Index n = b.x.rows();
            Eigen::VectorXd z = phi * model.head.w + Eigen::VectorXd::Constant(n, model.head.b);
            Eigen::VectorXd p = sigmoid_vec(z);
            loss += cross_entropy_risk(p, b.y);
            Eigen::VectorXd dz = (p - b.y) / static_cast<double>(n);
            if (lambda > 0.0) {
                auto irm = irmv1_penalty(z, b.y);
                loss += lambda * irm.value;
                dz += lambda * irm.grad;
            }
            gw += phi.transpose() * dz;
            gb += dz.sum();
            auto env_grads = tape.backward(dz * model.head.w.transpose());
            for (std::size_t li = 0; li < trunk_grads.size(); ++li) {
                trunk_grads[li].first += env_grads[li].first;
                trunk_grads[li].second += env_grads[li].second;
            }
        }
        if (!std::isfinite(loss)) {
            throw NonFiniteLoss("train_baseline: non-finite loss at step " + std::to_string(step));
        }
        Eigen::VectorXd grads(params.size());
        grads.head(trunk_size) = flatten_gradients(trunk_grads);
        grads.segment(trunk_size, cfg.phi_dim) = gw;
        grads(trunk_size + cfg.phi_dim) = gb;
        double lr = cfg.cosine_schedule ? cosine_lr(cfg.lr, step, cfg.steps) : cfg.lr;
        adam_step(params, grads, adam, lr);
        set_parameters(model.trunk, params.head(trunk_size));
        model.head.w = params.segment(trunk_size, cfg.phi_dim);
        model.head.b = params(trunk_size + cfg.phi_dim);
    }
    return model;
}

double binary_accuracy(const std::vector<double>& probs, const std::vector<int>& labels) {
    if (probs.size() != labels.size()) throw LengthMismatch("binary_accuracy: length mismatch");
    if (probs.empty()) return 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if ((probs[i] >= 0.5 ? 1 : 0) == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(probs.size());
}

}  // namespace sfb
