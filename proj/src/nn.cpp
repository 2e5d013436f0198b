#include "sfb/nn.hpp"

#include <cmath>

namespace sfb {

DenseNet::DenseNet(const std::vector<LayerSpec>& specs, double dropout_p, std::uint64_t seed)
    : dropout_p_(dropout_p), rng_(seed) {
    if (specs.empty()) throw Error("DenseNet: no layers");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw Error("DenseNet: dropout_p out of [0,1)");
    for (std::size_t i = 0; i + 1 < specs.size(); ++i) {
        if (specs[i].out != specs[i + 1].in) throw ShapeMismatch("DenseNet: layer dims do not chain");
    }
    for (const auto& s : specs) {
        Layer l;
        l.act = s.act;
        // Kaiming-style uniform fan-in init.
        double bound = std::sqrt(6.0 / static_cast<double>(s.in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        l.weight = Eigen::MatrixXd::NullaryExpr(s.out, s.in, [&]() { return dist(rng_); });
        l.bias = Eigen::VectorXd::Zero(s.out);
        layers_.push_back(std::move(l));
    }
}

Eigen::MatrixXd DenseNet::forward(const Eigen::MatrixXd& batch, bool train_mode,
                                  GradientTape* tape) {
    if (batch.cols() != input_dim()) throw ShapeMismatch("forward: batch width != input dim");
    if (tape) {
        tape->net_ = this;
        tape->param_version = param_version_;
        tape->input = batch;
        tape->pre_acts.clear();
        tape->post_acts.clear();
        tape->dropout_masks.clear();
    }
    Eigen::MatrixXd x = batch;
    const std::size_t n_layers = layers_.size();
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (std::size_t li = 0; li < n_layers; ++li) {
        const Layer& l = layers_[li];
        Eigen::MatrixXd z = (x * l.weight.transpose()).rowwise() + l.bias.transpose();
        if (tape) tape->pre_acts.push_back(z);
        Eigen::MatrixXd a = (l.act == Activation::kRelu) ? z.cwiseMax(0.0).eval() : z;
        // Inverted dropout on hidden layers only.
        Eigen::MatrixXd mask;
        if (dropout_p_ > 0.0 && li + 1 < n_layers) {
            if (train_mode) {
                double keep = 1.0 - dropout_p_;
                mask = Eigen::MatrixXd::NullaryExpr(
                    a.rows(), a.cols(), [&]() { return unif(rng_) < keep ? 1.0 / keep : 0.0; });
                a = a.cwiseProduct(mask);
            } else {
                mask = Eigen::MatrixXd::Ones(a.rows(), a.cols());
            }
        }
        if (tape) {
            tape->post_acts.push_back(a);
            tape->dropout_masks.push_back(std::move(mask));
        }
        x = std::move(a);
    }
    return x;
}

std::vector<std::pair<Eigen::MatrixXd, Eigen::VectorXd>> GradientTape::backward(
    const Eigen::MatrixXd& output_grads) {
    if (net_ == nullptr) throw StaleTape("backward: no matching forward");
    if (param_version != net_->param_version_)
        throw StaleTape("backward: parameters changed since forward");
    const auto& layers = net_->layers_;
    if (output_grads.rows() != pre_acts.back().rows() ||
        output_grads.cols() != pre_acts.back().cols()) {
        throw ShapeMismatch("backward: output grad shape mismatch");
    }
    std::vector<std::pair<Eigen::MatrixXd, Eigen::VectorXd>> grads(layers.size());
    Eigen::MatrixXd delta = output_grads;
    for (int li = static_cast<int>(layers.size()) - 1; li >= 0; --li) {
        const Layer& l = layers[li];
        if (dropout_masks[li].size() > 0) delta = delta.cwiseProduct(dropout_masks[li]);
        if (l.act == Activation::kRelu) {
            delta = delta.cwiseProduct(
                (pre_acts[li].array() > 0.0).cast<double>().matrix());
        }
        const Eigen::MatrixXd& layer_in = (li == 0) ? input : post_acts[li - 1];
        grads[li].first = delta.transpose() * layer_in;  // out x in
        grads[li].second = delta.colwise().sum().transpose();
        delta = (delta * l.weight).eval();
    }
    input_grad_ = delta;
    return grads;
}

SplitRepresentation split(const Eigen::MatrixXd& trunk_output, int dim_s) {
    const int width = static_cast<int>(trunk_output.cols());
    if (!(dim_s > 0 && dim_s < width)) throw BadSplit("split: need 0 < dim_s < width");
    return SplitRepresentation{trunk_output.leftCols(dim_s), trunk_output.rightCols(width - dim_s)};
}

void adam_step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::VectorXd& grads, AdamState& state,
               double lr, double beta1, double beta2, double eps) {
    if (params.size() != grads.size()) throw ShapeMismatch("adam_step: size mismatch");
    if (state.m.size() == 0) {
        state.m = Eigen::VectorXd::Zero(params.size());
        state.v = Eigen::VectorXd::Zero(params.size());
    }
    state.step += 1;
    state.m = beta1 * state.m + (1.0 - beta1) * grads;
    state.v = beta2 * state.v + (1.0 - beta2) * grads.cwiseProduct(grads);
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
    Eigen::VectorXd mhat = state.m / bc1;
    Eigen::VectorXd vhat = state.v / bc2;
    params -= lr * mhat.cwiseQuotient(vhat.cwiseSqrt().array().matrix() +
                                      Eigen::VectorXd::Constant(params.size(), eps));
}

double cosine_lr(double base_lr, long step, long total_steps) {
    if (total_steps <= 0) return base_lr;
    double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return base_lr * (1.0 + std::cos(M_PI * t)) / 2.0;
}

Eigen::VectorXd flatten_parameters(const DenseNet& net) {
    long total = 0;
    for (const auto& l : net.layers()) total += l.weight.size() + l.bias.size();
    Eigen::VectorXd flat(total);
    long off = 0;
    for (const auto& l : net.layers()) {
        flat.segment(off, l.weight.size()) =
            Eigen::Map<const Eigen::VectorXd>(l.weight.data(), l.weight.size());
        off += l.weight.size();
        flat.segment(off, l.bias.size()) = l.bias;
        off += l.bias.size();
    }
    return flat;
}

void set_parameters(DenseNet& net, const Eigen::VectorXd& flat) {
    long off = 0;
    for (auto& l : net.layers()) {
        Eigen::Map<Eigen::VectorXd>(l.weight.data(), l.weight.size()) =
            flat.segment(off, l.weight.size());
        off += l.weight.size();
        l.bias = flat.segment(off, l.bias.size());
        off += l.bias.size();
    }
    if (off != flat.size()) throw ShapeMismatch("set_parameters: size mismatch");
    ++net.param_version_;
}

std::vector<std::pair<Eigen::MatrixXd, Eigen::VectorXd>> zero_like_gradients(const DenseNet& net) {
    std::vector<std::pair<Eigen::MatrixXd, Eigen::VectorXd>> grads;
    for (const auto& l : net.layers()) {
        grads.emplace_back(Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()),
                           Eigen::VectorXd::Zero(l.bias.size()));
    }
    return grads;
}

Eigen::VectorXd flatten_gradients(
    const std::vector<std::pair<Eigen::MatrixXd, Eigen::VectorXd>>& grads) {
    long total = 0;
    for (const auto& g : grads) total += g.first.size() + g.second.size();
    Eigen::VectorXd flat(total);
    long off = 0;
    for (const auto& g : grads) {
        flat.segment(off, g.first.size()) =
            Eigen::Map<const Eigen::VectorXd>(g.first.data(), g.first.size());
        off += g.first.size();
        flat.segment(off, g.second.size()) = g.second;
        off += g.second.size();
    }
    return flat;
}

}  // namespace sfb
