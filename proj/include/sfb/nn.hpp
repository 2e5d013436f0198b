#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <random>
#include <vector>

#include "sfb/errors.hpp"

namespace sfb {

enum class Activation { kRelu, kIdentity };

struct LayerSpec {
    int in = 0;
    int out = 0;
    Activation act = Activation::kIdentity;
};

struct Layer {
    Eigen::MatrixXd weight;  // out x in
    Eigen::VectorXd bias;    // out
    Activation act = Activation::kIdentity;
};

struct SplitRepresentation {
    Eigen::MatrixXd phi_s;  // n x dim_s
    Eigen::MatrixXd phi_u;  // n x (width - dim_s)
};

class DenseNet;

/// Cached activations from one forward pass; backward() may only follow the
/// matching forward.
class GradientTape {
public:
    /// Gradients of the scalar loss w.r.t. the network output rows.
    /// Returns per-layer (dW, db); also exposes the gradient w.r.t. the input
    /// batch via input_grad().
    std::vector<std::pair<Eigen::MatrixXd, Eigen::VectorXd>> backward(
        const Eigen::MatrixXd& output_grads);

    const Eigen::MatrixXd& input_grad() const { return input_grad_; }

private:
    friend class DenseNet;
    const DenseNet* net_ = nullptr;
    std::uint64_t param_version = 0;
    Eigen::MatrixXd input;
    std::vector<Eigen::MatrixXd> pre_acts;   // per layer, n x out
    std::vector<Eigen::MatrixXd> post_acts;  // per layer, n x out (after dropout)
    std::vector<Eigen::MatrixXd> dropout_masks;
    Eigen::MatrixXd input_grad_;
};

/// Dense feedforward net with inverted dropout on hidden activations.
class DenseNet {
public:
    DenseNet(const std::vector<LayerSpec>& specs, double dropout_p, std::uint64_t seed);

    int input_dim() const { return layers_.empty() ? 0 : static_cast<int>(layers_.front().weight.cols()); }
    int output_dim() const { return layers_.empty() ? 0 : static_cast<int>(layers_.back().weight.rows()); }

    Eigen::MatrixXd forward(const Eigen::MatrixXd& batch, bool train_mode,
                            GradientTape* tape = nullptr);

    std::vector<Layer>& layers() { return layers_; }
    const std::vector<Layer>& layers() const { return layers_; }

private:
    friend class GradientTape;
    friend void set_parameters(DenseNet& net, const Eigen::VectorXd& flat);
    std::vector<Layer> layers_;
    double dropout_p_;
    mutable std::mt19937_64 rng_;
    std::uint64_t param_version_ = 0;
};

/// Split trunk output columns into (phi_S, phi_U); 0 < dim_s < width.
SplitRepresentation split(const Eigen::MatrixXd& trunk_output, int dim_s);

/// Adam state for one flat parameter vector.
struct AdamState {
    Eigen::VectorXd m;
    Eigen::VectorXd v;
    long step = 0;
};

/// Standard Adam update with bias correction. `params` is modified in place.
void adam_step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::VectorXd& grads, AdamState& state,
               double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

/// lr * (1 + cos(pi * t / total)) / 2.
double cosine_lr(double base_lr, long step, long total_steps);

/// Flatten/unflatten helpers for whole-network optimization.
Eigen::VectorXd flatten_parameters(const DenseNet& net);
void set_parameters(DenseNet& net, const Eigen::VectorXd& flat);
std::vector<std::pair<Eigen::MatrixXd, Eigen::VectorXd>> zero_like_gradients(const DenseNet& net);
Eigen::VectorXd flatten_gradients(
    const std::vector<std::pair<Eigen::MatrixXd, Eigen::VectorXd>>& grads);

}  // namespace sfb
