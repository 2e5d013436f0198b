#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "sfb/errors.hpp"

namespace sfb {

enum class GeneratorTag { kAC, kCEDD, kCMNIST };

std::string to_string(GeneratorTag tag);

/// Labeled samples from one environment with parameter beta.
struct EnvDataset {
    std::string env_id;
    double beta = 0.0;
    GeneratorTag tag = GeneratorTag::kAC;
    Eigen::MatrixXd features;  // n x d
    std::vector<int> labels;   // {0, 1} (or 0..K-1)
};

/// Exact conditionals of the finite synthetic joint distribution.
struct BayesOracle {
    GeneratorTag tag;
    double beta = 0.0;
    // key: (x_s, x_u) feature values as stored in EnvDataset
    struct Cell {
        double p_y_given_s = 0.0;   // Pr[Y=1|x_S]
        double p_y_given_u = 0.0;   // Pr[Y=1|x_U]
        double p_y_given_su = 0.0;  // Pr[Y=1|x_S,x_U]
        double mass = 0.0;          // Pr[X_S=x_s, X_U=x_u]
    };
    std::map<std::pair<double, double>, Cell> lookup;
    double bayes_accuracy = 0.0;
    double prior = 0.5;  // Pr[Y=1]

    double marginal_u(double x_u) const;
    double p_y_given_u(double x_u) const;
    double p_y_given_s(double x_s) const;
};

/// Anti-causal data: Y ~ Rad(0.5), X_S = Y*Rad(0.75), X_U = Y*Rad(beta);
/// features are +/-1 reals, labels remapped to {0,1}.
EnvDataset gen_ac(double beta, long n, std::uint64_t seed);

/// Cause-effect data with direct X_S -> X_U edge, over {0,1}:
/// X_S ~ Bern(0.5), Y = XOR(X_S, Bern(0.75)), X_U = XOR(XOR(Y, Bern(beta)), X_S).
EnvDataset gen_cedd(double beta, long n, std::uint64_t seed);

/// Exact enumeration of the synthetic joint law. Throws UnsupportedGenerator
/// for CMNIST.
BayesOracle bayes_oracle(GeneratorTag tag, double beta);

/// Pr_{X_U}[h(X_U) != Bayes(X_U)] by enumeration over the oracle's X_U
/// marginal; h maps x_u to a hard class in {0,1}.
double suboptimality_vs_bayes(const std::function<int(double)>& h, const BayesOracle& oracle);

struct RawDigits {
    std::vector<Eigen::MatrixXd> images;  // 28x28, values in [0,1]
    std::vector<int> labels;              // 0..9
};

/// IDX parser (big-endian magic 0x803 images / 0x801 labels, u8 payload);
/// gzip-compressed files are accepted transparently.
RawDigits load_mnist_idx(const std::string& images_path, const std::string& labels_path);

/// Procedurally generated digit corpus in the RawDigits schema: per-class
/// prototype patterns plus pixel noise. A stand-in for MNIST when the real
/// IDX files are unavailable.
RawDigits make_stub_digits(long n, std::uint64_t seed);

/// Writes a RawDigits corpus as a pair of (uncompressed) IDX files.
void write_idx(const RawDigits& digits, const std::string& images_path,
               const std::string& labels_path);

struct CmnistOptions {
    std::vector<double> color_noise_levels = {0.1, 0.2, 0.9};
    double label_noise = 0.25;
    std::uint64_t seed = 0;
};

/// ColorMNIST construction: binary label 1{digit >= 5} flipped with
/// label_noise, color = label flipped with the per-environment noise,
/// images downsampled to 14x14 and emitted as 2-channel tensors with the
/// non-color channel zeroed (d = 2*14*14 = 392).
std::vector<EnvDataset> make_cmnist(const RawDigits& digits, const CmnistOptions& opts);

/// Fig. 3 sweep axis: correlation c -> color-noise e = (1 - c) / 2.
double correlation_to_noise(double c);

/// CSV export for synthetic datasets; binary tensor container for CMNIST.
void export_csv(const EnvDataset& ds, const std::string& path);
void export_tensor(const EnvDataset& ds, const std::string& path);
EnvDataset import_tensor(const std::string& path);

}  // namespace sfb
