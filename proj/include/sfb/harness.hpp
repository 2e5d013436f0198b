#pragma once

#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "sfb/adaptation.hpp"
#include "sfb/envs.hpp"
#include "sfb/errors.hpp"
#include "sfb/training.hpp"

namespace sfb {

// ---------------------------------------------------------------------------
// Minimal TOML subset: [section] headers, key = value with string / bool /
// number / flat arrays, and # comments. Enough for the bundled configs.

using TomlValue = std::variant<std::string, double, bool, std::vector<double>,
                               std::vector<std::string>>;

struct TomlTable {
    std::map<std::string, std::map<std::string, TomlValue>> sections;

    bool has(const std::string& section, const std::string& key) const;
    const TomlValue& at(const std::string& section, const std::string& key) const;

    std::string get_string(const std::string& section, const std::string& key,
                           std::optional<std::string> fallback = std::nullopt) const;
    double get_number(const std::string& section, const std::string& key,
                      std::optional<double> fallback = std::nullopt) const;
    bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
    std::vector<double> get_array(const std::string& section, const std::string& key,
                                  std::optional<std::vector<double>> fallback = std::nullopt) const;
};

TomlTable parse_toml(const std::string& path);
TomlTable parse_toml_text(const std::string& text, const std::string& origin = "<string>");

// ---------------------------------------------------------------------------
// Experiment configuration

struct DatasetSpec {
    GeneratorTag tag = GeneratorTag::kAC;
    std::vector<double> train_betas;
    double val_beta = 0.0;
    double test_beta = 0.0;
    long n_train = 0;  // per environment
    long n_val = 0;
    long n_test = 0;
    // CMNIST only
    double label_noise = 0.25;
    std::string mnist_images;  // empty -> $SFB_DATA_DIR or procedural stub
    std::string mnist_labels;
    long stub_digits = 0;  // digit count when falling back to the stub corpus
};

struct AdaptationSpec {
    std::string learner = "logistic";  // logistic | tabular
    int rounds = 1;
    double lr = 0.01;
    int max_steps = 20;
    // Candidate step counts scored on the validation domain; empty disables
    // early stopping and uses max_steps directly.
    std::vector<int> step_grid;
};

struct ExperimentConfig {
    std::string name;
    DatasetSpec dataset;
    TrainConfig train;
    AdaptationSpec adaptation;
    std::vector<double> calibration_grid;
    int calibration_bins = 15;
    std::vector<std::uint64_t> seeds;
    std::string out_dir = "out";
    std::vector<std::string> methods;       // default: full method set
    std::vector<double> sweep_axis;         // test betas (or correlations for CMNIST)
};

/// Parses and validates a config file; throws ConfigError naming the field.
ExperimentConfig parse_experiment_config(const std::string& path);

// ---------------------------------------------------------------------------
// Results

struct ResultRow {
    std::string method;
    std::string dataset;
    std::uint64_t seed = 0;
    double accuracy = 0.0;  // percent
};

struct Aggregate {
    std::string method;
    std::string dataset;
    double mean = 0.0;
    std::optional<double> stderr_;  // nullopt for a single seed
    int n = 0;
};

std::vector<Aggregate> aggregate_rows(const std::vector<ResultRow>& rows);

/// Paper-style table: mean +/- stderr per method/dataset, per-column max in
/// bold (**x**), "n/a" stderr for single seeds.
std::string render_report(const std::vector<ResultRow>& rows);

void write_results_csv(const std::vector<ResultRow>& rows, const std::string& path);
std::vector<ResultRow> read_results_csv(const std::string& path);

// ---------------------------------------------------------------------------
// Operations

struct SeedOutcome {
    std::vector<ResultRow> rows;
    nlohmann::json diagnostics;
};

/// One full generate -> train -> calibrate -> adapt -> evaluate pass.
SeedOutcome run_seed(const ExperimentConfig& cfg, std::uint64_t seed);

/// All seeds; writes results.csv, diagnostics/*.json, report.txt under out_dir.
std::vector<ResultRow> run_experiment(const ExperimentConfig& cfg);

/// Fig. 3-style axis sweep; writes sweep.csv under out_dir and returns rows
/// tagged dataset = "<name>@<axis value>".
std::vector<ResultRow> run_sweep(const ExperimentConfig& cfg);

/// Aggregates an existing results.csv into report.txt/report.csv.
void run_report(const std::string& results_path, const std::string& out_dir);

/// Dataset generation per config (CSV for synthetic, tensor for CMNIST).
void run_generate(const ExperimentConfig& cfg, std::uint64_t seed);

/// Model checkpointing for the train/adapt/evaluate subcommands.
nlohmann::json model_to_json(const SfbModel& model, const TrainConfig& cfg);
SfbModel model_from_json(const nlohmann::json& j);

/// Train on the config's training environments and write model.json +
/// metrics.csv under out_dir.
void run_train(const ExperimentConfig& cfg, std::uint64_t seed);

/// Load out_dir/model.json, adapt on the test domain, write adapted.json.
void run_adapt(const ExperimentConfig& cfg, std::uint64_t seed);

/// Load out_dir/model.json (+ adapted.json if present) and print/append
/// test-domain metrics.
std::vector<ResultRow> run_evaluate(const ExperimentConfig& cfg, std::uint64_t seed);

}  // namespace sfb
