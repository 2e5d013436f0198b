#include "sfb/harness.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "sfb/calibration.hpp"
#include "sfb/prob.hpp"

namespace fs = std::filesystem;

namespace sfb {

// ---------------------------------------------------------------------------
// TOML subset

namespace {

std::string trim(const std::string& s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string strip_comment(const std::string& line) {
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (line[i] == '"') quoted = !quoted;
        if (line[i] == '#' && !quoted) return line.substr(0, i);
    }
    return line;
}

TomlValue parse_value(const std::string& raw, const std::string& where) {
    std::string v = trim(raw);
    if (v.empty()) throw ConfigError(where + ": empty value");
    if (v.front() == '"') {
        if (v.size() < 2 || v.back() != '"') throw ConfigError(where + ": unterminated string");
        return v.substr(1, v.size() - 2);
    }
    if (v == "true") return true;
    if (v == "false") return false;
    if (v.front() == '[') {
        if (v.back() != ']') throw ConfigError(where + ": unterminated array");
        std::string body = trim(v.substr(1, v.size() - 2));
        std::vector<double> nums;
        std::vector<std::string> strs;
        bool is_string = false;
        if (!body.empty()) {
            std::stringstream ss(body);
            std::string item;
            while (std::getline(ss, item, ',')) {
                item = trim(item);
                if (item.empty()) continue;
                if (item.front() == '"') {
                    if (item.back() != '"') throw ConfigError(where + ": bad array string");
                    strs.push_back(item.substr(1, item.size() - 2));
                    is_string = true;
                } else {
                    try {
                        std::size_t pos = 0;
                        nums.push_back(std::stod(item, &pos));
                        if (pos != item.size()) throw std::invalid_argument(item);
                    } catch (const std::exception&) {
                        throw ConfigError(where + ": bad number '" + item + "'");
                    }
                }
            }
        }
        if (is_string) {
            if (!nums.empty()) throw ConfigError(where + ": mixed array types");
            return strs;
        }
        return nums;
    }
    try {
        std::size_t pos = 0;
        double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError(where + ": bad value '" + v + "'");
    }
}

}  // namespace

bool TomlTable::has(const std::string& section, const std::string& key) const {
    auto it = sections.find(section);
    return it != sections.end() && it->second.count(key) > 0;
}

const TomlValue& TomlTable::at(const std::string& section, const std::string& key) const {
    auto it = sections.find(section);
    if (it == sections.end() || it->second.count(key) == 0) {
        throw ConfigError("missing config key " + section + "." + key);
    }
    return it->second.at(key);
}

std::string TomlTable::get_string(const std::string& section, const std::string& key,
                                  std::optional<std::string> fallback) const {
    if (!has(section, key)) {
        if (fallback) return *fallback;
        throw ConfigError("missing config key " + section + "." + key);
    }
    const auto* s = std::get_if<std::string>(&at(section, key));
    if (!s) throw ConfigError(section + "." + key + ": expected a string");
    return *s;
}

double TomlTable::get_number(const std::string& section, const std::string& key,
                             std::optional<double> fallback) const {
    if (!has(section, key)) {
        if (fallback) return *fallback;
        throw ConfigError("missing config key " + section + "." + key);
    }
    const auto* d = std::get_if<double>(&at(section, key));
    if (!d) throw ConfigError(section + "." + key + ": expected a number");
    return *d;
}

bool TomlTable::get_bool(const std::string& section, const std::string& key, bool fallback) const {
    if (!has(section, key)) return fallback;
    const auto* b = std::get_if<bool>(&at(section, key));
    if (!b) throw ConfigError(section + "." + key + ": expected a bool");
    return *b;
}

std::vector<double> TomlTable::get_array(const std::string& section, const std::string& key,
                                         std::optional<std::vector<double>> fallback) const {
    if (!has(section, key)) {
        if (fallback) return *fallback;
        throw ConfigError("missing config key " + section + "." + key);
    }
    const auto* a = std::get_if<std::vector<double>>(&at(section, key));
    if (!a) throw ConfigError(section + "." + key + ": expected a number array");
    return *a;
}

TomlTable parse_toml_text(const std::string& text, const std::string& origin) {
    TomlTable table;
    std::string section;
    std::stringstream ss(text);
    std::string line;
    long lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        line = trim(strip_comment(line));
        if (line.empty()) continue;
        std::string where = origin + ":" + std::to_string(lineno);
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + ": bad section header");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty()) throw ConfigError(where + ": empty section name");
            table.sections[section];
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        if (key.empty()) throw ConfigError(where + ": empty key");
        table.sections[section][key] = parse_value(line.substr(eq + 1), where);
    }
    return table;
}

TomlTable parse_toml(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    std::stringstream buf;
    buf << f.rdbuf();
    return parse_toml_text(buf.str(), path);
}

// ---------------------------------------------------------------------------
// Config parsing

ExperimentConfig parse_experiment_config(const std::string& path) {
    TomlTable t = parse_toml(path);
    ExperimentConfig cfg;
    cfg.name = t.get_string("experiment", "name");
    for (double s : t.get_array("experiment", "seeds")) {
        cfg.seeds.push_back(static_cast<std::uint64_t>(s));
    }
    if (cfg.seeds.empty()) throw ConfigError("experiment.seeds: must be nonempty");
    cfg.out_dir = t.get_string("experiment", "out_dir", std::string("out/") + cfg.name);
    if (t.has("experiment", "methods")) {
        const auto* m = std::get_if<std::vector<std::string>>(&t.at("experiment", "methods"));
        if (!m) throw ConfigError("experiment.methods: expected a string array");
        cfg.methods = *m;
    }

    const std::string tag = t.get_string("dataset", "tag");
    if (tag == "ac") {
        cfg.dataset.tag = GeneratorTag::kAC;
    } else if (tag == "cedd") {
        cfg.dataset.tag = GeneratorTag::kCEDD;
    } else if (tag == "cmnist") {
        cfg.dataset.tag = GeneratorTag::kCMNIST;
    } else {
        throw ConfigError("dataset.tag: unknown generator '" + tag + "'");
    }
    cfg.dataset.train_betas = t.get_array("dataset", "train_betas");
    if (cfg.dataset.train_betas.size() < 2) {
        throw ConfigError("dataset.train_betas: need >= 2 training environments");
    }
    cfg.dataset.val_beta = t.get_number("dataset", "val_beta");
    cfg.dataset.test_beta = t.get_number("dataset", "test_beta");
    cfg.dataset.n_train = static_cast<long>(t.get_number("dataset", "n_train"));
    cfg.dataset.n_val = static_cast<long>(t.get_number("dataset", "n_val"));
    cfg.dataset.n_test = static_cast<long>(t.get_number("dataset", "n_test"));
    if (cfg.dataset.n_train < 1 || cfg.dataset.n_val < 1 || cfg.dataset.n_test < 1) {
        throw ConfigError("dataset.n_train/n_val/n_test: must be >= 1");
    }
    cfg.dataset.label_noise = t.get_number("dataset", "label_noise", 0.25);
    cfg.dataset.mnist_images = t.get_string("dataset", "mnist_images", std::string());
    cfg.dataset.mnist_labels = t.get_string("dataset", "mnist_labels", std::string());
    cfg.dataset.stub_digits = static_cast<long>(t.get_number("dataset", "stub_digits", 0.0));

    cfg.train.lambda_s = t.get_number("train", "lambda_s", 0.0);
    cfg.train.lambda_c = t.get_number("train", "lambda_c", 0.0);
    cfg.train.lr = t.get_number("train", "lr", 1e-3);
    cfg.train.steps = static_cast<long>(t.get_number("train", "steps", 500.0));
    cfg.train.pretrain_steps = static_cast<long>(t.get_number("train", "pretrain_steps", 0.0));
    const std::string penalty = t.get_string("train", "penalty", std::string("irmv1"));
    if (penalty == "irmv1") {
        cfg.train.penalty = StabilityPenalty::kIrmV1;
    } else if (penalty == "vrex") {
        cfg.train.penalty = StabilityPenalty::kVRex;
    } else {
        throw ConfigError("train.penalty: unknown penalty '" + penalty + "'");
    }
    cfg.train.dim_s = static_cast<int>(t.get_number("train", "dim_s", 4.0));
    cfg.train.phi_dim = static_cast<int>(t.get_number("train", "phi_dim", 8.0));
    cfg.train.hidden.clear();
    for (double h : t.get_array("train", "hidden", std::vector<double>{8.0, 8.0})) {
        cfg.train.hidden.push_back(static_cast<int>(h));
    }
    cfg.train.dropout = t.get_number("train", "dropout", 0.0);
    cfg.train.cosine_schedule = t.get_bool("train", "cosine_schedule", false);
    if (cfg.train.dim_s < 1 || cfg.train.dim_s >= cfg.train.phi_dim) {
        throw ConfigError("train.dim_s: need 0 < dim_s < phi_dim");
    }

    cfg.calibration_grid = t.get_array("calibration", "grid", default_temperature_grid());
    cfg.calibration_bins = static_cast<int>(t.get_number("calibration", "bins", 15.0));

    cfg.adaptation.learner = t.get_string("adaptation", "learner", std::string("logistic"));
    if (cfg.adaptation.learner != "logistic" && cfg.adaptation.learner != "tabular") {
        throw ConfigError("adaptation.learner: unknown learner '" + cfg.adaptation.learner + "'");
    }
    cfg.adaptation.rounds = static_cast<int>(t.get_number("adaptation", "rounds", 1.0));
    if (cfg.adaptation.rounds < 1) throw ConfigError("adaptation.rounds: must be >= 1");
    cfg.adaptation.lr = t.get_number("adaptation", "lr", 0.01);
    cfg.adaptation.max_steps = static_cast<int>(t.get_number("adaptation", "max_steps", 20.0));
    for (double s : t.get_array("adaptation", "step_grid", std::vector<double>{})) {
        cfg.adaptation.step_grid.push_back(static_cast<int>(s));
    }

    cfg.sweep_axis = t.get_array("sweep", "axis", std::vector<double>{});
    return cfg;
}

// ---------------------------------------------------------------------------
// Data generation

namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
    return seed * 1000003ULL + salt * 7919ULL + 1ULL;
}

struct GeneratedData {
    std::vector<EnvDataset> train;
    EnvDataset val;
    EnvDataset test;
};

EnvDataset truncate_env(EnvDataset ds, long n) {
    if (ds.features.rows() <= n) return ds;
    EnvDataset out = ds;
    out.features = ds.features.topRows(n);
    out.labels.assign(ds.labels.begin(), ds.labels.begin() + n);
    return out;
}

RawDigits shuffled(RawDigits d, std::uint64_t seed) {
    std::vector<std::size_t> order(d.images.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    RawDigits out;
    out.images.reserve(order.size());
    out.labels.reserve(order.size());
    for (std::size_t i : order) {
        out.images.push_back(d.images[i]);
        out.labels.push_back(d.labels[i]);
    }
    return out;
}

RawDigits obtain_digits(const DatasetSpec& ds, long need, std::uint64_t seed) {
    std::string img = ds.mnist_images, lab = ds.mnist_labels;
    if (img.empty() || lab.empty()) {
        if (const char* cache = std::getenv("SFB_DATA_DIR")) {
            for (const char* suffix : {"", ".gz"}) {
                std::string i = std::string(cache) + "/train-images-idx3-ubyte" + suffix;
                std::string l = std::string(cache) + "/train-labels-idx1-ubyte" + suffix;
                if (fs::exists(i) && fs::exists(l)) {
                    img = i;
                    lab = l;
                    break;
                }
            }
        }
    }
    RawDigits digits;
    if (!img.empty() && !lab.empty()) {
        digits = load_mnist_idx(img, lab);
    } else {
        long n = ds.stub_digits > 0 ? ds.stub_digits : need;
        digits = make_stub_digits(n, mix(seed, 13));
    }
    digits = shuffled(std::move(digits), mix(seed, 17));
    if (static_cast<long>(digits.images.size()) > need) {
        digits.images.resize(need);
        digits.labels.resize(need);
    }
    return digits;
}

GeneratedData generate_data(const ExperimentConfig& cfg, std::uint64_t seed,
                            std::optional<double> test_beta_override = std::nullopt) {
    const DatasetSpec& d = cfg.dataset;
    const double test_beta = test_beta_override.value_or(d.test_beta);
    GeneratedData out;
    if (d.tag == GeneratorTag::kAC || d.tag == GeneratorTag::kCEDD) {
        auto gen = d.tag == GeneratorTag::kAC ? gen_ac : gen_cedd;
        for (std::size_t e = 0; e < d.train_betas.size(); ++e) {
            out.train.push_back(gen(d.train_betas[e], d.n_train, mix(seed, e)));
        }
        out.val = gen(d.val_beta, d.n_val, mix(seed, 100));
        out.test = gen(test_beta, d.n_test, mix(seed, 200));
        return out;
    }
    const long envs_total = static_cast<long>(d.train_betas.size()) + 2;
    const long per_env = std::max({d.n_train, d.n_val, d.n_test});
    RawDigits digits = obtain_digits(d, envs_total * per_env, seed);
    CmnistOptions opts;
    opts.color_noise_levels = d.train_betas;
    opts.color_noise_levels.push_back(d.val_beta);
    opts.color_noise_levels.push_back(test_beta);
    opts.label_noise = d.label_noise;
    opts.seed = mix(seed, 19);
    auto envs = make_cmnist(digits, opts);
    for (std::size_t e = 0; e < d.train_betas.size(); ++e) {
        out.train.push_back(truncate_env(envs[e], d.n_train));
    }
    out.val = truncate_env(envs[envs.size() - 2], d.n_val);
    out.test = truncate_env(envs.back(), d.n_test);
    out.test.env_id = "cmnist_test_e" + std::to_string(test_beta);
    return out;
}

std::vector<std::string> default_methods() {
    return {"ERM", "IRM", "SFB-no-adapt", "SFB", "PL-naive", "GT-adapt", "Oracle"};
}

bool wants(const ExperimentConfig& cfg, const std::string& method) {
    const auto& m = cfg.methods.empty() ? default_methods() : cfg.methods;
    return std::find(m.begin(), m.end(), method) != m.end();
}

double accuracy_pct(const std::vector<double>& probs, const std::vector<int>& labels) {
    return 100.0 * binary_accuracy(probs, labels);
}

double clampp(double p) { return std::min(1.0 - 1e-7, std::max(1e-7, p)); }

StableFn make_stable_fn(SfbModel* model) {
    return [model](const Eigen::RowVectorXd& x) {
        return clampp(model->stable_probs(x)[0]);
    };
}

// Features handed to the adaptation learner. Synthetic tasks use the learned
// phi_U; CMNIST uses a per-channel intensity summary of the raw image (the
// test-time recipe fits a logistic head on the color feature, which the
// heavily penalized desk-scale trunk does not retain).
Eigen::MatrixXd unstable_inputs(const ExperimentConfig& cfg, SfbModel& model,
                                const Eigen::MatrixXd& x) {
    if (cfg.dataset.tag != GeneratorTag::kCMNIST) return model.unstable_features(x);
    const Eigen::Index half = x.cols() / 2;
    Eigen::MatrixXd out(x.rows(), 2);
    out.col(0) = x.leftCols(half).rowwise().mean();
    out.col(1) = x.rightCols(half).rowwise().mean();
    return out;
}

std::unique_ptr<UnstableLearner> make_learner(const AdaptationSpec& spec, int steps) {
    if (spec.learner == "tabular") return std::make_unique<TabularLearner>();
    return std::make_unique<LogisticLearner>(spec.lr, steps);
}

}  // namespace

// ---------------------------------------------------------------------------
// Seed pipeline

SeedOutcome run_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
    SeedOutcome out;
    std::string stage = "generate";
    try {
        GeneratedData data = generate_data(cfg, seed);

        stage = "train";
        TrainConfig tc = cfg.train;
        tc.seed = mix(seed, 31);
        SfbModel model = train(data.train, tc);

        stage = "calibrate";
        Eigen::VectorXd vz = model.stable_logits(data.val.features);
        std::vector<double> val_logits(vz.data(), vz.data() + vz.size());
        Temperature temp =
            fit_temperature(val_logits, data.val.labels, cfg.calibration_grid,
                            cfg.calibration_bins);
        model.temperature = temp.value();
        double val_ece_before = ece(apply_temperature(val_logits, Temperature(1.0)),
                                    data.val.labels, cfg.calibration_bins);
        double val_ece_after =
            ece(apply_temperature(val_logits, temp), data.val.labels, cfg.calibration_bins);

        stage = "adapt";
        StableFn stable = make_stable_fn(&model);
        Eigen::MatrixXd test_phi_u = unstable_inputs(cfg, model, data.test.features);
        Eigen::MatrixXd val_phi_u = unstable_inputs(cfg, model, data.val.features);

        // Early stopping rehearses the full adaptation procedure on the
        // labeled validation domain (treated as unlabeled) and keeps the step
        // count that scores best there; the test domain never sees labels.
        std::vector<int> candidates = cfg.adaptation.step_grid;
        if (candidates.empty() || cfg.adaptation.learner == "tabular") {
            candidates = {cfg.adaptation.max_steps};
        }
        int best_steps = candidates.front();
        if (candidates.size() > 1) {
            double best_val_acc = -1.0;
            for (int steps : candidates) {
                try {
                    AdaptResult rehearsal = adapt(
                        stable, [&] { return make_learner(cfg.adaptation, steps); },
                        data.val.features, val_phi_u, cfg.adaptation.rounds);
                    double val_acc = binary_accuracy(
                        rehearsal.adapted.predict_batch(data.val.features, val_phi_u),
                        data.val.labels);
                    if (val_acc > best_val_acc) {
                        best_val_acc = val_acc;
                        best_steps = steps;
                    }
                } catch (const UninformativeStable&) {
                }
            }
        }
        std::optional<AdaptResult> best;
        bool fell_back = false;
        try {
            AdaptResult res = adapt(
                stable, [&] { return make_learner(cfg.adaptation, best_steps); },
                data.test.features, test_phi_u, cfg.adaptation.rounds);
            if (res.fell_back_to_stable) {
                fell_back = true;
            } else {
                best = std::move(res);
            }
        } catch (const UninformativeStable&) {
            fell_back = true;
        }

        stage = "evaluate";
        std::vector<double> stable_test = model.stable_probs(data.test.features);
        double no_adapt_acc = accuracy_pct(stable_test, data.test.labels);

        auto push = [&](const std::string& method, double acc) {
            out.rows.push_back({method, cfg.name, seed, acc});
        };
        if (wants(cfg, "SFB-no-adapt")) push("SFB-no-adapt", no_adapt_acc);
        double sfb_acc = no_adapt_acc;
        double frozen_acc = no_adapt_acc;
        if (best) {
            sfb_acc = accuracy_pct(best->adapted.predict_batch(data.test.features, test_phi_u),
                                   data.test.labels);
            if (best->frozen_stats_variant) {
                frozen_acc = accuracy_pct(
                    best->frozen_stats_variant->predict_batch(data.test.features, test_phi_u),
                    data.test.labels);
            } else {
                frozen_acc = sfb_acc;
            }
        }
        if (wants(cfg, "SFB")) push("SFB", sfb_acc);

        if (wants(cfg, "ERM")) {
            TrainConfig bc = tc;
            bc.seed = mix(seed, 37);
            BaselineModel erm = train_baseline(data.train, bc, BaselineKind::kErm);
            Eigen::VectorXd z = erm.logits(data.test.features);
            std::vector<double> p(z.size());
            for (Eigen::Index i = 0; i < z.size(); ++i) p[i] = sigmoid(z(i));
            push("ERM", accuracy_pct(p, data.test.labels));
        }
        if (wants(cfg, "IRM")) {
            TrainConfig bc = tc;
            bc.seed = mix(seed, 41);
            BaselineModel irm = train_baseline(data.train, bc, BaselineKind::kIrm);
            Eigen::VectorXd z = irm.logits(data.test.features);
            std::vector<double> p(z.size());
            for (Eigen::Index i = 0; i < z.size(); ++i) p[i] = sigmoid(z(i));
            push("IRM", accuracy_pct(p, data.test.labels));
        }
        if (wants(cfg, "PL-naive")) {
            // Pseudo-label adaptation without the bias correction.
            auto pl = soft_pseudo_labels(stable_test);
            double prior = clampp(pl.soft_count_1 / static_cast<double>(pl.labels.size()));
            Eigen::MatrixXd targets(test_phi_u.rows(), 1);
            for (Eigen::Index i = 0; i < targets.rows(); ++i) targets(i, 0) = pl.labels[i];
            auto learner = make_learner(cfg.adaptation, best_steps);
            learner->fit(test_phi_u, targets);
            Eigen::MatrixXd tilde = learner->predict_proba(test_phi_u);
            std::vector<double> joint(tilde.rows());
            for (Eigen::Index i = 0; i < tilde.rows(); ++i) {
                joint[i] = combine_binary(Probability(clampp(stable_test[i])),
                                          Probability(clampp(tilde(i, 0))), Probability(prior))
                               .value();
            }
            push("PL-naive", accuracy_pct(joint, data.test.labels));
        }
        if (wants(cfg, "GT-adapt")) {
            // Oracle unstable head: fit on the true test labels.
            Eigen::MatrixXd targets(test_phi_u.rows(), 1);
            double prior1 = 0.0;
            for (Eigen::Index i = 0; i < targets.rows(); ++i) {
                targets(i, 0) = data.test.labels[i];
                prior1 += data.test.labels[i];
            }
            double prior = clampp(prior1 / static_cast<double>(targets.rows()));
            auto learner = make_learner(cfg.adaptation, best_steps);
            learner->fit(test_phi_u, targets);
            Eigen::MatrixXd pu = learner->predict_proba(test_phi_u);
            std::vector<double> joint(pu.rows());
            for (Eigen::Index i = 0; i < pu.rows(); ++i) {
                joint[i] = combine_binary(Probability(clampp(stable_test[i])),
                                          Probability(clampp(pu(i, 0))), Probability(prior))
                               .value();
            }
            push("GT-adapt", accuracy_pct(joint, data.test.labels));
        }
        if (wants(cfg, "Oracle")) {
            double oracle_acc =
                cfg.dataset.tag == GeneratorTag::kCMNIST
                    ? 100.0 * (1.0 - cfg.dataset.label_noise)
                    : 100.0 * bayes_oracle(cfg.dataset.tag, data.test.beta).bayes_accuracy;
            push("Oracle", oracle_acc);
        }

        nlohmann::json rounds = nlohmann::json::array();
        if (best) {
            for (const auto& st : best->per_round_stats) {
                rounds.push_back({{"eps0", st.eps0}, {"eps1", st.eps1}});
            }
        }
        out.diagnostics = {{"seed", seed},
                           {"dataset", cfg.name},
                           {"temperature", model.temperature},
                           {"val_ece_before", val_ece_before},
                           {"val_ece_after", val_ece_after},
                           {"train_prior", model.train_prior},
                           {"fell_back_to_stable", fell_back},
                           {"adaptation_steps", best_steps},
                           {"rounds", rounds},
                           {"sfb_accuracy", sfb_acc},
                           {"sfb_no_adapt_accuracy", no_adapt_acc},
                           {"sfb_frozen_stats_accuracy", frozen_acc}};
        return out;
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw Error("stage '" + stage + "' failed: " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Aggregation and reporting

std::vector<Aggregate> aggregate_rows(const std::vector<ResultRow>& rows) {
    // Keyed by (method, dataset) in first-appearance order.
    std::vector<Aggregate> out;
    std::map<std::pair<std::string, std::string>, std::vector<double>> groups;
    std::vector<std::pair<std::string, std::string>> order;
    for (const auto& r : rows) {
        auto key = std::make_pair(r.method, r.dataset);
        if (groups.find(key) == groups.end()) order.push_back(key);
        groups[key].push_back(r.accuracy);
    }
    for (const auto& key : order) {
        const auto& vals = groups[key];
        Aggregate a;
        a.method = key.first;
        a.dataset = key.second;
        a.n = static_cast<int>(vals.size());
        a.mean = std::accumulate(vals.begin(), vals.end(), 0.0) / vals.size();
        if (vals.size() >= 2) {
            double ss = 0.0;
            for (double v : vals) ss += (v - a.mean) * (v - a.mean);
            a.stderr_ = std::sqrt(ss / (vals.size() - 1)) / std::sqrt(double(vals.size()));
        }
        out.push_back(a);
    }
    return out;
}

namespace {

std::string fmt1(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.1f", v);
    return buf;
}

}  // namespace

std::string render_report(const std::vector<ResultRow>& rows) {
    if (rows.empty()) throw Error("render_report: no result rows");
    auto aggs = aggregate_rows(rows);

    // Methods in the canonical paper order, extras appended as seen.
    std::vector<std::string> methods;
    for (const auto& m : default_methods()) {
        if (std::any_of(aggs.begin(), aggs.end(), [&](const Aggregate& a) { return a.method == m; })) {
            methods.push_back(m);
        }
    }
    std::vector<std::string> datasets;
    for (const auto& a : aggs) {
        if (std::find(methods.begin(), methods.end(), a.method) == methods.end()) {
            methods.push_back(a.method);
        }
        if (std::find(datasets.begin(), datasets.end(), a.dataset) == datasets.end()) {
            datasets.push_back(a.dataset);
        }
    }

    auto find = [&](const std::string& m, const std::string& d) -> const Aggregate* {
        for (const auto& a : aggs) {
            if (a.method == m && a.dataset == d) return &a;
        }
        return nullptr;
    };

    // Per-column max mean is rendered in bold.
    std::map<std::string, double> col_max;
    for (const auto& d : datasets) {
        double best = -1.0;
        for (const auto& m : methods) {
            if (const Aggregate* a = find(m, d)) best = std::max(best, a->mean);
        }
        col_max[d] = best;
    }

    std::vector<std::vector<std::string>> cells;
    std::vector<std::string> header = {"method"};
    header.insert(header.end(), datasets.begin(), datasets.end());
    cells.push_back(header);
    for (const auto& m : methods) {
        std::vector<std::string> row = {m};
        for (const auto& d : datasets) {
            const Aggregate* a = find(m, d);
            if (!a) {
                row.push_back("-");
                continue;
            }
            std::string cell = fmt1(a->mean) + " ± " + (a->stderr_ ? fmt1(*a->stderr_)
                                                                        : std::string("n/a"));
            if (a->mean == col_max[d]) cell = "**" + cell + "**";
            row.push_back(cell);
        }
        cells.push_back(row);
    }

    std::vector<std::size_t> widths(cells[0].size(), 0);
    for (const auto& row : cells) {
        for (std::size_t j = 0; j < row.size(); ++j) widths[j] = std::max(widths[j], row[j].size());
    }
    std::string out;
    for (const auto& row : cells) {
        for (std::size_t j = 0; j < row.size(); ++j) {
            std::string cell = row[j];
            cell.resize(widths[j], ' ');
            out += cell;
            out += j + 1 < row.size() ? " | " : "";
        }
        while (!out.empty() && out.back() == ' ') out.pop_back();
        out += "\n";
    }
    return out;
}

void write_results_csv(const std::vector<ResultRow>& rows, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw Error("cannot open " + path);
    f << "method,dataset,seed,accuracy\n";
    for (const auto& r : rows) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.10g", r.accuracy);
        f << r.method << "," << r.dataset << "," << r.seed << "," << buf << "\n";
    }
}

std::vector<ResultRow> read_results_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot open " + path);
    std::vector<ResultRow> rows;
    std::string line;
    std::getline(f, line);  // header
    while (std::getline(f, line)) {
        if (trim(line).empty()) continue;
        std::stringstream ss(line);
        ResultRow r;
        std::string seed, acc;
        if (!std::getline(ss, r.method, ',') || !std::getline(ss, r.dataset, ',') ||
            !std::getline(ss, seed, ',') || !std::getline(ss, acc)) {
            throw Error("malformed results row: " + line);
        }
        r.seed = std::stoull(seed);
        r.accuracy = std::stod(acc);
        rows.push_back(r);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Top-level operations

std::vector<ResultRow> run_experiment(const ExperimentConfig& cfg) {
    fs::create_directories(cfg.out_dir);
    fs::create_directories(cfg.out_dir + "/diagnostics");
    std::vector<ResultRow> rows;
    for (std::uint64_t seed : cfg.seeds) {
        SeedOutcome outcome = run_seed(cfg, seed);
        rows.insert(rows.end(), outcome.rows.begin(), outcome.rows.end());
        std::ofstream d(cfg.out_dir + "/diagnostics/" + cfg.name + "_seed" +
                        std::to_string(seed) + ".json");
        d << outcome.diagnostics.dump(2) << "\n";
    }
    write_results_csv(rows, cfg.out_dir + "/results.csv");
    std::ofstream r(cfg.out_dir + "/report.txt");
    r << render_report(rows);
    return rows;
}

std::vector<ResultRow> run_sweep(const ExperimentConfig& cfg) {
    if (cfg.sweep_axis.empty()) throw ConfigError("sweep.axis: must be nonempty for sweep");
    fs::create_directories(cfg.out_dir);
    std::vector<ResultRow> rows;
    for (std::uint64_t seed : cfg.seeds) {
        for (double axis : cfg.sweep_axis) {
            ExperimentConfig point = cfg;
            // CMNIST sweeps move along the color-label correlation axis.
            point.dataset.test_beta = cfg.dataset.tag == GeneratorTag::kCMNIST
                                          ? correlation_to_noise(axis)
                                          : axis;
            point.name = cfg.name + "@" + fmt1(axis);
            point.methods = {"SFB", "SFB-no-adapt", "Oracle"};
            if (cfg.dataset.tag == GeneratorTag::kCMNIST) point.methods.pop_back();
            SeedOutcome outcome = run_seed(point, seed);
            rows.insert(rows.end(), outcome.rows.begin(), outcome.rows.end());
        }
    }
    write_results_csv(rows, cfg.out_dir + "/sweep.csv");
    std::ofstream r(cfg.out_dir + "/sweep_report.txt");
    r << render_report(rows);
    return rows;
}

void run_report(const std::string& results_path, const std::string& out_dir) {
    auto rows = read_results_csv(results_path);
    fs::create_directories(out_dir);
    std::string table = render_report(rows);
    std::ofstream t(out_dir + "/report.txt");
    t << table;
    auto aggs = aggregate_rows(rows);
    std::ofstream c(out_dir + "/report.csv");
    c << "method,dataset,mean,stderr,n\n";
    for (const auto& a : aggs) {
        c << a.method << "," << a.dataset << "," << fmt1(a.mean) << ","
          << (a.stderr_ ? fmt1(*a.stderr_) : std::string("n/a")) << "," << a.n << "\n";
    }
}

void run_generate(const ExperimentConfig& cfg, std::uint64_t seed) {
    fs::create_directories(cfg.out_dir + "/data");
    GeneratedData data = generate_data(cfg, seed);
    auto save = [&](const EnvDataset& ds, const std::string& stem) {
        std::string base = cfg.out_dir + "/data/" + stem;
        if (cfg.dataset.tag == GeneratorTag::kCMNIST) {
            export_tensor(ds, base + ".tensor");
        } else {
            export_csv(ds, base + ".csv");
        }
    };
    for (std::size_t e = 0; e < data.train.size(); ++e) {
        save(data.train[e], "train" + std::to_string(e));
    }
    save(data.val, "val");
    save(data.test, "test");
}

// ---------------------------------------------------------------------------
// Model checkpointing

nlohmann::json model_to_json(const SfbModel& model, const TrainConfig& cfg) {
    nlohmann::json specs = nlohmann::json::array();
    for (const auto& l : model.trunk.layers()) {
        specs.push_back({{"in", l.weight.cols()},
                         {"out", l.weight.rows()},
                         {"act", l.act == Activation::kRelu ? "relu" : "identity"}});
    }
    Eigen::VectorXd flat = flat_params(model);
    std::vector<std::string> env_ids;
    for (const auto& [id, head] : model.unstable_heads) env_ids.push_back(id);
    return {{"version", 1},
            {"trunk", specs},
            {"dim_s", model.dim_s},
            {"dropout", cfg.dropout},
            {"temperature", model.temperature},
            {"train_prior", model.train_prior},
            {"env_ids", env_ids},
            {"params", std::vector<double>(flat.data(), flat.data() + flat.size())}};
}

SfbModel model_from_json(const nlohmann::json& j) {
    if (j.at("version").get<int>() != 1) throw Error("model_from_json: unsupported version");
    std::vector<LayerSpec> specs;
    for (const auto& s : j.at("trunk")) {
        specs.push_back({s.at("in").get<int>(), s.at("out").get<int>(),
                         s.at("act").get<std::string>() == "relu" ? Activation::kRelu
                                                                  : Activation::kIdentity});
    }
    const int dim_s = j.at("dim_s").get<int>();
    const int phi_dim = specs.back().out;
    SfbModel model{DenseNet(specs, j.at("dropout").get<double>(), 0), dim_s, LinearHead{}, {},
                   j.at("temperature").get<double>(), j.at("train_prior").get<double>()};
    model.stable_head.w = Eigen::VectorXd::Zero(dim_s);
    for (const auto& id : j.at("env_ids")) {
        LinearHead h;
        h.w = Eigen::VectorXd::Zero(phi_dim - dim_s);
        model.unstable_heads[id.get<std::string>()] = h;
    }
    auto params = j.at("params").get<std::vector<double>>();
    set_flat_params(model, Eigen::Map<const Eigen::VectorXd>(params.data(), params.size()));
    return model;
}

void run_train(const ExperimentConfig& cfg, std::uint64_t seed) {
    fs::create_directories(cfg.out_dir);
    GeneratedData data = generate_data(cfg, seed);
    TrainConfig tc = cfg.train;
    tc.seed = mix(seed, 31);
    tc.metrics_path = cfg.out_dir + "/metrics.csv";
    SfbModel model = train(data.train, tc);
    Eigen::VectorXd vz = model.stable_logits(data.val.features);
    std::vector<double> val_logits(vz.data(), vz.data() + vz.size());
    model.temperature =
        fit_temperature(val_logits, data.val.labels, cfg.calibration_grid, cfg.calibration_bins)
            .value();
    std::ofstream f(cfg.out_dir + "/model.json");
    f << model_to_json(model, tc).dump(2) << "\n";
}

void run_adapt(const ExperimentConfig& cfg, std::uint64_t seed) {
    std::ifstream f(cfg.out_dir + "/model.json");
    if (!f) throw Error("run_adapt: missing " + cfg.out_dir + "/model.json (run train first)");
    nlohmann::json mj = nlohmann::json::parse(f);
    SfbModel model = model_from_json(mj);
    GeneratedData data = generate_data(cfg, seed);
    StableFn stable = make_stable_fn(&model);
    Eigen::MatrixXd test_phi_u = unstable_inputs(cfg, model, data.test.features);
    auto res = adapt(
        stable, [&] { return make_learner(cfg.adaptation, cfg.adaptation.max_steps); },
        data.test.features, test_phi_u, cfg.adaptation.rounds);
    std::ofstream out(cfg.out_dir + "/adapted.json");
    out << res.adapted.to_json().dump(2) << "\n";
}

std::vector<ResultRow> run_evaluate(const ExperimentConfig& cfg, std::uint64_t seed) {
    std::ifstream f(cfg.out_dir + "/model.json");
    if (!f) throw Error("run_evaluate: missing " + cfg.out_dir + "/model.json (run train first)");
    nlohmann::json mj = nlohmann::json::parse(f);
    SfbModel model = model_from_json(mj);
    GeneratedData data = generate_data(cfg, seed);
    std::vector<ResultRow> rows;
    rows.push_back({"SFB-no-adapt", cfg.name, seed,
                    100.0 * binary_accuracy(model.stable_probs(data.test.features),
                                            data.test.labels)});
    std::ifstream af(cfg.out_dir + "/adapted.json");
    if (af) {
        auto clf = adapted_from_json(nlohmann::json::parse(af), make_stable_fn(&model));
        Eigen::MatrixXd test_phi_u = unstable_inputs(cfg, model, data.test.features);
        rows.push_back({"SFB", cfg.name, seed,
                        100.0 * binary_accuracy(
                                    clf.predict_batch(data.test.features, test_phi_u),
                                    data.test.labels)});
    }
    write_results_csv(rows, cfg.out_dir + "/evaluate.csv");
    return rows;
}

}  // namespace sfb
