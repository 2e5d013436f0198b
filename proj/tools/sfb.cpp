#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"
#include "sfb/harness.hpp"

namespace {

struct Options {
    std::string config;
    long seed = -1;  // -1: use the config's seed list
    std::string out;
};

sfb::ExperimentConfig load(const Options& opt) {
    auto cfg = sfb::parse_experiment_config(opt.config);
    if (!opt.out.empty()) cfg.out_dir = opt.out;
    if (opt.seed >= 0) cfg.seeds = {static_cast<std::uint64_t>(opt.seed)};
    return cfg;
}

void add_common(CLI::App* sub, Options& opt) {
    sub->add_option("--config", opt.config, "experiment config file")->required();
    sub->add_option("--seed", opt.seed, "override the config's seed list with one seed");
    sub->add_option("--out", opt.out, "override the config's output directory");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Stable feature boosting: train, adapt, and evaluate across environments"};
    app.require_subcommand(1);
    Options opt;

    auto* c_generate = app.add_subcommand("generate", "write the configured datasets to disk");
    auto* c_train = app.add_subcommand("train", "train the multi-environment model");
    auto* c_adapt = app.add_subcommand("adapt", "adapt the unstable head on the test domain");
    auto* c_evaluate = app.add_subcommand("evaluate", "evaluate saved models on the test domain");
    auto* c_run = app.add_subcommand("run", "full pipeline over all configured seeds");
    auto* c_sweep = app.add_subcommand("sweep", "evaluate across the configured test-domain axis");
    auto* c_report = app.add_subcommand("report", "render a results table from results.csv");
    for (auto* sub : {c_generate, c_train, c_adapt, c_evaluate, c_run, c_sweep, c_report}) {
        add_common(sub, opt);
    }

    CLI11_PARSE(app, argc, argv);

    try {
        auto cfg = load(opt);
        std::uint64_t seed = cfg.seeds.front();
        if (c_generate->parsed()) {
            sfb::run_generate(cfg, seed);
            std::printf("wrote datasets under %s/data\n", cfg.out_dir.c_str());
        } else if (c_train->parsed()) {
            sfb::run_train(cfg, seed);
            std::printf("wrote %s/model.json\n", cfg.out_dir.c_str());
        } else if (c_adapt->parsed()) {
            sfb::run_adapt(cfg, seed);
            std::printf("wrote %s/adapted.json\n", cfg.out_dir.c_str());
        } else if (c_evaluate->parsed()) {
            for (const auto& r : sfb::run_evaluate(cfg, seed)) {
                std::printf("%s %s seed=%llu accuracy=%.2f\n", r.method.c_str(),
                            r.dataset.c_str(), static_cast<unsigned long long>(r.seed),
                            r.accuracy);
            }
        } else if (c_run->parsed()) {
            auto rows = sfb::run_experiment(cfg);
            std::printf("%s", sfb::render_report(rows).c_str());
            std::printf("wrote %s/results.csv\n", cfg.out_dir.c_str());
        } else if (c_sweep->parsed()) {
            auto rows = sfb::run_sweep(cfg);
            std::printf("%s", sfb::render_report(rows).c_str());
            std::printf("wrote %s/sweep.csv\n", cfg.out_dir.c_str());
        } else if (c_report->parsed()) {
            sfb::run_report(cfg.out_dir + "/results.csv", cfg.out_dir);
            std::printf("wrote %s/report.txt\n", cfg.out_dir.c_str());
        }
    } catch (const sfb::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
