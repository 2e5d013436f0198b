#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"

#include "sfb/harness.hpp"

using namespace sfb;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name, const std::string& text) {
    fs::path p = fs::temp_directory_path() / name;
    std::ofstream f(p);
    f << text;
    return p;
}

const char* kMinimalAc = R"(
[experiment]
name = "mini"
seeds = [0, 1]

[dataset]
tag = "ac"
train_betas = [0.9, 0.7]
val_beta = 0.6
test_beta = 0.1
n_train = 400
n_val = 400
n_test = 400

[train]
lambda_s = 5.0
lr = 0.05
steps = 60
pretrain_steps = 30
dim_s = 2
phi_dim = 4
hidden = [4]

[adaptation]
learner = "tabular"
)";

std::string patched(std::string text, const std::string& from, const std::string& to) {
    auto pos = text.find(from);
    REQUIRE(pos != std::string::npos);
    return text.replace(pos, from.size(), to);
}

}  // namespace

TEST_CASE("toml subset parser handles scalars, arrays and comments") {
    TomlTable t = parse_toml_text(
        "top = 1.5\n"
        "[a]\n"
        "s = \"hello # not a comment\"  # trailing comment\n"
        "flag = true\n"
        "off = false\n"
        "nums = [1, 2.5, -3e-1]\n"
        "names = [\"x\", \"y\"]\n"
        "empty = []\n"
        "\n"
        "[b]\n"
        "n = -42\n");
    CHECK(t.get_number("", "top") == 1.5);
    CHECK(t.get_string("a", "s") == "hello # not a comment");
    CHECK(t.get_bool("a", "flag", false));
    CHECK_FALSE(t.get_bool("a", "off", true));
    CHECK(t.get_array("a", "nums") == std::vector<double>{1.0, 2.5, -0.3});
    CHECK(std::get<std::vector<std::string>>(t.at("a", "names")) ==
          std::vector<std::string>{"x", "y"});
    CHECK(t.get_array("a", "empty").empty());
    CHECK(t.get_number("b", "n") == -42.0);
    CHECK(t.has("a", "flag"));
    CHECK_FALSE(t.has("a", "missing"));
    // Fallbacks apply only when the key is absent.
    CHECK(t.get_number("a", "missing", 7.0) == 7.0);
    CHECK(t.get_string("b", "missing", std::string("d")) == "d");
}

TEST_CASE("toml parse errors carry origin and line number") {
    CHECK_THROWS_WITH_AS(parse_toml_text("[oops\n", "cfg.toml"),
                         doctest::Contains("cfg.toml:1"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_toml_text("\nkey value\n", "cfg.toml"),
                         doctest::Contains("cfg.toml:2"), ConfigError);
    CHECK_THROWS_AS(parse_toml_text("x = \"unterminated\n"), ConfigError);
    CHECK_THROWS_AS(parse_toml_text("x = [1, 2\n"), ConfigError);
    CHECK_THROWS_AS(parse_toml_text("x = notaword\n"), ConfigError);
    CHECK_THROWS_AS(parse_toml_text("= 3\n"), ConfigError);
    CHECK_THROWS_AS(parse_toml("/nonexistent/path.toml"), ConfigError);
    // Missing required key reports section.key.
    TomlTable t = parse_toml_text("[a]\nx = 1\n");
    CHECK_THROWS_WITH_AS(t.get_number("a", "y"), doctest::Contains("a.y"), ConfigError);
}

TEST_CASE("parse_experiment_config validates and names bad fields") {
    auto path = temp_file("sfb_cfg_ok.toml", kMinimalAc);
    ExperimentConfig cfg = parse_experiment_config(path.string());
    CHECK(cfg.name == "mini");
    CHECK(cfg.seeds == std::vector<std::uint64_t>{0, 1});
    CHECK(cfg.dataset.tag == GeneratorTag::kAC);
    CHECK(cfg.dataset.train_betas == std::vector<double>{0.9, 0.7});
    CHECK(cfg.train.lambda_s == 5.0);
    CHECK(cfg.train.dim_s == 2);
    CHECK(cfg.adaptation.learner == "tabular");
    CHECK(cfg.out_dir == "out/mini");  // default from name

    auto expect_error = [&](const std::string& from, const std::string& to,
                            const std::string& needle) {
        auto bad = temp_file("sfb_cfg_bad.toml", patched(kMinimalAc, from, to));
        CHECK_THROWS_WITH_AS(parse_experiment_config(bad.string()),
                             doctest::Contains(needle.c_str()), ConfigError);
    };
    expect_error("tag = \"ac\"", "tag = \"mystery\"", "dataset.tag");
    expect_error("train_betas = [0.9, 0.7]", "train_betas = [0.9]", "train_betas");
    expect_error("seeds = [0, 1]", "seeds = []", "seeds");
    expect_error("lambda_s = 5.0", "lambda_s = 5.0\npenalty = \"l1\"", "train.penalty");
    expect_error("dim_s = 2", "dim_s = 4", "dim_s");
    expect_error("n_test = 400", "n_test = 0", "n_test");
    expect_error("learner = \"tabular\"", "learner = \"forest\"", "adaptation.learner");
}

TEST_CASE("aggregate_rows computes mean and standard error") {
    std::vector<ResultRow> rows = {{"SFB", "AC", 0, 85.0},
                                   {"SFB", "AC", 1, 89.0},
                                   {"ERM", "AC", 0, 10.0}};
    auto aggs = aggregate_rows(rows);
    REQUIRE(aggs.size() == 2);
    CHECK(aggs[0].method == "SFB");
    CHECK(aggs[0].mean == doctest::Approx(87.0));
    REQUIRE(aggs[0].stderr_.has_value());
    CHECK(*aggs[0].stderr_ == doctest::Approx(2.0));  // sd 2*sqrt(2) over sqrt(2)
    CHECK(aggs[0].n == 2);
    CHECK(aggs[1].method == "ERM");
    CHECK_FALSE(aggs[1].stderr_.has_value());
    CHECK(aggs[1].n == 1);
}

TEST_CASE("render_report golden table") {
    std::vector<ResultRow> rows = {
        {"ERM", "AC", 0, 10.0}, {"ERM", "AC", 1, 12.0},
        {"SFB", "AC", 0, 85.0}, {"SFB", "AC", 1, 89.0},
        {"SFB", "CE-DD", 0, 90.0},
    };
    // Column widths are byte widths; the ± sign is two bytes in UTF-8.
    std::string expected;
    expected += "method | AC" + std::string(13, ' ') + " | CE-DD\n";
    expected += "ERM    | 11.0 ± 1.0" + std::string(4, ' ') + " | -\n";
    expected += "SFB    | **87.0 ± 2.0** | **90.0 ± n/a**\n";
    CHECK(render_report(rows) == expected);
}

TEST_CASE("render_report reports zero stderr for identical seeds") {
    std::vector<ResultRow> rows = {{"SFB", "AC", 0, 90.0}, {"SFB", "AC", 1, 90.0}};
    CHECK(render_report(rows) == "method | AC\nSFB    | **90.0 ± 0.0**\n");
}

TEST_CASE("render_report keeps canonical method order and rejects empty input") {
    std::vector<ResultRow> rows = {{"Oracle", "AC", 0, 90.0},
                                   {"Custom", "AC", 0, 50.0},
                                   {"ERM", "AC", 0, 10.0}};
    std::string table = render_report(rows);
    auto pos_erm = table.find("\nERM");
    auto pos_oracle = table.find("\nOracle");
    auto pos_custom = table.find("\nCustom");
    REQUIRE(pos_erm != std::string::npos);
    CHECK(pos_erm < pos_oracle);
    CHECK(pos_oracle < pos_custom);  // unknown methods go last
    CHECK_THROWS_AS(render_report({}), Error);
}

TEST_CASE("results csv round trip") {
    std::vector<ResultRow> rows = {{"SFB", "AC", 3, 87.65}, {"ERM", "CE-DD", 11, 9.975}};
    auto path = fs::temp_directory_path() / "sfb_results_rt.csv";
    write_results_csv(rows, path.string());
    auto back = read_results_csv(path.string());
    REQUIRE(back.size() == rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(back[i].method == rows[i].method);
        CHECK(back[i].dataset == rows[i].dataset);
        CHECK(back[i].seed == rows[i].seed);
        CHECK(back[i].accuracy == rows[i].accuracy);
    }
    CHECK_THROWS_AS(read_results_csv("/nonexistent/results.csv"), Error);
}

TEST_CASE("run_seed is deterministic and produces diagnostics") {
    auto path = temp_file("sfb_cfg_seed.toml", kMinimalAc);
    ExperimentConfig cfg = parse_experiment_config(path.string());
    cfg.methods = {"SFB-no-adapt", "SFB", "Oracle"};
    SeedOutcome a = run_seed(cfg, 0);
    SeedOutcome b = run_seed(cfg, 0);
    REQUIRE(a.rows.size() == 3);
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        CHECK(a.rows[i].method == b.rows[i].method);
        CHECK(a.rows[i].accuracy == b.rows[i].accuracy);  // bitwise identical
    }
    CHECK(a.diagnostics == b.diagnostics);
    CHECK(a.diagnostics.contains("temperature"));
    CHECK(a.diagnostics.contains("val_ece_after"));
    // Oracle row matches the AC Bayes accuracy at beta = 0.1.
    CHECK(a.rows[2].method == "Oracle");
    CHECK(a.rows[2].accuracy == doctest::Approx(90.0));
    // A different seed draws different data.
    SeedOutcome c = run_seed(cfg, 1);
    CHECK(a.rows[0].accuracy != c.rows[0].accuracy);
}

TEST_CASE("run_seed wraps stage failures with the stage name") {
    auto path = temp_file("sfb_cfg_stagefail.toml", kMinimalAc);
    ExperimentConfig cfg = parse_experiment_config(path.string());
    cfg.train.steps = 60;
    cfg.train.pretrain_steps = 120;  // train() rejects pretrain > steps
    CHECK_THROWS_WITH_AS(run_seed(cfg, 0), doctest::Contains("train"), Error);
}

TEST_CASE("model json round trip preserves predictions exactly") {
    EnvDataset e1 = gen_ac(0.9, 300, 1);
    EnvDataset e2 = gen_ac(0.7, 300, 2);
    TrainConfig tc;
    tc.lambda_s = 5.0;
    tc.lr = 0.05;
    tc.steps = 60;
    tc.pretrain_steps = 30;
    tc.dim_s = 2;
    tc.phi_dim = 4;
    tc.hidden = {4};
    tc.seed = 7;
    SfbModel model = train({e1, e2}, tc);
    model.temperature = 1.5;
    nlohmann::json j = model_to_json(model, tc);
    CHECK(j.at("version") == 1);
    SfbModel back = model_from_json(j);
    CHECK(back.dim_s == model.dim_s);
    CHECK(back.temperature == model.temperature);
    CHECK(back.train_prior == model.train_prior);
    EnvDataset probe = gen_ac(0.5, 50, 3);
    Eigen::VectorXd za = model.stable_logits(probe.features);
    Eigen::VectorXd zb = back.stable_logits(probe.features);
    CHECK((za - zb).cwiseAbs().maxCoeff() == 0.0);
    Eigen::MatrixXd ua = model.unstable_features(probe.features);
    Eigen::MatrixXd ub = back.unstable_features(probe.features);
    CHECK((ua - ub).cwiseAbs().maxCoeff() == 0.0);
    nlohmann::json bad = j;
    bad["version"] = 2;
    CHECK_THROWS_AS(model_from_json(bad), Error);
}

TEST_CASE("train/adapt/evaluate pipeline round-trips through checkpoints") {
    auto path = temp_file("sfb_cfg_pipeline.toml", kMinimalAc);
    ExperimentConfig cfg = parse_experiment_config(path.string());
    fs::path out = fs::temp_directory_path() / "sfb_pipeline_out";
    fs::remove_all(out);
    cfg.out_dir = out.string();

    CHECK_THROWS_AS(run_adapt(cfg, 0), Error);  // no model.json yet
    run_train(cfg, 0);
    CHECK(fs::exists(out / "model.json"));
    CHECK(fs::exists(out / "metrics.csv"));
    run_adapt(cfg, 0);
    CHECK(fs::exists(out / "adapted.json"));
    auto rows = run_evaluate(cfg, 0);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].method == "SFB-no-adapt");
    CHECK(rows[1].method == "SFB");
    CHECK(rows[0].accuracy > 50.0);
    CHECK(rows[1].accuracy > 50.0);
    CHECK(fs::exists(out / "evaluate.csv"));
    // Evaluation is reproducible from the checkpoints alone.
    auto rows2 = run_evaluate(cfg, 0);
    CHECK(rows2[1].accuracy == rows[1].accuracy);
    fs::remove_all(out);
}

TEST_CASE("run_experiment and run_report write the documented artifacts") {
    auto path = temp_file("sfb_cfg_exp.toml", kMinimalAc);
    ExperimentConfig cfg = parse_experiment_config(path.string());
    cfg.seeds = {0};
    cfg.methods = {"SFB-no-adapt", "SFB"};
    fs::path out = fs::temp_directory_path() / "sfb_exp_out";
    fs::remove_all(out);
    cfg.out_dir = out.string();
    auto rows = run_experiment(cfg);
    CHECK(rows.size() == 2);
    CHECK(fs::exists(out / "results.csv"));
    CHECK(fs::exists(out / "report.txt"));
    CHECK(fs::exists(out / "diagnostics" / "mini_seed0.json"));
    run_report((out / "results.csv").string(), (out / "rep").string());
    CHECK(fs::exists(out / "rep" / "report.txt"));
    CHECK(fs::exists(out / "rep" / "report.csv"));
    std::ifstream rep(out / "rep" / "report.csv");
    std::string header;
    std::getline(rep, header);
    CHECK(header == "method,dataset,mean,stderr,n");
    fs::remove_all(out);
}

TEST_CASE("run_sweep tags rows with the axis value") {
    auto path = temp_file("sfb_cfg_sweep.toml", kMinimalAc);
    ExperimentConfig cfg = parse_experiment_config(path.string());
    cfg.seeds = {0};
    cfg.sweep_axis = {0.1, 0.9};
    fs::path out = fs::temp_directory_path() / "sfb_sweep_out";
    fs::remove_all(out);
    cfg.out_dir = out.string();
    auto rows = run_sweep(cfg);
    bool saw_01 = false, saw_09 = false;
    for (const auto& r : rows) {
        if (r.dataset == "mini@0.1") saw_01 = true;
        if (r.dataset == "mini@0.9") saw_09 = true;
    }
    CHECK(saw_01);
    CHECK(saw_09);
    CHECK(fs::exists(out / "sweep.csv"));
    cfg.sweep_axis.clear();
    CHECK_THROWS_AS(run_sweep(cfg), ConfigError);
    fs::remove_all(out);
}

TEST_CASE("run_generate exports csv for synthetic configs") {
    auto path = temp_file("sfb_cfg_gen.toml", kMinimalAc);
    ExperimentConfig cfg = parse_experiment_config(path.string());
    fs::path out = fs::temp_directory_path() / "sfb_gen_out";
    fs::remove_all(out);
    cfg.out_dir = out.string();
    run_generate(cfg, 0);
    CHECK(fs::exists(out / "data" / "train0.csv"));
    CHECK(fs::exists(out / "data" / "train1.csv"));
    CHECK(fs::exists(out / "data" / "val.csv"));
    CHECK(fs::exists(out / "data" / "test.csv"));
    fs::remove_all(out);
}
