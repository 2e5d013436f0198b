#include <zlib.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "sfb/envs.hpp"

using namespace sfb;

namespace {

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

// Binomial 3-sigma band around expected frequency p for n draws.
bool within_3sigma(double observed, double p, long n) {
    double sigma = std::sqrt(p * (1.0 - p) / static_cast<double>(n));
    return std::abs(observed - p) <= 3.0 * sigma + 1e-12;
}

}  // namespace

TEST_CASE("gen_ac empirical frequencies match the generative law") {
    const long n = 100000;
    auto ds = gen_ac(0.7, n, 11);
    REQUIRE(ds.features.rows() == n);
    REQUIRE(ds.features.cols() == 2);

    long y1 = 0, s_agree = 0, u_agree = 0;
    for (long i = 0; i < n; ++i) {
        int y = ds.labels[i] == 1 ? 1 : -1;
        y1 += ds.labels[i];
        s_agree += ds.features(i, 0) == y;
        u_agree += ds.features(i, 1) == y;
        CHECK(std::abs(ds.features(i, 0)) == 1.0);
        CHECK(std::abs(ds.features(i, 1)) == 1.0);
    }
    CHECK(within_3sigma(static_cast<double>(y1) / n, 0.5, n));
    CHECK(within_3sigma(static_cast<double>(s_agree) / n, 0.75, n));
    CHECK(within_3sigma(static_cast<double>(u_agree) / n, 0.7, n));
}

TEST_CASE("gen_cedd empirical frequencies match the generative law") {
    const long n = 100000;
    auto ds = gen_cedd(0.8, n, 12);
    long xs1 = 0, b1 = 0, b2 = 0;
    for (long i = 0; i < n; ++i) {
        int xs = static_cast<int>(ds.features(i, 0));
        int xu = static_cast<int>(ds.features(i, 1));
        int y = ds.labels[i];
        xs1 += xs;
        b1 += xs ^ y;            // Bern(0.75) indicator is y == xs ^ b1 with b1=1
        b2 += y ^ xu ^ xs;       // b2 = XOR chain inverse
    }
    CHECK(within_3sigma(static_cast<double>(xs1) / n, 0.5, n));
    CHECK(within_3sigma(static_cast<double>(b1) / n, 0.75, n));
    CHECK(within_3sigma(static_cast<double>(b2) / n, 0.8, n));
}

TEST_CASE("bayes_oracle AC at beta=0.1") {
    auto oracle = bayes_oracle(GeneratorTag::kAC, 0.1);
    CHECK(oracle.prior == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(oracle.bayes_accuracy == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(oracle.p_y_given_s(1.0) == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(oracle.p_y_given_s(-1.0) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(oracle.p_y_given_u(1.0) == doctest::Approx(0.1).epsilon(1e-12));
    // Posterior at (x_S, x_U) = (+1, +1): logit 0.75 + logit 0.1 -> 0.25.
    CHECK(oracle.lookup.at({1.0, 1.0}).p_y_given_su == doctest::Approx(0.25).epsilon(1e-12));
    // Cell masses sum to one.
    double mass = 0.0;
    for (const auto& [k, cell] : oracle.lookup) mass += cell.mass;
    CHECK(mass == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("bayes_oracle CEDD at beta=0.1") {
    auto oracle = bayes_oracle(GeneratorTag::kCEDD, 0.1);
    // Bayes rule predicts y = xs XOR xu, correct whenever b2 = 0.
    CHECK(oracle.bayes_accuracy == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(oracle.prior == doctest::Approx(0.5).epsilon(1e-12));
    // Pr[Y=1|X_S=1] = Pr[b1=0] = 0.25.
    CHECK(oracle.p_y_given_s(1.0) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("bayes_oracle rejects CMNIST") {
    CHECK_THROWS_AS(bayes_oracle(GeneratorTag::kCMNIST, 0.1), UnsupportedGenerator);
}

TEST_CASE("suboptimality_vs_bayes") {
    auto oracle = bayes_oracle(GeneratorTag::kAC, 0.1);
    // The unstable-feature Bayes rule at beta=0.1 predicts against x_U.
    auto bayes_u = [](double x_u) { return x_u > 0 ? 0 : 1; };
    CHECK(suboptimality_vs_bayes(bayes_u, oracle) == doctest::Approx(0.0));
    auto flipped = [](double x_u) { return x_u > 0 ? 1 : 0; };
    CHECK(suboptimality_vs_bayes(flipped, oracle) == doctest::Approx(1.0));
    // Constant 0 disagrees exactly on the mass of {x_U = -1} = 0.5.
    auto zero = [](double) { return 0; };
    CHECK(suboptimality_vs_bayes(zero, oracle) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("IDX round trip through write_idx and load_mnist_idx") {
    auto digits = make_stub_digits(60, 99);
    REQUIRE(digits.images.size() == 60);
    std::string img = tmp_path("sfb_test_images.idx");
    std::string lab = tmp_path("sfb_test_labels.idx");
    write_idx(digits, img, lab);
    auto rt = load_mnist_idx(img, lab);
    REQUIRE(rt.images.size() == 60);
    CHECK(rt.labels == digits.labels);
    for (int i = 0; i < 60; ++i) {
        // u8 quantization loses at most half a step.
        CHECK((rt.images[i] - digits.images[i]).cwiseAbs().maxCoeff() <= 0.5 / 255.0 + 1e-12);
    }
    std::remove(img.c_str());
    std::remove(lab.c_str());
}

TEST_CASE("load_mnist_idx accepts gzip-compressed files") {
    auto digits = make_stub_digits(20, 7);
    std::string img = tmp_path("sfb_gz_images.idx");
    std::string lab = tmp_path("sfb_gz_labels.idx");
    write_idx(digits, img, lab);
    for (const std::string& p : {img, lab}) {
        std::ifstream in(p, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        gzFile gz = gzopen((p + ".gz").c_str(), "wb");
        REQUIRE(gz != nullptr);
        gzwrite(gz, bytes.data(), static_cast<unsigned>(bytes.size()));
        gzclose(gz);
    }
    auto rt = load_mnist_idx(img + ".gz", lab + ".gz");
    CHECK(rt.labels == digits.labels);
    CHECK(rt.images.size() == 20);
    for (const std::string& p : {img, lab, img + ".gz", lab + ".gz"}) std::remove(p.c_str());
}

TEST_CASE("load_mnist_idx error paths") {
    std::string img = tmp_path("sfb_bad_images.idx");
    std::string lab = tmp_path("sfb_bad_labels.idx");
    auto digits = make_stub_digits(10, 1);
    write_idx(digits, img, lab);

    SUBCASE("bad magic") {
        std::ofstream f(tmp_path("sfb_garbage.idx"), std::ios::binary);
        f << "not an idx file at all";
        f.close();
        CHECK_THROWS_AS(load_mnist_idx(tmp_path("sfb_garbage.idx"), lab), BadMagic);
        std::remove(tmp_path("sfb_garbage.idx").c_str());
    }
    SUBCASE("truncated payload") {
        std::ifstream in(img, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        in.close();
        std::ofstream out(tmp_path("sfb_trunc.idx"), std::ios::binary);
        out.write(bytes.data(), static_cast<long>(bytes.size() / 2));
        out.close();
        CHECK_THROWS_AS(load_mnist_idx(tmp_path("sfb_trunc.idx"), lab), TruncatedFile);
        std::remove(tmp_path("sfb_trunc.idx").c_str());
    }
    SUBCASE("image/label count mismatch") {
        auto fewer = make_stub_digits(6, 2);
        std::string lab2 = tmp_path("sfb_fewer_labels.idx");
        std::string img2 = tmp_path("sfb_fewer_images.idx");
        write_idx(fewer, img2, lab2);
        CHECK_THROWS_AS(load_mnist_idx(img, lab2), CountMismatch);
        std::remove(lab2.c_str());
        std::remove(img2.c_str());
    }
    std::remove(img.c_str());
    std::remove(lab.c_str());
}

TEST_CASE("make_cmnist invariants") {
    const long n = 15000;
    auto digits = make_stub_digits(n, 33);
    CmnistOptions opts;
    opts.color_noise_levels = {0.1, 0.2, 0.9};
    opts.label_noise = 0.25;
    opts.seed = 5;
    auto envs = make_cmnist(digits, opts);
    REQUIRE(envs.size() == 3);
    CHECK(envs[0].features.rows() + envs[1].features.rows() + envs[2].features.rows() == n);

    for (std::size_t e = 0; e < envs.size(); ++e) {
        const auto& ds = envs[e];
        REQUIRE(ds.features.cols() == 392);
        const long ne = ds.features.rows();
        long label_matches_digit = 0;
        long color_matches_label = 0;
        for (long j = 0; j < ne; ++j) {
            // Round-robin split: env e row j came from digit index j*3 + e.
            int digit_label = digits.labels[static_cast<std::size_t>(j) * 3 + e] >= 5 ? 1 : 0;
            label_matches_digit += ds.labels[j] == digit_label;

            double red = ds.features.row(j).head(196).sum();
            double green = ds.features.row(j).tail(196).sum();
            // Exactly one channel carries the image.
            CHECK(((red > 0.0) != (green > 0.0)));
            int color = red > 0.0 ? 1 : 0;
            color_matches_label += color == ds.labels[j];

            CHECK(ds.features.row(j).minCoeff() >= 0.0);
            CHECK(ds.features.row(j).maxCoeff() <= 1.0);
        }
        CHECK(within_3sigma(static_cast<double>(label_matches_digit) / ne, 0.75, ne));
        CHECK(within_3sigma(static_cast<double>(color_matches_label) / ne,
                            1.0 - opts.color_noise_levels[e], ne));
    }
}

TEST_CASE("correlation_to_noise") {
    CHECK(correlation_to_noise(1.0) == doctest::Approx(0.0));
    CHECK(correlation_to_noise(0.8) == doctest::Approx(0.1));
    CHECK(correlation_to_noise(-0.8) == doctest::Approx(0.9));
}

TEST_CASE("tensor export round trip") {
    auto ds = gen_ac(0.6, 50, 4);
    std::string path = tmp_path("sfb_test.tensor");
    export_tensor(ds, path);
    auto rt = import_tensor(path);
    CHECK(rt.env_id == ds.env_id);
    CHECK(rt.beta == doctest::Approx(ds.beta));
    CHECK(rt.tag == ds.tag);
    CHECK(rt.labels == ds.labels);
    CHECK((rt.features - ds.features).norm() == doctest::Approx(0.0));
    std::remove(path.c_str());

    std::ofstream bad(tmp_path("sfb_bad.tensor"), std::ios::binary);
    bad << "XXXXnot a tensor";
    bad.close();
    CHECK_THROWS_AS(import_tensor(tmp_path("sfb_bad.tensor")), BadMagic);
    std::remove(tmp_path("sfb_bad.tensor").c_str());
}

TEST_CASE("export_csv writes a parseable header and rows") {
    auto ds = gen_cedd(0.2, 10, 3);
    std::string path = tmp_path("sfb_test.csv");
    export_csv(ds, path);
    std::ifstream f(path);
    std::string header;
    std::getline(f, header);
    CHECK(header == "x0,x1,y");
    int rows = 0;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty()) ++rows;
    }
    CHECK(rows == 10);
    std::remove(path.c_str());
}
