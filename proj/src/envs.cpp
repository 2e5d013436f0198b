#include "sfb/envs.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

namespace sfb {

std::string to_string(GeneratorTag tag) {
    switch (tag) {
        case GeneratorTag::kAC: return "AC";
        case GeneratorTag::kCEDD: return "CEDD";
        case GeneratorTag::kCMNIST: return "CMNIST";
    }
    return "?";
}

namespace {

int rad(std::mt19937_64& rng, double beta) {
    std::bernoulli_distribution d(beta);
    return d(rng) ? 1 : -1;
}

int bern(std::mt19937_64& rng, double beta) {
    std::bernoulli_distribution d(beta);
    return d(rng) ? 1 : 0;
}

}  // namespace

EnvDataset gen_ac(double beta, long n, std::uint64_t seed) {
    if (!(beta >= 0.0 && beta <= 1.0) || n < 1) throw Error("gen_ac: bad arguments");
    std::mt19937_64 rng(seed);
    EnvDataset ds;
    ds.tag = GeneratorTag::kAC;
    ds.beta = beta;
    ds.env_id = "ac_beta" + std::to_string(beta);
    ds.features.resize(n, 2);
    ds.labels.resize(n);
    for (long i = 0; i < n; ++i) {
        int y = rad(rng, 0.5);
        ds.features(i, 0) = y * rad(rng, 0.75);
        ds.features(i, 1) = y * rad(rng, beta);
        ds.labels[i] = (y + 1) / 2;
    }
    return ds;
}

EnvDataset gen_cedd(double beta, long n, std::uint64_t seed) {
    if (!(beta >= 0.0 && beta <= 1.0) || n < 1) throw Error("gen_cedd: bad arguments");
    std::mt19937_64 rng(seed);
    EnvDataset ds;
    ds.tag = GeneratorTag::kCEDD;
    ds.beta = beta;
    ds.env_id = "cedd_beta" + std::to_string(beta);
    ds.features.resize(n, 2);
    ds.labels.resize(n);
    for (long i = 0; i < n; ++i) {
        int xs = bern(rng, 0.5);
        int y = xs ^ bern(rng, 0.75);
        int xu = (y ^ bern(rng, beta)) ^ xs;
        ds.features(i, 0) = xs;
        ds.features(i, 1) = xu;
        ds.labels[i] = y;
    }
    return ds;
}

BayesOracle bayes_oracle(GeneratorTag tag, double beta) {
    BayesOracle oracle;
    oracle.tag = tag;
    oracle.beta = beta;

    // joint[(x_s, x_u)] = (Pr[.., Y=0], Pr[.., Y=1])
    std::map<std::pair<double, double>, std::pair<double, double>> joint;

    if (tag == GeneratorTag::kAC) {
        for (int y : {-1, 1}) {
            for (int sf : {-1, 1}) {
                for (int uf : {-1, 1}) {
                    double p = 0.5 * (sf == 1 ? 0.75 : 0.25) * (uf == 1 ? beta : 1.0 - beta);
                    auto& cell = joint[{y * sf, y * uf}];
                    (y == 1 ? cell.second : cell.first) += p;
                }
            }
        }
    } else if (tag == GeneratorTag::kCEDD) {
        for (int xs : {0, 1}) {
            for (int b1 : {0, 1}) {
                for (int b2 : {0, 1}) {
                    double p = 0.5 * (b1 == 1 ? 0.75 : 0.25) * (b2 == 1 ? beta : 1.0 - beta);
                    int y = xs ^ b1;
                    int xu = (y ^ b2) ^ xs;
                    auto& cell = joint[{static_cast<double>(xs), static_cast<double>(xu)}];
                    (y == 1 ? cell.second : cell.first) += p;
                }
            }
        }
    } else {
        throw UnsupportedGenerator("bayes_oracle: no closed form for CMNIST");
    }

    // Marginals over X_S and X_U.
    std::map<double, std::pair<double, double>> s_marg, u_marg;
    double prior1 = 0.0;
    for (const auto& [key, cell] : joint) {
        s_marg[key.first].first += cell.first;
        s_marg[key.first].second += cell.second;
        u_marg[key.second].first += cell.first;
        u_marg[key.second].second += cell.second;
        prior1 += cell.second;
    }
    oracle.prior = prior1;

    for (const auto& [key, cell] : joint) {
        BayesOracle::Cell c;
        c.mass = cell.first + cell.second;
        if (c.mass <= 0.0) continue;
        c.p_y_given_su = cell.second / c.mass;
        const auto& sm = s_marg[key.first];
        c.p_y_given_s = sm.second / (sm.first + sm.second);
        const auto& um = u_marg[key.second];
        c.p_y_given_u = um.second / (um.first + um.second);
        oracle.lookup[key] = c;
        oracle.bayes_accuracy += c.mass * std::max(c.p_y_given_su, 1.0 - c.p_y_given_su);
    }
    return oracle;
}

double BayesOracle::marginal_u(double x_u) const {
    double m = 0.0;
    for (const auto& [key, cell] : lookup) {
        if (key.second == x_u) m += cell.mass;
    }
    return m;
}

double BayesOracle::p_y_given_u(double x_u) const {
    for (const auto& [key, cell] : lookup) {
        if (key.second == x_u) return cell.p_y_given_u;
    }
    throw Error("BayesOracle: unknown x_u value");
}

double BayesOracle::p_y_given_s(double x_s) const {
    for (const auto& [key, cell] : lookup) {
        if (key.first == x_s) return cell.p_y_given_s;
    }
    throw Error("BayesOracle: unknown x_s value");
}

double suboptimality_vs_bayes(const std::function<int(double)>& h, const BayesOracle& oracle) {
    std::map<double, std::pair<double, double>> u_cells;  // x_u -> (mass, p_y_given_u)
    for (const auto& [key, cell] : oracle.lookup) {
        u_cells[key.second] = {oracle.marginal_u(key.second), cell.p_y_given_u};
    }
    double s = 0.0;
    for (const auto& [x_u, mp] : u_cells) {
        int bayes = mp.second > 0.5 ? 1 : 0;
        if (h(x_u) != bayes) s += mp.first;
    }
    return s;
}

// ---------------------------------------------------------------------------
// MNIST IDX

namespace {

std::vector<std::uint8_t> read_file_maybe_gzip(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open file: " + path);
    std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
    if (raw.size() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b) {
        std::vector<std::uint8_t> out;
        out.reserve(raw.size() * 4);
        z_stream zs{};
        if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK) throw Error("gzip init failed: " + path);
        zs.next_in = raw.data();
        zs.avail_in = static_cast<uInt>(raw.size());
        std::uint8_t buf[1 << 16];
        int ret = Z_OK;
        do {
            zs.next_out = buf;
            zs.avail_out = sizeof(buf);
            ret = inflate(&zs, Z_NO_FLUSH);
            if (ret != Z_OK && ret != Z_STREAM_END) {
                inflateEnd(&zs);
                throw TruncatedFile("gzip stream corrupt: " + path);
            }
            out.insert(out.end(), buf, buf + (sizeof(buf) - zs.avail_out));
        } while (ret != Z_STREAM_END);
        inflateEnd(&zs);
        return out;
    }
    return raw;
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& buf, std::size_t off) {
    if (off + 4 > buf.size()) throw TruncatedFile("IDX header truncated");
    return (static_cast<std::uint32_t>(buf[off]) << 24) |
           (static_cast<std::uint32_t>(buf[off + 1]) << 16) |
           (static_cast<std::uint32_t>(buf[off + 2]) << 8) | buf[off + 3];
}

}  // namespace

RawDigits load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
    auto img_buf = read_file_maybe_gzip(images_path);
    auto lbl_buf = read_file_maybe_gzip(labels_path);

    if (read_be32(img_buf, 0) != 0x00000803u) throw BadMagic("not an IDX image file: " + images_path);
    if (read_be32(lbl_buf, 0) != 0x00000801u) throw BadMagic("not an IDX label file: " + labels_path);

    const std::uint32_t n = read_be32(img_buf, 4);
    const std::uint32_t rows = read_be32(img_buf, 8);
    const std::uint32_t cols = read_be32(img_buf, 12);
    const std::uint32_t n_lbl = read_be32(lbl_buf, 4);
    if (n != n_lbl) throw CountMismatch("IDX image/label counts differ");
    if (img_buf.size() < 16 + static_cast<std::size_t>(n) * rows * cols) {
        throw TruncatedFile("IDX image payload truncated: " + images_path);
    }
    if (lbl_buf.size() < 8 + static_cast<std::size_t>(n)) {
        throw TruncatedFile("IDX label payload truncated: " + labels_path);
    }

    RawDigits out;
    out.images.reserve(n);
    out.labels.reserve(n);
    std::size_t off = 16;
    for (std::uint32_t i = 0; i < n; ++i) {
        Eigen::MatrixXd img(rows, cols);
        for (std::uint32_t r = 0; r < rows; ++r) {
            for (std::uint32_t c = 0; c < cols; ++c) {
                img(r, c) = img_buf[off++] / 255.0;
            }
        }
        out.images.push_back(std::move(img));
        out.labels.push_back(lbl_buf[8 + i]);
    }
    return out;
}

void write_idx(const RawDigits& digits, const std::string& images_path,
               const std::string& labels_path) {
    const std::uint32_t n = static_cast<std::uint32_t>(digits.images.size());
    const std::uint32_t rows = n > 0 ? static_cast<std::uint32_t>(digits.images[0].rows()) : 28;
    const std::uint32_t cols = n > 0 ? static_cast<std::uint32_t>(digits.images[0].cols()) : 28;
    auto put_be32 = [](std::ofstream& f, std::uint32_t v) {
        std::uint8_t b[4] = {static_cast<std::uint8_t>(v >> 24), static_cast<std::uint8_t>(v >> 16),
                             static_cast<std::uint8_t>(v >> 8), static_cast<std::uint8_t>(v)};
        f.write(reinterpret_cast<char*>(b), 4);
    };
    std::ofstream fi(images_path, std::ios::binary);
    put_be32(fi, 0x803);
    put_be32(fi, n);
    put_be32(fi, rows);
    put_be32(fi, cols);
    for (const auto& img : digits.images) {
        for (std::uint32_t r = 0; r < rows; ++r) {
            for (std::uint32_t c = 0; c < cols; ++c) {
                auto v = static_cast<std::uint8_t>(std::lround(std::clamp(img(r, c), 0.0, 1.0) * 255));
                fi.write(reinterpret_cast<char*>(&v), 1);
            }
        }
    }
    std::ofstream fl(labels_path, std::ios::binary);
    put_be32(fl, 0x801);
    put_be32(fl, n);
    for (int l : digits.labels) {
        auto v = static_cast<std::uint8_t>(l);
        fl.write(reinterpret_cast<char*>(&v), 1);
    }
}

RawDigits make_stub_digits(long n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<Eigen::MatrixXd> prototypes;
    std::bernoulli_distribution on(0.35);
    for (int c = 0; c < 10; ++c) {
        prototypes.push_back(
            Eigen::MatrixXd::NullaryExpr(28, 28, [&]() { return on(rng) ? 1.0 : 0.0; }));
    }
    RawDigits out;
    std::uniform_int_distribution<int> cls(0, 9);
    std::normal_distribution<double> noise(0.0, 0.25);
    for (long i = 0; i < n; ++i) {
        int c = cls(rng);
        Eigen::MatrixXd img = prototypes[c].unaryExpr(
            [&](double v) { return std::clamp(v + noise(rng), 0.0, 1.0); });
        out.images.push_back(std::move(img));
        out.labels.push_back(c);
    }
    return out;
}

std::vector<EnvDataset> make_cmnist(const RawDigits& digits, const CmnistOptions& opts) {
    if (!(opts.label_noise >= 0.0 && opts.label_noise < 1.0)) {
        throw Error("make_cmnist: label_noise out of [0,1)");
    }
    for (double e : opts.color_noise_levels) {
        if (!(e >= 0.0 && e <= 1.0)) throw Error("make_cmnist: color noise out of [0,1]");
    }
    std::mt19937_64 rng(opts.seed);
    const std::size_t n_envs = opts.color_noise_levels.size();
    const std::size_t n = digits.images.size();

    std::vector<EnvDataset> envs(n_envs);
    std::vector<std::vector<std::size_t>> idx(n_envs);
    for (std::size_t i = 0; i < n; ++i) idx[i % n_envs].push_back(i);

    for (std::size_t e = 0; e < n_envs; ++e) {
        const double color_noise = opts.color_noise_levels[e];
        EnvDataset& ds = envs[e];
        ds.tag = GeneratorTag::kCMNIST;
        ds.beta = color_noise;
        ds.env_id = "cmnist_e" + std::to_string(color_noise);
        const std::size_t ne = idx[e].size();
        ds.features.resize(ne, 2 * 14 * 14);
        ds.labels.resize(ne);
        std::bernoulli_distribution flip_label(opts.label_noise);
        std::bernoulli_distribution flip_color(color_noise);
        for (std::size_t j = 0; j < ne; ++j) {
            const Eigen::MatrixXd& img28 = digits.images[idx[e][j]];
            // 2x2 mean-pool to 14x14.
            Eigen::MatrixXd img(14, 14);
            for (int r = 0; r < 14; ++r) {
                for (int c = 0; c < 14; ++c) {
                    img(r, c) = 0.25 * (img28(2 * r, 2 * c) + img28(2 * r + 1, 2 * c) +
                                        img28(2 * r, 2 * c + 1) + img28(2 * r + 1, 2 * c + 1));
                }
            }
            int label = digits.labels[idx[e][j]] >= 5 ? 1 : 0;
            if (flip_label(rng)) label = 1 - label;
            int color = flip_color(rng) ? 1 - label : label;
            ds.features.row(j).setZero();
            // channel 0 = red (color 1), channel 1 = green (color 0).
            const int offset = color == 1 ? 0 : 14 * 14;
            for (int r = 0; r < 14; ++r) {
                for (int c = 0; c < 14; ++c) {
                    ds.features(j, offset + r * 14 + c) = img(r, c);
                }
            }
            ds.labels[j] = label;
        }
    }
    return envs;
}

double correlation_to_noise(double c) { return (1.0 - c) / 2.0; }

// ---------------------------------------------------------------------------
// Export

void export_csv(const EnvDataset& ds, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw Error("export_csv: cannot open " + path);
    for (Eigen::Index j = 0; j < ds.features.cols(); ++j) f << "x" << j << ",";
    f << "y\n";
    for (Eigen::Index i = 0; i < ds.features.rows(); ++i) {
        for (Eigen::Index j = 0; j < ds.features.cols(); ++j) f << ds.features(i, j) << ",";
        f << ds.labels[i] << "\n";
    }
}

namespace {
constexpr char kTensorMagic[4] = {'S', 'F', 'B', 'T'};
constexpr std::uint32_t kTensorVersion = 1;
}  // namespace

void export_tensor(const EnvDataset& ds, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("export_tensor: cannot open " + path);
    f.write(kTensorMagic, 4);
    auto put = [&f](const void* p, std::size_t sz) { f.write(static_cast<const char*>(p), sz); };
    put(&kTensorVersion, 4);
    std::uint8_t tag = static_cast<std::uint8_t>(ds.tag);
    put(&tag, 1);
    put(&ds.beta, 8);
    std::uint32_t id_len = static_cast<std::uint32_t>(ds.env_id.size());
    put(&id_len, 4);
    put(ds.env_id.data(), id_len);
    std::uint64_t n = ds.features.rows(), d = ds.features.cols();
    put(&n, 8);
    put(&d, 8);
    for (int l : ds.labels) {
        std::int32_t v = l;
        put(&v, 4);
    }
    for (std::uint64_t i = 0; i < n; ++i) {
        for (std::uint64_t j = 0; j < d; ++j) {
            double v = ds.features(i, j);
            put(&v, 8);
        }
    }
}

EnvDataset import_tensor(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("import_tensor: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kTensorMagic, 4) != 0) {
        throw BadMagic("import_tensor: bad magic in " + path);
    }
    auto get = [&f, &path](void* p, std::size_t sz) {
        f.read(static_cast<char*>(p), sz);
        if (!f) throw TruncatedFile("import_tensor: truncated " + path);
    };
    std::uint32_t version;
    get(&version, 4);
    if (version != kTensorVersion) throw Error("import_tensor: unsupported version");
    std::uint8_t tag;
    get(&tag, 1);
    EnvDataset ds;
    ds.tag = static_cast<GeneratorTag>(tag);
    get(&ds.beta, 8);
    std::uint32_t id_len;
    get(&id_len, 4);
    ds.env_id.resize(id_len);
    if (id_len > 0) get(ds.env_id.data(), id_len);
    std::uint64_t n, d;
    get(&n, 8);
    get(&d, 8);
    ds.labels.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        std::int32_t v;
        get(&v, 4);
        ds.labels[i] = v;
    }
    ds.features.resize(n, d);
    for (std::uint64_t i = 0; i < n; ++i) {
        for (std::uint64_t j = 0; j < d; ++j) {
            double v;
            get(&v, 8);
            ds.features(i, j) = v;
        }
    }
    return ds;
}

}  // namespace sfb
