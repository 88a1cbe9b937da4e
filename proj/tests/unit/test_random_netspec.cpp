#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "s2ft/error.hpp"
#include "s2ft/netspec.hpp"
#include "s2ft/random.hpp"

using namespace s2ft;

TEST_CASE("xoshiro256** stream matches reference values") {
    // Values from a separate big-integer implementation of splitmix64 seeding
    // and xoshiro256**, seed 42.
    const std::uint64_t expected[] = {0x15780b2e0c2ec716ULL, 0x6104d9866d113a7eULL, 0xae17533239e499a1ULL,
                                      0xecb8ad4703b360a1ULL, 0xfde6dc7fe2ec5e64ULL, 0xc50da53101795238ULL};
    Rng rng(42);
    for (std::uint64_t e : expected) CHECK(rng.next_u64() == e);
}

TEST_CASE("rng draws: uniform range, normal moments, sampling") {
    Rng rng(7);
    double sum = 0.0, sq = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        const double z = rng.normal();
        sum += z;
        sq += z * z;
    }
    CHECK(std::abs(sum / n) < 4.0 / std::sqrt(n));
    CHECK(std::abs(sq / n - 1.0) < 4.0 * std::sqrt(2.0 / n));

    std::vector<int> counts(6, 0);
    for (int i = 0; i < 60000; ++i) ++counts[rng.below(6)];
    for (int c : counts) CHECK(std::abs(c - 10000) < 400);
    CHECK_THROWS_AS(rng.below(0), ArgumentError);

    const auto s = rng.sample_without_replacement(20, 8);
    CHECK(s.size() == 8);
    CHECK(std::is_sorted(s.begin(), s.end()));
    CHECK(std::set<std::size_t>(s.begin(), s.end()).size() == 8);
    CHECK_THROWS_AS(rng.sample_without_replacement(3, 4), ArgumentError);
}

TEST_CASE("derived seeds give distinct reproducible streams") {
    CHECK(derive_seed(7, 0) == derive_seed(7, 0));
    std::set<std::uint64_t> seen;
    for (std::uint64_t t = 0; t < 1000; ++t) seen.insert(derive_seed(7, t));
    CHECK(seen.size() == 1000);
    Rng a(derive_seed(1, 2)), b(derive_seed(1, 2));
    for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
}

namespace {

// Token-by-token reference forward written directly from the block definition.
Matrix reference_forward(const TransformerBlockSpec& m, const Matrix& X) {
    const std::size_t n = X.rows(), d = m.d, dh = m.head_dim(), k = m.k;
    auto proj = [&](const Matrix& W, const std::vector<double>& x) {
        std::vector<double> y(W.rows(), 0.0);
        for (std::size_t i = 0; i < W.rows(); ++i)
            for (std::size_t j = 0; j < W.cols(); ++j) y[i] += W(i, j) * x[j];
        return y;
    };
    std::vector<std::vector<double>> q(n), kk(n), v(n);
    for (std::size_t t = 0; t < n; ++t) {
        std::vector<double> x(X.row(t).begin(), X.row(t).end());
        q[t] = proj(m.Wq, x);
        kk[t] = proj(m.Wk, x);
        v[t] = proj(m.Wv, x);
    }
    Matrix Y(n, d);
    for (std::size_t t = 0; t < n; ++t) {
        std::vector<double> attn(d, 0.0);
        for (std::size_t h = 0; h < m.h; ++h) {
            const std::size_t last = m.causal ? t + 1 : n;
            std::vector<double> w(last);
            double mx = -INFINITY;
            for (std::size_t s = 0; s < last; ++s) {
                double dot = 0.0;
                for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) dot += q[t][c] * kk[s][c];
                w[s] = dot / std::sqrt(static_cast<double>(dh));
                mx = std::max(mx, w[s]);
            }
            double z = 0.0;
            for (double& x : w) z += (x = std::exp(x - mx));
            for (std::size_t s = 0; s < last; ++s)
                for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) attn[c] += w[s] / z * v[s][c];
        }
        std::vector<double> y1 = proj(m.Wo, attn);
        for (std::size_t c = 0; c < d; ++c) y1[c] += X(t, c);
        const auto u = proj(m.Wup, y1), g = proj(m.Wgate, y1);
        std::vector<double> hid(k);
        for (std::size_t j = 0; j < k; ++j) hid[j] = u[j] * g[j] / (1.0 + std::exp(-g[j]));
        const auto down = proj(m.Wdown, hid);
        for (std::size_t c = 0; c < d; ++c) Y(t, c) = y1[c] + down[c];
    }
    return Y;
}

}  // namespace

TEST_CASE("block forward matches a per-token reference") {
    for (bool causal : {false, true}) {
        const TransformerBlockSpec m = init_block({8, 2, 12, causal, 3});
        Rng rng(11);
        const Matrix X = gaussian_matrix(5, 8, 1.0, rng);
        CHECK(max_abs_diff(forward_output(m, X), reference_forward(m, X)) < 1e-12);
    }
}

TEST_CASE("silu and its derivative") {
    for (double x : {-3.0, -0.5, 0.0, 0.7, 4.0}) {
        CHECK(silu(x) == doctest::Approx(x / (1.0 + std::exp(-x))).epsilon(1e-14));
        const double fd = (silu(x + 1e-6) - silu(x - 1e-6)) / 2e-6;
        CHECK(silu_grad(x) == doctest::Approx(fd).epsilon(1e-8));
    }
}

TEST_CASE("softmax rows is stable for large scores") {
    Matrix s = Matrix::from_rows({{1000.0, 1000.0}, {0.0, 0.0}});
    s(1, 0) = -INFINITY;  // masked entry
    const Matrix p = softmax_rows(s);
    CHECK(p(0, 0) == doctest::Approx(0.5));
    CHECK(p(1, 0) == 0.0);
    CHECK(p(1, 1) == 1.0);
}

TEST_CASE("init and validation") {
    const TransformerBlockSpec m = init_block({16, 4, 32, false, 9});
    CHECK(m.parameter_count() == 4 * 16 * 16 + 3 * 16 * 32);
    CHECK(bit_equal(init_block({16, 4, 32, false, 9}).Wdown, m.Wdown));
    CHECK_FALSE(bit_equal(init_block({16, 4, 32, false, 10}).Wdown, m.Wdown));
    CHECK_THROWS_AS(init_block({10, 4, 8, false, 0}), ConfigError);
    TransformerBlockSpec bad = m;
    bad.Wup = Matrix(31, 16);
    CHECK_THROWS_AS(bad.validate(), ShapeError);
    CHECK(parse_weight(weight_name(WeightId::Gate)) == WeightId::Gate);
}

TEST_CASE("checkpoint round trip and corruption") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "s2ft_ckpt_test";
    fs::create_directories(dir);
    const std::string path = (dir / "m.ckpt").string();
    const TransformerBlockSpec m = init_block({8, 2, 16, true, 4});
    save_checkpoint(m, path, 4);
    const TransformerBlockSpec r = load_checkpoint(path);
    CHECK(r.causal);
    for (WeightId id : kAllWeights) CHECK(bit_equal(r.weight(id), m.weight(id)));
    {
        std::ofstream f(path, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(0);
        f.write("XXXX", 4);
    }
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    save_checkpoint(m, path, 4);
    fs::resize_file(path, fs::file_size(path) - 8);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    fs::remove_all(dir);
}

TEST_CASE("deep linear chain products") {
    const DeepLinearNet net = init_linear_net({3, 4, 5, 2}, 1);
    const Matrix full = chain_product(net, 1, 3);
    CHECK(full.rows() == 2);
    CHECK(full.cols() == 3);
    CHECK(max_abs_diff(full, matmul(net.layer(3), matmul(net.layer(2), net.layer(1)))) < 1e-14);
    CHECK(bit_equal(chain_product(net, 3, 2), Matrix::identity(5)));
    const std::vector<double> x{1.0, -2.0, 0.5};
    const auto y = forward_linear_chain(net, x);
    const auto ref = matvec(full, x);
    for (std::size_t i = 0; i < 2; ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-13));
}
