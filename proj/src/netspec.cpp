#include "s2ft/netspec.hpp"

#include <algorithm>
#include <cmath>

#include "s2ft/error.hpp"
#include "s2ft/io.hpp"
#include "s2ft/random.hpp"

namespace s2ft {

namespace {

constexpr std::string_view kCheckpointMagic = "S2FTCKPT";

void require_shape(const Matrix& m, std::size_t r, std::size_t c, WeightId id) {
    if (m.rows() != r || m.cols() != c) {
        throw ShapeError(std::string(weight_name(id)) + " is " + std::to_string(m.rows()) + "x" +
                         std::to_string(m.cols()) + ", expected " + std::to_string(r) + "x" + std::to_string(c));
    }
}

}  // namespace

const char* weight_name(WeightId id) {
    switch (id) {
        case WeightId::Q: return "Wq";
        case WeightId::K: return "Wk";
        case WeightId::V: return "Wv";
        case WeightId::O: return "Wo";
        case WeightId::Up: return "Wup";
        case WeightId::Gate: return "Wgate";
        case WeightId::Down: return "Wdown";
    }
    return "?";
}

WeightId parse_weight(std::string_view name) {
    for (WeightId id : kAllWeights)
        if (name == weight_name(id)) return id;
    throw ArgumentError("unknown weight '" + std::string(name) + "'");
}

Matrix& TransformerBlockSpec::weight(WeightId id) {
    return const_cast<Matrix&>(static_cast<const TransformerBlockSpec&>(*this).weight(id));
}

const Matrix& TransformerBlockSpec::weight(WeightId id) const {
    switch (id) {
        case WeightId::Q: return Wq;
        case WeightId::K: return Wk;
        case WeightId::V: return Wv;
        case WeightId::O: return Wo;
        case WeightId::Up: return Wup;
        case WeightId::Gate: return Wgate;
        case WeightId::Down: return Wdown;
    }
    throw ArgumentError("bad weight id");
}

void TransformerBlockSpec::validate() const {
    if (d == 0 || h == 0 || k == 0) throw ConfigError("block dims must be positive");
    if (d % h != 0) throw ConfigError("d=" + std::to_string(d) + " is not divisible by h=" + std::to_string(h));
    for (WeightId id : {WeightId::Q, WeightId::K, WeightId::V, WeightId::O}) require_shape(weight(id), d, d, id);
    require_shape(Wup, k, d, WeightId::Up);
    require_shape(Wgate, k, d, WeightId::Gate);
    require_shape(Wdown, d, k, WeightId::Down);
}

std::size_t TransformerBlockSpec::parameter_count() const { return 4 * d * d + 3 * k * d; }

void DeepLinearNet::validate() const {
    if (dims.size() < 2 || layers.size() + 1 != dims.size()) throw ConfigError("deep linear net needs L >= 1 layers");
    for (std::size_t l = 1; l <= layers.size(); ++l) {
        const Matrix& w = layer(l);
        if (w.rows() != dims[l] || w.cols() != dims[l - 1]) {
            throw ShapeError("layer " + std::to_string(l) + " does not chain with dims");
        }
    }
}

TransformerBlockSpec init_block(const BlockConfig& config) {
    if (config.d == 0 || config.h == 0 || config.k == 0) throw ConfigError("block dims must be positive");
    if (config.d % config.h != 0) {
        throw ConfigError("d=" + std::to_string(config.d) + " is not divisible by h=" + std::to_string(config.h));
    }
    Rng rng(config.seed);
    const double sd = 1.0 / std::sqrt(static_cast<double>(config.d));
    const double sk = 1.0 / std::sqrt(static_cast<double>(config.k));
    TransformerBlockSpec s;
    s.d = config.d;
    s.h = config.h;
    s.k = config.k;
    s.causal = config.causal;
    s.Wq = gaussian_matrix(s.d, s.d, sd, rng);
    s.Wk = gaussian_matrix(s.d, s.d, sd, rng);
    s.Wv = gaussian_matrix(s.d, s.d, sd, rng);
    s.Wo = gaussian_matrix(s.d, s.d, sd, rng);
    s.Wup = gaussian_matrix(s.k, s.d, sd, rng);
    s.Wgate = gaussian_matrix(s.k, s.d, sd, rng);
    s.Wdown = gaussian_matrix(s.d, s.k, sk, rng);
    return s;
}

DeepLinearNet init_linear_net(const std::vector<std::size_t>& dims, std::uint64_t seed) {
    if (dims.size() < 2) throw ConfigError("deep linear net needs at least two dims");
    for (std::size_t v : dims)
        if (v == 0) throw ConfigError("deep linear net dims must be positive");
    Rng rng(seed);
    DeepLinearNet net;
    net.dims = dims;
    for (std::size_t l = 1; l < dims.size(); ++l) {
        net.layers.push_back(gaussian_matrix(dims[l], dims[l - 1], 1.0 / std::sqrt(static_cast<double>(dims[l - 1])), rng));
    }
    return net;
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

double silu_grad(double x) {
    const double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}

Matrix softmax_rows(const Matrix& scores) {
    Matrix p(scores.rows(), scores.cols());
    for (std::size_t i = 0; i < scores.rows(); ++i) {
        auto in = scores.row(i);
        auto out = p.row(i);
        double mx = -INFINITY;
        for (double x : in) mx = std::max(mx, x);
        double sum = 0.0;
        for (std::size_t j = 0; j < in.size(); ++j) {
            out[j] = in[j] == -INFINITY ? 0.0 : std::exp(in[j] - mx);
            sum += out[j];
        }
        for (double& x : out) x /= sum;
    }
    return p;
}

ActivationTrace forward_block(const TransformerBlockSpec& spec, const Matrix& X) { return forward_block(spec, X, nullptr); }

ActivationTrace forward_block(const TransformerBlockSpec& spec, const Matrix& X, const ProjectionHook& hook) {
    spec.validate();
    if (X.cols() != spec.d) {
        throw ShapeError("forward_block: input has " + std::to_string(X.cols()) + " columns, model d=" + std::to_string(spec.d));
    }
    const std::size_t n = X.rows();
    const std::size_t dh = spec.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    ActivationTrace t;
    t.X = X;
    auto project = [&](WeightId id, const Matrix& in) {
        Matrix out = matmul_nt(in, spec.weight(id));
        if (hook) hook(id, in, out);
        return out;
    };
    t.Q = project(WeightId::Q, X);
    t.K = project(WeightId::K, X);
    t.V = project(WeightId::V, X);
    t.Attn = Matrix(n, spec.d);
    t.P.reserve(spec.h);
    for (std::size_t head = 0; head < spec.h; ++head) {
        const std::size_t c0 = head * dh;
        const Matrix qi = slice_cols(t.Q, c0, c0 + dh);
        const Matrix ki = slice_cols(t.K, c0, c0 + dh);
        const Matrix vi = slice_cols(t.V, c0, c0 + dh);
        Matrix scores = matmul_nt(qi, ki);
        scores *= scale;
        if (spec.causal) {
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = i + 1; j < n; ++j) scores(i, j) = -INFINITY;
        }
        t.P.push_back(softmax_rows(scores));
        assign_cols(t.Attn, c0, matmul(t.P.back(), vi));
    }
    t.Y1 = X + project(WeightId::O, t.Attn);
    t.U = project(WeightId::Up, t.Y1);
    t.G = project(WeightId::Gate, t.Y1);
    t.H = Matrix(n, spec.k);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < spec.k; ++j) t.H(i, j) = t.U(i, j) * silu(t.G(i, j));
    t.Y = t.Y1 + project(WeightId::Down, t.H);
    t.Y.check_finite("forward_block output");
    return t;
}

Matrix forward_output(const TransformerBlockSpec& spec, const Matrix& X) { return forward_block(spec, X).Y; }

std::vector<double> forward_linear_chain(const DeepLinearNet& net, std::span<const double> x) {
    net.validate();
    if (x.size() != net.input_dim()) {
        throw ShapeError("forward_linear_chain: input length " + std::to_string(x.size()) + ", expected " +
                         std::to_string(net.input_dim()));
    }
    std::vector<double> v(x.begin(), x.end());
    for (const Matrix& w : net.layers) v = matvec(w, v);
    return v;
}

Matrix chain_product(const DeepLinearNet& net, std::size_t lo, std::size_t hi) {
    if (hi < lo) {
        // Empty product: identity on the space between layers hi and lo.
        return Matrix::identity(net.dims.at(hi));
    }
    if (lo < 1 || hi > net.depth()) throw ArgumentError("chain_product: layer range out of bounds");
    Matrix p = net.layer(lo);
    for (std::size_t l = lo + 1; l <= hi; ++l) p = matmul(net.layer(l), p);
    return p;
}

void save_checkpoint(const TransformerBlockSpec& spec, const std::string& path, std::uint64_t seed) {
    spec.validate();
    BinaryWriter w;
    w.bytes(kCheckpointMagic);
    w.u32(kCheckpointVersion);
    w.u32(spec.causal ? 1u : 0u);
    w.u64(spec.d);
    w.u64(spec.h);
    w.u64(spec.k);
    for (WeightId id : kAllWeights) w.matrix(spec.weight(id));
    w.save(path);

    json side;
    side["schema_version"] = 1;
    side["format"] = "s2ft-checkpoint";
    side["d"] = spec.d;
    side["h"] = spec.h;
    side["k"] = spec.k;
    side["head_dim"] = spec.head_dim();
    side["causal"] = spec.causal;
    side["seed"] = seed;
    side["weight_order"] = {"Wq", "Wk", "Wv", "Wo", "Wup", "Wgate", "Wdown"};
    write_json_file(path + ".json", side);
}

TransformerBlockSpec load_checkpoint(const std::string& path) {
    BinaryReader r = BinaryReader::from_file(path);
    r.expect_magic(kCheckpointMagic);
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) throw FormatError("checkpoint version " + std::to_string(version) + " unsupported");
    const std::uint32_t flags = r.u32();
    TransformerBlockSpec s;
    s.causal = (flags & 1u) != 0;
    s.d = r.u64();
    s.h = r.u64();
    s.k = r.u64();
    if (s.d == 0 || s.h == 0 || s.k == 0 || s.d > 4096 || s.k > 16384) throw FormatError("checkpoint dims implausible");
    s.Wq = r.matrix(s.d, s.d);
    s.Wk = r.matrix(s.d, s.d);
    s.Wv = r.matrix(s.d, s.d);
    s.Wo = r.matrix(s.d, s.d);
    s.Wup = r.matrix(s.k, s.d);
    s.Wgate = r.matrix(s.k, s.d);
    s.Wdown = r.matrix(s.d, s.k);
    if (!r.at_end()) throw FormatError("checkpoint has trailing bytes");
    s.validate();
    return s;
}

}  // namespace s2ft
