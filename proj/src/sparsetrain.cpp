#include "s2ft/sparsetrain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "s2ft/error.hpp"
#include "s2ft/random.hpp"

namespace s2ft {

namespace {

// Position of a weight in the backward order: the pass must reach this stage.
int stage_of(WeightId id) {
    switch (id) {
        case WeightId::Q:
        case WeightId::K:
        case WeightId::V: return 0;
        case WeightId::O: return 1;
        case WeightId::Up:
        case WeightId::Gate: return 2;
        case WeightId::Down: return 3;
    }
    return 3;
}

bool contains(const std::vector<WeightId>& v, WeightId id) { return std::find(v.begin(), v.end(), id) != v.end(); }

void ffn_inner_grads(const Matrix& dH, const Matrix& U, const Matrix& G, Matrix& dU, Matrix& dG) {
    dU = Matrix(dH.rows(), dH.cols());
    dG = Matrix(dH.rows(), dH.cols());
    for (std::size_t i = 0; i < dH.rows(); ++i) {
        for (std::size_t j = 0; j < dH.cols(); ++j) {
            const double g = G(i, j);
            dU(i, j) = dH(i, j) * silu(g);
            dG(i, j) = dH(i, j) * U(i, j) * silu_grad(g);
        }
    }
}

// Backward through one attention head; dA is the head's output gradient.
void head_backward(const Matrix& P, const Matrix& Qi, const Matrix& Ki, const Matrix& Vi, const Matrix& dA, double scale,
                   Matrix& dQi, Matrix& dKi, Matrix& dVi) {
    const Matrix dP = matmul_nt(dA, Vi);
    dVi = matmul_tn(P, dA);
    Matrix dS(P.rows(), P.cols());
    for (std::size_t r = 0; r < P.rows(); ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < P.cols(); ++c) dot += dP(r, c) * P(r, c);
        for (std::size_t c = 0; c < P.cols(); ++c) dS(r, c) = P(r, c) * (dP(r, c) - dot) * scale;
    }
    dQi = matmul(dS, Ki);
    dKi = matmul_tn(dS, Qi);
}

Matrix zeros_like(const Matrix& m) { return Matrix(m.rows(), m.cols()); }

void check_finite_grad(const Matrix& g, const char* what) {
    for (double x : g.elements()) {
        if (!std::isfinite(x)) throw NumericError(std::string(what) + ": non-finite gradient, step refused");
    }
}

std::vector<TrainableRegion> full_regions(const TransformerBlockSpec& model, const TrainableProjections& proj) {
    std::vector<TrainableRegion> regions;
    for (WeightId id : proj.weights()) {
        const Matrix& w = model.weight(id);
        // Consumers train along their input axis, producers along their output axis.
        if (id == WeightId::O || id == WeightId::Down) regions.push_back({id, Axis::Cols, 0, w.cols()});
        else regions.push_back({id, Axis::Rows, 0, w.rows()});
    }
    return regions;
}

}  // namespace

// ---------------------------------------------------------------------------

Matrix& FullGradients::of(WeightId id) {
    return const_cast<Matrix&>(static_cast<const FullGradients&>(*this).of(id));
}

const Matrix& FullGradients::of(WeightId id) const {
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

void block_backward(const TransformerBlockSpec& model, const ActivationTrace& t, const Matrix& dY,
                    const std::vector<WeightId>& wanted, const BackwardHooks& hooks) {
    if (dY.rows() != t.Y.rows() || dY.cols() != t.Y.cols()) throw ShapeError("block_backward: dY shape mismatch");
    if (wanted.empty()) return;
    int min_stage = 3;
    for (WeightId id : wanted) min_stage = std::min(min_stage, stage_of(id));

    if (contains(wanted, WeightId::Down)) hooks.on_weight(WeightId::Down, dY, t.H);
    if (min_stage > 2) return;

    const Matrix dH = hooks.propagate(WeightId::Down, dY);
    Matrix dU, dG;
    ffn_inner_grads(dH, t.U, t.G, dU, dG);
    if (contains(wanted, WeightId::Up)) hooks.on_weight(WeightId::Up, dU, t.Y1);
    if (contains(wanted, WeightId::Gate)) hooks.on_weight(WeightId::Gate, dG, t.Y1);
    if (min_stage > 1) return;

    Matrix dY1 = dY;
    dY1 += hooks.propagate(WeightId::Up, dU);
    dY1 += hooks.propagate(WeightId::Gate, dG);
    if (contains(wanted, WeightId::O)) hooks.on_weight(WeightId::O, dY1, t.Attn);
    if (min_stage > 0) return;

    const Matrix dAttn = hooks.propagate(WeightId::O, dY1);
    const std::size_t n = t.X.rows();
    const std::size_t dh = model.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix dQ(n, model.d), dK(n, model.d), dV(n, model.d);
    for (std::size_t head = 0; head < model.h; ++head) {
        const std::size_t c0 = head * dh;
        Matrix dQi, dKi, dVi;
        head_backward(t.P[head], slice_cols(t.Q, c0, c0 + dh), slice_cols(t.K, c0, c0 + dh), slice_cols(t.V, c0, c0 + dh),
                      slice_cols(dAttn, c0, c0 + dh), scale, dQi, dKi, dVi);
        assign_cols(dQ, c0, dQi);
        assign_cols(dK, c0, dKi);
        assign_cols(dV, c0, dVi);
    }
    if (contains(wanted, WeightId::Q)) hooks.on_weight(WeightId::Q, dQ, t.X);
    if (contains(wanted, WeightId::K)) hooks.on_weight(WeightId::K, dK, t.X);
    if (contains(wanted, WeightId::V)) hooks.on_weight(WeightId::V, dV, t.X);
}

FullGradients full_grad_oracle(const TransformerBlockSpec& model, const Matrix& X, const Matrix& dY) {
    const ActivationTrace t = forward_block(model, X);
    FullGradients g;
    BackwardHooks hooks;
    hooks.propagate = [&](WeightId id, const Matrix& dOut) { return matmul(dOut, model.weight(id)); };
    hooks.on_weight = [&](WeightId id, const Matrix& dOut, const Matrix& in) { g.of(id) = matmul_tn(dOut, in); };
    block_backward(model, t, dY, {kAllWeights.begin(), kAllWeights.end()}, hooks);
    return g;
}

// ---------------------------------------------------------------------------

void validate_regions(const TransformerBlockSpec& model, const std::vector<TrainableRegion>& regions) {
    model.validate();
    std::vector<WeightId> seen;
    const std::size_t dh = model.head_dim();
    for (const auto& r : regions) {
        if (contains(seen, r.weight)) throw ArgumentError(std::string("two regions on ") + weight_name(r.weight));
        seen.push_back(r.weight);
        const Matrix& w = model.weight(r.weight);
        const std::size_t len = r.axis == Axis::Rows ? w.rows() : w.cols();
        if (!(r.start < r.end && r.end <= len)) {
            throw ArgumentError(std::string("region on ") + weight_name(r.weight) + " is empty or out of range");
        }
        const bool producer = r.weight != WeightId::O && r.weight != WeightId::Down;
        if ((producer && r.axis != Axis::Rows) || (!producer && r.axis != Axis::Cols)) {
            throw ArgumentError(std::string("region on ") + weight_name(r.weight) + " must run along the coupled axis");
        }
        if (stage_of(r.weight) <= 1 && (r.start % dh != 0 || r.end % dh != 0)) {
            throw ArgumentError(std::string("region on ") + weight_name(r.weight) + " is not head-aligned");
        }
    }
}

std::size_t Tape::entries() const {
    std::size_t n = 0;
    for (const auto* m : {&attn_slice, &inner_slice, &x, &y1, &u, &g})
        if (*m) n += (*m)->size();
    for (const auto* vec : {&p, &q, &kk, &v})
        for (const auto& m : *vec) n += m.size();
    return n;
}

std::size_t Tape::bytes() const { return entries() * sizeof(double); }

TapedForward forward_with_tape(const TransformerBlockSpec& model, const std::vector<TrainableRegion>& regions,
                               const Matrix& X) {
    validate_regions(model, regions);
    ActivationTrace t = forward_block(model, X);
    Tape tape;
    tape.tokens = X.rows();
    tape.d = model.d;
    tape.h = model.h;
    tape.k = model.k;
    tape.regions = regions;

    const std::size_t dh = model.head_dim();
    bool attn_path = false;
    bool full_ffn = false;
    std::size_t flo = model.k, fhi = 0;
    std::size_t hlo = model.h, hhi = 0;
    for (const auto& r : regions) {
        switch (r.weight) {
            case WeightId::Down: tape.inner_slice = slice_cols(t.H, r.start, r.end); break;
            case WeightId::Up:
            case WeightId::Gate:
                tape.y1 = t.Y1;
                flo = std::min(flo, r.start);
                fhi = std::max(fhi, r.end);
                break;
            case WeightId::O:
                tape.attn_slice = slice_cols(t.Attn, r.start, r.end);
                full_ffn = true;
                break;
            case WeightId::Q:
            case WeightId::K:
            case WeightId::V:
                attn_path = true;
                full_ffn = true;
                hlo = std::min(hlo, r.start / dh);
                hhi = std::max(hhi, r.end / dh);
                break;
        }
    }
    if (full_ffn) {
        flo = 0;
        fhi = model.k;
    }
    if (flo < fhi) {
        tape.ffn_lo = flo;
        tape.ffn_hi = fhi;
        tape.u = slice_cols(t.U, flo, fhi);
        tape.g = slice_cols(t.G, flo, fhi);
    }
    if (attn_path) {
        tape.x = t.X;
        tape.head_lo = hlo;
        tape.head_hi = hhi;
        for (std::size_t head = hlo; head < hhi; ++head) {
            const std::size_t c0 = head * dh;
            tape.p.push_back(t.P[head]);
            tape.q.push_back(slice_cols(t.Q, c0, c0 + dh));
            tape.kk.push_back(slice_cols(t.K, c0, c0 + dh));
            tape.v.push_back(slice_cols(t.V, c0, c0 + dh));
        }
    }
    return TapedForward{std::move(t.Y), std::move(tape)};
}

Matrix region_slice(const Matrix& w, const TrainableRegion& r) {
    return r.axis == Axis::Rows ? slice_rows(w, r.start, r.end) : slice_cols(w, r.start, r.end);
}

RegionGradients backward_partial(const TransformerBlockSpec& model, const Tape& tape, const Matrix& dY) {
    if (model.d != tape.d || model.h != tape.h || model.k != tape.k) throw StateError("tape was recorded for different model dims");
    if (dY.rows() != tape.tokens || dY.cols() != tape.d) throw StateError("upstream gradient does not match the taped forward");
    model.validate();

    const std::size_t dh = model.head_dim();
    RegionGradients out(tape.regions.size());
    auto region_index = [&](WeightId id) -> std::optional<std::size_t> {
        for (std::size_t i = 0; i < tape.regions.size(); ++i)
            if (tape.regions[i].weight == id) return i;
        return std::nullopt;
    };

    if (auto i = region_index(WeightId::Down)) {
        if (!tape.inner_slice) throw StateError("tape lacks the FFN inner slice");
        out[*i] = matmul_tn(dY, *tape.inner_slice);
    }
    if (!tape.u) return out;

    // FFN path, restricted to the kept channels.
    const Matrix dH = matmul(dY, slice_cols(model.Wdown, tape.ffn_lo, tape.ffn_hi));
    Matrix dU, dG;
    ffn_inner_grads(dH, *tape.u, *tape.g, dU, dG);
    for (WeightId id : {WeightId::Up, WeightId::Gate}) {
        if (auto i = region_index(id)) {
            const TrainableRegion& r = tape.regions[*i];
            const Matrix& d = id == WeightId::Up ? dU : dG;
            out[*i] = matmul_tn(slice_cols(d, r.start - tape.ffn_lo, r.end - tape.ffn_lo), *tape.y1);
        }
    }
    const auto io = region_index(WeightId::O);
    if (!io && !tape.x) return out;

    if (tape.ffn_lo != 0 || tape.ffn_hi != model.k) throw StateError("tape lacks the full FFN path");
    Matrix dY1 = dY;
    dY1 += matmul(dU, model.Wup);
    dY1 += matmul(dG, model.Wgate);
    if (io) {
        if (!tape.attn_slice) throw StateError("tape lacks the attention slice");
        out[*io] = matmul_tn(dY1, *tape.attn_slice);
    }
    if (!tape.x) return out;

    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t c_lo = tape.head_lo * dh;
    const std::size_t c_hi = tape.head_hi * dh;
    const Matrix dAttn = matmul(dY1, slice_cols(model.Wo, c_lo, c_hi));
    Matrix dQ(tape.tokens, c_hi - c_lo), dK(tape.tokens, c_hi - c_lo), dV(tape.tokens, c_hi - c_lo);
    for (std::size_t j = 0; j < tape.p.size(); ++j) {
        Matrix dQi, dKi, dVi;
        head_backward(tape.p[j], tape.q[j], tape.kk[j], tape.v[j], slice_cols(dAttn, j * dh, (j + 1) * dh), scale, dQi,
                      dKi, dVi);
        assign_cols(dQ, j * dh, dQi);
        assign_cols(dK, j * dh, dKi);
        assign_cols(dV, j * dh, dVi);
    }
    for (WeightId id : {WeightId::Q, WeightId::K, WeightId::V}) {
        if (auto i = region_index(id)) {
            const TrainableRegion& r = tape.regions[*i];
            const Matrix& d = id == WeightId::Q ? dQ : id == WeightId::K ? dK : dV;
            out[*i] = matmul_tn(slice_cols(d, r.start - c_lo, r.end - c_lo), *tape.x);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::SGD ? "sgd" : "adamw"; }

OptimizerKind parse_optimizer(std::string_view s) {
    if (s == "sgd") return OptimizerKind::SGD;
    if (s == "adamw") return OptimizerKind::AdamW;
    throw ConfigError("unknown optimizer '" + std::string(s) + "'");
}

const char* schedule_name(Schedule s) {
    switch (s) {
        case Schedule::Constant: return "constant";
        case Schedule::Linear: return "linear";
        case Schedule::Cosine: return "cosine";
    }
    return "?";
}

Schedule parse_schedule(std::string_view s) {
    for (Schedule x : {Schedule::Constant, Schedule::Linear, Schedule::Cosine})
        if (s == schedule_name(x)) return x;
    throw ConfigError("unknown schedule '" + std::string(s) + "'");
}

double OptimizerConfig::lr_at(std::size_t t) const {
    if (t < warmup_steps) return lr * static_cast<double>(t + 1) / static_cast<double>(warmup_steps);
    if (schedule == Schedule::Constant || total_steps <= warmup_steps) return lr;
    const double p = std::min(1.0, static_cast<double>(t - warmup_steps) / static_cast<double>(total_steps - warmup_steps));
    if (schedule == Schedule::Linear) return lr * (1.0 - p);
    return lr * 0.5 * (1.0 + std::cos(M_PI * p));
}

OptimizerState OptimizerState::create(const OptimizerConfig& config, const TransformerBlockSpec& model,
                                      const std::vector<TrainableRegion>& regions) {
    validate_regions(model, regions);
    OptimizerState s;
    s.config = config;
    for (const auto& r : regions) {
        RegionState rs;
        rs.region = r;
        if (config.kind == OptimizerKind::AdamW) {
            const Matrix shape = region_slice(model.weight(r.weight), r);
            rs.m = zeros_like(shape);
            rs.v = zeros_like(shape);
        }
        s.regions.push_back(std::move(rs));
    }
    return s;
}

std::size_t OptimizerState::bytes() const {
    std::size_t n = 0;
    for (const auto& r : regions) n += r.m.size() + r.v.size();
    return n * sizeof(double);
}

void optimizer_update(Matrix& param, const Matrix& grad, Matrix& m, Matrix& v, const OptimizerConfig& c,
                      std::size_t step, double lr_scale) {
    const double lr = c.lr_at(step - 1) * lr_scale;
    auto p = param.elements();
    auto g = grad.elements();
    if (c.kind == OptimizerKind::SGD) {
        for (std::size_t i = 0; i < p.size(); ++i) {
            p[i] -= lr * g[i];
            if (c.weight_decay != 0.0) p[i] -= lr * c.weight_decay * p[i];
        }
        return;
    }
    auto me = m.elements();
    auto ve = v.elements();
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < p.size(); ++i) {
        me[i] = c.beta1 * me[i] + (1.0 - c.beta1) * g[i];
        ve[i] = c.beta2 * ve[i] + (1.0 - c.beta2) * g[i] * g[i];
        const double mhat = me[i] / bc1;
        const double vhat = ve[i] / bc2;
        p[i] -= lr * (mhat / (std::sqrt(vhat) + c.eps) + c.weight_decay * p[i]);
    }
}

void step_inplace(TransformerBlockSpec& model, const std::vector<TrainableRegion>& regions, const RegionGradients& grads,
                  OptimizerState& state) {
    if (grads.size() != regions.size()) throw ArgumentError("step_inplace: one gradient per region required");
    if (state.regions.size() != regions.size()) throw StateError("optimizer state was created for other regions");
    for (std::size_t i = 0; i < regions.size(); ++i) {
        if (!(state.regions[i].region == regions[i])) throw StateError("optimizer state was created for other regions");
        const Matrix& w = model.weight(regions[i].weight);
        const std::size_t r = regions[i].axis == Axis::Rows ? regions[i].length() : w.rows();
        const std::size_t c = regions[i].axis == Axis::Rows ? w.cols() : regions[i].length();
        if (grads[i].rows() != r || grads[i].cols() != c) throw ShapeError("step_inplace: gradient shape does not match region");
        check_finite_grad(grads[i], weight_name(regions[i].weight));
    }
    state.step += 1;
    for (std::size_t i = 0; i < regions.size(); ++i) {
        const TrainableRegion& r = regions[i];
        Matrix& w = model.weight(r.weight);
        Matrix slice = region_slice(w, r);
        optimizer_update(slice, grads[i], state.regions[i].m, state.regions[i].v, state.config, state.step);
        if (r.axis == Axis::Rows) assign_rows(w, r.start, slice);
        else assign_cols(w, r.start, slice);
    }
}

// ---------------------------------------------------------------------------

Matrix LoraAdapter::delta() const {
    Matrix d = matmul_nt(U, V);
    d *= alpha;
    return d;
}

const LoraAdapter* LoraSet::find(WeightId id) const {
    for (const auto& a : adapters)
        if (a.weight == id) return &a;
    return nullptr;
}

ProjectionHook LoraSet::hook() const {
    return [this](WeightId id, const Matrix& in, Matrix& out) {
        const LoraAdapter* a = find(id);
        if (a == nullptr) return;
        Matrix side = matmul_nt(matmul(in, a->V), a->U);
        side *= a->alpha;
        out += side;
    };
}

TransformerBlockSpec LoraSet::merged(const TransformerBlockSpec& base) const {
    TransformerBlockSpec m = base;
    for (const auto& a : adapters) m.weight(a.weight) += a.delta();
    return m;
}

std::size_t LoraSet::parameter_count() const {
    std::size_t n = 0;
    for (const auto& a : adapters) n += a.U.size() + a.V.size();
    return n;
}

LoraSet init_lora(const TransformerBlockSpec& model, const std::vector<WeightId>& weights, std::size_t rank,
                  double alpha, std::uint64_t seed) {
    if (rank == 0) throw ArgumentError("LoRA rank must be positive");
    Rng rng(seed);
    LoraSet set;
    for (WeightId id : weights) {
        const Matrix& w = model.weight(id);
        if (rank > std::min(w.rows(), w.cols())) throw ArgumentError("LoRA rank exceeds weight dims");
        LoraAdapter a;
        a.weight = id;
        a.alpha = alpha;
        a.U = gaussian_matrix(w.rows(), rank, 1.0 / std::sqrt(static_cast<double>(rank)), rng);
        a.V = Matrix(w.cols(), rank);
        set.adapters.push_back(std::move(a));
    }
    return set;
}

// ---------------------------------------------------------------------------

const char* method_name(Method m) {
    switch (m) {
        case Method::S2FT: return "s2ft";
        case Method::LoRA: return "lora";
        case Method::FullFT: return "full";
        case Method::UnstructuredSparse: return "spft";
    }
    return "?";
}

Method parse_method(std::string_view s) {
    for (Method m : {Method::S2FT, Method::LoRA, Method::FullFT, Method::UnstructuredSparse})
        if (s == method_name(m)) return m;
    throw ConfigError("unknown method '" + std::string(s) + "'");
}

void Dataset::validate(std::size_t d) const {
    if (inputs.empty()) throw ArgumentError("dataset is empty");
    if (inputs.size() != targets.size()) throw ShapeError("dataset inputs and targets differ in count");
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (inputs[i].cols() != d || inputs[i].rows() == 0) throw ShapeError("dataset sequence width does not match model");
        if (targets[i].rows() != inputs[i].rows() || targets[i].cols() != d) throw ShapeError("dataset target shape mismatch");
    }
}

json dataset_to_json(const Dataset& data) {
    json j;
    j["schema_version"] = 1;
    json seqs = json::array();
    for (std::size_t i = 0; i < data.size(); ++i) {
        seqs.push_back({{"inputs", matrix_to_json(data.inputs[i])}, {"targets", matrix_to_json(data.targets[i])}});
    }
    j["sequences"] = seqs;
    return j;
}

Dataset dataset_from_json(const json& j) {
    check_schema_version(j, 1, "dataset");
    Dataset d;
    try {
        for (const auto& s : j.at("sequences")) {
            d.inputs.push_back(matrix_from_json(s.at("inputs")));
            d.targets.push_back(matrix_from_json(s.at("targets")));
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("dataset json: ") + e.what());
    }
    return d;
}

json train_config_to_json(const TrainConfig& c) {
    json j;
    j["schema_version"] = 1;
    j["method"] = method_name(c.method);
    j["epochs"] = c.epochs;
    j["batch_size"] = c.batch_size;
    j["seed"] = c.seed;
    j["shuffle"] = c.shuffle;
    j["wide"] = c.projections.wide;
    j["optimizer"] = {{"kind", optimizer_name(c.optimizer.kind)},
                      {"lr", c.optimizer.lr},
                      {"beta1", c.optimizer.beta1},
                      {"beta2", c.optimizer.beta2},
                      {"eps", c.optimizer.eps},
                      {"weight_decay", c.optimizer.weight_decay},
                      {"schedule", schedule_name(c.optimizer.schedule)},
                      {"warmup_steps", c.optimizer.warmup_steps},
                      {"total_steps", c.optimizer.total_steps}};
    j["lora"] = {{"rank", c.lora_rank},
                 {"alpha", c.lora_alpha},
                 {"lr_scale_u", c.lora_lr_scale_u},
                 {"lr_scale_v", c.lora_lr_scale_v}};
    j["sparse_ratio"] = c.sparse_ratio;
    return j;
}

TrainConfig train_config_from_json(const json& j) {
    check_schema_version(j, 1, "train config");
    TrainConfig c;
    try {
        c.method = parse_method(j.value("method", std::string("s2ft")));
        c.epochs = j.value("epochs", c.epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.seed = j.value("seed", c.seed);
        c.shuffle = j.value("shuffle", c.shuffle);
        c.projections.wide = j.value("wide", false);
        if (j.contains("optimizer")) {
            const json& o = j["optimizer"];
            c.optimizer.kind = parse_optimizer(o.value("kind", std::string("adamw")));
            c.optimizer.lr = o.value("lr", c.optimizer.lr);
            c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
            c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
            c.optimizer.eps = o.value("eps", c.optimizer.eps);
            c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
            c.optimizer.schedule = parse_schedule(o.value("schedule", std::string("constant")));
            c.optimizer.warmup_steps = o.value("warmup_steps", c.optimizer.warmup_steps);
            c.optimizer.total_steps = o.value("total_steps", c.optimizer.total_steps);
        }
        if (j.contains("lora")) {
            const json& l = j["lora"];
            c.lora_rank = l.value("rank", c.lora_rank);
            c.lora_alpha = l.value("alpha", c.lora_alpha);
            c.lora_lr_scale_u = l.value("lr_scale_u", c.lora_lr_scale_u);
            c.lora_lr_scale_v = l.value("lr_scale_v", c.lora_lr_scale_v);
        }
        c.sparse_ratio = j.value("sparse_ratio", c.sparse_ratio);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("train config: ") + e.what());
    }
    if (c.epochs == 0 || c.batch_size == 0) throw ConfigError("train config: epochs and batch_size must be positive");
    if (!(c.optimizer.lr >= 0.0)) throw ConfigError("train config: lr must be non-negative");
    if (!(c.sparse_ratio > 0.0 && c.sparse_ratio <= 1.0)) throw ConfigError("train config: sparse_ratio must lie in (0, 1]");
    return c;
}

double batch_loss(const TransformerBlockSpec& model, const Dataset& data, const std::vector<std::size_t>& batch) {
    double total = 0.0;
    for (std::size_t i : batch) total += mse_loss(forward_output(model, data.inputs[i]), data.targets[i]);
    return total / static_cast<double>(batch.size());
}

namespace {

// Shared driver: iterates epochs and batches, calls `step` with the batch
// indices, and records the returned pre-update loss.
template <typename StepFn>
void drive(const Dataset& data, const TrainConfig& config, TrainResult& result, const StepObserver& observer, StepFn step) {
    Rng rng(derive_seed(config.seed, 0x5348));
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t global = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        if (config.shuffle) {
            for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        }
        for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
            const std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(b),
                                                 order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + config.batch_size)));
            const double loss = step(batch);
            result.losses.push_back(loss);
            if (!std::isfinite(loss)) {
                result.ok = false;
                result.diagnostic = "loss became non-finite at step " + std::to_string(global);
                return;
            }
            ++global;
            if (observer) observer(global, loss, result.model);
        }
    }
}

std::size_t total_steps(const Dataset& data, const TrainConfig& c) {
    return c.epochs * ((data.size() + c.batch_size - 1) / c.batch_size);
}

}  // namespace

TrainResult train_loop(const TransformerBlockSpec& model, const Dataset& data, const TrainConfig& config,
                       const StepObserver& observer) {
    model.validate();
    data.validate(model.d);
    if (config.epochs == 0 || config.batch_size == 0) throw ConfigError("epochs and batch_size must be positive");
    TrainConfig cfg = config;
    if (cfg.optimizer.total_steps == 0) cfg.optimizer.total_steps = total_steps(data, cfg);

    TrainResult result;
    try {
        switch (cfg.method) {
            case Method::S2FT: {
                cfg.mask.validate(model);
                const auto structures = discover_coupled(build_graph(model));
                PermutationPlan plan = plan_permutation(cfg.mask, structures);
                result.model = apply_permutation(model, plan);
                result.regions = plan.trainable_ranges;
                result.plan = std::move(plan);
                OptimizerState state = OptimizerState::create(cfg.optimizer, result.model, result.regions);
                drive(data, cfg, result, observer, [&](const std::vector<std::size_t>& batch) {
                    RegionGradients acc;
                    double loss = 0.0;
                    for (std::size_t i : batch) {
                        TapedForward tf = forward_with_tape(result.model, result.regions, data.inputs[i]);
                        loss += mse_loss(tf.Y, data.targets[i]);
                        RegionGradients g = backward_partial(result.model, tf.tape, mse_grad(tf.Y, data.targets[i]));
                        if (acc.empty()) acc = std::move(g);
                        else for (std::size_t r = 0; r < g.size(); ++r) acc[r] += g[r];
                    }
                    loss /= static_cast<double>(batch.size());
                    if (!std::isfinite(loss)) return loss;
                    for (auto& g : acc) g *= 1.0 / static_cast<double>(batch.size());
                    step_inplace(result.model, result.regions, acc, state);
                    return loss;
                });
                break;
            }
            case Method::FullFT: {
                result.model = model;
                result.regions = full_regions(model, cfg.projections);
                const std::vector<WeightId> wanted = cfg.projections.weights();
                OptimizerState state = OptimizerState::create(cfg.optimizer, result.model, result.regions);
                drive(data, cfg, result, observer, [&](const std::vector<std::size_t>& batch) {
                    FullGradients acc;
                    double loss = 0.0;
                    bool first = true;
                    for (std::size_t i : batch) {
                        const ActivationTrace t = forward_block(result.model, data.inputs[i]);
                        loss += mse_loss(t.Y, data.targets[i]);
                        BackwardHooks hooks;
                        hooks.propagate = [&](WeightId id, const Matrix& dOut) { return matmul(dOut, result.model.weight(id)); };
                        hooks.on_weight = [&](WeightId id, const Matrix& dOut, const Matrix& in) {
                            Matrix g = matmul_tn(dOut, in);
                            if (first) acc.of(id) = std::move(g);
                            else acc.of(id) += g;
                        };
                        block_backward(result.model, t, mse_grad(t.Y, data.targets[i]), wanted, hooks);
                        first = false;
                    }
                    loss /= static_cast<double>(batch.size());
                    if (!std::isfinite(loss)) return loss;
                    RegionGradients grads;
                    for (const auto& r : result.regions) {
                        Matrix g = acc.of(r.weight);
                        g *= 1.0 / static_cast<double>(batch.size());
                        grads.push_back(std::move(g));
                    }
                    step_inplace(result.model, result.regions, grads, state);
                    return loss;
                });
                break;
            }
            case Method::UnstructuredSparse: {
                result.model = model;
                const std::vector<WeightId> wanted = cfg.projections.weights();
                Rng rng(derive_seed(cfg.seed, 0x5350));
                struct Entry {
                    WeightId id;
                    std::vector<std::size_t> idx;
                    Matrix m, v;
                };
                std::vector<Entry> entries;
                for (WeightId id : wanted) {
                    const Matrix& w = model.weight(id);
                    const auto count = static_cast<std::size_t>(std::llround(cfg.sparse_ratio * static_cast<double>(w.size())));
                    Entry e{id, rng.sample_without_replacement(w.size(), count), Matrix(), Matrix()};
                    Matrix mask(w.rows(), w.cols());
                    for (std::size_t i : e.idx) mask.elements()[i] = 1.0;
                    result.sparse_masks.emplace(id, std::move(mask));
                    if (cfg.optimizer.kind == OptimizerKind::AdamW) {
                        e.m = Matrix(1, e.idx.size());
                        e.v = Matrix(1, e.idx.size());
                    }
                    entries.push_back(std::move(e));
                }
                std::size_t step_no = 0;
                drive(data, cfg, result, observer, [&](const std::vector<std::size_t>& batch) {
                    FullGradients acc;
                    double loss = 0.0;
                    bool first = true;
                    for (std::size_t i : batch) {
                        const ActivationTrace t = forward_block(result.model, data.inputs[i]);
                        loss += mse_loss(t.Y, data.targets[i]);
                        BackwardHooks hooks;
                        hooks.propagate = [&](WeightId id, const Matrix& dOut) { return matmul(dOut, result.model.weight(id)); };
                        hooks.on_weight = [&](WeightId id, const Matrix& dOut, const Matrix& in) {
                            Matrix g = matmul_tn(dOut, in);
                            if (first) acc.of(id) = std::move(g);
                            else acc.of(id) += g;
                        };
                        block_backward(result.model, t, mse_grad(t.Y, data.targets[i]), wanted, hooks);
                        first = false;
                    }
                    loss /= static_cast<double>(batch.size());
                    if (!std::isfinite(loss)) return loss;
                    for (const auto& e : entries) check_finite_grad(acc.of(e.id), weight_name(e.id));
                    ++step_no;
                    for (auto& e : entries) {
                        auto w = result.model.weight(e.id).elements();
                        const auto g = acc.of(e.id).elements();
                        Matrix p(1, e.idx.size()), gm(1, e.idx.size());
                        for (std::size_t t = 0; t < e.idx.size(); ++t) {
                            p.elements()[t] = w[e.idx[t]];
                            gm.elements()[t] = g[e.idx[t]] / static_cast<double>(batch.size());
                        }
                        optimizer_update(p, gm, e.m, e.v, cfg.optimizer, step_no);
                        for (std::size_t t = 0; t < e.idx.size(); ++t) w[e.idx[t]] = p.elements()[t];
                    }
                    return loss;
                });
                break;
            }
            case Method::LoRA: {
                result.model = model;
                LoraSet lora = init_lora(model, cfg.projections.weights(), cfg.lora_rank, cfg.lora_alpha, cfg.seed);
                std::vector<WeightId> wanted;
                for (const auto& a : lora.adapters) wanted.push_back(a.weight);
                std::vector<Matrix> mu, vu, mv, vv;
                for (const auto& a : lora.adapters) {
                    mu.push_back(zeros_like(a.U));
                    vu.push_back(zeros_like(a.U));
                    mv.push_back(zeros_like(a.V));
                    vv.push_back(zeros_like(a.V));
                }
                std::size_t step_no = 0;
                drive(data, cfg, result, observer, [&](const std::vector<std::size_t>& batch) {
                    std::vector<Matrix> gU, gV;
                    for (const auto& a : lora.adapters) {
                        gU.push_back(zeros_like(a.U));
                        gV.push_back(zeros_like(a.V));
                    }
                    double loss = 0.0;
                    const ProjectionHook hook = lora.hook();
                    for (std::size_t i : batch) {
                        const ActivationTrace t = forward_block(result.model, data.inputs[i], hook);
                        loss += mse_loss(t.Y, data.targets[i]);
                        BackwardHooks hooks;
                        hooks.propagate = [&](WeightId id, const Matrix& dOut) {
                            Matrix dIn = matmul(dOut, result.model.weight(id));
                            if (const LoraAdapter* a = lora.find(id)) {
                                Matrix side = matmul_nt(matmul(dOut, a->U), a->V);
                                side *= a->alpha;
                                dIn += side;
                            }
                            return dIn;
                        };
                        hooks.on_weight = [&](WeightId id, const Matrix& dOut, const Matrix& in) {
                            for (std::size_t a = 0; a < lora.adapters.size(); ++a) {
                                const LoraAdapter& ad = lora.adapters[a];
                                if (ad.weight != id) continue;
                                Matrix du = matmul_tn(dOut, matmul(in, ad.V));
                                Matrix dv = matmul_tn(in, matmul(dOut, ad.U));
                                du *= ad.alpha;
                                dv *= ad.alpha;
                                gU[a] += du;
                                gV[a] += dv;
                            }
                        };
                        block_backward(result.model, t, mse_grad(t.Y, data.targets[i]), wanted, hooks);
                    }
                    loss /= static_cast<double>(batch.size());
                    if (!std::isfinite(loss)) return loss;
                    for (std::size_t a = 0; a < lora.adapters.size(); ++a) {
                        gU[a] *= 1.0 / static_cast<double>(batch.size());
                        gV[a] *= 1.0 / static_cast<double>(batch.size());
                        check_finite_grad(gU[a], "lora U");
                        check_finite_grad(gV[a], "lora V");
                    }
                    ++step_no;
                    for (std::size_t a = 0; a < lora.adapters.size(); ++a) {
                        optimizer_update(lora.adapters[a].U, gU[a], mu[a], vu[a], cfg.optimizer, step_no, cfg.lora_lr_scale_u);
                        optimizer_update(lora.adapters[a].V, gV[a], mv[a], vv[a], cfg.optimizer, step_no, cfg.lora_lr_scale_v);
                    }
                    return loss;
                });
                result.lora = std::move(lora);
                break;
            }
        }
    } catch (const NumericError& e) {
        result.ok = false;
        result.diagnostic = e.what();
    }
    return result;
}

// ---------------------------------------------------------------------------

std::size_t lora_rank_for_budget(const TransformerBlockSpec& model, const std::vector<WeightId>& weights,
                                 std::size_t budget) {
    std::size_t per_rank = 0;
    for (WeightId id : weights) per_rank += model.weight(id).rows() + model.weight(id).cols();
    return per_rank == 0 ? 0 : budget / per_rank;
}

AccountingReport accounting(const TransformerBlockSpec& model, const AccountingInput& in) {
    model.validate();
    const std::size_t n = in.tokens, d = model.d, k = model.k, dh = model.head_dim();
    const std::vector<WeightId> proj = in.projections.weights();
    auto din = [&](WeightId id) { return model.weight(id).cols(); };
    auto dout = [&](WeightId id) { return model.weight(id).rows(); };

    AccountingReport r;
    // Base forward: seven projections plus scores and mixing for every head.
    std::size_t fwd = 0;
    for (WeightId id : kAllWeights) fwd += 2 * n * din(id) * dout(id);
    fwd += 4 * n * n * d;
    r.fwd_flops = fwd;

    int min_stage = 3;
    for (WeightId id : proj) min_stage = std::min(min_stage, stage_of(id));

    // Extent of the trained slots per side. Full-width for everything but S2FT.
    const bool s2ft = in.method == Method::S2FT;
    if (s2ft && (in.heads > model.h || in.channels > model.k)) throw ArgumentError("accounting: selection exceeds model");
    const std::size_t m = s2ft ? in.heads * dh : d;  // trained attention columns
    const std::size_t c = s2ft ? in.channels : k;    // trained FFN channels
    auto trains = [&](WeightId id) {
        if (!contains(proj, id)) return false;
        if (!s2ft) return true;
        return stage_of(id) <= 1 ? m > 0 : c > 0;
    };
    int stage = 3 + 1;  // earliest stage that actually trains
    for (WeightId id : proj)
        if (trains(id)) stage = std::min(stage, stage_of(id));

    std::size_t bwd = 0;
    std::size_t taped = 0;
    std::size_t trainable = 0;
    const std::size_t r_lora = in.method == Method::LoRA ? in.rank : 0;
    auto lora_on = [&](WeightId id) { return r_lora > 0 && contains(proj, id); };
    auto lora_prop = [&](WeightId id) { return lora_on(id) ? 2 * n * dout(id) * r_lora + 2 * n * r_lora * din(id) : 0; };

    // Propagation through frozen or adapted projections.
    if (stage <= 2) {
        // S2FT with only Up/Gate trained needs dH for the trained channels only.
        const std::size_t cols = (s2ft && stage == 2) ? c : k;
        bwd += 2 * n * d * cols + lora_prop(WeightId::Down);
    }
    if (stage <= 1) bwd += 2 * (2 * n * k * d) + lora_prop(WeightId::Up) + lora_prop(WeightId::Gate);
    if (stage == 0) {
        bwd += 2 * n * d * m + lora_prop(WeightId::O);
        bwd += 8 * n * n * m;
    }

    switch (in.method) {
        case Method::S2FT:
        case Method::FullFT:
        case Method::UnstructuredSparse: {
            for (WeightId id : proj) {
                if (!trains(id)) continue;
                const std::size_t len = stage_of(id) <= 1 ? m : c;
                const std::size_t other = (id == WeightId::O || id == WeightId::Down) ? dout(id) : din(id);
                bwd += 2 * n * len * other;
                trainable += len * other;
            }
            // Tape: input slices, then path tensors, mirroring forward_with_tape.
            if (trains(WeightId::Down)) taped += n * c;
            if (trains(WeightId::O)) taped += n * m;
            if (trains(WeightId::Up) || trains(WeightId::Gate)) taped += n * d;
            if (stage <= 1) taped += 2 * n * k;
            else if (stage == 2) taped += 2 * n * c;
            if (stage == 0) taped += n * d + (m / dh) * (n * n + 3 * n * dh);
            if (in.method == Method::UnstructuredSparse) {
                trainable = 0;
                for (WeightId id : proj) {
                    trainable += static_cast<std::size_t>(std::llround(in.sparse_ratio * static_cast<double>(model.weight(id).size())));
                }
            }
            break;
        }
        case Method::LoRA: {
            if (r_lora == 0) throw ArgumentError("accounting: LoRA needs a positive rank");
            for (WeightId id : proj) {
                r.fwd_flops += 2 * n * din(id) * r_lora + 2 * n * r_lora * dout(id);
                bwd += 4 * n * r_lora * (din(id) + dout(id));
                trainable += r_lora * (din(id) + dout(id));
                taped += n * din(id) + n * r_lora;
            }
            if (stage <= 1) taped += 2 * n * k;
            else if (stage == 2) taped += 2 * n * k;
            if (stage == 0) taped += n * d + model.h * (n * n + 3 * n * dh);
            break;
        }
    }
    r.bwd_flops = bwd;
    r.trainable_params = trainable;
    r.taped_bytes = taped * sizeof(double);
    r.optimizer_bytes = in.optimizer == OptimizerKind::AdamW ? 2 * trainable * sizeof(double) : 0;
    return r;
}

json accounting_to_json(const AccountingReport& r) {
    return json{{"trainable_params", r.trainable_params},
                {"fwd_flops", r.fwd_flops},
                {"bwd_flops", r.bwd_flops},
                {"step_flops", r.step_flops()},
                {"taped_bytes", r.taped_bytes},
                {"optimizer_bytes", r.optimizer_bytes}};
}

}  // namespace s2ft
