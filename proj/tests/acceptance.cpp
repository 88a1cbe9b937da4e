// Acceptance checks: one PASS/FAIL line per criterion, nonzero exit if any fails.
#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "s2ft/adapter.hpp"
#include "s2ft/error.hpp"
#include "s2ft/harness.hpp"
#include "s2ft/permute.hpp"
#include "s2ft/random.hpp"
#include "s2ft/sparsetrain.hpp"
#include "s2ft/theory.hpp"

using namespace s2ft;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;

    void require(bool cond, const std::string& why) {
        if (!cond && pass) {
            pass = false;
            detail = why;
        }
    }
};

std::string fmt(const char* f, double a) {
    char buf[96];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

bool same_bits(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j)
            if (std::bit_cast<std::uint64_t>(a(i, j)) != std::bit_cast<std::uint64_t>(b(i, j))) return false;
    return true;
}

SelectionMask random_mask(const TransformerBlockSpec& m, Rng& rng) {
    SelectionMask mask;
    mask.mha_heads = rng.sample_without_replacement(m.h, 1 + rng.below(m.h - 1));
    mask.ffn_channels = rng.sample_without_replacement(m.k, 1 + rng.below(m.k / 2));
    return mask;
}

bool is_identity(const PermutationPlan& plan) {
    return std::all_of(plan.structures.begin(), plan.structures.end(),
                       [](const StructurePermutation& s) { return s.slots.is_identity(); });
}

// 1 -------------------------------------------------------------------------
Outcome permutation_invariance() {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0.0;
    std::size_t negatives = 0;
    for (std::uint64_t i = 0; i < 50; ++i) {
        const TransformerBlockSpec m = init_block({64, 8, 128, i % 2 == 1, derive_seed(1, i)});
        Rng rng(derive_seed(2, i));
        const SelectionMask mask = random_mask(m, rng);
        const PermutationPlan plan = plan_permutation(mask, discover_coupled(build_graph(m)));
        const Matrix X = gaussian_matrix(16, 64, 1.0, rng);
        const InvarianceReport r = verify_output_invariance(m, apply_permutation(m, plan), X, 1e-10);
        worst = std::max(worst, r.max_abs_diff);
        o.require(r.pass, "pair " + std::to_string(i) + " differs by " + fmt("%.3g", r.max_abs_diff));
        if (!is_identity(plan)) {
            ++negatives;
            const InvarianceReport bad =
                verify_output_invariance(m, apply_permutation(m, plan, PermuteSides::ProducersOnly), X, 1e-10);
            o.require(!bad.pass, "one-sided permutation of pair " + std::to_string(i) + " passed the check");
        }
    }
    const double secs = seconds_since(t0);
    o.require(negatives > 0, "no non-trivial permutation was generated");
    o.require(secs < 5.0, "took " + fmt("%.2f s", secs));
    if (o.pass)
        o.detail = "50 pairs, max diff " + fmt("%.2e", worst) + ", " + std::to_string(negatives) +
                   " one-sided controls rejected, " + fmt("%.2f s", secs);
    return o;
}

// 2 -------------------------------------------------------------------------
Outcome partial_backprop() {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    double worst_slice = 0.0, worst_fd = 0.0;
    std::size_t probes = 0;
    for (std::uint64_t i = 0; i < 4; ++i) {
        const TransformerBlockSpec m = init_block({64, 8, 128, i % 2 == 0, derive_seed(3, i)});
        Rng rng(derive_seed(4, i));
        SelectionMask mask = random_mask(m, rng);
        mask.wide = i >= 2;
        const PermutationPlan plan = plan_permutation(mask, discover_coupled(build_graph(m)));
        const TransformerBlockSpec p = apply_permutation(m, plan);
        const Matrix X = gaussian_matrix(12, 64, 1.0, rng);
        const Matrix T = gaussian_matrix(12, 64, 1.0, rng);
        const TapedForward tf = forward_with_tape(p, plan.trainable_ranges, X);
        const Matrix dY = mse_grad(tf.Y, T);
        const RegionGradients g = backward_partial(p, tf.tape, dY);
        const FullGradients full = full_grad_oracle(p, X, dY);
        for (std::size_t r = 0; r < g.size(); ++r) {
            const TrainableRegion& reg = plan.trainable_ranges[r];
            const double e = relative_error(g[r], region_slice(full.of(reg.weight), reg));
            worst_slice = std::max(worst_slice, e);
            o.require(e <= 1e-10, "slice mismatch " + fmt("%.3g", e) + " on " + weight_name(reg.weight));
        }
        // 25 central-difference probes per instance, drawn across the regions.
        for (int k = 0; k < 25; ++k, ++probes) {
            const std::size_t r = rng.below(g.size());
            const TrainableRegion& reg = plan.trainable_ranges[r];
            const std::size_t a = rng.below(g[r].rows()), b = rng.below(g[r].cols());
            const std::size_t wi = reg.axis == Axis::Rows ? reg.start + a : a;
            const std::size_t wj = reg.axis == Axis::Cols ? reg.start + b : b;
            TransformerBlockSpec q = p;
            const double w = q.weight(reg.weight)(wi, wj);
            q.weight(reg.weight)(wi, wj) = w + 1e-6;
            const double up = mse_loss(forward_output(q, X), T);
            q.weight(reg.weight)(wi, wj) = w - 1e-6;
            const double down = mse_loss(forward_output(q, X), T);
            const double fd = (up - down) / 2e-6;
            const double an = g[r](a, b);
            const double rel = std::abs(an - fd) / std::max(std::abs(an), std::abs(fd));
            worst_fd = std::max(worst_fd, rel);
            o.require(rel <= 1e-4, "finite difference off by " + fmt("%.3g", rel) + " relative");
        }
    }
    const double secs = seconds_since(t0);
    o.require(secs < 10.0, "took " + fmt("%.2f s", secs));
    if (o.pass)
        o.detail = "slices " + fmt("%.2e", worst_slice) + ", " + std::to_string(probes) + " probes worst " +
                   fmt("%.2e", worst_fd) + ", " + fmt("%.2f s", secs);
    return o;
}

// 3 -------------------------------------------------------------------------
Outcome frozen_immutability() {
    Outcome o;
    const TransformerBlockSpec base = init_block({16, 4, 32, true, 5});
    Rng rng(6);
    Dataset data;
    for (int i = 0; i < 10; ++i) {
        data.inputs.push_back(gaussian_matrix(6, 16, 1.0, rng));
        data.targets.push_back(gaussian_matrix(6, 16, 1.0, rng));
    }
    std::size_t checked = 0;
    for (bool wide : {false, true}) {
        TrainConfig cfg;
        cfg.method = Method::S2FT;
        cfg.mask.mha_heads = {1, 3};
        cfg.mask.ffn_channels = {0, 7, 8, 21, 30};
        cfg.mask.wide = wide;
        cfg.optimizer.lr = 1e-3;
        cfg.optimizer.weight_decay = 0.01;
        cfg.batch_size = 2;
        cfg.epochs = 100;  // 5 batches per epoch: 500 steps
        std::size_t steps = 0;
        const TrainResult r = train_loop(base, data, cfg, [&](std::size_t, double, const TransformerBlockSpec&) { ++steps; });
        o.require(r.ok, "training diverged: " + r.diagnostic);
        o.require(steps == 500, "ran " + std::to_string(steps) + " steps");
        const TransformerBlockSpec start = apply_permutation(base, *r.plan);
        for (WeightId id : kAllWeights) {
            const Matrix& now = r.model.weight(id);
            const Matrix& was = start.weight(id);
            for (std::size_t i = 0; i < now.rows(); ++i)
                for (std::size_t j = 0; j < now.cols(); ++j) {
                    bool trainable = false;
                    for (const auto& reg : r.plan->trainable_ranges)
                        if (reg.weight == id) {
                            const std::size_t at = reg.axis == Axis::Rows ? i : j;
                            trainable = trainable || (at >= reg.start && at < reg.end);
                        }
                    if (trainable) continue;
                    ++checked;
                    if (std::bit_cast<std::uint64_t>(now(i, j)) != std::bit_cast<std::uint64_t>(was(i, j)))
                        o.require(false, std::string("frozen entry moved in ") + weight_name(id));
                }
        }
    }
    if (o.pass) o.detail = std::to_string(checked) + " frozen entries bit-identical after 500 steps (narrow and wide)";
    return o;
}

// 4 -------------------------------------------------------------------------
Outcome closed_form_vs_gd() {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    double worst_prod = 0.0, worst_risk = 0.0;
    std::size_t instances = 0, attempts = 0;
    for (std::uint64_t seed = 0; instances < 20 && attempts < 200; ++seed, ++attempts) {
        Rng rng(derive_seed(40, seed));
        // d_0, d_1, d_2, d_3 with layer 2 and an injective upper map (d_3 ≥ d_2).
        const std::size_t d0 = 2 + rng.below(9), d1 = 2 + rng.below(9), d2 = 2 + rng.below(8);
        const std::size_t d3 = d2 + rng.below(11 - d2);
        const DeepLinearNet net = init_linear_net({d0, d1, d2, d3}, derive_seed(41, seed));
        if (numerical_rank(chain_product(net, 3, 3)) < d2) continue;
        const RegressionTask task = random_task(net, 2, derive_seed(42, seed));
        const Sample s = sample_dataset(task, 500, derive_seed(43, seed));

        const std::size_t r = 1 + rng.below(std::min(d2, d1));
        const AdaptationSolution lora = solve_lora_min_norm(net, task, 2, r, Regime::empirical(s));
        if (lora.ill_conditioned) continue;
        GdHyper h;
        h.rank = r;
        h.seed = seed;
        h.S = rng.sample_without_replacement(d2, 1 + rng.below(d2));
        const AdaptationSolution sft = solve_sft_min_norm(net, task, 2, h.S, Regime::empirical(s));
        ++instances;
        for (const auto& [method, cf] : {std::pair{AdaptMethod::LoRA, &lora}, std::pair{AdaptMethod::S2FT, &sft}}) {
            const GdResult g = gd_oracle(net, s, 2, method, h);
            const double prod = frobenius_norm(g.solution.delta - cf->delta);
            const double risk = std::abs(empirical_risk(net, g.solution, s) - empirical_risk(net, *cf, s));
            worst_prod = std::max(worst_prod, prod);
            worst_risk = std::max(worst_risk, risk);
            const std::string tag = std::string(adapt_method_name(method)) + " instance " + std::to_string(seed);
            o.require(prod <= 1e-6, tag + " product differs by " + fmt("%.3g", prod));
            o.require(risk <= 1e-8, tag + " risk differs by " + fmt("%.3g", risk));
        }
    }
    const double secs = seconds_since(t0);
    o.require(instances == 20, "only " + std::to_string(instances) + " well-posed instances");
    o.require(secs < 60.0, "took " + fmt("%.1f s", secs));
    if (o.pass)
        o.detail = "20 instances, worst product " + fmt("%.2e", worst_prod) + ", worst risk " + fmt("%.2e", worst_risk) +
                   ", " + fmt("%.1f s", secs);
    return o;
}

// 5 -------------------------------------------------------------------------
Outcome theorem2_bounds() {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    Theorem2Config c;
    c.trials = 100;
    const auto trials = theorem2_suite(c);
    std::size_t passed = 0, checks = 0;
    double worst_margin = INFINITY;
    for (const auto& t : trials) {
        passed += t.pass ? 1 : 0;
        for (const auto& rep : t.reports)
            for (const auto& b : rep.bound_checks) {
                if (!b.asserted) continue;
                ++checks;
                worst_margin = std::min(worst_margin, b.margin);
            }
        if (!t.pass) o.require(false, "trial " + std::to_string(t.trial) + " failed " + t.error);
    }
    const double secs = seconds_since(t0);
    o.require(trials.size() == 100, "ran " + std::to_string(trials.size()) + " trials");
    o.require(checks > 0, "no bound was checked");
    o.require(secs < 120.0, "took " + fmt("%.1f s", secs));
    if (o.pass)
        o.detail = std::to_string(passed) + "/100 trials, " + std::to_string(checks) + " bound checks, worst margin " +
                   fmt("%.3g", worst_margin) + ", " + fmt("%.2f s", secs);
    return o;
}

// 6 -------------------------------------------------------------------------
Outcome sparsity_rank_parity() {
    Outcome o;
    for (std::size_t d : {16, 64, 128, 4096}) {
        const std::size_t s = sparsity_for_rank(16, d, d);
        o.require(s == 32, "d=" + std::to_string(d) + " gives s=" + std::to_string(s));
        const std::size_t sft = s * d;              // s rows of width d_{l-1}
        const std::size_t lora = 16 * (d + d);
        const std::size_t gap = sft > lora ? sft - lora : lora - sft;
        o.require(gap <= d, "count gap " + std::to_string(gap) + " exceeds one row at d=" + std::to_string(d));
    }
    // Same parity in the block: 32 channels of Wdown against rank 16 on Wdown.
    const TransformerBlockSpec m = init_block({128, 8, 128, false, 0});
    AccountingInput s2;
    s2.method = Method::S2FT;
    s2.channels = 32;
    AccountingInput lo;
    lo.method = Method::LoRA;
    lo.rank = 16;
    const std::size_t a = accounting(m, s2).trainable_params;
    const std::size_t lora_down = 16 * (m.d + m.k);
    const std::size_t gap = a > lora_down ? a - lora_down : lora_down - a;
    o.require(gap <= m.d, "block count gap " + std::to_string(gap));
    if (o.pass) o.detail = "s=32 at r=16 for d in {16,64,128,4096}; counts equal within one row";
    return o;
}

// 7 -------------------------------------------------------------------------
struct Tuned {
    TrainResult result;
    std::vector<SparseAdapter> adapters;
};

Tuned tune(const TransformerBlockSpec& base, std::vector<std::size_t> channels, std::uint64_t seed) {
    Rng rng(seed);
    Dataset data;
    for (int i = 0; i < 4; ++i) {
        data.inputs.push_back(gaussian_matrix(8, base.d, 1.0, rng));
        data.targets.push_back(gaussian_matrix(8, base.d, 1.0, rng));
    }
    TrainConfig cfg;
    cfg.method = Method::S2FT;
    cfg.mask.ffn_channels = std::move(channels);
    cfg.epochs = 3;
    cfg.optimizer.lr = 0.01;
    Tuned t{train_loop(base, data, cfg), {}};
    t.adapters = extract(t.result.model, base, *t.result.plan);
    return t;
}

LoraRecord random_lora(const TransformerBlockSpec& base, std::size_t r, std::uint64_t seed) {
    Rng rng(seed);
    LoraAdapter a;
    a.weight = WeightId::Down;
    a.U = gaussian_matrix(base.d, r, 0.1, rng);
    a.V = gaussian_matrix(base.k, r, 0.1, rng);
    return {a, fingerprint(base.Wdown)};
}

Outcome adapter_lifecycle() {
    Outcome o;
    const TransformerBlockSpec base = init_block({64, 8, 128, false, 70});
    const Tuned t1 = tune(base, {3, 40, 41, 99}, 71);
    const Tuned t2 = tune(base, {5, 6, 120}, 72);
    AdapterRegistry reg;
    reg.add("s1", t1.adapters.at(0));
    reg.add("s2", t2.adapters.at(0));
    reg.add("l1", random_lora(base, 8, 73));
    reg.add("l2", random_lora(base, 8, 74));

    TransformerBlockSpec live = base;
    for (const char* id : {"s1", "l1"}) {
        fuse(live, id, reg);
        unfuse(live, id, reg);
        for (WeightId w : kAllWeights) o.require(same_bits(live.weight(w), base.weight(w)), std::string("unfuse of ") + id + " is not bit-exact");
    }

    fuse(live, "s1", reg);
    const OpCountReport ss = switch_adapter(live, "s1", "s2", reg);
    unfuse(live, "s2", reg);
    fuse(live, "l1", reg);
    const OpCountReport ls = switch_adapter(live, "l1", "l2", reg);
    unfuse(live, "l2", reg);
    o.require(ss.count("scatter_add") == 2 && ss.count("matmul") == 0 && ss.count("add") == 0,
              "S2FT switch counts differ from 2 scatter-adds");
    o.require(ls.count("matmul") == 2 && ls.count("add") == 2 && ls.count("scatter_add") == 0,
              "LoRA switch counts differ from 2 matmuls + 2 adds");
    o.require(same_bits(live.Wdown, base.Wdown), "switch round trip is not bit-exact");

    Rng rng(75);
    std::vector<ParallelRequest> reqs;
    for (const char* id : {"s1", "l1", "s2", "l2"}) reqs.push_back({id, gaussian_matrix(6, 128, 1.0, rng)});
    const ParallelResult pr = parallel_apply(base, reg, reqs);
    double worst = 0.0;
    for (std::size_t i = 0; i < reqs.size(); ++i) {
        AdapterRegistry scratch = reg;
        TransformerBlockSpec f = base;
        fuse(f, reqs[i].adapter_id, scratch);
        worst = std::max(worst, max_abs_diff(pr.outputs[i], matmul_nt(reqs[i].x, f.Wdown)));
        const auto& c = pr.report.per_request.at(i);
        auto n = [&](const char* op) { return c.count(op) ? c.at(op) : std::size_t{0}; };
        const bool sparse = reqs[i].adapter_id[0] == 's';
        if (sparse)
            o.require(n("matmul") == 1 && n("add") == 1 && n("gather") + n("scatter") == 1,
                      "S2FT parallel counts differ from 1 matmul + 1 add + 1 gather/scatter");
        else
            o.require(n("matmul") == 2 && n("add") == 1 && n("gather") + n("scatter") == 0,
                      "LoRA parallel counts differ from 2 matmuls + 1 add");
    }
    o.require(worst <= 1e-10, "parallel differs from fuse-then-forward by " + fmt("%.3g", worst));
    if (o.pass)
        o.detail = "fuse/unfuse bit-exact; switch 2 scatter_add vs 2 matmul + 2 add; parallel diff " + fmt("%.2e", worst);
    return o;
}

// 8 -------------------------------------------------------------------------
Outcome disjoint_fusion() {
    Outcome o;
    const TransformerBlockSpec base = init_block({64, 8, 128, false, 80});
    const Tuned a = tune(base, {1, 17, 64}, 81);
    const Tuned b = tune(base, {2, 18, 100, 127}, 82);
    const SparseAdapter& A = a.adapters.at(0);
    const SparseAdapter& B = b.adapters.at(0);
    const SparseAdapter F = weighted_fuse({A, B}, {1.0, 1.0});
    o.require(F.s() == A.s() + B.s(), "union has the wrong size");
    double err = 0.0;
    for (const SparseAdapter* src : {&A, &B})
        for (std::size_t t = 0; t < src->s(); ++t) {
            const std::size_t at = static_cast<std::size_t>(
                std::find(F.indices.begin(), F.indices.end(), src->indices[t]) - F.indices.begin());
            for (std::size_t i = 0; i < src->V.rows(); ++i) err = std::max(err, std::abs(F.V(i, at) - src->V(i, t)));
        }
    o.require(err == 0.0, "fused rows changed by " + fmt("%.3g", err));

    // Effect on each task's support: inputs living on that support see exactly the standalone adapter.
    AdapterRegistry reg;
    reg.add("a", A);
    reg.add("b", B);
    reg.add("ab", F);
    TransformerBlockSpec fused = base, solo_a = base, solo_b = base;
    AdapterRegistry r1 = reg, r2 = reg, r3 = reg;
    fuse(fused, "ab", r1);
    fuse(solo_a, "a", r2);
    fuse(solo_b, "b", r3);
    Rng rng(83);
    double effect = 0.0;
    for (const auto& [adapter, solo] : {std::pair{&A, &solo_a}, std::pair{&B, &solo_b}}) {
        Matrix x(5, 128);
        for (std::size_t i = 0; i < 5; ++i)
            for (std::size_t c : adapter->indices) x(i, c) = rng.normal();
        effect = std::max(effect, max_abs_diff(matmul_nt(x, fused.Wdown), matmul_nt(x, solo->Wdown)));
        for (std::size_t c : adapter->indices)
            for (std::size_t i = 0; i < 64; ++i)
                if (std::bit_cast<std::uint64_t>(fused.Wdown(i, c)) != std::bit_cast<std::uint64_t>(solo->Wdown(i, c)))
                    effect = std::max(effect, std::abs(fused.Wdown(i, c) - solo->Wdown(i, c)) + 1e-300);
    }
    o.require(effect == 0.0, "support effect differs by " + fmt("%.3g", effect));
    if (o.pass) o.detail = "row error 0, support effect error 0 over " + std::to_string(F.s()) + " channels";
    return o;
}

// 9 -------------------------------------------------------------------------
Outcome efficiency_trends() {
    Outcome o;
    ExperimentConfig c;
    c.kind = ExperimentKind::Efficiency;
    const auto rows = run_efficiency_report(c, true);
    const EfficiencyRow& s2 = rows.at(0);
    const EfficiencyRow& lora = rows.at(1);
    o.require(s2.method == "s2ft" && lora.method == "lora", "unexpected row order");
    const std::size_t gap = s2.accounting.trainable_params > lora.accounting.trainable_params
                                ? s2.accounting.trainable_params - lora.accounting.trainable_params
                                : lora.accounting.trainable_params - s2.accounting.trainable_params;
    o.require(gap <= c.model.d, "budgets are not matched");
    o.require(s2.accounting.taped_bytes <= lora.accounting.taped_bytes, "taped bytes exceed LoRA's");
    o.require(s2.accounting.optimizer_bytes <= lora.accounting.optimizer_bytes, "optimizer bytes exceed LoRA's");
    o.require(s2.accounting.step_flops() <= lora.accounting.step_flops(), "step FLOPs exceed LoRA's");
    o.require(s2.step_ms_median < lora.step_ms_median,
              "median step " + fmt("%.4f ms", s2.step_ms_median) + " is not below LoRA's " + fmt("%.4f ms", lora.step_ms_median));
    if (o.pass)
        o.detail = "params " + std::to_string(s2.accounting.trainable_params) + " vs " +
                   std::to_string(lora.accounting.trainable_params) + "; FLOPs " +
                   std::to_string(s2.accounting.step_flops()) + " vs " + std::to_string(lora.accounting.step_flops()) +
                   "; taped " + std::to_string(s2.accounting.taped_bytes) + " vs " +
                   std::to_string(lora.accounting.taped_bytes) + "; optimizer " +
                   std::to_string(s2.accounting.optimizer_bytes) + " vs " + std::to_string(lora.accounting.optimizer_bytes) +
                   "; median step " + fmt("%.4f", s2.step_ms_median) + " vs " + fmt("%.4f ms", lora.step_ms_median);
    return o;
}

// 10 ------------------------------------------------------------------------
Outcome risk_ordering() {
    Outcome o;
    constexpr double tol = 1e-9;
    std::size_t instances = 0;
    double worst = 0.0;
    auto violation = [&](double lhs, double rhs, const std::string& what) {
        // lhs ≤ rhs expected
        const double v = (lhs - rhs) / std::max(1.0, std::abs(rhs));
        worst = std::max(worst, v);
        o.require(v <= tol, what + " violated by " + fmt("%.3g", v));
    };
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(derive_seed(100, seed));
        const std::size_t L = 2 + rng.below(3);
        std::vector<std::size_t> dims(L + 1);
        for (auto& d : dims) d = 2 + rng.below(9);
        const std::size_t layer = 1 + rng.below(L);
        const DeepLinearNet net = init_linear_net(dims, derive_seed(101, seed));
        const RegressionTask task = random_task(net, layer, derive_seed(102, seed), {seed % 2 == 0, true, 0.25});
        ++instances;
        const double full = excess_risk(net, solve_full_min_norm(net, task, layer, Regime::pop()), task, false);
        const std::size_t dl = dims[layer], dl1 = dims[layer - 1];
        double prev = INFINITY;
        for (std::size_t r = 1; r <= std::min(dl, dl1); ++r) {
            const double lr = excess_risk(net, solve_lora_min_norm(net, task, layer, r, Regime::pop()), task, false);
            violation(full, lr, "full <= LoRA(r=" + std::to_string(r) + ")");
            if (r > 1) violation(lr, prev, "LoRA monotone in r");
            prev = lr;
        }
        // Full rank: equality with full fine-tuning.
        violation(prev, full, "LoRA at full rank == full");
        std::vector<std::size_t> order(dl);
        for (std::size_t i = 0; i < dl; ++i) order[i] = i;
        for (std::size_t i = dl; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        std::vector<std::size_t> S;
        prev = pretrained_risk(net, task, false);
        for (std::size_t i : order) {
            S.insert(std::upper_bound(S.begin(), S.end(), i), i);
            const double sr = excess_risk(net, solve_sft_min_norm(net, task, layer, S, Regime::pop()), task, false);
            violation(sr, prev, "S2FT monotone under inclusion");
            violation(full, sr, "full <= S2FT");
            prev = sr;
        }
        violation(prev, full, "S2FT on every row == full");
    }
    if (o.pass)
        o.detail = std::to_string(instances) + " instances, worst relative violation " + fmt("%.2e", std::max(worst, 0.0));
    return o;
}

}  // namespace

int main() {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"permutation invariance", permutation_invariance},
        {"partial backprop correctness", partial_backprop},
        {"frozen-weight immutability", frozen_immutability},
        {"closed form vs gradient descent", closed_form_vs_gd},
        {"OOD risk bound suite", theorem2_bounds},
        {"sparsity/rank parity", sparsity_rank_parity},
        {"adapter lifecycle exactness", adapter_lifecycle},
        {"disjoint-support fusion", disjoint_fusion},
        {"efficiency accounting trends", efficiency_trends},
        {"risk ordering", risk_ordering},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::printf("%s %2zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
        std::fflush(stdout);
        failed += o.pass ? 0 : 1;
    }
    std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
