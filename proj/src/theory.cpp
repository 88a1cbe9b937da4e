#include "s2ft/theory.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "s2ft/error.hpp"
#include "s2ft/random.hpp"

namespace s2ft {

namespace {

void require_square(const Matrix& m, std::size_t n, const char* what) {
    if (m.rows() != n || m.cols() != n) {
        throw ArgumentError(std::string(what) + " must be " + std::to_string(n) + "x" + std::to_string(n));
    }
}

void require_psd(const Matrix& m, const char* what) {
    if (m.empty()) return;
    const double scale = std::max(1.0, max_abs(m));
    if (max_abs_diff(m, transpose(m)) > 1e-12 * scale) throw ArgumentError(std::string(what) + " is not symmetric");
    const SymmetricEigen e = symmetric_eigen(m);
    if (e.values.back() < -1e-10 * scale) {
        throw ArgumentError(std::string(what) + " is not PSD (min eigenvalue " + std::to_string(e.values.back()) + ")");
    }
}

/// Left singular vectors with σ > kTheoryRankTol·σ_1.
Matrix column_basis(const Matrix& a) {
    const SvdResult s = svd(a);
    std::size_t k = 0;
    const double cut = s.singular.empty() ? 0.0 : kTheoryRankTol * s.singular.front();
    while (k < s.singular.size() && s.singular[k] > cut && s.singular[k] > 0.0) ++k;
    return slice_cols(s.left, 0, k);
}

Matrix rel_pinv(const Matrix& a) {
    const SvdResult s = svd(a);
    const double smax = s.singular.empty() ? 0.0 : s.singular.front();
    return pinv(a, kTheoryRankTol * smax);
}

std::size_t rel_rank(const Matrix& a) {
    const SvdResult s = svd(a);
    const double smax = s.singular.empty() ? 0.0 : s.singular.front();
    return numerical_rank(a, kTheoryRankTol * smax);
}

/// Factors of a PSD matrix A² = W̲ Σ W̲ᵀ: A†, (A²)†.
struct SqrtFactors {
    Matrix a_pinv;
    Matrix a2_pinv;
};

SqrtFactors sqrt_factors(const Matrix& a2) {
    const SymmetricEigen e = symmetric_eigen(a2);
    const std::size_t n = a2.rows();
    const double cut = e.values.empty() ? 0.0 : kTheoryRankTol * std::max(e.values.front(), 0.0);
    SqrtFactors f{Matrix(n, n), Matrix(n, n)};
    for (std::size_t k = 0; k < n; ++k) {
        const double lam = e.values[k];
        if (!(lam > cut) || lam <= 0.0) continue;
        const double inv_sqrt = 1.0 / std::sqrt(lam), inv = 1.0 / lam;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double vv = e.vectors(i, k) * e.vectors(j, k);
                f.a_pinv(i, j) += inv_sqrt * vv;
                f.a2_pinv(i, j) += inv * vv;
            }
    }
    return f;
}

/// Layer-ℓ quantities shared by the closed forms.
struct LayerView {
    Matrix upper;  ///< W̄_{ℓ+1}, q×d_ℓ
    Matrix lower;  ///< W̲_{ℓ−1}, d_{ℓ−1}×p
    Matrix pre;    ///< W^pre, q×p
};

LayerView layer_view(const DeepLinearNet& net, std::size_t layer) {
    net.validate();
    if (layer < 1 || layer > net.depth()) {
        throw ArgumentError("layer " + std::to_string(layer) + " outside 1.." + std::to_string(net.depth()));
    }
    return {chain_product(net, layer + 1, net.depth()), chain_product(net, 1, layer - 1), chain_product(net, 1, net.depth())};
}

void check_task_dims(const DeepLinearNet& net, const RegressionTask& task) {
    if (task.B_id.rows() != net.output_dim() || task.B_id.cols() != net.input_dim()) {
        throw ShapeError("task B is " + std::to_string(task.B_id.rows()) + "x" + std::to_string(task.B_id.cols()) +
                         ", network maps " + std::to_string(net.input_dim()) + " -> " + std::to_string(net.output_dim()));
    }
}

/// DΣ (population) or (1/n)(Y − W^pre X)Xᵀ, together with Σ or Σ̂.
struct Moments {
    Matrix d_sigma;  ///< q×p
    Matrix sigma;    ///< p×p
};

Moments moments(const LayerView& v, const RegressionTask& task, const Regime& regime) {
    if (regime.population) return {matmul(task.B_id - v.pre, task.Sigma_x), task.Sigma_x};
    if (regime.sample == nullptr) throw ArgumentError("empirical regime needs a sample");
    const Sample& s = *regime.sample;
    if (s.n() == 0) throw ArgumentError("empty sample");
    if (s.X.rows() != v.pre.cols() || s.Y.rows() != v.pre.rows() || s.Y.cols() != s.n()) {
        throw ShapeError("sample does not match the network");
    }
    const double inv_n = 1.0 / static_cast<double>(s.n());
    Matrix resid = s.Y - matmul(v.pre, s.X);
    Matrix ds = matmul_nt(resid, s.X);
    ds *= inv_n;
    Matrix sig = matmul_nt(s.X, s.X);
    sig *= inv_n;
    return {std::move(ds), std::move(sig)};
}

AdaptationSolution base_solution(AdaptMethod m, std::size_t layer, const Regime& regime) {
    AdaptationSolution s;
    s.method = m;
    s.layer = layer;
    s.population = regime.population;
    s.n = regime.population ? 0 : regime.sample->n();
    return s;
}

Matrix adapted_map(const DeepLinearNet& net, const AdaptationSolution& sol) {
    const LayerView v = layer_view(net, sol.layer);
    if (sol.delta.empty()) return v.pre;
    if (sol.delta.rows() != v.upper.cols() || sol.delta.cols() != v.lower.rows()) {
        throw ShapeError("solution delta does not match layer " + std::to_string(sol.layer));
    }
    return v.pre + matmul(matmul(v.upper, sol.delta), v.lower);
}

Matrix random_psd(std::size_t p, Rng& rng) {
    const Matrix g = gaussian_matrix(p, p, 1.0, rng);
    Matrix s = matmul_nt(g, g);
    s *= 1.0 / static_cast<double>(p);
    for (std::size_t i = 0; i < p; ++i) s(i, i) += 0.1;
    // exact symmetry
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = i + 1; j < p; ++j) s(j, i) = s(i, j);
    return s;
}

double quad_trace(const Matrix& e, const Matrix& sigma) { return trace(matmul_nt(matmul(e, sigma), e)); }

}  // namespace

bool RegressionTask::has_covariate_shift() const { return Sigma_x_ood.has_value() && !bit_equal(*Sigma_x_ood, Sigma_x); }

void RegressionTask::validate() const {
    const std::size_t q = B_id.rows(), p = B_id.cols();
    if (B_ood.rows() != q || B_ood.cols() != p) throw ArgumentError("B_id and B_ood differ in shape");
    require_square(Sigma_x, p, "Sigma_x");
    require_square(Sigma_eps_id, q, "Sigma_eps_id");
    require_square(Sigma_eps_ood, q, "Sigma_eps_ood");
    require_psd(Sigma_x, "Sigma_x");
    require_psd(Sigma_eps_id, "Sigma_eps_id");
    require_psd(Sigma_eps_ood, "Sigma_eps_ood");
    if (Sigma_x_ood) {
        require_square(*Sigma_x_ood, p, "Sigma_x_ood");
        require_psd(*Sigma_x_ood, "Sigma_x_ood");
    }
}

Sample sample_dataset(const RegressionTask& task, std::size_t n, std::uint64_t seed, bool ood) {
    if (n == 0) throw ArgumentError("sample_dataset: n must be >= 1");
    task.validate();
    const Matrix sx = psd_sqrt(task.sigma_x(ood));
    const Matrix se = psd_sqrt(ood ? task.Sigma_eps_ood : task.Sigma_eps_id);
    Rng rng(seed);
    const std::size_t p = task.B_id.cols(), q = task.B_id.rows();
    const Matrix gx = gaussian_matrix(p, n, 1.0, rng);
    const Matrix ge = gaussian_matrix(q, n, 1.0, rng);
    Sample s;
    s.X = matmul(sx, gx);
    s.Y = matmul(ood ? task.B_ood : task.B_id, s.X) + matmul(se, ge);
    return s;
}

const char* adapt_method_name(AdaptMethod m) {
    switch (m) {
        case AdaptMethod::LoRA: return "lora";
        case AdaptMethod::S2FT: return "s2ft";
        case AdaptMethod::FullFT: return "full";
        case AdaptMethod::Pretrained: return "pretrained";
    }
    return "?";
}

Matrix selection_matrix(std::size_t d, const std::vector<std::size_t>& S) {
    Matrix u(d, S.size());
    for (std::size_t t = 0; t < S.size(); ++t) {
        if (S[t] >= d) throw ArgumentError("selection index " + std::to_string(S[t]) + " >= " + std::to_string(d));
        if (t > 0 && S[t] <= S[t - 1]) throw ArgumentError("selection must be ascending and distinct");
        u(S[t], t) = 1.0;
    }
    return u;
}

AdaptationSolution solve_lora_min_norm(const DeepLinearNet& net, const RegressionTask& task, std::size_t layer,
                                       std::size_t r, const Regime& regime) {
    check_task_dims(net, task);
    const LayerView v = layer_view(net, layer);
    const std::size_t dl = v.upper.cols(), dl1 = v.lower.rows();
    if (r < 1 || r > std::min(dl, dl1)) {
        throw ArgumentError("LoRA rank " + std::to_string(r) + " outside 1.." + std::to_string(std::min(dl, dl1)));
    }
    const Moments mo = moments(v, task, regime);
    const SqrtFactors af = sqrt_factors(matmul_nt(matmul(v.lower, mo.sigma), v.lower));
    const Matrix up_pinv = rel_pinv(v.upper);
    // W̄W̄† DΣ W̲ᵀ A†
    const Matrix target = matmul(matmul(matmul(v.upper, up_pinv), matmul_nt(mo.d_sigma, v.lower)), af.a_pinv);
    const SvdResult sv = svd(target);

    AdaptationSolution sol = base_solution(AdaptMethod::LoRA, layer, regime);
    const double s1 = sv.singular.front();
    if (r < sv.singular.size() && sv.singular[r - 1] - sv.singular[r] < 1e-9 * s1 && s1 > 0.0) sol.ill_conditioned = true;

    // The target lives in output space and can be narrower than r; extra factor columns stay zero.
    Matrix phi(target.rows(), r), psi(target.cols(), r);
    for (std::size_t k = 0; k < std::min(r, sv.singular.size()); ++k) {
        const double root = std::sqrt(sv.singular[k]);
        for (std::size_t i = 0; i < target.rows(); ++i) phi(i, k) = sv.left(i, k) * root;
        for (std::size_t j = 0; j < target.cols(); ++j) psi(j, k) = sv.right_t(k, j) * root;
    }
    sol.U = matmul(up_pinv, phi);
    sol.V = matmul(af.a_pinv, psi);
    sol.delta = matmul_nt(sol.U, sol.V);
    return sol;
}

AdaptationSolution solve_sft_min_norm(const DeepLinearNet& net, const RegressionTask& task, std::size_t layer,
                                      const std::vector<std::size_t>& S, const Regime& regime) {
    check_task_dims(net, task);
    if (S.empty()) throw ArgumentError("S2FT selection must be non-empty");
    const LayerView v = layer_view(net, layer);
    const Matrix us = selection_matrix(v.upper.cols(), S);
    const Moments mo = moments(v, task, regime);
    const SqrtFactors af = sqrt_factors(matmul_nt(matmul(v.lower, mo.sigma), v.lower));
    const Matrix wu_pinv = rel_pinv(matmul(v.upper, us));  // s×q
    // Vᵀ = (W̄U_S)† DΣ W̲ᵀ (A†)²
    const Matrix vt = matmul(matmul(wu_pinv, matmul_nt(mo.d_sigma, v.lower)), af.a2_pinv);

    AdaptationSolution sol = base_solution(AdaptMethod::S2FT, layer, regime);
    sol.S = S;
    sol.U = us;
    sol.V = transpose(vt);
    sol.delta = matmul(us, vt);
    return sol;
}

AdaptationSolution solve_full_min_norm(const DeepLinearNet& net, const RegressionTask& task, std::size_t layer,
                                       const Regime& regime) {
    check_task_dims(net, task);
    const LayerView v = layer_view(net, layer);
    const Moments mo = moments(v, task, regime);
    const SqrtFactors af = sqrt_factors(matmul_nt(matmul(v.lower, mo.sigma), v.lower));
    AdaptationSolution sol = base_solution(AdaptMethod::FullFT, layer, regime);
    sol.delta = matmul(matmul(rel_pinv(v.upper), matmul_nt(mo.d_sigma, v.lower)), af.a2_pinv);
    return sol;
}

AdaptationSolution pretrained_solution(const DeepLinearNet& net, std::size_t layer) {
    const LayerView v = layer_view(net, layer);
    AdaptationSolution sol;
    sol.method = AdaptMethod::Pretrained;
    sol.layer = layer;
    sol.delta = Matrix(v.upper.cols(), v.lower.rows());
    return sol;
}

double full_population_risk(const DeepLinearNet& net, const RegressionTask& task, std::size_t layer) {
    check_task_dims(net, task);
    const LayerView v = layer_view(net, layer);
    const Matrix& sigma = task.Sigma_x;
    const Matrix sh = psd_sqrt(sigma);
    const Matrix d = task.B_id - v.pre;
    const Matrix a2p = sqrt_factors(matmul_nt(matmul(v.lower, sigma), v.lower)).a2_pinv;
    // Σ^{1/2} W̲ᵀ (A²)† W̲ Σ^{1/2}
    const Matrix p_sym = matmul(sh, matmul_tn(v.lower, matmul(matmul(a2p, v.lower), sh)));
    const std::size_t p = sigma.rows();
    const double t1 = squared_norm(matmul(matmul(d, sh), Matrix::identity(p) - p_sym));
    const Matrix phi = column_basis(v.upper);
    const Matrix left = Matrix::identity(v.upper.rows()) - matmul_nt(phi, phi);
    const Matrix inner = matmul(matmul(matmul_nt(matmul(d, sigma), v.lower), a2p), matmul(v.lower, sh));
    const double t2 = squared_norm(matmul(left, inner));
    return t1 + t2;
}

double excess_risk(const DeepLinearNet& net, const AdaptationSolution& sol, const RegressionTask& task, bool ood) {
    check_task_dims(net, task);
    const Matrix e = (ood ? task.B_ood : task.B_id) - adapted_map(net, sol);
    return quad_trace(e, task.sigma_x(ood));
}

double pretrained_risk(const DeepLinearNet& net, const RegressionTask& task, bool ood) {
    return excess_risk(net, pretrained_solution(net, 1), task, ood);
}

double empirical_risk(const DeepLinearNet& net, const AdaptationSolution& sol, const Sample& sample) {
    const Matrix r = sample.Y - matmul(adapted_map(net, sol), sample.X);
    return squared_norm(r) / static_cast<double>(sample.n());
}

GdResult gd_oracle(const DeepLinearNet& net, const Sample& sample, std::size_t layer, AdaptMethod method,
                   const GdHyper& hyper) {
    if (method != AdaptMethod::LoRA && method != AdaptMethod::S2FT) throw ArgumentError("gd_oracle: LoRA or S2FT only");
    const LayerView v = layer_view(net, layer);
    if (sample.X.rows() != v.pre.cols() || sample.Y.rows() != v.pre.rows()) throw ShapeError("sample does not match the network");
    const double inv_n = 1.0 / static_cast<double>(sample.n());
    // Sufficient statistics of the empirical risk in terms of Δ.
    const Matrix z = matmul(v.lower, sample.X);
    Matrix czz = matmul_nt(z, z);
    czz *= inv_n;
    Matrix crz = matmul_nt(sample.Y - matmul(v.pre, sample.X), z);
    crz *= inv_n;
    const Matrix k = matmul_tn(v.upper, v.upper);
    const Matrix wcrz = matmul_tn(v.upper, crz);  // W̄ᵀ C_rz
    const std::size_t dl = v.upper.cols(), dl1 = v.lower.rows();

    // ∂R/∂Δ = 2(K Δ C_zz − W̄ᵀ C_rz)
    auto grad_delta = [&](const Matrix& delta) {
        Matrix g = matmul(matmul(k, delta), czz) - wcrz;
        g *= 2.0;
        return g;
    };
    // R(Δ + e) − R(Δ), formed from e itself so it stays accurate near the optimum.
    auto risk_change = [&](const Matrix& from, const Matrix& e) {
        Matrix w = matmul(matmul(k, 2.0 * from + e), czz);
        w -= 2.0 * wcrz;
        double acc = 0.0;
        for (std::size_t i = 0; i < e.size(); ++i) acc += e.elements()[i] * w.elements()[i];
        return acc;
    };

    GdResult res;
    AdaptationSolution& sol = res.solution;
    sol.method = method;
    sol.layer = layer;
    sol.population = false;
    sol.n = sample.n();

    // V is measured through C_zz: updates C_zz⁺·∂R/∂V stay in range(C_zz), so from V = 0
    // the iteration still ends at the minimum-norm solution.
    const Matrix pc = pinv(czz);

    if (method == AdaptMethod::S2FT) {
        const Matrix us = selection_matrix(dl, hyper.S);
        const SvdResult a = svd(matmul(v.upper, us));
        const double lip = 2.0 * a.singular.front() * a.singular.front();
        if (!(lip > 0.0)) throw NumericError("gd_oracle: zero curvature");
        const double step = 1.0 / lip;
        Matrix vv(dl1, hyper.S.size());
        for (std::size_t it = 0; it < hyper.max_iters; ++it) {
            const Matrix g = grad_delta(matmul_nt(us, vv));
            const Matrix gv = matmul_tn(g, us);  // ∂R/∂V = Gᵀ U_S
            res.grad_norm = frobenius_norm(gv);
            res.iterations = it;
            if (res.grad_norm <= hyper.grad_tol) {
                sol.S = hyper.S;
                sol.U = us;
                sol.V = vv;
                sol.delta = matmul_nt(us, vv);
                return res;
            }
            vv -= step * matmul(pc, gv);
        }
        throw NumericError("gd_oracle(s2ft): gradient norm " + std::to_string(res.grad_norm) + " after " +
                           std::to_string(hyper.max_iters) + " iterations");
    }

    if (hyper.rank < 1 || hyper.rank > std::min(dl, dl1)) throw ArgumentError("gd_oracle: bad LoRA rank");
    // LoRA additionally measures U through K. Both metrics are fixed, so this is plain
    // gradient descent after a linear change of variables.
    const Matrix pk = pinv(k);
    Rng rng(hyper.seed);
    Matrix u = gaussian_matrix(dl, hyper.rank, hyper.init_scale, rng);
    Matrix vv(dl1, hyper.rank);
    double step = 1.0;
    for (std::size_t it = 0; it < hyper.max_iters; ++it) {
        const Matrix delta = matmul_nt(u, vv);
        const Matrix g = grad_delta(delta);
        const Matrix gu = matmul(g, vv);
        const Matrix gv = matmul_tn(g, u);
        res.grad_norm = std::sqrt(squared_norm(gu) + squared_norm(gv));
        res.iterations = it;
        if (res.grad_norm <= hyper.grad_tol) {
            sol.U = u;
            sol.V = vv;
            sol.delta = delta;
            return res;
        }
        const Matrix du = matmul(pk, gu);
        const Matrix dv = matmul(pc, gv);
        double slope = 0.0;
        for (std::size_t i = 0; i < du.size(); ++i) slope += du.elements()[i] * gu.elements()[i];
        for (std::size_t i = 0; i < dv.size(); ++i) slope += dv.elements()[i] * gv.elements()[i];
        // Armijo backtracking, starting from twice the last accepted step.
        step *= 2.0;
        for (int tries = 0;; ++tries) {
            // (U − s·dU)(V − s·dV)ᵀ − UVᵀ without subtracting two nearly equal products.
            Matrix e = matmul_nt(du, dv);
            e *= step * step;
            e -= step * (matmul_nt(du, vv) + matmul_nt(u, dv));
            if (risk_change(delta, e) <= -1e-4 * step * slope) {
                u -= step * du;
                vv -= step * dv;
                break;
            }
            step *= 0.5;
            if (tries > 200) throw NumericError("gd_oracle(lora): line search failed");
        }
    }
    throw NumericError("gd_oracle(lora): gradient norm " + std::to_string(res.grad_norm) + " after " +
                       std::to_string(hyper.max_iters) + " iterations");
}

double assumption_shift_epsilon(const DeepLinearNet& net, const RegressionTask& task, std::size_t layer,
                                const std::vector<std::size_t>& S) {
    check_task_dims(net, task);
    if (task.has_covariate_shift()) {
        throw PreconditionError("label-shift ratio needs a shared covariate covariance; the OOD task has its own");
    }
    const LayerView v = layer_view(net, layer);
    const Matrix phi = column_basis(matmul(v.upper, selection_matrix(v.upper.cols(), S)));
    const double num = phi.cols() == 0 ? 0.0
                                        : squared_norm(matmul_tn(phi, matmul(task.B_ood - task.B_id, psd_sqrt(task.Sigma_x))));
    if (num == 0.0) return 0.0;
    const double den = pretrained_risk(net, task, true);
    if (!(den > 0.0)) throw NumericError("label-shift ratio undefined: pretrained OOD risk is zero");
    return num / den;
}

double sparsity_delta_sq(const DeepLinearNet& net, const RegressionTask& task, std::size_t layer,
                         const std::vector<std::size_t>& S) {
    check_task_dims(net, task);
    const LayerView v = layer_view(net, layer);
    const Matrix m = matmul(matmul(rel_pinv(v.upper), task.B_id - v.pre), psd_sqrt(task.Sigma_x));
    const double total = squared_norm(m);
    if (total == 0.0) return 0.0;
    double outside = 0.0;
    for (std::size_t a = 0; a < m.rows(); ++a) {
        if (std::binary_search(S.begin(), S.end(), a)) continue;
        for (double x : m.row(a)) outside += x * x;
    }
    return outside / total;
}

BiasDiagnostics bias_diagnostics(const DeepLinearNet& net, const RegressionTask& task, std::size_t layer,
                                 std::size_t r, const std::vector<std::size_t>& S) {
    const LayerView v = layer_view(net, layer);
    const Matrix& sigma = task.Sigma_x;
    const SqrtFactors af = sqrt_factors(matmul_nt(matmul(v.lower, sigma), v.lower));
    const Matrix g = matmul(matmul_nt(matmul(task.B_id - v.pre, sigma), v.lower), af.a_pinv);  // DΣW̲ᵀA†
    const Matrix phi1 = column_basis(v.upper);
    const Matrix m = matmul(matmul_nt(phi1, phi1), g);
    const Matrix phi2 = column_basis(matmul(v.upper, selection_matrix(v.upper.cols(), S)));
    BiasDiagnostics b;
    b.full = full_population_risk(net, task, layer);
    const std::size_t rr = std::min(r, std::min(m.rows(), m.cols()));
    b.lora_bias_sq = squared_norm(truncated_svd(m, rr) - m) + b.full;
    b.sft_bias_sq = squared_norm(matmul(matmul_nt(phi2, phi2), g) - m) + b.full;
    return b;
}

std::size_t residual_rank(const DeepLinearNet& net, const RegressionTask& task) {
    check_task_dims(net, task);
    const Matrix d = task.B_id - chain_product(net, 1, net.depth());
    return rel_rank(matmul(d, psd_sqrt(task.Sigma_x)));
}

RegressionTask random_task(const DeepLinearNet& net, std::size_t layer, std::uint64_t seed, const InstanceOptions& options) {
    const LayerView v = layer_view(net, layer);
    Rng rng(seed);
    const std::size_t p = net.input_dim(), q = net.output_dim();
    RegressionTask t;
    if (options.realizable) {
        const Matrix bt = gaussian_matrix(v.upper.cols(), v.lower.rows(), 1.0 / std::sqrt(static_cast<double>(v.lower.rows())), rng);
        t.B_id = matmul(matmul(v.upper, bt), v.lower);
    } else {
        t.B_id = gaussian_matrix(q, p, 1.0 / std::sqrt(static_cast<double>(p)), rng);
    }
    t.B_ood = t.B_id + gaussian_matrix(q, p, 0.5 / std::sqrt(static_cast<double>(p)), rng);
    t.Sigma_x = options.random_sigma_x ? random_psd(p, rng) : Matrix::identity(p);
    t.Sigma_eps_id = options.noise_var * Matrix::identity(q);
    t.Sigma_eps_ood = t.Sigma_eps_id;
    return t;
}

// ---------------------------------------------------------------------------

const char* shift_scenario_name(ShiftScenario s) {
    switch (s) {
        case ShiftScenario::Generic: return "generic";
        case ShiftScenario::Inside: return "inside";
        case ShiftScenario::Orthogonal: return "orthogonal";
        case ShiftScenario::None: return "none";
    }
    return "?";
}

ShiftScenario parse_shift_scenario(std::string_view s) {
    for (ShiftScenario x : {ShiftScenario::Generic, ShiftScenario::Inside, ShiftScenario::Orthogonal, ShiftScenario::None})
        if (s == shift_scenario_name(x)) return x;
    throw ConfigError("unknown shift scenario '" + std::string(s) + "'");
}

namespace {

struct Instance {
    DeepLinearNet net;
    RegressionTask task;
    std::vector<std::size_t> order;  ///< selection order; S_s = sorted first s
};

std::vector<std::size_t> prefix_set(const std::vector<std::size_t>& order, std::size_t s) {
    std::vector<std::size_t> S(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(s));
    std::sort(S.begin(), S.end());
    return S;
}

Instance make_instance(const Theorem2Config& c, ShiftScenario scenario, Rng& rng) {
    Instance in;
    in.net = init_linear_net(c.dims, rng.next_u64());
    const LayerView v = layer_view(in.net, c.layer);
    const std::size_t p = c.dims.front(), q = c.dims.back(), dl = c.dims[c.layer];
    const Matrix bt = gaussian_matrix(dl, c.dims[c.layer - 1], 1.0 / std::sqrt(static_cast<double>(c.dims[c.layer - 1])), rng);
    in.task.B_id = matmul(matmul(v.upper, bt), v.lower);
    in.task.Sigma_x = c.random_sigma_x ? random_psd(p, rng) : Matrix::identity(p);
    if (c.covariate_shift) in.task.Sigma_x_ood = random_psd(p, rng);
    in.task.Sigma_eps_id = Matrix::identity(q);
    in.task.Sigma_eps_ood = Matrix::identity(q);

    in.order.resize(dl);
    std::iota(in.order.begin(), in.order.end(), std::size_t{0});
    for (std::size_t i = dl; i > 1; --i) std::swap(in.order[i - 1], in.order[rng.below(i)]);

    // The label shift is placed relative to the smallest selection, S_1.
    const Matrix phi = column_basis(matmul(v.upper, selection_matrix(dl, prefix_set(in.order, 1))));
    const Matrix proj = matmul_nt(phi, phi);
    Matrix shift = gaussian_matrix(q, p, 0.5, rng);
    switch (scenario) {
        case ShiftScenario::Generic: break;
        case ShiftScenario::Inside: shift = matmul(proj, shift); break;
        case ShiftScenario::Orthogonal: shift = shift - matmul(proj, shift); break;
        case ShiftScenario::None: shift = Matrix(q, p); break;
    }
    in.task.B_ood = in.task.B_id + shift;
    return in;
}

}  // namespace

std::vector<Theorem2Trial> theorem2_suite(const Theorem2Config& c) {
    if (c.dims.size() < 2) throw ConfigError("theorem2: need at least one layer");
    if (c.layer < 1 || c.layer + 1 > c.dims.size()) throw ConfigError("theorem2: layer outside the network");
    if (c.scenarios.empty()) throw ConfigError("theorem2: no shift scenarios");

    std::vector<Theorem2Trial> out;
    for (std::size_t trial = 0; trial < c.trials; ++trial) {
        Theorem2Trial t;
        t.trial = trial;
        t.seed = derive_seed(c.seed, trial);
        t.scenario = c.scenarios[trial % c.scenarios.size()];
        Rng rng(t.seed);

        for (;; ++t.regenerations) {
            if (t.regenerations > c.max_regenerations) {
                t.error = "hypothesis construction failed after " + std::to_string(c.max_regenerations) + " regenerations";
                break;
            }
            t.reports.clear();
            Instance in = make_instance(c, t.scenario, rng);
            const RegressionTask& task = in.task;
            t.rank_sigma_f = residual_rank(in.net, task);
            const std::size_t max_r = std::min(c.dims[c.layer], c.dims[c.layer - 1]);
            if (t.rank_sigma_f == 0 || t.rank_sigma_f > max_r) continue;
            const double pre_ood = pretrained_risk(in.net, task, true);
            if (!(pre_ood > 1e-12)) continue;
            const double shift_sq = quad_trace(task.B_ood - task.B_id, task.Sigma_x);

            const AdaptationSolution lora = solve_lora_min_norm(in.net, task, c.layer, t.rank_sigma_f, Regime::pop());
            if (lora.ill_conditioned) continue;

            try {
                for (std::size_t s = 1; s <= t.rank_sigma_f; ++s) {
                    const std::vector<std::size_t> S = prefix_set(in.order, s);
                    const AdaptationSolution sft = solve_sft_min_norm(in.net, task, c.layer, S, Regime::pop());
                    RiskReport rep;
                    rep.method = "s2ft";
                    rep.size = s;
                    rep.excess_id = excess_risk(in.net, sft, task, false);
                    rep.excess_ood = excess_risk(in.net, sft, task, true);
                    rep.pretrained_ood = pre_ood;
                    rep.label_shift_sq = shift_sq;
                    rep.epsilon_sq = assumption_shift_epsilon(in.net, task, c.layer, S);
                    BoundCheck b;
                    b.name = "s2ft_ood_upper";
                    b.lhs = rep.excess_ood;
                    b.rhs = (1.0 + 3.0 * rep.epsilon_sq) * pre_ood + c.slack;
                    b.margin = b.rhs - b.lhs;
                    b.pass = b.margin >= 0.0;
                    rep.bound_checks.push_back(b);
                    t.reports.push_back(rep);
                }
                for (std::size_t r = 1; r <= t.rank_sigma_f; ++r) {
                    const AdaptationSolution sol =
                        r == t.rank_sigma_f ? lora : solve_lora_min_norm(in.net, task, c.layer, r, Regime::pop());
                    RiskReport rep;
                    rep.method = "lora";
                    rep.size = r;
                    rep.excess_id = excess_risk(in.net, sol, task, false);
                    rep.excess_ood = excess_risk(in.net, sol, task, true);
                    rep.pretrained_ood = pre_ood;
                    rep.label_shift_sq = shift_sq;
                    rep.ill_conditioned = sol.ill_conditioned;
                    BoundCheck b;
                    b.name = "lora_ood_lower";
                    b.lhs = rep.excess_ood;
                    b.rhs = shift_sq - c.slack;
                    b.margin = b.lhs - b.rhs;
                    b.pass = b.margin >= 0.0;
                    b.asserted = r == t.rank_sigma_f;
                    rep.bound_checks.push_back(b);
                    t.reports.push_back(rep);
                }
            } catch (const PreconditionError& e) {
                t.error = e.what();
                t.reports.clear();
            }
            break;
        }

        t.pass = t.error.empty();
        for (const auto& rep : t.reports)
            for (const auto& b : rep.bound_checks)
                if (b.asserted && !b.pass) t.pass = false;
        out.push_back(std::move(t));
    }
    return out;
}

json theorem2_to_json(const Theorem2Config& c, const std::vector<Theorem2Trial>& trials) {
    json j;
    j["schema_version"] = 1;
    json cfg;
    cfg["dims"] = c.dims;
    cfg["layer"] = c.layer;
    cfg["trials"] = c.trials;
    cfg["seed"] = c.seed;
    cfg["slack"] = c.slack;
    json sc = json::array();
    for (ShiftScenario s : c.scenarios) sc.push_back(shift_scenario_name(s));
    cfg["scenarios"] = sc;
    cfg["random_sigma_x"] = c.random_sigma_x;
    cfg["covariate_shift"] = c.covariate_shift;
    j["config"] = cfg;

    std::size_t passed = 0, regen = 0, precondition = 0;
    double worst = INFINITY;
    json arr = json::array();
    for (const auto& t : trials) {
        passed += t.pass ? 1 : 0;
        regen += t.regenerations;
        precondition += t.error.empty() ? 0 : 1;
        json jt;
        jt["trial"] = t.trial;
        jt["seed"] = t.seed;
        jt["scenario"] = shift_scenario_name(t.scenario);
        jt["regenerations"] = t.regenerations;
        jt["rank_sigma_f"] = t.rank_sigma_f;
        jt["pass"] = t.pass;
        if (!t.error.empty()) jt["error"] = t.error;
        json reps = json::array();
        for (const auto& r : t.reports) {
            json jr;
            jr["method"] = r.method;
            jr[r.method == "lora" ? "r" : "s"] = r.size;
            jr["excess_id"] = r.excess_id;
            jr["excess_ood"] = r.excess_ood;
            jr["pretrained_ood"] = r.pretrained_ood;
            jr["label_shift_sq"] = r.label_shift_sq;
            if (r.method == "s2ft") jr["epsilon_sq"] = r.epsilon_sq;
            if (r.ill_conditioned) jr["ill_conditioned"] = true;
            json checks = json::array();
            for (const auto& b : r.bound_checks) {
                checks.push_back({{"name", b.name}, {"lhs", b.lhs}, {"rhs", b.rhs}, {"margin", b.margin},
                                  {"pass", b.pass}, {"asserted", b.asserted}});
                if (b.asserted) worst = std::min(worst, b.margin);
            }
            jr["bound_checks"] = checks;
            reps.push_back(jr);
        }
        jt["reports"] = reps;
        arr.push_back(jt);
    }
    j["summary"] = {{"trials", trials.size()},
                    {"passed", passed},
                    {"failed", trials.size() - passed},
                    {"precondition_errors", precondition},
                    {"regenerations", regen},
                    {"worst_margin", std::isfinite(worst) ? json(worst) : json(nullptr)}};
    j["trials"] = arr;
    return j;
}

}  // namespace s2ft
