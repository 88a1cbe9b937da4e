#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "s2ft/io.hpp"
#include "s2ft/netspec.hpp"

namespace s2ft {

/// y = B x + e for the in-distribution (id) and out-of-distribution (ood)
/// tasks. Sigma_x_ood is unset when both tasks share Sigma_x.
struct RegressionTask {
    Matrix B_id;          ///< q×p
    Matrix B_ood;         ///< q×p
    Matrix Sigma_x;       ///< p×p
    std::optional<Matrix> Sigma_x_ood;
    Matrix Sigma_eps_id;  ///< q×q
    Matrix Sigma_eps_ood; ///< q×q

    const Matrix& sigma_x(bool ood) const { return ood && Sigma_x_ood ? *Sigma_x_ood : Sigma_x; }
    bool has_covariate_shift() const;
    /// Shapes and PSD-ness (min eigenvalue >= -1e-10·scale); ArgumentError otherwise.
    void validate() const;
};

struct Sample {
    Matrix X;  ///< p×n
    Matrix Y;  ///< q×n
    std::size_t n() const { return X.cols(); }
};

/// x ~ N(0, Sigma_x), e ~ N(0, Sigma_eps) through symmetric square roots.
Sample sample_dataset(const RegressionTask& task, std::size_t n, std::uint64_t seed, bool ood = false);

enum class AdaptMethod { LoRA, S2FT, FullFT, Pretrained };
const char* adapt_method_name(AdaptMethod m);

/// Either the n→∞ closed forms (population) or the sample versions.
struct Regime {
    bool population = true;
    const Sample* sample = nullptr;

    static Regime pop() { return {}; }
    static Regime empirical(const Sample& s) { return {false, &s}; }
};

struct AdaptationSolution {
    AdaptMethod method = AdaptMethod::Pretrained;
    std::size_t layer = 1;
    Matrix U;                       ///< d_ℓ×r (LoRA), d_ℓ×s selection (S2FT)
    Matrix V;                       ///< d_{ℓ-1}×r or d_{ℓ-1}×s
    Matrix delta;                   ///< UVᵀ, d_ℓ×d_{ℓ-1}
    std::vector<std::size_t> S;     ///< S2FT rows, ascending
    bool population = true;
    std::size_t n = 0;
    /// LoRA: σ_r − σ_{r+1} < 1e-9·σ_1, so the rank-r truncation is not unique.
    bool ill_conditioned = false;
};

/// Column-selection matrix [e_a1 … e_as], d×s.
Matrix selection_matrix(std::size_t d, const std::vector<std::size_t>& S);

/// Relative cutoff used for every rank decision in this module.
inline constexpr double kTheoryRankTol = 1e-9;

AdaptationSolution solve_lora_min_norm(const DeepLinearNet& net, const RegressionTask& task, std::size_t layer,
                                       std::size_t r, const Regime& regime);
AdaptationSolution solve_sft_min_norm(const DeepLinearNet& net, const RegressionTask& task, std::size_t layer,
                                      const std::vector<std::size_t>& S, const Regime& regime);
/// Minimum-norm unrestricted update of layer ℓ.
AdaptationSolution solve_full_min_norm(const DeepLinearNet& net, const RegressionTask& task, std::size_t layer,
                                       const Regime& regime);
AdaptationSolution pretrained_solution(const DeepLinearNet& net, std::size_t layer);

/// In-distribution population excess risk of full fine-tuning of layer ℓ,
/// evaluated from the two-term closed form.
double full_population_risk(const DeepLinearNet& net, const RegressionTask& task, std::size_t layer);

/// tr((B − W_adapted) Σ_x (B − W_adapted)ᵀ) on the chosen task.
double excess_risk(const DeepLinearNet& net, const AdaptationSolution& sol, const RegressionTask& task, bool ood);
double pretrained_risk(const DeepLinearNet& net, const RegressionTask& task, bool ood);

/// (1/n)·Σ‖y_i − f(x_i)‖² for the adapted network.
double empirical_risk(const DeepLinearNet& net, const AdaptationSolution& sol, const Sample& sample);

struct GdHyper {
    std::size_t max_iters = 2'000'000;
    double grad_tol = 1e-10;
    double init_scale = 1e-3;  ///< LoRA U init std
    std::size_t rank = 1;      ///< LoRA
    std::vector<std::size_t> S;
    std::uint64_t seed = 0;
};

struct GdResult {
    AdaptationSolution solution;
    std::size_t iterations = 0;
    double grad_norm = 0.0;
};

/// Full-batch gradient descent on the empirical risk. LoRA: U small Gaussian,
/// V = 0, Armijo backtracking; S2FT: V = 0 and a fixed 1/L step. Throws
/// NumericError if grad_tol is not reached within max_iters.
GdResult gd_oracle(const DeepLinearNet& net, const Sample& sample, std::size_t layer, AdaptMethod method,
                   const GdHyper& hyper);

/// ‖P (B_ood − B_id) Σ_x^{1/2}‖² / 𝓔_ood(f^pre) with P the orthogonal projector
/// onto span(W̄_{ℓ+1} U_S). PreconditionError if the tasks' Σ_x differ.
double assumption_shift_epsilon(const DeepLinearNet& net, const RegressionTask& task, std::size_t layer,
                                const std::vector<std::size_t>& S);

/// Approximate-sparsity level δ² of a row set: share of ‖W̄† D Σ^{1/2}‖² outside S.
double sparsity_delta_sq(const DeepLinearNet& net, const RegressionTask& task, std::size_t layer,
                         const std::vector<std::size_t>& S);

/// Population bias terms (squared) for reporting only.
struct BiasDiagnostics {
    double full = 0.0;
    double lora_bias_sq = 0.0;
    double sft_bias_sq = 0.0;
};
BiasDiagnostics bias_diagnostics(const DeepLinearNet& net, const RegressionTask& task, std::size_t layer,
                                 std::size_t r, const std::vector<std::size_t>& S);

/// rank(Σ_f) with Σ_f = D Σ_x Dᵀ.
std::size_t residual_rank(const DeepLinearNet& net, const RegressionTask& task);

// ---------------------------------------------------------------------------
// Theorem-2 suite

struct BoundCheck {
    std::string name;
    double lhs = 0.0;
    double rhs = 0.0;
    double margin = 0.0;  ///< positive when satisfied
    bool pass = false;
    bool asserted = true;  ///< diagnostics are recorded but never fail a trial
};

struct RiskReport {
    std::string method;
    std::size_t size = 0;  ///< s or r
    double excess_id = 0.0;
    double excess_ood = 0.0;
    double pretrained_ood = 0.0;
    double label_shift_sq = 0.0;
    double epsilon_sq = 0.0;
    bool ill_conditioned = false;
    std::vector<BoundCheck> bound_checks;
};

enum class ShiftScenario { Generic, Inside, Orthogonal, None };
const char* shift_scenario_name(ShiftScenario s);
ShiftScenario parse_shift_scenario(std::string_view s);

struct Theorem2Config {
    std::vector<std::size_t> dims{6, 6, 8, 6};  ///< d_0 … d_L
    std::size_t layer = 2;
    std::size_t trials = 100;
    std::uint64_t seed = 7;
    double slack = 1e-8;
    std::vector<ShiftScenario> scenarios{ShiftScenario::Generic, ShiftScenario::Inside, ShiftScenario::Orthogonal};
    bool random_sigma_x = false;
    /// Negative control: give the OOD task its own Σ_x.
    bool covariate_shift = false;
    std::size_t max_regenerations = 50;
};

struct Theorem2Trial {
    std::size_t trial = 0;
    std::uint64_t seed = 0;
    ShiftScenario scenario = ShiftScenario::Generic;
    std::size_t regenerations = 0;
    std::size_t rank_sigma_f = 0;
    std::vector<std::size_t> S;  ///< largest selection; the sweep uses its prefixes
    std::vector<RiskReport> reports;
    std::string error;           ///< precondition failure, if any
    bool pass = false;
};

/// One instance per trial, seeded derive_seed(seed, trial). Builds
/// B_id = W̄ B̃ W̲, sweeps s = 1..rank(Σ_f) over nested selections and checks
/// LoRA at r = rank(Σ_f). LoRA at smaller r is recorded as a diagnostic.
std::vector<Theorem2Trial> theorem2_suite(const Theorem2Config& config);

json theorem2_to_json(const Theorem2Config& config, const std::vector<Theorem2Trial>& trials);

/// Random instance for oracle checks: random net with the given dims, realizable
/// or generic B_id, shared Σ_x, isotropic noise of the given variance.
struct InstanceOptions {
    bool realizable = false;
    bool random_sigma_x = true;
    double noise_var = 0.25;
};
RegressionTask random_task(const DeepLinearNet& net, std::size_t layer, std::uint64_t seed,
                           const InstanceOptions& options = {});

}  // namespace s2ft
