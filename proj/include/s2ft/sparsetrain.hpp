#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "s2ft/permute.hpp"
#include "s2ft/select.hpp"

namespace s2ft {

// ---------------------------------------------------------------------------
// Full reverse mode (reference path)

struct FullGradients {
    Matrix Wq, Wk, Wv, Wo, Wup, Wgate, Wdown;
    Matrix& of(WeightId id);
    const Matrix& of(WeightId id) const;
};

/// Reverse-mode gradients of every weight for a loss whose gradient with
/// respect to the block output is dY. Recomputes the forward pass itself.
FullGradients full_grad_oracle(const TransformerBlockSpec& model, const Matrix& X, const Matrix& dY);

/// Hooks for a backward pass over an existing trace.
///   propagate(id, dOut) returns dOut·W_eff (gradient w.r.t. the projection input);
///   on_weight(id, dOut, in) receives the projection's output gradient and input.
struct BackwardHooks {
    std::function<Matrix(WeightId, const Matrix&)> propagate;
    std::function<void(WeightId, const Matrix& dOut, const Matrix& in)> on_weight;
};

/// Walks the block backwards only as far as the earliest weight in `wanted`.
void block_backward(const TransformerBlockSpec& model, const ActivationTrace& trace, const Matrix& dY,
                    const std::vector<WeightId>& wanted, const BackwardHooks& hooks);

// ---------------------------------------------------------------------------
// Partial back-propagation over trainable regions

/// Checks regions against model shapes: non-empty, in range, at most one per
/// weight, and head-aligned on Wq/Wk/Wv/Wo.
void validate_regions(const TransformerBlockSpec& model, const std::vector<TrainableRegion>& regions);

/// Saved tensors for a partial backward. Input slices are what multiply a
/// trainable range; path tensors are only kept when a frozen nonlinearity sits
/// between a trainable weight and the output.
struct Tape {
    std::size_t tokens = 0, d = 0, h = 0, k = 0;
    std::vector<TrainableRegion> regions;

    std::optional<Matrix> attn_slice;  ///< Attn[:, Wo range]
    std::optional<Matrix> inner_slice; ///< H[:, Wdown range]
    std::optional<Matrix> x;           ///< block input, when a Wq/Wk/Wv range trains
    std::optional<Matrix> y1;          ///< FFN input, when a Wup/Wgate range trains

    std::size_t ffn_lo = 0, ffn_hi = 0;  ///< channels whose U,G are kept
    std::optional<Matrix> u, g;          ///< U, G restricted to [ffn_lo, ffn_hi)

    std::size_t head_lo = 0, head_hi = 0;  ///< heads whose attention internals are kept
    std::vector<Matrix> p, q, kk, v;       ///< per kept head

    std::size_t bytes() const;
    std::size_t entries() const;
};

struct TapedForward {
    Matrix Y;
    Tape tape;
};

TapedForward forward_with_tape(const TransformerBlockSpec& model, const std::vector<TrainableRegion>& regions,
                               const Matrix& X);

/// One gradient per region, shaped like the region's slice of its weight.
using RegionGradients = std::vector<Matrix>;

RegionGradients backward_partial(const TransformerBlockSpec& model, const Tape& tape, const Matrix& dY);

/// The slice of `w` covered by `r`.
Matrix region_slice(const Matrix& w, const TrainableRegion& r);

// ---------------------------------------------------------------------------
// Optimizer

enum class OptimizerKind { SGD, AdamW };
enum class Schedule { Constant, Linear, Cosine };

const char* optimizer_name(OptimizerKind k);
OptimizerKind parse_optimizer(std::string_view s);
const char* schedule_name(Schedule s);
Schedule parse_schedule(std::string_view s);

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::AdamW;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    Schedule schedule = Schedule::Constant;
    std::size_t warmup_steps = 0;
    std::size_t total_steps = 0;  ///< horizon for Linear/Cosine decay

    /// Learning rate used at 0-based step t.
    double lr_at(std::size_t t) const;
};

struct RegionState {
    TrainableRegion region;
    Matrix m, v;  ///< AdamW moments, sized to the region only
};

struct OptimizerState {
    OptimizerConfig config;
    std::vector<RegionState> regions;
    std::size_t step = 0;

    static OptimizerState create(const OptimizerConfig& config, const TransformerBlockSpec& model,
                                 const std::vector<TrainableRegion>& regions);
    std::size_t bytes() const;
};

/// One optimizer step touching only region entries. Rejects non-finite
/// gradients before anything is modified.
void step_inplace(TransformerBlockSpec& model, const std::vector<TrainableRegion>& regions, const RegionGradients& grads,
                  OptimizerState& state);

/// AdamW/SGD update of a dense parameter block; shared by every method.
void optimizer_update(Matrix& param, const Matrix& grad, Matrix& m, Matrix& v, const OptimizerConfig& config,
                      std::size_t step, double lr_scale = 1.0);

// ---------------------------------------------------------------------------
// Baselines

struct LoraAdapter {
    WeightId weight = WeightId::O;
    Matrix U;  ///< d_out×r
    Matrix V;  ///< d_in×r, zero at init
    double alpha = 1.0;

    std::size_t rank() const { return U.cols(); }
    Matrix delta() const;  ///< alpha·UVᵀ
};

struct LoraSet {
    std::vector<LoraAdapter> adapters;

    const LoraAdapter* find(WeightId id) const;
    ProjectionHook hook() const;
    TransformerBlockSpec merged(const TransformerBlockSpec& base) const;
    std::size_t parameter_count() const;
};

LoraSet init_lora(const TransformerBlockSpec& model, const std::vector<WeightId>& weights, std::size_t rank,
                  double alpha, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Training loop

enum class Method { S2FT, LoRA, FullFT, UnstructuredSparse };
const char* method_name(Method m);  // "s2ft", "lora", "full", "spft"
Method parse_method(std::string_view s);

struct Dataset {
    std::vector<Matrix> inputs;   ///< each tokens×d
    std::vector<Matrix> targets;  ///< matching shapes
    std::size_t size() const { return inputs.size(); }
    void validate(std::size_t d) const;
};

json dataset_to_json(const Dataset& data);
Dataset dataset_from_json(const json& j);

struct TrainConfig {
    Method method = Method::S2FT;
    std::size_t epochs = 1;
    std::size_t batch_size = 1;
    std::uint64_t seed = 0;
    OptimizerConfig optimizer;
    bool shuffle = true;

    // S2FT
    SelectionMask mask;
    // LoRA
    std::size_t lora_rank = 4;
    double lora_alpha = 1.0;
    double lora_lr_scale_u = 1.0;
    double lora_lr_scale_v = 1.0;
    // FullFT, LoRA and SpFT act on these projections
    TrainableProjections projections;
    // SpFT
    double sparse_ratio = 0.01;
};

json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const json& j);

struct TrainResult {
    bool ok = true;
    std::string diagnostic;
    TransformerBlockSpec model;      ///< for S2FT: the permuted, trained model
    std::optional<PermutationPlan> plan;
    std::optional<LoraSet> lora;
    std::vector<double> losses;      ///< batch loss before each step
    std::vector<TrainableRegion> regions;
    /// SpFT: boolean masks (1.0 = trainable) per projection.
    std::map<WeightId, Matrix> sparse_masks;
};

/// Per-step callback, called after the update with (step, loss, model).
using StepObserver = std::function<void(std::size_t, double, const TransformerBlockSpec&)>;

TrainResult train_loop(const TransformerBlockSpec& model, const Dataset& data, const TrainConfig& config,
                       const StepObserver& observer = nullptr);

/// Mean loss over the listed sequences.
double batch_loss(const TransformerBlockSpec& model, const Dataset& data, const std::vector<std::size_t>& batch);

// ---------------------------------------------------------------------------
// Analytic accounting

struct AccountingReport {
    std::size_t trainable_params = 0;
    std::size_t fwd_flops = 0;
    std::size_t bwd_flops = 0;
    std::size_t taped_bytes = 0;
    std::size_t optimizer_bytes = 0;

    std::size_t step_flops() const { return fwd_flops + bwd_flops; }
};

struct AccountingInput {
    Method method = Method::S2FT;
    std::size_t tokens = 16;
    OptimizerKind optimizer = OptimizerKind::AdamW;
    TrainableProjections projections;
    // S2FT: selected heads and channels
    std::size_t heads = 0;
    std::size_t channels = 0;
    // LoRA
    std::size_t rank = 0;
    // SpFT
    double sparse_ratio = 0.0;
};

/// Closed-form counts for one training step on a single sequence. A
/// multiply-add counts as 2 FLOPs; elementwise work is ignored.
AccountingReport accounting(const TransformerBlockSpec& model, const AccountingInput& in);

/// Largest rank whose LoRA parameter count on `weights` does not exceed `budget`.
std::size_t lora_rank_for_budget(const TransformerBlockSpec& model, const std::vector<WeightId>& weights,
                                 std::size_t budget);

json accounting_to_json(const AccountingReport& r);

}  // namespace s2ft
