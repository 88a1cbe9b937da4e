#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "s2ft/linalg.hpp"

namespace s2ft {

/// The seven projections of a block. Weights are stored out×in, tokens are
/// rows, so a projection computes X·Wᵀ.
enum class WeightId { Q = 0, K, V, O, Up, Gate, Down };

inline constexpr std::array<WeightId, 7> kAllWeights = {WeightId::Q,  WeightId::K,    WeightId::V,   WeightId::O,
                                                        WeightId::Up, WeightId::Gate, WeightId::Down};

const char* weight_name(WeightId id);  // "Wq", "Wk", ...
WeightId parse_weight(std::string_view name);

struct BlockConfig {
    std::size_t d = 64;
    std::size_t h = 8;
    std::size_t k = 128;
    bool causal = false;
    std::uint64_t seed = 0;
};

/// Toy LLaMA-style block: multi-head attention and a SwiGLU FFN, each wrapped
/// in a residual connection. No norms.
struct TransformerBlockSpec {
    std::size_t d = 0;
    std::size_t h = 0;
    std::size_t k = 0;
    bool causal = false;
    Matrix Wq, Wk, Wv, Wo;  // d×d
    Matrix Wup, Wgate;      // k×d
    Matrix Wdown;           // d×k

    std::size_t head_dim() const { return d / h; }
    Matrix& weight(WeightId id);
    const Matrix& weight(WeightId id) const;
    /// Throws ConfigError / ShapeError when dims or weight shapes disagree.
    void validate() const;
    std::size_t parameter_count() const;
};

struct DeepLinearNet {
    std::vector<std::size_t> dims;  ///< [d_0 = p, d_1, ..., d_L = q]
    std::vector<Matrix> layers;     ///< layers[l-1] is W_l, shaped d_l × d_{l-1}

    std::size_t depth() const { return layers.size(); }
    std::size_t input_dim() const { return dims.front(); }
    std::size_t output_dim() const { return dims.back(); }
    const Matrix& layer(std::size_t l) const { return layers.at(l - 1); }  // 1-based
    Matrix& layer(std::size_t l) { return layers.at(l - 1); }
    void validate() const;
};

/// Gaussian init with std 1/sqrt(fan_in), drawn in the fixed order
/// Wq, Wk, Wv, Wo, Wup, Wgate, Wdown.
TransformerBlockSpec init_block(const BlockConfig& config);
DeepLinearNet init_linear_net(const std::vector<std::size_t>& dims, std::uint64_t seed);

struct ActivationTrace {
    Matrix X;
    Matrix Q, K, V;          ///< tokens×d, head i owns columns [i·d_h, (i+1)·d_h)
    std::vector<Matrix> P;   ///< per head, tokens×tokens softmax weights
    Matrix Attn;             ///< tokens×d concatenated head outputs
    Matrix Y1;               ///< residual stream after attention
    Matrix U, G;             ///< tokens×k up and gate projections
    Matrix H;                ///< U ⊙ SiLU(G), the FFN inner activation
    Matrix Y;
};

double silu(double x);
double silu_grad(double x);

/// Softmax over each row with the max subtracted first.
Matrix softmax_rows(const Matrix& scores);

ActivationTrace forward_block(const TransformerBlockSpec& spec, const Matrix& X);

/// Called after each projection out = in·Wᵀ so callers can add an unmerged
/// side path (LoRA) before the result is used.
using ProjectionHook = std::function<void(WeightId id, const Matrix& in, Matrix& out)>;
ActivationTrace forward_block(const TransformerBlockSpec& spec, const Matrix& X, const ProjectionHook& hook);
Matrix forward_output(const TransformerBlockSpec& spec, const Matrix& X);

std::vector<double> forward_linear_chain(const DeepLinearNet& net, std::span<const double> x);
/// W_hi ⋯ W_lo (1-based, inclusive). An empty range (hi < lo) gives I_{d_hi}.
Matrix chain_product(const DeepLinearNet& net, std::size_t lo, std::size_t hi);

// Checkpoint: little-endian binary
//   "S2FTCKPT" | u32 version | u32 flags (bit 0 = causal) | u64 d | u64 h | u64 k
//   | f64 row-major Wq, Wk, Wv, Wo, Wup, Wgate, Wdown
// plus a JSON sidecar at <path>.json with dims and seed.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const TransformerBlockSpec& spec, const std::string& path, std::uint64_t seed);
TransformerBlockSpec load_checkpoint(const std::string& path);

}  // namespace s2ft
