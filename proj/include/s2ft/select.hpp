#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "s2ft/io.hpp"
#include "s2ft/netspec.hpp"

namespace s2ft {

enum class Strategy { Random, Weight, Activation, Product, Gradient };
enum class Polarity { Largest, Smallest, NotApplicable };

const char* strategy_tag(Strategy s);  // "R", "W", "A", "S", "G"
Strategy parse_strategy(std::string_view tag);
const char* polarity_name(Polarity p);
Polarity parse_polarity(std::string_view name);

/// Which projections receive gradients. Narrow = {Wo, Wdown}; wide adds the
/// producer sides {Wq, Wk, Wv, Wup, Wgate}.
struct TrainableProjections {
    bool wide = false;

    std::vector<WeightId> weights() const;
    std::size_t mha_sides() const { return wide ? 4 : 1; }
    std::size_t ffn_sides() const { return wide ? 3 : 1; }
    /// Trainable entries contributed by one head / one channel.
    std::size_t head_cost(const TransformerBlockSpec& m) const { return mha_sides() * m.d * m.head_dim(); }
    std::size_t channel_cost(const TransformerBlockSpec& m) const { return ffn_sides() * m.d; }
    /// Parameters of all trainable projections (the budget denominator).
    std::size_t total(const TransformerBlockSpec& m) const;
};

struct SelectionBudget {
    double ratio = 0.0;
    std::size_t heads_per_block = 0;
    std::size_t ffn_channels_per_block = 0;
    std::size_t trainable_params = 0;
    std::size_t total_params = 0;

    double realized_ratio() const {
        return total_params == 0 ? 0.0 : static_cast<double>(trainable_params) / static_cast<double>(total_params);
    }
};

/// Heads get floor(ratio·h), so Wo and Wdown train the same fraction; the
/// rest of floor(ratio·total) goes to FFN channels (rounded down), spilling
/// back to heads only once every channel is taken.
SelectionBudget budget_from_ratio(double ratio, const TransformerBlockSpec& model, TrainableProjections proj = {});

/// s = floor(r·(d_out + d_in) / d_in): the row count whose d_in-wide rows hold
/// as many parameters as a rank-r factorization of a d_out×d_in update.
std::size_t sparsity_for_rank(std::size_t r, std::size_t d_out, std::size_t d_in);

struct SelectionMask {
    std::vector<std::size_t> mha_heads;     ///< sorted
    std::vector<std::size_t> ffn_channels;  ///< sorted, indices into the inner axis (length k)
    Strategy strategy = Strategy::Random;
    Polarity polarity = Polarity::NotApplicable;
    std::uint64_t seed = 0;
    bool wide = false;

    /// Throws ArgumentError on duplicates or out-of-range indices.
    void validate(const TransformerBlockSpec& model) const;
};

struct CalibrationBatch {
    Matrix inputs;
    std::optional<Matrix> targets;
};

/// ½‖Y − T‖²_F / tokens, the desk-scale training loss.
double mse_loss(const Matrix& Y, const Matrix& T);
/// dLoss/dY for mse_loss.
Matrix mse_grad(const Matrix& Y, const Matrix& T);

/// Per-slot scores; heads first, then channels.
struct SlotScores {
    std::vector<double> heads;
    std::vector<double> channels;
};
SlotScores score_slots(Strategy strategy, const TransformerBlockSpec& model, const CalibrationBatch* calib);

/// Indices of the `count` best scores under the polarity; ties go to the
/// smaller index. Returned sorted ascending.
std::vector<std::size_t> top_indices(const std::vector<double>& scores, std::size_t count, Polarity polarity);

SelectionMask select(Strategy strategy, Polarity polarity, const TransformerBlockSpec& model,
                     const CalibrationBatch* calib, const SelectionBudget& budget, std::uint64_t seed,
                     TrainableProjections proj = {});

json mask_to_json(const SelectionMask& mask, const SelectionBudget& budget);
SelectionMask mask_from_json(const json& j);
json calibration_to_json(const CalibrationBatch& calib);
CalibrationBatch calibration_from_json(const json& j);

}  // namespace s2ft
