#include "s2ft/select.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "s2ft/error.hpp"
#include "s2ft/random.hpp"
#include "s2ft/sparsetrain.hpp"

namespace s2ft {

namespace {

double col_block_norm(const Matrix& m, std::size_t c0, std::size_t c1) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = c0; j < c1; ++j) s += m(i, j) * m(i, j);
    return std::sqrt(s);
}

std::vector<double> head_norms(const Matrix& m, std::size_t h, std::size_t dh) {
    std::vector<double> out(h);
    for (std::size_t i = 0; i < h; ++i) out[i] = col_block_norm(m, i * dh, (i + 1) * dh);
    return out;
}

std::vector<double> column_norms(const Matrix& m) {
    std::vector<double> out(m.cols());
    for (std::size_t j = 0; j < m.cols(); ++j) out[j] = col_block_norm(m, j, j + 1);
    return out;
}

}  // namespace

const char* strategy_tag(Strategy s) {
    switch (s) {
        case Strategy::Random: return "R";
        case Strategy::Weight: return "W";
        case Strategy::Activation: return "A";
        case Strategy::Product: return "S";
        case Strategy::Gradient: return "G";
    }
    return "?";
}

Strategy parse_strategy(std::string_view tag) {
    for (Strategy s : {Strategy::Random, Strategy::Weight, Strategy::Activation, Strategy::Product, Strategy::Gradient})
        if (tag == strategy_tag(s)) return s;
    throw ArgumentError("unknown selection strategy '" + std::string(tag) + "' (expected R, W, A, S or G)");
}

const char* polarity_name(Polarity p) {
    switch (p) {
        case Polarity::Largest: return "largest";
        case Polarity::Smallest: return "smallest";
        case Polarity::NotApplicable: return "n/a";
    }
    return "?";
}

Polarity parse_polarity(std::string_view name) {
    if (name == "largest") return Polarity::Largest;
    if (name == "smallest") return Polarity::Smallest;
    if (name == "n/a") return Polarity::NotApplicable;
    throw ArgumentError("unknown polarity '" + std::string(name) + "'");
}

std::vector<WeightId> TrainableProjections::weights() const {
    if (wide) return {kAllWeights.begin(), kAllWeights.end()};
    return {WeightId::O, WeightId::Down};
}

std::size_t TrainableProjections::total(const TransformerBlockSpec& m) const {
    return m.h * head_cost(m) + m.k * channel_cost(m);
}

SelectionBudget budget_from_ratio(double ratio, const TransformerBlockSpec& model, TrainableProjections proj) {
    if (!(ratio > 0.0 && ratio <= 1.0)) throw ArgumentError("ratio must lie in (0, 1], got " + std::to_string(ratio));
    model.validate();
    const std::size_t hc = proj.head_cost(model);
    const std::size_t cc = proj.channel_cost(model);
    SelectionBudget b;
    b.ratio = ratio;
    b.total_params = proj.total(model);
    const auto target = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(b.total_params)));

    std::size_t heads = std::min(model.h, static_cast<std::size_t>(std::floor(ratio * static_cast<double>(model.h))));
    std::size_t left = target - heads * hc;
    std::size_t channels = std::min(model.k, left / cc);
    left -= channels * cc;
    if (channels == model.k) {
        const std::size_t extra = std::min(model.h - heads, left / hc);
        heads += extra;
    }
    b.heads_per_block = heads;
    b.ffn_channels_per_block = channels;
    b.trainable_params = heads * hc + channels * cc;
    return b;
}

std::size_t sparsity_for_rank(std::size_t r, std::size_t d_out, std::size_t d_in) {
    if (d_in == 0) throw ArgumentError("sparsity_for_rank: d_in must be positive");
    return r * (d_out + d_in) / d_in;
}

void SelectionMask::validate(const TransformerBlockSpec& model) const {
    auto check = [](const std::vector<std::size_t>& v, std::size_t n, const char* what) {
        std::vector<std::size_t> s = v;
        std::sort(s.begin(), s.end());
        if (std::adjacent_find(s.begin(), s.end()) != s.end()) throw ArgumentError(std::string(what) + ": duplicate index");
        if (!s.empty() && s.back() >= n) {
            throw ArgumentError(std::string(what) + ": index " + std::to_string(s.back()) + " out of range [0," +
                                std::to_string(n) + ")");
        }
    };
    check(mha_heads, model.h, "mha_heads");
    check(ffn_channels, model.k, "ffn_channels");
}

double mse_loss(const Matrix& Y, const Matrix& T) {
    if (Y.rows() != T.rows() || Y.cols() != T.cols()) throw ShapeError("mse_loss: target shape mismatch");
    return 0.5 * squared_norm(Y - T) / static_cast<double>(std::max<std::size_t>(Y.rows(), 1));
}

Matrix mse_grad(const Matrix& Y, const Matrix& T) {
    Matrix g = Y - T;
    g *= 1.0 / static_cast<double>(std::max<std::size_t>(Y.rows(), 1));
    return g;
}

SlotScores score_slots(Strategy strategy, const TransformerBlockSpec& model, const CalibrationBatch* calib) {
    model.validate();
    const std::size_t dh = model.head_dim();
    auto need_calib = [&](bool targets) {
        if (calib == nullptr || calib->inputs.rows() == 0) {
            throw ArgumentError(std::string("strategy ") + strategy_tag(strategy) + " requires a calibration batch");
        }
        if (calib->inputs.cols() != model.d) throw ShapeError("calibration inputs do not match model width");
        if (targets && !calib->targets) throw ArgumentError("strategy G requires calibration targets");
    };
    SlotScores s;
    switch (strategy) {
        case Strategy::Random:
            s.heads.assign(model.h, 0.0);
            s.channels.assign(model.k, 0.0);
            break;
        case Strategy::Weight:
            s.heads = head_norms(model.Wo, model.h, dh);
            s.channels = column_norms(model.Wdown);
            break;
        case Strategy::Activation:
        case Strategy::Product: {
            need_calib(false);
            const ActivationTrace t = forward_block(model, calib->inputs);
            s.heads = head_norms(t.Attn, model.h, dh);
            s.channels = column_norms(t.H);
            if (strategy == Strategy::Product) {
                const auto wh = head_norms(model.Wo, model.h, dh);
                const auto wc = column_norms(model.Wdown);
                for (std::size_t i = 0; i < model.h; ++i) s.heads[i] *= wh[i];
                for (std::size_t j = 0; j < model.k; ++j) s.channels[j] *= wc[j];
            }
            break;
        }
        case Strategy::Gradient: {
            need_calib(true);
            if (calib->targets->rows() != calib->inputs.rows() || calib->targets->cols() != model.d) {
                throw ShapeError("calibration targets do not match inputs");
            }
            const ActivationTrace t = forward_block(model, calib->inputs);
            const FullGradients g = full_grad_oracle(model, calib->inputs, mse_grad(t.Y, *calib->targets));
            s.heads = head_norms(g.Wo, model.h, dh);
            s.channels = column_norms(g.Wdown);
            break;
        }
    }
    return s;
}

std::vector<std::size_t> top_indices(const std::vector<double>& scores, std::size_t count, Polarity polarity) {
    if (count > scores.size()) throw ArgumentError("top_indices: count exceeds number of scores");
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (polarity == Polarity::Smallest) {
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    } else {
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    }
    idx.resize(count);
    std::sort(idx.begin(), idx.end());
    return idx;
}

SelectionMask select(Strategy strategy, Polarity polarity, const TransformerBlockSpec& model,
                     const CalibrationBatch* calib, const SelectionBudget& budget, std::uint64_t seed,
                     TrainableProjections proj) {
    model.validate();
    if (budget.heads_per_block > model.h || budget.ffn_channels_per_block > model.k) {
        throw ArgumentError("budget exceeds model head/channel counts");
    }
    SelectionMask m;
    m.strategy = strategy;
    m.seed = seed;
    m.wide = proj.wide;
    if (strategy == Strategy::Random) {
        m.polarity = Polarity::NotApplicable;
        Rng rng(seed);
        m.mha_heads = rng.sample_without_replacement(model.h, budget.heads_per_block);
        m.ffn_channels = rng.sample_without_replacement(model.k, budget.ffn_channels_per_block);
        return m;
    }
    if (polarity == Polarity::NotApplicable) throw ArgumentError("strategy " + std::string(strategy_tag(strategy)) + " needs a polarity");
    m.polarity = polarity;
    const SlotScores s = score_slots(strategy, model, calib);
    m.mha_heads = top_indices(s.heads, budget.heads_per_block, polarity);
    m.ffn_channels = top_indices(s.channels, budget.ffn_channels_per_block, polarity);
    return m;
}

json mask_to_json(const SelectionMask& mask, const SelectionBudget& budget) {
    json j;
    j["schema_version"] = 1;
    j["strategy"] = strategy_tag(mask.strategy);
    j["polarity"] = polarity_name(mask.polarity);
    j["seed"] = mask.seed;
    j["wide"] = mask.wide;
    j["budget"] = {{"ratio", budget.ratio},
                   {"heads_per_block", budget.heads_per_block},
                   {"ffn_channels_per_block", budget.ffn_channels_per_block},
                   {"trainable_params", budget.trainable_params},
                   {"total_params", budget.total_params}};
    j["blocks"] = json::array({{{"heads", mask.mha_heads}, {"channels", mask.ffn_channels}}});
    return j;
}

SelectionMask mask_from_json(const json& j) {
    check_schema_version(j, 1, "mask");
    try {
        SelectionMask m;
        m.strategy = parse_strategy(j.at("strategy").get<std::string>());
        m.polarity = parse_polarity(j.at("polarity").get<std::string>());
        m.seed = j.at("seed").get<std::uint64_t>();
        m.wide = j.value("wide", false);
        const json& blocks = j.at("blocks");
        if (blocks.size() != 1) throw ConfigError("mask: exactly one block supported");
        m.mha_heads = blocks[0].at("heads").get<std::vector<std::size_t>>();
        m.ffn_channels = blocks[0].at("channels").get<std::vector<std::size_t>>();
        std::sort(m.mha_heads.begin(), m.mha_heads.end());
        std::sort(m.ffn_channels.begin(), m.ffn_channels.end());
        return m;
    } catch (const json::exception& e) {
        throw FormatError(std::string("mask json: ") + e.what());
    }
}

json calibration_to_json(const CalibrationBatch& calib) {
    json j;
    j["schema_version"] = 1;
    j["inputs"] = matrix_to_json(calib.inputs);
    if (calib.targets) j["targets"] = matrix_to_json(*calib.targets);
    return j;
}

CalibrationBatch calibration_from_json(const json& j) {
    check_schema_version(j, 1, "calibration");
    CalibrationBatch c;
    c.inputs = matrix_from_json(j.at("inputs"));
    if (j.contains("targets")) c.targets = matrix_from_json(j["targets"]);
    if (c.inputs.rows() == 0) throw ArgumentError("calibration batch is empty");
    return c;
}

}  // namespace s2ft
