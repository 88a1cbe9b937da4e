#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "s2ft/depgraph.hpp"
#include "s2ft/error.hpp"
#include "s2ft/permute.hpp"
#include "s2ft/random.hpp"
#include "s2ft/select.hpp"
#include "s2ft/sparsetrain.hpp"

using namespace s2ft;

namespace {

const CoupledStructure& find_structure(const std::vector<CoupledStructure>& all, const std::string& act) {
    for (const auto& s : all)
        if (s.activation == act) return s;
    FAIL("missing structure " << act);
    return all.front();
}

}  // namespace

TEST_CASE("block graph exposes the attention, residual and FFN couplings") {
    const TransformerBlockSpec m = init_block({16, 4, 24, false, 1});
    const DependencyGraph g = build_graph(m);
    const auto all = discover_coupled(g);
    REQUIRE(all.size() == 3);

    const auto& mha = find_structure(all, "attn_heads");
    CHECK(mha.kind == StructureKind::MhaBasic);
    CHECK(mha.producers == std::vector<std::string>{"Wq", "Wk", "Wv"});
    CHECK(mha.consumers == std::vector<std::string>{"Wo"});
    CHECK(mha.axis_len == 4);
    CHECK(mha.granule == 4);

    const auto& ffn = find_structure(all, "ffn_inner");
    CHECK(ffn.kind == StructureKind::FfnBasic);
    CHECK(ffn.producers == std::vector<std::string>{"Wup", "Wgate"});
    CHECK(ffn.consumers == std::vector<std::string>{"Wdown"});
    CHECK(ffn.element_len() == 24);

    // The residual stream is fed by a skip edge, so it may not be permuted.
    CHECK(find_structure(all, "residual_mid").kind == StructureKind::Residual);
    CHECK(basic_structures(all).size() == 2);

    const std::size_t wo = g.find("Wo");
    CHECK(g.out_degree(wo) == 1);
    CHECK(g.in_degree(wo) == 1);
    CHECK(g.has_skip(g.find("residual_mid")));
    CHECK_THROWS_AS(g.find("nope"), LookupError);

    const json j = graph_to_json(g, all);
    CHECK(j["structures"].size() == 3);
    CHECK(j["edges"].size() == g.edges.size());
}

TEST_CASE("deep linear chain has one coupling per hidden layer") {
    const DeepLinearNet net = init_linear_net({3, 5, 4, 2}, 0);
    const auto all = discover_coupled(build_graph(net));
    REQUIRE(all.size() == 2);
    CHECK(all[0].activation == "a1");
    CHECK(all[0].producers == std::vector<std::string>{"W1"});
    CHECK(all[0].consumers == std::vector<std::string>{"W2"});
    CHECK(all[0].axis_len == 5);
    CHECK(all[1].axis_len == 4);
}

TEST_CASE("budget from ratio follows the head-first rule") {
    const TransformerBlockSpec m = init_block({64, 8, 128, false, 0});
    // Narrow: head cost 64·8, channel cost 64, total 64·64 + 64·128.
    const SelectionBudget b = budget_from_ratio(0.1, m);
    CHECK(b.total_params == 12288);
    CHECK(b.heads_per_block == 0);              // floor(0.8)
    CHECK(b.ffn_channels_per_block == 19);      // floor(1228 / 64)
    CHECK(b.trainable_params == 19 * 64);

    const SelectionBudget b2 = budget_from_ratio(0.25, m);
    CHECK(b2.heads_per_block == 2);
    CHECK(b2.ffn_channels_per_block == (3072 - 2 * 512) / 64);

    const SelectionBudget full = budget_from_ratio(1.0, m);
    CHECK(full.heads_per_block == 8);
    CHECK(full.ffn_channels_per_block == 128);
    CHECK(full.realized_ratio() == 1.0);

    TrainableProjections wide;
    wide.wide = true;
    const SelectionBudget w = budget_from_ratio(0.5, m, wide);
    CHECK(w.total_params == m.parameter_count());
    CHECK(w.heads_per_block == 4);
    CHECK(w.trainable_params <= static_cast<std::size_t>(std::floor(0.5 * m.parameter_count())));

    CHECK_THROWS_AS(budget_from_ratio(0.0, m), ArgumentError);
    CHECK_THROWS_AS(budget_from_ratio(1.5, m), ArgumentError);
}

TEST_CASE("sparsity for rank") {
    CHECK(sparsity_for_rank(16, 4096, 4096) == 32);
    CHECK(sparsity_for_rank(16, 64, 64) == 32);
    CHECK(sparsity_for_rank(8, 64, 128) == 12);  // floor(8·192/128)
    CHECK_THROWS_AS(sparsity_for_rank(1, 4, 0), ArgumentError);
}

TEST_CASE("top indices: polarity and ties") {
    const std::vector<double> s{3.0, 1.0, 3.0, 0.5, 2.0};
    CHECK(top_indices(s, 2, Polarity::Largest) == std::vector<std::size_t>{0, 2});
    CHECK(top_indices(s, 2, Polarity::Smallest) == std::vector<std::size_t>{1, 3});
    CHECK(top_indices(s, 3, Polarity::Largest) == std::vector<std::size_t>{0, 2, 4});
    CHECK(top_indices(s, 0, Polarity::Largest).empty());
    CHECK_THROWS_AS(top_indices(s, 6, Polarity::Largest), ArgumentError);
}

TEST_CASE("selection strategies score the documented quantities") {
    const TransformerBlockSpec m = init_block({16, 4, 24, false, 5});
    Rng rng(6);
    CalibrationBatch calib{gaussian_matrix(6, 16, 1.0, rng), gaussian_matrix(6, 16, 1.0, rng)};
    const SelectionBudget budget{0.0, 2, 5, 0, 0};

    auto col_norm = [](const Matrix& w, std::size_t j) {
        double s = 0.0;
        for (std::size_t i = 0; i < w.rows(); ++i) s += w(i, j) * w(i, j);
        return std::sqrt(s);
    };
    auto head_norm = [](const Matrix& w, std::size_t h, std::size_t dh) {
        double s = 0.0;
        for (std::size_t i = 0; i < w.rows(); ++i)
            for (std::size_t j = h * dh; j < (h + 1) * dh; ++j) s += w(i, j) * w(i, j);
        return std::sqrt(s);
    };

    const SlotScores w = score_slots(Strategy::Weight, m, nullptr);
    for (std::size_t j = 0; j < m.k; ++j) CHECK(w.channels[j] == doctest::Approx(col_norm(m.Wdown, j)));
    for (std::size_t h = 0; h < m.h; ++h) CHECK(w.heads[h] == doctest::Approx(head_norm(m.Wo, h, 4)));

    const ActivationTrace t = forward_block(m, calib.inputs);
    const SlotScores a = score_slots(Strategy::Activation, m, &calib);
    for (std::size_t j = 0; j < m.k; ++j) CHECK(a.channels[j] == doctest::Approx(col_norm(t.H, j)));
    const SlotScores p = score_slots(Strategy::Product, m, &calib);
    for (std::size_t j = 0; j < m.k; ++j) CHECK(p.channels[j] == doctest::Approx(col_norm(t.H, j) * col_norm(m.Wdown, j)));

    // Gradient scores: column norms of dL/dWdown = dYᵀ H.
    const SlotScores g = score_slots(Strategy::Gradient, m, &calib);
    const Matrix gd = matmul_tn(mse_grad(t.Y, *calib.targets), t.H);
    for (std::size_t j = 0; j < m.k; ++j) CHECK(g.channels[j] == doctest::Approx(col_norm(gd, j)));

    const SelectionMask big = select(Strategy::Weight, Polarity::Largest, m, nullptr, budget, 0);
    CHECK(big.ffn_channels == top_indices(w.channels, 5, Polarity::Largest));
    const SelectionMask small = select(Strategy::Weight, Polarity::Smallest, m, nullptr, budget, 0);
    CHECK(small.mha_heads == top_indices(w.heads, 2, Polarity::Smallest));

    CHECK_THROWS_AS(select(Strategy::Activation, Polarity::Largest, m, nullptr, budget, 0), ArgumentError);
    CHECK_THROWS_AS(select(Strategy::Weight, Polarity::NotApplicable, m, nullptr, budget, 0), ArgumentError);
    CalibrationBatch no_targets{calib.inputs, std::nullopt};
    CHECK_THROWS_AS(select(Strategy::Gradient, Polarity::Largest, m, &no_targets, budget, 0), ArgumentError);
}

TEST_CASE("random selection is seeded and json round trips") {
    const TransformerBlockSpec m = init_block({16, 4, 24, false, 5});
    const SelectionBudget budget = budget_from_ratio(0.3, m);
    const SelectionMask a = select(Strategy::Random, Polarity::NotApplicable, m, nullptr, budget, 3);
    const SelectionMask b = select(Strategy::Random, Polarity::NotApplicable, m, nullptr, budget, 3);
    CHECK(a.mha_heads == b.mha_heads);
    CHECK(a.ffn_channels == b.ffn_channels);
    CHECK(a.ffn_channels.size() == budget.ffn_channels_per_block);
    const SelectionMask r = mask_from_json(mask_to_json(a, budget));
    CHECK(r.mha_heads == a.mha_heads);
    CHECK(r.ffn_channels == a.ffn_channels);
    CHECK(r.seed == 3);

    SelectionMask bad = a;
    bad.ffn_channels.push_back(bad.ffn_channels.front());
    CHECK_THROWS_AS(bad.validate(m), ArgumentError);
    bad = a;
    bad.mha_heads = {4};
    CHECK_THROWS_AS(bad.validate(m), ArgumentError);

    json wrong = mask_to_json(a, budget);
    wrong["schema_version"] = 99;
    CHECK_THROWS_AS(mask_from_json(wrong), ConfigError);
}

TEST_CASE("co-permutation keeps outputs and moves the selection to the front") {
    const TransformerBlockSpec m = init_block({16, 4, 24, true, 8});
    SelectionMask mask;
    mask.mha_heads = {1, 3};
    mask.ffn_channels = {2, 7, 20};
    const auto structures = discover_coupled(build_graph(m));
    const PermutationPlan plan = plan_permutation(mask, structures);
    const TransformerBlockSpec p = apply_permutation(m, plan);

    Rng rng(1);
    const Matrix X = gaussian_matrix(6, 16, 1.0, rng);
    const InvarianceReport ok = verify_output_invariance(m, p, X, 1e-10);
    CHECK(ok.pass);
    CHECK(ok.max_abs_diff <= 1e-10);

    // Selected Wdown columns now occupy [0, 3).
    std::set<std::size_t> moved;
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t j : mask.ffn_channels)
            if (bit_equal(slice_cols(p.Wdown, c, c + 1), slice_cols(m.Wdown, j, j + 1))) moved.insert(j);
    CHECK(moved.size() == 3);

    REQUIRE(plan.trainable_ranges.size() == 2);
    for (const auto& r : plan.trainable_ranges) {
        CHECK(r.start == 0);
        if (r.weight == WeightId::O) CHECK(r.end == 2 * 4);
        if (r.weight == WeightId::Down) CHECK(r.end == 3);
    }

    const TransformerBlockSpec back = apply_permutation(p, inverse_plan(plan));
    for (WeightId id : kAllWeights) CHECK(bit_equal(back.weight(id), m.weight(id)));

    const TransformerBlockSpec broken = apply_permutation(m, plan, PermuteSides::ProducersOnly);
    CHECK_FALSE(verify_output_invariance(m, broken, X, 1e-10).pass);

    const PermutationPlan again = plan_from_json(plan_to_json(plan));
    CHECK(again.trainable_ranges == plan.trainable_ranges);
    CHECK(again.find(StructureKind::FfnBasic).slots == plan.find(StructureKind::FfnBasic).slots);
}

TEST_CASE("wide plans add producer-side regions") {
    const TransformerBlockSpec m = init_block({16, 4, 24, false, 8});
    SelectionMask mask;
    mask.mha_heads = {2};
    mask.ffn_channels = {5, 6};
    mask.wide = true;
    const PermutationPlan plan = plan_permutation(mask, discover_coupled(build_graph(m)));
    CHECK(plan.trainable_ranges.size() == 7);
    for (const auto& r : plan.trainable_ranges) {
        const bool producer = r.weight != WeightId::O && r.weight != WeightId::Down;
        CHECK(r.axis == (producer ? Axis::Rows : Axis::Cols));
    }
}
