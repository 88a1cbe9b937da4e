#include "s2ft/permute.hpp"

#include <algorithm>

#include "s2ft/error.hpp"

namespace s2ft {

namespace {

StructureKind parse_structure_kind(const std::string& s) {
    for (StructureKind k : {StructureKind::MhaBasic, StructureKind::FfnBasic, StructureKind::Residual})
        if (s == structure_kind_name(k)) return k;
    throw FormatError("unknown structure kind '" + s + "'");
}

StructurePermutation make_structure(const CoupledStructure& cs, const std::vector<std::size_t>& selected) {
    std::vector<std::size_t> chosen = selected;
    std::sort(chosen.begin(), chosen.end());
    if (std::adjacent_find(chosen.begin(), chosen.end()) != chosen.end()) {
        throw ArgumentError(cs.activation + ": duplicate selected index");
    }
    if (!chosen.empty() && chosen.back() >= cs.axis_len) {
        throw ArgumentError(cs.activation + ": selected index " + std::to_string(chosen.back()) + " out of range [0," +
                            std::to_string(cs.axis_len) + ")");
    }
    std::vector<bool> taken(cs.axis_len, false);
    for (std::size_t i : chosen) taken[i] = true;
    std::vector<std::size_t> order = chosen;
    for (std::size_t i = 0; i < cs.axis_len; ++i)
        if (!taken[i]) order.push_back(i);

    StructurePermutation sp;
    sp.kind = cs.kind;
    sp.activation = cs.activation;
    for (const auto& p : cs.producers) sp.producers.push_back(parse_weight(p));
    for (const auto& c : cs.consumers) sp.consumers.push_back(parse_weight(c));
    sp.granule = cs.granule;
    sp.n_selected = chosen.size();
    sp.slots = IndexPermutation(std::move(order));
    return sp;
}

}  // namespace

const StructurePermutation& PermutationPlan::find(StructureKind kind) const {
    for (const auto& s : structures)
        if (s.kind == kind) return s;
    throw LookupError(std::string("plan has no ") + structure_kind_name(kind) + " structure");
}

PermutationPlan plan_permutation(const SelectionMask& mask, const std::vector<CoupledStructure>& structures) {
    PermutationPlan plan;
    plan.wide = mask.wide;
    for (const auto& cs : structures) {
        if (cs.kind == StructureKind::Residual) continue;
        const auto& sel = cs.kind == StructureKind::MhaBasic ? mask.mha_heads : mask.ffn_channels;
        StructurePermutation sp = make_structure(cs, sel);
        const std::size_t len = sp.n_selected * sp.granule;
        if (len > 0) {
            for (WeightId c : sp.consumers) plan.trainable_ranges.push_back({c, Axis::Cols, 0, len});
            if (mask.wide) {
                for (WeightId p : sp.producers) plan.trainable_ranges.push_back({p, Axis::Rows, 0, len});
            }
        }
        plan.structures.push_back(std::move(sp));
    }
    std::sort(plan.trainable_ranges.begin(), plan.trainable_ranges.end(),
              [](const TrainableRegion& a, const TrainableRegion& b) { return a.weight < b.weight; });
    return plan;
}

TransformerBlockSpec apply_permutation(const TransformerBlockSpec& model, const PermutationPlan& plan, PermuteSides sides) {
    model.validate();
    TransformerBlockSpec out = model;
    for (const auto& sp : plan.structures) {
        const IndexPermutation perm = sp.elements();
        for (WeightId p : sp.producers) out.weight(p) = permute_axis(out.weight(p), perm, Axis::Rows);
        if (sides == PermuteSides::Both) {
            for (WeightId c : sp.consumers) out.weight(c) = permute_axis(out.weight(c), perm, Axis::Cols);
        }
    }
    return out;
}

PermutationPlan inverse_plan(const PermutationPlan& plan) {
    PermutationPlan inv;
    inv.wide = plan.wide;
    for (const auto& sp : plan.structures) {
        StructurePermutation r = sp;
        r.slots = sp.slots.inverted();
        r.n_selected = 0;
        inv.structures.push_back(std::move(r));
    }
    return inv;
}

InvarianceReport verify_output_invariance(const TransformerBlockSpec& original, const TransformerBlockSpec& permuted,
                                          const Matrix& X, double tol) {
    if (original.d != permuted.d || original.h != permuted.h || original.k != permuted.k) {
        throw ShapeError("verify_output_invariance: models differ in dims");
    }
    InvarianceReport r;
    r.max_abs_diff = max_abs_diff(forward_output(original, X), forward_output(permuted, X));
    r.pass = r.max_abs_diff <= tol;
    return r;
}

json plan_to_json(const PermutationPlan& plan) {
    json j;
    j["schema_version"] = 1;
    j["wide"] = plan.wide;
    json st = json::array();
    for (const auto& sp : plan.structures) {
        json ps = json::array(), cs = json::array();
        for (WeightId p : sp.producers) ps.push_back(weight_name(p));
        for (WeightId c : sp.consumers) cs.push_back(weight_name(c));
        st.push_back({{"kind", structure_kind_name(sp.kind)},
                      {"activation", sp.activation},
                      {"producers", ps},
                      {"consumers", cs},
                      {"granule", sp.granule},
                      {"n_selected", sp.n_selected},
                      {"order", sp.slots.order()}});
    }
    j["structures"] = st;
    json rg = json::array();
    for (const auto& r : plan.trainable_ranges) {
        rg.push_back({{"weight", weight_name(r.weight)}, {"axis", axis_name(r.axis)}, {"start", r.start}, {"end", r.end}});
    }
    j["trainable_ranges"] = rg;
    return j;
}

PermutationPlan plan_from_json(const json& j) {
    check_schema_version(j, 1, "plan");
    try {
        PermutationPlan plan;
        plan.wide = j.value("wide", false);
        for (const auto& s : j.at("structures")) {
            StructurePermutation sp;
            sp.kind = parse_structure_kind(s.at("kind").get<std::string>());
            sp.activation = s.at("activation").get<std::string>();
            for (const auto& p : s.at("producers")) sp.producers.push_back(parse_weight(p.get<std::string>()));
            for (const auto& c : s.at("consumers")) sp.consumers.push_back(parse_weight(c.get<std::string>()));
            sp.granule = s.at("granule").get<std::size_t>();
            sp.n_selected = s.at("n_selected").get<std::size_t>();
            sp.slots = IndexPermutation(s.at("order").get<std::vector<std::size_t>>());
            if (sp.granule == 0 || sp.n_selected > sp.slots.size()) throw FormatError("plan: inconsistent structure");
            plan.structures.push_back(std::move(sp));
        }
        for (const auto& r : j.at("trainable_ranges")) {
            TrainableRegion tr;
            tr.weight = parse_weight(r.at("weight").get<std::string>());
            tr.axis = parse_axis(r.at("axis").get<std::string>());
            tr.start = r.at("start").get<std::size_t>();
            tr.end = r.at("end").get<std::size_t>();
            if (tr.start >= tr.end) throw FormatError("plan: empty trainable range");
            plan.trainable_ranges.push_back(tr);
        }
        return plan;
    } catch (const json::exception& e) {
        throw FormatError(std::string("plan json: ") + e.what());
    }
}

}  // namespace s2ft
