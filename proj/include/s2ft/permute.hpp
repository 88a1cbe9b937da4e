#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "s2ft/depgraph.hpp"
#include "s2ft/select.hpp"

namespace s2ft {

struct TrainableRegion {
    WeightId weight = WeightId::Down;
    Axis axis = Axis::Cols;
    std::size_t start = 0;
    std::size_t end = 0;

    std::size_t length() const { return end - start; }
    /// Entries covered in a weight of the given shape.
    std::size_t entries(const Matrix& w) const { return length() * (axis == Axis::Rows ? w.cols() : w.rows()); }
    friend bool operator==(const TrainableRegion&, const TrainableRegion&) = default;
};

/// Permutation of one basic structure's shared axis, at slot granularity.
struct StructurePermutation {
    StructureKind kind = StructureKind::FfnBasic;
    std::string activation;
    std::vector<WeightId> producers;  ///< permuted along rows
    std::vector<WeightId> consumers;  ///< permuted along cols
    std::size_t granule = 1;
    std::size_t n_selected = 0;
    IndexPermutation slots;

    IndexPermutation elements() const { return slots.expand(granule); }
};

struct PermutationPlan {
    std::vector<StructurePermutation> structures;
    std::vector<TrainableRegion> trainable_ranges;
    bool wide = false;

    const StructurePermutation& find(StructureKind kind) const;  // throws LookupError
};

/// Selected slots first (ascending), then the rest (ascending). Residual
/// structures are ignored.
PermutationPlan plan_permutation(const SelectionMask& mask, const std::vector<CoupledStructure>& structures);

enum class PermuteSides { Both, ProducersOnly };

/// Returns a new model with each structure's producers permuted along rows and
/// consumers along columns by the same element order. ProducersOnly exists for
/// negative controls: it breaks the coupling on purpose.
TransformerBlockSpec apply_permutation(const TransformerBlockSpec& model, const PermutationPlan& plan,
                                       PermuteSides sides = PermuteSides::Both);

/// Plan undoing `plan`; its trainable ranges are empty.
PermutationPlan inverse_plan(const PermutationPlan& plan);

struct InvarianceReport {
    double max_abs_diff = 0.0;
    bool pass = false;
};

InvarianceReport verify_output_invariance(const TransformerBlockSpec& original, const TransformerBlockSpec& permuted,
                                          const Matrix& X, double tol);

json plan_to_json(const PermutationPlan& plan);
PermutationPlan plan_from_json(const json& j);

}  // namespace s2ft
