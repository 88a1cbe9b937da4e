#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "s2ft/io.hpp"
#include "s2ft/permute.hpp"
#include "s2ft/sparsetrain.hpp"

namespace s2ft {

/// ΔW restricted to a set of rows or columns of one weight, keyed by original
/// (pre-permutation) indices. V is the gathered slice in the weight's own
/// orientation: rows×s for a column set, s×cols for a row set.
struct SparseAdapter {
    WeightId weight_id = WeightId::Down;
    Axis axis = Axis::Cols;
    std::vector<std::size_t> indices;  ///< ascending, distinct
    Matrix V;
    std::uint64_t base_fingerprint = 0;
    std::string plan_ref;

    std::size_t s() const { return indices.size(); }
    /// Throws ArgumentError when shapes or indices are inconsistent with `w`.
    void validate(const Matrix& w) const;
    /// Dense ΔW of the same shape as the base weight.
    Matrix scatter(std::size_t rows, std::size_t cols) const;
};

/// Unmerged LoRA update plus the fingerprint of the base it belongs to.
struct LoraRecord {
    LoraAdapter adapter;
    std::uint64_t base_fingerprint = 0;
};

using AdapterEntry = std::variant<SparseAdapter, LoraRecord>;

WeightId adapter_weight(const AdapterEntry& e);

/// Primitive counts for one lifecycle scenario.
struct OpCountReport {
    std::string scenario;
    std::map<std::string, std::size_t> counts;  ///< matmul, add, scatter_add, scatter, gather
    std::vector<std::string> operand_dims;
    std::vector<std::map<std::string, std::size_t>> per_request;  ///< parallel scenario only

    std::size_t count(const std::string& op) const;
    void record(const std::string& op, const std::string& dims);
};

json op_report_to_json(const OpCountReport& r);

struct FusedState {
    std::string adapter_id;
    Matrix saved;  ///< original slice (sparse) or whole weight (LoRA)
};

class AdapterRegistry {
public:
    void add(const std::string& id, AdapterEntry entry);
    bool contains(const std::string& id) const { return adapters_.count(id) != 0; }
    const AdapterEntry& get(const std::string& id) const;  // throws LookupError
    std::vector<std::string> ids() const;

    std::optional<std::string> fused_on(WeightId w) const;
    const std::map<WeightId, FusedState>& fused() const { return fused_; }

    /// Directory layout: index.json, <id>.adpt/.lora (+ .json sidecars),
    /// saved_<weight>.bin for every fused weight.
    void save(const std::string& dir) const;
    static AdapterRegistry load(const std::string& dir);

private:
    friend void fuse(TransformerBlockSpec&, const std::string&, AdapterRegistry&, OpCountReport*);
    friend void unfuse(TransformerBlockSpec&, const std::string&, AdapterRegistry&, OpCountReport*);
    std::map<std::string, AdapterEntry> adapters_;
    std::map<WeightId, FusedState> fused_;
};

/// Offsets beyond which an off-support delta counts as a training/selection mismatch.
inline constexpr double kOffSupportTolerance = 1e-12;

/// One adapter per trainable range of the plan. `fine_tuned` is in the
/// permuted layout the plan produced, `base` in the original layout.
std::vector<SparseAdapter> extract(const TransformerBlockSpec& fine_tuned, const TransformerBlockSpec& base,
                                   const PermutationPlan& plan, const std::string& plan_ref = "");

/// Saves the touched slice, then adds the delta. Errors: StateError if the
/// weight already carries an adapter, IntegrityError on fingerprint mismatch.
void fuse(TransformerBlockSpec& model, const std::string& adapter_id, AdapterRegistry& registry,
          OpCountReport* report = nullptr);
/// Applies the inverse delta (counted), then restores the saved slice so the
/// result is bit-exact.
void unfuse(TransformerBlockSpec& model, const std::string& adapter_id, AdapterRegistry& registry,
            OpCountReport* report = nullptr);

OpCountReport switch_adapter(TransformerBlockSpec& model, const std::string& from_id, const std::string& to_id,
                             AdapterRegistry& registry);

/// Weighted sum over the union of supports.
SparseAdapter weighted_fuse(const std::vector<SparseAdapter>& adapters, const std::vector<double>& weights);

/// Unmerged forward hook adding the adapter's path to its projection.
ProjectionHook adapter_hook(const AdapterEntry& entry);

struct ParallelRequest {
    std::string adapter_id;
    Matrix x;  ///< tokens×d_in of the adapter's weight
};

struct ParallelResult {
    std::vector<Matrix> outputs;
    OpCountReport report;
};

/// Base projections are computed in one batched matmul per weight; each
/// request then adds its own adapter path.
ParallelResult parallel_apply(const TransformerBlockSpec& base, const AdapterRegistry& registry,
                              const std::vector<ParallelRequest>& requests);

// Adapter file: "S2FTADPT" | u32 version | u32 weight | u32 axis | u64 rows | u64 cols
//   | u64 s | s × u32 indices | f64 V row-major; sidecar <path>.json.
inline constexpr std::uint32_t kAdapterVersion = 1;
void save_adapter(const SparseAdapter& a, const std::string& path);
SparseAdapter load_adapter(const std::string& path);

}  // namespace s2ft
