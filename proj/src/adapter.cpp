#include "s2ft/adapter.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>

#include "s2ft/error.hpp"

namespace s2ft {

namespace {

constexpr std::string_view kAdapterMagic = "S2FTADPT";
constexpr std::string_view kLoraMagic = "S2FTLORA";
constexpr std::string_view kSavedMagic = "S2FTSAVE";

std::string dims(const Matrix& m) { return std::to_string(m.rows()) + "x" + std::to_string(m.cols()); }

Matrix gather(const Matrix& w, const SparseAdapter& a) {
    return a.axis == Axis::Cols ? gather_cols(w, a.indices) : gather_rows(w, a.indices);
}

void scatter_into(Matrix& w, const SparseAdapter& a, const Matrix& slice) {
    for (std::size_t t = 0; t < a.indices.size(); ++t) {
        const std::size_t idx = a.indices[t];
        if (a.axis == Axis::Cols) {
            for (std::size_t i = 0; i < w.rows(); ++i) w(i, idx) = slice(i, t);
        } else {
            for (std::size_t j = 0; j < w.cols(); ++j) w(idx, j) = slice(t, j);
        }
    }
}

// Worst deviation of an inverse-applied delta from the saved original that we
// still attribute to rounding rather than to foreign writes.
double drift_tolerance(const Matrix& saved) { return 1e-9 * (1.0 + max_abs(saved)); }

void check_id(const std::string& id) {
    if (id.empty()) throw ArgumentError("adapter id must be non-empty");
    for (char c : id) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' || c == '-' || c == '.';
        if (!ok) throw ArgumentError("adapter id '" + id + "' contains characters outside [A-Za-z0-9_.-]");
    }
}

std::uint64_t entry_fingerprint(const AdapterEntry& e) {
    return std::visit([](const auto& x) { return x.base_fingerprint; }, e);
}

void save_lora(const LoraRecord& r, const std::string& path) {
    BinaryWriter w;
    w.bytes(kLoraMagic);
    w.u32(kAdapterVersion);
    w.u32(static_cast<std::uint32_t>(r.adapter.weight));
    w.u64(r.adapter.U.rows());
    w.u64(r.adapter.V.rows());
    w.u64(r.adapter.rank());
    w.f64(r.adapter.alpha);
    w.u64(r.base_fingerprint);
    w.matrix(r.adapter.U);
    w.matrix(r.adapter.V);
    w.save(path);
}

LoraRecord load_lora(const std::string& path) {
    BinaryReader rd = BinaryReader::from_file(path);
    rd.expect_magic(kLoraMagic);
    if (rd.u32() != kAdapterVersion) throw FormatError(path + ": unsupported LoRA file version");
    const std::uint32_t wid = rd.u32();
    if (wid > static_cast<std::uint32_t>(WeightId::Down)) throw FormatError(path + ": bad weight id");
    LoraRecord r;
    r.adapter.weight = static_cast<WeightId>(wid);
    const std::uint64_t dout = rd.u64(), din = rd.u64(), rank = rd.u64();
    if (dout > 65536 || din > 65536 || rank > 65536) throw FormatError(path + ": implausible dims");
    r.adapter.alpha = rd.f64();
    r.base_fingerprint = rd.u64();
    r.adapter.U = rd.matrix(dout, rank);
    r.adapter.V = rd.matrix(din, rank);
    if (!rd.at_end()) throw FormatError(path + ": trailing bytes");
    return r;
}

void save_matrix_file(const Matrix& m, const std::string& path) {
    BinaryWriter w;
    w.bytes(kSavedMagic);
    w.u64(m.rows());
    w.u64(m.cols());
    w.matrix(m);
    w.save(path);
}

Matrix load_matrix_file(const std::string& path) {
    BinaryReader rd = BinaryReader::from_file(path);
    rd.expect_magic(kSavedMagic);
    const std::uint64_t r = rd.u64(), c = rd.u64();
    if (r > 65536 || c > 65536) throw FormatError(path + ": implausible dims");
    Matrix m = rd.matrix(r, c);
    if (!rd.at_end()) throw FormatError(path + ": trailing bytes");
    return m;
}

}  // namespace

void SparseAdapter::validate(const Matrix& w) const {
    const std::size_t axis_len = axis == Axis::Cols ? w.cols() : w.rows();
    for (std::size_t t = 0; t < indices.size(); ++t) {
        if (indices[t] >= axis_len) throw ArgumentError("adapter index out of range");
        if (t > 0 && indices[t] <= indices[t - 1]) throw ArgumentError("adapter indices must be ascending and distinct");
    }
    const bool ok = axis == Axis::Cols ? (V.rows() == w.rows() && V.cols() == s()) : (V.rows() == s() && V.cols() == w.cols());
    if (!ok) throw ArgumentError("adapter V is " + dims(V) + ", inconsistent with weight " + dims(w) + " and s=" + std::to_string(s()));
}

Matrix SparseAdapter::scatter(std::size_t rows, std::size_t cols) const {
    Matrix out(rows, cols);
    scatter_into(out, *this, V);
    return out;
}

WeightId adapter_weight(const AdapterEntry& e) {
    if (const auto* s = std::get_if<SparseAdapter>(&e)) return s->weight_id;
    return std::get<LoraRecord>(e).adapter.weight;
}

std::size_t OpCountReport::count(const std::string& op) const {
    auto it = counts.find(op);
    return it == counts.end() ? 0 : it->second;
}

void OpCountReport::record(const std::string& op, const std::string& d) {
    counts[op] += 1;
    operand_dims.push_back(op + " " + d);
}

json op_report_to_json(const OpCountReport& r) {
    json j;
    j["scenario"] = r.scenario;
    json c = json::object();
    for (const char* op : {"matmul", "add", "scatter_add", "scatter", "gather"}) c[op] = r.count(op);
    j["counts"] = c;
    j["operand_dims"] = r.operand_dims;
    if (!r.per_request.empty()) {
        json pr = json::array();
        for (const auto& m : r.per_request) {
            json x = json::object();
            for (const auto& [k, v] : m) x[k] = v;
            pr.push_back(x);
        }
        j["per_request"] = pr;
    }
    return j;
}

void AdapterRegistry::add(const std::string& id, AdapterEntry entry) {
    check_id(id);
    if (adapters_.count(id)) throw StateError("adapter '" + id + "' already registered");
    adapters_.emplace(id, std::move(entry));
}

const AdapterEntry& AdapterRegistry::get(const std::string& id) const {
    auto it = adapters_.find(id);
    if (it == adapters_.end()) throw LookupError("unknown adapter '" + id + "'");
    return it->second;
}

std::vector<std::string> AdapterRegistry::ids() const {
    std::vector<std::string> out;
    for (const auto& [id, e] : adapters_) out.push_back(id);
    return out;
}

std::optional<std::string> AdapterRegistry::fused_on(WeightId w) const {
    auto it = fused_.find(w);
    if (it == fused_.end()) return std::nullopt;
    return it->second.adapter_id;
}

void AdapterRegistry::save(const std::string& dir) const {
    std::filesystem::create_directories(dir);
    json idx;
    idx["schema_version"] = 1;
    json list = json::array();
    for (const auto& [id, e] : adapters_) {
        if (const auto* s = std::get_if<SparseAdapter>(&e)) {
            save_adapter(*s, dir + "/" + id + ".adpt");
            list.push_back({{"id", id}, {"kind", "sparse"}, {"file", id + ".adpt"}});
        } else {
            save_lora(std::get<LoraRecord>(e), dir + "/" + id + ".lora");
            list.push_back({{"id", id}, {"kind", "lora"}, {"file", id + ".lora"}});
        }
    }
    idx["adapters"] = list;
    json fused = json::array();
    for (const auto& [w, st] : fused_) {
        const std::string file = std::string("saved_") + weight_name(w) + ".bin";
        save_matrix_file(st.saved, dir + "/" + file);
        fused.push_back({{"weight", weight_name(w)}, {"adapter_id", st.adapter_id}, {"saved_file", file}});
    }
    idx["fused"] = fused;
    write_json_file(dir + "/index.json", idx);
}

AdapterRegistry AdapterRegistry::load(const std::string& dir) {
    AdapterRegistry reg;
    if (!std::filesystem::exists(dir + "/index.json")) return reg;
    const json idx = read_json_file(dir + "/index.json");
    check_schema_version(idx, 1, "registry index");
    try {
        for (const auto& a : idx.at("adapters")) {
            const std::string id = a.at("id").get<std::string>();
            const std::string file = dir + "/" + a.at("file").get<std::string>();
            if (a.at("kind").get<std::string>() == "sparse") reg.add(id, load_adapter(file));
            else reg.add(id, load_lora(file));
        }
        for (const auto& f : idx.at("fused")) {
            const std::string id = f.at("adapter_id").get<std::string>();
            reg.get(id);
            reg.fused_[parse_weight(f.at("weight").get<std::string>())] =
                FusedState{id, load_matrix_file(dir + "/" + f.at("saved_file").get<std::string>())};
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("registry index: ") + e.what());
    }
    return reg;
}

std::vector<SparseAdapter> extract(const TransformerBlockSpec& fine_tuned, const TransformerBlockSpec& base,
                                   const PermutationPlan& plan, const std::string& plan_ref) {
    fine_tuned.validate();
    base.validate();
    if (fine_tuned.d != base.d || fine_tuned.h != base.h || fine_tuned.k != base.k) {
        throw ShapeError("extract: fine-tuned and base models differ in dims");
    }
    const TransformerBlockSpec base_perm = apply_permutation(base, plan);

    // Every entry outside the trained ranges must be untouched.
    for (WeightId id : kAllWeights) {
        const Matrix& ft = fine_tuned.weight(id);
        const Matrix& b = base_perm.weight(id);
        const TrainableRegion* region = nullptr;
        for (const auto& r : plan.trainable_ranges)
            if (r.weight == id) region = &r;
        for (std::size_t i = 0; i < ft.rows(); ++i) {
            for (std::size_t j = 0; j < ft.cols(); ++j) {
                if (region != nullptr) {
                    const std::size_t pos = region->axis == Axis::Rows ? i : j;
                    if (pos >= region->start && pos < region->end) continue;
                }
                const double delta = std::abs(ft(i, j) - b(i, j));
                if (!(delta <= kOffSupportTolerance)) {
                    throw IntegrityError(std::string("extract: ") + weight_name(id) + "(" + std::to_string(i) + "," +
                                         std::to_string(j) + ") changed by " + std::to_string(delta) +
                                         " outside the trained range");
                }
            }
        }
    }

    std::vector<SparseAdapter> out;
    for (const auto& r : plan.trainable_ranges) {
        const StructurePermutation* sp = nullptr;
        for (const auto& s : plan.structures) {
            if (std::find(s.producers.begin(), s.producers.end(), r.weight) != s.producers.end() ||
                std::find(s.consumers.begin(), s.consumers.end(), r.weight) != s.consumers.end()) {
                sp = &s;
            }
        }
        if (sp == nullptr) throw IntegrityError(std::string("extract: no structure owns ") + weight_name(r.weight));
        const IndexPermutation perm = sp->elements();
        SparseAdapter a;
        a.weight_id = r.weight;
        a.axis = r.axis;
        a.base_fingerprint = fingerprint(base.weight(r.weight));
        a.plan_ref = plan_ref;
        for (std::size_t p = r.start; p < r.end; ++p) a.indices.push_back(perm.order()[p]);
        if (!std::is_sorted(a.indices.begin(), a.indices.end())) {
            throw IntegrityError("extract: trained range does not map to ascending original indices");
        }
        a.V = region_slice(fine_tuned.weight(r.weight), r) - region_slice(base_perm.weight(r.weight), r);
        out.push_back(std::move(a));
    }
    return out;
}

void fuse(TransformerBlockSpec& model, const std::string& adapter_id, AdapterRegistry& registry, OpCountReport* report) {
    const AdapterEntry& e = registry.get(adapter_id);
    const WeightId wid = adapter_weight(e);
    if (auto cur = registry.fused_on(wid)) {
        throw StateError(std::string(weight_name(wid)) + " already carries adapter '" + *cur + "'");
    }
    Matrix& w = model.weight(wid);
    if (fingerprint(w) != entry_fingerprint(e)) {
        throw IntegrityError("adapter '" + adapter_id + "' was extracted against a different " + weight_name(wid));
    }
    if (const auto* s = std::get_if<SparseAdapter>(&e)) {
        s->validate(w);
        Matrix saved = gather(w, *s);
        scatter_into(w, *s, saved + s->V);
        if (report) report->record("scatter_add", dims(s->V) + " -> " + dims(w));
        registry.fused_[wid] = FusedState{adapter_id, std::move(saved)};
    } else {
        const LoraAdapter& a = std::get<LoraRecord>(e).adapter;
        Matrix saved = w;
        const Matrix delta = a.delta();
        if (report) report->record("matmul", dims(a.U) + " x " + dims(a.V) + "^T");
        w += delta;
        if (report) report->record("add", dims(w));
        registry.fused_[wid] = FusedState{adapter_id, std::move(saved)};
    }
}

void unfuse(TransformerBlockSpec& model, const std::string& adapter_id, AdapterRegistry& registry, OpCountReport* report) {
    const AdapterEntry& e = registry.get(adapter_id);
    const WeightId wid = adapter_weight(e);
    auto it = registry.fused_.find(wid);
    if (it == registry.fused_.end() || it->second.adapter_id != adapter_id) {
        throw StateError("adapter '" + adapter_id + "' is not fused");
    }
    Matrix& w = model.weight(wid);
    const Matrix& saved = it->second.saved;
    if (const auto* s = std::get_if<SparseAdapter>(&e)) {
        const Matrix back = gather(w, *s) - s->V;
        if (report) report->record("scatter_add", dims(s->V) + " -> " + dims(w));
        if (max_abs_diff(back, saved) > drift_tolerance(saved)) {
            throw IntegrityError("unfuse: " + std::string(weight_name(wid)) + " was modified while '" + adapter_id + "' was fused");
        }
        scatter_into(w, *s, saved);
    } else {
        const LoraAdapter& a = std::get<LoraRecord>(e).adapter;
        const Matrix delta = a.delta();
        if (report) report->record("matmul", dims(a.U) + " x " + dims(a.V) + "^T");
        const Matrix back = w - delta;
        if (report) report->record("add", dims(w));
        if (max_abs_diff(back, saved) > drift_tolerance(saved)) {
            throw IntegrityError("unfuse: " + std::string(weight_name(wid)) + " was modified while '" + adapter_id + "' was fused");
        }
        w = saved;
    }
    registry.fused_.erase(it);
}

OpCountReport switch_adapter(TransformerBlockSpec& model, const std::string& from_id, const std::string& to_id,
                             AdapterRegistry& registry) {
    OpCountReport r;
    r.scenario = "switch";
    registry.get(to_id);
    if (from_id == to_id) {
        const auto cur = registry.fused_on(adapter_weight(registry.get(from_id)));
        if (!cur || *cur != from_id) throw StateError("adapter '" + from_id + "' is not fused");
        return r;
    }
    unfuse(model, from_id, registry, &r);
    fuse(model, to_id, registry, &r);
    return r;
}

SparseAdapter weighted_fuse(const std::vector<SparseAdapter>& adapters, const std::vector<double>& weights) {
    if (adapters.empty()) throw ArgumentError("weighted_fuse: no adapters");
    if (adapters.size() != weights.size()) throw ArgumentError("weighted_fuse: one weight per adapter required");
    const SparseAdapter& a0 = adapters.front();
    const std::size_t other = a0.axis == Axis::Cols ? a0.V.rows() : a0.V.cols();
    for (const auto& a : adapters) {
        if (a.weight_id != a0.weight_id) throw ArgumentError("weighted_fuse: adapters target different weights");
        if (a.axis != a0.axis) throw ArgumentError("weighted_fuse: adapters use different axes");
        if (a.base_fingerprint != a0.base_fingerprint) throw ArgumentError("weighted_fuse: adapters come from different bases");
        if ((a.axis == Axis::Cols ? a.V.rows() : a.V.cols()) != other) throw ArgumentError("weighted_fuse: V shapes disagree");
    }
    std::vector<std::size_t> all;
    for (const auto& a : adapters) all.insert(all.end(), a.indices.begin(), a.indices.end());
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());

    SparseAdapter out;
    out.weight_id = a0.weight_id;
    out.axis = a0.axis;
    out.base_fingerprint = a0.base_fingerprint;
    out.plan_ref = a0.plan_ref;
    out.indices = all;
    out.V = a0.axis == Axis::Cols ? Matrix(other, all.size()) : Matrix(all.size(), other);
    for (std::size_t n = 0; n < adapters.size(); ++n) {
        const SparseAdapter& a = adapters[n];
        for (std::size_t t = 0; t < a.indices.size(); ++t) {
            const auto pos = static_cast<std::size_t>(std::lower_bound(all.begin(), all.end(), a.indices[t]) - all.begin());
            for (std::size_t i = 0; i < other; ++i) {
                if (a.axis == Axis::Cols) out.V(i, pos) += weights[n] * a.V(i, t);
                else out.V(pos, i) += weights[n] * a.V(t, i);
            }
        }
    }
    return out;
}

ProjectionHook adapter_hook(const AdapterEntry& entry) {
    return [entry](WeightId id, const Matrix& in, Matrix& out) {
        if (id != adapter_weight(entry)) return;
        if (const auto* s = std::get_if<SparseAdapter>(&entry)) {
            if (s->axis == Axis::Cols) {
                out += matmul_nt(gather_cols(in, s->indices), s->V);
            } else {
                const Matrix z = matmul_nt(in, s->V);
                for (std::size_t i = 0; i < out.rows(); ++i)
                    for (std::size_t t = 0; t < s->indices.size(); ++t) out(i, s->indices[t]) += z(i, t);
            }
        } else {
            const LoraAdapter& a = std::get<LoraRecord>(entry).adapter;
            Matrix side = matmul_nt(matmul(in, a.V), a.U);
            side *= a.alpha;
            out += side;
        }
    };
}

ParallelResult parallel_apply(const TransformerBlockSpec& base, const AdapterRegistry& registry,
                              const std::vector<ParallelRequest>& requests) {
    ParallelResult res;
    res.report.scenario = "parallel";
    res.outputs.resize(requests.size());

    // Batched base products, one per weight.
    std::map<WeightId, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < requests.size(); ++i) {
        const WeightId w = adapter_weight(registry.get(requests[i].adapter_id));
        if (requests[i].x.cols() != base.weight(w).cols()) throw ShapeError("parallel_apply: request width mismatch");
        groups[w].push_back(i);
    }
    for (const auto& [wid, members] : groups) {
        std::size_t rows = 0;
        for (std::size_t i : members) rows += requests[i].x.rows();
        Matrix stacked(rows, base.weight(wid).cols());
        std::size_t r0 = 0;
        for (std::size_t i : members) {
            assign_rows(stacked, r0, requests[i].x);
            r0 += requests[i].x.rows();
        }
        const Matrix y = matmul_nt(stacked, base.weight(wid));
        r0 = 0;
        for (std::size_t i : members) {
            res.outputs[i] = slice_rows(y, r0, r0 + requests[i].x.rows());
            r0 += requests[i].x.rows();
        }
    }

    for (std::size_t i = 0; i < requests.size(); ++i) {
        const AdapterEntry& e = registry.get(requests[i].adapter_id);
        const Matrix& x = requests[i].x;
        Matrix& y = res.outputs[i];
        OpCountReport one;
        if (const auto* s = std::get_if<SparseAdapter>(&e)) {
            if (s->axis == Axis::Cols) {
                const Matrix xs = gather_cols(x, s->indices);
                one.record("gather", dims(x) + " -> " + dims(xs));
                const Matrix z = matmul_nt(xs, s->V);
                one.record("matmul", dims(xs) + " x " + dims(s->V) + "^T");
                y += z;
                one.record("add", dims(y));
            } else {
                const Matrix z = matmul_nt(x, s->V);
                one.record("matmul", dims(x) + " x " + dims(s->V) + "^T");
                Matrix routed(y.rows(), y.cols());
                for (std::size_t r = 0; r < z.rows(); ++r)
                    for (std::size_t t = 0; t < s->indices.size(); ++t) routed(r, s->indices[t]) = z(r, t);
                one.record("scatter", dims(z) + " -> " + dims(routed));
                y += routed;
                one.record("add", dims(y));
            }
        } else {
            const LoraAdapter& a = std::get<LoraRecord>(e).adapter;
            const Matrix t = matmul(x, a.V);
            one.record("matmul", dims(x) + " x " + dims(a.V));
            Matrix z = matmul_nt(t, a.U);
            z *= a.alpha;
            one.record("matmul", dims(t) + " x " + dims(a.U) + "^T");
            y += z;
            one.record("add", dims(y));
        }
        for (const auto& [op, n] : one.counts) res.report.counts[op] += n;
        res.report.operand_dims.insert(res.report.operand_dims.end(), one.operand_dims.begin(), one.operand_dims.end());
        res.report.per_request.push_back(one.counts);
    }
    return res;
}

void save_adapter(const SparseAdapter& a, const std::string& path) {
    BinaryWriter w;
    w.bytes(kAdapterMagic);
    w.u32(kAdapterVersion);
    w.u32(static_cast<std::uint32_t>(a.weight_id));
    w.u32(a.axis == Axis::Rows ? 0u : 1u);
    w.u64(a.V.rows());
    w.u64(a.V.cols());
    w.u64(a.s());
    for (std::size_t i : a.indices) {
        if (i > std::numeric_limits<std::uint32_t>::max()) throw FormatError("adapter index exceeds 32 bits");
        w.u32(static_cast<std::uint32_t>(i));
    }
    w.matrix(a.V);
    w.save(path);

    json side;
    side["schema_version"] = 1;
    side["format"] = "s2ft-sparse-adapter";
    side["weight"] = weight_name(a.weight_id);
    side["axis"] = axis_name(a.axis);
    side["s"] = a.s();
    side["base_fingerprint"] = hex64(a.base_fingerprint);
    side["plan"] = a.plan_ref;
    write_json_file(path + ".json", side);
}

SparseAdapter load_adapter(const std::string& path) {
    BinaryReader r = BinaryReader::from_file(path);
    r.expect_magic(kAdapterMagic);
    if (r.u32() != kAdapterVersion) throw FormatError(path + ": unsupported adapter version");
    SparseAdapter a;
    const std::uint32_t wid = r.u32();
    if (wid > static_cast<std::uint32_t>(WeightId::Down)) throw FormatError(path + ": bad weight id");
    a.weight_id = static_cast<WeightId>(wid);
    const std::uint32_t axis = r.u32();
    if (axis > 1) throw FormatError(path + ": bad axis");
    a.axis = axis == 0 ? Axis::Rows : Axis::Cols;
    const std::uint64_t rows = r.u64(), cols = r.u64(), s = r.u64();
    if (rows > 65536 || cols > 65536 || s > 65536) throw FormatError(path + ": implausible dims");
    for (std::uint64_t t = 0; t < s; ++t) a.indices.push_back(r.u32());
    a.V = r.matrix(rows, cols);
    if (!r.at_end()) throw FormatError(path + ": trailing bytes");
    const json side = read_json_file(path + ".json");
    check_schema_version(side, 1, "adapter sidecar");
    try {
        a.base_fingerprint = parse_hex64(side.at("base_fingerprint").get<std::string>());
        a.plan_ref = side.value("plan", std::string());
        if (parse_weight(side.at("weight").get<std::string>()) != a.weight_id) throw FormatError(path + ": sidecar weight disagrees");
    } catch (const json::exception& e) {
        throw FormatError(path + ".json: " + e.what());
    }
    const bool ok = a.axis == Axis::Cols ? a.V.cols() == a.s() : a.V.rows() == a.s();
    if (!ok) throw FormatError(path + ": V shape does not match index count");
    return a;
}

}  // namespace s2ft
