#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "s2ft/adapter.hpp"
#include "s2ft/error.hpp"
#include "s2ft/random.hpp"

using namespace s2ft;
namespace fs = std::filesystem;

namespace {

struct Tuned {
    TransformerBlockSpec base;
    TrainResult result;
    std::vector<SparseAdapter> adapters;
};

Tuned tune(const TransformerBlockSpec& base, SelectionMask mask, std::uint64_t seed) {
    Rng rng(seed);
    Dataset data;
    for (int i = 0; i < 3; ++i) {
        data.inputs.push_back(gaussian_matrix(4, base.d, 1.0, rng));
        data.targets.push_back(gaussian_matrix(4, base.d, 1.0, rng));
    }
    TrainConfig cfg;
    cfg.method = Method::S2FT;
    cfg.mask = std::move(mask);
    cfg.epochs = 2;
    cfg.optimizer.lr = 0.05;
    Tuned t{base, train_loop(base, data, cfg), {}};
    t.adapters = extract(t.result.model, base, *t.result.plan, "plan.json");
    return t;
}

SelectionMask mask_of(std::vector<std::size_t> heads, std::vector<std::size_t> channels) {
    SelectionMask m;
    m.mha_heads = std::move(heads);
    m.ffn_channels = std::move(channels);
    return m;
}

const SparseAdapter& on(const std::vector<SparseAdapter>& v, WeightId id) {
    for (const auto& a : v)
        if (a.weight_id == id) return a;
    FAIL("no adapter on " << weight_name(id));
    return v.front();
}

LoraRecord lora_on(const TransformerBlockSpec& base, WeightId id, std::size_t r, std::uint64_t seed) {
    Rng rng(seed);
    LoraAdapter a;
    a.weight = id;
    a.U = gaussian_matrix(base.weight(id).rows(), r, 0.3, rng);
    a.V = gaussian_matrix(base.weight(id).cols(), r, 0.3, rng);
    return {a, fingerprint(base.weight(id))};
}

}  // namespace

TEST_CASE("extracted adapters reproduce the fine-tuned model") {
    const TransformerBlockSpec base = init_block({12, 3, 20, false, 1});
    const Tuned t = tune(base, mask_of({2}, {4, 9, 13}), 2);
    REQUIRE(t.adapters.size() == 2);
    const SparseAdapter& down = on(t.adapters, WeightId::Down);
    CHECK(down.indices == std::vector<std::size_t>{4, 9, 13});
    CHECK(down.V.rows() == 12);
    CHECK(on(t.adapters, WeightId::O).indices == std::vector<std::size_t>{8, 9, 10, 11});

    AdapterRegistry reg;
    reg.add("o", on(t.adapters, WeightId::O));
    reg.add("down", down);
    TransformerBlockSpec live = base;
    fuse(live, "o", reg);
    fuse(live, "down", reg);
    Rng rng(3);
    const Matrix X = gaussian_matrix(5, 12, 1.0, rng);
    CHECK(max_abs_diff(forward_output(live, X), forward_output(t.result.model, X)) <= 1e-10);

    // Unmerged hooks agree with fusion.
    AdapterRegistry solo;
    solo.add("down", down);
    TransformerBlockSpec half = base;
    fuse(half, "down", solo);
    CHECK(max_abs_diff(forward_block(base, X, adapter_hook(solo.get("down"))).Y, forward_output(half, X)) <= 1e-12);
}

TEST_CASE("fuse then unfuse is bit-exact and guarded") {
    const TransformerBlockSpec base = init_block({12, 3, 20, false, 1});
    const Tuned t = tune(base, mask_of({}, {0, 5}), 4);
    AdapterRegistry reg;
    reg.add("a", t.adapters.front());
    reg.add("l", lora_on(base, WeightId::Up, 2, 5));
    CHECK_THROWS_AS(reg.add("a", t.adapters.front()), StateError);
    CHECK_THROWS_AS(reg.add("bad id", t.adapters.front()), ArgumentError);
    CHECK_THROWS_AS(reg.get("missing"), LookupError);

    TransformerBlockSpec live = base;
    OpCountReport f;
    fuse(live, "a", reg, &f);
    CHECK(f.count("scatter_add") == 1);
    CHECK(reg.fused_on(WeightId::Down) == std::optional<std::string>("a"));
    CHECK_THROWS_AS(fuse(live, "a", reg), StateError);
    fuse(live, "l", reg);
    unfuse(live, "l", reg);
    unfuse(live, "a", reg);
    for (WeightId id : kAllWeights) CHECK(bit_equal(live.weight(id), base.weight(id)));
    CHECK_THROWS_AS(unfuse(live, "a", reg), StateError);

    TransformerBlockSpec other = init_block({12, 3, 20, false, 99});
    CHECK_THROWS_AS(fuse(other, "a", reg), IntegrityError);

    // Live weights edited while fused: unfuse refuses to restore silently.
    fuse(live, "a", reg);
    live.Wdown(0, 0) += 1.0;
    CHECK_THROWS_AS(unfuse(live, "a", reg), IntegrityError);
}

TEST_CASE("extract refuses changes outside the trained range") {
    const TransformerBlockSpec base = init_block({12, 3, 20, false, 1});
    Tuned t = tune(base, mask_of({}, {3}), 6);
    TransformerBlockSpec tampered = t.result.model;
    tampered.Wup(0, 0) += 1e-6;
    CHECK_THROWS_AS(extract(tampered, base, *t.result.plan), IntegrityError);
}

TEST_CASE("switch and parallel op counts") {
    const TransformerBlockSpec base = init_block({12, 3, 20, false, 1});
    const Tuned t1 = tune(base, mask_of({}, {1, 2}), 7);
    const Tuned t2 = tune(base, mask_of({}, {6, 7, 8}), 8);
    AdapterRegistry reg;
    reg.add("s1", t1.adapters.front());
    reg.add("s2", t2.adapters.front());
    reg.add("l1", lora_on(base, WeightId::Down, 2, 9));
    reg.add("l2", lora_on(base, WeightId::Down, 2, 10));

    TransformerBlockSpec live = base;
    fuse(live, "s1", reg);
    const OpCountReport s = switch_adapter(live, "s1", "s2", reg);
    CHECK(s.count("scatter_add") == 2);
    CHECK(s.count("matmul") == 0);
    CHECK(s.count("add") == 0);
    CHECK(switch_adapter(live, "s2", "s2", reg).counts.empty());
    unfuse(live, "s2", reg);

    fuse(live, "l1", reg);
    const OpCountReport l = switch_adapter(live, "l1", "l2", reg);
    CHECK(l.count("matmul") == 2);
    CHECK(l.count("add") == 2);
    CHECK(l.count("scatter_add") == 0);
    unfuse(live, "l2", reg);

    Rng rng(11);
    std::vector<ParallelRequest> reqs{{"s1", gaussian_matrix(3, 20, 1.0, rng)}, {"l1", gaussian_matrix(3, 20, 1.0, rng)}};
    const ParallelResult pr = parallel_apply(base, reg, reqs);
    REQUIRE(pr.report.per_request.size() == 2);
    const auto& ps = pr.report.per_request[0];
    CHECK(ps.at("matmul") == 1);
    CHECK(ps.at("add") == 1);
    CHECK(ps.at("gather") == 1);
    const auto& pl = pr.report.per_request[1];
    CHECK(pl.at("matmul") == 2);
    CHECK(pl.at("add") == 1);
    for (std::size_t i = 0; i < reqs.size(); ++i) {
        AdapterRegistry scratch = reg;
        TransformerBlockSpec f = base;
        fuse(f, reqs[i].adapter_id, scratch);
        CHECK(max_abs_diff(pr.outputs[i], matmul_nt(reqs[i].x, f.Wdown)) <= 1e-10);
    }
}

TEST_CASE("row adapters use scatter in parallel mode") {
    const TransformerBlockSpec base = init_block({12, 3, 20, false, 1});
    SelectionMask m = mask_of({}, {2, 11});
    m.wide = true;
    const Tuned t = tune(base, m, 12);
    const SparseAdapter& up = on(t.adapters, WeightId::Up);
    CHECK(up.axis == Axis::Rows);
    AdapterRegistry reg;
    reg.add("up", up);
    Rng rng(13);
    const ParallelResult pr = parallel_apply(base, reg, {{"up", gaussian_matrix(2, 12, 1.0, rng)}});
    CHECK(pr.report.per_request[0].at("scatter") == 1);
    CHECK(pr.report.per_request[0].at("matmul") == 1);
    TransformerBlockSpec f = base;
    fuse(f, "up", reg);
    Rng rng2(13);
    const Matrix x = gaussian_matrix(2, 12, 1.0, rng2);
    CHECK(max_abs_diff(pr.outputs[0], matmul_nt(x, f.Wup)) <= 1e-12);

    // The unmerged hook matches the fused weight inside a full forward.
    const Matrix X = gaussian_matrix(4, 12, 1.0, rng2);
    CHECK(max_abs_diff(forward_block(base, X, adapter_hook(reg.get("up"))).Y, forward_output(f, X)) <= 1e-12);
}

TEST_CASE("weighted fusion over the union of supports") {
    SparseAdapter a{WeightId::Down, Axis::Cols, {1, 4}, Matrix::from_rows({{1, 2}, {3, 4}}), 7, ""};
    SparseAdapter b{WeightId::Down, Axis::Cols, {2, 4}, Matrix::from_rows({{10, 20}, {30, 40}}), 7, ""};
    const SparseAdapter f = weighted_fuse({a, b}, {0.5, 2.0});
    CHECK(f.indices == std::vector<std::size_t>{1, 2, 4});
    const Matrix expected = Matrix::from_rows({{0.5, 20, 1 + 40}, {1.5, 60, 2 + 80}});
    CHECK(max_abs_diff(f.V, expected) == 0.0);
    b.base_fingerprint = 8;
    CHECK_THROWS_AS(weighted_fuse({a, b}, {1, 1}), ArgumentError);
    CHECK_THROWS_AS(weighted_fuse({a}, {1, 1}), ArgumentError);
}

TEST_CASE("adapter files and registry persistence") {
    const fs::path dir = fs::temp_directory_path() / "s2ft_adapter_test";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const TransformerBlockSpec base = init_block({12, 3, 20, false, 1});
    const Tuned t = tune(base, mask_of({1}, {0, 19}), 14);
    const SparseAdapter& a = on(t.adapters, WeightId::Down);
    const std::string path = (dir / "a.adpt").string();
    save_adapter(a, path);
    const SparseAdapter b = load_adapter(path);
    CHECK(b.indices == a.indices);
    CHECK(bit_equal(b.V, a.V));
    CHECK(b.base_fingerprint == a.base_fingerprint);
    CHECK(b.plan_ref == "plan.json");
    {
        std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(1);
        f.put('!');
    }
    CHECK_THROWS_AS(load_adapter(path), FormatError);

    AdapterRegistry reg;
    reg.add("down", a);
    reg.add("o", on(t.adapters, WeightId::O));
    reg.add("lora", lora_on(base, WeightId::Up, 3, 15));
    TransformerBlockSpec live = base;
    fuse(live, "down", reg);
    fuse(live, "lora", reg);
    const std::string rdir = (dir / "reg").string();
    reg.save(rdir);
    AdapterRegistry back = AdapterRegistry::load(rdir);
    CHECK(back.ids() == reg.ids());
    CHECK(back.fused_on(WeightId::Down) == std::optional<std::string>("down"));
    unfuse(live, "down", back);
    unfuse(live, "lora", back);
    for (WeightId id : kAllWeights) CHECK(bit_equal(live.weight(id), base.weight(id)));
    CHECK(AdapterRegistry::load((dir / "empty").string()).ids().empty());
    fs::remove_all(dir);
}
