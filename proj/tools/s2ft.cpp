// s2ft command-line front door. Exit codes: 0 ok, 1 usage/config, 2 integrity
// or bound failure, 3 numeric failure.

#include <filesystem>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "s2ft/adapter.hpp"
#include "s2ft/error.hpp"
#include "s2ft/harness.hpp"
#include "s2ft/random.hpp"

namespace fs = std::filesystem;
using namespace s2ft;

namespace {

struct Common {
    std::string config;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string out;
};

ExperimentConfig load_experiment(const Common& c) {
    ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : experiment_config_from_json(read_json_file(c.config));
    if (c.seed_set) cfg.model.seed = c.seed;
    return cfg;
}

TransformerBlockSpec load_or_init(const std::string& ckpt, const Common& c) {
    if (!ckpt.empty()) return load_checkpoint(ckpt);
    return init_block(load_experiment(c).model);
}

void ensure_parent(const std::string& path) {
    const fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

void emit(const std::string& out, const std::string& text) {
    if (out.empty() || out == "-") {
        std::cout << text;
    } else {
        ensure_parent(out);
        write_text_file(out, text);
    }
}

void emit_json(const std::string& out, const json& j) { emit(out, j.dump(2) + "\n"); }

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> parts;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) parts.push_back(item);
    return parts;
}

// ---------------------------------------------------------------------------

int cmd_graph(const Common& c, const std::string& model) {
    const TransformerBlockSpec m = load_or_init(model, c);
    const DependencyGraph g = build_graph(m);
    emit_json(c.out, graph_to_json(g, discover_coupled(g)));
    return kExitOk;
}

struct SelectArgs {
    std::string model, strategy = "R", polarity, calib;
    double ratio = 0.1;
    bool wide = false;
};

int cmd_select(const Common& c, const SelectArgs& a) {
    const TransformerBlockSpec m = load_or_init(a.model, c);
    const Strategy s = parse_strategy(a.strategy);
    const Polarity p = a.polarity.empty() ? Polarity::NotApplicable : parse_polarity(a.polarity);
    TrainableProjections proj;
    proj.wide = a.wide;
    std::optional<CalibrationBatch> calib;
    if (!a.calib.empty()) calib = calibration_from_json(read_json_file(a.calib));
    const SelectionBudget budget = budget_from_ratio(a.ratio, m, proj);
    const SelectionMask mask = select(s, p, m, calib ? &*calib : nullptr, budget, c.seed, proj);
    emit_json(c.out, mask_to_json(mask, budget));
    return kExitOk;
}

struct PermuteArgs {
    std::string model, mask;
    bool producers_only = false;
};

int cmd_permute(const Common& c, const PermuteArgs& a) {
    if (c.out.empty()) throw ArgumentError("permute needs --out <checkpoint>");
    const TransformerBlockSpec m = load_or_init(a.model, c);
    const SelectionMask mask = mask_from_json(read_json_file(a.mask));
    mask.validate(m);
    const PermutationPlan plan = plan_permutation(mask, discover_coupled(build_graph(m)));
    const TransformerBlockSpec permuted =
        apply_permutation(m, plan, a.producers_only ? PermuteSides::ProducersOnly : PermuteSides::Both);
    Rng rng(derive_seed(c.seed, 0x7065726d));
    const Matrix X = gaussian_matrix(8, m.d, 1.0, rng);
    const InvarianceReport inv = verify_output_invariance(m, permuted, X, 1e-10);
    ensure_parent(c.out);
    save_checkpoint(permuted, c.out, c.seed);
    write_json_file(c.out + ".plan.json", plan_to_json(plan));
    json r{{"max_abs_diff", inv.max_abs_diff}, {"invariant", inv.pass}};
    std::cout << r.dump() << "\n";
    return inv.pass ? kExitOk : kExitFailure;
}

struct TrainArgs {
    std::string method, mask, model, data;
};

int cmd_train(const Common& c, const TrainArgs& a) {
    if (c.out.empty()) throw ArgumentError("train needs --out <dir>");
    TrainConfig cfg = c.config.empty() ? experiment_train_defaults() : train_config_from_json(read_json_file(c.config));
    if (!a.method.empty()) cfg.method = parse_method(a.method);
    if (c.seed_set) cfg.seed = c.seed;
    const TransformerBlockSpec base = a.model.empty() ? init_block(BlockConfig{32, 4, 64, false, c.seed}) : load_checkpoint(a.model);
    Dataset data;
    if (!a.data.empty()) {
        data = dataset_from_json(read_json_file(a.data));
    } else {
        const TaskFamily fam = make_task_family(BlockConfig{base.d, base.h, base.k, base.causal, c.seed}, TaskSpec{}, c.seed);
        // Teacher built on top of the given base so the task is reachable from it.
        TransformerBlockSpec teacher = base;
        teacher.Wdown += fam.id.Wdown - fam.base.Wdown;
        data = make_dataset(teacher, TaskSpec{}.train_sequences, TaskSpec{}.tokens, derive_seed(c.seed, 0x747261));
    }
    if (cfg.method == Method::S2FT) {
        if (a.mask.empty()) throw ArgumentError("s2ft training needs --mask");
        cfg.mask = mask_from_json(read_json_file(a.mask));
    }
    const TrainResult r = train_loop(base, data, cfg);
    fs::create_directories(c.out);
    std::string curve = "step,loss\n";
    for (std::size_t i = 0; i < r.losses.size(); ++i) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.10g", r.losses[i]);
        curve += std::to_string(i + 1) + "," + buf + "\n";
    }
    write_text_file(c.out + "/loss.csv", curve);
    AccountingInput in;
    in.method = cfg.method;
    in.tokens = data.inputs.front().rows();
    in.optimizer = cfg.optimizer.kind;
    in.projections = cfg.projections;
    in.heads = cfg.mask.mha_heads.size();
    in.channels = cfg.mask.ffn_channels.size();
    in.rank = cfg.lora_rank;
    in.sparse_ratio = cfg.sparse_ratio;
    json acc = accounting_to_json(accounting(base, in));
    acc["ok"] = r.ok;
    if (!r.ok) acc["diagnostic"] = r.diagnostic;
    write_json_file(c.out + "/accounting.json", acc);
    if (!r.ok) {
        std::cerr << "training diverged: " << r.diagnostic << "\n";
        return kExitNumeric;
    }
    save_checkpoint(r.lora ? r.lora->merged(r.model) : r.model, c.out + "/model.ckpt", cfg.seed);
    // A base made from the seed is saved too, so adapters can be extracted against it.
    if (a.model.empty()) save_checkpoint(base, c.out + "/base.ckpt", c.seed);
    if (r.plan) write_json_file(c.out + "/plan.json", plan_to_json(*r.plan));
    return kExitOk;
}

struct AdapterArgs {
    std::string action, registry, model, tuned, plan, id, from, to, ids;
    std::size_t tokens = 4;
};

int cmd_adapter(const Common& c, const AdapterArgs& a) {
    if (a.registry.empty()) throw ArgumentError("adapter needs --registry <dir>");
    AdapterRegistry reg = AdapterRegistry::load(a.registry);
    auto need = [](const std::string& v, const char* flag) {
        if (v.empty()) throw ArgumentError(std::string("adapter ") + " needs " + flag);
    };
    if (a.action == "extract") {
        need(a.model, "--model");
        need(a.tuned, "--tuned");
        need(a.plan, "--plan");
        need(a.id, "--id");
        const auto adapters =
            extract(load_checkpoint(a.tuned), load_checkpoint(a.model), plan_from_json(read_json_file(a.plan)), a.plan);
        json ids = json::array();
        for (const auto& ad : adapters) {
            const std::string id = adapters.size() == 1 ? a.id : a.id + "." + weight_name(ad.weight_id);
            reg.add(id, ad);
            ids.push_back(id);
        }
        reg.save(a.registry);
        emit_json(c.out, json{{"extracted", ids}});
        return kExitOk;
    }
    need(a.model, "--model");
    TransformerBlockSpec m = load_checkpoint(a.model);
    const std::string out_model = c.out.empty() ? a.model : c.out;
    OpCountReport rep;
    if (a.action == "fuse" || a.action == "unfuse") {
        need(a.id, "--id");
        rep.scenario = a.action;
        if (a.action == "fuse") fuse(m, a.id, reg, &rep);
        else unfuse(m, a.id, reg, &rep);
    } else if (a.action == "switch") {
        need(a.to, "--to");
        rep = switch_adapter(m, a.from, a.to, reg);
    } else if (a.action == "parallel-bench") {
        const std::vector<std::string> ids = a.ids.empty() ? reg.ids() : split_csv(a.ids);
        Rng rng(derive_seed(c.seed, 0x70617261));
        std::vector<ParallelRequest> reqs;
        for (const auto& id : ids) {
            const Matrix& w = m.weight(adapter_weight(reg.get(id)));
            reqs.push_back({id, gaussian_matrix(a.tokens, w.cols(), 1.0, rng)});
        }
        const ParallelResult pr = parallel_apply(m, reg, reqs);
        // Reference: fuse each adapter alone and apply the weight directly.
        double worst = 0.0;
        for (std::size_t i = 0; i < reqs.size(); ++i) {
            AdapterRegistry scratch = reg;
            TransformerBlockSpec fused = m;
            fuse(fused, reqs[i].adapter_id, scratch);
            const Matrix ref = matmul_nt(reqs[i].x, fused.weight(adapter_weight(reg.get(reqs[i].adapter_id))));
            worst = std::max(worst, max_abs_diff(ref, pr.outputs[i]));
        }
        json j = op_report_to_json(pr.report);
        j["max_abs_diff_vs_fused"] = worst;
        emit_json(c.out, j);
        return worst <= 1e-10 ? kExitOk : kExitFailure;
    } else {
        throw ArgumentError("unknown adapter action: " + a.action);
    }
    ensure_parent(out_model);
    save_checkpoint(m, out_model, c.seed);
    reg.save(a.registry);
    std::cout << op_report_to_json(rep).dump(2) << "\n";
    return kExitOk;
}

struct TheoryArgs {
    std::string suite = "theorem2", dims, scenarios;
    std::size_t trials = 100, layer = 2, p = 6;
    bool covariate_shift = false, random_sigma_x = false;
};

int cmd_theory(const Common& c, const TheoryArgs& a) {
    if (a.suite != "theorem2") throw ArgumentError("unknown theory suite: " + a.suite);
    Theorem2Config t = c.config.empty() ? Theorem2Config{} : load_experiment(c).theory;
    t.trials = a.trials;
    t.layer = a.layer;
    if (c.seed_set) t.seed = c.seed;
    if (!a.dims.empty()) {
        t.dims = {a.p};
        for (const auto& s : split_csv(a.dims)) t.dims.push_back(std::stoul(s));
    }
    if (!a.scenarios.empty()) {
        t.scenarios.clear();
        for (const auto& s : split_csv(a.scenarios)) t.scenarios.push_back(parse_shift_scenario(s));
    }
    t.covariate_shift = t.covariate_shift || a.covariate_shift;
    t.random_sigma_x = t.random_sigma_x || a.random_sigma_x;
    const TheoryRun run = run_theory_suite(t);
    emit_json(c.out, run.report);
    const json& s = run.report.at("summary");
    std::cerr << "trials " << s.at("trials") << ", passed " << s.at("passed") << ", precondition errors "
              << s.at("precondition_errors") << "\n";
    return run.exit_code;
}

int cmd_bench(const Common& c, bool no_timing) {
    const ExperimentConfig cfg = load_experiment(c);
    emit(c.out, efficiency_to_csv(run_efficiency_report(cfg, !no_timing), !no_timing));
    return kExitOk;
}

int cmd_experiment(const Common& c, bool no_timing) {
    ExperimentConfig cfg = load_experiment(c);
    const std::string dir = c.out.empty() ? cfg.out_dir : c.out;
    fs::create_directories(dir);
    write_json_file(dir + "/config.json", experiment_config_to_json(cfg));
    switch (cfg.kind) {
        case ExperimentKind::Generalization: {
            const auto rows = run_generalization_experiment(cfg);
            write_text_file(dir + "/generalization.csv", rows_to_csv(rows, !no_timing));
            return kExitOk;
        }
        case ExperimentKind::Efficiency:
            write_text_file(dir + "/efficiency.csv", efficiency_to_csv(run_efficiency_report(cfg, !no_timing), !no_timing));
            return kExitOk;
        case ExperimentKind::Theory: {
            const TheoryRun run = run_theory_suite(cfg.theory);
            write_json_file(dir + "/theory.json", run.report);
            return run.exit_code;
        }
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"s2ft: structured sparse fine-tuning toolkit"};
    app.require_subcommand(1);
    Common common;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config, "JSON config file");
        sub->add_option("--seed", common.seed, "master seed")->each([&](const std::string&) { common.seed_set = true; });
        sub->add_option("--out", common.out, "output path");
    };

    std::string graph_model;
    auto* graph = app.add_subcommand("graph", "export the dependency graph and coupled structures");
    add_common(graph);
    graph->add_option("--model", graph_model, "checkpoint (default: init from --config)");

    SelectArgs sel;
    auto* select_cmd = app.add_subcommand("select", "choose heads and channels under a budget");
    add_common(select_cmd);
    select_cmd->add_option("--model", sel.model, "checkpoint");
    select_cmd->add_option("--strategy", sel.strategy, "R|W|A|S|G");
    select_cmd->add_option("--polarity", sel.polarity, "largest|smallest");
    select_cmd->add_option("--ratio", sel.ratio, "trainable ratio in (0,1]");
    select_cmd->add_option("--calib", sel.calib, "calibration JSON");
    select_cmd->add_flag("--wide", sel.wide, "also train the producer projections");

    PermuteArgs perm;
    auto* permute = app.add_subcommand("permute", "co-permute a checkpoint so the selection is contiguous");
    add_common(permute);
    permute->add_option("--model", perm.model, "checkpoint");
    permute->add_option("--mask", perm.mask, "mask JSON")->required();
    permute->add_flag("--producers-only", perm.producers_only, "corrupt on purpose: skip the consumer side");

    TrainArgs tr;
    auto* train = app.add_subcommand("train", "fine-tune a checkpoint");
    add_common(train);
    train->add_option("--method", tr.method, "s2ft|lora|full|spft");
    train->add_option("--mask", tr.mask, "mask JSON (s2ft)");
    train->add_option("--model", tr.model, "base checkpoint");
    train->add_option("--data", tr.data, "dataset JSON");

    AdapterArgs ad;
    auto* adapter = app.add_subcommand("adapter", "extract, fuse, unfuse, switch, parallel-bench");
    add_common(adapter);
    adapter->add_option("action", ad.action, "extract|fuse|unfuse|switch|parallel-bench")->required();
    adapter->add_option("--registry", ad.registry, "registry directory");
    adapter->add_option("--model", ad.model, "base (extract) or live checkpoint");
    adapter->add_option("--tuned", ad.tuned, "fine-tuned checkpoint in permuted layout");
    adapter->add_option("--plan", ad.plan, "plan JSON from training");
    adapter->add_option("--id", ad.id, "adapter id");
    adapter->add_option("--from", ad.from, "switch: currently fused adapter");
    adapter->add_option("--to", ad.to, "switch: adapter to fuse");
    adapter->add_option("--ids", ad.ids, "parallel-bench: comma-separated adapter ids");
    adapter->add_option("--tokens", ad.tokens, "parallel-bench: tokens per request");

    TheoryArgs th;
    auto* theory = app.add_subcommand("theory", "deep-linear risk suites");
    add_common(theory);
    theory->add_option("--suite", th.suite, "theorem2");
    theory->add_option("--trials", th.trials);
    theory->add_option("--dims", th.dims, "layer output widths d_1..d_L, comma-separated");
    theory->add_option("--p", th.p, "input width d_0");
    theory->add_option("--layer", th.layer, "fine-tuned layer (1-based)");
    theory->add_option("--scenarios", th.scenarios, "generic,inside,orthogonal");
    theory->add_flag("--covariate-shift", th.covariate_shift, "negative control");
    theory->add_flag("--random-sigma-x", th.random_sigma_x);

    bool bench_no_timing = false, exp_no_timing = false;
    auto* bench = app.add_subcommand("bench", "efficiency report at matched budgets");
    add_common(bench);
    bench->add_flag("--no-timing", bench_no_timing, "omit wall-clock columns");

    auto* experiment = app.add_subcommand("experiment", "run the experiment described by --config");
    add_common(experiment);
    experiment->add_flag("--no-timing", exp_no_timing, "omit wall-clock columns");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*graph) return cmd_graph(common, graph_model);
        if (*select_cmd) return cmd_select(common, sel);
        if (*permute) return cmd_permute(common, perm);
        if (*train) return cmd_train(common, tr);
        if (*adapter) return cmd_adapter(common, ad);
        if (*theory) return cmd_theory(common, th);
        if (*bench) return cmd_bench(common, bench_no_timing);
        if (*experiment) return cmd_experiment(common, exp_no_timing);
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const IntegrityError& e) {
        std::cerr << "integrity error: " << e.what() << "\n";
        return kExitFailure;
    } catch (const PreconditionError& e) {
        std::cerr << "precondition error: " << e.what() << "\n";
        return kExitFailure;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}
