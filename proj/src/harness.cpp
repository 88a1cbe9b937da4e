#include "s2ft/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>
#include <thread>

#include "s2ft/error.hpp"
#include "s2ft/random.hpp"

namespace s2ft {

namespace {

std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

// Rank-r change of Wdown with entries of the same scale as the init, times `scale`.
Matrix low_rank_change(std::size_t d, std::size_t k, std::size_t r, double scale, Rng& rng) {
    const Matrix a = gaussian_matrix(d, r, 1.0, rng);
    const Matrix b = gaussian_matrix(k, r, 1.0, rng);
    Matrix out = matmul_nt(a, b);
    out *= scale * 0.5 / std::sqrt(static_cast<double>(k * r));
    return out;
}

double sq_dist_sum(const TransformerBlockSpec& a, const TransformerBlockSpec& b, const Dataset& inputs) {
    double s = 0.0;
    for (const Matrix& x : inputs.inputs) {
        const Matrix diff = forward_output(a, x) - forward_output(b, x);
        s += squared_norm(diff);
    }
    return s;
}

json theory_to_json(const Theorem2Config& c) {
    json j;
    j["dims"] = c.dims;
    j["layer"] = c.layer;
    j["trials"] = c.trials;
    j["seed"] = c.seed;
    j["slack"] = c.slack;
    json sc = json::array();
    for (ShiftScenario s : c.scenarios) sc.push_back(shift_scenario_name(s));
    j["scenarios"] = sc;
    j["random_sigma_x"] = c.random_sigma_x;
    j["covariate_shift"] = c.covariate_shift;
    j["max_regenerations"] = c.max_regenerations;
    return j;
}

Theorem2Config theory_from_json(const json& j) {
    Theorem2Config c;
    c.dims = j.value("dims", c.dims);
    c.layer = j.value("layer", c.layer);
    c.trials = j.value("trials", c.trials);
    c.seed = j.value("seed", c.seed);
    c.slack = j.value("slack", c.slack);
    if (j.contains("scenarios")) {
        c.scenarios.clear();
        for (const auto& s : j.at("scenarios")) c.scenarios.push_back(parse_shift_scenario(s.get<std::string>()));
    }
    c.random_sigma_x = j.value("random_sigma_x", c.random_sigma_x);
    c.covariate_shift = j.value("covariate_shift", c.covariate_shift);
    c.max_regenerations = j.value("max_regenerations", c.max_regenerations);
    return c;
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const char* where) {
    const std::set<std::string> allowed(keys.begin(), keys.end());
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key())) throw ConfigError(std::string("unknown key '") + it.key() + "' in " + where);
}

TransformerBlockSpec eval_model(const TrainResult& r) {
    return r.lora ? r.lora->merged(r.model) : r.model;
}

struct SeedContext {
    TaskFamily family;
    Dataset train, eval_id, eval_near, eval_far;
    double near_eps = 0.0, far_eps = 0.0;
};

SeedContext make_seed_context(const ExperimentConfig& c, std::uint64_t seed) {
    SeedContext ctx;
    BlockConfig model = c.model;
    model.seed = derive_seed(c.model.seed, seed);
    ctx.family = make_task_family(model, c.task, seed);
    const TaskSpec& t = c.task;
    ctx.train = make_dataset(ctx.family.id, t.train_sequences, t.tokens, derive_seed(seed, 0x747261));
    ctx.eval_id = make_dataset(ctx.family.id, t.eval_sequences, t.tokens, derive_seed(seed, 0x6576));
    ctx.eval_near = ctx.eval_id;
    ctx.eval_far = ctx.eval_id;
    for (std::size_t i = 0; i < ctx.eval_id.size(); ++i) {
        ctx.eval_near.targets[i] = forward_output(ctx.family.near, ctx.eval_id.inputs[i]);
        ctx.eval_far.targets[i] = forward_output(ctx.family.far, ctx.eval_id.inputs[i]);
    }
    ctx.near_eps = label_shift_ratio(ctx.family, ctx.family.near, ctx.eval_id);
    ctx.far_eps = label_shift_ratio(ctx.family, ctx.family.far, ctx.eval_id);
    if (ctx.far_eps < t.far_eps_threshold)
        throw ConfigError("far-OOD label shift " + num(ctx.far_eps) + " is below the threshold " +
                          num(t.far_eps_threshold) + " for seed " + std::to_string(seed));
    if (ctx.near_eps >= t.far_eps_threshold)
        throw ConfigError("near-OOD label shift " + num(ctx.near_eps) + " reaches the far threshold for seed " +
                          std::to_string(seed));
    return ctx;
}

AccountingInput accounting_input(const TrainConfig& cfg, std::size_t tokens) {
    AccountingInput in;
    in.method = cfg.method;
    in.tokens = tokens;
    in.optimizer = cfg.optimizer.kind;
    in.projections = cfg.projections;
    in.heads = cfg.mask.mha_heads.size();
    in.channels = cfg.mask.ffn_channels.size();
    in.rank = cfg.lora_rank;
    in.sparse_ratio = cfg.sparse_ratio;
    return in;
}

RunRow run_one(const ExperimentConfig& c, const SeedContext& ctx, Method method, double ratio, std::uint64_t seed) {
    RunRow row;
    row.method = method_name(method);
    row.ratio = ratio;
    row.seed = seed;
    row.near_eps_sq = ctx.near_eps;
    row.far_eps_sq = ctx.far_eps;
    const auto t0 = std::chrono::steady_clock::now();
    std::string why;
    const std::optional<TrainConfig> cfg =
        method_config(c, method, ratio, ctx.family.base, ctx.train, derive_seed(seed, static_cast<std::uint64_t>(method)), &why);
    if (!cfg) {
        row.ok = false;
        row.diagnostic = "skipped: " + why;
        return row;
    }
    row.accounting = accounting(ctx.family.base, accounting_input(*cfg, c.task.tokens));
    row.trainable_params = row.accounting.trainable_params;
    try {
        const TrainResult r = train_loop(ctx.family.base, ctx.train, *cfg);
        if (!r.ok) {
            row.ok = false;
            row.diagnostic = "failed: " + r.diagnostic;
        } else {
            const TransformerBlockSpec m = eval_model(r);
            row.final_train_loss = dataset_loss(m, ctx.train);
            row.id_loss = dataset_loss(m, ctx.eval_id);
            row.near_ood_loss = dataset_loss(m, ctx.eval_near);
            row.far_ood_loss = dataset_loss(m, ctx.eval_far);
            for (double v : {row.final_train_loss, row.id_loss, row.near_ood_loss, row.far_ood_loss}) {
                if (!std::isfinite(v)) {
                    row.ok = false;
                    row.diagnostic = "failed: non-finite evaluation loss";
                    row.final_train_loss = row.id_loss = row.near_ood_loss = row.far_ood_loss = 0.0;
                    break;
                }
            }
        }
    } catch (const NumericError& e) {
        row.ok = false;
        row.diagnostic = std::string("failed: ") + e.what();
    }
    row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return row;
}

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

const char* experiment_kind_name(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::Generalization: return "generalization";
        case ExperimentKind::Efficiency: return "efficiency";
        case ExperimentKind::Theory: return "theory";
    }
    return "?";
}

ExperimentKind parse_experiment_kind(std::string_view s) {
    if (s == "generalization") return ExperimentKind::Generalization;
    if (s == "efficiency") return ExperimentKind::Efficiency;
    if (s == "theory") return ExperimentKind::Theory;
    throw ConfigError("unknown experiment kind: " + std::string(s));
}

TrainConfig experiment_train_defaults() {
    TrainConfig t;
    t.optimizer.kind = OptimizerKind::AdamW;
    t.optimizer.lr = 1e-2;
    t.epochs = 20;
    t.batch_size = 4;
    return t;
}

void ExperimentConfig::validate() const {
    if (methods.empty()) throw ConfigError("experiment needs at least one method");
    if (ratios.empty()) throw ConfigError("experiment needs at least one ratio");
    for (double r : ratios)
        if (!(r > 0.0 && r <= 1.0)) throw ConfigError("ratio " + num(r) + " is outside (0, 1]");
    if (seeds.empty()) throw ConfigError("experiment needs at least one seed");
    if (model.d == 0 || model.h == 0 || model.k == 0 || model.d % model.h != 0)
        throw ConfigError("model needs positive d, h, k with h dividing d");
    if (task.train_sequences == 0 || task.eval_sequences == 0 || task.tokens == 0 || task.task_rank == 0)
        throw ConfigError("task sizes must be positive");
    if (task.task_rank > std::min(model.d, model.k)) throw ConfigError("task_rank exceeds min(d, k)");
    if (!(task.far_eps_threshold > 0.0 && task.far_eps_threshold < 1.0))
        throw ConfigError("far_eps_threshold must lie in (0, 1)");
    if (train.epochs == 0 || train.batch_size == 0) throw ConfigError("epochs and batch_size must be positive");
    if (strategy != Strategy::Random && polarity == Polarity::NotApplicable)
        throw ConfigError(std::string("strategy ") + strategy_tag(strategy) + " needs a polarity");
    if (lora_rank == 0 || bench_tokens == 0 || bench_steps == 0) throw ConfigError("efficiency sizes must be positive");
    if (workers == 0) throw ConfigError("workers must be positive");
}

json experiment_config_to_json(const ExperimentConfig& c) {
    json j;
    j["schema_version"] = kConfigSchemaVersion;
    j["kind"] = experiment_kind_name(c.kind);
    j["model"] = {{"d", c.model.d}, {"h", c.model.h}, {"k", c.model.k}, {"causal", c.model.causal}, {"seed", c.model.seed}};
    json methods = json::array();
    for (Method m : c.methods) methods.push_back(method_name(m));
    j["methods"] = methods;
    j["ratios"] = c.ratios;
    j["seeds"] = c.seeds;
    j["task"] = {{"train_sequences", c.task.train_sequences}, {"eval_sequences", c.task.eval_sequences},
                 {"tokens", c.task.tokens},                   {"task_rank", c.task.task_rank},
                 {"id_scale", c.task.id_scale},               {"near_shift", c.task.near_shift},
                 {"far_shift", c.task.far_shift},             {"far_eps_threshold", c.task.far_eps_threshold}};
    j["train"] = train_config_to_json(c.train);
    j["selection"] = {{"strategy", strategy_tag(c.strategy)}, {"polarity", polarity_name(c.polarity)}};
    j["efficiency"] = {{"lora_rank", c.lora_rank}, {"tokens", c.bench_tokens}, {"warmup", c.bench_warmup},
                       {"steps", c.bench_steps}};
    j["theory"] = theory_to_json(c.theory);
    j["workers"] = c.workers;
    j["out_dir"] = c.out_dir;
    return j;
}

ExperimentConfig experiment_config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
    check_schema_version(j, kConfigSchemaVersion, "experiment config");
    reject_unknown(j, {"schema_version", "kind", "model", "methods", "ratios", "seeds", "task", "train", "selection",
                       "efficiency", "theory", "workers", "out_dir"},
                   "experiment config");
    ExperimentConfig c;
    try {
        if (j.contains("kind")) c.kind = parse_experiment_kind(j.at("kind").get<std::string>());
        if (j.contains("model")) {
            const json& m = j.at("model");
            reject_unknown(m, {"d", "h", "k", "causal", "seed"}, "model");
            c.model.d = m.value("d", c.model.d);
            c.model.h = m.value("h", c.model.h);
            c.model.k = m.value("k", c.model.k);
            c.model.causal = m.value("causal", c.model.causal);
            c.model.seed = m.value("seed", c.model.seed);
        }
        if (j.contains("methods")) {
            c.methods.clear();
            for (const auto& m : j.at("methods")) c.methods.push_back(parse_method(m.get<std::string>()));
        }
        c.ratios = j.value("ratios", c.ratios);
        c.seeds = j.value("seeds", c.seeds);
        if (j.contains("task")) {
            const json& t = j.at("task");
            reject_unknown(t, {"train_sequences", "eval_sequences", "tokens", "task_rank", "id_scale", "near_shift",
                               "far_shift", "far_eps_threshold"},
                           "task");
            c.task.train_sequences = t.value("train_sequences", c.task.train_sequences);
            c.task.eval_sequences = t.value("eval_sequences", c.task.eval_sequences);
            c.task.tokens = t.value("tokens", c.task.tokens);
            c.task.task_rank = t.value("task_rank", c.task.task_rank);
            c.task.id_scale = t.value("id_scale", c.task.id_scale);
            c.task.near_shift = t.value("near_shift", c.task.near_shift);
            c.task.far_shift = t.value("far_shift", c.task.far_shift);
            c.task.far_eps_threshold = t.value("far_eps_threshold", c.task.far_eps_threshold);
        }
        if (j.contains("train")) {
            json t = j.at("train");
            if (!t.contains("schema_version")) t["schema_version"] = 1;
            c.train = train_config_from_json(t);
        }
        if (j.contains("selection")) {
            const json& s = j.at("selection");
            c.strategy = parse_strategy(s.value("strategy", std::string(strategy_tag(c.strategy))));
            c.polarity = parse_polarity(s.value("polarity", std::string(polarity_name(c.polarity))));
        }
        if (j.contains("efficiency")) {
            const json& e = j.at("efficiency");
            reject_unknown(e, {"lora_rank", "tokens", "warmup", "steps"}, "efficiency");
            c.lora_rank = e.value("lora_rank", c.lora_rank);
            c.bench_tokens = e.value("tokens", c.bench_tokens);
            c.bench_warmup = e.value("warmup", c.bench_warmup);
            c.bench_steps = e.value("steps", c.bench_steps);
        }
        if (j.contains("theory")) c.theory = theory_from_json(j.at("theory"));
        c.workers = j.value("workers", c.workers);
        c.out_dir = j.value("out_dir", c.out_dir);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("experiment config: ") + e.what());
    } catch (const ArgumentError& e) {
        throw ConfigError(std::string("experiment config: ") + e.what());
    }
    c.validate();
    return c;
}

TaskFamily make_task_family(const BlockConfig& model, const TaskSpec& spec, std::uint64_t seed) {
    TaskFamily f;
    f.base = init_block(model);
    Rng rng(derive_seed(seed, 0x7461736b));
    const std::size_t d = model.d, k = model.k, r = spec.task_rank;
    f.id = f.base;
    f.id.Wdown += low_rank_change(d, k, r, spec.id_scale, rng);
    f.near = f.id;
    f.near.Wdown += low_rank_change(d, k, r, spec.id_scale * spec.near_shift, rng);
    f.far = f.id;
    f.far.Wdown += low_rank_change(d, k, r, spec.id_scale * spec.far_shift, rng);
    return f;
}

Dataset make_dataset(const TransformerBlockSpec& teacher, std::size_t sequences, std::size_t tokens, std::uint64_t seed) {
    Rng rng(seed);
    Dataset data;
    for (std::size_t i = 0; i < sequences; ++i) {
        Matrix x = gaussian_matrix(tokens, teacher.d, 1.0, rng);
        data.targets.push_back(forward_output(teacher, x));
        data.inputs.push_back(std::move(x));
    }
    return data;
}

double dataset_loss(const TransformerBlockSpec& model, const Dataset& data) {
    if (data.size() == 0) throw ArgumentError("dataset_loss on an empty dataset");
    double s = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) s += mse_loss(forward_output(model, data.inputs[i]), data.targets[i]);
    return s / static_cast<double>(data.size());
}

double label_shift_ratio(const TaskFamily& fam, const TransformerBlockSpec& task_teacher, const Dataset& inputs) {
    const double den = sq_dist_sum(task_teacher, fam.base, inputs);
    if (den == 0.0) return 0.0;
    return sq_dist_sum(task_teacher, fam.id, inputs) / den;
}

std::optional<TrainConfig> method_config(const ExperimentConfig& c, Method method, double ratio,
                                         const TransformerBlockSpec& base, const Dataset& calib, std::uint64_t seed,
                                         std::string* why_not) {
    TrainConfig cfg = c.train;
    cfg.method = method;
    cfg.seed = seed;
    auto decline = [&](const std::string& why) -> std::optional<TrainConfig> {
        if (why_not) *why_not = why;
        return std::nullopt;
    };
    switch (method) {
        case Method::S2FT: {
            const SelectionBudget budget = budget_from_ratio(ratio, base, cfg.projections);
            if (budget.heads_per_block == 0 && budget.ffn_channels_per_block == 0)
                return decline("ratio " + num(ratio) + " buys no head or channel");
            CalibrationBatch batch;
            if (calib.size() > 0) {
                batch.inputs = calib.inputs.front();
                batch.targets = calib.targets.front();
            }
            cfg.mask = select(c.strategy, c.polarity, base, calib.size() > 0 ? &batch : nullptr, budget, seed,
                              cfg.projections);
            break;
        }
        case Method::LoRA: {
            const auto budget = static_cast<std::size_t>(
                std::floor(ratio * static_cast<double>(cfg.projections.total(base))));
            cfg.lora_rank = lora_rank_for_budget(base, cfg.projections.weights(), budget);
            if (cfg.lora_rank == 0) return decline("ratio " + num(ratio) + " buys no LoRA rank");
            break;
        }
        case Method::FullFT: break;
        case Method::UnstructuredSparse: cfg.sparse_ratio = ratio; break;
    }
    return cfg;
}

std::vector<RunRow> run_generalization_experiment(const ExperimentConfig& c) {
    c.validate();
    std::vector<SeedContext> contexts;
    for (std::uint64_t seed : c.seeds) contexts.push_back(make_seed_context(c, seed));

    struct Job {
        Method method;
        double ratio;
        std::size_t seed_index;
    };
    std::vector<Job> jobs;
    for (Method m : c.methods)
        for (double r : c.ratios)
            for (std::size_t s = 0; s < c.seeds.size(); ++s) jobs.push_back({m, r, s});

    std::vector<RunRow> rows(jobs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
            const Job& jb = jobs[i];
            rows[i] = run_one(c, contexts[jb.seed_index], jb.method, jb.ratio, c.seeds[jb.seed_index]);
        }
    };
    const std::size_t n_threads = std::min(c.workers, jobs.size());
    if (n_threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    return rows;
}

std::string rows_to_csv(const std::vector<RunRow>& rows, bool with_timing) {
    std::string out =
        "method,ratio,seed,status,trainable_params,final_train_loss,id_loss,near_ood_loss,far_ood_loss,"
        "near_eps_sq,far_eps_sq,taped_bytes,optimizer_bytes,step_flops,note";
    if (with_timing) out += ",wall_ms";
    out += "\n";
    for (const auto& r : rows) {
        const std::string status = r.ok ? "ok" : (r.diagnostic.rfind("skipped", 0) == 0 ? "skipped" : "failed");
        out += r.method + "," + num(r.ratio) + "," + std::to_string(r.seed) + "," + status + "," +
               std::to_string(r.trainable_params) + "," + num(r.final_train_loss) + "," + num(r.id_loss) + "," +
               num(r.near_ood_loss) + "," + num(r.far_ood_loss) + "," + num(r.near_eps_sq) + "," +
               num(r.far_eps_sq) + "," + std::to_string(r.accounting.taped_bytes) + "," +
               std::to_string(r.accounting.optimizer_bytes) + "," + std::to_string(r.accounting.step_flops()) + "," +
               csv_field(r.diagnostic);
        if (with_timing) out += "," + num(r.wall_ms);
        out += "\n";
    }
    return out;
}

std::vector<EfficiencyRow> run_efficiency_report(const ExperimentConfig& c, bool measure) {
    c.validate();
    const TransformerBlockSpec base = init_block(c.model);
    const TrainableProjections proj = c.train.projections;

    std::size_t lora_params = 0;
    for (WeightId id : proj.weights()) lora_params += c.lora_rank * (base.weight(id).rows() + base.weight(id).cols());
    // Half a parameter of headroom keeps floor(ratio·total) at exactly lora_params.
    const double ratio = (static_cast<double>(lora_params) + 0.5) / static_cast<double>(proj.total(base));
    if (ratio > 1.0) throw ConfigError("reference LoRA rank exceeds the trainable projections");
    const SelectionBudget budget = budget_from_ratio(ratio, base, proj);

    TrainConfig cfg = c.train;
    cfg.epochs = 1;
    cfg.batch_size = 1;
    cfg.shuffle = false;

    std::vector<std::pair<Method, TrainConfig>> setups;
    {
        TrainConfig s = cfg;
        s.method = Method::S2FT;
        s.mask = select(Strategy::Random, Polarity::NotApplicable, base, nullptr, budget, c.model.seed, proj);
        setups.emplace_back(Method::S2FT, s);
        TrainConfig l = cfg;
        l.method = Method::LoRA;
        l.lora_rank = c.lora_rank;
        setups.emplace_back(Method::LoRA, l);
        TrainConfig f = cfg;
        f.method = Method::FullFT;
        setups.emplace_back(Method::FullFT, f);
    }

    Dataset bench;
    if (measure) {
        const TaskFamily fam = make_task_family(c.model, c.task, c.model.seed);
        bench = make_dataset(fam.id, c.bench_warmup + c.bench_steps + 1, c.bench_tokens, derive_seed(c.model.seed, 0x62));
    }

    std::vector<EfficiencyRow> rows;
    for (const auto& [method, tc] : setups) {
        EfficiencyRow row;
        row.method = method_name(method);
        const AccountingInput in = accounting_input(tc, c.bench_tokens);
        row.heads = method == Method::S2FT ? in.heads : 0;
        row.channels = method == Method::S2FT ? in.channels : 0;
        row.rank = method == Method::LoRA ? in.rank : 0;
        row.accounting = accounting(base, in);
        if (measure) {
            // Observer timestamps bracket each step; step i spans [t_{i-1}, t_i].
            std::vector<std::chrono::steady_clock::time_point> stamps;
            stamps.reserve(bench.size());
            const TrainResult r = train_loop(base, bench, tc, [&](std::size_t, double, const TransformerBlockSpec&) {
                stamps.push_back(std::chrono::steady_clock::now());
            });
            if (!r.ok) throw NumericError("efficiency run diverged: " + r.diagnostic);
            std::vector<double> ms;
            for (std::size_t i = c.bench_warmup + 1; i < stamps.size(); ++i)
                ms.push_back(std::chrono::duration<double, std::milli>(stamps[i] - stamps[i - 1]).count());
            row.step_ms_median = median(ms);
        }
        rows.push_back(row);
    }
    return rows;
}

std::string efficiency_to_csv(const std::vector<EfficiencyRow>& rows, bool with_timing) {
    std::string out = "method,trainable_params,heads,channels,rank,fwd_flops,bwd_flops,step_flops,taped_bytes,optimizer_bytes";
    if (with_timing) out += ",step_ms_median";
    out += "\n";
    for (const auto& r : rows) {
        const AccountingReport& a = r.accounting;
        out += r.method + "," + std::to_string(a.trainable_params) + "," + std::to_string(r.heads) + "," +
               std::to_string(r.channels) + "," + std::to_string(r.rank) + "," + std::to_string(a.fwd_flops) + "," +
               std::to_string(a.bwd_flops) + "," + std::to_string(a.step_flops()) + "," +
               std::to_string(a.taped_bytes) + "," + std::to_string(a.optimizer_bytes);
        if (with_timing) out += "," + num(r.step_ms_median);
        out += "\n";
    }
    return out;
}

TheoryRun run_theory_suite(const Theorem2Config& config) {
    const std::vector<Theorem2Trial> trials = theorem2_suite(config);
    TheoryRun run;
    run.report = theorem2_to_json(config, trials);
    const bool all = std::all_of(trials.begin(), trials.end(), [](const Theorem2Trial& t) { return t.pass; });
    run.exit_code = all ? kExitOk : kExitFailure;
    return run;
}

}  // namespace s2ft
