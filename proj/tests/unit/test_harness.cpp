#include <doctest.h>

#include <sstream>

#include "s2ft/error.hpp"
#include "s2ft/harness.hpp"
#include "s2ft/permute.hpp"
#include "s2ft/random.hpp"

using namespace s2ft;

namespace {

ExperimentConfig small_config() {
    ExperimentConfig c;
    c.model = {8, 2, 16, false, 3};
    c.ratios = {0.5};
    c.seeds = {0};
    c.task.train_sequences = 4;
    c.task.eval_sequences = 2;
    c.task.tokens = 6;
    c.train.epochs = 3;
    return c;
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

double projected_sq(const Matrix& P, const Matrix& R) { return squared_norm(matmul_nt(R, P)); }

}  // namespace

TEST_CASE("experiment config json round trip and validation") {
    ExperimentConfig c = small_config();
    c.methods = {Method::LoRA, Method::S2FT};
    c.strategy = Strategy::Weight;
    c.polarity = Polarity::Largest;
    c.workers = 3;
    c.theory.trials = 4;
    const json j = experiment_config_to_json(c);
    CHECK(j["schema_version"] == kConfigSchemaVersion);
    const ExperimentConfig back = experiment_config_from_json(j);
    CHECK(experiment_config_to_json(back).dump() == j.dump());
    CHECK(back.workers == 3);
    CHECK(back.methods.size() == 2);

    json bad = j;
    bad["ratios"] = {0.5, 1.5};
    CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);
    bad = j;
    bad["ratios"] = {0.0};
    CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);
    bad = j;
    bad["seeds"] = json::array();
    CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);
    bad = j;
    bad["colour"] = "blue";
    CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);
    bad = j;
    bad["schema_version"] = 99;
    CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);
    bad = j;
    bad["kind"] = "poetry";
    CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);
}

TEST_CASE("task family shift meter separates near and far") {
    const ExperimentConfig c = small_config();
    const TaskFamily fam = make_task_family(c.model, c.task, 0);
    const Dataset in = make_dataset(fam.id, 4, 6, 1);
    CHECK(label_shift_ratio(fam, fam.id, in) == 0.0);
    const double near = label_shift_ratio(fam, fam.near, in);
    const double far = label_shift_ratio(fam, fam.far, in);
    CHECK(near > 0.0);
    CHECK(near < c.task.far_eps_threshold);
    CHECK(far >= c.task.far_eps_threshold);
    CHECK(dataset_loss(fam.id, in) == 0.0);

    ExperimentConfig weak = c;
    weak.task.far_shift = 0.01;
    CHECK_THROWS_AS(run_generalization_experiment(weak), ConfigError);
}

TEST_CASE("generalization rows: count, order, determinism and skipped budgets") {
    ExperimentConfig c = small_config();
    c.ratios = {0.5, 0.01};
    c.seeds = {0, 1};
    const auto rows = run_generalization_experiment(c);
    REQUIRE(rows.size() == c.methods.size() * c.ratios.size() * c.seeds.size());
    CHECK(rows[0].method == "s2ft");
    CHECK(rows[0].ratio == 0.5);
    CHECK(rows[0].seed == 0);
    CHECK(rows[1].seed == 1);
    CHECK(rows[2].ratio == 0.01);
    // 1% of 192 entries buys no 8-wide channel and no LoRA rank.
    CHECK_FALSE(rows[2].ok);
    CHECK(rows[2].diagnostic.rfind("skipped", 0) == 0);
    for (const auto& r : rows)
        if (r.ok) {
            CHECK(std::isfinite(r.id_loss));
            CHECK(r.far_eps_sq >= c.task.far_eps_threshold);
            CHECK(r.trainable_params > 0);
        }

    const std::string csv = rows_to_csv(rows, false);
    CHECK(count_lines(csv) == rows.size() + 1);
    CHECK(csv.rfind("method,ratio,seed,status,", 0) == 0);
    CHECK(csv.find("wall_ms") == std::string::npos);
    CHECK(rows_to_csv(rows, true).find("wall_ms") != std::string::npos);

    ExperimentConfig threaded = c;
    threaded.workers = 3;
    CHECK(rows_to_csv(run_generalization_experiment(threaded), false) == csv);
}

TEST_CASE("ratio 1.0 gives every method the same final train loss") {
    ExperimentConfig c = small_config();
    c.ratios = {1.0};
    c.train.epochs = 3000;
    c.train.batch_size = 4;
    c.train.optimizer.lr = 0.03;
    c.train.optimizer.schedule = Schedule::Cosine;
    c.train.optimizer.total_steps = 3000;
    const auto rows = run_generalization_experiment(c);
    REQUIRE(rows.size() == 4);
    for (const auto& r : rows) {
        REQUIRE(r.ok);
        CHECK(std::abs(r.final_train_loss - rows[0].final_train_loss) <= 1e-6);
    }
}

TEST_CASE("S2FT leaves far-OOD error orthogonal to its update untouched") {
    ExperimentConfig c = small_config();
    c.model = {16, 4, 32, false, 5};
    const TaskFamily fam = make_task_family(c.model, c.task, 2);
    const Dataset train = make_dataset(fam.id, 6, 6, 3);

    TrainConfig cfg = experiment_train_defaults();
    cfg.method = Method::S2FT;
    cfg.mask.ffn_channels = {3, 9, 17, 30};
    cfg.epochs = 10;
    const TrainResult s2 = train_loop(fam.base, train, cfg);
    REQUIRE(s2.ok);
    cfg.method = Method::FullFT;
    const TrainResult full = train_loop(fam.base, train, cfg);
    REQUIRE(full.ok);

    // Output directions the S2FT update can reach, and a far teacher shifted outside them.
    const TransformerBlockSpec base_p = apply_permutation(fam.base, *s2.plan);
    const Matrix Q = range_basis(s2.model.Wdown - base_p.Wdown);
    REQUIRE(Q.cols() == 4);
    const Matrix Pperp = Matrix::identity(16) - matmul_nt(Q, Q);
    Rng rng(4);
    TransformerBlockSpec far = fam.base;
    far.Wdown += matmul(Pperp, gaussian_matrix(16, 32, 0.3, rng));
    const Dataset far_data = make_dataset(far, 4, 6, 5);

    double pre = 0.0, sparse = 0.0, dense = 0.0;
    for (std::size_t i = 0; i < far_data.size(); ++i) {
        const Matrix& X = far_data.inputs[i];
        const Matrix& T = far_data.targets[i];
        pre += projected_sq(Pperp, forward_output(fam.base, X) - T);
        sparse += projected_sq(Pperp, forward_output(s2.model, X) - T);
        dense += projected_sq(Pperp, forward_output(full.model, X) - T);
    }
    CHECK(pre > 0.0);
    CHECK(std::abs(sparse - pre) <= 1e-10 * pre);
    // Full fine-tuning moves attention too, so it shows up in every direction.
    CHECK(std::abs(dense - pre) > 1e-6 * pre);
}

TEST_CASE("efficiency report relations and determinism") {
    ExperimentConfig c;
    c.kind = ExperimentKind::Efficiency;
    const auto rows = run_efficiency_report(c, false);
    REQUIRE(rows.size() == 3);
    const EfficiencyRow& s2 = rows[0];
    const EfficiencyRow& lora = rows[1];
    const EfficiencyRow& full = rows[2];
    CHECK(s2.method == "s2ft");
    CHECK(lora.method == "lora");
    CHECK(full.method == "full");
    CHECK(lora.rank == c.lora_rank);

    const double ratio = static_cast<double>(s2.accounting.trainable_params) /
                         static_cast<double>(full.accounting.trainable_params);
    CHECK(static_cast<double>(s2.accounting.optimizer_bytes) ==
          doctest::Approx(ratio * static_cast<double>(full.accounting.optimizer_bytes)).epsilon(1e-15));
    CHECK(lora.accounting.step_flops() > s2.accounting.step_flops());
    CHECK(lora.accounting.taped_bytes >= s2.accounting.taped_bytes);
    CHECK(lora.accounting.optimizer_bytes >= s2.accounting.optimizer_bytes);
    // Matched budget: S2FT may not exceed LoRA's trainable count by more than one channel.
    CHECK(s2.accounting.trainable_params <= lora.accounting.trainable_params + c.model.d);

    const std::string a = efficiency_to_csv(rows, false);
    CHECK(a == efficiency_to_csv(run_efficiency_report(c, false), false));
    CHECK(a.find("step_ms_median") == std::string::npos);
    CHECK(count_lines(a) == 4);

    ExperimentConfig quick = c;
    quick.bench_steps = 3;
    quick.bench_warmup = 1;
    for (const auto& r : run_efficiency_report(quick, true)) CHECK(r.step_ms_median > 0.0);
}

TEST_CASE("theory suite orchestration exit codes") {
    Theorem2Config t;
    t.trials = 5;
    const TheoryRun ok = run_theory_suite(t);
    CHECK(ok.exit_code == kExitOk);
    CHECK(ok.report["summary"]["passed"] == 5);

    t.trials = 0;
    const TheoryRun empty = run_theory_suite(t);
    CHECK(empty.exit_code == kExitOk);
    CHECK(empty.report["trials"].empty());

    t.trials = 3;
    t.covariate_shift = true;
    const TheoryRun bad = run_theory_suite(t);
    CHECK(bad.exit_code == kExitFailure);
    CHECK(bad.report["summary"]["precondition_errors"] == 3);
}
