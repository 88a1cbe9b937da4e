#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "s2ft/io.hpp"
#include "s2ft/select.hpp"
#include "s2ft/sparsetrain.hpp"
#include "s2ft/theory.hpp"

namespace s2ft {

/// Synthetic task family. Every task's teacher is the pretrained block with a
/// rank-`task_rank` change to Wdown; near and far tasks add further changes of
/// the given scales on top of the in-distribution one.
struct TaskSpec {
    std::size_t train_sequences = 16;
    std::size_t eval_sequences = 8;
    std::size_t tokens = 8;
    std::size_t task_rank = 2;
    double id_scale = 1.0;
    double near_shift = 0.1;
    double far_shift = 1.0;
    /// far must reach this label-shift ratio, near must stay below it.
    double far_eps_threshold = 0.25;
};

enum class ExperimentKind { Generalization, Efficiency, Theory };
const char* experiment_kind_name(ExperimentKind k);
ExperimentKind parse_experiment_kind(std::string_view s);

/// Training defaults for the desk experiments: AdamW, lr 1e-2, 20 epochs, batch 4.
TrainConfig experiment_train_defaults();

struct ExperimentConfig {
    ExperimentKind kind = ExperimentKind::Generalization;
    BlockConfig model{32, 4, 64, false, 0};
    std::vector<Method> methods{Method::S2FT, Method::LoRA, Method::FullFT, Method::UnstructuredSparse};
    std::vector<double> ratios{0.1, 0.05, 0.01};
    std::vector<std::uint64_t> seeds{0, 1};
    TaskSpec task;
    TrainConfig train = experiment_train_defaults();  ///< method, mask and rank are filled in per run
    Strategy strategy = Strategy::Random;
    Polarity polarity = Polarity::NotApplicable;
    // Efficiency report
    std::size_t lora_rank = 8;  ///< reference rank; S2FT gets the same parameter budget
    std::size_t bench_tokens = 32;
    std::size_t bench_warmup = 5;
    std::size_t bench_steps = 30;
    // Theory suite
    Theorem2Config theory;
    std::string out_dir = "out";
    /// Threads for independent generalization runs; rows are identical for any value.
    std::size_t workers = 1;

    void validate() const;
};

inline constexpr int kConfigSchemaVersion = 1;
ExperimentConfig experiment_config_from_json(const json& j);
json experiment_config_to_json(const ExperimentConfig& c);

struct TaskFamily {
    TransformerBlockSpec base;
    TransformerBlockSpec id, near, far;  ///< teachers
};

TaskFamily make_task_family(const BlockConfig& model, const TaskSpec& spec, std::uint64_t seed);
/// Inputs ~ N(0, 1) per entry, targets = teacher(inputs).
Dataset make_dataset(const TransformerBlockSpec& teacher, std::size_t sequences, std::size_t tokens, std::uint64_t seed);
/// Mean loss of `model` on `data`.
double dataset_loss(const TransformerBlockSpec& model, const Dataset& data);

/// E‖f_task − f_id‖² / E‖f_task − f_pre‖² over the given inputs: the
/// label-shift ratio with every output direction counted.
double label_shift_ratio(const TaskFamily& fam, const TransformerBlockSpec& task_teacher, const Dataset& inputs);

struct RunRow {
    std::string method;
    double ratio = 0.0;
    std::uint64_t seed = 0;
    bool ok = true;
    std::string diagnostic;
    std::size_t trainable_params = 0;
    double final_train_loss = 0.0;
    double id_loss = 0.0;
    double near_ood_loss = 0.0;
    double far_ood_loss = 0.0;
    double near_eps_sq = 0.0;
    double far_eps_sq = 0.0;
    AccountingReport accounting;
    double wall_ms = 0.0;
};

/// methods × ratios × seeds rows, in that nesting order. Divergent runs are
/// kept as failed rows.
std::vector<RunRow> run_generalization_experiment(const ExperimentConfig& config);
std::string rows_to_csv(const std::vector<RunRow>& rows, bool with_timing = true);

/// Training setup for one method under a budget ratio. Empty, with a reason in
/// `why_not`, when the budget cannot hold a single slot or rank.
std::optional<TrainConfig> method_config(const ExperimentConfig& config, Method method, double ratio,
                                         const TransformerBlockSpec& base, const Dataset& calib, std::uint64_t seed,
                                         std::string* why_not = nullptr);

struct EfficiencyRow {
    std::string method;
    AccountingReport accounting;
    std::size_t heads = 0, channels = 0, rank = 0;
    double step_ms_median = 0.0;
};

/// S2FT, LoRA and FullFT on the reference block: analytic counters plus the
/// median wall time of bench_steps training steps after bench_warmup.
std::vector<EfficiencyRow> run_efficiency_report(const ExperimentConfig& config, bool measure = true);
std::string efficiency_to_csv(const std::vector<EfficiencyRow>& rows, bool with_timing = true);

struct TheoryRun {
    json report;
    int exit_code = 0;  ///< 0 all bounds hold, 2 otherwise
};
TheoryRun run_theory_suite(const Theorem2Config& config);

/// CLI exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitFailure = 2;
inline constexpr int kExitNumeric = 3;

}  // namespace s2ft
