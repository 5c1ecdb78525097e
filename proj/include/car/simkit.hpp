#pragma once

// Deterministic, optionally parallel Monte Carlo experiments: rejection-rate
// tables, power curves, covariate-effect tables, and distribution checks.
//
// Every replication consumes exactly three derived streams (covariates,
// allocation, errors), so all procedures within a replication share the same
// covariate draw and error draw. Results are bit-identical for any worker
// count: replication seeds depend only on (master_seed, replication index)
// and aggregation is order-independent.

#include "car/null_laws.hpp"
#include "car/rng.hpp"
#include "car/types.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace car {

inline std::uint64_t derive_rep_seed(std::uint64_t master, std::uint64_t replication_index) {
    return derive_stream_seed(master, replication_index);
}

enum class TestMode { Traditional, OracleCritical, EstimatedCritical };
enum class ExperimentKind { Rejection, Power, CovariateEffect, Distribution };

const char* test_mode_name(TestMode mode);
const char* experiment_kind_name(ExperimentKind kind);

struct ExperimentConfig {
    std::string name = "experiment";
    ExperimentKind kind = ExperimentKind::Rejection;
    DgpSpec dgp;
    std::vector<ProcedureConfig> procedures;
    std::vector<WorkingModel> working_models;
    int replications = 10000;
    double alpha = 0.05;
    std::uint64_t master_seed = 0;
    TestMode mode = TestMode::Traditional;
    std::vector<double> delta_grid;  // treatment-effect grid (mu1 - mu2)
    std::vector<double> beta3_grid;  // covariate-effect grid
    int covariate_index = 2;         // 0-based column whose effect is tested
    bool rr_exact_critical = false;  // fresh draws per replication instead of the bank
    long rr_critical_draws = 200000;
    int workers = 1;
    bool collect_samples = false;  // keep per-cell statistic samples in memory

    void validate() const;
    // Report labels, config order; duplicate kinds get -2, -3, ... suffixes.
    std::vector<std::string> procedure_labels() const;
    std::vector<std::string> working_model_names() const;
};

// Strict JSON parsing: unknown keys are rejected, `spec_version` must be 1.
ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::string& path);

// Canonical serialization (sorted keys) and its FNV-1a 64 hash.
std::string canonical_config_json(const ExperimentConfig& config);
std::uint64_t config_hash(const ExperimentConfig& config);

struct RejectionCell {
    std::string procedure;
    std::string working_model;
    double grid_value = 0.0;
    double rate = 0.0;
    double se = 0.0;  // sqrt(rate (1-rate) / replications)
    int replications = 0;
};

struct RejectionTable {
    std::vector<RejectionCell> cells;

    const RejectionCell& cell(const std::string& procedure, const std::string& working_model,
                              double grid_value) const;
};

struct ExperimentResult {
    RejectionTable table;
    // Per-cell statistic samples, parallel to table.cells; filled only when
    // config.collect_samples is set.
    std::vector<std::vector<double>> samples;
};

ExperimentResult run_rejection_experiment(const ExperimentConfig& config);
ExperimentResult run_power_curve(const ExperimentConfig& config);
ExperimentResult run_covariate_effect_experiment(const ExperimentConfig& config);

struct DistributionCheck {
    struct PerProcedure {
        std::string procedure;
        double ks = 0.0;         // simulated S against the theoretical law
        double sample_sd = 0.0;  // of the simulated S values
        double law_sd = 0.0;
        std::vector<double> s_values;
    };
    struct FigureRow {
        std::string procedure;
        double bin_center = 0.0;
        double bin_width = 0.0;
        double empirical_density = 0.0;
        double theoretical_density = 0.0;
    };
    std::vector<PerProcedure> procedures;
    std::vector<FigureRow> figure;
};

// Simulated S per procedure vs. the theoretical null law (one working model).
DistributionCheck empirical_distribution_check(const ExperimentConfig& config);

// CSV/JSON surfaces used by the `simulate` subcommand.
void write_table_csv(const std::string& path, const RejectionTable& table);
void write_figure_csv(const std::string& path, const DistributionCheck& check);
std::string experiment_metadata_json(const ExperimentConfig& config,
                                     const DistributionCheck* check = nullptr);

} // namespace car
