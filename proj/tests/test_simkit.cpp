#include "car/simkit.hpp"

#include "car/io.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace car;

namespace {

ExperimentConfig small_config() {
    ExperimentConfig cfg;
    cfg.name = "smoke";
    cfg.kind = ExperimentKind::Rejection;
    cfg.dgp.beta = Eigen::VectorXd::Ones(2);
    cfg.dgp.covariate_sds = Eigen::VectorXd::Ones(2);
    cfg.dgp.sigma_eps = 1.0;
    cfg.dgp.n = 100;
    ProcedureConfig cr;
    cr.kind = ProcedureKind::CR;
    ProcedureConfig psr;
    psr.kind = ProcedureKind::PSR;
    cfg.procedures = {cr, psr};
    WorkingModel w1;
    WorkingModel w2;
    w2.included = {0, 1};
    cfg.working_models = {w1, w2};
    cfg.replications = 200;
    cfg.master_seed = 99;
    cfg.mode = TestMode::Traditional;
    return cfg;
}

std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("derive_rep_seed is deterministic, index- and master-sensitive") {
    CHECK(derive_rep_seed(5, 0) == derive_rep_seed(5, 0));
    CHECK(derive_rep_seed(5, 0) != derive_rep_seed(6, 0));
    CHECK(derive_rep_seed(5, 1) != derive_rep_seed(5, 2));
}

TEST_CASE("rejection smoke run populates every cell with exact se bookkeeping") {
    ExperimentConfig cfg = small_config();
    ExperimentResult res = run_rejection_experiment(cfg);
    REQUIRE(res.table.cells.size() == 4);
    for (const auto& cell : res.table.cells) {
        CHECK(cell.replications == 200);
        CHECK(cell.rate >= 0.0);
        CHECK(cell.rate <= 1.0);
        CHECK(cell.se == doctest::Approx(std::sqrt(cell.rate * (1.0 - cell.rate) / 200))
                             .epsilon(1e-12));
        // Traditional sizes at most loosely near alpha; smoke-level sanity.
        CHECK(cell.rate < 0.2);
    }
    CHECK_NOTHROW(res.table.cell("CR", "W2", 0.0));
    CHECK_THROWS_AS(res.table.cell("CR", "W9", 0.0), InvalidArgument);
}

TEST_CASE("tables are bit-identical across worker counts") {
    ExperimentConfig cfg = small_config();
    cfg.collect_samples = true;
    cfg.workers = 1;
    ExperimentResult one = run_rejection_experiment(cfg);
    cfg.workers = 4;
    ExperimentResult four = run_rejection_experiment(cfg);
    REQUIRE(one.table.cells.size() == four.table.cells.size());
    for (std::size_t i = 0; i < one.table.cells.size(); ++i) {
        CHECK(one.table.cells[i].rate == four.table.cells[i].rate);
    }
    REQUIRE(one.samples.size() == four.samples.size());
    for (std::size_t c = 0; c < one.samples.size(); ++c) {
        CHECK(one.samples[c] == four.samples[c]);
    }
}

TEST_CASE("estimated-critical RR path is also worker-invariant") {
    ExperimentConfig cfg = small_config();
    cfg.mode = TestMode::EstimatedCritical;
    ProcedureConfig rr;
    rr.kind = ProcedureKind::RR;
    rr.rr_threshold = 4.0;
    cfg.procedures = {rr};
    cfg.replications = 120;
    cfg.rr_critical_draws = 100000;
    cfg.workers = 1;
    ExperimentResult one = run_rejection_experiment(cfg);
    cfg.workers = 3;
    ExperimentResult three = run_rejection_experiment(cfg);
    for (std::size_t i = 0; i < one.table.cells.size(); ++i) {
        CHECK(one.table.cells[i].rate == three.table.cells[i].rate);
    }
}

TEST_CASE("power curve requires a grid containing zero") {
    ExperimentConfig cfg = small_config();
    cfg.kind = ExperimentKind::Power;
    cfg.delta_grid = {0.2, 0.4};
    CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
    cfg.delta_grid = {0.0, 0.2, 0.4};
    CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("covariate-effect experiments demand the tested covariate in every model") {
    ExperimentConfig cfg = small_config();
    cfg.kind = ExperimentKind::CovariateEffect;
    cfg.beta3_grid = {0.0, 0.3};
    cfg.covariate_index = 1;
    CHECK_THROWS_AS(cfg.validate(), InvalidArgument);  // W1 omits x2
    WorkingModel w;
    w.included = {0, 1};
    cfg.working_models = {w};
    CHECK_NOTHROW(cfg.validate());
    ExperimentResult res = run_covariate_effect_experiment(cfg);
    REQUIRE(res.table.cells.size() == 4);
    // Power at beta=0.3 should exceed size at beta=0.
    CHECK(res.table.cell("CR", "W1", 0.3).rate > res.table.cell("CR", "W1", 0.0).rate);
}

TEST_CASE("config json parsing") {
    const std::string text = R"({
      "spec_version": 1,
      "name": "t",
      "experiment": "rejection",
      "mode": "traditional",
      "dgp": {"mu1": 0, "mu2": 0, "beta": [1, 1], "sigma_eps": 2, "n": 120},
      "procedures": [{"kind": "cr"}, {"kind": "rr", "a": 3}],
      "working_models": [{"name": "W1", "include": []}, {"include": ["x1", "x2"]}],
      "replications": 150,
      "alpha": 0.05,
      "master_seed": 7
    })";

    SUBCASE("a valid config parses with name resolution") {
        ExperimentConfig cfg = parse_experiment_config(text);
        CHECK(cfg.dgp.covariate_count() == 2);
        CHECK(cfg.dgp.covariate_sds[0] == 1.0);  // defaulted
        CHECK(cfg.procedures[1].rr_threshold == 3.0);
        REQUIRE(cfg.working_models.size() == 2);
        CHECK(cfg.working_models[1].included == std::vector<int>{0, 1});
        CHECK(cfg.working_model_names()[1] == "W2");
    }
    SUBCASE("unknown top-level keys are rejected by name") {
        std::string bad = text;
        bad.insert(bad.rfind('}'), ", \"bogus_key\": 1");
        CHECK_THROWS_WITH_AS(parse_experiment_config(bad), doctest::Contains("bogus_key"),
                             InvalidArgument);
    }
    SUBCASE("unknown procedure keys are rejected") {
        std::string bad = text;
        const auto pos = bad.find("\"kind\": \"cr\"");
        bad.insert(pos, "\"rho\": 0.9, ");
        CHECK_THROWS_AS(parse_experiment_config(bad), InvalidArgument);
    }
    SUBCASE("wrong spec_version is rejected") {
        std::string bad = text;
        bad.replace(bad.find("\"spec_version\": 1"), 17, "\"spec_version\": 2");
        CHECK_THROWS_AS(parse_experiment_config(bad), InvalidArgument);
    }
    SUBCASE("malformed json is an input error") {
        CHECK_THROWS_AS(parse_experiment_config("{nope"), InvalidArgument);
    }
    SUBCASE("hash is stable and seed-sensitive") {
        ExperimentConfig a = parse_experiment_config(text);
        ExperimentConfig b = parse_experiment_config(text);
        CHECK(config_hash(a) == config_hash(b));
        b.master_seed = 8;
        CHECK(config_hash(a) != config_hash(b));
    }
}

TEST_CASE("table csv output is deterministic") {
    ExperimentConfig cfg = small_config();
    ExperimentResult res = run_rejection_experiment(cfg);
    const auto dir = std::filesystem::temp_directory_path() / "car_simkit_tests";
    std::filesystem::create_directories(dir);
    const auto p1 = dir / "run1.csv";
    const auto p2 = dir / "run2.csv";
    write_table_csv(p1.string(), res.table);
    ExperimentResult res2 = run_rejection_experiment(cfg);
    write_table_csv(p2.string(), res2.table);
    const std::string text = slurp(p1);
    CHECK(text == slurp(p2));
    CHECK(text.rfind("procedure,working_model,grid_value,rate,se,reps\n", 0) == 0);
    CHECK(std::count(text.begin(), text.end(), '\n') == 5);  // header + 4 cells
}

TEST_CASE("distribution check smoke run") {
    ExperimentConfig cfg = small_config();
    cfg.kind = ExperimentKind::Distribution;
    WorkingModel w;
    w.included = {0};
    cfg.working_models = {w};
    cfg.replications = 400;
    DistributionCheck check = empirical_distribution_check(cfg);
    REQUIRE(check.procedures.size() == 2);
    for (const auto& p : check.procedures) {
        CHECK(p.s_values.size() == 400);
        CHECK(p.ks > 0.0);
        CHECK(p.ks < 0.2);
        CHECK(p.sample_sd > 0.3);
    }
    // Figure rows exist for both procedures and densities are nonnegative.
    CHECK(check.figure.size() == 2 * 40);
    for (const auto& row : check.figure) {
        CHECK(row.empirical_density >= 0.0);
        CHECK(row.theoretical_density >= 0.0);
    }
}

TEST_CASE("experiment metadata records the config hash and notes RR thresholds") {
    ExperimentConfig cfg = small_config();
    ProcedureConfig rr;
    rr.kind = ProcedureKind::RR;
    rr.rr_threshold = 3.0;
    cfg.procedures.push_back(rr);
    const std::string meta = experiment_metadata_json(cfg);
    CHECK(meta.find("config_hash") != std::string::npos);
    CHECK(meta.find("threshold a=3") != std::string::npos);
    CHECK(meta.find("library_version") != std::string::npos);
}
