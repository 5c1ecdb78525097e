#include "car/io.hpp"
#include "car/model.hpp"
#include "car/randomize.hpp"

#include <doctest.h>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const char* kCli = CAR_CLI_PATH;

struct RunResult {
    int exit_code = -1;
    std::string out;
    std::string err;
};

fs::path work_dir() {
    static const fs::path dir = [] {
        auto d = fs::temp_directory_path() / "car_cli_tests";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

RunResult run_cli(const std::string& args) {
    static int counter = 0;
    const fs::path out = work_dir() / ("stdout_" + std::to_string(counter) + ".txt");
    const fs::path err = work_dir() / ("stderr_" + std::to_string(counter) + ".txt");
    ++counter;
    const std::string cmd = std::string(kCli) + " " + args + " > " + out.string() + " 2> " +
                            err.string();
    const int status = std::system(cmd.c_str());
    RunResult res;
    res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    auto slurp = [](const fs::path& p) {
        std::ifstream in(p);
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    res.out = slurp(out);
    res.err = slurp(err);
    return res;
}

std::string slurp_file(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Synthetic dataset in the six-covariate setting, allocated by PSR and with
// realized responses, written as a CSV the analyze subcommand can consume.
fs::path make_experiment_csv(std::uint64_t seed, int n = 500) {
    car::DgpSpec spec;
    spec.beta = Eigen::VectorXd::Ones(6);
    spec.covariate_sds = Eigen::VectorXd::Ones(6);
    spec.sigma_eps = 2.0;
    spec.n = n;
    car::RngStream cov(car::derive_stream_seed(seed, 0));
    car::RngStream alloc(car::derive_stream_seed(seed, 1));
    car::RngStream noise(car::derive_stream_seed(seed, 2));
    car::Dataset data = car::generate_covariates(spec, cov);
    car::ProcedureConfig psr;
    psr.kind = car::ProcedureKind::PSR;
    car::Assignment t = car::psr_allocate(data.x, psr, alloc);
    car::Dataset full = car::realize_responses(data, t, spec, noise);
    const fs::path path = work_dir() / ("experiment_" + std::to_string(seed) + ".csv");
    car::write_dataset_csv(path.string(), full, &t);
    return path;
}

} // namespace

TEST_CASE("allocate: cr is reproducible under a fixed seed") {
    car::RngStream stream(1);
    car::DgpSpec spec;
    spec.beta = Eigen::VectorXd::Ones(3);
    spec.covariate_sds = Eigen::VectorXd::Ones(3);
    spec.sigma_eps = 1.0;
    spec.n = 40;
    car::Dataset data = car::generate_covariates(spec, stream);
    const fs::path x_csv = work_dir() / "x.csv";
    car::write_dataset_csv(x_csv.string(), data);

    const fs::path t1 = work_dir() / "t1.csv";
    const fs::path t2 = work_dir() / "t2.csv";
    RunResult r1 = run_cli("allocate --procedure cr --input " + x_csv.string() + " --seed 7 --out " +
                           t1.string());
    RunResult r2 = run_cli("allocate --procedure cr --input " + x_csv.string() + " --seed 7 --out " +
                           t2.string());
    CHECK(r1.exit_code == 0);
    CHECK(r2.exit_code == 0);
    CHECK(slurp_file(t1) == slurp_file(t2));

    car::LoadedDataset check = car::read_dataset_csv(x_csv.string());
    CHECK(check.data.n() == 40);
    json side = json::parse(slurp_file(t1.string() + ".json"));
    CHECK(side["procedure"] == "CR");
    CHECK(side["seed"] == 7);
    CHECK(side["n"] == 40);
}

TEST_CASE("allocate: rr sidecar reports attempts and a satisfied criterion") {
    car::RngStream stream(2);
    car::DgpSpec spec;
    spec.beta = Eigen::VectorXd::Ones(4);
    spec.covariate_sds = Eigen::VectorXd::Ones(4);
    spec.sigma_eps = 1.0;
    spec.n = 200;
    car::Dataset data = car::generate_covariates(spec, stream);
    const fs::path x_csv = work_dir() / "x_rr.csv";
    car::write_dataset_csv(x_csv.string(), data);

    const fs::path t_csv = work_dir() / "t_rr.csv";
    RunResult r = run_cli("allocate --procedure rr --a 3 --input " + x_csv.string() +
                          " --seed 11 --out " + t_csv.string());
    CHECK(r.exit_code == 0);
    json side = json::parse(slurp_file(t_csv.string() + ".json"));
    CHECK(side["attempts"].get<long>() >= 1);
    CHECK(side["mahalanobis"].get<double>() < 3.0);
}

TEST_CASE("allocate: psr on an even n balances the arms exactly") {
    car::RngStream stream(3);
    car::DgpSpec spec;
    spec.beta = Eigen::VectorXd::Ones(2);
    spec.covariate_sds = Eigen::VectorXd::Ones(2);
    spec.sigma_eps = 1.0;
    spec.n = 60;
    car::Dataset data = car::generate_covariates(spec, stream);
    const fs::path x_csv = work_dir() / "x_psr.csv";
    car::write_dataset_csv(x_csv.string(), data);

    const fs::path t_csv = work_dir() / "t_psr.csv";
    RunResult r = run_cli("allocate --procedure psr --rho 0.75 --input " + x_csv.string() +
                          " --seed 5 --out " + t_csv.string());
    CHECK(r.exit_code == 0);
    json side = json::parse(slurp_file(t_csv.string() + ".json"));
    CHECK(side["n1"] == 30);
    CHECK(side["n2"] == 30);
}

TEST_CASE("allocate: rr budget exhaustion exits with code 3") {
    car::RngStream stream(4);
    car::DgpSpec spec;
    spec.beta = Eigen::VectorXd::Ones(2);
    spec.covariate_sds = Eigen::VectorXd::Ones(2);
    spec.sigma_eps = 1.0;
    spec.n = 50;
    car::Dataset data = car::generate_covariates(spec, stream);
    const fs::path x_csv = work_dir() / "x_budget.csv";
    car::write_dataset_csv(x_csv.string(), data);
    RunResult r = run_cli("allocate --procedure rr --a 1e-9 --max-attempts 10 --input " +
                          x_csv.string() + " --seed 5 --out " + (work_dir() / "nope.csv").string());
    CHECK(r.exit_code == 3);
}

TEST_CASE("allocate: a csv parse failure exits with code 2 and a line number") {
    const fs::path bad = work_dir() / "bad.csv";
    {
        std::ofstream f(bad);
        f << "x1\n1.0\nnot_a_number\n";
    }
    RunResult r = run_cli("allocate --procedure cr --input " + bad.string() + " --seed 1 --out " +
                          (work_dir() / "t_bad.csv").string());
    CHECK(r.exit_code == 2);
    CHECK(r.err.find("line 3") != std::string::npos);
}

TEST_CASE("allocate: omitting --seed prints the drawn seed") {
    car::RngStream stream(6);
    car::DgpSpec spec;
    spec.beta = Eigen::VectorXd::Ones(1);
    spec.covariate_sds = Eigen::VectorXd::Ones(1);
    spec.sigma_eps = 1.0;
    spec.n = 10;
    car::Dataset data = car::generate_covariates(spec, stream);
    const fs::path x_csv = work_dir() / "x_seedless.csv";
    car::write_dataset_csv(x_csv.string(), data);
    RunResult r = run_cli("allocate --procedure cr --input " + x_csv.string() + " --out " +
                          (work_dir() / "t_seedless.csv").string());
    CHECK(r.exit_code == 0);
    CHECK(r.err.find("seed:") != std::string::npos);
}

TEST_CASE("analyze: including everything makes the corrected test traditional") {
    const fs::path csv = make_experiment_csv(1001, 300);
    RunResult r = run_cli("analyze --input " + csv.string() +
                          " --include all --procedure psr --seed 3");
    REQUIRE(r.exit_code == 0);
    json out = json::parse(r.out);
    CHECK(std::fabs(out["critical_corrected"].get<double>() -
                    out["critical_traditional"].get<double>()) < 1e-6);
    CHECK(std::fabs(out["p_corrected"].get<double>() - out["p_traditional"].get<double>()) < 1e-6);
    CHECK(out["working_model"] == "x1,x2,x3,x4,x5,x6");
}

TEST_CASE("analyze: under cr the corrected critical is the normal quantile") {
    const fs::path csv = make_experiment_csv(1002, 300);
    RunResult r = run_cli("analyze --input " + csv.string() +
                          " --include none --procedure cr --seed 3");
    REQUIRE(r.exit_code == 0);
    json out = json::parse(r.out);
    CHECK(out["critical_corrected"].get<double>() == doctest::Approx(1.95996).epsilon(1e-4));
    CHECK(out["procedure"] == "CR");
}

TEST_CASE("analyze: psr with one included covariate shrinks the critical") {
    const fs::path csv = make_experiment_csv(1003, 500);
    RunResult r = run_cli("analyze --input " + csv.string() +
                          " --include x1 --procedure psr --seed 3");
    REQUIRE(r.exit_code == 0);
    json out = json::parse(r.out);
    const double crit = out["critical_corrected"].get<double>();
    CHECK(crit > 1.15);
    CHECK(crit < 1.33);  // estimated-nuisance noise around the analytic value
    CHECK(out["s"].is_number());
    CHECK(out["estimate"].is_number());
}

TEST_CASE("analyze: missing required columns exits with code 2") {
    car::RngStream stream(7);
    car::DgpSpec spec;
    spec.beta = Eigen::VectorXd::Ones(2);
    spec.covariate_sds = Eigen::VectorXd::Ones(2);
    spec.sigma_eps = 1.0;
    spec.n = 30;
    car::Dataset data = car::generate_covariates(spec, stream);
    const fs::path x_csv = work_dir() / "x_no_y.csv";
    car::write_dataset_csv(x_csv.string(), data);
    RunResult r = run_cli("analyze --input " + x_csv.string() +
                          " --include none --procedure cr --seed 3");
    CHECK(r.exit_code == 2);
    CHECK(r.err.find("no y column") != std::string::npos);
}

TEST_CASE("simulate: smoke run writes deterministic csv and metadata") {
    const fs::path cfg_path = work_dir() / "smoke.json";
    {
        std::ofstream f(cfg_path);
        f << R"({
          "spec_version": 1,
          "name": "smoke",
          "experiment": "rejection",
          "mode": "traditional",
          "dgp": {"mu1": 0, "mu2": 0, "beta": [1, 1], "sigma_eps": 2, "n": 100},
          "procedures": [{"kind": "cr"}],
          "working_models": [{"name": "W1", "include": []}],
          "replications": 4000,
          "alpha": 0.05,
          "master_seed": 12345
        })";
    }
    const fs::path dir1 = work_dir() / "sim1";
    const fs::path dir2 = work_dir() / "sim2";
    RunResult r1 = run_cli("simulate --config " + cfg_path.string() + " --out-dir " +
                           dir1.string() + " --replications 100");
    CHECK(r1.exit_code == 0);
    CHECK(fs::exists(dir1 / "smoke.csv"));
    CHECK(fs::exists(dir1 / "smoke_meta.json"));
    // Byte-identical rerun.
    RunResult r2 = run_cli("simulate --config " + cfg_path.string() + " --out-dir " +
                           dir2.string() + " --replications 100");
    CHECK(r2.exit_code == 0);
    CHECK(slurp_file(dir1 / "smoke.csv") == slurp_file(dir2 / "smoke.csv"));
    CHECK(slurp_file(dir1 / "smoke_meta.json") == slurp_file(dir2 / "smoke_meta.json"));
    json meta = json::parse(slurp_file(dir1 / "smoke_meta.json"));
    CHECK(meta["replications"] == 100);
}

TEST_CASE("simulate: schema violations exit with code 2 and name the key") {
    const fs::path cfg_path = work_dir() / "bad_cfg.json";
    {
        std::ofstream f(cfg_path);
        f << R"({"spec_version": 1, "name": "x", "experiment": "rejection",
                 "mode": "traditional", "dgp": {"beta": [1], "sigma_eps": 1, "n": 50},
                 "procedures": [{"kind": "cr"}],
                 "working_models": [{"include": []}],
                 "replications": 100, "master_seed": 1, "surprise": true})";
    }
    RunResult r = run_cli("simulate --config " + cfg_path.string() + " --out-dir " +
                          (work_dir() / "simbad").string());
    CHECK(r.exit_code == 2);
    CHECK(r.err.find("surprise") != std::string::npos);
}

TEST_CASE("laws: psr and rr summaries print the frozen constants") {
    RunResult psr = run_cli("laws --procedure psr --sigma-eps 2 --beta-ex 1,1,1,1,1,1 --seed 1");
    REQUIRE(psr.exit_code == 0);
    CHECK(psr.out.find("variance: 0.4") != std::string::npos);
    CHECK(psr.out.find("critical (alpha=0.05): 1.23959") != std::string::npos);

    RunResult rr = run_cli(
        "laws --procedure rr --sigma-eps 2 --beta-ex 1,1,1,1,1,1 --included-count 0 --a 3 --seed 1");
    REQUIRE(rr.exit_code == 0);
    CHECK(rr.out.find("v_a: 0.343402") != std::string::npos);

    RunResult cr = run_cli("laws --procedure cr --sigma-eps 2 --beta-ex 1,1 --seed 1");
    REQUIRE(cr.exit_code == 0);
    CHECK(cr.out.find("variance: 1") != std::string::npos);
    CHECK(cr.out.find("critical (alpha=0.05): 1.95996") != std::string::npos);
}
