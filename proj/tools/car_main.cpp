// car — covariate-adjusted randomization and post-randomization inference.
//
// Subcommands:
//   allocate   assign units in a covariate CSV to two arms
//   analyze    traditional + corrected tests for a completed experiment
//   simulate   run a Monte Carlo experiment from a JSON config
//   laws       print the null law of S for a procedure
//
// Exit codes: 0 success, 2 input error, 3 procedure budget exhausted,
// 4 numerical failure.

#include "car/inference.hpp"
#include "car/io.hpp"
#include "car/model.hpp"
#include "car/null_laws.hpp"
#include "car/randomize.hpp"
#include "car/simkit.hpp"
#include "car/special.hpp"
#include "car/version.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

namespace {

using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitBudget = 3;
constexpr int kExitNumeric = 4;

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& seed_flag) {
    if (seed_flag) return *seed_flag;
    std::random_device rd;
    std::uint64_t seed = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
    std::fprintf(stderr, "seed: %llu (drawn from system entropy)\n",
                 static_cast<unsigned long long>(seed));
    return seed;
}

car::ProcedureConfig make_procedure(const std::string& name, double a, long max_attempts,
                                    double rho, int burn_in) {
    car::ProcedureConfig proc;
    proc.kind = car::procedure_from_name(name);
    proc.rr_threshold = a;
    proc.rr_max_attempts = max_attempts;
    proc.psr_rho = rho;
    proc.dabcd_burn_in = burn_in;
    proc.validate();
    return proc;
}

// --include grammar: "all", "none", or a comma list of x-names/indices.
car::WorkingModel parse_include(const std::string& spec, int total_covariates) {
    car::WorkingModel w;
    if (spec == "all") {
        for (int j = 0; j < total_covariates; ++j) w.included.push_back(j);
        return w;
    }
    if (spec == "none" || spec.empty()) return w;
    std::stringstream ss(spec);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.size() > 1 && tok[0] == 'x') {
            w.included.push_back(std::stoi(tok.substr(1)) - 1);
        } else if (!tok.empty()) {
            w.included.push_back(std::stoi(tok));
        }
    }
    w.validate(total_covariates);
    return w;
}

std::string include_label(const car::WorkingModel& w) {
    if (w.included.empty()) return "none";
    std::string out;
    for (std::size_t i = 0; i < w.included.size(); ++i) {
        if (i) out += ",";
        out += "x" + std::to_string(w.included[i] + 1);
    }
    return out;
}

int cmd_allocate(const std::string& input, const std::string& out_path,
                 const std::string& procedure, std::optional<std::uint64_t> seed_flag, double a,
                 long max_attempts, double rho, int burn_in) {
    car::LoadedDataset loaded = car::read_dataset_csv(input);
    car::ProcedureConfig proc = make_procedure(procedure, a, max_attempts, rho, burn_in);
    const std::uint64_t seed = resolve_seed(seed_flag);
    car::RngStream stream(seed);

    car::AllocationResult res = car::allocate(loaded.data.x, proc, stream);
    car::write_assignment_csv(out_path, res.assignment);

    json side;
    side["procedure"] = car::procedure_name(proc.kind);
    side["seed"] = seed;
    side["n"] = res.assignment.n();
    side["n1"] = res.assignment.n1;
    side["n2"] = res.assignment.n2;
    if (proc.kind == car::ProcedureKind::RR) side["attempts"] = res.attempts;
    if (proc.kind == car::ProcedureKind::DABCD) {
        side["singular_fallbacks"] = res.singular_fallbacks;
    }
    if (loaded.data.covariate_count() > 0) {
        car::ImbalanceReport report = car::imbalance_report(loaded.data.x, res.assignment);
        side["mahalanobis"] = report.mahalanobis;
        side["imbalance"] = std::vector<double>(report.raw.begin(), report.raw.end());
    }
    std::ofstream sidecar(out_path + ".json");
    sidecar << side.dump(2) << "\n";
    std::fprintf(stderr, "allocated %d units (%d/%d) with %s -> %s\n", res.assignment.n(),
                 res.assignment.n1, res.assignment.n2, car::procedure_name(proc.kind),
                 out_path.c_str());
    return kExitOk;
}

int cmd_analyze(const std::string& input, const std::string& include,
                const std::string& procedure, std::optional<std::uint64_t> seed_flag, double a,
                double alpha, long draws, const std::string& out_path) {
    car::LoadedDataset loaded = car::read_dataset_csv(input);
    if (!loaded.data.y) {
        throw car::InvalidArgument("analyze: input file has no y column");
    }
    if (!loaded.assignment) {
        throw car::InvalidArgument("analyze: input file has no t column");
    }
    car::ProcedureConfig proc = make_procedure(procedure, a, 100000, 0.75, 0);
    car::WorkingModel w = parse_include(include, loaded.data.covariate_count());
    const std::uint64_t seed = resolve_seed(seed_flag);
    car::RngStream stream(seed);

    car::FitResult fit =
        car::ols_fit(car::build_design(loaded.data, *loaded.assignment, w), *loaded.data.y);
    car::TreatmentTest test = car::treatment_statistic(fit);
    car::Decision trad = car::traditional_decision(test, alpha);

    car::NuisanceParams nu = car::estimate_nuisance(loaded.data, *loaded.assignment, w);
    car::NullLaw law = car::null_law_for(proc, nu);
    car::CriticalValue corrected = car::corrected_critical(law, alpha, draws, stream);
    const double p_corrected = car::corrected_p_value(law, test.s, draws, stream);

    json out;
    out["estimate"] = test.estimate;
    out["s"] = test.s;
    out["p_traditional"] = trad.p_value;
    out["p_corrected"] = p_corrected;
    out["critical_traditional"] = trad.critical_value;
    out["critical_corrected"] = corrected.value;
    out["procedure"] = car::procedure_name(proc.kind);
    out["working_model"] = include_label(w);
    const std::string text = out.dump(2) + "\n";
    if (out_path.empty() || out_path == "-") {
        std::cout << text;
    } else {
        std::ofstream f(out_path);
        f << text;
    }
    return kExitOk;
}

int cmd_simulate(const std::string& config_path, const std::string& out_dir, int replications,
                 int workers) {
    car::ExperimentConfig config = car::load_experiment_config(config_path);
    if (replications > 0) config.replications = replications;
    if (workers >= 0) config.workers = workers;
    config.validate();

    std::filesystem::create_directories(out_dir);
    const std::string base = out_dir + "/" + config.name;

    if (config.kind == car::ExperimentKind::Distribution) {
        car::DistributionCheck check = car::empirical_distribution_check(config);
        car::write_figure_csv(base + ".csv", check);
        std::ofstream meta(base + "_meta.json");
        meta << car::experiment_metadata_json(config, &check);
        for (const auto& p : check.procedures) {
            std::printf("%s: ks=%.6g sample_sd=%.6g law_sd=%.6g\n", p.procedure.c_str(), p.ks,
                        p.sample_sd, p.law_sd);
        }
    } else {
        car::ExperimentResult result;
        switch (config.kind) {
            case car::ExperimentKind::Rejection:
                result = car::run_rejection_experiment(config);
                break;
            case car::ExperimentKind::Power:
                result = car::run_power_curve(config);
                break;
            case car::ExperimentKind::CovariateEffect:
                result = car::run_covariate_effect_experiment(config);
                break;
            case car::ExperimentKind::Distribution:
                break;
        }
        car::write_table_csv(base + ".csv", result.table);
        std::ofstream meta(base + "_meta.json");
        meta << car::experiment_metadata_json(config);
        for (const auto& c : result.table.cells) {
            std::printf("%s %s grid=%.6g rate=%.6g se=%.6g\n", c.procedure.c_str(),
                        c.working_model.c_str(), c.grid_value, c.rate, c.se);
        }
    }
    std::fprintf(stderr, "wrote %s.csv and %s_meta.json\n", base.c_str(), base.c_str());
    return kExitOk;
}

int cmd_laws(const std::string& procedure, double sigma_eps, const std::string& beta_ex_csv,
             const std::string& var_ex_csv, int included_count, double a, double alpha,
             long draws, std::optional<std::uint64_t> seed_flag) {
    std::vector<double> beta_ex, var_ex;
    {
        std::stringstream ss(beta_ex_csv);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            if (!tok.empty()) beta_ex.push_back(std::stod(tok));
        }
    }
    if (!var_ex_csv.empty()) {
        std::stringstream ss(var_ex_csv);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            if (!tok.empty()) var_ex.push_back(std::stod(tok));
        }
    } else {
        var_ex.assign(beta_ex.size(), 1.0);
    }
    if (var_ex.size() != beta_ex.size()) {
        throw car::InvalidArgument("laws: --beta-ex and --var-ex must have equal length");
    }

    car::ProcedureConfig proc = make_procedure(procedure, a, 100000, 0.75, 0);
    const int q = static_cast<int>(beta_ex.size());
    car::NuisanceParams nu;
    nu.beta_ex = Eigen::Map<Eigen::VectorXd>(beta_ex.data(), q);
    nu.var_ex = Eigen::Map<Eigen::VectorXd>(var_ex.data(), q);
    nu.sigma_eps2 = sigma_eps * sigma_eps;
    nu.sigma_w2 = nu.sigma_eps2 + nu.beta_ex.array().square().matrix().dot(nu.var_ex);
    nu.lambda1 = std::sqrt(nu.sigma_eps2 / nu.sigma_w2);
    nu.lambda2 = 1.0 / std::sqrt(nu.sigma_w2);
    nu.total_covariates = included_count + q;
    for (int j = 0; j < q; ++j) nu.excluded.push_back(included_count + j);

    car::NullLaw law = car::null_law_for(proc, nu);
    std::printf("procedure: %s\n", car::procedure_name(proc.kind));
    std::printf("lambda1: %.6g\n", law.lambda1);
    std::printf("lambda2: %.6g\n", law.lambda2);
    switch (law.kind) {
        case car::XiLawKind::Degenerate:
            std::printf("family: normal, covariate imbalance eliminated\n");
            break;
        case car::XiLawKind::Gaussian:
            std::printf("family: normal, gaussian imbalance factor %.6g\n", law.gaussian_factor);
            break;
        case car::XiLawKind::Truncated:
            std::printf("family: normal + truncated-gaussian mixture (dim=%d, a=%.6g)\n",
                        law.trunc_dim, law.trunc_threshold);
            std::printf("v_a: %.6g\n",
                        car::truncation_variance_factor(law.trunc_dim, law.trunc_threshold));
            break;
    }
    std::printf("variance: %.6g\n", law.variance());

    car::RngStream stream(resolve_seed(seed_flag));
    car::CriticalValue crit = car::corrected_critical(law, alpha, draws, stream);
    std::printf("critical (alpha=%.6g): %.6g%s\n", alpha, crit.value,
                crit.method == car::CriticalMethod::MonteCarlo ? " (monte-carlo)" : "");
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"covariate-adjusted randomization and inference toolkit"};
    app.set_version_flag("--version", car::kVersion);
    app.require_subcommand(1);

    std::string input, out_path, procedure = "cr", include = "none", config_path, out_dir = ".";
    std::string beta_ex_csv, var_ex_csv;
    std::optional<std::uint64_t> seed_flag;
    double a = 3.0, rho = 0.75, alpha = 0.05, sigma_eps = 1.0;
    long max_attempts = 100000, draws = 200000;
    int burn_in = 0, replications = -1, workers = -1, included_count = 0;

    auto* alloc = app.add_subcommand("allocate", "randomize units in a covariate CSV");
    alloc->add_option("--input", input, "dataset CSV (x1..xK[,y][,t])")->required();
    alloc->add_option("--out", out_path, "assignment CSV to write")->required();
    alloc->add_option("--procedure", procedure, "cr|rr|psr|dabcd")->required();
    alloc->add_option("--seed", seed_flag, "RNG seed (default: system entropy)");
    alloc->add_option("--a", a, "RR balance threshold");
    alloc->add_option("--max-attempts", max_attempts, "RR redraw budget");
    alloc->add_option("--rho", rho, "PSR biased-coin probability");
    alloc->add_option("--burn-in", burn_in, "DABCD fair-coin burn-in (0 = p+q+2)");

    auto* analyze = app.add_subcommand("analyze", "test a completed experiment");
    analyze->add_option("--input", input, "dataset CSV with y and t columns")->required();
    analyze->add_option("--include", include, "covariates in the working model: all|none|x1,x3,...")
        ->required();
    analyze->add_option("--procedure", procedure, "randomization used: cr|rr|psr|dabcd")->required();
    analyze->add_option("--seed", seed_flag, "RNG seed (default: system entropy)");
    analyze->add_option("--a", a, "RR balance threshold used at randomization");
    analyze->add_option("--alpha", alpha, "significance level");
    analyze->add_option("--draws", draws, "Monte Carlo draws for RR criticals");
    analyze->add_option("--out", out_path, "output JSON path (default: stdout)");

    auto* simulate = app.add_subcommand("simulate", "run a Monte Carlo experiment config");
    simulate->add_option("--config", config_path, "experiment JSON")->required();
    simulate->add_option("--out-dir", out_dir, "output directory");
    simulate->add_option("--replications", replications, "override replication count");
    simulate->add_option("--workers", workers, "worker threads (0 = hardware)");

    auto* laws = app.add_subcommand("laws", "print the null law of S for a procedure");
    laws->add_option("--procedure", procedure, "cr|rr|psr|dabcd")->required();
    laws->add_option("--sigma-eps", sigma_eps, "error s.d.")->required();
    laws->add_option("--beta-ex", beta_ex_csv, "excluded-covariate effects, comma separated");
    laws->add_option("--var-ex", var_ex_csv, "their variances (default: all 1)");
    laws->add_option("--included-count", included_count, "number of included covariates (p)");
    laws->add_option("--a", a, "RR balance threshold");
    laws->add_option("--alpha", alpha, "significance level");
    laws->add_option("--draws", draws, "Monte Carlo draws for RR criticals");
    laws->add_option("--seed", seed_flag, "RNG seed (default: system entropy)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        app.exit(e);
        return kExitInput;
    }

    try {
        if (alloc->parsed()) {
            return cmd_allocate(input, out_path, procedure, seed_flag, a, max_attempts, rho,
                                burn_in);
        }
        if (analyze->parsed()) {
            return cmd_analyze(input, include, procedure, seed_flag, a, alpha, draws, out_path);
        }
        if (simulate->parsed()) {
            return cmd_simulate(config_path, out_dir, replications, workers);
        }
        if (laws->parsed()) {
            return cmd_laws(procedure, sigma_eps, beta_ex_csv, var_ex_csv, included_count, a,
                            alpha, draws, seed_flag);
        }
    } catch (const car::BudgetExhausted& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitBudget;
    } catch (const car::SingularDesign& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumeric;
    } catch (const car::SingularCovariance& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumeric;
    } catch (const car::DegenerateTest& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumeric;
    } catch (const car::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitInput;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitInput;
    }
    return kExitOk;
}
