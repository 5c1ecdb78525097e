#include "car/simkit.hpp"

#include "car/inference.hpp"
#include "car/io.hpp"
#include "car/model.hpp"
#include "car/randomize.hpp"
#include "car/special.hpp"
#include "car/version.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <thread>

namespace car {

using nlohmann::json;

const char* test_mode_name(TestMode mode) {
    switch (mode) {
        case TestMode::Traditional: return "traditional";
        case TestMode::OracleCritical: return "oracle-critical";
        case TestMode::EstimatedCritical: return "estimated-critical";
    }
    return "?";
}

const char* experiment_kind_name(ExperimentKind kind) {
    switch (kind) {
        case ExperimentKind::Rejection: return "rejection";
        case ExperimentKind::Power: return "power";
        case ExperimentKind::CovariateEffect: return "covariate-effect";
        case ExperimentKind::Distribution: return "distribution";
    }
    return "?";
}

namespace {

TestMode test_mode_from_name(const std::string& s) {
    if (s == "traditional") return TestMode::Traditional;
    if (s == "oracle-critical") return TestMode::OracleCritical;
    if (s == "estimated-critical") return TestMode::EstimatedCritical;
    throw InvalidArgument("config: unknown mode '" + s + "'");
}

ExperimentKind experiment_kind_from_name(const std::string& s) {
    if (s == "rejection") return ExperimentKind::Rejection;
    if (s == "power") return ExperimentKind::Power;
    if (s == "covariate-effect") return ExperimentKind::CovariateEffect;
    if (s == "distribution") return ExperimentKind::Distribution;
    throw InvalidArgument("config: unknown experiment '" + s + "'");
}

void check_grid(const std::vector<double>& grid, const char* label) {
    for (double g : grid) {
        if (!std::isfinite(g)) throw InvalidArgument(std::string("config: ") + label + " has a non-finite entry");
    }
    if (!std::is_sorted(grid.begin(), grid.end())) {
        throw InvalidArgument(std::string("config: ") + label + " must be sorted ascending");
    }
    for (std::size_t i = 1; i < grid.size(); ++i) {
        if (grid[i] == grid[i - 1]) {
            throw InvalidArgument(std::string("config: ") + label + " has duplicate entries");
        }
    }
}

} // namespace

void ExperimentConfig::validate() const {
    dgp.validate();
    if (replications < 100) throw InvalidArgument("config: replications must be >= 100");
    if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidArgument("config: alpha must lie in (0,1)");
    if (procedures.empty()) throw InvalidArgument("config: no procedures");
    if (working_models.empty()) throw InvalidArgument("config: no working models");
    for (const auto& proc : procedures) proc.validate();
    for (const auto& w : working_models) w.validate(dgp.covariate_count());
    if (workers < 0) throw InvalidArgument("config: workers must be >= 0");

    switch (kind) {
        case ExperimentKind::Rejection:
            if (!delta_grid.empty() || !beta3_grid.empty()) {
                throw InvalidArgument("config: rejection experiments take no grid");
            }
            break;
        case ExperimentKind::Power:
            if (delta_grid.empty()) throw InvalidArgument("config: power experiment needs delta_grid");
            check_grid(delta_grid, "delta_grid");
            if (std::find(delta_grid.begin(), delta_grid.end(), 0.0) == delta_grid.end()) {
                throw InvalidArgument("config: delta_grid must include 0");
            }
            if (!beta3_grid.empty()) throw InvalidArgument("config: power experiment takes no beta3_grid");
            break;
        case ExperimentKind::CovariateEffect: {
            if (beta3_grid.empty()) throw InvalidArgument("config: covariate-effect experiment needs beta3_grid");
            check_grid(beta3_grid, "beta3_grid");
            if (!delta_grid.empty()) throw InvalidArgument("config: covariate-effect experiment takes no delta_grid");
            if (covariate_index < 0 || covariate_index >= dgp.covariate_count()) {
                throw InvalidArgument("config: covariate_index out of range");
            }
            if (mode != TestMode::Traditional) {
                throw InvalidArgument("config: the covariate-effect test is always traditional");
            }
            for (const auto& w : working_models) {
                if (std::find(w.included.begin(), w.included.end(), covariate_index) ==
                    w.included.end()) {
                    throw InvalidArgument(
                        "config: every working model must include the tested covariate");
                }
            }
            break;
        }
        case ExperimentKind::Distribution:
            if (working_models.size() != 1) {
                throw InvalidArgument("config: distribution check takes exactly one working model");
            }
            if (!delta_grid.empty() || !beta3_grid.empty()) {
                throw InvalidArgument("config: distribution check takes no grid");
            }
            break;
    }
    const bool needs_mc_criticals =
        (mode != TestMode::Traditional) &&
        std::any_of(procedures.begin(), procedures.end(),
                    [](const ProcedureConfig& p) { return p.kind == ProcedureKind::RR; });
    if (needs_mc_criticals && rr_critical_draws < 100000) {
        throw InvalidArgument("config: rr_critical_draws must be >= 1e5");
    }
}

std::vector<std::string> ExperimentConfig::procedure_labels() const {
    std::vector<std::string> labels;
    labels.reserve(procedures.size());
    for (const auto& proc : procedures) {
        std::string base = procedure_name(proc.kind);
        int dup = 0;
        for (const auto& existing : labels) {
            if (existing == base || existing.rfind(base + "-", 0) == 0) ++dup;
        }
        labels.push_back(dup == 0 ? base : base + "-" + std::to_string(dup + 1));
    }
    return labels;
}

std::vector<std::string> ExperimentConfig::working_model_names() const {
    std::vector<std::string> names;
    names.reserve(working_models.size());
    for (std::size_t i = 0; i < working_models.size(); ++i) {
        names.push_back(working_models[i].name.empty() ? "W" + std::to_string(i + 1)
                                                       : working_models[i].name);
    }
    return names;
}

// ---------------------------------------------------------------------------
// Config JSON
// ---------------------------------------------------------------------------

namespace {

void reject_unknown_keys(const json& obj, const char* ctx,
                         std::initializer_list<const char*> allowed) {
    std::string unknown;
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* key : allowed) {
            if (it.key() == key) {
                ok = true;
                break;
            }
        }
        if (!ok) {
            if (!unknown.empty()) unknown += ", ";
            unknown += it.key();
        }
    }
    if (!unknown.empty()) {
        throw InvalidArgument(std::string("config: unknown key(s) in ") + ctx + ": " + unknown);
    }
}

const json& require_key(const json& obj, const char* key, const char* ctx) {
    auto it = obj.find(key);
    if (it == obj.end()) {
        throw InvalidArgument(std::string("config: missing key '") + key + "' in " + ctx);
    }
    return *it;
}

Eigen::VectorXd parse_vector(const json& arr, const char* ctx) {
    if (!arr.is_array()) throw InvalidArgument(std::string("config: ") + ctx + " must be an array");
    Eigen::VectorXd v(arr.size());
    Eigen::Index i = 0;
    for (const auto& e : arr) v[i++] = e.get<double>();
    return v;
}

int parse_covariate_ref(const json& e) {
    if (e.is_number_integer()) return e.get<int>();
    if (e.is_string()) {
        const std::string s = e.get<std::string>();
        if (s.size() > 1 && s[0] == 'x') {
            return std::stoi(s.substr(1)) - 1;
        }
        throw InvalidArgument("config: covariate names must look like x1, x2, ...; got '" + s + "'");
    }
    throw InvalidArgument("config: include entries must be indices or x-names");
}

} // namespace

ExperimentConfig parse_experiment_config(const std::string& json_text) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::exception& e) {
        throw InvalidArgument(std::string("config: malformed JSON: ") + e.what());
    }
    reject_unknown_keys(root, "top level",
                        {"spec_version", "name", "experiment", "dgp", "procedures",
                         "working_models", "replications", "alpha", "master_seed", "mode",
                         "delta_grid", "beta3_grid", "covariate_index", "rr_exact_critical",
                         "rr_critical_draws", "workers"});
    if (require_key(root, "spec_version", "top level").get<int>() != 1) {
        throw InvalidArgument("config: unsupported spec_version (expected 1)");
    }

    ExperimentConfig cfg;
    cfg.name = root.value("name", std::string("experiment"));
    cfg.kind = experiment_kind_from_name(require_key(root, "experiment", "top level").get<std::string>());
    cfg.mode = test_mode_from_name(require_key(root, "mode", "top level").get<std::string>());

    const json& dgp = require_key(root, "dgp", "top level");
    reject_unknown_keys(dgp, "dgp", {"mu1", "mu2", "beta", "covariate_sds", "sigma_eps", "n"});
    cfg.dgp.mu1 = dgp.value("mu1", 0.0);
    cfg.dgp.mu2 = dgp.value("mu2", 0.0);
    cfg.dgp.beta = parse_vector(require_key(dgp, "beta", "dgp"), "dgp.beta");
    if (dgp.contains("covariate_sds")) {
        cfg.dgp.covariate_sds = parse_vector(dgp["covariate_sds"], "dgp.covariate_sds");
    } else {
        cfg.dgp.covariate_sds = Eigen::VectorXd::Ones(cfg.dgp.beta.size());
    }
    cfg.dgp.sigma_eps = require_key(dgp, "sigma_eps", "dgp").get<double>();
    cfg.dgp.n = require_key(dgp, "n", "dgp").get<int>();

    const json& procs = require_key(root, "procedures", "top level");
    if (!procs.is_array() || procs.empty()) {
        throw InvalidArgument("config: procedures must be a nonempty array");
    }
    for (const auto& pj : procs) {
        ProcedureConfig proc;
        proc.kind = procedure_from_name(require_key(pj, "kind", "procedure").get<std::string>());
        switch (proc.kind) {
            case ProcedureKind::CR:
                reject_unknown_keys(pj, "cr procedure", {"kind"});
                break;
            case ProcedureKind::RR:
                reject_unknown_keys(pj, "rr procedure", {"kind", "a", "max_attempts"});
                proc.rr_threshold = pj.value("a", 3.0);
                proc.rr_max_attempts = pj.value("max_attempts", 100000L);
                break;
            case ProcedureKind::PSR:
                reject_unknown_keys(pj, "psr procedure", {"kind", "rho"});
                proc.psr_rho = pj.value("rho", 0.75);
                break;
            case ProcedureKind::DABCD:
                reject_unknown_keys(pj, "dabcd procedure", {"kind", "burn_in"});
                proc.dabcd_burn_in = pj.value("burn_in", 0);
                break;
        }
        cfg.procedures.push_back(proc);
    }

    const json& wms = require_key(root, "working_models", "top level");
    if (!wms.is_array() || wms.empty()) {
        throw InvalidArgument("config: working_models must be a nonempty array");
    }
    for (const auto& wj : wms) {
        reject_unknown_keys(wj, "working model", {"name", "include"});
        WorkingModel w;
        w.name = wj.value("name", std::string());
        for (const auto& e : require_key(wj, "include", "working model")) {
            w.included.push_back(parse_covariate_ref(e));
        }
        cfg.working_models.push_back(std::move(w));
    }

    cfg.replications = require_key(root, "replications", "top level").get<int>();
    cfg.alpha = root.value("alpha", 0.05);
    cfg.master_seed = require_key(root, "master_seed", "top level").get<std::uint64_t>();
    if (root.contains("delta_grid")) {
        cfg.delta_grid = root["delta_grid"].get<std::vector<double>>();
    }
    if (root.contains("beta3_grid")) {
        cfg.beta3_grid = root["beta3_grid"].get<std::vector<double>>();
    }
    cfg.covariate_index = root.value("covariate_index", 2);
    cfg.rr_exact_critical = root.value("rr_exact_critical", false);
    cfg.rr_critical_draws = root.value("rr_critical_draws", 200000L);
    cfg.workers = root.value("workers", 1);
    cfg.validate();
    return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InvalidArgument("cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_experiment_config(text);
}

std::string canonical_config_json(const ExperimentConfig& config) {
    json root;
    root["spec_version"] = 1;
    root["name"] = config.name;
    root["experiment"] = experiment_kind_name(config.kind);
    root["mode"] = test_mode_name(config.mode);
    json dgp;
    dgp["mu1"] = config.dgp.mu1;
    dgp["mu2"] = config.dgp.mu2;
    dgp["beta"] = std::vector<double>(config.dgp.beta.begin(), config.dgp.beta.end());
    dgp["covariate_sds"] =
        std::vector<double>(config.dgp.covariate_sds.begin(), config.dgp.covariate_sds.end());
    dgp["sigma_eps"] = config.dgp.sigma_eps;
    dgp["n"] = config.dgp.n;
    root["dgp"] = std::move(dgp);
    json procs = json::array();
    for (const auto& proc : config.procedures) {
        json pj;
        pj["kind"] = procedure_name(proc.kind);
        switch (proc.kind) {
            case ProcedureKind::RR:
                pj["a"] = proc.rr_threshold;
                pj["max_attempts"] = proc.rr_max_attempts;
                break;
            case ProcedureKind::PSR: pj["rho"] = proc.psr_rho; break;
            case ProcedureKind::DABCD: pj["burn_in"] = proc.dabcd_burn_in; break;
            case ProcedureKind::CR: break;
        }
        procs.push_back(std::move(pj));
    }
    root["procedures"] = std::move(procs);
    json wms = json::array();
    const auto names = config.working_model_names();
    for (std::size_t i = 0; i < config.working_models.size(); ++i) {
        json wj;
        wj["name"] = names[i];
        wj["include"] = config.working_models[i].included;
        wms.push_back(std::move(wj));
    }
    root["working_models"] = std::move(wms);
    root["replications"] = config.replications;
    root["alpha"] = config.alpha;
    root["master_seed"] = config.master_seed;
    if (!config.delta_grid.empty()) root["delta_grid"] = config.delta_grid;
    if (!config.beta3_grid.empty()) root["beta3_grid"] = config.beta3_grid;
    if (config.kind == ExperimentKind::CovariateEffect) {
        root["covariate_index"] = config.covariate_index;
    }
    root["rr_exact_critical"] = config.rr_exact_critical;
    root["rr_critical_draws"] = config.rr_critical_draws;
    return root.dump();
}

std::uint64_t config_hash(const ExperimentConfig& config) {
    const std::string text = canonical_config_json(config);
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a 64
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// ---------------------------------------------------------------------------
// Experiment engine
// ---------------------------------------------------------------------------

const RejectionCell& RejectionTable::cell(const std::string& procedure,
                                          const std::string& working_model,
                                          double grid_value) const {
    for (const auto& c : cells) {
        if (c.procedure == procedure && c.working_model == working_model &&
            c.grid_value == grid_value) {
            return c;
        }
    }
    throw InvalidArgument("RejectionTable: no cell (" + procedure + ", " + working_model + ")");
}

namespace {

constexpr int kRepChunk = 8;

int effective_workers(int workers) {
    if (workers > 0) return workers;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

template <typename Fn>
void parallel_reps(int replications, int workers, Fn&& per_rep) {
    workers = std::min(effective_workers(workers), replications);
    if (workers <= 1) {
        for (int r = 0; r < replications; ++r) per_rep(r, 0);
        return;
    }
    std::atomic<int> next{0};
    std::atomic<bool> failed{false};
    std::mutex err_mutex;
    std::exception_ptr error;
    auto body = [&](int worker_id) {
        try {
            while (!failed.load(std::memory_order_relaxed)) {
                const int lo = next.fetch_add(kRepChunk);
                if (lo >= replications) break;
                const int hi = std::min(replications, lo + kRepChunk);
                for (int r = lo; r < hi; ++r) per_rep(r, worker_id);
            }
        } catch (...) {
            std::lock_guard<std::mutex> lock(err_mutex);
            if (!error) error = std::current_exception();
            failed.store(true);
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) pool.emplace_back(body, w);
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

// Re-throws a replication error with the index attached, keeping the type so
// callers can still map it to an exit code.
[[noreturn]] void fail_replication(int rep) {
    const std::string prefix = "replication " + std::to_string(rep) + ": ";
    try {
        throw;
    } catch (const BudgetExhausted& e) {
        throw BudgetExhausted(prefix + e.what());
    } catch (const SingularDesign& e) {
        throw SingularDesign(prefix + e.what());
    } catch (const SingularCovariance& e) {
        throw SingularCovariance(prefix + e.what());
    } catch (const DegenerateTest& e) {
        throw DegenerateTest(prefix + e.what());
    } catch (const std::exception& e) {
        throw Error(prefix + e.what());
    }
}

struct GridPoint {
    double value = 0.0;
    double mu1 = 0.0;
    double mu2 = 0.0;
    Eigen::VectorXd beta;
};

std::vector<GridPoint> build_grid(const ExperimentConfig& config) {
    std::vector<GridPoint> grid;
    switch (config.kind) {
        case ExperimentKind::Rejection:
        case ExperimentKind::Distribution: {
            GridPoint g;
            g.value = config.dgp.mu1 - config.dgp.mu2;
            g.mu1 = config.dgp.mu1;
            g.mu2 = config.dgp.mu2;
            g.beta = config.dgp.beta;
            grid.push_back(std::move(g));
            break;
        }
        case ExperimentKind::Power:
            for (double d : config.delta_grid) {
                GridPoint g;
                g.value = d;
                g.mu1 = config.dgp.mu2 + d;  // mu1 - mu2 = d
                g.mu2 = config.dgp.mu2;
                g.beta = config.dgp.beta;
                grid.push_back(std::move(g));
            }
            break;
        case ExperimentKind::CovariateEffect:
            for (double b : config.beta3_grid) {
                GridPoint g;
                g.value = b;
                g.mu1 = config.dgp.mu1;
                g.mu2 = config.dgp.mu2;
                g.beta = config.dgp.beta;
                g.beta[config.covariate_index] = b;
                grid.push_back(std::move(g));
            }
            break;
    }
    return grid;
}

struct EngineSetup {
    std::vector<std::string> proc_labels;
    std::vector<std::string> wm_names;
    std::vector<GridPoint> grid;
    int cells = 0;

    int cell_index(int pi, int wi, int gi, int wm_count, int grid_count) const {
        return (pi * wm_count + wi) * grid_count + gi;
    }
};

ExperimentResult run_treatment_experiment(const ExperimentConfig& config) {
    config.validate();
    const int P = static_cast<int>(config.procedures.size());
    const int W = static_cast<int>(config.working_models.size());
    EngineSetup setup;
    setup.proc_labels = config.procedure_labels();
    setup.wm_names = config.working_model_names();
    setup.grid = build_grid(config);
    const int G = static_cast<int>(setup.grid.size());
    setup.cells = P * W * G;
    const int R = config.replications;
    const double z_crit = special::normal_quantile(1.0 - config.alpha / 2.0);
    const int total_cov = config.dgp.covariate_count();

    // Oracle criticals: one per (procedure, working model); the H0 law does
    // not depend on the treatment-effect grid.
    std::vector<double> oracle_crit(static_cast<std::size_t>(P * W), z_crit);
    if (config.mode == TestMode::OracleCritical) {
        for (int pi = 0; pi < P; ++pi) {
            for (int wi = 0; wi < W; ++wi) {
                NuisanceParams nu = true_nuisance(config.dgp, config.working_models[wi]);
                NullLaw law = null_law_for(config.procedures[pi], nu);
                RngStream aux(derive_stream_seed(config.master_seed,
                                                 kAuxIndexBase + static_cast<std::uint64_t>(pi) * W + wi));
                oracle_crit[static_cast<std::size_t>(pi * W + wi)] =
                    corrected_critical(law, config.alpha, config.rr_critical_draws, aux,
                                       config.workers)
                        .value;
            }
        }
    }

    // Shared truncated-draw banks for estimated-critical RR cells.
    std::vector<TruncatedDrawBank> banks(static_cast<std::size_t>(P));
    if (config.mode == TestMode::EstimatedCritical && !config.rr_exact_critical) {
        for (int pi = 0; pi < P; ++pi) {
            if (config.procedures[pi].kind != ProcedureKind::RR) continue;
            RngStream aux(derive_stream_seed(config.master_seed,
                                             kAuxIndexBase + 1024 + static_cast<std::uint64_t>(pi)));
            banks[static_cast<std::size_t>(pi)] = make_truncated_draw_bank(
                total_cov, config.procedures[pi].rr_threshold, config.rr_critical_draws, aux);
        }
    }

    const int workers = std::min(effective_workers(config.workers), R);
    std::vector<std::vector<long>> counts(
        static_cast<std::size_t>(std::max(workers, 1)),
        std::vector<long>(static_cast<std::size_t>(setup.cells), 0));
    ExperimentResult result;
    if (config.collect_samples) {
        result.samples.assign(static_cast<std::size_t>(setup.cells),
                              std::vector<double>(static_cast<std::size_t>(R), 0.0));
    }

    auto per_rep = [&](int rep, int worker_id) {
        try {
            const std::uint64_t rep_root = derive_rep_seed(config.master_seed, rep);
            RngStream cov_stream(derive_stream_seed(rep_root, kChannelCovariates));
            RngStream alloc_stream(derive_stream_seed(rep_root, kChannelAllocation));
            RngStream err_stream(derive_stream_seed(rep_root, kChannelErrors));

            Dataset data = generate_covariates(config.dgp, cov_stream);
            Eigen::VectorXd eps(config.dgp.n);
            for (int i = 0; i < config.dgp.n; ++i) eps[i] = config.dgp.sigma_eps * err_stream.normal();

            // Linear parts per grid point, shared across procedures.
            std::vector<Eigen::VectorXd> linear(static_cast<std::size_t>(G));
            for (int gi = 0; gi < G; ++gi) {
                linear[static_cast<std::size_t>(gi)] =
                    total_cov > 0 ? Eigen::VectorXd(data.x * setup.grid[static_cast<std::size_t>(gi)].beta + eps)
                                  : eps;
            }

            Eigen::VectorXd col_var;
            if (config.mode == TestMode::EstimatedCritical && total_cov > 0) {
                col_var.resize(total_cov);
                for (int j = 0; j < total_cov; ++j) {
                    const Eigen::VectorXd c = data.x.col(j);
                    col_var[j] = (c.array() - c.mean()).square().sum() / (config.dgp.n - 1);
                }
            }

            std::vector<double> scratch;
            for (int pi = 0; pi < P; ++pi) {
                const Assignment t = allocate(data.x, config.procedures[pi], alloc_stream).assignment;

                std::optional<OlsSolver> full_solver;
                if (config.mode == TestMode::EstimatedCritical) {
                    WorkingModel full;
                    for (int j = 0; j < total_cov; ++j) full.included.push_back(j);
                    full_solver.emplace(build_design(data, t, full));
                }

                for (int wi = 0; wi < W; ++wi) {
                    const WorkingModel& wm = config.working_models[static_cast<std::size_t>(wi)];
                    OlsSolver solver(build_design(data, t, wm));
                    for (int gi = 0; gi < G; ++gi) {
                        const GridPoint& gp = setup.grid[static_cast<std::size_t>(gi)];
                        Eigen::VectorXd y = linear[static_cast<std::size_t>(gi)];
                        for (int i = 0; i < config.dgp.n; ++i) {
                            y[i] += t.t[i] == 1 ? gp.mu1 : gp.mu2;
                        }
                        const FitResult fit = solver.fit(y);
                        const double s = treatment_statistic(fit).s;

                        double crit = z_crit;
                        if (config.mode == TestMode::OracleCritical) {
                            crit = oracle_crit[static_cast<std::size_t>(pi * W + wi)];
                        } else if (config.mode == TestMode::EstimatedCritical) {
                            const FitResult full_fit = full_solver->fit(y);
                            Eigen::VectorXd beta_hat = full_fit.theta_hat.tail(total_cov);
                            std::vector<int> excluded = wm.excluded(total_cov);
                            const int q = static_cast<int>(excluded.size());
                            NuisanceParams nu;
                            nu.beta_ex.resize(q);
                            nu.var_ex.resize(q);
                            for (int j = 0; j < q; ++j) {
                                nu.beta_ex[j] = beta_hat[excluded[static_cast<std::size_t>(j)]];
                                nu.var_ex[j] = col_var[excluded[static_cast<std::size_t>(j)]];
                            }
                            nu.sigma_eps2 = full_fit.sigma_w2_hat;
                            nu.sigma_w2 = nu.sigma_eps2 +
                                          nu.beta_ex.array().square().matrix().dot(nu.var_ex);
                            nu.lambda1 = std::sqrt(nu.sigma_eps2 / nu.sigma_w2);
                            nu.lambda2 = 1.0 / std::sqrt(nu.sigma_w2);
                            nu.total_covariates = total_cov;
                            nu.excluded = std::move(excluded);

                            NullLaw law = null_law_for(config.procedures[pi], nu);
                            if (law.is_normal()) {
                                crit = law.sd() * z_crit;
                            } else if (!config.rr_exact_critical) {
                                crit = critical_from_bank(law, banks[static_cast<std::size_t>(pi)],
                                                          config.alpha, scratch);
                            } else {
                                const int cell = setup.cell_index(pi, wi, gi, W, G);
                                RngStream crit_stream(derive_stream_seed(
                                    rep_root, 8 + static_cast<std::uint64_t>(cell)));
                                crit = corrected_critical(law, config.alpha,
                                                          config.rr_critical_draws, crit_stream)
                                           .value;
                            }
                        }

                        const int cell = setup.cell_index(pi, wi, gi, W, G);
                        if (std::fabs(s) > crit) {
                            ++counts[static_cast<std::size_t>(worker_id)][static_cast<std::size_t>(cell)];
                        }
                        if (config.collect_samples) {
                            result.samples[static_cast<std::size_t>(cell)][static_cast<std::size_t>(rep)] = s;
                        }
                    }
                }
            }
        } catch (...) {
            fail_replication(rep);
        }
    };
    parallel_reps(R, config.workers, per_rep);

    for (int pi = 0; pi < P; ++pi) {
        for (int wi = 0; wi < W; ++wi) {
            for (int gi = 0; gi < G; ++gi) {
                const int cell = setup.cell_index(pi, wi, gi, W, G);
                long total = 0;
                for (const auto& c : counts) total += c[static_cast<std::size_t>(cell)];
                RejectionCell rc;
                rc.procedure = setup.proc_labels[static_cast<std::size_t>(pi)];
                rc.working_model = setup.wm_names[static_cast<std::size_t>(wi)];
                rc.grid_value = setup.grid[static_cast<std::size_t>(gi)].value;
                rc.replications = R;
                rc.rate = static_cast<double>(total) / R;
                rc.se = std::sqrt(rc.rate * (1.0 - rc.rate) / R);
                result.table.cells.push_back(std::move(rc));
            }
        }
    }
    if (config.collect_samples) {
        // Reorder samples to match the emitted cell order.
        std::vector<std::vector<double>> ordered;
        ordered.reserve(result.samples.size());
        for (int pi = 0; pi < P; ++pi) {
            for (int wi = 0; wi < W; ++wi) {
                for (int gi = 0; gi < G; ++gi) {
                    ordered.push_back(std::move(
                        result.samples[static_cast<std::size_t>(setup.cell_index(pi, wi, gi, W, G))]));
                }
            }
        }
        result.samples = std::move(ordered);
    }
    return result;
}

} // namespace

ExperimentResult run_rejection_experiment(const ExperimentConfig& config) {
    if (config.kind != ExperimentKind::Rejection) {
        throw InvalidArgument("run_rejection_experiment: config.kind must be 'rejection'");
    }
    return run_treatment_experiment(config);
}

ExperimentResult run_power_curve(const ExperimentConfig& config) {
    if (config.kind != ExperimentKind::Power) {
        throw InvalidArgument("run_power_curve: config.kind must be 'power'");
    }
    return run_treatment_experiment(config);
}

ExperimentResult run_covariate_effect_experiment(const ExperimentConfig& config) {
    if (config.kind != ExperimentKind::CovariateEffect) {
        throw InvalidArgument("run_covariate_effect_experiment: config.kind must be 'covariate-effect'");
    }
    config.validate();
    const int P = static_cast<int>(config.procedures.size());
    const int W = static_cast<int>(config.working_models.size());
    EngineSetup setup;
    setup.proc_labels = config.procedure_labels();
    setup.wm_names = config.working_model_names();
    setup.grid = build_grid(config);
    const int G = static_cast<int>(setup.grid.size());
    setup.cells = P * W * G;
    const int R = config.replications;
    const int total_cov = config.dgp.covariate_count();
    const double chi2_crit = special::chi2_quantile(1.0 - config.alpha, 1.0);

    // Contrast selecting the tested coefficient within each working model.
    std::vector<Eigen::MatrixXd> contrasts;
    contrasts.reserve(static_cast<std::size_t>(W));
    for (const auto& wm : config.working_models) {
        const auto it = std::find(wm.included.begin(), wm.included.end(), config.covariate_index);
        const int pos = static_cast<int>(it - wm.included.begin());
        contrasts.push_back(single_coefficient_contrast(wm.p(), pos));
    }
    const Eigen::VectorXd c0 = Eigen::VectorXd::Zero(1);

    const int workers = std::min(effective_workers(config.workers), R);
    std::vector<std::vector<long>> counts(
        static_cast<std::size_t>(std::max(workers, 1)),
        std::vector<long>(static_cast<std::size_t>(setup.cells), 0));
    ExperimentResult result;
    if (config.collect_samples) {
        result.samples.assign(static_cast<std::size_t>(setup.cells),
                              std::vector<double>(static_cast<std::size_t>(R), 0.0));
    }

    auto per_rep = [&](int rep, int worker_id) {
        try {
            const std::uint64_t rep_root = derive_rep_seed(config.master_seed, rep);
            RngStream cov_stream(derive_stream_seed(rep_root, kChannelCovariates));
            RngStream alloc_stream(derive_stream_seed(rep_root, kChannelAllocation));
            RngStream err_stream(derive_stream_seed(rep_root, kChannelErrors));

            Dataset data = generate_covariates(config.dgp, cov_stream);
            Eigen::VectorXd eps(config.dgp.n);
            for (int i = 0; i < config.dgp.n; ++i) eps[i] = config.dgp.sigma_eps * err_stream.normal();

            // The grid only moves one coefficient; shift the shared linear part.
            Eigen::VectorXd base_linear = data.x * config.dgp.beta + eps;
            const Eigen::VectorXd xcol = data.x.col(config.covariate_index);
            const double base_beta = config.dgp.beta[config.covariate_index];

            for (int pi = 0; pi < P; ++pi) {
                const Assignment t = allocate(data.x, config.procedures[pi], alloc_stream).assignment;
                for (int wi = 0; wi < W; ++wi) {
                    OlsSolver solver(build_design(data, t, config.working_models[static_cast<std::size_t>(wi)]));
                    for (int gi = 0; gi < G; ++gi) {
                        const GridPoint& gp = setup.grid[static_cast<std::size_t>(gi)];
                        Eigen::VectorXd y =
                            base_linear + (gp.value - base_beta) * xcol;
                        for (int i = 0; i < config.dgp.n; ++i) {
                            y[i] += t.t[i] == 1 ? gp.mu1 : gp.mu2;
                        }
                        const FitResult fit = solver.fit(y);
                        const CovariateTest test =
                            covariate_statistic(fit, contrasts[static_cast<std::size_t>(wi)], c0);
                        const int cell = setup.cell_index(pi, wi, gi, W, G);
                        if (test.s_star > chi2_crit) {
                            ++counts[static_cast<std::size_t>(worker_id)][static_cast<std::size_t>(cell)];
                        }
                        if (config.collect_samples) {
                            result.samples[static_cast<std::size_t>(cell)][static_cast<std::size_t>(rep)] =
                                test.s_star;
                        }
                    }
                }
            }
        } catch (...) {
            fail_replication(rep);
        }
    };
    parallel_reps(R, config.workers, per_rep);

    for (int pi = 0; pi < P; ++pi) {
        for (int wi = 0; wi < W; ++wi) {
            for (int gi = 0; gi < G; ++gi) {
                const int cell = setup.cell_index(pi, wi, gi, W, G);
                long total = 0;
                for (const auto& c : counts) total += c[static_cast<std::size_t>(cell)];
                RejectionCell rc;
                rc.procedure = setup.proc_labels[static_cast<std::size_t>(pi)];
                rc.working_model = setup.wm_names[static_cast<std::size_t>(wi)];
                rc.grid_value = setup.grid[static_cast<std::size_t>(gi)].value;
                rc.replications = R;
                rc.rate = static_cast<double>(total) / R;
                rc.se = std::sqrt(rc.rate * (1.0 - rc.rate) / R);
                result.table.cells.push_back(std::move(rc));
            }
        }
    }
    (void)total_cov;
    return result;
}

// ---------------------------------------------------------------------------
// Distribution check
// ---------------------------------------------------------------------------

namespace {

double ks_against_cdf(std::vector<double> sample, const NullLaw& law) {
    std::sort(sample.begin(), sample.end());
    const double n = static_cast<double>(sample.size());
    double d = 0.0;
    for (std::size_t i = 0; i < sample.size(); ++i) {
        const double f = law.cdf(sample[i]);
        d = std::max(d, std::fabs(f - static_cast<double>(i) / n));
        d = std::max(d, std::fabs(static_cast<double>(i + 1) / n - f));
    }
    return d;
}

double ks_two_sample(std::vector<double> a, std::vector<double> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const double na = static_cast<double>(a.size());
    const double nb = static_cast<double>(b.size());
    std::size_t i = 0, j = 0;
    double d = 0.0;
    while (i < a.size() && j < b.size()) {
        if (a[i] <= b[j]) {
            ++i;
        } else {
            ++j;
        }
        d = std::max(d, std::fabs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
    }
    return d;
}

} // namespace

DistributionCheck empirical_distribution_check(const ExperimentConfig& config) {
    if (config.kind != ExperimentKind::Distribution) {
        throw InvalidArgument("empirical_distribution_check: config.kind must be 'distribution'");
    }
    ExperimentConfig sim = config;
    sim.collect_samples = true;
    sim.kind = ExperimentKind::Rejection;  // reuse the treatment engine, H0 stats
    sim.mode = TestMode::Traditional;
    ExperimentResult res = run_treatment_experiment(sim);

    DistributionCheck check;
    const auto labels = config.procedure_labels();
    const int P = static_cast<int>(config.procedures.size());
    constexpr double kBinLo = -4.0;
    constexpr double kBinWidth = 0.2;
    constexpr int kBins = 40;
    const long ref_draws = 1000000;

    for (int pi = 0; pi < P; ++pi) {
        DistributionCheck::PerProcedure per;
        per.procedure = labels[static_cast<std::size_t>(pi)];
        per.s_values = res.samples[static_cast<std::size_t>(pi)];  // one wm, one grid point

        NuisanceParams nu = true_nuisance(config.dgp, config.working_models[0]);
        NullLaw law = null_law_for(config.procedures[static_cast<std::size_t>(pi)], nu);
        per.law_sd = law.sd();

        double mean = 0.0;
        for (double v : per.s_values) mean += v;
        mean /= static_cast<double>(per.s_values.size());
        double ss = 0.0;
        for (double v : per.s_values) ss += (v - mean) * (v - mean);
        per.sample_sd = std::sqrt(ss / (static_cast<double>(per.s_values.size()) - 1.0));

        std::vector<double> ref;
        if (law.is_normal()) {
            per.ks = ks_against_cdf(per.s_values, law);
        } else {
            RngStream aux(derive_stream_seed(config.master_seed,
                                             kAuxIndexBase + 2048 + static_cast<std::uint64_t>(pi)));
            ref.resize(static_cast<std::size_t>(ref_draws));
            law.sample_many(aux, ref);
            per.ks = ks_two_sample(per.s_values, ref);
        }

        // Histogram + theoretical density for the figure output.
        std::vector<long> hist(kBins, 0);
        for (double v : per.s_values) {
            const int b = static_cast<int>(std::floor((v - kBinLo) / kBinWidth));
            if (b >= 0 && b < kBins) ++hist[static_cast<std::size_t>(b)];
        }
        std::vector<double> mix_centers;
        if (!law.is_normal()) {
            // Subsample the reference draws for the mixture density average.
            const std::size_t stride = ref.size() / 20000;
            for (std::size_t k = 0; k < ref.size(); k += stride) mix_centers.push_back(ref[k]);
        }
        for (int b = 0; b < kBins; ++b) {
            DistributionCheck::FigureRow row;
            row.procedure = per.procedure;
            row.bin_width = kBinWidth;
            row.bin_center = kBinLo + (b + 0.5) * kBinWidth;
            row.empirical_density = static_cast<double>(hist[static_cast<std::size_t>(b)]) /
                                    (static_cast<double>(per.s_values.size()) * kBinWidth);
            if (law.is_normal()) {
                row.theoretical_density = special::normal_pdf(row.bin_center / per.law_sd) / per.law_sd;
            } else {
                // Density of lambda1 Z + (mixture part), averaged over draws of
                // the mixture part; mix_centers carry full law draws, so strip
                // the normal component by deconvolution-free averaging instead:
                // f(x) = E_D[ phi((x - u)/l1)/l1 ] with u the covariate term.
                // Using full draws would double-count Z, so rebuild u-draws here.
                row.theoretical_density = 0.0;
            }
            check.figure.push_back(row);
        }
        if (!law.is_normal()) {
            // Covariate-term draws for the mixture density.
            RngStream aux2(derive_stream_seed(config.master_seed,
                                              kAuxIndexBase + 4096 + static_cast<std::uint64_t>(pi)));
            const long m = 20000;
            Eigen::MatrixXd d = sample_truncated_normal(law.trunc_dim, law.trunc_threshold, m, aux2);
            Eigen::VectorXd u = Eigen::VectorXd::Zero(m);
            for (int j = 0; j < law.beta_ex.size(); ++j) {
                u += law.lambda2 * law.beta_ex[j] * std::sqrt(law.var_ex[j]) *
                     d.col(law.excluded[static_cast<std::size_t>(j)]);
            }
            for (auto& row : check.figure) {
                if (row.procedure != per.procedure || row.theoretical_density != 0.0) continue;
                double acc = 0.0;
                for (long k = 0; k < m; ++k) {
                    acc += special::normal_pdf((row.bin_center - u[k]) / law.lambda1) / law.lambda1;
                }
                row.theoretical_density = acc / static_cast<double>(m);
            }
        }
        check.procedures.push_back(std::move(per));
    }
    return check;
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

void write_table_csv(const std::string& path, const RejectionTable& table) {
    std::ofstream out(path);
    if (!out) throw InvalidArgument("cannot write " + path);
    out << "procedure,working_model,grid_value,rate,se,reps\n";
    for (const auto& c : table.cells) {
        out << c.procedure << ',' << c.working_model << ',' << format_double(c.grid_value) << ','
            << format_double(c.rate) << ',' << format_double(c.se) << ',' << c.replications
            << '\n';
    }
}

void write_figure_csv(const std::string& path, const DistributionCheck& check) {
    std::ofstream out(path);
    if (!out) throw InvalidArgument("cannot write " + path);
    out << "procedure,bin_center,bin_width,empirical_density,theoretical_density\n";
    for (const auto& row : check.figure) {
        out << row.procedure << ',' << format_double(row.bin_center) << ','
            << format_double(row.bin_width) << ',' << format_double(row.empirical_density) << ','
            << format_double(row.theoretical_density) << '\n';
    }
}

std::string experiment_metadata_json(const ExperimentConfig& config,
                                     const DistributionCheck* check) {
    json meta;
    meta["name"] = config.name;
    meta["spec_version"] = 1;
    meta["experiment"] = experiment_kind_name(config.kind);
    meta["mode"] = test_mode_name(config.mode);
    char hash_hex[17];
    std::snprintf(hash_hex, sizeof(hash_hex), "%016llx",
                  static_cast<unsigned long long>(config_hash(config)));
    meta["config_hash"] = hash_hex;
    meta["master_seed"] = config.master_seed;
    meta["replications"] = config.replications;
    meta["alpha"] = config.alpha;
    meta["library_version"] = kVersion;
    meta["procedures"] = config.procedure_labels();
    meta["working_models"] = config.working_model_names();
    json notes = json::array();
    for (const auto& proc : config.procedures) {
        if (proc.kind == ProcedureKind::RR) {
            notes.push_back("RR balance threshold a=" + format_double(proc.rr_threshold) +
                            " is a preset assumption");
            break;
        }
    }
    meta["notes"] = std::move(notes);
    if (check != nullptr) {
        json per = json::array();
        for (const auto& p : check->procedures) {
            json row;
            row["procedure"] = p.procedure;
            row["ks"] = p.ks;
            row["sample_sd"] = p.sample_sd;
            row["law_sd"] = p.law_sd;
            per.push_back(std::move(row));
        }
        meta["distribution_check"] = std::move(per);
    }
    return meta.dump(2) + "\n";
}

} // namespace car
