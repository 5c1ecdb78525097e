#include "car/null_laws.hpp"

#include "car/special.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

namespace car {

using special::chi2_cdf;
using special::normal_cdf;
using special::normal_quantile;

double truncation_variance_factor(int dim, double a) {
    if (dim < 1 || !(a > 0.0)) {
        throw InvalidArgument("truncation_variance_factor: need dim >= 1 and a > 0");
    }
    const double denom = chi2_cdf(a, dim);
    if (denom <= 0.0) {
        throw InvalidArgument("truncation_variance_factor: acceptance region has zero mass");
    }
    return chi2_cdf(a, dim + 2) / denom;
}

namespace {

NuisanceParams assemble_nuisance(const Eigen::VectorXd& beta_ex, const Eigen::VectorXd& var_ex,
                                 double sigma_eps2, int total, std::vector<int> excluded) {
    NuisanceParams nu;
    nu.beta_ex = beta_ex;
    nu.var_ex = var_ex;
    nu.sigma_eps2 = sigma_eps2;
    nu.total_covariates = total;
    nu.excluded = std::move(excluded);
    nu.sigma_w2 = sigma_eps2 + beta_ex.array().square().matrix().dot(var_ex);
    if (!(nu.sigma_w2 > 0.0)) {
        throw DegenerateTest("nuisance: sigma_w^2 is zero; S has no limit law");
    }
    nu.lambda1 = std::sqrt(sigma_eps2 / nu.sigma_w2);
    nu.lambda2 = 1.0 / std::sqrt(nu.sigma_w2);
    return nu;
}

} // namespace

NuisanceParams estimate_nuisance(const Dataset& data, const Assignment& t,
                                 const WorkingModel& w) {
    if (!data.y) {
        throw InvalidArgument("estimate_nuisance: dataset has no responses");
    }
    const int total = data.covariate_count();
    w.validate(total);

    WorkingModel full;
    full.included.resize(static_cast<std::size_t>(total));
    for (int j = 0; j < total; ++j) full.included[static_cast<std::size_t>(j)] = j;
    FitResult fit = ols_fit(build_design(data, t, full), *data.y);

    std::vector<int> excluded = w.excluded(total);
    const int q = static_cast<int>(excluded.size());
    Eigen::VectorXd beta_ex(q), var_ex(q);
    for (int j = 0; j < q; ++j) {
        const int col = excluded[static_cast<std::size_t>(j)];
        beta_ex[j] = fit.theta_hat[2 + col];
        const Eigen::VectorXd c = data.x.col(col);
        var_ex[j] = (c.array() - c.mean()).square().sum() / (data.n() - 1);
    }
    return assemble_nuisance(beta_ex, var_ex, fit.sigma_w2_hat, total, std::move(excluded));
}

NuisanceParams true_nuisance(const DgpSpec& dgp, const WorkingModel& w) {
    dgp.validate();
    const int total = dgp.covariate_count();
    w.validate(total);
    std::vector<int> excluded = w.excluded(total);
    const int q = static_cast<int>(excluded.size());
    Eigen::VectorXd beta_ex(q), var_ex(q);
    for (int j = 0; j < q; ++j) {
        const int col = excluded[static_cast<std::size_t>(j)];
        beta_ex[j] = dgp.beta[col];
        var_ex[j] = dgp.covariate_sds[col] * dgp.covariate_sds[col];
    }
    return assemble_nuisance(beta_ex, var_ex, dgp.sigma_eps * dgp.sigma_eps, total,
                             std::move(excluded));
}

double NullLaw::variance() const {
    double factor = 0.0;
    switch (kind) {
        case XiLawKind::Degenerate: factor = 0.0; break;
        case XiLawKind::Gaussian: factor = gaussian_factor; break;
        case XiLawKind::Truncated:
            factor = truncation_variance_factor(trunc_dim, trunc_threshold);
            break;
    }
    const double covar_term = beta_ex.size() > 0
                                  ? beta_ex.array().square().matrix().dot(var_ex)
                                  : 0.0;
    return lambda1 * lambda1 + lambda2 * lambda2 * factor * covar_term;
}

double NullLaw::sd() const { return std::sqrt(variance()); }

double NullLaw::cdf(double x) const {
    if (!is_normal()) {
        throw InvalidArgument("NullLaw::cdf: no analytic CDF for the truncated mixture");
    }
    return normal_cdf((x - shift) / sd());
}

double NullLaw::sample(RngStream& stream) const {
    switch (kind) {
        case XiLawKind::Degenerate:
        case XiLawKind::Gaussian:
            return shift + sd() * stream.normal();
        case XiLawKind::Truncated: {
            Eigen::MatrixXd d = sample_truncated_normal(trunc_dim, trunc_threshold, 1, stream);
            double covar = 0.0;
            for (int j = 0; j < beta_ex.size(); ++j) {
                covar += beta_ex[j] * std::sqrt(var_ex[j]) *
                         d(0, excluded[static_cast<std::size_t>(j)]);
            }
            return shift + lambda1 * stream.normal() + lambda2 * covar;
        }
    }
    return shift;
}

void NullLaw::sample_many(RngStream& stream, std::vector<double>& out) const {
    for (double& v : out) v = sample(stream);
}

NullLaw null_law_for(const ProcedureConfig& procedure, const NuisanceParams& nu) {
    procedure.validate();
    NullLaw law;
    law.lambda1 = nu.lambda1;
    law.lambda2 = nu.lambda2;
    law.beta_ex = nu.beta_ex;
    law.var_ex = nu.var_ex;
    law.excluded = nu.excluded;
    switch (procedure.kind) {
        case ProcedureKind::CR:
            law.kind = XiLawKind::Gaussian;
            law.gaussian_factor = 1.0;
            break;
        case ProcedureKind::DABCD:
            law.kind = XiLawKind::Gaussian;
            law.gaussian_factor = 0.2;
            break;
        case ProcedureKind::PSR:
            law.kind = XiLawKind::Degenerate;
            break;
        case ProcedureKind::RR:
            law.kind = XiLawKind::Truncated;
            law.trunc_dim = nu.total_covariates;
            law.trunc_threshold = procedure.rr_threshold;
            break;
    }
    return law;
}

Eigen::MatrixXd sample_truncated_normal(int dim, double a, long count, RngStream& stream) {
    if (dim < 1 || !(a > 0.0) || count < 1) {
        throw InvalidArgument("sample_truncated_normal: bad arguments");
    }
    const double accept = chi2_cdf(a, dim);
    if (accept < 1e-6) {
        throw BudgetExhausted("sample_truncated_normal: acceptance probability below 1e-6");
    }
    const long max_attempts = 1000 + static_cast<long>(20.0 * static_cast<double>(count) / accept);
    Eigen::MatrixXd out(count, dim);
    Eigen::VectorXd d(dim);
    long attempts = 0;
    for (long r = 0; r < count;) {
        if (++attempts > max_attempts) {
            throw BudgetExhausted("sample_truncated_normal: attempt budget exhausted");
        }
        for (int j = 0; j < dim; ++j) d[j] = stream.normal();
        if (d.squaredNorm() < a) {
            out.row(r++) = d;
        }
    }
    return out;
}

namespace {

constexpr long kShardSize = 16384;

// Fill `out` with H0 draws of the law, sharded so the content is a pure
// function of base_seed no matter how many workers run.
void generate_law_draws(const NullLaw& law, std::uint64_t base_seed, std::vector<double>& out,
                        int workers) {
    NullLaw centered = law;
    centered.shift = 0.0;
    const long total = static_cast<long>(out.size());
    const long shards = (total + kShardSize - 1) / kShardSize;
    auto run_shard = [&](long s) {
        RngStream shard_stream(derive_stream_seed(base_seed, static_cast<std::uint64_t>(s)));
        const long lo = s * kShardSize;
        const long hi = std::min(total, lo + kShardSize);
        for (long i = lo; i < hi; ++i) {
            out[static_cast<std::size_t>(i)] = centered.sample(shard_stream);
        }
    };
    if (workers <= 1 || shards <= 1) {
        for (long s = 0; s < shards; ++s) run_shard(s);
        return;
    }
    std::vector<std::thread> pool;
    std::atomic<long> next{0};
    const int nthreads = std::min<long>(workers, shards);
    for (int w = 0; w < nthreads; ++w) {
        pool.emplace_back([&]() {
            for (long s = next.fetch_add(1); s < shards; s = next.fetch_add(1)) run_shard(s);
        });
    }
    for (auto& th : pool) th.join();
}

double upper_quantile_abs(std::vector<double>& values, double prob) {
    for (double& v : values) v = std::fabs(v);
    const long b = static_cast<long>(values.size());
    long idx = static_cast<long>(std::ceil(prob * static_cast<double>(b))) - 1;
    idx = std::clamp<long>(idx, 0, b - 1);
    std::nth_element(values.begin(), values.begin() + idx, values.end());
    return values[static_cast<std::size_t>(idx)];
}

} // namespace

CriticalValue corrected_critical(const NullLaw& law, double alpha, long draws, RngStream& stream,
                                 int workers) {
    if (!(alpha > 0.0 && alpha < 1.0)) {
        throw InvalidArgument("corrected_critical: alpha must lie in (0,1)");
    }
    CriticalValue crit;
    crit.alpha = alpha;
    if (law.is_normal()) {
        crit.value = law.sd() * normal_quantile(1.0 - alpha / 2.0);
        crit.method = CriticalMethod::AnalyticNormal;
        return crit;
    }
    if (draws < 100000) {
        throw InvalidArgument("corrected_critical: Monte Carlo path needs >= 1e5 draws");
    }
    std::vector<double> sample(static_cast<std::size_t>(draws));
    generate_law_draws(law, stream.next_u64(), sample, workers);
    crit.value = upper_quantile_abs(sample, 1.0 - alpha);
    crit.method = CriticalMethod::MonteCarlo;
    crit.draws = draws;
    return crit;
}

double corrected_p_value(const NullLaw& law, double s_observed, long draws, RngStream& stream,
                         int workers) {
    const double s = std::fabs(s_observed);
    if (law.is_normal()) {
        return 2.0 * normal_cdf(-s / law.sd());
    }
    if (draws < 100000) {
        throw InvalidArgument("corrected_p_value: Monte Carlo path needs >= 1e5 draws");
    }
    std::vector<double> sample(static_cast<std::size_t>(draws));
    generate_law_draws(law, stream.next_u64(), sample, workers);
    long k = 0;
    for (double v : sample) {
        if (std::fabs(v) >= s) ++k;
    }
    return static_cast<double>(k + 1) / static_cast<double>(draws + 1);
}

TruncatedDrawBank make_truncated_draw_bank(int dim, double a, long count, RngStream& stream) {
    TruncatedDrawBank bank;
    bank.d = sample_truncated_normal(dim, a, count, stream);
    bank.z.resize(count);
    for (long i = 0; i < count; ++i) bank.z[i] = stream.normal();
    return bank;
}

double critical_from_bank(const NullLaw& law, const TruncatedDrawBank& bank, double alpha,
                          std::vector<double>& scratch) {
    if (law.kind != XiLawKind::Truncated) {
        throw InvalidArgument("critical_from_bank: law is not the truncated mixture");
    }
    if (law.trunc_dim != bank.d.cols()) {
        throw InvalidArgument("critical_from_bank: bank dimension mismatch");
    }
    const long b = bank.size();
    Eigen::VectorXd acc = law.lambda1 * bank.z;
    for (int j = 0; j < law.beta_ex.size(); ++j) {
        const double w = law.lambda2 * law.beta_ex[j] * std::sqrt(law.var_ex[j]);
        acc += w * bank.d.col(law.excluded[static_cast<std::size_t>(j)]);
    }
    scratch.resize(static_cast<std::size_t>(b));
    Eigen::Map<Eigen::VectorXd>(scratch.data(), b) = acc;
    return upper_quantile_abs(scratch, 1.0 - alpha);
}

} // namespace car
