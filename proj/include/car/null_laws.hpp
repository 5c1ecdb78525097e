#pragma once

// Asymptotic null laws of the treatment statistic S per randomization
// procedure, the truncation variance factor v_a, nuisance estimation from
// observed data, and corrected critical values / p-values.

#include "car/model.hpp"
#include "car/rng.hpp"
#include "car/types.hpp"

#include <Eigen/Dense>

#include <optional>
#include <vector>

namespace car {

// v_a = (2/dim) * gamma(dim/2 + 1, a/2) / gamma(dim/2, a/2): the per-coordinate
// variance of a standard normal vector conditioned on squared norm < a.
// Equivalently chi2_cdf(a, dim+2) / chi2_cdf(a, dim); strictly in (0,1).
double truncation_variance_factor(int dim, double a);

// Parameters of the limit law: lambda1 = sigma_eps/sigma_w, lambda2 = 1/sigma_w,
// plus the excluded-covariate effects and variances that weight xi_ex.
struct NuisanceParams {
    double lambda1 = 1.0;
    double lambda2 = 1.0;
    Eigen::VectorXd beta_ex;  // effects of the q excluded covariates
    Eigen::VectorXd var_ex;   // their variances
    double sigma_eps2 = 0.0;
    double sigma_w2 = 0.0;
    int total_covariates = 0;   // p + q
    std::vector<int> excluded;  // covariate indices behind beta_ex/var_ex

    int q() const { return static_cast<int>(beta_ex.size()); }
};

// Fit the full model (all covariates) to recover sigma_eps^2 and beta_ex,
// then assemble lambda1/lambda2 for the given working model.
NuisanceParams estimate_nuisance(const Dataset& data, const Assignment& t,
                                 const WorkingModel& w);

// Same quantities from the true DGP parameters (oracle path).
NuisanceParams true_nuisance(const DgpSpec& dgp, const WorkingModel& w);

enum class XiLawKind {
    Degenerate,  // xi_ex = 0 (PSR)
    Gaussian,    // xi_ex ~ N(0, factor * diag(var_ex)) (CR factor 1, DABCD 1/5)
    Truncated,   // xi = Sigma^{1/2} D | D'D < a (RR)
};

// Law of S under H0 (shift = 0) or local alternatives (shift = lambda2*delta/2).
struct NullLaw {
    double lambda1 = 1.0;
    double lambda2 = 1.0;
    XiLawKind kind = XiLawKind::Gaussian;
    double gaussian_factor = 1.0;
    int trunc_dim = 0;
    double trunc_threshold = 0.0;
    std::vector<int> excluded;  // D coordinates carrying the excluded covariates
    Eigen::VectorXd beta_ex;
    Eigen::VectorXd var_ex;
    double shift = 0.0;

    bool is_normal() const { return kind != XiLawKind::Truncated; }
    double variance() const;
    double sd() const;
    // CDF; analytic for normal kinds, otherwise throws.
    double cdf(double x) const;
    double sample(RngStream& stream) const;
    void sample_many(RngStream& stream, std::vector<double>& out) const;
};

NullLaw null_law_for(const ProcedureConfig& procedure, const NuisanceParams& nu);

// `count` draws of D ~ N(0, I_dim) conditioned on D'D < a, by rejection.
// Rows are draws. Throws BudgetExhausted when the acceptance region is
// rarer than 1e-6.
Eigen::MatrixXd sample_truncated_normal(int dim, double a, long count, RngStream& stream);

enum class CriticalMethod { AnalyticNormal, MonteCarlo };

struct CriticalValue {
    double value = 0.0;
    double alpha = 0.0;
    CriticalMethod method = CriticalMethod::AnalyticNormal;
    long draws = 0;
};

// Two-sided critical value c with P(|S| > c) = alpha under the H0 law.
// Normal laws are analytic; the RR mixture uses `draws` Monte Carlo samples
// generated in fixed-size shards off one value consumed from `stream`, so the
// result is identical for any worker count.
CriticalValue corrected_critical(const NullLaw& law, double alpha, long draws,
                                 RngStream& stream, int workers = 1);

// Two-sided p-value P(|S| >= |s_observed|) under the H0 law. Monte Carlo
// paths use add-one smoothing (k+1)/(B+1).
double corrected_p_value(const NullLaw& law, double s_observed, long draws, RngStream& stream,
                         int workers = 1);

// Cached draws of (Z, D) for re-weighting RR criticals across replications:
// quantiles of |l1*Z + l2*sum_j w_j D_j| for many (l1, l2, w) without new
// rejection sampling.
struct TruncatedDrawBank {
    Eigen::VectorXd z;  // standard normal, length B
    Eigen::MatrixXd d;  // B x dim, truncated standard normal

    long size() const { return z.size(); }
};

TruncatedDrawBank make_truncated_draw_bank(int dim, double a, long count, RngStream& stream);

// Two-sided critical of the law evaluated against the bank's cached draws.
double critical_from_bank(const NullLaw& law, const TruncatedDrawBank& bank, double alpha,
                          std::vector<double>& scratch);

} // namespace car
