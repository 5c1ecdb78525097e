#pragma once

// Test statistics for the treatment and covariate effects, traditional
// decisions, and the asymptotic power of the treatment test.

#include "car/model.hpp"
#include "car/null_laws.hpp"

#include <Eigen/Dense>

#include <optional>

namespace car {

// S = (mu1_hat - mu2_hat) / sqrt(sigma_w2_hat * L'(G'G)^{-1}L).
struct TreatmentTest {
    double s = 0.0;
    double se = 0.0;
    double estimate = 0.0;  // mu1_hat - mu2_hat
};

// S* = (C theta - c0)'[C (G'G)^{-1} C']^{-1}(C theta - c0) / (m sigma_w2_hat).
struct CovariateTest {
    double s_star = 0.0;
    Eigen::MatrixXd c;
    Eigen::VectorXd c0;
    int m = 0;
};

struct Decision {
    bool reject = false;
    double p_value = 1.0;
    double critical_value = 0.0;
    double alpha = 0.05;
};

TreatmentTest treatment_statistic(const FitResult& fit);

// C must be m x (p+2) of rank m <= p with zero first two columns.
CovariateTest covariate_statistic(const FitResult& fit, const Eigen::MatrixXd& c,
                                  const Eigen::VectorXd& c0);

// 1 x (p+2) contrast selecting the coefficient of the j-th included covariate.
Eigen::MatrixXd single_coefficient_contrast(int p, int j);

// Two-sided normal test of |S| against z_{1-alpha/2}.
Decision traditional_decision(const TreatmentTest& test, double alpha);

// Upper-tail test of S* against chi2_{m,1-alpha}/m.
Decision traditional_decision(const CovariateTest& test, double alpha);

// Asymptotic power of the two-sided treatment test against the local
// alternative delta = sqrt(n)(mu1 - mu2):
//   F_S(-c + lambda2*delta/2) + F_S(-c - lambda2*delta/2),
// with c = z_{1-alpha/2} unless `critical` overrides it (corrected tests).
// Normal laws are analytic; the RR mixture needs `draws` >= 1e5 samples.
double asymptotic_power(const NullLaw& law, double delta, double alpha, long draws,
                        RngStream* stream = nullptr, std::optional<double> critical = {});

} // namespace car
