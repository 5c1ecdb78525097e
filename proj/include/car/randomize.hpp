#pragma once

// The four allocation procedures and the imbalance measures they optimize.
// Procedures see only covariates; responses never enter an allocation.

#include "car/rng.hpp"
#include "car/types.hpp"

#include <Eigen/Dense>

namespace car {

// Signed covariate imbalance between arms.
struct ImbalanceReport {
    Eigen::VectorXd raw;     // sum_i (2 T_i - 1) x_i
    Eigen::VectorXd scaled;  // raw / sqrt(n)
    double mahalanobis = 0.0;
};

// raw imbalance vector sum_i (2 T_i - 1) x_i, unscaled.
Eigen::VectorXd imbalance_vector(const Eigen::MatrixXd& x, const Assignment& t);

// Mahalanobis distance between arm means, standardized by
// (1/n1 + 1/n2) S_X with S_X the sample covariance of all rows.
double mahalanobis_distance(const Eigen::MatrixXd& x, const Assignment& t);

ImbalanceReport imbalance_report(const Eigen::MatrixXd& x, const Assignment& t);

// Precomputed S_X^{-1} context so sequential procedures can evaluate many
// candidate distances against one covariance estimate.
class MahalanobisMetric {
public:
    explicit MahalanobisMetric(const Eigen::MatrixXd& x);

    // M for arm sums g1 (count c1) and g2 (count c2).
    double distance(const Eigen::VectorXd& g1, int c1, const Eigen::VectorXd& g2, int c2) const;

    // Quadratic form d' S_X^{-1} d.
    double quad(const Eigen::VectorXd& d) const;

private:
    Eigen::MatrixXd sinv_;
};

// Fair-coin assignment; the whole vector is redrawn if either arm is empty.
Assignment complete_randomization(int n, RngStream& stream);

struct RrResult {
    Assignment assignment;
    long attempts = 0;  // CR draws consumed, including the accepted one
};

// Rerandomization: redraw CR until mahalanobis < a; throws BudgetExhausted
// after rr_max_attempts draws.
RrResult rerandomize(const Eigen::MatrixXd& x, const ProcedureConfig& config, RngStream& stream);

// Pairwise sequential randomization over a uniformly random unit ordering.
Assignment psr_allocate(const Eigen::MatrixXd& x, const ProcedureConfig& config,
                        RngStream& stream);

// PSR pair rule: probability that the first unit of the pair goes to arm 1
// given the two potential imbalances. Ties within 1e-12 get a fair coin.
double psr_pair_probability(double m1, double m2, double rho);

struct DabcdResult {
    Assignment assignment;
    int singular_fallbacks = 0;  // units assigned by coin because F'F was singular
};

// Atkinson's D_A biased coin: burn-in fair coins, then the adaptive
// allocation probability from the regression-balance projection.
DabcdResult da_bcd_allocate(const Eigen::MatrixXd& x, const ProcedureConfig& config,
                            RngStream& stream);

// DABCD probability of treatment 1 from g = (1; x')(F'F)^{-1} b.
double dabcd_assign_probability(double g);

// Dispatch on ProcedureConfig::kind. `attempts`/`fallbacks` are filled where
// the procedure defines them.
struct AllocationResult {
    Assignment assignment;
    long attempts = 1;
    int singular_fallbacks = 0;
};

AllocationResult allocate(const Eigen::MatrixXd& x, const ProcedureConfig& config,
                          RngStream& stream);

} // namespace car
