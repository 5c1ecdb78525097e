#include "car/inference.hpp"

#include "car/special.hpp"

#include <cmath>

namespace car {

using special::chi2_cdf;
using special::chi2_quantile;
using special::normal_cdf;
using special::normal_quantile;

TreatmentTest treatment_statistic(const FitResult& fit) {
    const int k = static_cast<int>(fit.theta_hat.size());
    Eigen::VectorXd l = Eigen::VectorXd::Zero(k);
    l[0] = 1.0;
    l[1] = -1.0;
    TreatmentTest test;
    test.estimate = fit.theta_hat[0] - fit.theta_hat[1];
    const double se2 = fit.sigma_w2_hat * l.dot(fit.gram_inv * l);
    if (!(se2 > 0.0)) {
        throw DegenerateTest("treatment_statistic: zero standard error");
    }
    test.se = std::sqrt(se2);
    test.s = test.estimate / test.se;
    return test;
}

CovariateTest covariate_statistic(const FitResult& fit, const Eigen::MatrixXd& c,
                                  const Eigen::VectorXd& c0) {
    const int k = static_cast<int>(fit.theta_hat.size());
    const int p = k - 2;
    const int m = static_cast<int>(c.rows());
    if (c.cols() != k || c0.size() != m || m < 1) {
        throw InvalidArgument("covariate_statistic: contrast dimensions mismatch");
    }
    if (m > p) {
        throw InvalidArgument("covariate_statistic: rank m must not exceed p");
    }
    if ((c.leftCols(2).array() != 0.0).any()) {
        throw InvalidArgument("covariate_statistic: first two columns of C must be zero");
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(c.transpose());
    qr.setThreshold(1e-10);
    if (qr.rank() < m) {
        throw InvalidArgument("covariate_statistic: C is not of full row rank");
    }
    if (!(fit.sigma_w2_hat > 0.0)) {
        throw DegenerateTest("covariate_statistic: zero residual variance");
    }

    Eigen::MatrixXd mid = c * fit.gram_inv * c.transpose();
    Eigen::LDLT<Eigen::MatrixXd> ldlt(mid);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
        throw InvalidArgument("covariate_statistic: C (G'G)^{-1} C' is singular");
    }
    Eigen::VectorXd diff = c * fit.theta_hat - c0;
    CovariateTest test;
    test.s_star = diff.dot(ldlt.solve(diff)) / (m * fit.sigma_w2_hat);
    test.c = c;
    test.c0 = c0;
    test.m = m;
    return test;
}

Eigen::MatrixXd single_coefficient_contrast(int p, int j) {
    if (j < 0 || j >= p) {
        throw InvalidArgument("single_coefficient_contrast: index out of range");
    }
    Eigen::MatrixXd c = Eigen::MatrixXd::Zero(1, p + 2);
    c(0, 2 + j) = 1.0;
    return c;
}

Decision traditional_decision(const TreatmentTest& test, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) {
        throw InvalidArgument("traditional_decision: alpha must lie in (0,1)");
    }
    Decision d;
    d.alpha = alpha;
    d.critical_value = normal_quantile(1.0 - alpha / 2.0);
    d.p_value = 2.0 * normal_cdf(-std::fabs(test.s));
    d.reject = std::fabs(test.s) > d.critical_value;
    return d;
}

Decision traditional_decision(const CovariateTest& test, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) {
        throw InvalidArgument("traditional_decision: alpha must lie in (0,1)");
    }
    Decision d;
    d.alpha = alpha;
    d.critical_value = chi2_quantile(1.0 - alpha, test.m) / test.m;
    d.p_value = 1.0 - chi2_cdf(test.m * test.s_star, test.m);
    d.reject = test.s_star > d.critical_value;
    return d;
}

double asymptotic_power(const NullLaw& law, double delta, double alpha, long draws,
                        RngStream* stream, std::optional<double> critical) {
    if (!(alpha > 0.0 && alpha < 1.0)) {
        throw InvalidArgument("asymptotic_power: alpha must lie in (0,1)");
    }
    const double crit = critical ? *critical : normal_quantile(1.0 - alpha / 2.0);
    const double offset = 0.5 * law.lambda2 * delta;
    if (law.is_normal()) {
        const double sd = law.sd();
        return normal_cdf((-crit + offset) / sd) + normal_cdf((-crit - offset) / sd);
    }
    if (draws < 100000) {
        throw InvalidArgument("asymptotic_power: the RR mixture needs >= 1e5 draws");
    }
    if (stream == nullptr) {
        throw InvalidArgument("asymptotic_power: the RR mixture needs an RNG stream");
    }
    NullLaw centered = law;
    centered.shift = 0.0;
    const double lo = -crit + offset;
    const double hi = -crit - offset;
    long n_lo = 0, n_hi = 0;
    for (long i = 0; i < draws; ++i) {
        const double v = centered.sample(*stream);
        if (v <= lo) ++n_lo;
        if (v <= hi) ++n_hi;
    }
    return (static_cast<double>(n_lo) + static_cast<double>(n_hi)) / static_cast<double>(draws);
}

} // namespace car
