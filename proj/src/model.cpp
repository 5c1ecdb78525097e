#include "car/model.hpp"

#include <cmath>

namespace car {

namespace {
constexpr double kRankTolerance = 1e-10;
}

Dataset generate_covariates(const DgpSpec& spec, RngStream& stream) {
    spec.validate();
    const int n = spec.n;
    const int k = spec.covariate_count();
    Dataset data;
    data.x.resize(n, k);
    // Column-major fill: one column per covariate, matching the i.i.d.
    // per-covariate definition.
    for (int j = 0; j < k; ++j) {
        const double sd = spec.covariate_sds[j];
        for (int i = 0; i < n; ++i) {
            data.x(i, j) = sd * stream.normal();
        }
    }
    return data;
}

Dataset realize_responses(const Dataset& data, const Assignment& t, const DgpSpec& spec,
                          RngStream& stream) {
    Eigen::VectorXd eps(data.n());
    for (int i = 0; i < data.n(); ++i) {
        eps[i] = spec.sigma_eps * stream.normal();
    }
    return compose_responses(data, t, spec, eps);
}

Dataset compose_responses(const Dataset& data, const Assignment& t, const DgpSpec& spec,
                          const Eigen::VectorXd& eps) {
    if (data.y) {
        throw InvalidArgument("realize_responses: dataset already has responses");
    }
    if (t.n() != data.n() || eps.size() != data.n()) {
        throw InvalidArgument("realize_responses: length mismatch");
    }
    if (spec.covariate_count() != data.covariate_count()) {
        throw InvalidArgument("realize_responses: covariate count mismatch");
    }
    Dataset out = data;
    Eigen::VectorXd y = eps;
    if (data.covariate_count() > 0) {
        y += data.x * spec.beta;
    }
    for (int i = 0; i < data.n(); ++i) {
        y[i] += t.t[i] == 1 ? spec.mu1 : spec.mu2;
    }
    out.y = std::move(y);
    return out;
}

DesignMatrix build_design(const Dataset& data, const Assignment& t, const WorkingModel& w) {
    if (t.n() != data.n()) {
        throw InvalidArgument("build_design: assignment length mismatch");
    }
    w.validate(data.covariate_count());
    const int n = data.n();
    const int p = w.p();
    DesignMatrix design;
    design.g.resize(n, p + 2);
    for (int i = 0; i < n; ++i) {
        design.g(i, 0) = static_cast<double>(t.t[i]);
        design.g(i, 1) = static_cast<double>(1 - t.t[i]);
    }
    for (int c = 0; c < p; ++c) {
        design.g.col(c + 2) = data.x.col(w.included[static_cast<std::size_t>(c)]);
    }
    return design;
}

OlsSolver::OlsSolver(const DesignMatrix& design) : qr_(design.g), g_(design.g) {
    const int n = design.n();
    const int k = static_cast<int>(design.g.cols());
    if (n <= k) {
        throw InvalidArgument("ols_fit: need n > p + 2");
    }
    const auto& qrm = qr_.matrixQR();
    double rmax = 0.0, rmin = std::numeric_limits<double>::infinity();
    for (int i = 0; i < k; ++i) {
        const double d = std::fabs(qrm(i, i));
        rmax = std::max(rmax, d);
        rmin = std::min(rmin, d);
    }
    if (!(rmin > kRankTolerance * rmax)) {
        throw SingularDesign("ols_fit: design matrix is rank deficient");
    }
    dof_ = n - k;

    // (G'G)^{-1} = P R^{-1} R^{-t} P', from G P = Q R.
    Eigen::MatrixXd rinv = qrm.topLeftCorner(k, k)
                               .triangularView<Eigen::Upper>()
                               .solve(Eigen::MatrixXd::Identity(k, k));
    Eigen::MatrixXd core = rinv * rinv.transpose();
    gram_inv_ = qr_.colsPermutation() * core * qr_.colsPermutation().transpose();
}

FitResult OlsSolver::fit(const Eigen::VectorXd& y) const {
    if (y.size() != g_.rows()) {
        throw InvalidArgument("ols_fit: response length mismatch");
    }
    FitResult fit;
    fit.theta_hat = qr_.solve(y);
    fit.dof = dof_;
    const Eigen::VectorXd resid = y - g_ * fit.theta_hat;
    fit.sigma_w2_hat = resid.squaredNorm() / dof_;
    fit.gram_inv = gram_inv_;
    return fit;
}

FitResult ols_fit(const DesignMatrix& design, const Eigen::VectorXd& y) {
    return OlsSolver(design).fit(y);
}

} // namespace car
