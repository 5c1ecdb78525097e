#pragma once

// Outcome model, working-model design matrix, and OLS estimation.

#include "car/rng.hpp"
#include "car/types.hpp"

#include <Eigen/Dense>

namespace car {

// Design matrix G = [T, 1-T, X_in] for a working model.
struct DesignMatrix {
    Eigen::MatrixXd g;  // n x (p+2)

    int n() const { return static_cast<int>(g.rows()); }
    int p() const { return static_cast<int>(g.cols()) - 2; }
};

// OLS fit of a working model.
struct FitResult {
    Eigen::VectorXd theta_hat;  // (mu1_hat, mu2_hat, beta_in_hat)
    double sigma_w2_hat = 0.0;  // RSS / (n - p - 2)
    Eigen::MatrixXd gram_inv;   // (G'G)^{-1}
    int dof = 0;                // n - p - 2

    int p() const { return static_cast<int>(theta_hat.size()) - 2; }
};

// Draw the covariate matrix of the DGP: independent mean-zero Gaussian
// columns with the spec's standard deviations. Responses are left unset.
Dataset generate_covariates(const DgpSpec& spec, RngStream& stream);

// Realize responses under the true model; errors come from `stream` and are
// independent of T and X by construction.
Dataset realize_responses(const Dataset& data, const Assignment& t, const DgpSpec& spec,
                          RngStream& stream);

// Same, with the error vector supplied by the caller (used for common random
// numbers across procedures within one simulation replication).
Dataset compose_responses(const Dataset& data, const Assignment& t, const DgpSpec& spec,
                          const Eigen::VectorXd& eps);

// Assemble G = [T, 1-T, included covariates in the working model's order].
DesignMatrix build_design(const Dataset& data, const Assignment& t, const WorkingModel& w);

// Factorization of one design, reusable across many response vectors.
// Column-pivoted QR; construction throws SingularDesign when the smallest
// retained pivot falls below 1e-10 of the largest.
class OlsSolver {
public:
    explicit OlsSolver(const DesignMatrix& design);

    FitResult fit(const Eigen::VectorXd& y) const;
    const Eigen::MatrixXd& gram_inv() const { return gram_inv_; }
    int dof() const { return dof_; }

private:
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr_;
    Eigen::MatrixXd g_;
    Eigen::MatrixXd gram_inv_;
    int dof_ = 0;
};

// One-shot OLS fit of a design.
FitResult ols_fit(const DesignMatrix& design, const Eigen::VectorXd& y);

} // namespace car
