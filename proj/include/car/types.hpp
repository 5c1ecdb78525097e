#pragma once

#include "car/errors.hpp"

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

namespace car {

// Data-generating process: y_i = mu1*T_i + mu2*(1-T_i) + beta'x_i + eps_i,
// with independent mean-zero Gaussian covariates of the given s.d.s.
struct DgpSpec {
    double mu1 = 0.0;
    double mu2 = 0.0;
    Eigen::VectorXd beta;           // covariate effects, length p+q
    Eigen::VectorXd covariate_sds;  // per-column s.d., length p+q
    double sigma_eps = 1.0;
    int n = 0;

    int covariate_count() const { return static_cast<int>(beta.size()); }
    // sigma_w^2 for a given excluded set: sigma_eps^2 + sum_ex beta_j^2 Var(X_j).
    void validate() const;
};

// Covariate matrix plus optional responses.
struct Dataset {
    Eigen::MatrixXd x;                 // n x (p+q), row i = unit i
    std::optional<Eigen::VectorXd> y;  // responses, if realized

    int n() const { return static_cast<int>(x.rows()); }
    int covariate_count() const { return static_cast<int>(x.cols()); }
    void validate() const;
};

// The covariates actually included in the analysis model, in fit order.
struct WorkingModel {
    std::vector<int> included;  // column indices into Dataset.x
    std::string name;           // label for reports; may be empty

    int p() const { return static_cast<int>(included.size()); }
    std::vector<int> excluded(int total_covariates) const;
    void validate(int total_covariates) const;
};

// Binary treatment vector with arm counts.
struct Assignment {
    Eigen::VectorXi t;  // entries 0/1
    int n1 = 0;         // count of ones
    int n2 = 0;         // count of zeros

    int n() const { return static_cast<int>(t.size()); }
    static Assignment from_vector(Eigen::VectorXi t);
};

enum class ProcedureKind { CR, RR, PSR, DABCD };

const char* procedure_name(ProcedureKind kind);
ProcedureKind procedure_from_name(const std::string& name);

struct ProcedureConfig {
    ProcedureKind kind = ProcedureKind::CR;
    double rr_threshold = 3.0;      // RR balance criterion a
    long rr_max_attempts = 100000;  // RR redraw budget
    double psr_rho = 0.75;          // PSR biased-coin probability
    int dabcd_burn_in = 0;          // 0 = default p+q+2 fair-coin assignments

    void validate() const;
};

} // namespace car
