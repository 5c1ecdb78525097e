#include "car/types.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace car {

void DgpSpec::validate() const {
    if (beta.size() != covariate_sds.size()) {
        throw InvalidArgument("DgpSpec: beta and covariate_sds must have equal length");
    }
    if (!(sigma_eps > 0.0)) {
        throw InvalidArgument("DgpSpec: sigma_eps must be positive");
    }
    if (n < 4) {
        throw InvalidArgument("DgpSpec: n must be at least 4");
    }
    for (Eigen::Index j = 0; j < covariate_sds.size(); ++j) {
        if (!(covariate_sds[j] > 0.0)) {
            throw InvalidArgument("DgpSpec: covariate s.d.s must be positive");
        }
    }
    if (!beta.allFinite() || !covariate_sds.allFinite() || !std::isfinite(mu1) ||
        !std::isfinite(mu2) || !std::isfinite(sigma_eps)) {
        throw InvalidArgument("DgpSpec: non-finite parameter");
    }
}

void Dataset::validate() const {
    if (!x.allFinite()) {
        throw InvalidArgument("Dataset: covariate matrix has non-finite entries");
    }
    if (y && (y->size() != x.rows() || !y->allFinite())) {
        throw InvalidArgument("Dataset: response vector malformed");
    }
}

std::vector<int> WorkingModel::excluded(int total_covariates) const {
    std::vector<bool> in(static_cast<std::size_t>(total_covariates), false);
    for (int j : included) in[static_cast<std::size_t>(j)] = true;
    std::vector<int> out;
    for (int j = 0; j < total_covariates; ++j) {
        if (!in[static_cast<std::size_t>(j)]) out.push_back(j);
    }
    return out;
}

void WorkingModel::validate(int total_covariates) const {
    std::unordered_set<int> seen;
    for (int j : included) {
        if (j < 0 || j >= total_covariates) {
            throw InvalidArgument("WorkingModel: covariate index out of bounds");
        }
        if (!seen.insert(j).second) {
            throw InvalidArgument("WorkingModel: duplicate covariate index");
        }
    }
}

Assignment Assignment::from_vector(Eigen::VectorXi t) {
    Assignment a;
    a.n1 = 0;
    for (Eigen::Index i = 0; i < t.size(); ++i) {
        if (t[i] != 0 && t[i] != 1) {
            throw InvalidArgument("Assignment: entries must be 0 or 1");
        }
        a.n1 += t[i];
    }
    a.n2 = static_cast<int>(t.size()) - a.n1;
    a.t = std::move(t);
    return a;
}

const char* procedure_name(ProcedureKind kind) {
    switch (kind) {
        case ProcedureKind::CR: return "CR";
        case ProcedureKind::RR: return "RR";
        case ProcedureKind::PSR: return "PSR";
        case ProcedureKind::DABCD: return "DABCD";
    }
    return "?";
}

ProcedureKind procedure_from_name(const std::string& name) {
    std::string s;
    s.reserve(name.size());
    for (char c : name) s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    if (s == "cr") return ProcedureKind::CR;
    if (s == "rr") return ProcedureKind::RR;
    if (s == "psr") return ProcedureKind::PSR;
    if (s == "dabcd" || s == "da-bcd" || s == "da_bcd") return ProcedureKind::DABCD;
    throw InvalidArgument("unknown procedure: " + name);
}

void ProcedureConfig::validate() const {
    switch (kind) {
        case ProcedureKind::RR:
            if (!(rr_threshold > 0.0)) {
                throw InvalidArgument("RR: threshold a must be positive");
            }
            if (rr_max_attempts < 1) {
                throw InvalidArgument("RR: max_attempts must be positive");
            }
            break;
        case ProcedureKind::PSR:
            if (!(psr_rho > 0.5 && psr_rho < 1.0)) {
                throw InvalidArgument("PSR: rho must lie in (0.5, 1)");
            }
            break;
        case ProcedureKind::DABCD:
            if (dabcd_burn_in < 0) {
                throw InvalidArgument("DABCD: burn_in must be nonnegative");
            }
            break;
        case ProcedureKind::CR:
            break;
    }
}

} // namespace car
