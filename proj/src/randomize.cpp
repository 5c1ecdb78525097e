#include "car/randomize.hpp"

#include <cmath>
#include <numeric>

namespace car {

namespace {
constexpr double kEigTolerance = 1e-10;
constexpr double kTieTolerance = 1e-12;
// Full refactorization cadence for the DABCD rank-one inverse updates.
constexpr int kRefactorStride = 256;
} // namespace

Eigen::VectorXd imbalance_vector(const Eigen::MatrixXd& x, const Assignment& t) {
    if (t.n() != x.rows()) {
        throw InvalidArgument("imbalance_vector: length mismatch");
    }
    Eigen::VectorXd signs(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        signs[i] = t.t[static_cast<int>(i)] == 1 ? 1.0 : -1.0;
    }
    return x.transpose() * signs;
}

MahalanobisMetric::MahalanobisMetric(const Eigen::MatrixXd& x) {
    const Eigen::Index n = x.rows();
    const Eigen::Index k = x.cols();
    if (n < 2 || k < 1) {
        throw InvalidArgument("MahalanobisMetric: need n >= 2 and at least one covariate");
    }
    Eigen::RowVectorXd mean = x.colwise().mean();
    Eigen::MatrixXd centered = x.rowwise() - mean;
    Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    const Eigen::VectorXd& ev = eig.eigenvalues();
    const double emax = ev[k - 1];
    if (!(emax > 0.0) || ev[0] < kEigTolerance * emax) {
        throw SingularCovariance("mahalanobis: sample covariance is singular");
    }
    sinv_ = eig.eigenvectors() * ev.cwiseInverse().asDiagonal() * eig.eigenvectors().transpose();
}

double MahalanobisMetric::quad(const Eigen::VectorXd& d) const {
    return d.dot(sinv_ * d);
}

double MahalanobisMetric::distance(const Eigen::VectorXd& g1, int c1, const Eigen::VectorXd& g2,
                                   int c2) const {
    if (c1 < 1 || c2 < 1) {
        throw InvalidArgument("mahalanobis: both arms must be nonempty");
    }
    Eigen::VectorXd d = g1 / c1 - g2 / c2;
    const double factor = 1.0 / c1 + 1.0 / c2;
    return quad(d) / factor;
}

double mahalanobis_distance(const Eigen::MatrixXd& x, const Assignment& t) {
    MahalanobisMetric metric(x);
    Eigen::VectorXd g1 = Eigen::VectorXd::Zero(x.cols());
    Eigen::VectorXd g2 = Eigen::VectorXd::Zero(x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        if (t.t[static_cast<int>(i)] == 1) {
            g1 += x.row(i);
        } else {
            g2 += x.row(i);
        }
    }
    return metric.distance(g1, t.n1, g2, t.n2);
}

ImbalanceReport imbalance_report(const Eigen::MatrixXd& x, const Assignment& t) {
    ImbalanceReport report;
    report.raw = imbalance_vector(x, t);
    report.scaled = report.raw / std::sqrt(static_cast<double>(x.rows()));
    report.mahalanobis = x.cols() > 0 ? mahalanobis_distance(x, t) : 0.0;
    return report;
}

Assignment complete_randomization(int n, RngStream& stream) {
    if (n < 2) {
        throw InvalidArgument("complete_randomization: need n >= 2");
    }
    Eigen::VectorXi t(n);
    while (true) {
        int n1 = 0;
        for (int i = 0; i < n; ++i) {
            t[i] = stream.bernoulli(0.5) ? 1 : 0;
            n1 += t[i];
        }
        if (n1 > 0 && n1 < n) break;
    }
    return Assignment::from_vector(std::move(t));
}

RrResult rerandomize(const Eigen::MatrixXd& x, const ProcedureConfig& config,
                     RngStream& stream) {
    config.validate();
    const int n = static_cast<int>(x.rows());
    MahalanobisMetric metric(x);
    for (long attempt = 1; attempt <= config.rr_max_attempts; ++attempt) {
        Assignment t = complete_randomization(n, stream);
        Eigen::VectorXd g1 = Eigen::VectorXd::Zero(x.cols());
        Eigen::VectorXd g2 = Eigen::VectorXd::Zero(x.cols());
        for (int i = 0; i < n; ++i) {
            if (t.t[i] == 1) {
                g1 += x.row(i);
            } else {
                g2 += x.row(i);
            }
        }
        if (metric.distance(g1, t.n1, g2, t.n2) < config.rr_threshold) {
            return RrResult{std::move(t), attempt};
        }
    }
    throw BudgetExhausted("rerandomize: no acceptable assignment within " +
                          std::to_string(config.rr_max_attempts) + " attempts");
}

double psr_pair_probability(double m1, double m2, double rho) {
    if (std::fabs(m1 - m2) <= kTieTolerance) return 0.5;
    return m1 < m2 ? rho : 1.0 - rho;
}

Assignment psr_allocate(const Eigen::MatrixXd& x, const ProcedureConfig& config,
                        RngStream& stream) {
    config.validate();
    const int n = static_cast<int>(x.rows());
    if (n < 2) {
        throw InvalidArgument("psr_allocate: need n >= 2");
    }
    MahalanobisMetric metric(x);

    // Uniformly random processing sequence; assignments map back to units.
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    stream.shuffle(order);

    Eigen::VectorXi t = Eigen::VectorXi::Zero(n);
    Eigen::VectorXd g1 = x.row(order[0]);
    Eigen::VectorXd g2 = x.row(order[1]);
    t[order[0]] = 1;
    t[order[1]] = 0;
    int pairs = 1;  // arms hold `pairs` units each

    for (int k = 2; k + 1 < n; k += 2) {
        const int a = order[static_cast<std::size_t>(k)];
        const int b = order[static_cast<std::size_t>(k + 1)];
        // Candidate arm sums if a->1,b->2 versus a->2,b->1; counts are equal,
        // so the distances share their (1/n1 + 1/n2) factor.
        Eigen::VectorXd s1 = g1 + x.row(a).transpose();
        Eigen::VectorXd s2 = g2 + x.row(b).transpose();
        const double m1 = metric.distance(s1, pairs + 1, s2, pairs + 1);
        Eigen::VectorXd r1 = g1 + x.row(b).transpose();
        Eigen::VectorXd r2 = g2 + x.row(a).transpose();
        const double m2 = metric.distance(r1, pairs + 1, r2, pairs + 1);

        const bool a_first = stream.bernoulli(psr_pair_probability(m1, m2, config.psr_rho));
        if (a_first) {
            t[a] = 1;
            t[b] = 0;
            g1 = std::move(s1);
            g2 = std::move(s2);
        } else {
            t[b] = 1;
            t[a] = 0;
            g1 = std::move(r1);
            g2 = std::move(r2);
        }
        ++pairs;
    }
    if (n % 2 == 1) {
        t[order[static_cast<std::size_t>(n - 1)]] = stream.bernoulli(0.5) ? 1 : 0;
    }
    return Assignment::from_vector(std::move(t));
}

double dabcd_assign_probability(double g) {
    const double lo = (1.0 - g) * (1.0 - g);
    const double hi = (1.0 + g) * (1.0 + g);
    return lo / (lo + hi);
}

DabcdResult da_bcd_allocate(const Eigen::MatrixXd& x, const ProcedureConfig& config,
                            RngStream& stream) {
    config.validate();
    const int n = static_cast<int>(x.rows());
    const int k = static_cast<int>(x.cols());
    const int dim = k + 1;  // (1; x') regressor
    const int burn_in = config.dabcd_burn_in > 0 ? config.dabcd_burn_in : k + 2;
    if (n <= burn_in) {
        throw InvalidArgument("da_bcd_allocate: need n > burn_in");
    }

    Eigen::VectorXi t(n);
    Eigen::MatrixXd ftf = Eigen::MatrixXd::Zero(dim, dim);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(dim);
    Eigen::VectorXd f(dim);

    auto regressor = [&](int i) {
        f[0] = 1.0;
        f.tail(k) = x.row(i);
    };
    auto absorb = [&](int i) {
        regressor(i);
        ftf.selfadjointView<Eigen::Lower>().rankUpdate(f);
        b += (t[i] == 1 ? 1.0 : -1.0) * f;
    };

    for (int i = 0; i < burn_in; ++i) {
        t[i] = stream.bernoulli(0.5) ? 1 : 0;
        absorb(i);
    }

    Eigen::MatrixXd inv;
    bool inv_valid = false;
    int since_refactor = 0;
    auto refactor = [&]() {
        Eigen::MatrixXd full = ftf.selfadjointView<Eigen::Lower>();
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(full);
        const Eigen::VectorXd& ev = eig.eigenvalues();
        if (!(ev[dim - 1] > 0.0) || ev[0] < kEigTolerance * ev[dim - 1]) {
            inv_valid = false;
            return;
        }
        inv = eig.eigenvectors() * ev.cwiseInverse().asDiagonal() * eig.eigenvectors().transpose();
        inv_valid = true;
        since_refactor = 0;
    };
    refactor();

    int fallbacks = 0;
    for (int i = burn_in; i < n; ++i) {
        if (!inv_valid || since_refactor >= kRefactorStride) refactor();
        if (!inv_valid) {
            ++fallbacks;
            t[i] = stream.bernoulli(0.5) ? 1 : 0;
            absorb(i);
            continue;
        }
        regressor(i);
        const double g = f.dot(inv * b);
        t[i] = stream.bernoulli(dabcd_assign_probability(g)) ? 1 : 0;

        // Sherman-Morrison update of (F'F)^{-1} with the new regressor. The
        // denominator is >= 1 in exact arithmetic; anything smaller signals a
        // degraded inverse and forces a refactorization next step.
        Eigen::VectorXd u = inv * f;
        const double denom = 1.0 + f.dot(u);
        if (denom < 0.5) {
            inv_valid = false;
        } else {
            inv.noalias() -= (u * u.transpose()) / denom;
            ++since_refactor;
        }
        absorb(i);
    }
    return DabcdResult{Assignment::from_vector(std::move(t)), fallbacks};
}

AllocationResult allocate(const Eigen::MatrixXd& x, const ProcedureConfig& config,
                          RngStream& stream) {
    AllocationResult out;
    switch (config.kind) {
        case ProcedureKind::CR:
            out.assignment = complete_randomization(static_cast<int>(x.rows()), stream);
            break;
        case ProcedureKind::RR: {
            RrResult rr = rerandomize(x, config, stream);
            out.assignment = std::move(rr.assignment);
            out.attempts = rr.attempts;
            break;
        }
        case ProcedureKind::PSR:
            out.assignment = psr_allocate(x, config, stream);
            break;
        case ProcedureKind::DABCD: {
            DabcdResult res = da_bcd_allocate(x, config, stream);
            out.assignment = std::move(res.assignment);
            out.singular_fallbacks = res.singular_fallbacks;
            break;
        }
    }
    return out;
}

} // namespace car
