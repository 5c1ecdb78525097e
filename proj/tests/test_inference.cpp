#include "car/inference.hpp"

#include "car/randomize.hpp"
#include "car/special.hpp"
#include "support/oracles.hpp"

#include <doctest.h>

#include <cmath>

using namespace car;

namespace {

Assignment fixed_assignment(std::initializer_list<int> values) {
    Eigen::VectorXi t(static_cast<int>(values.size()));
    int i = 0;
    for (int v : values) t[i++] = v;
    return Assignment::from_vector(std::move(t));
}

FitResult four_point_fit() {
    Dataset data;
    data.x.resize(4, 0);
    Assignment t = fixed_assignment({1, 1, 0, 0});
    Eigen::VectorXd y(4);
    y << 3.0, 1.0, 2.0, 0.0;
    return ols_fit(build_design(data, t, WorkingModel{}), y);
}

} // namespace

TEST_CASE("treatment statistic on the four-point fit") {
    FitResult fit = four_point_fit();
    TreatmentTest test = treatment_statistic(fit);
    CHECK(test.estimate == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(test.s == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
    CHECK(test.s == doctest::Approx(test.estimate / test.se).epsilon(1e-12));
}

TEST_CASE("treatment statistic is zero when the arm means agree") {
    Dataset data;
    data.x.resize(4, 0);
    Assignment t = fixed_assignment({1, 1, 0, 0});
    Eigen::VectorXd y(4);
    y << 2.0, 1.0, 2.0, 1.0;
    TreatmentTest test = treatment_statistic(ols_fit(build_design(data, t, WorkingModel{}), y));
    CHECK(std::fabs(test.s) < 1e-12);
}

TEST_CASE("zero residual variance is a degenerate treatment test") {
    Dataset data;
    data.x.resize(4, 0);
    Assignment t = fixed_assignment({1, 1, 0, 0});
    Eigen::VectorXd y(4);
    y << 2.0, 2.0, 1.0, 1.0;  // exactly in the column space
    FitResult fit = ols_fit(build_design(data, t, WorkingModel{}), y);
    CHECK_THROWS_AS(treatment_statistic(fit), DegenerateTest);
}

TEST_CASE("covariate statistic") {
    // A fit with two covariates.
    RngStream stream(314);
    Dataset data;
    const int n = 60;
    data.x.resize(n, 2);
    for (int i = 0; i < n; ++i) {
        data.x(i, 0) = stream.normal();
        data.x(i, 1) = stream.normal();
    }
    Assignment t = complete_randomization(n, stream);
    Eigen::VectorXd y(n);
    for (int i = 0; i < n; ++i) {
        y[i] = 0.5 * t.t[i] + 1.5 * data.x(i, 0) - 0.7 * data.x(i, 1) + stream.normal();
    }
    WorkingModel w;
    w.included = {0, 1};
    FitResult fit = ols_fit(build_design(data, t, w), y);

    SUBCASE("c0 at the estimate gives zero") {
        Eigen::MatrixXd c = single_coefficient_contrast(2, 0);
        Eigen::VectorXd c0(1);
        c0 << fit.theta_hat[2];
        CHECK(covariate_statistic(fit, c, c0).s_star < 1e-20);
    }
    SUBCASE("m=1 equals the squared coefficient t statistic") {
        for (int j = 0; j < 2; ++j) {
            Eigen::MatrixXd c = single_coefficient_contrast(2, j);
            const double s_star = covariate_statistic(fit, c, Eigen::VectorXd::Zero(1)).s_star;
            const double tstat =
                fit.theta_hat[2 + j] / std::sqrt(fit.sigma_w2_hat * fit.gram_inv(2 + j, 2 + j));
            CHECK(s_star == doctest::Approx(tstat * tstat).epsilon(1e-10));
        }
    }
    SUBCASE("nonzero treatment columns are rejected") {
        Eigen::MatrixXd c = Eigen::MatrixXd::Zero(1, 4);
        c(0, 0) = 1.0;
        CHECK_THROWS_AS(covariate_statistic(fit, c, Eigen::VectorXd::Zero(1)), InvalidArgument);
    }
    SUBCASE("rank-deficient contrasts are rejected") {
        Eigen::MatrixXd c = Eigen::MatrixXd::Zero(2, 4);
        c(0, 2) = 1.0;
        c(1, 2) = 2.0;  // second row is a multiple of the first
        CHECK_THROWS_AS(covariate_statistic(fit, c, Eigen::VectorXd::Zero(2)), InvalidArgument);
    }
    SUBCASE("m greater than p is rejected") {
        Eigen::MatrixXd c = Eigen::MatrixXd::Zero(3, 4);
        c(0, 2) = 1.0;
        c(1, 3) = 1.0;
        c(2, 2) = 1.0;
        c(2, 3) = 1.0;
        CHECK_THROWS_AS(covariate_statistic(fit, c, Eigen::VectorXd::Zero(3)), InvalidArgument);
    }
}

TEST_CASE("traditional decisions") {
    SUBCASE("s = 0") {
        TreatmentTest test;
        test.s = 0.0;
        Decision d = traditional_decision(test, 0.05);
        CHECK(d.p_value == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(!d.reject);
    }
    SUBCASE("s = 2.5 rejects at the 1.960 critical value") {
        TreatmentTest test;
        test.s = 2.5;
        Decision d = traditional_decision(test, 0.05);
        CHECK(d.reject);
        CHECK(d.critical_value == doctest::Approx(1.959963984540054).epsilon(1e-9));
    }
    SUBCASE("s* = 3.0 with m=1 keeps the null at the 3.841 critical value") {
        CovariateTest test;
        test.s_star = 3.0;
        test.m = 1;
        Decision d = traditional_decision(test, 0.05);
        CHECK(!d.reject);
        CHECK(d.critical_value == doctest::Approx(3.841458820694124).epsilon(1e-9));
    }
}

TEST_CASE("asymptotic power: size recovery and frozen values") {
    // W1 of the 6-covariate setting: sigma_w^2 = 10.
    NuisanceParams nu;
    nu.beta_ex = Eigen::VectorXd::Ones(6);
    nu.var_ex = Eigen::VectorXd::Ones(6);
    nu.sigma_eps2 = 4.0;
    nu.sigma_w2 = 10.0;
    nu.lambda1 = std::sqrt(0.4);
    nu.lambda2 = 1.0 / std::sqrt(10.0);
    nu.total_covariates = 6;
    nu.excluded = {0, 1, 2, 3, 4, 5};

    ProcedureConfig cr;
    cr.kind = ProcedureKind::CR;
    NullLaw cr_law = null_law_for(cr, nu);

    SUBCASE("zero effect recovers alpha") {
        CHECK(asymptotic_power(cr_law, 0.0, 0.05, 0) == doctest::Approx(0.05).epsilon(1e-3));
    }
    SUBCASE("CR law with the traditional critical") {
        const double delta = std::sqrt(500.0) * 0.3;
        const double power = asymptotic_power(cr_law, delta, 0.05, 0);
        CHECK(power > 0.184);
        CHECK(power < 0.188);
    }
    SUBCASE("DABCD law with its own oracle critical") {
        ProcedureConfig dabcd;
        dabcd.kind = ProcedureKind::DABCD;
        NullLaw law = null_law_for(dabcd, nu);
        CHECK(law.variance() == doctest::Approx(0.52).epsilon(1e-12));
        const double crit = law.sd() * special::normal_quantile(0.975);
        const double delta = std::sqrt(500.0) * 0.3;
        const double power = asymptotic_power(law, delta, 0.05, 0, nullptr, crit);
        CHECK(power == doctest::Approx(0.313).epsilon(0.016));  // +-0.005 absolute
    }
    SUBCASE("monotone in |delta|") {
        double prev = -1.0;
        for (double delta : {0.0, 1.0, 2.0, 4.0, 8.0}) {
            const double power = asymptotic_power(cr_law, delta, 0.05, 0);
            CHECK(power >= prev);
            prev = power;
        }
    }
    SUBCASE("RR law power by Monte Carlo recovers alpha at delta 0") {
        ProcedureConfig rr;
        rr.kind = ProcedureKind::RR;
        rr.rr_threshold = 3.0;
        NullLaw law = null_law_for(rr, nu);
        RngStream stream(99);
        const double crit = corrected_critical(law, 0.05, 200000, stream).value;
        RngStream stream2(100);
        const double size = asymptotic_power(law, 0.0, 0.05, 200000, &stream2, crit);
        CHECK(size == doctest::Approx(0.05).epsilon(0.08));
    }
}

TEST_CASE("property: se^2 approaches 4 sigma_w^2 / n on balanced designs") {
    RngStream seeder(8181);
    for (int n : {200, 500, 1000}) {
        DgpSpec spec;
        spec.beta = Eigen::VectorXd::Ones(3);
        spec.covariate_sds = Eigen::VectorXd::Ones(3);
        spec.sigma_eps = 1.0;
        spec.n = n;
        RngStream cov(seeder.next_u64()), noise(seeder.next_u64());
        Dataset data = generate_covariates(spec, cov);
        // Exactly balanced alternating assignment.
        Eigen::VectorXi tv(n);
        for (int i = 0; i < n; ++i) tv[i] = i % 2;
        Assignment t = Assignment::from_vector(std::move(tv));
        Dataset full = realize_responses(data, t, spec, noise);
        WorkingModel w;
        w.included = {0, 1};
        FitResult fit = ols_fit(build_design(full, t, w), *full.y);
        TreatmentTest test = treatment_statistic(fit);
        const double target = 4.0 * fit.sigma_w2_hat / n;
        CHECK(std::fabs(test.se * test.se - target) / target < 10.0 / n);
    }
}

TEST_CASE("under CR the statistic has unit variance") {
    // Four covariates, two included, sigma_eps = 2, n = 500.
    DgpSpec spec;
    spec.beta = Eigen::VectorXd::Ones(4);
    spec.covariate_sds = Eigen::VectorXd::Ones(4);
    spec.sigma_eps = 2.0;
    spec.n = 500;
    WorkingModel w;
    w.included = {0, 1};
    RngStream seeder(515);
    std::vector<double> stats;
    stats.reserve(10000);
    for (int rep = 0; rep < 10000; ++rep) {
        RngStream cov(seeder.next_u64()), alloc(seeder.next_u64()), noise(seeder.next_u64());
        Dataset data = generate_covariates(spec, cov);
        Assignment t = complete_randomization(spec.n, alloc);
        Dataset full = realize_responses(data, t, spec, noise);
        stats.push_back(treatment_statistic(ols_fit(build_design(full, t, w), *full.y)).s);
    }
    const double v = testsupport::sample_variance(stats);
    CHECK(v > 0.94);
    CHECK(v < 1.06);
}

TEST_CASE("covariate-test power follows the noncentral chi-square prediction") {
    // Full working model under CR; tested coefficient is x3.
    const int n = 500;
    DgpSpec spec;
    spec.beta = Eigen::VectorXd::Ones(6);
    spec.covariate_sds = Eigen::VectorXd::Ones(6);
    spec.sigma_eps = 2.0;
    spec.n = n;
    WorkingModel w;
    w.included = {0, 1, 2, 3, 4, 5};
    const double sigma_w2 = 4.0;  // q = 0
    const double crit = special::chi2_quantile(0.95, 1.0);
    const Eigen::MatrixXd c = single_coefficient_contrast(6, 2);
    const Eigen::VectorXd c0 = Eigen::VectorXd::Zero(1);

    RngStream seeder(616);
    const int reps = 4000;
    for (double beta3 : {0.0, 0.1, 0.2}) {
        spec.beta[2] = beta3;
        int rejects = 0;
        for (int rep = 0; rep < reps; ++rep) {
            RngStream cov(seeder.next_u64()), alloc(seeder.next_u64()), noise(seeder.next_u64());
            Dataset data = generate_covariates(spec, cov);
            Assignment t = complete_randomization(n, alloc);
            Dataset full = realize_responses(data, t, spec, noise);
            FitResult fit = ols_fit(build_design(full, t, w), *full.y);
            if (covariate_statistic(fit, c, c0).s_star > crit) ++rejects;
        }
        const double phi = n * beta3 * beta3 / sigma_w2;
        const double predicted = 1.0 - special::noncentral_chi2_1_cdf(crit, phi);
        CHECK(static_cast<double>(rejects) / reps ==
              doctest::Approx(predicted).scale(1.0).epsilon(0.02));
    }
}
