#include "car/special.hpp"

#include "car/errors.hpp"

#include <cmath>
#include <limits>

namespace car::special {

namespace {

constexpr double kSqrt2 = 1.4142135623730951;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

// Acklam's rational approximation to the normal quantile (~1e-9 absolute),
// used as the starting point for one Halley refinement below.
double normal_quantile_approx(double p) {
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    constexpr double p_low = 0.02425;

    if (p < p_low) {
        double q = std::sqrt(-2.0 * std::log(p));
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    if (p <= 1.0 - p_low) {
        double q = p - 0.5;
        double r = q * q;
        return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
               (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    }
    double q = std::sqrt(-2.0 * std::log(1.0 - p));
    return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
}

// gamma_p by its power series, for x < b + 1.
double gamma_p_series(double b, double x) {
    double ap = b;
    double sum = 1.0 / b;
    double term = sum;
    for (int i = 0; i < 1000; ++i) {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if (std::fabs(term) < std::fabs(sum) * 1e-14) break;
    }
    return sum * std::exp(-x + b * std::log(x) - std::lgamma(b));
}

// Regularized upper incomplete gamma Q(b, x) by continued fraction
// (modified Lentz), for x >= b + 1.
double gamma_q_contfrac(double b, double x) {
    constexpr double tiny = 1e-300;
    double c = 1.0 / tiny;
    double d = 1.0 / (x + 1.0 - b);
    double h = d;
    for (int i = 1; i < 1000; ++i) {
        double an = -static_cast<double>(i) * (static_cast<double>(i) - b);
        double bn = x + 2.0 * i + 1.0 - b;
        d = an * d + bn;
        if (std::fabs(d) < tiny) d = tiny;
        c = bn + an / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        double delta = d * c;
        h *= delta;
        if (std::fabs(delta - 1.0) < 1e-14) break;
    }
    return h * std::exp(-x + b * std::log(x) - std::lgamma(b));
}

} // namespace

double normal_cdf(double x) {
    return 0.5 * std::erfc(-x / kSqrt2);
}

double normal_pdf(double x) {
    return kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) {
        throw InvalidArgument("normal_quantile: p must lie in (0,1)");
    }
    double x = normal_quantile_approx(p);
    // One Halley step against the exact CDF.
    double e = normal_cdf(x) - p;
    double u = e / normal_pdf(x);
    x -= u / (1.0 + 0.5 * x * u);
    return x;
}

double gamma_p(double b, double x) {
    if (!(b > 0.0) || x < 0.0) {
        throw InvalidArgument("gamma_p: requires b > 0 and x >= 0");
    }
    if (x == 0.0) return 0.0;
    if (x < b + 1.0) return gamma_p_series(b, x);
    return 1.0 - gamma_q_contfrac(b, x);
}

double chi2_cdf(double x, double k) {
    if (x <= 0.0) return 0.0;
    return gamma_p(0.5 * k, 0.5 * x);
}

double chi2_quantile(double p, double k) {
    if (!(p > 0.0 && p < 1.0)) {
        throw InvalidArgument("chi2_quantile: p must lie in (0,1)");
    }
    // Wilson-Hilferty start, then Newton on the CDF.
    double z = normal_quantile(p);
    double t = 1.0 - 2.0 / (9.0 * k) + z * std::sqrt(2.0 / (9.0 * k));
    double x = k * t * t * t;
    if (!(x > 0.0)) x = 0.5 * k;
    for (int i = 0; i < 64; ++i) {
        double f = chi2_cdf(x, k) - p;
        double df = 0.5 * std::exp((0.5 * k - 1.0) * std::log(0.5 * x) - 0.5 * x -
                                   std::lgamma(0.5 * k));
        if (df <= 0.0) break;
        double step = f / df;
        // Keep iterates positive.
        if (step > 0.5 * x) step = 0.5 * x;
        x -= step;
        if (std::fabs(step) < 1e-12 * (1.0 + x)) break;
    }
    return x;
}

double noncentral_chi2_1_cdf(double x, double phi) {
    if (x <= 0.0) return 0.0;
    double s = std::sqrt(x);
    double mu = std::sqrt(phi);
    return normal_cdf(s - mu) - normal_cdf(-s - mu);
}

} // namespace car::special
