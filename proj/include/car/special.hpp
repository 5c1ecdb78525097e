#pragma once

// Scalar special functions used by the test statistics and null laws.
// Self-contained double-precision implementations; no external tables.

namespace car::special {

// Standard normal CDF Phi(x).
double normal_cdf(double x);

// Standard normal density phi(x).
double normal_pdf(double x);

// Inverse of normal_cdf for p in (0,1). Accurate to ~1 ulp after refinement.
double normal_quantile(double p);

// Regularized lower incomplete gamma P(b, x) = gamma(b, x) / Gamma(b),
// b > 0, x >= 0. Series for x < b+1, continued fraction otherwise;
// terms iterated to 1e-14 relative.
double gamma_p(double b, double x);

// Chi-square CDF with k degrees of freedom.
double chi2_cdf(double x, double k);

// Chi-square upper quantile: x with chi2_cdf(x, k) = p.
double chi2_quantile(double p, double k);

// Noncentral chi-square(1, phi) CDF, via the closed two-term normal form.
double noncentral_chi2_1_cdf(double x, double phi);

} // namespace car::special
