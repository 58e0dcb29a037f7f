#pragma once

// First-passage kernels of the absorbed Brownian motion with drift -1 and
// unit diffusion, started at x > 0 and killed at 0.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace mfblowup {

namespace detail {

inline constexpr double inv_sqrt_pi = std::numbers::inv_sqrtpi;
inline constexpr double inv_sqrt_2pi = std::numbers::inv_sqrtpi / std::numbers::sqrt2;

inline void require_state(double x, const char* what)
{
    if (!(x > 0.0)) throw std::domain_error(std::string(what) + ": state must be > 0");
}

inline void require_time(double sigma, const char* what)
{
    if (!(sigma >= 0.0)) throw std::domain_error(std::string(what) + ": time must be >= 0");
}

// exp(x^2) with the rounding error of x*x folded back in
inline double exp_sq(double x)
{
    double hi = x * x;
    double lo = std::fma(x, x, -hi);
    return std::exp(hi) * (1.0 + lo);
}

// erfcx(z1) - erfcx(z2) for z2 > z1 >= 20 from the asymptotic series,
// with z2^m - z1^m factored through (z2 - z1) to avoid cancellation
inline double erfcx_diff_asymptotic(double z1, double z2)
{
    const double dz = z2 - z1;
    double sum = 0.0;
    double coef = 1.0; // (-1)^n (2n-1)!! / 2^n
    for (int n = 0; n < 12; ++n) {
        const int m = 2 * n + 1;
        // (z2^m - z1^m) / (z1 z2)^m = dz * sum_{i<m} z2^i z1^(m-1-i) / (z1 z2)^m
        double s = 0.0;
        for (int i = 0; i < m; ++i)
            s += std::pow(z2, i - m) * std::pow(z1, -1 - i);
        const double term = coef * dz * s;
        sum += term;
        if (std::abs(term) < 1e-17 * std::abs(sum)) break;
        coef *= -(2.0 * n + 1.0) / 2.0;
    }
    return inv_sqrt_pi * sum;
}

} // namespace detail

// Scaled complementary error function exp(x^2) erfc(x).
inline double erfcx(double x)
{
    if (std::isnan(x)) return x;
    if (x < 0.0) {
        if (x < -26.6) return std::numeric_limits<double>::infinity();
        return 2.0 * detail::exp_sq(x) - erfcx(-x);
    }
    if (x < 10.0) return detail::exp_sq(x) * std::erfc(x);
    // Laplace continued fraction, converges quickly for large x
    double t = x;
    for (int k = 60; k >= 1; --k) t = x + 0.5 * k / t;
    return detail::inv_sqrt_pi / t;
}

// h(sigma, x): first-passage density.
inline double fpt_density(double sigma, double x)
{
    detail::require_state(x, "fpt_density");
    detail::require_time(sigma, "fpt_density");
    if (sigma == 0.0) return 0.0;
    const double d = x - sigma;
    return x * detail::inv_sqrt_2pi * std::exp(-d * d / (2.0 * sigma)) / (sigma * std::sqrt(sigma));
}

// d/dsigma log h
inline double fpt_log_density_d1(double sigma, double x)
{
    return (x * x - 3.0 * sigma - sigma * sigma) / (2.0 * sigma * sigma);
}

inline double fpt_log_density_d2(double sigma, double x)
{
    return -x * x / (sigma * sigma * sigma) + 1.5 / (sigma * sigma);
}

inline double fpt_density_d1(double sigma, double x)
{
    if (sigma == 0.0) return 0.0;
    return fpt_density(sigma, x) * fpt_log_density_d1(sigma, x);
}

inline double fpt_density_d2(double sigma, double x)
{
    if (sigma == 0.0) return 0.0;
    const double l1 = fpt_log_density_d1(sigma, x);
    return fpt_density(sigma, x) * (fpt_log_density_d2(sigma, x) + l1 * l1);
}

// H(sigma, x) = 1/2 [erfc(a) + e^{2x} erfc(b)], a = (x-s)/sqrt(2s), b = (x+s)/sqrt(2s);
// the second term is erfcx(b) e^{-a^2}, which never overflows.
inline double fpt_cdf(double sigma, double x)
{
    detail::require_state(x, "fpt_cdf");
    detail::require_time(sigma, "fpt_cdf");
    if (sigma == 0.0) return 0.0;
    const double r = std::sqrt(2.0 * sigma);
    const double a = (x - sigma) / r;
    const double b = (x + sigma) / r;
    const double v = 0.5 * (std::erfc(a) + erfcx(b) * std::exp(-a * a));
    return std::min(v, 1.0);
}

// 1 - H(sigma, x), accurate in the far tail.
inline double fpt_survival(double sigma, double x)
{
    detail::require_state(x, "fpt_survival");
    detail::require_time(sigma, "fpt_survival");
    if (sigma == 0.0) return 1.0;
    const double r = std::sqrt(2.0 * sigma);
    const double a = (x - sigma) / r;
    const double b = (x + sigma) / r;
    if (a >= 0.0) return 0.5 * (std::erfc(-a) - erfcx(b) * std::exp(-a * a));
    const double z1 = -a;
    const double diff = z1 >= 20.0 ? detail::erfcx_diff_asymptotic(z1, b) : erfcx(z1) - erfcx(b);
    return 0.5 * std::exp(-a * a) * std::max(diff, 0.0);
}

// kappa(sigma, y, x): transition density from x to y without absorption.
inline double heat_kernel(double sigma, double y, double x)
{
    if (!(sigma > 0.0)) throw std::domain_error("heat_kernel: time must be > 0");
    detail::require_state(x, "heat_kernel");
    if (y < 0.0) throw std::domain_error("heat_kernel: target must be >= 0");
    const double d = y - x + sigma;
    return detail::inv_sqrt_2pi / std::sqrt(sigma) * std::exp(-d * d / (2.0 * sigma))
        * -std::expm1(-2.0 * x * y / sigma);
}

inline double heat_kernel_dsigma(double sigma, double y, double x)
{
    const double k1 = detail::inv_sqrt_2pi / std::sqrt(sigma)
        * std::exp(-(y - x + sigma) * (y - x + sigma) / (2.0 * sigma));
    const double c = -0.5 - 0.5 / sigma;
    const double s2 = 2.0 * sigma * sigma;
    const double r1 = (y - x) * (y - x) / s2 + c;
    const double r2 = (y + x) * (y + x) / s2 + c;
    return k1 * (r1 - std::exp(-2.0 * x * y / sigma) * r2);
}

// h/(1-H). Past the underflow of 1-H the common factor e^{-a^2} is cancelled
// analytically and the erfcx difference taken from its asymptotic series.
inline double hazard_rate(double sigma, double x)
{
    if (!(sigma > 0.0)) throw std::domain_error("hazard_rate: time must be > 0");
    detail::require_state(x, "hazard_rate");
    const double surv = fpt_survival(sigma, x);
    if (surv >= 1e-280) return fpt_density(sigma, x) / surv;
    const double r = std::sqrt(2.0 * sigma);
    const double z1 = (sigma - x) / r;
    const double z2 = (sigma + x) / r;
    const double diff = z1 >= 20.0 ? detail::erfcx_diff_asymptotic(z1, z2) : erfcx(z1) - erfcx(z2);
    return 2.0 * x * detail::inv_sqrt_2pi / (sigma * std::sqrt(sigma) * diff);
}

struct KernelConstants {
    double lambda_reset = 0;
    double sigma_star = 0;
    double sigma_dagger = 0;
    double h_star = 0;
    double h_dagger = 0;
    double sigma_sharp = 0;
    double delta_H = 0;
};

namespace detail {

template <class F>
double bisect(F&& f, double lo, double hi, double rtol = 1e-10)
{
    double flo = f(lo);
    for (int it = 0; it < 200 && hi - lo > rtol * std::max(std::abs(hi), 1e-300); ++it) {
        const double mid = 0.5 * (lo + hi);
        const double fm = f(mid);
        if ((fm > 0) == (flo > 0)) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    return 0.5 * (lo + hi);
}

// sigma^4 (l'' + l'^2): sign of h'' / h
inline double inflection_poly(double s, double L2)
{
    const double p = L2 - 3.0 * s - s * s;
    return -L2 * s + 1.5 * s * s + 0.25 * p * p;
}

inline double inflection_poly_d(double s, double L2)
{
    const double p = L2 - 3.0 * s - s * s;
    return -L2 + 3.0 * s + 0.5 * p * (-3.0 - 2.0 * s);
}

} // namespace detail

inline KernelConstants kernel_constants(double lambda_reset)
{
    if (!(lambda_reset > 0.0)) throw std::domain_error("kernel_constants: reset value must be > 0");
    const double L = lambda_reset, L2 = L * L;
    KernelConstants c;
    c.lambda_reset = L;

    // argmax of h: root of l' = 0, i.e. of L^2 - 3s - s^2
    auto dl = [&](double s) { return L2 - 3.0 * s - s * s; };
    double s = detail::bisect(dl, 0.0, L2);
    s -= dl(s) / (-3.0 - 2.0 * s);
    c.sigma_star = s;
    c.h_star = fpt_density(s, L);

    auto ip = [&](double u) { return detail::inflection_poly(u, L2); };
    double t = detail::bisect(ip, 0.0, c.sigma_star);
    const double dp = detail::inflection_poly_d(t, L2);
    if (dp != 0.0) {
        const double tn = t - ip(t) / dp;
        if (tn > 0.0 && tn < c.sigma_star) t = tn;
    }
    c.sigma_dagger = t;
    c.h_dagger = fpt_density(t, L);

    // last time beyond sigma_star where the hazard is below 1/4; sigma_star if none
    c.sigma_sharp = c.sigma_star;
    auto below = [&](double u) { return hazard_rate(u, L) - 0.25; };
    double far = c.sigma_star;
    double last_below = -1.0;
    for (double u = c.sigma_star; u < c.sigma_star + 200.0 * (1.0 + L2); u += 0.01 * (1.0 + L2))
        if (below(u) < 0.0) last_below = u;
    if (last_below >= 0.0) {
        far = last_below + 0.01 * (1.0 + L2);
        c.sigma_sharp = detail::bisect(below, last_below, far);
    }

    c.delta_H = fpt_cdf(c.sigma_star, L) - fpt_cdf(c.sigma_dagger, L);
    return c;
}

// Constants of the a-priori flux bounds:
// A = 3 max(M, N), M = sup h/(1-H), N = h*/(1-H(sigma*));
// B = 3 max(M', N'), M' = sup |h'|/(1-H), N' = sup_t [sup_{s>=t} |h'(s)|]/(1-H(t)).
struct AprioriBounds {
    double M = 0, N = 0, A = 0;
    double Mp = 0, Np = 0, B = 0;
};

inline AprioriBounds apriori_bounds(double lambda_reset)
{
    const double L = lambda_reset;
    const KernelConstants kc = kernel_constants(L);
    const double s_lo = 1e-4 * L * L, s_hi = 60.0 + 60.0 * L * L;
    const int n = 200000;
    const double ratio = std::pow(s_hi / s_lo, 1.0 / (n - 1));
    std::vector<double> s(n), dh(n), surv(n);
    AprioriBounds b;
    double sk = s_lo;
    for (int i = 0; i < n; ++i, sk *= ratio) {
        s[i] = sk;
        surv[i] = fpt_survival(sk, L);
        dh[i] = std::abs(fpt_density_d1(sk, L));
        b.M = std::max(b.M, hazard_rate(sk, L));
        b.Mp = std::max(b.Mp, dh[i] / surv[i]);
    }
    b.N = kc.h_star / fpt_survival(kc.sigma_star, L);
    double suffix = 0.0;
    for (int i = n - 1; i >= 0; --i) {
        suffix = std::max(suffix, dh[i]);
        b.Np = std::max(b.Np, suffix / surv[i]);
    }
    // limits at infinity: hazard -> 1/2, |h'|/(1-H) -> 1/4
    b.M = std::max(b.M, 0.5);
    b.Mp = std::max(b.Mp, 0.25);
    b.A = 3.0 * std::max(b.M, b.N);
    b.B = 3.0 * std::max(b.Mp, b.Np);
    return b;
}

// sum_k h(sigma, x + k Lambda): flux of a unit mass started at x with
// instantaneous reset to Lambda.
inline double fundamental_flux(double sigma, double x, double lambda_reset, double tol = 1e-14);

// sum_k h(sigma - k d, x + k Lambda): same with a constant reset delay d.
inline double delayed_flux_series(double sigma, double x, double delay, double lambda_reset,
                                  double tol = 1e-14)
{
    detail::require_state(x, "delayed_flux_series");
    if (!(lambda_reset > 0.0)) throw std::domain_error("delayed_flux_series: reset value must be > 0");
    if (!(tol > 0.0)) throw std::domain_error("delayed_flux_series: tol must be > 0");
    if (sigma <= 0.0) return 0.0;
    double sum = 0.0, prev = 0.0;
    for (int k = 0;; ++k) {
        const double s = sigma - k * delay;
        if (s <= 0.0) break;
        const double z = x + k * lambda_reset;
        const double term = fpt_density(s, z);
        sum += term;
        const bool tail = z > s + 3.0 * std::sqrt(s) && term <= prev;
        if (tail) {
            const double r = prev > 0.0 ? term / prev : 0.0;
            if (r < 1.0 && term * r / (1.0 - r) < tol) break;
        }
        prev = term;
        if (k > 10000000) break;
    }
    return sum;
}

inline double fundamental_flux(double sigma, double x, double lambda_reset, double tol)
{
    detail::require_time(sigma, "fundamental_flux");
    return delayed_flux_series(sigma, x, 0.0, lambda_reset, tol);
}

// sum_k H(sigma, x + k Lambda): cumulative of fundamental_flux.
inline double fundamental_cumulative(double sigma, double x, double lambda_reset, double tol = 1e-14)
{
    detail::require_state(x, "fundamental_cumulative");
    if (sigma <= 0.0) return 0.0;
    double sum = 0.0, prev = 1.0;
    for (int k = 0;; ++k) {
        const double z = x + k * lambda_reset;
        const double term = fpt_cdf(sigma, z);
        sum += term;
        if (z > sigma + 3.0 * std::sqrt(sigma)) {
            const double r = prev > 0.0 ? term / prev : 0.0;
            if (r < 1.0 && term / (1.0 - r) < tol) break;
        }
        prev = term;
        if (k > 10000000) break;
    }
    return sum;
}

inline double fundamental_flux_d1(double sigma, double x, double lambda_reset, double tol = 1e-14)
{
    if (sigma <= 0.0) return 0.0;
    double sum = 0.0, prev = 0.0;
    for (int k = 0;; ++k) {
        const double z = x + k * lambda_reset;
        const double term = fpt_density_d1(sigma, z);
        sum += term;
        const double a = std::abs(term);
        if (z > sigma + 3.0 * std::sqrt(sigma) + 2.0 && a <= prev) {
            const double r = prev > 0.0 ? a / prev : 0.0;
            if (r < 1.0 && a * r / (1.0 - r) < tol) break;
        }
        prev = a;
        if (k > 10000000) break;
    }
    return sum;
}

// Laplace transform of the constant-delay flux started at x.
inline double constant_delay_flux_laplace(double u, double x, double delay, double lambda_reset)
{
    if (!(u > 0.0)) throw std::domain_error("constant_delay_flux_laplace: u must be > 0");
    const double w = -2.0 * u / (1.0 + std::sqrt(1.0 + 2.0 * u)); // 1 - sqrt(1+2u)
    const double den = -std::expm1(lambda_reset * w - delay * u);
    if (!(den > std::numeric_limits<double>::min()))
        throw std::overflow_error("constant_delay_flux_laplace: denominator underflow");
    return std::exp(x * w - delay * u) / den;
}

} // namespace mfblowup
