#include "ddc/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <boost/math/special_functions/gamma.hpp>
#include <boost/math/special_functions/erf.hpp>
#include <boost/math/tools/roots.hpp>
#include <boost/math/tools/toms748_solve.hpp>

namespace ddc {

namespace {

double e1_series(double z) {
    // E1(z) = -gamma - ln z - sum_{k>=1} (-z)^k / (k k!)
    double sum = 0.0;
    double term = 1.0;
    for (int k = 1; k < 200; ++k) {
        term *= -z / k;
        const double add = term / k;
        sum += add;
        if (std::abs(add) < 1e-17 * std::abs(sum)) break;
    }
    return -kEulerGamma - std::log(z) - sum;
}

double e1_continued_fraction(double z) {
    // modified Lentz on e^{-z} (1/(z+1-) 1/(z+3-) 4/(z+5-) ...)
    const double tiny = 1e-300;
    double b = z + 1.0;
    double c = 1.0 / tiny;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i < 1000; ++i) {
        const double an = -static_cast<double>(i) * i;
        b += 2.0;
        d = 1.0 / (an * d + b);
        c = b + an / c;
        const double del = c * d;
        h *= del;
        if (std::abs(del - 1.0) < 1e-16) break;
    }
    return h * std::exp(-z);
}

}  // namespace

double exp_integral_e1(double z) {
    if (!(z > 0.0)) throw std::domain_error("exp_integral_e1: z must be positive");
    if (z > 745.0) return 0.0;
    return z <= 1.0 ? e1_series(z) : e1_continued_fraction(z);
}

double e1_of_exp_neg(double a) {
    if (a > 36.0) return a - kEulerGamma + std::exp(-a);
    if (a < -709.0) return 0.0;
    return exp_integral_e1(std::exp(-a));
}

double find_root(const std::function<double(double)>& f, Interval bracket, double tol) {
    double flo = f(bracket.lo);
    double fhi = f(bracket.hi);
    if (flo == 0.0) return bracket.lo;
    if (fhi == 0.0) return bracket.hi;
    if (std::signbit(flo) == std::signbit(fhi))
        throw NumericalError("find_root: no sign change in bracket");
    std::uintmax_t max_iter = 500;
    auto stop = [tol](double a, double b) { return std::abs(b - a) <= tol; };
    auto r = boost::math::tools::toms748_solve(f, bracket.lo, bracket.hi, flo, fhi, stop, max_iter);
    return 0.5 * (r.first + r.second);
}

double regularized_gamma_p(double a, double x) {
    if (x <= 0.0) return 0.0;
    return boost::math::gamma_p(a, x);
}

double chi_square_cdf(double x, double dof) { return regularized_gamma_p(0.5 * dof, 0.5 * x); }

double chi_square_quantile(double p, double dof) {
    if (!(p > 0.0 && p < 1.0)) throw std::domain_error("chi_square_quantile: p outside (0,1)");
    if (!(dof > 0.0)) throw std::domain_error("chi_square_quantile: dof must be positive");
    double lo = 0.0;
    double hi = std::max(1.0, dof);
    while (chi_square_cdf(hi, dof) < p) hi *= 2.0;
    for (int i = 0; i < 200 && hi - lo > 1e-13 * std::max(1.0, hi); ++i) {
        const double mid = 0.5 * (lo + hi);
        if (chi_square_cdf(mid, dof) < p)
            lo = mid;
        else
            hi = mid;
    }
    return 0.5 * (lo + hi);
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw std::domain_error("normal_quantile: p outside (0,1)");
    return -std::sqrt(2.0) * boost::math::erfc_inv(2.0 * p);
}

Interval hpd_interval(std::span<const double> d, double mass) {
    if (d.empty()) throw std::invalid_argument("hpd_interval: empty sample");
    if (!(mass > 0.0 && mass < 1.0)) throw std::domain_error("hpd_interval: mass outside (0,1)");
    const std::size_t n = d.size();
    std::size_t w = static_cast<std::size_t>(std::ceil(mass * static_cast<double>(n) - 1e-9));
    w = std::clamp<std::size_t>(w, 1, n);
    std::size_t best = 0;
    double best_len = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i + w <= n; ++i) {
        const double len = d[i + w - 1] - d[i];
        if (len < best_len) {
            best_len = len;
            best = i;
        }
    }
    return {d[best], d[best + w - 1]};
}

Interval hpd_interval_unsorted(std::vector<double> draws, double mass) {
    std::sort(draws.begin(), draws.end());
    return hpd_interval(draws, mass);
}

double log_sum_exp(std::span<const double> v) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : v) mx = std::max(mx, x);
    if (!std::isfinite(mx)) return mx;
    double s = 0.0;
    for (double x : v) s += std::exp(x - mx);
    return mx + std::log(s);
}

double kolmogorov_pvalue(double d, std::size_t n) {
    const double sn = std::sqrt(static_cast<double>(n));
    const double lambda = (sn + 0.12 + 0.11 / sn) * d;
    if (lambda < 1e-3) return 1.0;
    double sum = 0.0;
    for (int j = 1; j <= 200; ++j) {
        const double term = std::exp(-2.0 * j * j * lambda * lambda);
        sum += (j % 2 == 1 ? 2.0 : -2.0) * term;
        if (term < 1e-18) break;
    }
    return std::clamp(sum, 0.0, 1.0);
}

double ks_statistic(std::vector<double> s, const std::function<double(double)>& cdf) {
    std::sort(s.begin(), s.end());
    const double n = static_cast<double>(s.size());
    double d = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const double f = cdf(s[i]);
        d = std::max({d, f - i / n, (i + 1) / n - f});
    }
    return d;
}

}  // namespace ddc
