#pragma once

#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

namespace ddc {

inline constexpr double kEulerGamma = 0.57721566490153286060651209;
inline constexpr double kPi = 3.14159265358979323846264338;

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
    double length() const { return hi - lo; }
    bool contains(double x) const { return lo <= x && x <= hi; }
};

class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// E1(z) = int_z^inf e^{-t}/t dt. Series for z <= 1, continued fraction above.
double exp_integral_e1(double z);

// E1(e^{-a}), stable for any real a. Large a uses E1(z) ~ -gamma - ln z.
double e1_of_exp_neg(double a);

// Brent on a bracket with f(lo)*f(hi) <= 0.
double find_root(const std::function<double(double)>& f, Interval bracket, double tol = 1e-12);

// P(a, x), lower regularized incomplete gamma.
double regularized_gamma_p(double a, double x);
double chi_square_cdf(double x, double dof);
double chi_square_quantile(double p, double dof);

double normal_cdf(double x);
double normal_quantile(double p);

// Shortest window over sorted draws containing ceil(mass*n) of them.
Interval hpd_interval(std::span<const double> sorted_draws, double mass);
Interval hpd_interval_unsorted(std::vector<double> draws, double mass);

double log_sum_exp(std::span<const double> v);

// Kolmogorov distribution tail P(K > x) for the scaled statistic sqrt(n) D.
double kolmogorov_pvalue(double d, std::size_t n);
double ks_statistic(std::vector<double> sample, const std::function<double(double)>& cdf);

}  // namespace ddc
