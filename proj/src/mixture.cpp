#include "ddc/mixture.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

#include "ddc/numerics.hpp"

namespace ddc {

void GumbelMixture::validate() const {
    if (weights.size() < 1) throw std::invalid_argument("GumbelMixture: no components");
    if (mu.rows() != weights.size() || comp_scale.size() != weights.size())
        throw std::invalid_argument("GumbelMixture: inconsistent component counts");
    if (mu.cols() < 1) throw std::invalid_argument("GumbelMixture: dimension must be positive");
    if (std::abs(weights.sum() - 1.0) > 1e-12) throw std::invalid_argument("GumbelMixture: weights must sum to 1");
    if ((weights.array() <= 0.0).any()) throw std::invalid_argument("GumbelMixture: weights must be positive");
    if (!(scale > 0.0) || (comp_scale.array() <= 0.0).any())
        throw std::invalid_argument("GumbelMixture: scales must be positive");
    if (!mu.allFinite() || !std::isfinite(scale) || !comp_scale.allFinite())
        throw std::invalid_argument("GumbelMixture: non-finite parameter");
}

GumbelMixture GumbelMixture::standard(int J) {
    GumbelMixture g;
    g.weights = Eigen::VectorXd::Ones(1);
    g.mu = Eigen::MatrixXd::Zero(1, J);
    g.comp_scale = Eigen::VectorXd::Ones(1);
    g.scale = 1.0;
    return g;
}

double gumbel_log_kernel(double t) {
    const double s = t + kEulerGamma;
    return -s - std::exp(-s);
}

double gumbel_cdf(double t) { return std::exp(-std::exp(-t - kEulerGamma)); }

double log_density(const GumbelMixture& mix, const Eigen::VectorXd& z) {
    if (z.size() != mix.dim()) throw std::invalid_argument("density: dimension mismatch");
    std::vector<double> terms(mix.m());
    for (int k = 0; k < mix.m(); ++k) {
        const double sk = mix.sigma(k);
        double l = std::log(mix.weights(k)) - mix.dim() * std::log(sk);
        for (int j = 0; j < mix.dim(); ++j) l += gumbel_log_kernel((z(j) - mix.mu(k, j)) / sk);
        terms[k] = l;
    }
    return log_sum_exp(terms);
}

double density(const GumbelMixture& mix, const Eigen::VectorXd& z) { return std::exp(log_density(mix, z)); }

Eigen::VectorXd sample(const GumbelMixture& mix, Rng& rng) {
    double u = uniform_open(rng);
    int k = 0;
    while (k < mix.m() - 1 && u > mix.weights(k)) {
        u -= mix.weights(k);
        ++k;
    }
    const double sk = mix.sigma(k);
    Eigen::VectorXd e(mix.dim());
    for (int j = 0; j < mix.dim(); ++j)
        e(j) = mix.mu(k, j) - sk * (kEulerGamma + std::log(-std::log(uniform_open(rng))));
    return e;
}

Eigen::VectorXd mixture_mean(const GumbelMixture& mix) { return mix.mu.transpose() * mix.weights; }

double marginal_cdf(const GumbelMixture& mix, int j, double x) {
    double c = 0.0;
    for (int k = 0; k < mix.m(); ++k) c += mix.weights(k) * gumbel_cdf((x - mix.mu(k, j)) / mix.sigma(k));
    return c;
}

double marginal_density(const GumbelMixture& mix, int j, double x) {
    double f = 0.0;
    for (int k = 0; k < mix.m(); ++k) {
        const double sk = mix.sigma(k);
        f += mix.weights(k) * std::exp(gumbel_log_kernel((x - mix.mu(k, j)) / sk)) / sk;
    }
    return f;
}

double marginal_median(const GumbelMixture& mix, int j) {
    if (mix.m() == 1) {
        const double s = mix.sigma(0);
        return mix.mu(0, j) - s * std::log(std::log(2.0)) - s * kEulerGamma;
    }
    const double mean = mixture_mean(mix)(j);
    double half = 0.0;
    for (int k = 0; k < mix.m(); ++k) half = std::max(half, mix.sigma(k) + std::abs(mix.mu(k, j) - mean));
    half *= 10.0;
    auto f = [&](double x) { return marginal_cdf(mix, j, x) - 0.5; };
    for (int it = 0; it < 60; ++it) {
        if (f(mean - half) < 0.0 && f(mean + half) > 0.0) {
            const double tol = 1e-13 * std::max(1.0, half);
            return find_root(f, {mean - half, mean + half}, tol);
        }
        half *= 2.0;
    }
    throw NumericalError("marginal_median: bracketing failed");
}

double truncated_mean_above(const GumbelMixture& mix, int j, double M) {
    double t = 0.0;
    for (int k = 0; k < mix.m(); ++k) {
        const double sk = mix.sigma(k);
        const double b = (M - mix.mu(k, j)) / sk + kEulerGamma;
        const double eb = std::exp(-b);
        const double cdf = std::exp(-eb);
        const double lower = (cdf == 0.0) ? 0.0 : M * cdf;
        t += mix.weights(k) * (mix.mu(k, j) - lower + sk * e1_of_exp_neg(b));
    }
    return t;
}

double scale_factor(const GumbelMixture& mix, int j) {
    const double mean = mixture_mean(mix)(j);
    const double med = marginal_median(mix, j);
    const double upper_mass = 1.0 - marginal_cdf(mix, j, med);
    const double tm = truncated_mean_above(mix, j, med) - mean * upper_mass;
    if (!(tm > 0.0)) throw NumericalError("scale_factor: non-positive truncated mean");
    return std::log(2.0) / tm;
}

GumbelMixture approximate_logistic(int n) {
    if (n < 1) throw std::invalid_argument("approximate_logistic: need at least one component");
    GumbelMixture g;
    g.weights = Eigen::VectorXd::Constant(n, 1.0 / n);
    g.mu.resize(n, 1);
    g.comp_scale = Eigen::VectorXd::Ones(n);
    for (int i = 0; i < n; ++i) {
        const double p = (i + 0.5) / n;
        g.mu(i, 0) = std::log(-std::log(p)) + kEulerGamma;
    }
    return g;
}

McEstimate rho_distance(const GumbelMixture& f1, const GumbelMixture& f2, long n_mc, Rng& rng) {
    if (n_mc < 100) throw std::invalid_argument("rho_distance: n_mc must be at least 100");
    if (f1.dim() != f2.dim()) throw std::invalid_argument("rho_distance: dimension mismatch");
    double sum = 0.0;
    double sum2 = 0.0;
    for (long i = 0; i < n_mc; ++i) {
        const Eigen::VectorXd e = (uniform_open(rng) < 0.5) ? sample(f1, rng) : sample(f2, rng);
        const double l1 = log_density(f1, e);
        const double l2 = log_density(f2, e);
        // |f1 - f2| / ((f1 + f2)/2) = 2 |tanh((l1 - l2)/2)|
        const double ratio = (l1 == l2) ? 0.0 : 2.0 * std::abs(std::tanh(0.5 * (l1 - l2)));
        const double g = (1.0 + e.cwiseAbs().sum()) * ratio;
        sum += g;
        sum2 += g * g;
    }
    const double n = static_cast<double>(n_mc);
    const double mean = sum / n;
    const double var = std::max(0.0, sum2 / n - mean * mean);
    return {mean, std::sqrt(var / n)};
}

double rho_distance_quadrature(const GumbelMixture& f1, const GumbelMixture& f2, int n_grid) {
    if (f1.dim() != 1 || f2.dim() != 1) throw std::invalid_argument("rho_distance_quadrature: J must be 1");
    double lo = 1e300;
    double hi = -1e300;
    for (const GumbelMixture* f : {&f1, &f2})
        for (int k = 0; k < f->m(); ++k) {
            lo = std::min(lo, f->mu(k, 0) - 8.0 * f->sigma(k));
            hi = std::max(hi, f->mu(k, 0) + 45.0 * f->sigma(k));
        }
    const int n = n_grid + (n_grid % 2);
    const double h = (hi - lo) / n;
    double s = 0.0;
    for (int i = 0; i <= n; ++i) {
        const double x = lo + i * h;
        const double g = (1.0 + std::abs(x)) * std::abs(marginal_density(f1, 0, x) - marginal_density(f2, 0, x));
        const double w = (i == 0 || i == n) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
        s += w * g;
    }
    return s * h / 3.0;
}

}  // namespace ddc
