#pragma once

#include <Eigen/Dense>

#include "ddc/random.hpp"

namespace ddc {

// Location-scale mixture of centered Gumbel kernels on R^J.
// Component k has locations mu.row(k) and effective scale scale * comp_scale(k).
struct GumbelMixture {
    Eigen::VectorXd weights;     // m
    Eigen::MatrixXd mu;          // m x J
    Eigen::VectorXd comp_scale;  // m
    double scale = 1.0;

    int m() const { return static_cast<int>(weights.size()); }
    int dim() const { return static_cast<int>(mu.cols()); }
    double sigma(int k) const { return scale * comp_scale(k); }
    void validate() const;

    static GumbelMixture standard(int J);
};

// log phi(t), phi(t) = exp(-t - gamma - exp(-t - gamma)); mean 0, variance pi^2/6
double gumbel_log_kernel(double t);
double gumbel_cdf(double t);

double log_density(const GumbelMixture& mix, const Eigen::VectorXd& z);
double density(const GumbelMixture& mix, const Eigen::VectorXd& z);
Eigen::VectorXd sample(const GumbelMixture& mix, Rng& rng);
Eigen::VectorXd mixture_mean(const GumbelMixture& mix);

double marginal_cdf(const GumbelMixture& mix, int j, double x);
double marginal_density(const GumbelMixture& mix, int j, double x);
double marginal_median(const GumbelMixture& mix, int j);
// E[e_j 1(e_j >= M)]
double truncated_mean_above(const GumbelMixture& mix, int j, double M);
// log 2 / E[e 1(e >= median)] for the demeaned coordinate j
double scale_factor(const GumbelMixture& mix, int j = 0);

struct McEstimate {
    double value = 0.0;
    double se = 0.0;
};

// Difference of two i.i.d. Gumbels is logistic, so the logistic is a continuous
// location mixture of unit-scale Gumbels; discretized at n quantiles.
GumbelMixture approximate_logistic(int n_components);

// int (1 + sum_j |e_j|) |f1 - f2| de by importance sampling from (f1+f2)/2
McEstimate rho_distance(const GumbelMixture& f1, const GumbelMixture& f2, long n_mc, Rng& rng);
double rho_distance_quadrature(const GumbelMixture& f1, const GumbelMixture& f2, int n_grid = 20000);

}  // namespace ddc
