#pragma once

#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "ddc/dp_solver.hpp"
#include "ddc/mixture.hpp"
#include "ddc/model.hpp"
#include "ddc/numerics.hpp"

namespace ddc {

// sum_i w_i N(mean_i, sd_i^2)
struct NormalMixture1D {
    std::vector<double> w{1.0};
    std::vector<double> mean{0.0};
    std::vector<double> sd{1.0};

    static NormalMixture1D normal(double mean, double sd) { return {{1.0}, {mean}, {sd}}; }
    double log_pdf(double x) const;
    double dlog_pdf(double x) const;
    double cdf(double x) const;
    double sample(Rng& rng) const;
    void validate() const;
};

struct PriorConfig {
    double a_bar = 10.0;
    double A_m = 0.05;
    double tau = 5.0;
    int m_max = 10;
    NormalMixture1D mu_prior = NormalMixture1D::normal(0.0, 2.0);
    NormalMixture1D log_comp_scale_prior = NormalMixture1D::normal(0.0, 1.0);
    NormalMixture1D log_scale_prior = NormalMixture1D::normal(0.0, 0.01);
    std::vector<NormalMixture1D> theta_prior;  // one per free utility parameter

    double log_m_weight(int m) const;  // unnormalized log Pi(m)
    std::vector<double> m_pmf() const; // Pi(1..m_max), normalized
    void validate() const;
};

// chi = (theta_free, log sigma, alpha_1..alpha_{m-1}, then per component (mu_k, log comp_scale_k))
struct ParamLayout {
    int F = 0;
    int J = 1;
    int m = 1;
    int log_scale() const { return F; }
    int alpha(int l) const { return F + 1 + l; }
    int mu(int k, int j) const { return F + m + k * (J + 1) + j; }
    int log_comp_scale(int k) const { return F + m + k * (J + 1) + J; }
    int size() const { return F + 1 + (m - 1) + m * (J + 1); }
};

struct ChainState {
    int m = 1;
    Eigen::VectorXd chi;
};

Eigen::VectorXd softmax_weights(const Eigen::VectorXd& alpha_free);  // alpha_m = 0
GumbelMixture untransform(const Eigen::VectorXd& chi, const ParamLayout& L);
Eigen::VectorXd transform(const Eigen::VectorXd& theta_free, const GumbelMixture& mix);

// sum n log p over positive counts; -inf if a positive count meets p = 0
double log_likelihood(const PanelCounts& counts, const CCPMatrix& ccp);

// transformed prior of chi at fixed m, including log Pi(m) and the softmax Jacobian
double log_prior(const PriorConfig& prior, const ChainState& s, int F, int J, Eigen::VectorXd* grad = nullptr);

struct LikelihoodGradient {
    double value = 0.0;
    // natural parameters: theta_free (F), weights (m), locations (m*J, k-major), effective scales (m)
    Eigen::VectorXd d_theta, d_weights, d_mu, d_sigma;
};

// needs sol at the fixed point of (model, mix)
LikelihoodGradient loglik_gradient_natural(const DDCModel& model, const GumbelMixture& mix, const PanelCounts& counts,
                                           const EmaxSolution& sol, const std::vector<int>& free_idx);
// dynamic logit, gradient in theta_free
LikelihoodGradient logit_loglik_gradient(const DDCModel& model, const PanelCounts& counts, const EmaxSolution& sol,
                                         const std::vector<int>& free_idx);

struct Problem {
    DDCModel model;
    PanelCounts counts;
    std::vector<int> free_idx;
    PriorConfig prior;
    SolverConfig solver;
    bool likelihood_off = false;  // prior-only target

    int F() const { return static_cast<int>(free_idx.size()); }
    int J() const { return model.J; }
    ParamLayout layout(int m) const { return {F(), J(), m}; }
};

struct PosteriorValue {
    double log_post = 0.0;
    double log_lik = 0.0;
    double log_prior = 0.0;
    Eigen::VectorXd grad;
    Eigen::VectorXd grad_lik;  // likelihood part of grad
    EmaxSolution sol;
};

// Evaluates log posterior and gradient in chi; keeps a warm start for the Emax solve.
class PosteriorEvaluator {
public:
    explicit PosteriorEvaluator(const Problem& p);
    PosteriorValue evaluate(const ChainState& s, bool want_grad = true);
    DDCModel model_at(const Eigen::VectorXd& chi) const;
    const Problem& problem() const { return prob_; }
    Eigen::VectorXd warm_start;
    long evaluations = 0;

private:
    const Problem& prob_;
    DDCModel model_;
};

PosteriorValue grad_log_posterior(const Problem& p, const ChainState& s);

// draw at fixed m; weights through gamma(a/m) variables; theta_free copied when no theta prior is set
ChainState sample_prior(const PriorConfig& prior, const Eigen::VectorXd& theta_free, int J, int m, Rng& rng);

struct LogitMleConfig {
    int starts = 5;
    double jitter = 0.5;  // relative, per coordinate
    int max_iter = 300;
    double tol = 1e-9;    // Newton decrement
    std::uint64_t seed = 1;
    SolverConfig solver;
};

struct LogitMleResult {
    Eigen::VectorXd theta_free;
    Eigen::VectorXd theta_full;
    Eigen::MatrixXd cov;
    double log_lik = 0.0;
    int iterations = 0;
    bool converged = false;
};

LogitMleResult logit_mle(const PanelCounts& counts, const DDCModel& model, const std::vector<int>& free_idx,
                         const LogitMleConfig& cfg = {});

struct FunctionalCI {
    double value = 0.0;
    double se = 0.0;
    Interval ci;
};

FunctionalCI delta_method_ci(double value, const Eigen::VectorXd& grad, const Eigen::MatrixXd& cov, double level = 0.95);
// functional of the full theta, differentiated numerically in the free coordinates
FunctionalCI delta_method(const std::function<double(const Eigen::VectorXd&)>& fn, const LogitMleResult& mle,
                          const std::vector<int>& free_idx, double level = 0.95);

}  // namespace ddc
