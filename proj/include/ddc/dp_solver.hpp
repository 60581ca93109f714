#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>
#include <vector>

#include "ddc/mixture.hpp"
#include "ddc/model.hpp"

namespace ddc {

struct SolverConfig {
    double tol = 1e-10;
    double switch_tol = 1e-2;  // successive approximation until the residual drops below this
    int max_successive = 200;
    int max_newton = 50;
    bool polish = true;  // one extra Newton step once tol is reached
    double warm_switch_tol = 10.0;  // a warm start goes straight to Newton below this residual
};

struct EmaxSolution {
    Eigen::VectorXd Q;
    CCPMatrix ccp;  // at Q
    double residual = 0.0;
    int successive = 0;
    int newton = 0;
    bool cold_restart = false;  // the warm start failed and the solve was redone from zero
    bool converged = false;
};

// v(x,d) = u(x,d) + beta G^d_x Q
Eigen::MatrixXd choice_values(const DDCModel& model, const Eigen::VectorXd& Q);

Eigen::VectorXd emax_apply(const DDCModel& model, const GumbelMixture& mix, const Eigen::VectorXd& Q);
CCPMatrix ccps(const DDCModel& model, const GumbelMixture& mix, const Eigen::VectorXd& Q);
// both in one pass
void emax_and_ccps(const DDCModel& model, const GumbelMixture& mix, const Eigen::VectorXd& Q,
                   Eigen::VectorXd& TQ, CCPMatrix& P);

// i.i.d. centered Gumbel on all J+1 actions
void logit_apply(const DDCModel& model, const Eigen::VectorXd& Q, Eigen::VectorXd& TQ, CCPMatrix& P);

SparseRow bellman_jacobian(const DDCModel& model, const CCPMatrix& ccp);

// Sparse LU that redoes the symbolic analysis only when the sparsity pattern changes
class PatternLU {
public:
    bool factorize(const Eigen::SparseMatrix<double>& A);  // false if singular
    Eigen::VectorXd solve(const Eigen::VectorXd& b) const { return lu_.solve(b); }

private:
    Eigen::SparseLU<Eigen::SparseMatrix<double>, Eigen::COLAMDOrdering<int>> lu_;
    std::vector<int> outer_, inner_;
};

EmaxSolution solve_emax(const DDCModel& model, const GumbelMixture& mix, const SolverConfig& cfg = {},
                        const Eigen::VectorXd* warm = nullptr);
EmaxSolution solve_logit(const DDCModel& model, const SolverConfig& cfg = {}, const Eigen::VectorXd* warm = nullptr);
// pure successive approximation, for checks
EmaxSolution solve_emax_successive(const DDCModel& model, const GumbelMixture& mix, double tol, long max_iter);
EmaxSolution solve_logit_successive(const DDCModel& model, double tol, long max_iter);

std::pair<Eigen::VectorXd, CCPMatrix> logit_emax_and_ccps(const DDCModel& model, const SolverConfig& cfg = {});

// per-component closed forms at one state; exposed for gradients and tests
struct ComponentEval {
    double sk = 1.0;
    double r = 0.0;      // log sum_j exp(zt_j), zt_j = (v_j - v_0 + mu_jk)/sk
    double a = 0.0;      // gamma - r
    double p0 = 0.0;     // exp(-e^{-a})
    double om_p0 = 0.0;  // 1 - p0
    double g = 0.0;      // d p0 / d a
    double rpe = 0.0;    // r + E1(e^{-a})
    double sbar = 0.0;   // sum_j s_j zt_j
    double E = 0.0;      // v_0 + sk * rpe
};

// fills s (length J) with the within-component softmax over actions 1..J
ComponentEval eval_component(const double* v, int J, const double* mu_k, double sk, double* s, double* zt);

}  // namespace ddc
