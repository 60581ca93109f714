#include "ddc/dp_solver.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/SparseLU>

#include "ddc/numerics.hpp"

namespace ddc {

Eigen::MatrixXd choice_values(const DDCModel& model, const Eigen::VectorXd& Q) {
    Eigen::MatrixXd v(model.K, model.J + 1);
    for (int d = 0; d <= model.J; ++d) v.col(d) = model.Z[d] * model.theta + model.beta * (model.G[d] * Q);
    if (!v.allFinite()) throw NumericalError("choice values are not finite");
    return v;
}

ComponentEval eval_component(const double* v, int J, const double* mu_k, double sk, double* s, double* zt) {
    ComponentEval c;
    c.sk = sk;
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < J; ++j) {
        zt[j] = (v[j + 1] - v[0] + mu_k[j]) / sk;
        mx = std::max(mx, zt[j]);
    }
    double sum = 0.0;
    for (int j = 0; j < J; ++j) sum += std::exp(zt[j] - mx);
    c.r = mx + std::log(sum);
    c.sbar = 0.0;
    for (int j = 0; j < J; ++j) {
        s[j] = std::exp(zt[j] - c.r);
        c.sbar += s[j] * zt[j];
    }
    c.a = kEulerGamma - c.r;
    if (std::isnan(c.a)) throw NumericalError("non-finite choice values");
    if (c.a < -709.0) {
        c.p0 = 0.0;
        c.om_p0 = 1.0;
        c.g = 0.0;
        c.rpe = c.r;
    } else {
        const double ez = std::exp(-c.a);
        c.p0 = std::exp(-ez);
        c.om_p0 = -std::expm1(-ez);
        c.g = std::exp(-ez - c.a);
        // for large a, r + E1(e^{-a}) = e^{-a} + O(e^{-2a}) since a = gamma - r
        c.rpe = (c.a > 36.0) ? ez : c.r + exp_integral_e1(ez);
    }
    c.E = v[0] + sk * c.rpe;
    return c;
}

void emax_and_ccps(const DDCModel& model, const GumbelMixture& mix, const Eigen::VectorXd& Q, Eigen::VectorXd& TQ,
                   CCPMatrix& P) {
    if (mix.dim() != model.J) throw std::invalid_argument("mixture dimension differs from the number of actions");
    const int J = model.J;
    const Eigen::MatrixXd V = choice_values(model, Q);
    const Eigen::MatrixXd muT = mix.mu.transpose();
    TQ.resize(model.K);
    P.setZero(model.K, J + 1);
    std::vector<double> s(J), zt(J), vx(J + 1);
    for (int x = 0; x < model.K; ++x) {
        for (int d = 0; d <= J; ++d) vx[d] = V(x, d);
        double t = 0.0;
        for (int k = 0; k < mix.m(); ++k) {
            const double w = mix.weights(k);
            const ComponentEval c = eval_component(vx.data(), J, muT.col(k).data(), mix.sigma(k), s.data(), zt.data());
            t += w * c.E;
            P(x, 0) += w * c.p0;
            for (int j = 0; j < J; ++j) P(x, j + 1) += w * s[j] * c.om_p0;
        }
        TQ(x) = t;
    }
}

Eigen::VectorXd emax_apply(const DDCModel& model, const GumbelMixture& mix, const Eigen::VectorXd& Q) {
    Eigen::VectorXd TQ;
    CCPMatrix P;
    emax_and_ccps(model, mix, Q, TQ, P);
    return TQ;
}

CCPMatrix ccps(const DDCModel& model, const GumbelMixture& mix, const Eigen::VectorXd& Q) {
    Eigen::VectorXd TQ;
    CCPMatrix P;
    emax_and_ccps(model, mix, Q, TQ, P);
    return P;
}

void logit_apply(const DDCModel& model, const Eigen::VectorXd& Q, Eigen::VectorXd& TQ, CCPMatrix& P) {
    const Eigen::MatrixXd V = choice_values(model, Q);
    TQ.resize(model.K);
    P.resize(model.K, model.J + 1);
    for (int x = 0; x < model.K; ++x) {
        const double mx = V.row(x).maxCoeff();
        const Eigen::RowVectorXd e = (V.row(x).array() - mx).exp();
        const double s = e.sum();
        TQ(x) = mx + std::log(s);
        P.row(x) = e / s;
    }
}

SparseRow bellman_jacobian(const DDCModel& model, const CCPMatrix& ccp) {
    SparseRow J(model.K, model.K);
    for (int d = 0; d <= model.J; ++d) {
        SparseRow scaled = model.G[d];
        for (int x = 0; x < model.K; ++x)
            for (SparseRow::InnerIterator it(scaled, x); it; ++it) it.valueRef() *= model.beta * ccp(x, d);
        J += scaled;
    }
    return J;
}

bool PatternLU::factorize(const Eigen::SparseMatrix<double>& A) {
    if (!A.isCompressed()) throw std::invalid_argument("PatternLU: matrix must be compressed");
    const int n = static_cast<int>(A.outerSize());
    const int nnz = static_cast<int>(A.nonZeros());
    const bool same = static_cast<int>(outer_.size()) == n + 1 && static_cast<int>(inner_.size()) == nnz &&
                      std::equal(outer_.begin(), outer_.end(), A.outerIndexPtr()) &&
                      std::equal(inner_.begin(), inner_.end(), A.innerIndexPtr());
    if (!same) {
        lu_.analyzePattern(A);
        outer_.assign(A.outerIndexPtr(), A.outerIndexPtr() + n + 1);
        inner_.assign(A.innerIndexPtr(), A.innerIndexPtr() + nnz);
    }
    lu_.factorize(A);
    return lu_.info() == Eigen::Success;
}

namespace {

template <class Apply>
EmaxSolution solve_hybrid(const DDCModel& model, Apply&& apply, const SolverConfig& cfg, const Eigen::VectorXd* warm) {
    EmaxSolution sol;
    sol.Q = (warm && warm->size() == model.K) ? *warm : Eigen::VectorXd::Zero(model.K);
    Eigen::VectorXd TQ;
    apply(sol.Q, TQ, sol.ccp);
    sol.residual = (TQ - sol.Q).lpNorm<Eigen::Infinity>();
    Eigen::SparseMatrix<double> A;
    const SparseRow I = [&] {
        SparseRow id(model.K, model.K);
        id.setIdentity();
        return id;
    }();
    auto newton_step = [&](const Eigen::VectorXd& Q, const Eigen::VectorXd& TQ, const CCPMatrix& P) {
        A = I - bellman_jacobian(model, P);
        A.makeCompressed();
        thread_local PatternLU lu;
        if (!lu.factorize(A)) throw NumericalError("Newton step: singular I - T'(Q)");
        return Eigen::VectorXd(Q - lu.solve(Q - TQ));
    };
    bool used_newton = false;
    const bool warm_newton = warm && warm->size() == model.K && sol.residual <= cfg.warm_switch_tol;
    double switch_tol = warm_newton ? cfg.warm_switch_tol : cfg.switch_tol;
    Eigen::VectorXd Q0, TQ0;
    CCPMatrix P0;
    while (sol.residual > cfg.tol) {
        const bool early = switch_tol > cfg.switch_tol;
        bool newton = false;
        if (sol.residual > switch_tol && sol.successive < cfg.max_successive) {
            sol.Q = TQ;
            ++sol.successive;
        } else {
            if (sol.newton >= cfg.max_newton) break;
            if (early) {
                Q0 = sol.Q;
                TQ0 = TQ;
                P0 = sol.ccp;
            }
            sol.Q = newton_step(sol.Q, TQ, sol.ccp);
            ++sol.newton;
            used_newton = newton = true;
        }
        const double before = sol.residual;
        apply(sol.Q, TQ, sol.ccp);
        sol.residual = (TQ - sol.Q).lpNorm<Eigen::Infinity>();
        // an early Newton step that makes things worse is undone and successive approximation takes over
        if (newton && early && !(sol.residual <= before)) {
            sol.Q = std::move(Q0);
            TQ = std::move(TQ0);
            sol.ccp = std::move(P0);
            sol.residual = before;
            switch_tol = cfg.switch_tol;
            continue;
        }
        if (!std::isfinite(sol.residual)) throw NumericalError("Emax iteration diverged");
    }
    sol.converged = sol.residual <= cfg.tol;
    if (sol.converged && used_newton && cfg.polish && sol.residual > 0.0) {
        Eigen::VectorXd Qn = newton_step(sol.Q, TQ, sol.ccp);
        Eigen::VectorXd TQn;
        CCPMatrix Pn;
        apply(Qn, TQn, Pn);
        const double rn = (TQn - Qn).lpNorm<Eigen::Infinity>();
        if (rn <= sol.residual) {
            sol.Q = std::move(Qn);
            sol.ccp = std::move(Pn);
            sol.residual = rn;
            ++sol.newton;
        }
    }
    return sol;
}

// a warm start left over from a distant point can stall the solver, so fall back to a cold start
template <class Apply>
EmaxSolution solve_warm_or_cold(const DDCModel& model, Apply&& apply, const SolverConfig& cfg,
                                const Eigen::VectorXd* warm) {
    if (!warm || warm->size() != model.K) return solve_hybrid(model, apply, cfg, nullptr);
    try {
        EmaxSolution s = solve_hybrid(model, apply, cfg, warm);
        if (s.converged) return s;
    } catch (const NumericalError&) {
    }
    EmaxSolution s = solve_hybrid(model, apply, cfg, nullptr);
    s.cold_restart = true;
    return s;
}

template <class Apply>
EmaxSolution solve_successive(const DDCModel& model, Apply&& apply, double tol, long max_iter) {
    EmaxSolution sol;
    sol.Q = Eigen::VectorXd::Zero(model.K);
    Eigen::VectorXd TQ;
    apply(sol.Q, TQ, sol.ccp);
    sol.residual = (TQ - sol.Q).lpNorm<Eigen::Infinity>();
    long it = 0;
    while (sol.residual > tol && it < max_iter) {
        sol.Q = TQ;
        apply(sol.Q, TQ, sol.ccp);
        sol.residual = (TQ - sol.Q).lpNorm<Eigen::Infinity>();
        ++it;
    }
    sol.successive = static_cast<int>(std::min<long>(it, std::numeric_limits<int>::max()));
    sol.converged = sol.residual <= tol;
    return sol;
}

}  // namespace

EmaxSolution solve_emax(const DDCModel& model, const GumbelMixture& mix, const SolverConfig& cfg,
                        const Eigen::VectorXd* warm) {
    return solve_warm_or_cold(
        model, [&](const Eigen::VectorXd& Q, Eigen::VectorXd& TQ, CCPMatrix& P) { emax_and_ccps(model, mix, Q, TQ, P); },
        cfg, warm);
}

EmaxSolution solve_logit(const DDCModel& model, const SolverConfig& cfg, const Eigen::VectorXd* warm) {
    return solve_warm_or_cold(
        model, [&](const Eigen::VectorXd& Q, Eigen::VectorXd& TQ, CCPMatrix& P) { logit_apply(model, Q, TQ, P); }, cfg,
        warm);
}

EmaxSolution solve_emax_successive(const DDCModel& model, const GumbelMixture& mix, double tol, long max_iter) {
    return solve_successive(
        model, [&](const Eigen::VectorXd& Q, Eigen::VectorXd& TQ, CCPMatrix& P) { emax_and_ccps(model, mix, Q, TQ, P); },
        tol, max_iter);
}

EmaxSolution solve_logit_successive(const DDCModel& model, double tol, long max_iter) {
    return solve_successive(
        model, [&](const Eigen::VectorXd& Q, Eigen::VectorXd& TQ, CCPMatrix& P) { logit_apply(model, Q, TQ, P); }, tol,
        max_iter);
}

std::pair<Eigen::VectorXd, CCPMatrix> logit_emax_and_ccps(const DDCModel& model, const SolverConfig& cfg) {
    EmaxSolution s = solve_logit(model, cfg);
    if (!s.converged) throw NumericalError("logit fixed point did not converge, residual " + std::to_string(s.residual));
    return {s.Q, s.ccp};
}

}  // namespace ddc
