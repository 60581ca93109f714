#include "ddc/likelihood.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <Eigen/SparseLU>

namespace ddc {

namespace {

constexpr double kLogSqrt2Pi = 0.91893853320467274178;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double normal_log_pdf(double x, double m, double s) {
    const double z = (x - m) / s;
    return -0.5 * z * z - std::log(s) - kLogSqrt2Pi;
}

// log-softmax of (alpha_1..alpha_{m-1}, 0)
Eigen::VectorXd log_weights(const Eigen::VectorXd& alpha_free) {
    const int m = static_cast<int>(alpha_free.size()) + 1;
    Eigen::VectorXd a(m);
    a.head(m - 1) = alpha_free;
    a(m - 1) = 0.0;
    const double mx = a.maxCoeff();
    const double lse = mx + std::log((a.array() - mx).exp().sum());
    return a.array() - lse;
}

Eigen::MatrixXd free_columns(const Eigen::MatrixXd& Z, const std::vector<int>& free_idx) {
    Eigen::MatrixXd out(Z.rows(), free_idx.size());
    for (std::size_t p = 0; p < free_idx.size(); ++p) out.col(p) = Z.col(free_idx[p]);
    return out;
}

void check_free_idx(const DDCModel& model, const std::vector<int>& free_idx) {
    for (int i : free_idx)
        if (i < 0 || i >= model.n_theta()) throw std::invalid_argument("free parameter index out of range");
}

// solves (I - T'(Q))^T y = lambda
Eigen::VectorXd adjoint_solve(const DDCModel& model, const CCPMatrix& ccp, const Eigen::VectorXd& lambda) {
    SparseRow I(model.K, model.K);
    I.setIdentity();
    Eigen::SparseMatrix<double> At = Eigen::SparseMatrix<double>((I - bellman_jacobian(model, ccp)).transpose());
    At.makeCompressed();
    thread_local PatternLU lu;
    if (!lu.factorize(At)) throw NumericalError("singular I - T'(Q) in the gradient solve");
    return lu.solve(lambda);
}

}  // namespace

double NormalMixture1D::log_pdf(double x) const {
    double mx = kNegInf;
    std::vector<double> l(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
        l[i] = std::log(w[i]) + normal_log_pdf(x, mean[i], sd[i]);
        mx = std::max(mx, l[i]);
    }
    if (!std::isfinite(mx)) return kNegInf;
    double s = 0.0;
    for (double v : l) s += std::exp(v - mx);
    return mx + std::log(s);
}

double NormalMixture1D::dlog_pdf(double x) const {
    const double lp = log_pdf(x);
    double g = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double r = std::exp(std::log(w[i]) + normal_log_pdf(x, mean[i], sd[i]) - lp);
        g -= r * (x - mean[i]) / (sd[i] * sd[i]);
    }
    return g;
}

double NormalMixture1D::cdf(double x) const {
    double c = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) c += w[i] * normal_cdf((x - mean[i]) / sd[i]);
    return c;
}

double NormalMixture1D::sample(Rng& rng) const {
    std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
    const std::size_t i = pick(rng);
    return mean[i] + sd[i] * standard_normal(rng);
}

void NormalMixture1D::validate() const {
    if (w.empty() || w.size() != mean.size() || w.size() != sd.size())
        throw std::invalid_argument("normal mixture: mismatched or empty arrays");
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (!(w[i] > 0.0) || !(sd[i] > 0.0) || !std::isfinite(mean[i]))
            throw std::invalid_argument("normal mixture: weights and sds must be positive");
        s += w[i];
    }
    if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("normal mixture: weights must sum to one");
}

double PriorConfig::log_m_weight(int m) const {
    if (m < 1) return kNegInf;
    const double lm = std::log(static_cast<double>(m));
    return -A_m * m * std::pow(lm, tau);
}

std::vector<double> PriorConfig::m_pmf() const {
    std::vector<double> p(m_max);
    double mx = kNegInf;
    for (int m = 1; m <= m_max; ++m) mx = std::max(mx, log_m_weight(m));
    double s = 0.0;
    for (int m = 1; m <= m_max; ++m) s += p[m - 1] = std::exp(log_m_weight(m) - mx);
    for (double& v : p) v /= s;
    return p;
}

void PriorConfig::validate() const {
    if (!(a_bar > 0.0)) throw std::invalid_argument("prior: a_bar must be positive");
    if (!(A_m > 0.0)) throw std::invalid_argument("prior: A_m must be positive");
    if (!(tau >= 0.0)) throw std::invalid_argument("prior: tau must be nonnegative");
    if (m_max < 1) throw std::invalid_argument("prior: m_max must be at least 1");
    mu_prior.validate();
    log_comp_scale_prior.validate();
    log_scale_prior.validate();
    for (const auto& t : theta_prior) t.validate();
}

Eigen::VectorXd softmax_weights(const Eigen::VectorXd& alpha_free) { return log_weights(alpha_free).array().exp(); }

GumbelMixture untransform(const Eigen::VectorXd& chi, const ParamLayout& L) {
    if (chi.size() != L.size()) throw std::invalid_argument("chi has the wrong length for m");
    GumbelMixture g;
    g.scale = std::exp(chi(L.log_scale()));
    g.weights = softmax_weights(chi.segment(L.alpha(0), L.m - 1));
    g.mu.resize(L.m, L.J);
    g.comp_scale.resize(L.m);
    for (int k = 0; k < L.m; ++k) {
        for (int j = 0; j < L.J; ++j) g.mu(k, j) = chi(L.mu(k, j));
        g.comp_scale(k) = std::exp(chi(L.log_comp_scale(k)));
    }
    return g;
}

Eigen::VectorXd transform(const Eigen::VectorXd& theta_free, const GumbelMixture& mix) {
    mix.validate();
    const ParamLayout L{static_cast<int>(theta_free.size()), mix.dim(), mix.m()};
    Eigen::VectorXd chi(L.size());
    chi.head(L.F) = theta_free;
    chi(L.log_scale()) = std::log(mix.scale);
    const double lm = std::log(mix.weights(L.m - 1));
    for (int l = 0; l + 1 < L.m; ++l) chi(L.alpha(l)) = std::log(mix.weights(l)) - lm;
    for (int k = 0; k < L.m; ++k) {
        for (int j = 0; j < L.J; ++j) chi(L.mu(k, j)) = mix.mu(k, j);
        chi(L.log_comp_scale(k)) = std::log(mix.comp_scale(k));
    }
    return chi;
}

double log_likelihood(const PanelCounts& counts, const CCPMatrix& ccp) {
    if (counts.n.rows() != ccp.rows() || counts.n.cols() != ccp.cols())
        throw std::invalid_argument("counts and CCP dimensions differ");
    double L = 0.0;
    for (int x = 0; x < ccp.rows(); ++x)
        for (int d = 0; d < ccp.cols(); ++d) {
            const double n = counts.n(x, d);
            if (n <= 0.0) continue;
            if (ccp(x, d) <= 0.0) return kNegInf;
            L += n * std::log(ccp(x, d));
        }
    return L;
}

double log_prior(const PriorConfig& prior, const ChainState& s, int F, int J, Eigen::VectorXd* grad) {
    const ParamLayout L{F, J, s.m};
    if (s.chi.size() != L.size()) throw std::invalid_argument("chi has the wrong length for m");
    if (grad) grad->setZero(L.size());
    if (s.m < 1 || s.m > prior.m_max) return kNegInf;
    const auto pmf = prior.m_pmf();
    double lp = std::log(pmf[s.m - 1]);

    if (!prior.theta_prior.empty()) {
        if (static_cast<int>(prior.theta_prior.size()) != F)
            throw std::invalid_argument("theta prior count differs from the free parameter count");
        for (int p = 0; p < F; ++p) {
            lp += prior.theta_prior[p].log_pdf(s.chi(p));
            if (grad) (*grad)(p) = prior.theta_prior[p].dlog_pdf(s.chi(p));
        }
    }
    const double ls = s.chi(L.log_scale());
    lp += prior.log_scale_prior.log_pdf(ls);
    if (grad) (*grad)(L.log_scale()) = prior.log_scale_prior.dlog_pdf(ls);

    for (int k = 0; k < s.m; ++k) {
        for (int j = 0; j < J; ++j) {
            const double x = s.chi(L.mu(k, j));
            lp += prior.mu_prior.log_pdf(x);
            if (grad) (*grad)(L.mu(k, j)) = prior.mu_prior.dlog_pdf(x);
        }
        const double c = s.chi(L.log_comp_scale(k));
        lp += prior.log_comp_scale_prior.log_pdf(c);
        if (grad) (*grad)(L.log_comp_scale(k)) = prior.log_comp_scale_prior.dlog_pdf(c);
    }

    if (s.m > 1) {
        // Dirichlet(a/m) on omega plus the softmax Jacobian
        const int m = s.m, n = m - 1;
        const double a = prior.a_bar / m;
        const Eigen::VectorXd lw = log_weights(s.chi.segment(L.alpha(0), n));
        const Eigen::VectorXd w = lw.array().exp();
        lp += std::lgamma(prior.a_bar) - m * std::lgamma(a) + (a - 1.0) * lw.sum();

        // det(d omega_{1..m-1} / d alpha) = prod_k omega_k
        lp += lw.sum();
        if (grad)
            for (int l = 0; l < n; ++l) (*grad)(L.alpha(l)) = a * (1.0 - m * w(l));
    }
    return lp;
}

LikelihoodGradient loglik_gradient_natural(const DDCModel& model, const GumbelMixture& mix, const PanelCounts& counts,
                                           const EmaxSolution& sol, const std::vector<int>& free_idx) {
    check_free_idx(model, free_idx);
    const int K = model.K, J = model.J, m = mix.m(), F = static_cast<int>(free_idx.size());
    const int nA = J + 1;
    LikelihoodGradient out;
    out.value = log_likelihood(counts, sol.ccp);
    out.d_theta.setZero(F);
    out.d_weights.setZero(m);
    out.d_mu.setZero(m * J);
    out.d_sigma.setZero(m);
    if (!std::isfinite(out.value)) {
        const double nan = std::numeric_limits<double>::quiet_NaN();
        out.d_theta.setConstant(nan);
        out.d_weights.setConstant(nan);
        out.d_mu.setConstant(nan);
        out.d_sigma.setConstant(nan);
        return out;
    }

    std::vector<Eigen::MatrixXd> Zf(nA);
    for (int d = 0; d < nA; ++d) Zf[d] = free_columns(model.Z[d], free_idx);
    const Eigen::MatrixXd V = choice_values(model, sol.Q);
    const Eigen::MatrixXd muT = mix.mu.transpose();

    // dT_x / d(weights, mu, sigma), one row per state
    const int nN = m + m * J + m;
    Eigen::MatrixXd dT(K, nN);
    Eigen::MatrixXd W(K, nA);  // w_x = M_x^T c_x, M_x = dp_x / dv_x
    std::vector<double> s(J), zt(J), vx(nA);
    Eigen::MatrixXd M(nA, nA), dp(nA, nN);
    Eigen::VectorXd c(nA);

    for (int x = 0; x < K; ++x) {
        for (int d = 0; d < nA; ++d) {
            vx[d] = V(x, d);
            const double n = counts.n(x, d);
            c(d) = n > 0.0 ? n / sol.ccp(x, d) : 0.0;
        }
        M.setZero();
        dp.setZero();
        dT.row(x).setZero();
        for (int k = 0; k < m; ++k) {
            const double w = mix.weights(k);
            const double sk = mix.sigma(k);
            const ComponentEval e = eval_component(vx.data(), J, muT.col(k).data(), sk, s.data(), zt.data());
            const int iw = k, imu = m + k * J, isg = m + m * J + k;

            // d p0
            M(0, 0) += w * e.g / sk;
            for (int j = 0; j < J; ++j) {
                const double dv = -w * e.g * s[j] / sk;
                M(0, j + 1) += dv;
                dp(0, imu + j) += dv;
            }
            dp(0, iw) += e.p0;
            dp(0, isg) += w * e.g * e.sbar / sk;
            // d p_d, d >= 1
            for (int d = 0; d < J; ++d) {
                const double sd = s[d];
                M(d + 1, 0) += -w * sd * e.g / sk;
                for (int j = 0; j < J; ++j) {
                    const double dv = w * (sd * ((d == j) - s[j]) * e.om_p0 + sd * e.g * s[j]) / sk;
                    M(d + 1, j + 1) += dv;
                    dp(d + 1, imu + j) += dv;
                }
                dp(d + 1, iw) += sd * e.om_p0;
                dp(d + 1, isg) += w * (-sd * (zt[d] - e.sbar) * e.om_p0 - sd * e.g * e.sbar) / sk;
            }
            // d T
            dT(x, iw) = e.E;
            for (int j = 0; j < J; ++j) dT(x, imu + j) = w * s[j] * e.om_p0;
            dT(x, isg) = w * (e.rpe - e.om_p0 * e.sbar);
        }
        W.row(x) = (M.transpose() * c).transpose();
        const Eigen::VectorXd direct = dp.transpose() * c;
        out.d_weights += direct.head(m);
        out.d_mu += direct.segment(m, m * J);
        out.d_sigma += direct.tail(m);
        for (int d = 0; d < nA; ++d) out.d_theta += W(x, d) * Zf[d].row(x).transpose();
    }

    Eigen::VectorXd lambda = Eigen::VectorXd::Zero(K);
    for (int d = 0; d < nA; ++d) lambda += model.beta * (model.G[d].transpose() * W.col(d));
    const Eigen::VectorXd y = adjoint_solve(model, sol.ccp, lambda);

    const Eigen::VectorXd yB = dT.transpose() * y;
    out.d_weights += yB.head(m);
    out.d_mu += yB.segment(m, m * J);
    out.d_sigma += yB.tail(m);
    for (int d = 0; d < nA; ++d) out.d_theta += Zf[d].transpose() * (y.array() * sol.ccp.col(d).array()).matrix();
    return out;
}

LikelihoodGradient logit_loglik_gradient(const DDCModel& model, const PanelCounts& counts, const EmaxSolution& sol,
                                         const std::vector<int>& free_idx) {
    check_free_idx(model, free_idx);
    const int K = model.K, nA = model.J + 1, F = static_cast<int>(free_idx.size());
    LikelihoodGradient out;
    out.value = log_likelihood(counts, sol.ccp);
    out.d_theta.setZero(F);
    if (!std::isfinite(out.value)) {
        out.d_theta.setConstant(std::numeric_limits<double>::quiet_NaN());
        return out;
    }
    const Eigen::VectorXd N = counts.n.rowwise().sum();
    Eigen::MatrixXd W(K, nA);
    for (int d = 0; d < nA; ++d) W.col(d) = counts.n.col(d).array() - sol.ccp.col(d).array() * N.array();

    Eigen::VectorXd lambda = Eigen::VectorXd::Zero(K);
    for (int d = 0; d < nA; ++d) lambda += model.beta * (model.G[d].transpose() * W.col(d));
    const Eigen::VectorXd y = adjoint_solve(model, sol.ccp, lambda);
    for (int d = 0; d < nA; ++d) {
        const Eigen::MatrixXd Zf = free_columns(model.Z[d], free_idx);
        out.d_theta += Zf.transpose() * (W.col(d) + (y.array() * sol.ccp.col(d).array()).matrix());
    }
    return out;
}

PosteriorEvaluator::PosteriorEvaluator(const Problem& p) : prob_(p), model_(p.model) {
    check_free_idx(p.model, p.free_idx);
    if (!p.likelihood_off) {
        if (p.counts.n.rows() != p.model.K || p.counts.n.cols() != p.model.J + 1)
            throw std::invalid_argument("counts do not match the model dimensions");
    }
    p.prior.validate();
}

DDCModel PosteriorEvaluator::model_at(const Eigen::VectorXd& chi) const {
    DDCModel m = prob_.model;
    for (int p = 0; p < prob_.F(); ++p) m.theta(prob_.free_idx[p]) = chi(p);
    return m;
}

PosteriorValue PosteriorEvaluator::evaluate(const ChainState& s, bool want_grad) {
    ++evaluations;
    const ParamLayout L = prob_.layout(s.m);
    PosteriorValue out;
    Eigen::VectorXd gp;
    out.log_prior = log_prior(prob_.prior, s, L.F, L.J, want_grad ? &gp : nullptr);
    out.grad = want_grad ? gp : Eigen::VectorXd();
    if (prob_.likelihood_off || !std::isfinite(out.log_prior)) {
        out.log_post = out.log_prior;
        if (want_grad) out.grad_lik = Eigen::VectorXd::Zero(L.size());
        return out;
    }

    for (int p = 0; p < L.F; ++p) model_.theta(prob_.free_idx[p]) = s.chi(p);
    const GumbelMixture mix = untransform(s.chi, L);
    out.sol = solve_emax(model_, mix, prob_.solver, warm_start.size() == model_.K ? &warm_start : nullptr);
    if (!out.sol.converged)
        throw NumericalError("Emax solve did not converge, residual " + std::to_string(out.sol.residual));
    warm_start = out.sol.Q;

    if (!want_grad) {
        out.log_lik = log_likelihood(prob_.counts, out.sol.ccp);
        out.log_post = out.log_lik + out.log_prior;
        return out;
    }
    const LikelihoodGradient g = loglik_gradient_natural(model_, mix, prob_.counts, out.sol, prob_.free_idx);
    out.log_lik = g.value;
    out.log_post = out.log_lik + out.log_prior;

    Eigen::VectorXd gl(L.size());
    gl.head(L.F) = g.d_theta;
    double dls = 0.0;
    for (int k = 0; k < s.m; ++k) {
        dls += mix.sigma(k) * g.d_sigma(k);
        for (int j = 0; j < L.J; ++j) gl(L.mu(k, j)) = g.d_mu(k * L.J + j);
        gl(L.log_comp_scale(k)) = mix.sigma(k) * g.d_sigma(k);
    }
    gl(L.log_scale()) = dls;
    const double wg = mix.weights.dot(g.d_weights);
    for (int l = 0; l + 1 < s.m; ++l) gl(L.alpha(l)) = mix.weights(l) * (g.d_weights(l) - wg);
    out.grad += gl;
    out.grad_lik = std::move(gl);
    return out;
}

PosteriorValue grad_log_posterior(const Problem& p, const ChainState& s) {
    PosteriorEvaluator ev(p);
    return ev.evaluate(s, true);
}

ChainState sample_prior(const PriorConfig& prior, const Eigen::VectorXd& theta_free, int J, int m, Rng& rng) {
    const ParamLayout L{static_cast<int>(theta_free.size()), J, m};
    ChainState s;
    s.m = m;
    s.chi.resize(L.size());
    for (int p = 0; p < L.F; ++p)
        s.chi(p) = prior.theta_prior.empty() ? theta_free(p) : prior.theta_prior[p].sample(rng);
    s.chi(L.log_scale()) = prior.log_scale_prior.sample(rng);
    std::gamma_distribution<double> gam(prior.a_bar / m, 1.0);
    std::vector<double> lg(m);
    for (int k = 0; k < m; ++k) {
        double g = gam(rng);
        while (g <= 0.0) g = gam(rng);
        lg[k] = std::log(g);
    }
    for (int l = 0; l + 1 < m; ++l) s.chi(L.alpha(l)) = lg[l] - lg[m - 1];
    for (int k = 0; k < m; ++k) {
        for (int j = 0; j < J; ++j) s.chi(L.mu(k, j)) = prior.mu_prior.sample(rng);
        s.chi(L.log_comp_scale(k)) = prior.log_comp_scale_prior.sample(rng);
    }
    return s;
}

namespace {

struct LogitObjective {
    const PanelCounts& counts;
    DDCModel model;
    const std::vector<int>& free_idx;
    SolverConfig solver;
    Eigen::VectorXd warm;

    // negative log-likelihood; +inf when the solve fails
    double eval(const Eigen::VectorXd& th, Eigen::VectorXd* grad) {
        for (std::size_t p = 0; p < free_idx.size(); ++p) model.theta(free_idx[p]) = th(p);
        try {
            const EmaxSolution sol = solve_logit(model, solver, warm.size() == model.K ? &warm : nullptr);
            if (!sol.converged) return std::numeric_limits<double>::infinity();
            const LikelihoodGradient g = logit_loglik_gradient(model, counts, sol, free_idx);
            if (!std::isfinite(g.value)) return std::numeric_limits<double>::infinity();
            warm = sol.Q;
            if (grad) *grad = -g.d_theta;
            return -g.value;
        } catch (const NumericalError&) {
            return std::numeric_limits<double>::infinity();
        }
    }

    Eigen::MatrixXd hessian(const Eigen::VectorXd& th) {
        const int F = static_cast<int>(th.size());
        Eigen::MatrixXd H(F, F);
        for (int i = 0; i < F; ++i) {
            const double h = 1e-5 * std::max(1.0, std::abs(th(i)));
            Eigen::VectorXd a = th, b = th, ga, gb;
            a(i) += h;
            b(i) -= h;
            if (!std::isfinite(eval(a, &ga)) || !std::isfinite(eval(b, &gb)))
                throw NumericalError("Hessian evaluation failed");
            H.col(i) = (ga - gb) / (2 * h);
        }
        return 0.5 * (H + H.transpose());
    }
};

struct BfgsOutcome {
    Eigen::VectorXd x;
    double f = 0.0;
    int iterations = 0;
    bool converged = false;
    std::string trace;
};

BfgsOutcome bfgs(LogitObjective& obj, Eigen::VectorXd x, const LogitMleConfig& cfg) {
    BfgsOutcome out;
    std::ostringstream trace;
    const int F = static_cast<int>(x.size());
    Eigen::VectorXd g;
    double f = obj.eval(x, &g);
    if (!std::isfinite(f)) {
        out.f = f;
        out.x = x;
        out.trace = "objective not finite at the start";
        return out;
    }
    Eigen::MatrixXd Hinv = Eigen::MatrixXd::Identity(F, F);
    try {
        const Eigen::MatrixXd H = obj.hessian(x);
        Eigen::LLT<Eigen::MatrixXd> llt(H);
        if (llt.info() == Eigen::Success) Hinv = llt.solve(Eigen::MatrixXd::Identity(F, F));
    } catch (const NumericalError&) {
    }
    for (int it = 0; it < cfg.max_iter; ++it) {
        out.iterations = it;
        Eigen::VectorXd dir = -Hinv * g;
        double slope = g.dot(dir);
        if (!(slope < 0.0)) {
            Hinv.setIdentity();
            dir = -g;
            slope = -g.squaredNorm();
        }
        const double decrement = -slope;
        trace << "it " << it << " f " << f << " dec " << decrement << "\n";
        if (decrement < cfg.tol) {
            out.converged = true;
            break;
        }
        double step = 1.0;
        Eigen::VectorXd xn, gn;
        double fn = std::numeric_limits<double>::infinity();
        for (int ls = 0; ls < 60; ++ls) {
            xn = x + step * dir;
            fn = obj.eval(xn, &gn);
            if (std::isfinite(fn) && fn <= f + 1e-4 * step * slope) break;
            step *= 0.5;
        }
        if (!std::isfinite(fn) || fn > f + 1e-4 * step * slope) {
            trace << "line search failed\n";
            break;
        }
        const Eigen::VectorXd sv = xn - x, yv = gn - g;
        const double sy = sv.dot(yv);
        if (sy > 1e-12 * sv.norm() * yv.norm()) {
            const double rho = 1.0 / sy;
            const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(F, F);
            Hinv = (I - rho * sv * yv.transpose()) * Hinv * (I - rho * yv * sv.transpose()) + rho * sv * sv.transpose();
        }
        x = xn;
        f = fn;
        g = gn;
    }
    out.x = x;
    out.f = f;
    out.trace = trace.str();
    return out;
}

}  // namespace

LogitMleResult logit_mle(const PanelCounts& counts, const DDCModel& model, const std::vector<int>& free_idx,
                         const LogitMleConfig& cfg) {
    check_free_idx(model, free_idx);
    if (free_idx.empty()) throw std::invalid_argument("logit MLE needs at least one free parameter");
    counts.validate();
    const int F = static_cast<int>(free_idx.size());
    LogitObjective obj{counts, model, free_idx, cfg.solver, {}};
    Eigen::VectorXd x0(F);
    for (int p = 0; p < F; ++p) x0(p) = model.theta(free_idx[p]);

    Rng rng(cfg.seed);
    BfgsOutcome best;
    best.f = std::numeric_limits<double>::infinity();
    std::string traces;
    for (int s = 0; s < std::max(1, cfg.starts); ++s) {
        Eigen::VectorXd start = x0;
        if (s > 0)
            for (int p = 0; p < F; ++p) start(p) += cfg.jitter * std::max(std::abs(x0(p)), 0.1) * standard_normal(rng);
        obj.warm.resize(0);
        BfgsOutcome r = bfgs(obj, start, cfg);
        traces += "start " + std::to_string(s) + ":\n" + r.trace;
        if (r.converged && r.f < best.f) best = std::move(r);
    }
    if (!best.converged) throw NumericalError("logit MLE did not converge\n" + traces);

    LogitMleResult res;
    res.theta_free = best.x;
    res.theta_full = model.theta;
    for (int p = 0; p < F; ++p) res.theta_full(free_idx[p]) = best.x(p);
    res.log_lik = -best.f;
    res.iterations = best.iterations;
    res.converged = true;
    obj.warm.resize(0);
    const Eigen::MatrixXd H = obj.hessian(best.x);
    Eigen::LLT<Eigen::MatrixXd> llt(H);
    if (llt.info() != Eigen::Success) throw NumericalError("negative Hessian is not positive definite at the MLE");
    res.cov = llt.solve(Eigen::MatrixXd::Identity(F, F));
    return res;
}

FunctionalCI delta_method_ci(double value, const Eigen::VectorXd& grad, const Eigen::MatrixXd& cov, double level) {
    if (!(level > 0.0 && level < 1.0)) throw std::domain_error("confidence level must lie in (0,1)");
    FunctionalCI ci;
    ci.value = value;
    ci.se = std::sqrt(std::max(0.0, grad.dot(cov * grad)));
    const double z = normal_quantile(0.5 + 0.5 * level);
    ci.ci = {value - z * ci.se, value + z * ci.se};
    return ci;
}

FunctionalCI delta_method(const std::function<double(const Eigen::VectorXd&)>& fn, const LogitMleResult& mle,
                          const std::vector<int>& free_idx, double level) {
    const int F = static_cast<int>(free_idx.size());
    Eigen::VectorXd g(F);
    for (int p = 0; p < F; ++p) {
        const int i = free_idx[p];
        const double h = 1e-5 * std::max(1.0, std::abs(mle.theta_full(i)));
        Eigen::VectorXd a = mle.theta_full, b = mle.theta_full;
        a(i) += h;
        b(i) -= h;
        g(p) = (fn(a) - fn(b)) / (2 * h);
    }
    return delta_method_ci(fn(mle.theta_full), g, mle.cov, level);
}

}  // namespace ddc
