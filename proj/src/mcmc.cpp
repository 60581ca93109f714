#include "ddc/mcmc.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "ddc/numerics.hpp"

namespace ddc {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kLog2Pi = 1.83787706640934548356;

double safe_eval(const LogTarget& f, const Eigen::VectorXd& x, Eigen::VectorXd* g) {
    try {
        const double v = f(x, g);
        if (!std::isfinite(v) || (g && !g->allFinite())) return kNegInf;
        return v;
    } catch (const NumericalError&) {
        return kNegInf;
    }
}

}  // namespace

HMCResult hmc_step(const LogTarget& target, const Eigen::VectorXd& x, double logp, const Eigen::VectorXd& grad,
                   const HMCParams& p, Rng& rng) {
    if (!std::isfinite(logp)) throw std::invalid_argument("hmc_step: current log density is not finite");
    if (!(p.step > 0.0) || p.leapfrog < 1) throw std::invalid_argument("hmc_step: need step > 0 and leapfrog >= 1");
    const int n = static_cast<int>(x.size());
    const Eigen::VectorXd im = p.inv_mass.size() == n ? p.inv_mass : Eigen::VectorXd::Ones(n);

    Eigen::VectorXd r(n);
    for (int i = 0; i < n; ++i) r(i) = standard_normal(rng) / std::sqrt(im(i));
    const double eps = p.step * (1.0 + p.jitter * (2.0 * uniform_open(rng) - 1.0));
    const double h0 = -logp + 0.5 * r.dot(im.cwiseProduct(r));

    HMCResult out;
    out.x = x;
    out.logp = logp;
    out.grad = grad;
    Eigen::VectorXd q = x, g = grad;
    double lq = logp;
    r += 0.5 * eps * g;
    for (int l = 0; l < p.leapfrog; ++l) {
        q += eps * im.cwiseProduct(r);
        lq = safe_eval(target, q, &g);
        if (!std::isfinite(lq)) {
            out.divergent = true;
            break;
        }
        if (l + 1 < p.leapfrog) r += eps * g;
    }
    const double u = uniform_open(rng);
    if (out.divergent) return out;
    r += 0.5 * eps * g;
    const double h1 = -lq + 0.5 * r.dot(im.cwiseProduct(r));
    out.energy_error = h1 - h0;
    out.accept_prob = std::isfinite(out.energy_error) ? std::min(1.0, std::exp(-out.energy_error)) : 0.0;
    if (u < out.accept_prob) {
        out.accepted = true;
        out.x = q;
        out.logp = lq;
        out.grad = g;
    }
    return out;
}

DualAveraging::DualAveraging(double step0, double target) : target_(target) { restart(step0); }

void DualAveraging::restart(double step0) {
    mu_ = std::log(10.0 * step0);
    h_bar_ = 0.0;
    log_step_ = std::log(step0);
    log_step_bar_ = std::log(step0);
    t_ = 0;
}

double DualAveraging::update(double a) {
    constexpr double gamma = 0.05, t0 = 10.0, kappa = 0.75;
    ++t_;
    const double eta = 1.0 / (t_ + t0);
    h_bar_ = (1.0 - eta) * h_bar_ + eta * (target_ - a);
    log_step_ = mu_ - std::sqrt(static_cast<double>(t_)) / gamma * h_bar_;
    const double w = std::pow(static_cast<double>(t_), -kappa);
    log_step_bar_ = w * log_step_ + (1.0 - w) * log_step_bar_;
    return std::exp(log_step_);
}

nlohmann::json DualAveraging::to_json() const {
    return {{"target", target_}, {"mu", mu_}, {"h_bar", h_bar_}, {"log_step", log_step_},
            {"log_step_bar", log_step_bar_}, {"t", t_}};
}

void DualAveraging::from_json(const nlohmann::json& j) {
    target_ = j.at("target");
    mu_ = j.at("mu");
    h_bar_ = j.at("h_bar");
    log_step_ = j.at("log_step");
    log_step_bar_ = j.at("log_step_bar");
    t_ = j.at("t");
}

// ---------------------------------------------------------------- reversible jump

ExpandedState expand(const ChainState& s, double S, const Problem& p) {
    const ParamLayout L = p.layout(s.m);
    ExpandedState e;
    e.s = s;
    Eigen::VectorXd a(s.m);
    a.head(s.m - 1) = s.chi.segment(L.alpha(0), s.m - 1);
    a(s.m - 1) = 0.0;
    const double mx = a.maxCoeff();
    const double lse = mx + std::log((a.array() - mx).exp().sum());
    e.log_gamma = (a.array() - lse + std::log(S)).matrix();
    e.s = collapse(e, p);
    return e;
}

ChainState collapse(const ExpandedState& e, const Problem& p) {
    ChainState s = e.s;
    const ParamLayout L = p.layout(s.m);
    for (int l = 0; l + 1 < s.m; ++l) s.chi(L.alpha(l)) = e.log_gamma(l) - e.log_gamma(s.m - 1);
    return s;
}

double rj_log_target(PosteriorEvaluator& ev, const ExpandedState& e) {
    const Problem& p = ev.problem();
    const PriorConfig& pr = p.prior;
    const int m = e.s.m;
    if (m < 1 || m > pr.m_max) return kNegInf;
    const ParamLayout L = p.layout(m);
    const ChainState s = collapse(e, p);
    double t = std::log(pr.m_pmf()[m - 1]);
    if (!pr.theta_prior.empty())
        for (int i = 0; i < L.F; ++i) t += pr.theta_prior[i].log_pdf(s.chi(i));
    t += pr.log_scale_prior.log_pdf(s.chi(L.log_scale()));
    const double a = pr.a_bar / m;
    for (int k = 0; k < m; ++k) {
        for (int j = 0; j < L.J; ++j) t += pr.mu_prior.log_pdf(s.chi(L.mu(k, j)));
        t += pr.log_comp_scale_prior.log_pdf(s.chi(L.log_comp_scale(k)));
        const double lg = e.log_gamma(k);
        t += a * lg - std::exp(lg) - std::lgamma(a);
    }
    if (!std::isfinite(t) || p.likelihood_off) return t;
    try {
        const PosteriorValue v = ev.evaluate(s, false);
        return t + v.log_lik;
    } catch (const NumericalError&) {
        return kNegInf;
    }
}

ExpandedState add_component(const ExpandedState& e, const Eigen::VectorXd& psi, const Problem& p) {
    const int m = e.s.m, J = p.J();
    if (psi.size() != J + 2) throw std::invalid_argument("new component needs J+2 coordinates");
    const ParamLayout Lo = p.layout(m), Ln = p.layout(m + 1);
    ExpandedState out;
    out.s.m = m + 1;
    out.s.chi.setZero(Ln.size());
    out.s.chi.head(Lo.F + 1) = e.s.chi.head(Lo.F + 1);
    for (int k = 0; k < m; ++k) {
        for (int j = 0; j < J; ++j) out.s.chi(Ln.mu(k, j)) = e.s.chi(Lo.mu(k, j));
        out.s.chi(Ln.log_comp_scale(k)) = e.s.chi(Lo.log_comp_scale(k));
    }
    for (int j = 0; j < J; ++j) out.s.chi(Ln.mu(m, j)) = psi(j);
    out.s.chi(Ln.log_comp_scale(m)) = psi(J);
    out.log_gamma.resize(m + 1);
    out.log_gamma.head(m) = e.log_gamma;
    out.log_gamma(m) = psi(J + 1);
    out.s = collapse(out, p);
    return out;
}

ExpandedState drop_last_component(const ExpandedState& e, const Problem& p) {
    const int m = e.s.m, J = p.J();
    if (m < 2) throw std::invalid_argument("cannot remove the only component");
    const ParamLayout Lo = p.layout(m), Ln = p.layout(m - 1);
    ExpandedState out;
    out.s.m = m - 1;
    out.s.chi.setZero(Ln.size());
    out.s.chi.head(Lo.F + 1) = e.s.chi.head(Lo.F + 1);
    for (int k = 0; k < m - 1; ++k) {
        for (int j = 0; j < J; ++j) out.s.chi(Ln.mu(k, j)) = e.s.chi(Lo.mu(k, j));
        out.s.chi(Ln.log_comp_scale(k)) = e.s.chi(Lo.log_comp_scale(k));
    }
    out.log_gamma = e.log_gamma.head(m - 1);
    out.s = collapse(out, p);
    return out;
}

double LaplaceProposal::log_density(const Eigen::VectorXd& psi, const PriorConfig& prior, int m_new) const {
    const int D = static_cast<int>(psi.size());
    if (fallback) {
        double l = 0.0;
        for (int j = 0; j < D - 2; ++j) l += prior.mu_prior.log_pdf(psi(j));
        l += prior.log_comp_scale_prior.log_pdf(psi(D - 2));
        const double a = prior.a_bar / m_new;
        l += a * psi(D - 1) - std::exp(psi(D - 1)) - std::lgamma(a);
        return l;
    }
    const Eigen::VectorXd z = chol.triangularView<Eigen::Lower>().solve(psi - mean);
    return -0.5 * z.squaredNorm() - chol.diagonal().array().log().sum() - 0.5 * D * kLog2Pi;
}

Eigen::VectorXd LaplaceProposal::draw(const PriorConfig& prior, int m_new, Rng& rng) const {
    const int D = static_cast<int>(mean.size());
    Eigen::VectorXd psi(D);
    if (fallback) {
        for (int j = 0; j < D - 2; ++j) psi(j) = prior.mu_prior.sample(rng);
        psi(D - 2) = prior.log_comp_scale_prior.sample(rng);
        std::gamma_distribution<double> g(prior.a_bar / m_new, 1.0);
        double v = g(rng);
        while (v <= 0.0) v = g(rng);
        psi(D - 1) = std::log(v);
        return psi;
    }
    Eigen::VectorXd z(D);
    for (int i = 0; i < D; ++i) z(i) = standard_normal(rng);
    return mean + chol * z;
}

namespace {

// log conditional posterior of the new component and its gradient in psi
double new_component_objective(PosteriorEvaluator& ev, const ExpandedState& reduced, const Eigen::VectorXd& psi,
                               Eigen::VectorXd* grad) {
    const Problem& p = ev.problem();
    const PriorConfig& pr = p.prior;
    const int J = p.J(), m1 = reduced.s.m + 1;
    const double a = pr.a_bar / m1;
    double f = 0.0;
    for (int j = 0; j < J; ++j) f += pr.mu_prior.log_pdf(psi(j));
    f += pr.log_comp_scale_prior.log_pdf(psi(J));
    f += a * psi(J + 1) - std::exp(psi(J + 1));
    if (grad) {
        grad->resize(J + 2);
        for (int j = 0; j < J; ++j) (*grad)(j) = pr.mu_prior.dlog_pdf(psi(j));
        (*grad)(J) = pr.log_comp_scale_prior.dlog_pdf(psi(J));
        (*grad)(J + 1) = a - std::exp(psi(J + 1));
    }
    if (p.likelihood_off) return f;
    const ExpandedState full = add_component(reduced, psi, p);
    const PosteriorValue v = ev.evaluate(full.s, grad != nullptr);
    if (!std::isfinite(v.log_lik)) return kNegInf;
    f += v.log_lik;
    if (grad) {
        const ParamLayout L = p.layout(m1);
        for (int j = 0; j < J; ++j) (*grad)(j) += v.grad_lik(L.mu(m1 - 1, j));
        (*grad)(J) += v.grad_lik(L.log_comp_scale(m1 - 1));
        // alpha_l = log gamma_l - log gamma_new for every l < m1
        double s = 0.0;
        for (int l = 0; l + 1 < m1; ++l) s += v.grad_lik(L.alpha(l));
        (*grad)(J + 1) -= s;
    }
    return f;
}

}  // namespace

LaplaceProposal laplace_proposal(PosteriorEvaluator& ev, const ExpandedState& reduced, int max_newton) {
    const Problem& p = ev.problem();
    const int J = p.J(), D = J + 2, m = reduced.s.m;
    const ParamLayout L = p.layout(m);
    LaplaceProposal q;
    q.mean.resize(D);
    q.chol = Eigen::MatrixXd::Identity(D, D);

    // cold solver start so the proposal depends on the reduced state only
    struct WarmGuard {
        PosteriorEvaluator& ev;
        Eigen::VectorXd saved;
        ~WarmGuard() { ev.warm_start = std::move(saved); }
    } guard{ev, std::move(ev.warm_start)};
    ev.warm_start.resize(0);

    // deterministic start from the reduced state
    const GumbelMixture mix = untransform(reduced.s.chi, L);
    const Eigen::VectorXd mbar = mixture_mean(mix);
    Eigen::VectorXd x(D);
    for (int j = 0; j < J; ++j) x(j) = mbar(j);
    double lcs = 0.0;
    for (int k = 0; k < m; ++k) lcs += reduced.s.chi(L.log_comp_scale(k));
    x(J) = lcs / m;
    const double mx = reduced.log_gamma.maxCoeff();
    x(J + 1) = mx + std::log((reduced.log_gamma.array() - mx).exp().sum() / m);

    auto eval = [&](const Eigen::VectorXd& y, Eigen::VectorXd* g) {
        try {
            const double f = new_component_objective(ev, reduced, y, g);
            if (!std::isfinite(f) || (g && !g->allFinite())) return kNegInf;
            return f;
        } catch (const NumericalError&) {
            return kNegInf;
        }
    };
    auto hessian = [&](const Eigen::VectorXd& y, Eigen::MatrixXd& H) {
        H.resize(D, D);
        for (int i = 0; i < D; ++i) {
            const double h = 1e-5 * std::max(1.0, std::abs(y(i)));
            Eigen::VectorXd a = y, b = y, ga, gb;
            a(i) += h;
            b(i) -= h;
            if (!std::isfinite(eval(a, &ga)) || !std::isfinite(eval(b, &gb))) return false;
            H.col(i) = (ga - gb) / (2 * h);
        }
        H = 0.5 * (H + H.transpose());
        return H.allFinite();
    };

    Eigen::VectorXd g;
    double f = eval(x, &g);
    bool ok = false;
    Eigen::MatrixXd H;
    if (std::isfinite(f)) {
        for (int it = 0; it < max_newton; ++it) {
            q.newton_iterations = it + 1;
            if (!hessian(x, H)) break;
            Eigen::LLT<Eigen::MatrixXd> llt(-H);
            const bool concave = llt.info() == Eigen::Success;
            if (concave && g.lpNorm<Eigen::Infinity>() < 1e-6) {
                ok = true;
                break;
            }
            // Levenberg-damped Newton direction with backtracking
            Eigen::MatrixXd A = -H;
            double lam = 0.0;
            Eigen::LLT<Eigen::MatrixXd> damped(A);
            while (damped.info() != Eigen::Success) {
                lam = lam == 0.0 ? 1e-3 * std::max(1.0, A.diagonal().cwiseAbs().maxCoeff()) : 10 * lam;
                damped.compute(A + lam * Eigen::MatrixXd::Identity(D, D));
                if (lam > 1e12) break;
            }
            if (damped.info() != Eigen::Success) break;
            const Eigen::VectorXd dir = damped.solve(g);
            double step = 1.0, fn = kNegInf;
            Eigen::VectorXd xn, gn;
            for (int ls = 0; ls < 40; ++ls) {
                xn = x + step * dir;
                fn = eval(xn, &gn);
                if (std::isfinite(fn) && fn >= f + 1e-4 * step * g.dot(dir)) break;
                step *= 0.5;
            }
            if (!std::isfinite(fn)) break;
            if (fn < f) break;
            x = xn;
            f = fn;
            g = gn;
        }
    }
    if (ok) {
        const Eigen::MatrixXd cov = (-H).llt().solve(Eigen::MatrixXd::Identity(D, D));
        Eigen::LLT<Eigen::MatrixXd> c(cov);
        if (c.info() == Eigen::Success && cov.allFinite()) {
            q.mean = x;
            q.chol = c.matrixL();
            return q;
        }
    }
    q.fallback = true;
    q.mean = x;
    return q;
}

double rj_log_ratio_birth(PosteriorEvaluator& ev, const ExpandedState& e, const Eigen::VectorXd& psi,
                          const LaplaceProposal& q) {
    const Problem& p = ev.problem();
    const ExpandedState up = add_component(e, psi, p);
    const double t1 = rj_log_target(ev, up);
    if (!std::isfinite(t1)) return kNegInf;
    return t1 - rj_log_target(ev, e) - q.log_density(psi, p.prior, e.s.m + 1);
}

double rj_log_ratio_death(PosteriorEvaluator& ev, const ExpandedState& e, const LaplaceProposal& q_reverse) {
    const Problem& p = ev.problem();
    const int m = e.s.m, J = p.J();
    const ParamLayout L = p.layout(m);
    const ExpandedState down = drop_last_component(e, p);
    Eigen::VectorXd psi(J + 2);
    for (int j = 0; j < J; ++j) psi(j) = e.s.chi(L.mu(m - 1, j));
    psi(J) = e.s.chi(L.log_comp_scale(m - 1));
    psi(J + 1) = e.log_gamma(m - 1);
    const double t0 = rj_log_target(ev, down);
    if (!std::isfinite(t0)) return kNegInf;
    return t0 - rj_log_target(ev, e) + q_reverse.log_density(psi, p.prior, m);
}

bool rj_step(PosteriorEvaluator& ev, ChainState& s, Rng& rng, RJStats& stats) {
    const Problem& p = ev.problem();
    const int m = s.m, J = p.J();
    std::gamma_distribution<double> gS(p.prior.a_bar, 1.0);
    double S = gS(rng);
    while (S <= 0.0) S = gS(rng);
    ExpandedState e = expand(s, S, p);

    // uniformly random relabeling
    std::vector<int> perm(m);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    {
        const ParamLayout L = p.layout(m);
        ExpandedState t = e;
        for (int k = 0; k < m; ++k) {
            const int src = perm[k];
            for (int j = 0; j < J; ++j) t.s.chi(L.mu(k, j)) = e.s.chi(L.mu(src, j));
            t.s.chi(L.log_comp_scale(k)) = e.s.chi(L.log_comp_scale(src));
            t.log_gamma(k) = e.log_gamma(src);
        }
        t.s = collapse(t, p);
        e = std::move(t);
    }
    s = e.s;

    const bool birth = uniform_open(rng) < 0.5;
    const double u = uniform_open(rng);
    if (birth) {
        if (m + 1 > p.prior.m_max) {
            stats.birth.record(false);
            return false;
        }
        const LaplaceProposal q = laplace_proposal(ev, e);
        if (q.fallback) ++stats.fallbacks;
        const Eigen::VectorXd psi = q.draw(p.prior, m + 1, rng);
        const double lr = rj_log_ratio_birth(ev, e, psi, q);
        if (!std::isfinite(lr)) ++stats.birth.failures;
        const bool ok = std::log(u) < lr;
        stats.birth.record(ok);
        if (ok) s = add_component(e, psi, p).s;
        return ok;
    }
    if (m == 1) {
        stats.death.record(false);
        return false;
    }
    const ExpandedState down = drop_last_component(e, p);
    const LaplaceProposal q = laplace_proposal(ev, down);
    if (q.fallback) ++stats.fallbacks;
    const double lr = rj_log_ratio_death(ev, e, q);
    if (!std::isfinite(lr)) ++stats.death.failures;
    const bool ok = std::log(u) < lr;
    stats.death.record(ok);
    if (ok) s = down.s;
    return ok;
}

// ---------------------------------------------------------------- draw store

std::vector<double> DrawStore::column(const std::string& name) const {
    std::vector<double> out;
    out.reserve(draws.size());
    if (name == "m" || name == "log_post" || name == "log_lik" || name == "iter") {
        for (const auto& d : draws)
            out.push_back(name == "m" ? d.m : name == "log_post" ? d.log_post : name == "log_lik" ? d.log_lik : d.iter);
        return out;
    }
    const auto it = std::find(derived_names.begin(), derived_names.end(), name);
    if (it == derived_names.end()) throw std::invalid_argument("no column named " + name);
    const std::size_t c = it - derived_names.begin();
    for (const auto& d : draws) out.push_back(d.derived.at(c));
    return out;
}

namespace {

std::string fmt(double v) {
    std::ostringstream o;
    o.precision(17);
    o << v;
    return o.str();
}

void write_rows(std::ostream& o, const DrawStore& st, std::size_t from) {
    for (std::size_t i = from; i < st.draws.size(); ++i) {
        const DrawRecord& d = st.draws[i];
        o << d.iter << ',' << d.m << ',' << fmt(d.log_post) << ',' << fmt(d.log_lik);
        for (double v : d.derived) o << ',' << fmt(v);
        o << ',';
        for (int k = 0; k < d.chi.size(); ++k) o << (k ? ";" : "") << fmt(d.chi(k));
        o << '\n';
    }
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) out.push_back(cur);
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

}  // namespace

void DrawStore::write_csv(const std::string& path) const {
    std::ofstream o(path);
    if (!o) throw std::runtime_error("cannot write " + path);
    o << "iter,m,log_post,log_lik";
    for (const auto& n : derived_names) o << ',' << n;
    o << ",chi\n";
    write_rows(o, *this, 0);
}

void DrawStore::append_csv(const std::string& path, std::size_t from) const {
    if (from == 0) {
        write_csv(path);
        return;
    }
    std::ofstream o(path, std::ios::app);
    if (!o) throw std::runtime_error("cannot append to " + path);
    write_rows(o, *this, from);
}

DrawStore DrawStore::read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty draw file " + path);
    const auto head = split(line, ',');
    if (head.size() < 5 || head[0] != "iter" || head[1] != "m" || head.back() != "chi")
        throw std::runtime_error("unexpected draw file header in " + path);
    DrawStore st;
    st.derived_names.assign(head.begin() + 4, head.end() - 1);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto f = split(line, ',');
        if (f.size() != head.size()) throw std::runtime_error("malformed draw row in " + path);
        DrawRecord d;
        d.iter = std::stol(f[0]);
        d.m = std::stoi(f[1]);
        d.log_post = std::stod(f[2]);
        d.log_lik = std::stod(f[3]);
        for (std::size_t c = 4; c + 1 < f.size(); ++c) d.derived.push_back(std::stod(f[c]));
        const auto cs = split(f.back(), ';');
        d.chi.resize(cs.size());
        for (std::size_t k = 0; k < cs.size(); ++k) d.chi(k) = std::stod(cs[k]);
        st.draws.push_back(std::move(d));
    }
    return st;
}

// ---------------------------------------------------------------- chain

namespace {

// coordinate class, used to carry tuned masses between component counts
struct CoordKey {
    int kind;  // 0 theta, 1 log scale, 2 alpha, 3 mu, 4 log comp scale
    int index;
    bool operator<(const CoordKey& o) const { return kind != o.kind ? kind < o.kind : index < o.index; }
};

std::vector<CoordKey> coord_keys(const ParamLayout& L) {
    std::vector<CoordKey> k(L.size());
    for (int p = 0; p < L.F; ++p) k[p] = {0, p};
    k[L.log_scale()] = {1, 0};
    for (int l = 0; l + 1 < L.m; ++l) k[L.alpha(l)] = {2, 0};
    for (int c = 0; c < L.m; ++c) {
        for (int j = 0; j < L.J; ++j) k[L.mu(c, j)] = {3, j};
        k[L.log_comp_scale(c)] = {4, 0};
    }
    return k;
}

Eigen::VectorXd map_mass(const Eigen::VectorXd& src, const ParamLayout& from, const ParamLayout& to) {
    std::map<CoordKey, std::pair<double, int>> acc;
    const auto ks = coord_keys(from);
    for (int i = 0; i < from.size(); ++i) {
        auto& a = acc[ks[i]];
        a.first += src(i);
        a.second += 1;
    }
    const auto kt = coord_keys(to);
    Eigen::VectorXd out(to.size());
    for (int i = 0; i < to.size(); ++i) {
        const auto it = acc.find(kt[i]);
        out(i) = it == acc.end() ? 1.0 : it->second.first / it->second.second;
    }
    return out;
}

// slow adaptation windows after a fast initial phase
constexpr long kFastInit = 75;

long window_end(long w) { return kFastInit + 25 * ((1L << (w + 1)) - 1); }

nlohmann::json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }
Eigen::VectorXd json_vec(const nlohmann::json& j) {
    const std::vector<double> v = j.get<std::vector<double>>();
    return Eigen::Map<const Eigen::VectorXd>(v.data(), v.size());
}

nlohmann::json stats_json(const AcceptStats& s) {
    return {{"proposed", s.proposed}, {"accepted", s.accepted}, {"rejected", s.rejected}, {"failures", s.failures}};
}
AcceptStats json_stats(const nlohmann::json& j) {
    AcceptStats s;
    s.proposed = j.at("proposed");
    s.accepted = j.at("accepted");
    s.rejected = j.at("rejected");
    s.failures = j.at("failures");
    return s;
}

struct Cursor {
    long iter = 0;
    ChainState state;
    PosteriorValue cur;
};

void save_checkpoint(const std::string& path, const Cursor& c, const ChainResult& res, const PosteriorEvaluator& ev,
                     const Rng& rng, std::size_t n_draws) {
    nlohmann::json j;
    j["iter"] = c.iter;
    j["m"] = c.state.m;
    j["chi"] = vec_json(c.state.chi);
    j["log_post"] = c.cur.log_post;
    j["log_lik"] = c.cur.log_lik;
    j["log_prior"] = c.cur.log_prior;
    j["grad"] = vec_json(c.cur.grad);
    j["grad_lik"] = vec_json(c.cur.grad_lik);
    j["Q"] = vec_json(c.cur.sol.Q);
    {
        const Eigen::MatrixXd& P = c.cur.sol.ccp;
        j["ccp_rows"] = P.rows();
        j["ccp"] = std::vector<double>(P.data(), P.data() + P.size());
        j["residual"] = c.cur.sol.residual;
        j["converged"] = c.cur.sol.converged;
    }
    j["warm"] = vec_json(ev.warm_start);
    std::ostringstream r;
    r << rng;
    j["rng"] = r.str();
    j["hmc"] = stats_json(res.hmc);
    j["birth"] = stats_json(res.rj.birth);
    j["death"] = stats_json(res.rj.death);
    j["fallbacks"] = res.rj.fallbacks;
    j["rj_solve_failures"] = res.rj.solve_failures;
    j["divergent"] = res.divergent;
    j["draws"] = n_draws;
    nlohmann::json tun = nlohmann::json::array();
    for (const auto& [m, t] : res.tuning) {
        tun.push_back({{"m", m},
                       {"step", t.step},
                       {"inv_mass", vec_json(t.inv_mass)},
                       {"da", t.da.to_json()},
                       {"adapt_iters", t.adapt_iters},
                       {"window_count", t.window_count},
                       {"w_mean", vec_json(t.w_mean)},
                       {"w_m2", vec_json(t.w_m2)},
                       {"tuned", t.tuned}});
    }
    j["tuning"] = tun;
    const std::string tmp = path + ".tmp";
    {
        std::ofstream o(tmp);
        if (!o) throw std::runtime_error("cannot write checkpoint " + tmp);
        o << j.dump();
    }
    std::rename(tmp.c_str(), path.c_str());
}

void load_checkpoint(const std::string& path, Cursor& c, ChainResult& res, PosteriorEvaluator& ev, Rng& rng,
                     std::size_t& n_draws) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read checkpoint " + path);
    const nlohmann::json j = nlohmann::json::parse(in);
    c.iter = j.at("iter");
    c.state.m = j.at("m");
    c.state.chi = json_vec(j.at("chi"));
    c.cur.log_post = j.at("log_post");
    c.cur.log_lik = j.at("log_lik");
    c.cur.log_prior = j.at("log_prior");
    c.cur.grad = json_vec(j.at("grad"));
    c.cur.grad_lik = json_vec(j.at("grad_lik"));
    c.cur.sol.Q = json_vec(j.at("Q"));
    {
        const Eigen::VectorXd flat = json_vec(j.at("ccp"));
        const long rows = j.at("ccp_rows");
        c.cur.sol.ccp = rows ? Eigen::Map<const Eigen::MatrixXd>(flat.data(), rows, flat.size() / rows)
                             : Eigen::MatrixXd();
        c.cur.sol.residual = j.at("residual");
        c.cur.sol.converged = j.at("converged");
    }
    ev.warm_start = json_vec(j.at("warm"));
    std::istringstream r(j.at("rng").get<std::string>());
    r >> rng;
    res.hmc = json_stats(j.at("hmc"));
    res.rj.birth = json_stats(j.at("birth"));
    res.rj.death = json_stats(j.at("death"));
    res.rj.fallbacks = j.at("fallbacks");
    res.rj.solve_failures = j.value("rj_solve_failures", 0L);
    res.divergent = j.at("divergent");
    n_draws = j.at("draws");
    res.tuning.clear();
    for (const auto& t : j.at("tuning")) {
        MTuning mt;
        mt.step = t.at("step");
        mt.inv_mass = json_vec(t.at("inv_mass"));
        mt.da.from_json(t.at("da"));
        mt.adapt_iters = t.at("adapt_iters");
        mt.window_count = t.at("window_count");
        mt.w_mean = json_vec(t.at("w_mean"));
        mt.w_m2 = json_vec(t.at("w_m2"));
        mt.tuned = t.at("tuned");
        res.tuning[t.at("m").get<int>()] = std::move(mt);
    }
}

const MTuning* nearest_tuning(const std::map<int, MTuning>& cache, int m, bool require_tuned) {
    const MTuning* best = nullptr;
    int bd = std::numeric_limits<int>::max();
    for (const auto& [k, t] : cache) {
        if (require_tuned && !t.tuned) continue;
        const int d = std::abs(k - m);
        if (d < bd) {
            bd = d;
            best = &t;
        }
    }
    return best;
}

int nearest_m(const std::map<int, MTuning>& cache, int m, bool require_tuned) {
    int best = -1, bd = std::numeric_limits<int>::max();
    for (const auto& [k, t] : cache) {
        if (require_tuned && !t.tuned) continue;
        if (std::abs(k - m) < bd) {
            bd = std::abs(k - m);
            best = k;
        }
    }
    return best;
}

}  // namespace

ChainResult run_chain(const Problem& prob, const ChainState& init, const ChainConfig& cfg, const DerivedSpec& derived,
                      bool resume) {
    const Schedule& sc = cfg.schedule;
    if (sc.thin < 1 || sc.hmc_per_jump < 1 || sc.burn_in < 0 || sc.iterations < 0)
        throw std::invalid_argument("invalid MCMC schedule");
    if (cfg.hmc.leapfrog < 1 || !(cfg.hmc.step > 0.0)) throw std::invalid_argument("invalid HMC settings");
    if (init.chi.size() != prob.layout(init.m).size()) throw std::invalid_argument("initial state has the wrong size");

    ChainResult res;
    res.store.derived_names = derived.names;
    res.store.meta = {{"seed", cfg.seed},
                      {"stream", cfg.stream},
                      {"iterations", sc.iterations},
                      {"burn_in", sc.burn_in},
                      {"thin", sc.thin},
                      {"hmc_per_jump", sc.hmc_per_jump},
                      {"fixed_m", sc.fixed_m},
                      {"leapfrog", cfg.hmc.leapfrog},
                      {"target_accept", cfg.hmc.target_accept}};

    PosteriorEvaluator ev(prob);
    Rng rng = make_stream(cfg.seed, cfg.stream);
    Cursor c;
    std::size_t saved = 0;
    if (resume) {
        if (cfg.checkpoint_path.empty()) throw std::invalid_argument("resume needs a checkpoint path");
        load_checkpoint(cfg.checkpoint_path, c, res, ev, rng, saved);
        if (!cfg.draws_path.empty() && saved > 0) {
            DrawStore prev = DrawStore::read_csv(cfg.draws_path);
            if (prev.draws.size() < saved) throw std::runtime_error("draw file is shorter than the checkpoint");
            prev.draws.resize(saved);
            res.store.draws = std::move(prev.draws);
        }
        if (!cfg.draws_path.empty()) res.store.write_csv(cfg.draws_path);
    } else {
        c.state = init;
        c.cur = ev.evaluate(c.state, true);
        if (!std::isfinite(c.cur.log_post)) throw NumericalError("initial state has zero posterior density");
    }

    PosteriorValue last;
    const LogTarget target = [&](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
        ChainState s{c.state.m, x};
        last = ev.evaluate(s, true);
        if (g) *g = last.grad;
        return last.log_post;
    };

    auto tuning_for = [&](int m) -> MTuning& {
        auto it = res.tuning.find(m);
        if (it != res.tuning.end()) return it->second;
        MTuning t;
        const ParamLayout L = prob.layout(m);
        const bool after = c.iter >= sc.burn_in;
        const MTuning* src = nearest_tuning(res.tuning, m, after);
        if (src) {
            const int sm = nearest_m(res.tuning, m, after);
            t.step = src->step;
            t.inv_mass = map_mass(src->inv_mass, prob.layout(sm), L);
        } else {
            t.step = cfg.hmc.step;
            t.inv_mass = Eigen::VectorXd::Ones(L.size());
        }
        t.da = DualAveraging(t.step, cfg.hmc.target_accept);
        t.w_mean = Eigen::VectorXd::Zero(L.size());
        t.w_m2 = Eigen::VectorXd::Zero(L.size());
        t.tuned = after || !cfg.hmc.adapt;
        return res.tuning.emplace(m, std::move(t)).first->second;
    };

    auto freeze_all = [&] {
        for (auto& [m, t] : res.tuning) {
            if (t.tuned) continue;
            if (t.da.count() > 0) t.step = t.da.final_step();
            t.tuned = true;
        }
    };
    if (c.iter >= sc.burn_in) freeze_all();

    for (; c.iter < sc.iterations; ++c.iter) {
        if (!sc.fixed_m && c.iter % sc.hmc_per_jump == 0) {
            const int m0 = c.state.m;
            const Eigen::VectorXd chi0 = c.state.chi;
            rj_step(ev, c.state, rng, res.rj);
            if (c.state.m != m0 || c.state.chi != chi0) {
                try {
                    c.cur = ev.evaluate(c.state, true);
                } catch (const NumericalError&) {
                    ++res.rj.solve_failures;
                    c.state = ChainState{m0, chi0};
                    c.cur = ev.evaluate(c.state, true);
                }
                if (!std::isfinite(c.cur.log_post)) throw NumericalError("reversible jump produced an invalid state");
            }
        }

        MTuning& t = tuning_for(c.state.m);
        HMCParams hp;
        hp.step = t.step;
        hp.leapfrog = cfg.hmc.leapfrog;
        hp.inv_mass = t.inv_mass;
        hp.jitter = cfg.hmc.jitter;
        const HMCResult h = hmc_step(target, c.state.chi, c.cur.log_post, c.cur.grad, hp, rng);
        res.hmc.record(h.accepted);
        if (h.divergent) {
            ++res.divergent;
            ++res.hmc.failures;
        }
        if (h.accepted) {
            c.state.chi = h.x;
            c.cur = last;
        }

        if (!t.tuned) {
            t.step = t.da.update(h.divergent ? 0.0 : h.accept_prob);
            ++t.adapt_iters;
            if (t.adapt_iters > kFastInit) {
                ++t.window_count;
                const Eigen::VectorXd d = c.state.chi - t.w_mean;
                t.w_mean += d / static_cast<double>(t.window_count);
                t.w_m2 += d.cwiseProduct(c.state.chi - t.w_mean);
                long w = 0;
                while (window_end(w) < t.adapt_iters) ++w;
                if (t.adapt_iters == window_end(w) && t.window_count > 2) {
                    const double n = static_cast<double>(t.window_count);
                    const Eigen::VectorXd var = t.w_m2 / (n - 1.0);
                    t.inv_mass = (n / (n + 5.0)) * var.array() + 1e-3 * (5.0 / (n + 5.0));
                    t.window_count = 0;
                    t.w_mean.setZero();
                    t.w_m2.setZero();
                    t.da.restart(t.step);
                }
            }
        }
        if (c.iter + 1 == sc.burn_in) freeze_all();

        if (c.iter >= sc.burn_in && (c.iter - sc.burn_in) % sc.thin == 0) {
            if (!prob.likelihood_off && !(c.cur.sol.converged && c.cur.sol.residual <= prob.solver.tol))
                throw NumericalError("stored draw failed the Emax residual check");
            DrawRecord d;
            d.iter = c.iter;
            d.m = c.state.m;
            d.log_post = c.cur.log_post;
            d.log_lik = c.cur.log_lik;
            d.chi = c.state.chi;
            if (derived.compute) d.derived = derived.compute(c.state, c.cur);
            if (d.derived.size() != derived.names.size()) throw std::logic_error("derived values do not match names");
            res.store.draws.push_back(std::move(d));
            if (!cfg.checkpoint_path.empty() && sc.checkpoint_every > 0 &&
                res.store.draws.size() % sc.checkpoint_every == 0) {
                if (!cfg.draws_path.empty()) res.store.append_csv(cfg.draws_path, saved);
                saved = res.store.draws.size();
                Cursor next = c;
                ++next.iter;
                save_checkpoint(cfg.checkpoint_path, next, res, ev, rng, saved);
            }
        }
    }
    if (!cfg.draws_path.empty()) res.store.append_csv(cfg.draws_path, saved);

    res.final_state = c.state;
    auto& meta = res.store.meta;
    meta["hmc_accept_rate"] = res.hmc.rate();
    meta["hmc"] = stats_json(res.hmc);
    meta["divergent"] = res.divergent;
    meta["birth"] = stats_json(res.rj.birth);
    meta["death"] = stats_json(res.rj.death);
    meta["laplace_fallbacks"] = res.rj.fallbacks;
    meta["rj_solve_failures"] = res.rj.solve_failures;
    nlohmann::json steps = nlohmann::json::object();
    for (const auto& [m, t] : res.tuning) steps[std::to_string(m)] = t.step;
    meta["step_by_m"] = steps;
    meta["likelihood_evaluations"] = ev.evaluations;
    return res;
}

// ---------------------------------------------------------------- diagnostics

namespace {

double batch_mean_variance(const double* x, std::size_t n) {
    // variance of the segment mean from non-overlapping batch means
    const std::size_t b = std::max<std::size_t>(2, static_cast<std::size_t>(std::sqrt(static_cast<double>(n))));
    const std::size_t len = n / b;
    if (len == 0) throw std::invalid_argument("segment too short for batch means");
    std::vector<double> means(b);
    for (std::size_t i = 0; i < b; ++i) means[i] = std::accumulate(x + i * len, x + (i + 1) * len, 0.0) / len;
    const double mm = std::accumulate(means.begin(), means.end(), 0.0) / b;
    double v = 0.0;
    for (double m : means) v += (m - mm) * (m - mm);
    v /= (b - 1);
    return v / b;
}

}  // namespace

GewekeResult geweke(const std::vector<double>& x, double early, double late) {
    if (x.size() < 100) throw std::invalid_argument("Geweke diagnostic needs at least 100 values");
    if (!(early > 0.0 && late > 0.0 && early + late <= 1.0)) throw std::invalid_argument("invalid Geweke fractions");
    const std::size_t n = x.size();
    const std::size_t na = static_cast<std::size_t>(early * n), nb = static_cast<std::size_t>(late * n);
    const double* a = x.data();
    const double* b = x.data() + (n - nb);
    const double ma = std::accumulate(a, a + na, 0.0) / na;
    const double mb = std::accumulate(b, b + nb, 0.0) / nb;
    const double v = batch_mean_variance(a, na) + batch_mean_variance(b, nb);
    GewekeResult r;
    if (v <= 0.0) {
        r.z = ma == mb ? 0.0 : std::numeric_limits<double>::infinity();
    } else {
        r.z = (ma - mb) / std::sqrt(v);
    }
    r.p_value = std::isfinite(r.z) ? 2.0 * (1.0 - normal_cdf(std::abs(r.z))) : 0.0;
    return r;
}

double autocorrelation_time(const std::vector<double>& x) {
    const std::size_t n = x.size();
    if (n < 4) throw std::invalid_argument("series too short for an autocorrelation time");
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
    auto acov = [&](std::size_t lag) {
        double s = 0.0;
        for (std::size_t i = 0; i + lag < n; ++i) s += (x[i] - mean) * (x[i + lag] - mean);
        return s / n;
    };
    const double c0 = acov(0);
    if (c0 <= 0.0) return 1.0;
    double tau = -1.0;
    for (std::size_t k = 0; 2 * k + 1 < n / 2; ++k) {
        const double pair = (acov(2 * k) + acov(2 * k + 1)) / c0;
        if (pair <= 0.0) break;
        tau += 2.0 * pair;
    }
    return std::max(tau, 1.0);
}

}  // namespace ddc
