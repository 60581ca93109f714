#include "ddc/postprocess.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace ddc {

RenormSpec RenormSpec::rust() { return {{0}, {-1.0}, 0}; }

RenormSpec RenormSpec::gilleskie() { return {{0, 1, 2}, {1.0, 1.0, 1.0}, 0}; }

RenormSpec RenormSpec::for_model(const DDCModel& model) {
    if (model.kind == "rust") return rust();
    if (model.kind == "gilleskie") return gilleskie();
    throw std::invalid_argument("no renormalization convention for model kind '" + model.kind + "'");
}

RenormalizedDraw renormalize_draw(const Eigen::VectorXd& theta, const GumbelMixture& mix, const RenormSpec& spec) {
    if (spec.intercept_index.size() != spec.intercept_sign.size())
        throw std::invalid_argument("renormalize_draw: intercept index and sign lengths differ");
    if (static_cast<int>(spec.intercept_index.size()) != mix.dim())
        throw std::invalid_argument("renormalize_draw: one intercept per mixture coordinate required");
    RenormalizedDraw r;
    r.mix_mean = mixture_mean(mix);
    r.s = scale_factor(mix, spec.scale_coord);
    r.theta = theta;
    for (std::size_t j = 0; j < spec.intercept_index.size(); ++j) {
        const int i = spec.intercept_index[j];
        if (i < 0 || i >= theta.size()) throw std::invalid_argument("renormalize_draw: intercept index out of range");
        r.theta(i) += spec.intercept_sign[j] * r.mix_mean(static_cast<Eigen::Index>(j));
    }
    r.theta *= r.s;
    return r;
}

Eigen::VectorXd stack_ccp(const CCPMatrix& ccp, const std::vector<int>& states) {
    const int J = static_cast<int>(ccp.cols()) - 1;
    Eigen::VectorXd v(static_cast<Eigen::Index>(states.size()) * J);
    Eigen::Index i = 0;
    for (int x : states)
        for (int d = 1; d <= J; ++d) v(i++) = ccp(x, d);
    return v;
}

std::vector<int> occupied_states(const PanelCounts& counts) {
    std::vector<int> s;
    for (int x = 0; x < counts.n.rows(); ++x)
        if (counts.n.row(x).sum() > 0.0) s.push_back(x);
    return s;
}

double CCPCredibleSet::distance2(const Eigen::VectorXd& p) const {
    if (p.size() != center.size()) throw std::invalid_argument("CCPCredibleSet: dimension mismatch");
    const Eigen::VectorXd r = p - center;
    return r.dot(chol.solve(r));
}

CCPCredibleSet ccp_credible_set(const std::vector<Eigen::VectorXd>& draws, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("ccp_credible_set: alpha must lie in (0,1)");
    if (draws.empty()) throw std::invalid_argument("ccp_credible_set: no draws");
    const Eigen::Index dim = draws.front().size();
    const auto n = static_cast<Eigen::Index>(draws.size());
    if (n < dim + 1) throw std::invalid_argument("ccp_credible_set: need at least dim+1 draws");
    CCPCredibleSet set;
    set.alpha = alpha;
    set.center = Eigen::VectorXd::Zero(dim);
    for (const auto& d : draws) {
        if (d.size() != dim) throw std::invalid_argument("ccp_credible_set: draws differ in dimension");
        set.center += d;
    }
    set.center /= static_cast<double>(n);
    Eigen::MatrixXd X(n, dim);
    for (Eigen::Index i = 0; i < n; ++i) X.row(i) = (draws[i] - set.center).transpose();
    set.cov = (X.transpose() * X) / static_cast<double>(n - 1);
    set.threshold = chi_square_quantile(1.0 - alpha, static_cast<double>(dim));

    set.chol.compute(set.cov);
    bool ok = set.chol.info() == Eigen::Success;
    if (ok) {
        // LLT succeeds on some semidefinite matrices; reject a numerically zero pivot
        const Eigen::VectorXd piv = set.chol.matrixLLT().diagonal();
        ok = piv.minCoeff() > 1e-7 * std::sqrt(std::max(set.cov.diagonal().maxCoeff(), 1e-300));
    }
    if (!ok) {
        const double tr = set.cov.trace();
        set.ridge = 1e-10 * (tr > 0.0 ? tr : 1.0) / static_cast<double>(dim);
        set.chol.compute(set.cov + set.ridge * Eigen::MatrixXd::Identity(dim, dim));
        if (set.chol.info() != Eigen::Success) throw NumericalError("ccp_credible_set: covariance not factorizable");
    }
    return set;
}

Interval identified_set_interval(const std::vector<Eigen::VectorXd>& ccp_draws, const std::vector<double>& eta,
                                 const CCPCredibleSet& set) {
    if (ccp_draws.size() != eta.size())
        throw std::invalid_argument("identified_set_interval: draws and functional values differ in length");
    Interval r{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
    bool any = false;
    for (std::size_t i = 0; i < eta.size(); ++i) {
        if (!set.contains(ccp_draws[i])) continue;
        any = true;
        r.lo = std::min(r.lo, eta[i]);
        r.hi = std::max(r.hi, eta[i]);
    }
    if (!any) throw std::invalid_argument("identified_set_interval: no draw lies in the credible set");
    return r;
}

namespace {

void require_gilleskie(const DDCModel& model, const CCPMatrix& ccp) {
    if (model.kind != "gilleskie" || !model.gilleskie || model.states.empty())
        throw std::invalid_argument("expected_visits: model is not Gilleskie-structured");
    if (ccp.rows() != model.K || ccp.cols() != model.J + 1)
        throw std::invalid_argument("expected_visits: CCP matrix shape differs from the model");
}

}  // namespace

double expected_visits(const DDCModel& model, const CCPMatrix& ccp) {
    require_gilleskie(model, ccp);
    const int T = model.gilleskie->T;
    Eigen::VectorXd mass = Eigen::VectorXd::Zero(model.K);
    mass(gilleskie_index(model, 1, 0, 0)) = 1.0;
    double visits = 0.0;
    // each period moves to duration t+1 or ends the episode, so T steps exhaust it
    for (int step = 0; step < T; ++step) {
        Eigen::VectorXd next = Eigen::VectorXd::Zero(model.K);
        for (int x = 1; x < model.K; ++x) {
            const double w = mass(x);
            if (w == 0.0) continue;
            visits += w * (ccp(x, 1) + ccp(x, 3));
            for (int d = 0; d <= model.J; ++d) {
                const double wd = w * ccp(x, d);
                if (wd == 0.0) continue;
                for (SparseRow::InnerIterator it(model.G[d], x); it; ++it)
                    if (it.col() != 0) next(it.col()) += wd * it.value();
            }
        }
        mass = std::move(next);
    }
    return visits;
}

EpisodeSimulation simulate_visits(const DDCModel& model, const CCPMatrix& ccp, long episodes, Rng& rng) {
    require_gilleskie(model, ccp);
    if (episodes < 2) throw std::invalid_argument("simulate_visits: need at least two episodes");
    auto draw_from = [&](auto&& prob, int n) {
        const double u = uniform_open(rng);
        double c = 0.0;
        for (int i = 0; i < n; ++i) {
            c += prob(i);
            if (u < c) return i;
        }
        return n - 1;
    };
    double s = 0.0, s2 = 0.0;
    const int start = gilleskie_index(model, 1, 0, 0);
    for (long e = 0; e < episodes; ++e) {
        int x = start;
        long v = 0;
        while (x != 0) {
            const int d = draw_from([&](int i) { return ccp(x, i); }, model.J + 1);
            if (d == 1 || d == 3) ++v;
            std::vector<std::pair<int, double>> row;
            for (SparseRow::InnerIterator it(model.G[d], x); it; ++it) row.emplace_back(static_cast<int>(it.col()), it.value());
            x = row[draw_from([&](int i) { return row[i].second; }, static_cast<int>(row.size()))].first;
        }
        s += v;
        s2 += static_cast<double>(v) * v;
    }
    const double n = static_cast<double>(episodes);
    const double mean = s / n;
    const double var = (s2 - n * mean * mean) / (n - 1);
    return {mean, std::sqrt(std::max(var, 0.0) / n)};
}

DDCModel counterfactual_model(const DDCModel& model, const CounterfactualOverrides& ov) {
    if (ov.empty()) return model;
    if (model.kind != "gilleskie" || !model.gilleskie)
        throw std::invalid_argument("counterfactual_model: overrides apply to Gilleskie models only");
    GilleskieParams p = *model.gilleskie;
    if (ov.PC) p.PC = *ov.PC;
    if (ov.L) p.L = *ov.L;
    if (ov.Y) p.Y = *ov.Y;
    DDCModel out = build_gilleskie_model(p, model.beta);
    out.theta = model.theta;
    out.G = model.G;
    return out;
}

DrawStore select_draws(const DrawStore& store, long burn_in, int thin) {
    if (thin < 1) throw std::invalid_argument("select_draws: thin must be positive");
    DrawStore out;
    out.derived_names = store.derived_names;
    out.meta = store.meta;
    long k = 0;
    for (const auto& d : store.draws) {
        if (d.iter <= burn_in) continue;
        if (k++ % thin == 0) out.draws.push_back(d);
    }
    return out;
}

DrawStore merge_stores(const std::vector<DrawStore>& chains) {
    if (chains.empty()) throw std::invalid_argument("merge_stores: no chains");
    DrawStore out;
    out.derived_names = chains.front().derived_names;
    out.meta = chains.front().meta;
    for (const auto& c : chains) {
        if (c.derived_names != out.derived_names) throw std::invalid_argument("merge_stores: chains differ in columns");
        out.draws.insert(out.draws.end(), c.draws.begin(), c.draws.end());
    }
    return out;
}

PosteriorSummary summarize(const std::vector<DrawStore>& chains, long burn_in, int thin, double mass, double alpha) {
    std::vector<DrawStore> sel;
    for (const auto& c : chains) sel.push_back(select_draws(c, burn_in, thin));
    const DrawStore all = merge_stores(sel);
    if (all.draws.empty()) throw std::invalid_argument("summarize: no draws after burn-in");
    PosteriorSummary r;
    r.chains = static_cast<int>(chains.size());
    r.draws = static_cast<long>(all.draws.size());
    for (const auto& d : all.draws) r.m_pmf[d.m] += 1.0 / static_cast<double>(r.draws);

    std::vector<Eigen::VectorXd> ccp;
    std::unique_ptr<CCPCredibleSet> set;
    std::vector<std::string> ccp_names;
    for (const auto& n : all.derived_names)
        if (n.rfind("ccp_", 0) == 0) ccp_names.push_back(n);
    if (ccp_names.empty()) {
        r.bhat_note = "no ccp columns in the store";
    } else {
        r.ccp_dim = static_cast<int>(ccp_names.size());
        std::vector<std::vector<double>> cols;
        for (const auto& n : ccp_names) cols.push_back(all.column(n));
        for (std::size_t l = 0; l < all.draws.size(); ++l) {
            Eigen::VectorXd v(r.ccp_dim);
            for (int i = 0; i < r.ccp_dim; ++i) v(i) = cols[i][l];
            ccp.push_back(std::move(v));
        }
        if (static_cast<long>(ccp.size()) < r.ccp_dim + 1) {
            r.bhat_note = "fewer draws than ccp dimension + 1";
        } else {
            set = std::make_unique<CCPCredibleSet>(ccp_credible_set(ccp, alpha));
            r.ccp_ridge = set->ridge;
            for (const auto& v : ccp) r.ccp_members += set->contains(v);
        }
    }

    std::vector<std::string> names = {"m", "log_post", "log_lik"};
    names.insert(names.end(), all.derived_names.begin(), all.derived_names.end());
    for (const auto& name : names) {
        std::vector<double> x = all.column(name);
        FunctionalSummary f;
        f.name = name;
        f.n = static_cast<long>(x.size());
        double s = 0.0;
        for (double v : x) s += v;
        f.mean = s / f.n;
        double ss = 0.0;
        for (double v : x) ss += (v - f.mean) * (v - f.mean);
        f.sd = f.n > 1 ? std::sqrt(ss / (f.n - 1)) : 0.0;
        for (const auto& c : sel) {
            const std::vector<double> xc = c.column(name);
            const bool ok = xc.size() >= 100;
            f.geweke_p.push_back(ok ? geweke(xc).p_value : std::numeric_limits<double>::quiet_NaN());
            f.act.push_back(ok ? autocorrelation_time(xc) : std::numeric_limits<double>::quiet_NaN());
        }
        if (set && r.ccp_members > 0) f.bhat = identified_set_interval(ccp, x, *set);
        f.hpd = hpd_interval_unsorted(std::move(x), mass);
        r.functionals.push_back(f);
    }
    return r;
}

PosteriorSummary summarize(const DrawStore& store, long burn_in, int thin, double mass, double alpha) {
    return summarize(std::vector<DrawStore>{store}, burn_in, thin, mass, alpha);
}

nlohmann::json PosteriorSummary::to_json() const {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    auto nums = [&](const std::vector<double>& v) {
        nlohmann::json a = nlohmann::json::array();
        for (double x : v) a.push_back(num(x));
        return a;
    };
    nlohmann::json j;
    j["draws"] = draws;
    j["chains"] = chains;
    nlohmann::json pm = nlohmann::json::object();
    for (const auto& [m, p] : m_pmf) pm[std::to_string(m)] = p;
    j["m_pmf"] = pm;
    nlohmann::json fs = nlohmann::json::object();
    for (const auto& f : functionals) {
        fs[f.name] = {{"mean", num(f.mean)},
                      {"sd", num(f.sd)},
                      {"hpd", {num(f.hpd.lo), num(f.hpd.hi)}},
                      {"B_hat_interval", {num(f.bhat.lo), num(f.bhat.hi)}},
                      {"n", f.n}};
        j["diagnostics"][f.name] = {{"geweke_p", nums(f.geweke_p)}, {"autocorrelation_time", nums(f.act)}};
    }
    j["functionals"] = fs;
    j["ccp_credible_set"] = {{"dim", ccp_dim}, {"members", ccp_members}, {"ridge", ccp_ridge}};
    if (!bhat_note.empty()) j["ccp_credible_set"]["note"] = bhat_note;
    return j;
}

}  // namespace ddc
