#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "ddc/dp_solver.hpp"
#include "ddc/postprocess.hpp"
#include "oracles.hpp"

using namespace ddc;

namespace {

GumbelMixture two_comp() {
    GumbelMixture g;
    g.weights = Eigen::Vector2d(0.35, 0.65);
    g.mu.resize(2, 1);
    g.mu << -1.2, 0.9;
    g.comp_scale = Eigen::Vector2d(0.6, 1.4);
    g.scale = 1.1;
    return g;
}

CCPMatrix random_ccp(Rng& rng, int K, int J) {
    CCPMatrix P(K, J + 1);
    for (int x = 0; x < K; ++x) {
        for (int d = 0; d <= J; ++d) P(x, d) = -std::log(uniform_open(rng));
        P.row(x) /= P.row(x).sum();
    }
    return P;
}

std::vector<Eigen::VectorXd> gaussian_draws(Rng& rng, const Eigen::MatrixXd& A, const Eigen::VectorXd& mu, int n) {
    std::vector<Eigen::VectorXd> out;
    for (int i = 0; i < n; ++i) {
        Eigen::VectorXd z(A.cols());
        for (int k = 0; k < z.size(); ++k) z(k) = standard_normal(rng);
        out.push_back(mu + A * z);
    }
    return out;
}

}  // namespace

TEST_CASE("renormalization of a logistic-like mixture is the identity") {
    const GumbelMixture logis = approximate_logistic(2000);
    Eigen::VectorXd th(2);
    th << 5.0727, -0.002293;
    const RenormalizedDraw r = renormalize_draw(th, logis, RenormSpec::rust());
    CHECK(std::abs(r.s - 1.0) < 0.02);
    CHECK(std::abs(r.mix_mean(0)) < 1e-3);
    CHECK(r.theta(0) == doctest::Approx(r.s * (th(0) - r.mix_mean(0))).epsilon(1e-14));
    CHECK(r.theta(1) == doctest::Approx(r.s * th(1)).epsilon(1e-14));
}

TEST_CASE("renormalization homogeneity, shift and relabeling") {
    const GumbelMixture g = two_comp();
    Eigen::VectorXd th(3);
    th << 2.0, -0.4, 0.7;
    const RenormSpec spec{{0}, {1.0}, 0};
    const RenormalizedDraw a = renormalize_draw(th, g, spec);

    GumbelMixture g2 = g;
    g2.mu *= 2.0;
    g2.scale *= 2.0;
    Eigen::VectorXd th2 = th;
    th2 *= 2.0;
    const RenormalizedDraw b = renormalize_draw(th2, g2, spec);
    CHECK(b.s == doctest::Approx(a.s / 2).epsilon(1e-10));
    // doubling utilities and shocks together leaves the reported parameters unchanged
    CHECK((b.theta - a.theta).lpNorm<Eigen::Infinity>() < 1e-9);
    // slope halves when only the shocks spread
    const RenormalizedDraw c = renormalize_draw(th, g2, spec);
    CHECK(c.theta(1) == doctest::Approx(a.theta(1) / 2).epsilon(1e-10));

    // moving location between intercept and mixture changes nothing
    GumbelMixture g3 = g;
    g3.mu.array() += 0.8;
    Eigen::VectorXd th3 = th;
    th3(0) -= 0.8;
    const RenormalizedDraw d = renormalize_draw(th3, g3, spec);
    CHECK((d.theta - a.theta).lpNorm<Eigen::Infinity>() < 1e-10);

    GumbelMixture sw = g;
    sw.weights.reverseInPlace();
    sw.mu.col(0).reverseInPlace();
    sw.comp_scale.reverseInPlace();
    const RenormalizedDraw e = renormalize_draw(th, sw, spec);
    CHECK((e.theta - a.theta).lpNorm<Eigen::Infinity>() < 1e-12);
    CHECK(e.s == doctest::Approx(a.s).epsilon(1e-12));

    CHECK_THROWS(renormalize_draw(th, g, RenormSpec{{0, 1}, {1.0, 1.0}, 0}));
    CHECK_THROWS(RenormSpec::for_model(oracle::random_model(*std::make_unique<Rng>(1), 3, 1, 0.5)));
}

TEST_CASE("Rust standard Gumbel draw renormalizes end to end") {
    // Simpson quadrature of the upper-half mean of the centered Gumbel
    const double M = -std::log(std::log(2.0)) - kEulerGamma;
    const int n = 400000;
    const double hi = 60.0, h = (hi - M) / n;
    double s = 0.0;
    for (int i = 0; i <= n; ++i) {
        const double t = M + i * h;
        const double f = std::exp(-t - kEulerGamma - std::exp(-t - kEulerGamma));
        s += ((i == 0 || i == n) ? 1 : (i % 2 ? 4 : 2)) * t * f;
    }
    const double s_oracle = std::log(2.0) / (s * h / 3);

    const DDCModel rust = build_rust_model({});
    const RenormalizedDraw r = renormalize_draw(rust.theta, GumbelMixture::standard(1), RenormSpec::for_model(rust));
    CHECK(r.s == doctest::Approx(s_oracle).epsilon(1e-9));
    CHECK(r.theta(0) == doctest::Approx(s_oracle * 5.0727).epsilon(1e-9));
    CHECK(r.theta(1) == doctest::Approx(s_oracle * -0.002293).epsilon(1e-9));
    // 30-digit reference value
    CHECK(std::abs(r.s - 1.4320559518786523) < 1e-9);
}

TEST_CASE("CCP credible set coverage under Gaussian draws") {
    Rng rng(3);
    const int dim = 6;
    Eigen::MatrixXd A = Eigen::MatrixXd::Random(dim, dim) * 0.05;
    A.diagonal().array() += 0.1;
    const Eigen::VectorXd mu = Eigen::VectorXd::Constant(dim, 0.4);
    const auto draws = gaussian_draws(rng, A, mu, 20000);
    const CCPCredibleSet set = ccp_credible_set(draws, 0.1);
    CHECK(set.threshold == doctest::Approx(chi_square_quantile(0.9, dim)).epsilon(1e-12));
    CHECK(set.ridge == 0.0);
    CHECK(set.contains(set.center));
    double in = 0;
    for (const auto& d : draws) in += set.contains(d);
    const double frac = in / draws.size();
    CHECK(std::abs(frac - 0.9) < 3 * std::sqrt(0.09 / draws.size()) + 0.003);

    // fresh draws from the same law
    const auto fresh = gaussian_draws(rng, A, mu, 20000);
    in = 0;
    for (const auto& d : fresh) in += set.contains(d);
    CHECK(std::abs(in / fresh.size() - 0.9) < 0.01);

    // consistent reordering of coordinates preserves membership
    std::vector<int> perm(dim);
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    std::swap(perm[0], perm[3]);
    auto permute = [&](const Eigen::VectorXd& v) {
        Eigen::VectorXd w(dim);
        for (int i = 0; i < dim; ++i) w(i) = v(perm[i]);
        return w;
    };
    std::vector<Eigen::VectorXd> pd;
    for (const auto& d : draws) pd.push_back(permute(d));
    const CCPCredibleSet ps = ccp_credible_set(pd, 0.1);
    int mismatch = 0;
    for (int i = 0; i < 2000; ++i) mismatch += set.contains(fresh[i]) != ps.contains(permute(fresh[i]));
    CHECK(mismatch == 0);

    CHECK_THROWS(ccp_credible_set(draws, 0.0));
    CHECK_THROWS(ccp_credible_set(draws, 1.0));
    CHECK_THROWS(ccp_credible_set(std::vector<Eigen::VectorXd>(draws.begin(), draws.begin() + dim), 0.1));
}

TEST_CASE("degenerate CCP draws are ridge regularized") {
    Rng rng(4);
    std::vector<Eigen::VectorXd> draws;
    for (int i = 0; i < 50; ++i) {
        const double u = standard_normal(rng);
        draws.push_back(Eigen::Vector3d(0.2 + 0.01 * u, 0.5 - 0.01 * u, 0.3));
    }
    const CCPCredibleSet set = ccp_credible_set(draws, 0.05);
    CHECK(set.ridge > 0.0);
    CHECK(set.ridge == doctest::Approx(1e-10 * set.cov.trace() / 3).epsilon(1e-12));
    CHECK(set.contains(set.center));
    CHECK(set.contains(draws[7]));
}

TEST_CASE("identified set interval") {
    Rng rng(5);
    Eigen::MatrixXd A = 0.1 * Eigen::MatrixXd::Identity(2, 2);
    const auto draws = gaussian_draws(rng, A, Eigen::Vector2d(0.3, 0.5), 3000);
    std::vector<double> eta;
    for (const auto& d : draws) eta.push_back(d(0) - 2 * d(1));
    const CCPCredibleSet wide = ccp_credible_set(draws, 1e-9);
    const Interval all = identified_set_interval(draws, eta, wide);
    CHECK(all.lo == *std::min_element(eta.begin(), eta.end()));
    CHECK(all.hi == *std::max_element(eta.begin(), eta.end()));

    Interval prev{0.0, 0.0};
    bool first = true;
    for (double alpha : {0.5, 0.2, 0.1, 0.05, 0.01}) {
        const Interval r = identified_set_interval(draws, eta, ccp_credible_set(draws, alpha));
        if (!first) CHECK((r.lo <= prev.lo && r.hi >= prev.hi));
        prev = r;
        first = false;
    }

    const std::vector<Eigen::VectorXd> one = {draws[0]};
    const Interval single = identified_set_interval(one, {eta[0]}, wide);
    CHECK(single.lo == eta[0]);
    CHECK(single.hi == eta[0]);
    const std::vector<Eigen::VectorXd> far = {Eigen::Vector2d(10.0, 10.0)};
    CHECK_THROWS(identified_set_interval(far, {1.0}, wide));
    CHECK_THROWS(identified_set_interval(draws, {1.0}, wide));
}

TEST_CASE("stacked CCP vector uses occupied states") {
    PanelCounts c;
    c.n = Eigen::MatrixXd::Zero(4, 3);
    c.n(1, 0) = 2;
    c.n(3, 2) = 1;
    const auto st = occupied_states(c);
    CHECK(st == std::vector<int>{1, 3});
    CCPMatrix P(4, 3);
    P << 0.2, 0.3, 0.5, 0.1, 0.6, 0.3, 0.3, 0.3, 0.4, 0.7, 0.2, 0.1;
    const Eigen::VectorXd v = stack_ccp(P, st);
    CHECK(v.size() == 4);
    CHECK(v(0) == 0.6);
    CHECK(v(1) == 0.3);
    CHECK(v(2) == 0.2);
    CHECK(v(3) == 0.1);
}

TEST_CASE("expected visits: hand-computable cases") {
    GilleskieParams gp;
    gp.T = 2;
    gp.pi_w_table = Eigen::MatrixXd::Zero(gilleskie_state_count(2), 4);
    const DDCModel m = build_gilleskie_model(gp, 0.9);
    CCPMatrix P = CCPMatrix::Zero(m.K, 4);
    P.col(1).setOnes();
    CHECK(expected_visits(m, P) == doctest::Approx(2.0).epsilon(1e-14));
    P.setZero();
    P.col(2).setOnes();
    CHECK(expected_visits(m, P) == 0.0);
    // visit with probability 1/2 each period: 1/2 + 1/2
    P.setZero();
    P.col(0).setConstant(0.5);
    P.col(3).setConstant(0.5);
    CHECK(expected_visits(m, P) == doctest::Approx(1.0).epsilon(1e-14));

    // recovery after the first period with probability 0.4 regardless of the choice
    GilleskieParams gr = gp;
    gr.T = 3;
    gr.pi_w_table = Eigen::MatrixXd::Constant(gilleskie_state_count(3), 4, 0.4);
    const DDCModel m3 = build_gilleskie_model(gr, 0.9);
    CCPMatrix Q = CCPMatrix::Zero(m3.K, 4);
    Q.col(1).setOnes();
    CHECK(expected_visits(m3, Q) == doctest::Approx(1.0 + 0.6 + 0.36).epsilon(1e-14));

    Rng rng(6);
    const DDCModel custom = oracle::random_model(rng, 5, 3, 0.9);
    CHECK_THROWS(expected_visits(custom, random_ccp(rng, 5, 3)));
}

TEST_CASE("expected visits agree with episode simulation") {
    Rng rng(7);
    GilleskieParams gp;
    gp.eta = {-1.0, 0.3, 0.0, -0.2, 0.0, 0.0, 0.25, 0.0, 0.0};
    const DDCModel m = build_gilleskie_model(gp, 0.95);
    for (int r = 0; r < 4; ++r) {
        const CCPMatrix P = random_ccp(rng, m.K, 3);
        const double exact = expected_visits(m, P);
        const EpisodeSimulation sim = simulate_visits(m, P, 200000, rng);
        INFO("exact " << exact << " sim " << sim.mean << " se " << sim.se);
        CHECK(std::abs(exact - sim.mean) < 3 * sim.se);
    }
    // model CCPs at the default parameters
    const EmaxSolution sol = solve_emax(m, GumbelMixture::standard(3));
    const double exact = expected_visits(m, sol.ccp);
    const EpisodeSimulation sim = simulate_visits(m, sol.ccp, 200000, rng);
    CHECK(std::abs(exact - sim.mean) < 3 * sim.se);
}

TEST_CASE("counterfactual model") {
    GilleskieParams gp;
    const DDCModel base = build_gilleskie_model(gp, 0.95);
    const DDCModel same = counterfactual_model(base, {});
    CHECK(same.theta == base.theta);
    for (int d = 0; d < 4; ++d) {
        CHECK(same.Z[d] == base.Z[d]);
        CHECK(Eigen::MatrixXd(same.G[d]) == Eigen::MatrixXd(base.G[d]));
    }

    CounterfactualOverrides ov;
    ov.PC = 0.0;
    const DDCModel cf = counterfactual_model(base, ov);
    CHECK(cf.gilleskie->PC == 0.0);
    for (int d = 0; d < 4; ++d) {
        CHECK(Eigen::MatrixXd(cf.G[d]) == Eigen::MatrixXd(base.G[d]));
        CHECK(cf.Z[d].leftCols(5) == base.Z[d].leftCols(5));
    }
    // visiting becomes cheaper by PC in consumption
    const int x = gilleskie_index(base, 2, 1, 0);
    CHECK(cf.Z[1](x, 5) - base.Z[1](x, 5) == doctest::Approx(gp.PC));

    // zero consumption coefficient: the coinsurance change has no effect
    DDCModel flat = base;
    flat.theta(5) = 0.0;
    const DDCModel flat_cf = counterfactual_model(flat, ov);
    CHECK(flat_cf.theta(5) == 0.0);
    const GumbelMixture mix = GumbelMixture::standard(3);
    const CCPMatrix p0 = solve_emax(flat, mix).ccp, p1 = solve_emax(flat_cf, mix).ccp;
    CHECK((p0 - p1).lpNorm<Eigen::Infinity>() < 1e-12);

    // estimated theta carries over
    DDCModel est = base;
    est.theta(5) = 0.031;
    CHECK(counterfactual_model(est, ov).theta(5) == 0.031);
    Rng rng(8);
    CHECK_THROWS(counterfactual_model(oracle::random_model(rng, 3, 1, 0.5), ov));
}

TEST_CASE("posterior summary") {
    DrawStore st;
    st.derived_names = {"const", "x"};
    Rng rng(9);
    for (long i = 1; i <= 1000; ++i) {
        DrawRecord r;
        r.iter = i * 10;
        r.m = i % 3 == 0 ? 2 : 1;
        r.log_post = -static_cast<double>(i % 7);
        r.derived = {4.2, standard_normal(rng)};
        r.chi = Eigen::VectorXd::Zero(1);
        st.draws.push_back(r);
    }
    const PosteriorSummary s = summarize(st, 2000, 2);
    CHECK(s.draws == 400);
    double tot = 0.0;
    for (const auto& [m, p] : s.m_pmf) tot += p;
    CHECK(tot == doctest::Approx(1.0).epsilon(1e-14));
    const auto it = std::find_if(s.functionals.begin(), s.functionals.end(), [](auto& f) { return f.name == "const"; });
    REQUIRE(it != s.functionals.end());
    CHECK(it->hpd.length() == 0.0);
    CHECK(it->mean == doctest::Approx(4.2));
    const auto jx = s.to_json();
    CHECK(jx["functionals"].contains("x"));
    CHECK(jx["diagnostics"]["x"]["geweke_p"][0].get<double>() > 0.0);
    CHECK(jx["ccp_credible_set"].contains("note"));
    CHECK(jx["functionals"]["x"]["B_hat_interval"][0].is_null());
    CHECK(std::abs(jx["functionals"]["x"]["mean"].get<double>()) < 0.2);
    CHECK_THROWS(summarize(st, 100000, 1));
    CHECK(select_draws(st, 0, 1).draws.size() == 1000);
}

TEST_CASE("pooled summary keeps per-chain diagnostics and bhat from ccp columns") {
    Rng rng(10);
    std::vector<DrawStore> chains(2);
    for (auto& st : chains) {
        st.derived_names = {"ccp_1", "ccp_2", "eta"};
        for (long i = 1; i <= 500; ++i) {
            DrawRecord r;
            r.iter = i;
            r.m = 1;
            const double a = 0.3 + 0.01 * standard_normal(rng), b = 0.5 + 0.01 * standard_normal(rng);
            r.derived = {a, b, a + b};
            r.chi = Eigen::VectorXd::Zero(1);
            st.draws.push_back(r);
        }
    }
    const PosteriorSummary s = summarize(chains, 0, 1, 0.95, 0.05);
    CHECK(s.draws == 1000);
    CHECK(s.chains == 2);
    CHECK(s.ccp_dim == 2);
    // chi-square ellipsoid at 95% holds close to 95% of Gaussian draws
    CHECK(s.ccp_members > 930);
    CHECK(s.ccp_members < 970);
    const auto it = std::find_if(s.functionals.begin(), s.functionals.end(), [](auto& f) { return f.name == "eta"; });
    REQUIRE(it != s.functionals.end());
    CHECK(it->geweke_p.size() == 2);
    CHECK(it->act.size() == 2);
    // bhat is the range over set members, so it sits inside the full range
    const auto col = merge_stores(chains).column("eta");
    CHECK(it->bhat.lo >= *std::min_element(col.begin(), col.end()));
    CHECK(it->bhat.hi <= *std::max_element(col.begin(), col.end()));
    CHECK(it->bhat.lo < it->mean);
    CHECK(it->bhat.hi > it->mean);

    chains[1].derived_names = {"other", "ccp_2", "eta"};
    CHECK_THROWS(summarize(chains, 0, 1));
}
