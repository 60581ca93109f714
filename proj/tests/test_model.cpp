#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "ddc/model.hpp"
#include "oracles.hpp"

using namespace ddc;

namespace {

void check_stochastic(const DDCModel& m) {
    for (int d = 0; d <= m.J; ++d) {
        const Eigen::MatrixXd g = m.G[d];
        CHECK((g.array() >= 0.0).all());
        CHECK((g.rowwise().sum().array() - 1.0).abs().maxCoeff() <= 1e-12);
    }
}

}  // namespace

TEST_CASE("Rust builder") {
    const DDCModel m = build_rust_model(RustParams{});
    CHECK(m.K == 90);
    CHECK(m.J == 1);
    CHECK(m.beta == 0.999);
    check_stochastic(m);
    const Eigen::MatrixXd g1 = m.G[1];
    for (int x = 0; x < m.K; ++x) CHECK(g1(x, 0) == 1.0);
    const Eigen::MatrixXd g0 = m.G[0];
    CHECK(g0(10, 10) == doctest::Approx(0.3919));
    CHECK(g0(10, 11) == doctest::Approx(0.5953));
    CHECK(g0(10, 12) == doctest::Approx(1 - 0.3919 - 0.5953));
    CHECK(g0(88, 89) == doctest::Approx(1 - 0.3919));
    CHECK(g0(89, 89) == 1.0);
    const Eigen::MatrixXd u = m.utility();
    CHECK(u(0, 0) == doctest::Approx(5.0727 - 0.002293));
    CHECK(u(89, 0) == doctest::Approx(5.0727 - 0.002293 * 90));
    CHECK(u(40, 1) == 0.0);
    RustParams bad;
    bad.theta2 = 0.7;
    CHECK_THROWS(build_rust_model(bad));
}

TEST_CASE("Gilleskie state space and transitions for T=2") {
    GilleskieParams p;
    p.T = 2;
    p.pi_s = 0.3;
    Eigen::MatrixXd table = Eigen::MatrixXd::Constant(6, 4, 0.25);
    table(1, 1) = 0.4;
    p.pi_w_table = table;
    const DDCModel m = build_gilleskie_model(p, 0.9);
    REQUIRE(m.K == 6);
    const int expect[6][3] = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {2, 0, 1}, {2, 1, 0}, {2, 1, 1}};
    for (int x = 0; x < 6; ++x) {
        CHECK(m.states[x].t == expect[x][0]);
        CHECK(m.states[x].v == expect[x][1]);
        CHECK(m.states[x].a == expect[x][2]);
        CHECK(gilleskie_index(m, expect[x][0], expect[x][1], expect[x][2]) == x);
    }
    check_stochastic(m);
    const Eigen::MatrixXd g1 = m.G[1];
    CHECK(g1(1, 0) == doctest::Approx(0.4));
    CHECK(g1(1, 4) == doctest::Approx(0.6));  // (2,1,0)
    const Eigen::MatrixXd g3 = m.G[3];
    CHECK(g3(1, 5) == doctest::Approx(0.75));  // (2,1,1)
    const Eigen::MatrixXd g2 = m.G[2];
    CHECK(g2(1, 3) == doctest::Approx(0.75));  // (2,0,1)
    for (int d = 0; d < 4; ++d) {
        const Eigen::MatrixXd g = m.G[d];
        CHECK(g(0, 1) == doctest::Approx(0.3));
        CHECK(g(0, 0) == doctest::Approx(0.7));
        for (int x = 2; x < 6; ++x) CHECK(g(x, 0) == 1.0);
    }
}

TEST_CASE("Gilleskie sizes, utilities and reachability") {
    CHECK(gilleskie_state_count(2) == 6);
    CHECK(gilleskie_state_count(8) == 205);
    GilleskieParams p;
    const DDCModel m = build_gilleskie_model(p, 0.9);
    CHECK(m.K == 205);
    check_stochastic(m);
    const Eigen::MatrixXd u = m.utility();
    // t = 0: action 0 gets theta5, others carry the theta4 sentinel
    CHECK(u(0, 0) == doctest::Approx(1.0));
    CHECK(u(0, 1) == doctest::Approx(-1.25 - 10000.0));
    const int x = gilleskie_index(m, 3, 1, 2);
    const double phi = 1.0 / (1.0 + std::exp(-(5.6 - 1.75 * 3)));
    CHECK(u(x, 0) == doctest::Approx(0.0469 * 100.0));
    CHECK(u(x, 1) == doctest::Approx(-1.25 + 0.0469 * 85.0));
    CHECK(u(x, 2) == doctest::Approx(-0.83 + 0.0469 * 100.0 * 0.7 * phi));
    CHECK(u(x, 3) == doctest::Approx(-2.08 + 0.0469 * (100.0 * 0.7 * phi - 15.0)));

    // reachability from (0,0,0) through any actions
    Eigen::MatrixXd reach = Eigen::MatrixXd::Zero(m.K, m.K);
    for (int d = 0; d < 4; ++d) reach += Eigen::MatrixXd(m.G[d]);
    Eigen::VectorXd seen = Eigen::VectorXd::Zero(m.K);
    seen(0) = 1;
    for (int it = 0; it < 12; ++it) seen = (seen + reach.transpose() * seen).cwiseMin(1.0);
    CHECK((seen.array() > 0).all());
}

TEST_CASE("counts from CCPs") {
    Eigen::MatrixXd ccp(3, 2);
    ccp << 0.2, 0.8, 0.5, 0.5, 1.0, 0.0;
    for (double N : {3.0, 10.0}) {
        const PanelCounts c = ccps_to_counts(ccp, N);
        for (int x = 0; x < 3; ++x) CHECK(c.n.row(x).sum() == doctest::Approx(N));
    }
    CHECK_THROWS(ccps_to_counts(ccp, 0.0));
}

TEST_CASE("panel simulation") {
    Rng rng(1);
    const DDCModel m = oracle::random_model(rng, 5, 2, 0.9);
    SimulationDesign des;
    des.n = 200;
    des.T = 6;
    des.initial = Eigen::VectorXd::Constant(5, 0.2);
    Eigen::MatrixXd degenerate = Eigen::MatrixXd::Zero(5, 3);
    degenerate.col(0).setOnes();
    Rng r1(4);
    const Panel p = simulate_panel(m, degenerate, des, r1);
    CHECK(p.records.size() == 1200);
    for (const auto& r : p.records) CHECK(r.d == 0);

    Eigen::MatrixXd ccp(5, 3);
    for (int x = 0; x < 5; ++x) ccp.row(x) << 0.2 + 0.1 * x, 0.3, 0.5 - 0.1 * x;
    Rng a(77), b(77);
    const Panel pa = simulate_panel(m, ccp, des, a);
    const Panel pb = simulate_panel(m, ccp, des, b);
    REQUIRE(pa.records.size() == pb.records.size());
    bool same = true;
    for (std::size_t i = 0; i < pa.records.size(); ++i)
        same = same && pa.records[i].x == pb.records[i].x && pa.records[i].d == pb.records[i].d;
    CHECK(same);
    CHECK((pa.counts.n - counts_from_records(pa.records, 5, 2).n).cwiseAbs().maxCoeff() == 0.0);

    // occupancy at period t is initial^T M^t with M = sum_d diag(p_d) G^d
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(5, 5);
    for (int d = 0; d < 3; ++d) M += ccp.col(d).asDiagonal() * Eigen::MatrixXd(m.G[d]);
    SimulationDesign big = des;
    big.n = 200000;
    big.T = 4;
    Rng c(5);
    const Panel pc = simulate_panel(m, ccp, big, c);
    Eigen::VectorXd freq = Eigen::VectorXd::Zero(5);
    for (const auto& r : pc.records)
        if (r.t == 3) freq(r.x) += 1.0;
    freq /= static_cast<double>(big.n);
    const Eigen::VectorXd law = (des.initial.transpose() * M * M * M).transpose();
    for (int x = 0; x < 5; ++x) CHECK(std::abs(freq(x) - law(x)) < 4 * std::sqrt(law(x) * (1 - law(x)) / big.n));
}

TEST_CASE("CSV round trips") {
    const auto dir = std::filesystem::temp_directory_path() / "ddc_model_csv";
    std::filesystem::create_directories(dir);
    std::vector<PanelRecord> recs{{0, 0, 1, 0}, {0, 1, 2, 1}, {1, 0, 0, 1}};
    write_panel_csv((dir / "panel.csv").string(), recs);
    const auto back = read_panel_csv((dir / "panel.csv").string());
    REQUIRE(back.size() == 3);
    CHECK(back[1].x == 2);
    CHECK(back[1].d == 1);
    PanelCounts c{Eigen::MatrixXd::Zero(3, 2)};
    c.n(1, 1) = 2.5;
    c.n(0, 0) = 1.0 / 3.0;
    write_counts_csv((dir / "counts.csv").string(), c);
    const PanelCounts cb = read_counts_csv((dir / "counts.csv").string(), 3, 1);
    CHECK((cb.n - c.n).cwiseAbs().maxCoeff() == 0.0);
    CHECK_THROWS(read_counts_csv((dir / "counts.csv").string(), 2, 1));
}
