#include "ddc/model.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace ddc {

namespace {

double logistic(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

SparseRow to_sparse(const std::vector<Eigen::Triplet<double>>& trip, int K) {
    SparseRow m(K, K);
    m.setFromTriplets(trip.begin(), trip.end());
    m.makeCompressed();
    return m;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
}

}  // namespace

Eigen::MatrixXd DDCModel::utility() const {
    Eigen::MatrixXd u(K, J + 1);
    for (int d = 0; d <= J; ++d) u.col(d) = Z[d] * theta;
    return u;
}

void DDCModel::validate() const {
    if (K < 1 || J < 1) throw std::invalid_argument("DDCModel: K and J must be positive");
    if (!(beta >= 0.0 && beta < 1.0)) throw std::invalid_argument("DDCModel: beta must lie in [0,1)");
    if (static_cast<int>(G.size()) != J + 1 || static_cast<int>(Z.size()) != J + 1)
        throw std::invalid_argument("DDCModel: need one transition and one design matrix per action");
    for (int d = 0; d <= J; ++d) {
        if (G[d].rows() != K || G[d].cols() != K) throw std::invalid_argument("DDCModel: transition shape");
        if (Z[d].rows() != K || Z[d].cols() != theta.size()) throw std::invalid_argument("DDCModel: design shape");
        for (int x = 0; x < K; ++x) {
            double s = 0.0;
            for (SparseRow::InnerIterator it(G[d], x); it; ++it) {
                if (it.value() < 0.0) throw std::invalid_argument("DDCModel: negative transition probability");
                s += it.value();
            }
            if (std::abs(s - 1.0) > 1e-12) throw std::invalid_argument("DDCModel: transition row does not sum to 1");
        }
    }
}

DDCModel build_rust_model(const RustParams& p) {
    if (p.theta2 < 0.0 || p.theta3 < 0.0 || p.theta2 + p.theta3 > 1.0 + 1e-15)
        throw std::invalid_argument("build_rust_model: invalid mileage transition probabilities");
    if (p.K < 2) throw std::invalid_argument("build_rust_model: K must be at least 2");
    const int K = p.K;
    DDCModel m;
    m.kind = "rust";
    m.K = K;
    m.J = 1;
    m.beta = p.beta;
    const double pr[3] = {p.theta2, p.theta3, std::max(0.0, 1.0 - p.theta2 - p.theta3)};
    std::vector<Eigen::Triplet<double>> keep;
    std::vector<Eigen::Triplet<double>> replace;
    for (int x = 0; x < K; ++x) {
        // overflow beyond the last mileage bin stays at K
        std::vector<double> row(K, 0.0);
        for (int s = 0; s < 3; ++s) row[std::min(x + s, K - 1)] += pr[s];
        for (int y = x; y < K && y <= x + 2; ++y)
            if (row[y] > 0.0) keep.emplace_back(x, y, row[y]);
        replace.emplace_back(x, 0, 1.0);
    }
    m.G = {to_sparse(keep, K), to_sparse(replace, K)};
    m.theta = Eigen::Vector2d(p.theta0, p.theta1);
    m.theta_names = {"theta0", "theta1"};
    Eigen::MatrixXd z0(K, 2);
    for (int x = 0; x < K; ++x) {
        z0(x, 0) = 1.0;
        z0(x, 1) = static_cast<double>(x + 1);
    }
    m.Z = {z0, Eigen::MatrixXd::Zero(K, 2)};
    m.validate();
    return m;
}

void GilleskieParams::validate() const {
    if (T < 2) throw std::invalid_argument("GilleskieParams: T must be at least 2");
    if (!(L > 0.0 && L < 1.0)) throw std::invalid_argument("GilleskieParams: L must lie in (0,1)");
    if (!(Y > 0.0)) throw std::invalid_argument("GilleskieParams: Y must be positive");
    if (theta.size() != 6) throw std::invalid_argument("GilleskieParams: theta must have 6 entries");
    if (eta.size() != 9) throw std::invalid_argument("GilleskieParams: eta must have 9 entries");
    if (pi_s && !(*pi_s >= 0.0 && *pi_s <= 1.0)) throw std::invalid_argument("GilleskieParams: pi_s outside [0,1]");
    if (pi_w_table) {
        if (pi_w_table->rows() != gilleskie_state_count(T) || pi_w_table->cols() != 4)
            throw std::invalid_argument("GilleskieParams: recovery table must be K x 4");
        if ((pi_w_table->array() < 0.0).any() || (pi_w_table->array() > 1.0).any())
            throw std::invalid_argument("GilleskieParams: recovery table outside [0,1]");
    }
}

int gilleskie_state_count(int T) { return 1 + T * (T + 1) * (2 * T + 1) / 6; }

int gilleskie_index(const DDCModel& model, int t, int v, int a) {
    if (t == 0) return 0;
    // states of duration s contribute s^2 entries
    int base = 1;
    for (int s = 1; s < t; ++s) base += s * s;
    (void)model;
    return base + v * t + a;
}

DDCModel build_gilleskie_model(const GilleskieParams& p, double beta) {
    p.validate();
    const int T = p.T;
    const int K = gilleskie_state_count(T);
    DDCModel m;
    m.kind = "gilleskie";
    m.K = K;
    m.J = 3;
    m.beta = beta;
    m.gilleskie = p;
    m.states.push_back({0, 0, 0});
    for (int t = 1; t <= T; ++t)
        for (int v = 0; v < t; ++v)
            for (int a = 0; a < t; ++a) m.states.push_back({t, v, a});

    const double pi_s = p.pi_s ? *p.pi_s : 1.0 / (1.0 + std::exp(p.delta_h));
    std::vector<std::vector<Eigen::Triplet<double>>> trip(4);
    for (int x = 0; x < K; ++x) {
        const auto [t, v, a] = m.states[x];
        for (int d = 0; d < 4; ++d) {
            if (t == 0) {
                if (pi_s < 1.0) trip[d].emplace_back(x, 0, 1.0 - pi_s);
                if (pi_s > 0.0) trip[d].emplace_back(x, gilleskie_index(m, 1, 0, 0), pi_s);
                continue;
            }
            if (t == T) {
                trip[d].emplace_back(x, 0, 1.0);
                continue;
            }
            const int vn = v + ((d == 1 || d == 3) ? 1 : 0);
            const int an = a + ((d == 2 || d == 3) ? 1 : 0);
            double pw;
            if (p.pi_w_table) {
                pw = (*p.pi_w_table)(x, d);
            } else {
                const auto& e = p.eta;
                const double z = e[0] + e[1] * vn + e[2] * vn * vn + e[3] * an + e[4] * an * an + e[5] * vn * an +
                                 e[6] * t + e[7] * t * t + e[8] * t * t * t + p.xi_h;
                pw = logistic(z);
            }
            if (pw > 0.0) trip[d].emplace_back(x, 0, pw);
            if (pw < 1.0) trip[d].emplace_back(x, gilleskie_index(m, t + 1, vn, an), 1.0 - pw);
        }
    }
    for (int d = 0; d < 4; ++d) m.G.push_back(to_sparse(trip[d], K));

    m.theta = Eigen::Map<const Eigen::VectorXd>(p.theta.data(), 6);
    m.theta_names = {"theta1", "theta2", "theta3", "theta4", "theta5", "theta6"};
    m.Z.assign(4, Eigen::MatrixXd::Zero(K, 6));
    for (int x = 0; x < K; ++x) {
        const auto [t, v, a] = m.states[x];
        (void)v;
        for (int d = 0; d < 4; ++d) {
            double c = p.Y;
            if (t > 0) {
                const int an = a + ((d == 2 || d == 3) ? 1 : 0);
                const double phi = logistic(p.phi1 + p.phi2 * an);
                if (d == 1 || d == 3) c -= p.PC;
                if (d == 2 || d == 3) c -= p.Y * (1.0 - p.L * phi);
            }
            if (t > 0) m.Z[d](x, 5) = c;
            if (d == 0) {
                m.Z[d](x, 4) = (t == 0) ? 1.0 : 0.0;
            } else {
                m.Z[d](x, d - 1) = 1.0;
                m.Z[d](x, 3) = (t == 0) ? 1.0 : 0.0;
            }
        }
    }
    m.validate();
    return m;
}

DDCModel build_custom_model(int K, int J, double beta, std::vector<Eigen::MatrixXd> G_dense,
                            std::vector<Eigen::MatrixXd> Z, Eigen::VectorXd theta) {
    DDCModel m;
    m.kind = "custom";
    m.K = K;
    m.J = J;
    m.beta = beta;
    for (auto& g : G_dense) {
        if (g.rows() != K || g.cols() != K) throw std::invalid_argument("build_custom_model: transition shape");
        m.G.push_back(g.sparseView());
        m.G.back().makeCompressed();
    }
    m.Z = std::move(Z);
    m.theta = std::move(theta);
    for (int i = 0; i < m.theta.size(); ++i) m.theta_names.push_back("theta" + std::to_string(i + 1));
    m.validate();
    return m;
}

void PanelCounts::validate() const {
    if (n.size() == 0) throw std::invalid_argument("PanelCounts: empty");
    if ((n.array() < 0.0).any() || !n.allFinite()) throw std::invalid_argument("PanelCounts: negative or non-finite count");
    if (!(n.array() > 0.0).any()) throw std::invalid_argument("PanelCounts: all counts are zero");
}

PanelCounts ccps_to_counts(const CCPMatrix& ccp, double N) {
    PanelCounts c{ccp * N};
    c.validate();
    return c;
}

Panel simulate_panel(const DDCModel& model, const CCPMatrix& ccp, const SimulationDesign& design, Rng& rng) {
    if (design.initial.size() != model.K) throw std::invalid_argument("simulate_panel: initial law has wrong size");
    auto draw = [&rng](auto&& prob, int n) {
        double u = uniform_open(rng);
        for (int i = 0; i < n - 1; ++i) {
            u -= prob(i);
            if (u <= 0.0) return i;
        }
        return n - 1;
    };
    Panel panel;
    panel.counts.n = Eigen::MatrixXd::Zero(model.K, model.J + 1);
    for (long i = 0; i < design.n; ++i) {
        int x = draw([&](int s) { return design.initial(s); }, model.K);
        for (int t = 0; t < design.T; ++t) {
            const int d = draw([&](int a) { return ccp(x, a); }, model.J + 1);
            panel.records.push_back({i, t, x, d});
            panel.counts.n(x, d) += 1.0;
            double u = uniform_open(rng);
            int y = -1;
            for (SparseRow::InnerIterator it(model.G[d], x); it; ++it) {
                y = static_cast<int>(it.col());
                u -= it.value();
                if (u <= 0.0) break;
            }
            x = y;
            if (x == design.stop_state) break;
        }
    }
    return panel;
}

void write_panel_csv(const std::string& path, const std::vector<PanelRecord>& records) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "i,t,x,d\n";
    for (const auto& r : records) out << r.i << ',' << r.t << ',' << r.x << ',' << r.d << '\n';
}

std::vector<PanelRecord> read_panel_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::string line;
    std::getline(in, line);
    if (line.rfind("i,t,x,d", 0) != 0) throw std::runtime_error(path + ": expected header i,t,x,d");
    std::vector<PanelRecord> recs;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto c = split_csv(line);
        if (c.size() != 4) throw std::runtime_error(path + ": malformed row");
        recs.push_back({std::stol(c[0]), std::stoi(c[1]), std::stoi(c[2]), std::stoi(c[3])});
    }
    return recs;
}

void write_counts_csv(const std::string& path, const PanelCounts& counts) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "d,x,n\n" << std::setprecision(17);
    for (int d = 0; d < counts.n.cols(); ++d)
        for (int x = 0; x < counts.n.rows(); ++x) out << d << ',' << x << ',' << counts.n(x, d) << '\n';
}

PanelCounts read_counts_csv(const std::string& path, int K, int J) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::string line;
    std::getline(in, line);
    if (line.rfind("d,x,n", 0) != 0) throw std::runtime_error(path + ": expected header d,x,n");
    PanelCounts c{Eigen::MatrixXd::Zero(K, J + 1)};
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = split_csv(line);
        if (f.size() != 3) throw std::runtime_error(path + ": malformed row");
        const int d = std::stoi(f[0]);
        const int x = std::stoi(f[1]);
        if (d < 0 || d > J || x < 0 || x >= K) throw std::runtime_error(path + ": (d,x) outside the model");
        c.n(x, d) += std::stod(f[2]);
    }
    c.validate();
    return c;
}

PanelCounts counts_from_records(const std::vector<PanelRecord>& records, int K, int J) {
    PanelCounts c{Eigen::MatrixXd::Zero(K, J + 1)};
    for (const auto& r : records) {
        if (r.d < 0 || r.d > J || r.x < 0 || r.x >= K) throw std::runtime_error("panel record outside the model");
        c.n(r.x, r.d) += 1.0;
    }
    c.validate();
    return c;
}

}  // namespace ddc
