#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "ddc/random.hpp"

namespace ddc {

using SparseRow = Eigen::SparseMatrix<double, Eigen::RowMajor>;
using CCPMatrix = Eigen::MatrixXd;  // K x (J+1), rows sum to one

struct GilleskieParams {
    int T = 8;
    double Y = 100.0;
    double PC = 15.0;
    double L = 0.7;
    double phi1 = 5.6;
    double phi2 = -1.75;
    // theta1..theta6 stored at indices 0..5
    std::vector<double> theta{-1.25, -0.83, -2.08, -10000.0, 1.0, 0.0469};
    // recovery logit coefficients on (1, v', v'^2, a', a'^2, v'a', t, t^2, t^3); xi_h plays xi'H
    // placeholder values, not estimates: the intercept puts E(v) near 1.49 under the mixture DGP
    std::vector<double> eta{-3.85, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
    double xi_h = 0.0;
    double delta_h = 2.0;  // pi_S = 1/(1+exp(delta_h))
    // optional explicit tables; recovery table is K x 4
    std::optional<Eigen::MatrixXd> pi_w_table;
    std::optional<double> pi_s;

    void validate() const;
};

struct GilleskieState {
    int t = 0;
    int v = 0;
    int a = 0;
};

// Finite-state model with per-action transitions and utilities linear in theta:
// u(x,d) = Z[d].row(x) . theta
struct DDCModel {
    std::string kind = "custom";
    int K = 0;
    int J = 0;
    double beta = 0.0;
    std::vector<SparseRow> G;           // J+1 matrices, K x K
    std::vector<Eigen::MatrixXd> Z;     // J+1 matrices, K x dim(theta)
    Eigen::VectorXd theta;
    std::vector<std::string> theta_names;
    std::optional<GilleskieParams> gilleskie;
    std::vector<GilleskieState> states;  // gilleskie only

    int n_actions() const { return J + 1; }
    int n_theta() const { return static_cast<int>(theta.size()); }
    Eigen::MatrixXd utility() const;  // K x (J+1)
    void validate() const;
};

struct RustParams {
    double theta0 = 5.0727;
    double theta1 = -0.002293;
    double theta2 = 0.3919;
    double theta3 = 0.5953;
    double beta = 0.999;
    int K = 90;
};

DDCModel build_rust_model(const RustParams& p);
DDCModel build_gilleskie_model(const GilleskieParams& p, double beta);
DDCModel build_custom_model(int K, int J, double beta, std::vector<Eigen::MatrixXd> G_dense,
                            std::vector<Eigen::MatrixXd> Z, Eigen::VectorXd theta);

int gilleskie_state_count(int T);
int gilleskie_index(const DDCModel& model, int t, int v, int a);

struct PanelCounts {
    Eigen::MatrixXd n;  // K x (J+1)
    void validate() const;
    double total() const { return n.sum(); }
};

struct PanelRecord {
    long i = 0;
    int t = 0;
    int x = 0;
    int d = 0;
};

struct Panel {
    std::vector<PanelRecord> records;
    PanelCounts counts;
};

PanelCounts ccps_to_counts(const CCPMatrix& ccp, double N);

struct SimulationDesign {
    long n = 100;
    int T = 8;
    Eigen::VectorXd initial;       // law of the first state
    int stop_state = -1;           // record ends on entering this state after the first period
};

Panel simulate_panel(const DDCModel& model, const CCPMatrix& ccp, const SimulationDesign& design, Rng& rng);

void write_panel_csv(const std::string& path, const std::vector<PanelRecord>& records);
std::vector<PanelRecord> read_panel_csv(const std::string& path);
void write_counts_csv(const std::string& path, const PanelCounts& counts);
PanelCounts read_counts_csv(const std::string& path, int K, int J);
PanelCounts counts_from_records(const std::vector<PanelRecord>& records, int K, int J);

}  // namespace ddc
