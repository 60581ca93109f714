#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "ddc/likelihood.hpp"
#include "ddc/random.hpp"

namespace ddc {

// log density and gradient; non-finite value or a thrown NumericalError means "outside the support"
using LogTarget = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)>;

struct HMCParams {
    double step = 0.1;
    int leapfrog = 10;
    Eigen::VectorXd inv_mass;  // diagonal; empty means identity
    double jitter = 0.1;       // step multiplied by U(1-jitter, 1+jitter)
};

struct HMCResult {
    Eigen::VectorXd x;
    double logp = 0.0;
    Eigen::VectorXd grad;
    bool accepted = false;
    bool divergent = false;  // non-finite value or gradient along the path
    double accept_prob = 0.0;
    double energy_error = 0.0;
};

HMCResult hmc_step(const LogTarget& target, const Eigen::VectorXd& x, double logp, const Eigen::VectorXd& grad,
                   const HMCParams& p, Rng& rng);

// Nesterov dual averaging of log step size toward a target acceptance rate
class DualAveraging {
public:
    explicit DualAveraging(double step0 = 0.1, double target = 0.7);
    void restart(double step0);
    double update(double accept_prob);  // returns the next step
    double final_step() const { return std::exp(log_step_bar_); }
    int count() const { return t_; }
    nlohmann::json to_json() const;
    void from_json(const nlohmann::json& j);

private:
    double target_, mu_, h_bar_ = 0.0, log_step_ = 0.0, log_step_bar_ = 0.0;
    int t_ = 0;
};

struct AcceptStats {
    long proposed = 0;
    long accepted = 0;
    long rejected = 0;
    long failures = 0;  // numerical failures or fallbacks, a subset of proposed
    double rate() const { return proposed ? static_cast<double>(accepted) / proposed : 0.0; }
    void record(bool ok) {
        ++proposed;
        ok ? ++accepted : ++rejected;
    }
};

struct HMCConfig {
    double step = 0.05;  // initial step before tuning
    int leapfrog = 10;
    double target_accept = 0.7;
    bool adapt = true;
    double jitter = 0.1;
};

struct Schedule {
    long iterations = 1000;  // HMC iterations
    long burn_in = 200;
    int thin = 10;
    int hmc_per_jump = 10;
    bool fixed_m = false;  // skip the reversible jump block
    long checkpoint_every = 1000;  // draws between checkpoints
};

// Reversible jump state: chi plus unnormalized log weights (alpha entries of chi are implied by log_gamma)
struct ExpandedState {
    ChainState s;
    Eigen::VectorXd log_gamma;
};

ExpandedState expand(const ChainState& s, double S, const Problem& p);
ChainState collapse(const ExpandedState& e, const Problem& p);

// joint density of (theta, log sigma, log gamma, mu, log comp_scale, m), up to a constant independent of m
double rj_log_target(PosteriorEvaluator& ev, const ExpandedState& e);

struct LaplaceProposal {
    Eigen::VectorXd mean;  // (mu (J), log comp_scale, log gamma)
    Eigen::MatrixXd chol;  // lower Cholesky factor of the covariance
    bool fallback = false; // prior used as proposal
    int newton_iterations = 0;
    double log_density(const Eigen::VectorXd& psi, const PriorConfig& prior, int m_new) const;
    Eigen::VectorXd draw(const PriorConfig& prior, int m_new, Rng& rng) const;
};

// proposal for component m+1 given an expanded state with m components
LaplaceProposal laplace_proposal(PosteriorEvaluator& ev, const ExpandedState& reduced, int max_newton = 50);

ExpandedState add_component(const ExpandedState& e, const Eigen::VectorXd& psi, const Problem& p);
ExpandedState drop_last_component(const ExpandedState& e, const Problem& p);

// log acceptance ratios; birth appends psi, death removes the last component
double rj_log_ratio_birth(PosteriorEvaluator& ev, const ExpandedState& e, const Eigen::VectorXd& psi,
                          const LaplaceProposal& q);
double rj_log_ratio_death(PosteriorEvaluator& ev, const ExpandedState& e, const LaplaceProposal& q_reverse);

struct RJStats {
    AcceptStats birth, death;
    long fallbacks = 0;
    long solve_failures = 0;  // accepted jumps whose re-evaluation failed, undone
};

// one move: refresh gamma scale, permute labels, propose birth or death with probability 1/2 each
bool rj_step(PosteriorEvaluator& ev, ChainState& s, Rng& rng, RJStats& stats);

// Derived quantities stored with each draw; names fixed for the run.
struct DerivedSpec {
    std::vector<std::string> names;
    std::function<std::vector<double>(const ChainState&, const PosteriorValue&)> compute;
};

struct DrawRecord {
    long iter = 0;
    int m = 1;
    double log_post = 0.0;
    double log_lik = 0.0;
    std::vector<double> derived;
    Eigen::VectorXd chi;
};

struct DrawStore {
    std::vector<std::string> derived_names;
    std::vector<DrawRecord> draws;
    nlohmann::json meta;

    std::vector<double> column(const std::string& name) const;
    void write_csv(const std::string& path) const;
    void append_csv(const std::string& path, std::size_t from) const;
    static DrawStore read_csv(const std::string& path);
};

struct ChainConfig {
    HMCConfig hmc;
    Schedule schedule;
    std::uint64_t seed = 1;
    std::uint64_t stream = 0;     // chain index
    std::string checkpoint_path;  // empty disables checkpoints
    std::string draws_path;       // CSV appended at each checkpoint
};

struct MTuning {
    double step = 0.05;
    Eigen::VectorXd inv_mass;
    DualAveraging da;
    long adapt_iters = 0;
    long window_count = 0;
    Eigen::VectorXd w_mean, w_m2;  // Welford accumulators for the current window
    bool tuned = false;
};

struct ChainResult {
    DrawStore store;
    AcceptStats hmc;
    RJStats rj;
    long divergent = 0;
    ChainState final_state;
    std::map<int, MTuning> tuning;
};

// alternates one rj_step with hmc_per_jump HMC iterations; resumes from checkpoint_path when resume is set
ChainResult run_chain(const Problem& prob, const ChainState& init, const ChainConfig& cfg,
                      const DerivedSpec& derived = {}, bool resume = false);

struct GewekeResult {
    double z = 0.0;
    double p_value = 1.0;
};

// mean equality between the first `early` and last `late` fractions, batch-means variances
GewekeResult geweke(const std::vector<double>& series, double early = 0.1, double late = 0.5);

// integrated autocorrelation time by Geyer's initial positive sequence
double autocorrelation_time(const std::vector<double>& series);

}  // namespace ddc
