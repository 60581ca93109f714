#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "ddc/mcmc.hpp"
#include "ddc/mixture.hpp"
#include "ddc/model.hpp"
#include "ddc/numerics.hpp"

namespace ddc {

// Which theta entries act as intercepts of actions 1..J, and with which sign the
// mixture mean enters them (an intercept on action 0 enters with -1).
struct RenormSpec {
    std::vector<int> intercept_index;
    std::vector<double> intercept_sign;
    int scale_coord = 0;

    static RenormSpec rust();
    static RenormSpec gilleskie();
    static RenormSpec for_model(const DDCModel& model);
};

struct RenormalizedDraw {
    Eigen::VectorXd theta;
    double s = 1.0;
    Eigen::VectorXd mix_mean;
};

// s * (theta with intercepts shifted by the mixture mean)
RenormalizedDraw renormalize_draw(const Eigen::VectorXd& theta, const GumbelMixture& mix, const RenormSpec& spec);

// stacks p(d|x), d = 1..J, over the listed states
Eigen::VectorXd stack_ccp(const CCPMatrix& ccp, const std::vector<int>& states);
std::vector<int> occupied_states(const PanelCounts& counts);

struct CCPCredibleSet {
    Eigen::VectorXd center;
    Eigen::MatrixXd cov;
    double threshold = 0.0;
    double alpha = 0.05;
    double ridge = 0.0;  // added to the diagonal when cov is singular
    Eigen::LLT<Eigen::MatrixXd> chol;

    int dim() const { return static_cast<int>(center.size()); }
    double distance2(const Eigen::VectorXd& p) const;
    bool contains(const Eigen::VectorXd& p) const { return distance2(p) <= threshold; }
};

CCPCredibleSet ccp_credible_set(const std::vector<Eigen::VectorXd>& draws, double alpha);

// [min, max] of eta over draws whose CCP vector lies in the set
Interval identified_set_interval(const std::vector<Eigen::VectorXd>& ccp_draws, const std::vector<double>& eta,
                                 const CCPCredibleSet& set);

// expected doctor visits in one illness episode started at (1,0,0)
double expected_visits(const DDCModel& model, const CCPMatrix& ccp);

struct EpisodeSimulation {
    double mean = 0.0;
    double se = 0.0;
};
EpisodeSimulation simulate_visits(const DDCModel& model, const CCPMatrix& ccp, long episodes, Rng& rng);

struct CounterfactualOverrides {
    std::optional<double> PC, L, Y;
    bool empty() const { return !PC && !L && !Y; }
};

DDCModel counterfactual_model(const DDCModel& model, const CounterfactualOverrides& ov);

struct FunctionalSummary {
    std::string name;
    long n = 0;
    double mean = 0.0;
    double sd = 0.0;
    Interval hpd;
    Interval bhat{std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
    std::vector<double> geweke_p;  // per chain; NaN below 100 draws
    std::vector<double> act;
};

struct PosteriorSummary {
    long draws = 0;
    int chains = 0;
    std::vector<FunctionalSummary> functionals;
    std::map<int, double> m_pmf;
    // CCP credible set behind the bhat intervals
    int ccp_dim = 0;
    long ccp_members = 0;
    double ccp_ridge = 0.0;
    std::string bhat_note;  // why bhat is missing, if it is
    nlohmann::json to_json() const;
};

// keeps draws with iter > burn_in, then every thin-th of those
DrawStore select_draws(const DrawStore& store, long burn_in, int thin);
DrawStore merge_stores(const std::vector<DrawStore>& chains);

// pooled moments, HPD and bhat (from the ccp_* columns at level alpha); diagnostics per chain
PosteriorSummary summarize(const std::vector<DrawStore>& chains, long burn_in = 0, int thin = 1, double mass = 0.95,
                           double alpha = 0.05);
PosteriorSummary summarize(const DrawStore& store, long burn_in = 0, int thin = 1, double mass = 0.95,
                           double alpha = 0.05);

}  // namespace ddc
