#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ddc/likelihood.hpp"
#include "ddc/mcmc.hpp"
#include "ddc/postprocess.hpp"

namespace ddc {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    std::string preset;
    std::string out = "out";

    // model
    std::string model_kind = "rust";
    RustParams rust;
    GilleskieParams gilleskie;
    double gilleskie_beta = 0.9;
    std::string custom_file;  // JSON with K, J, beta, G, Z, theta

    // data-generating process
    std::string shocks = "logit";  // logit | mixture
    GumbelMixture dgp_mix = GumbelMixture::standard(1);
    double N = 10.0;   // counts per state for count designs
    long n = 100;      // episodes for panel designs
    std::uint64_t data_seed = 1;

    // estimation
    PriorConfig prior;
    std::vector<int> free_idx;   // sampled utility parameters
    std::vector<int> logit_free; // parameters of the dynamic-logit fit
    ChainConfig chain;
    int m_init = 1;
    bool likelihood_off = false;
    SolverConfig solver;

    // reporting
    CounterfactualOverrides counterfactual;
    double alpha = 0.05;
    long report_burn_in = -1;  // -1: use the chain burn-in
    int report_thin = 1;

    nlohmann::json to_json() const;
    std::uint64_t hash() const;  // FNV-1a of the canonical JSON dump
    void validate() const;
};

std::vector<std::string> preset_names();
RunConfig preset(const std::string& name);

// sectioned key = value file; a [run] preset key loads that preset before the other keys apply
RunConfig load_config(const std::string& path);
RunConfig parse_config(const std::string& text);

std::uint64_t fnv1a(const std::string& s);

DDCModel build_model(const RunConfig& cfg);

struct Truth {
    CCPMatrix ccp;
    Eigen::VectorXd Q;
    std::optional<double> visits, visits_cf;
};

Truth compute_truth(const RunConfig& cfg, const DDCModel& model);

struct Dataset {
    PanelCounts counts;
    std::vector<PanelRecord> records;  // empty for count designs
};

// count design (rust, custom): n_dx = p(d|x) N; panel design (gilleskie): n episodes from (1,0,0)
Dataset simulate_data(const RunConfig& cfg, const DDCModel& model, const CCPMatrix& ccp);

struct EstimationSetup {
    Problem problem;
    LogitMleResult logit;
    ChainState init;
    RenormSpec renorm;
    std::vector<int> ccp_states;
};

// fits the dynamic logit, pins the fixed utility parameters at its estimate, and builds the posterior problem
EstimationSetup prepare_estimation(const RunConfig& cfg, const PanelCounts& counts);
DerivedSpec derived_quantities(const EstimationSetup& setup);
ChainConfig chain_config(const RunConfig& cfg, int chain, const std::string& dir);

struct CounterfactualReport {
    std::vector<double> visits, visits_cf;  // per selected draw
    double mean = 0.0, mean_cf = 0.0;
    Interval hpd, hpd_cf, bhat, bhat_cf;
    FunctionalCI logit, logit_cf;
    double ridge = 0.0;
    int ccp_dim = 0;
    long members = 0;
    nlohmann::json to_json() const;
};

CounterfactualReport run_counterfactual(const RunConfig& cfg, const EstimationSetup& setup, const DrawStore& draws);

}  // namespace ddc
