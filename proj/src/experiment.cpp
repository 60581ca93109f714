#include "ddc/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "ddc/dp_solver.hpp"

namespace ddc {

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

namespace {

nlohmann::json mixture_json(const NormalMixture1D& p) { return {{"weights", p.w}, {"means", p.mean}, {"sds", p.sd}}; }

std::vector<double> vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

GumbelMixture gilleskie_dgp_mixture() {
    GumbelMixture g;
    g.weights = Eigen::Vector2d(0.5568, 0.4432);
    g.mu.resize(2, 3);
    g.mu << -0.4683, 3.4628, -0.0914, 0.9798, -2.2437, 1.3496;
    g.comp_scale = Eigen::Vector2d(3.7045, 0.6378);
    g.scale = 1.0;
    return g;
}

}  // namespace

nlohmann::json RunConfig::to_json() const {
    nlohmann::json j;
    j["preset"] = preset;
    j["out"] = out;
    nlohmann::json m;
    m["kind"] = model_kind;
    if (model_kind == "rust") {
        m["theta"] = {rust.theta0, rust.theta1};
        m["transition"] = {rust.theta2, rust.theta3};
        m["beta"] = rust.beta;
        m["K"] = rust.K;
    } else if (model_kind == "gilleskie") {
        const auto& g = gilleskie;
        m["beta"] = gilleskie_beta;
        m["T"] = g.T;
        m["Y"] = g.Y;
        m["PC"] = g.PC;
        m["L"] = g.L;
        m["phi1"] = g.phi1;
        m["phi2"] = g.phi2;
        m["theta"] = g.theta;
        m["eta"] = g.eta;
        m["xi_h"] = g.xi_h;
        m["delta_h"] = g.delta_h;
        m["transitions_note"] = "eta, xi_h, delta_h are placeholders, not published estimates";
    } else {
        m["file"] = custom_file;
    }
    j["model"] = m;
    nlohmann::json d;
    d["shocks"] = shocks;
    if (shocks == "mixture") {
        d["weights"] = vec(dgp_mix.weights);
        std::vector<double> mu;
        for (int k = 0; k < dgp_mix.m(); ++k)
            for (int c = 0; c < dgp_mix.dim(); ++c) mu.push_back(dgp_mix.mu(k, c));
        d["mu"] = mu;
        d["sigma"] = vec(dgp_mix.comp_scale * dgp_mix.scale);
    }
    d["N"] = N;
    d["n"] = n;
    d["seed"] = data_seed;
    j["dgp"] = d;
    nlohmann::json p;
    p["a_bar"] = prior.a_bar;
    p["A_m"] = prior.A_m;
    p["tau"] = prior.tau;
    p["m_max"] = prior.m_max;
    p["mu"] = mixture_json(prior.mu_prior);
    p["log_comp_scale"] = mixture_json(prior.log_comp_scale_prior);
    p["log_scale"] = mixture_json(prior.log_scale_prior);
    nlohmann::json th = nlohmann::json::array();
    for (const auto& t : prior.theta_prior) th.push_back(mixture_json(t));
    p["theta"] = th;
    p["free"] = free_idx;
    p["logit_free"] = logit_free;
    j["prior"] = p;
    const auto& s = chain.schedule;
    j["mcmc"] = {{"iterations", s.iterations},   {"burn_in", s.burn_in},
                 {"thin", s.thin},               {"hmc_per_jump", s.hmc_per_jump},
                 {"fixed_m", s.fixed_m},         {"checkpoint_every", s.checkpoint_every},
                 {"seed", chain.seed},           {"step", chain.hmc.step},
                 {"leapfrog", chain.hmc.leapfrog}, {"target_accept", chain.hmc.target_accept},
                 {"adapt", chain.hmc.adapt},     {"jitter", chain.hmc.jitter},
                 {"m_init", m_init},             {"likelihood", !likelihood_off},
                 {"solver_tol", solver.tol}};
    nlohmann::json c;
    if (counterfactual.PC) c["PC"] = *counterfactual.PC;
    if (counterfactual.L) c["L"] = *counterfactual.L;
    if (counterfactual.Y) c["Y"] = *counterfactual.Y;
    c["alpha"] = alpha;
    c["burn_in"] = report_burn_in;
    c["thin"] = report_thin;
    j["report"] = c;
    return j;
}

std::uint64_t RunConfig::hash() const { return fnv1a(to_json().dump()); }

void RunConfig::validate() const {
    if (model_kind != "rust" && model_kind != "gilleskie" && model_kind != "custom")
        throw ConfigError("model.kind must be rust, gilleskie or custom");
    if (model_kind == "custom" && custom_file.empty()) throw ConfigError("model.file is required for custom models");
    if (shocks != "logit" && shocks != "mixture") throw ConfigError("dgp.shocks must be logit or mixture");
    if (!(N > 0.0)) throw ConfigError("dgp.N must be positive");
    if (n < 1) throw ConfigError("dgp.n must be positive");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("report.alpha must lie in (0,1)");
    if (m_init < 1 || m_init > prior.m_max) throw ConfigError("mcmc.m_init must lie in [1, prior.m_max]");
    if (chain.schedule.iterations < 0 || chain.schedule.burn_in < 0 || chain.schedule.thin < 1 ||
        chain.schedule.hmc_per_jump < 1)
        throw ConfigError("mcmc schedule entries must be non-negative (thin, hmc_per_jump positive)");
    if (report_thin < 1) throw ConfigError("report.thin must be positive");
    if (!prior.theta_prior.empty() && prior.theta_prior.size() != free_idx.size())
        throw ConfigError("prior.theta_means/theta_sds need one entry per free parameter");
    try {
        prior.validate();
        if (shocks == "mixture") dgp_mix.validate();
        if (model_kind == "gilleskie") gilleskie.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

std::vector<std::string> preset_names() { return {"rust-n3", "rust-n10", "rust-n100", "gilleskie-mix", "gilleskie-logit"}; }

RunConfig preset(const std::string& name) {
    RunConfig c;
    c.preset = name;
    c.chain.seed = 1;
    c.data_seed = 1;
    if (name.rfind("rust-n", 0) == 0) {
        const std::string n = name.substr(6);
        if (n != "3" && n != "10" && n != "100") throw ConfigError("unknown preset " + name);
        c.model_kind = "rust";
        c.shocks = "logit";
        c.N = std::stod(n);
        c.prior.mu_prior = {{0.5, 0.5}, {2.5, -3.0}, {1.0, 7.0}};
        c.prior.log_comp_scale_prior = {{0.4, 0.6}, {0.0, -6.0}, {1.0, 1.0}};
        c.prior.log_scale_prior = NormalMixture1D::normal(0.0, 0.01);
        c.free_idx = {};
        c.logit_free = {0, 1};
        c.chain.schedule.iterations = 100000;
        c.chain.schedule.burn_in = 20000;
        c.out = "out/" + name;
        return c;
    }
    if (name == "gilleskie-mix" || name == "gilleskie-logit") {
        c.model_kind = "gilleskie";
        c.gilleskie_beta = 0.9;
        c.shocks = name == "gilleskie-mix" ? "mixture" : "logit";
        c.dgp_mix = name == "gilleskie-mix" ? gilleskie_dgp_mixture() : GumbelMixture::standard(3);
        c.n = 100;
        c.prior.mu_prior = NormalMixture1D::normal(0.0, 2.0);
        c.prior.log_comp_scale_prior = NormalMixture1D::normal(0.0, 1.0);
        c.prior.log_scale_prior = NormalMixture1D::normal(0.0, 0.01);
        c.free_idx = {5};
        c.prior.theta_prior = {NormalMixture1D::normal(0.0, 4.0)};
        c.logit_free = {0, 1, 2, 5};
        c.chain.schedule.iterations = 20000;
        c.chain.schedule.burn_in = 4000;
        c.counterfactual.PC = 0.0;
        c.out = "out/" + name;
        return c;
    }
    throw ConfigError("unknown preset " + name);
}

namespace {

namespace pt = boost::property_tree;

class Reader {
public:
    explicit Reader(const pt::ptree& t) : tree_(t) {
        for (const auto& [sec, body] : t) {
            if (body.empty() && !body.data().empty()) throw ConfigError("key '" + sec + "' outside a section");
            for (const auto& [key, v] : body) {
                (void)v;
                all_.insert(sec + "." + key);
            }
        }
    }

    std::optional<std::string> raw(const std::string& key) {
        const auto v = tree_.get_optional<std::string>(key);
        if (!v) return std::nullopt;
        used_.insert(key);
        return *v;
    }

    template <class T>
    void get(const std::string& key, T& out) {
        const auto v = raw(key);
        if (!v) return;
        out = convert<T>(key, trim(*v));
    }

    void get_list(const std::string& key, std::vector<double>& out) {
        const auto v = raw(key);
        if (v) out = list(key, *v);
    }

    void get_int_list(const std::string& key, std::vector<int>& out) {
        const auto v = raw(key);
        if (!v) return;
        out.clear();
        for (double d : list(key, *v)) {
            if (d != std::floor(d)) throw ConfigError(key + ": expected integers");
            out.push_back(static_cast<int>(d));
        }
    }

    void check_all_used() const {
        for (const auto& k : all_)
            if (!used_.count(k)) throw ConfigError("unknown config key '" + k + "'");
    }

    static std::vector<double> list(const std::string& key, std::string s) {
        s = trim(s);
        if (s.size() < 2 || s.front() != '[' || s.back() != ']') throw ConfigError(key + ": expected [a, b, ...]");
        s = s.substr(1, s.size() - 2);
        std::vector<double> out;
        std::stringstream ss(s);
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (item.empty()) {
                if (out.empty() && trim(s).empty()) break;
                throw ConfigError(key + ": empty list entry");
            }
            out.push_back(convert<double>(key, item));
        }
        return out;
    }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return "";
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    }

    template <class T>
    static T convert(const std::string& key, const std::string& v) {
        try {
            std::size_t pos = 0;
            if constexpr (std::is_same_v<T, std::string>) {
                return v;
            } else if constexpr (std::is_same_v<T, bool>) {
                if (v == "true" || v == "on" || v == "1") return true;
                if (v == "false" || v == "off" || v == "0") return false;
                throw ConfigError(key + ": expected true/false");
            } else if constexpr (std::is_same_v<T, std::uint64_t>) {
                if (v.empty() || v[0] == '-') throw std::invalid_argument("negative");
                const T r = std::stoull(v, &pos);
                if (pos != v.size()) throw std::invalid_argument("trailing");
                return r;
            } else if constexpr (std::is_integral_v<T>) {
                const long long r = std::stoll(v, &pos);
                if (pos != v.size()) throw std::invalid_argument("trailing");
                return static_cast<T>(r);
            } else {
                const double r = std::stod(v, &pos);
                if (pos != v.size()) throw std::invalid_argument("trailing");
                return r;
            }
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            throw ConfigError(key + ": cannot parse '" + v + "'");
        }
    }

    const pt::ptree& tree_;
    std::set<std::string> all_, used_;
};

void read_normal_mixture(Reader& r, const std::string& prefix, NormalMixture1D& p) {
    r.get_list(prefix + "_weights", p.w);
    r.get_list(prefix + "_means", p.mean);
    r.get_list(prefix + "_sds", p.sd);
}

}  // namespace

RunConfig parse_config(const std::string& text) {
    // '#' comments are accepted alongside ';'
    std::stringstream in(text), clean;
    std::string line;
    while (std::getline(in, line)) {
        const auto b = line.find_first_not_of(" \t");
        if (b != std::string::npos && line[b] == '#') continue;
        clean << line << '\n';
    }
    pt::ptree tree;
    try {
        pt::read_ini(clean, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("config syntax: ") + e.what());
    }
    Reader r(tree);
    RunConfig c;
    std::string pre;
    r.get("run.preset", pre);
    if (!pre.empty()) c = preset(pre);
    r.get("run.out", c.out);

    r.get("model.kind", c.model_kind);
    std::vector<double> v;
    if (c.model_kind == "rust") {
        auto& p = c.rust;
        v.clear();
        r.get_list("model.theta", v);
        if (!v.empty()) {
            if (v.size() != 2) throw ConfigError("model.theta: rust needs 2 entries");
            p.theta0 = v[0];
            p.theta1 = v[1];
        }
        v.clear();
        r.get_list("model.transition", v);
        if (!v.empty()) {
            if (v.size() != 2) throw ConfigError("model.transition: rust needs 2 entries");
            p.theta2 = v[0];
            p.theta3 = v[1];
        }
        r.get("model.beta", p.beta);
        r.get("model.K", p.K);
    } else if (c.model_kind == "gilleskie") {
        auto& g = c.gilleskie;
        r.get("model.beta", c.gilleskie_beta);
        r.get("model.T", g.T);
        r.get("model.Y", g.Y);
        r.get("model.PC", g.PC);
        r.get("model.L", g.L);
        r.get("model.phi1", g.phi1);
        r.get("model.phi2", g.phi2);
        r.get_list("model.theta", g.theta);
        r.get_list("model.eta", g.eta);
        r.get("model.xi_h", g.xi_h);
        r.get("model.delta_h", g.delta_h);
    } else {
        r.get("model.file", c.custom_file);
    }

    r.get("dgp.shocks", c.shocks);
    {
        std::vector<double> w, mu, sg;
        r.get_list("dgp.weights", w);
        r.get_list("dgp.mu", mu);
        r.get_list("dgp.sigma", sg);
        if (!w.empty() || !mu.empty() || !sg.empty()) {
            const int m = static_cast<int>(w.size());
            if (m == 0 || sg.size() != w.size() || mu.size() % w.size() != 0)
                throw ConfigError("dgp mixture: weights, sigma need m entries and mu m*J entries");
            const int J = static_cast<int>(mu.size()) / m;
            GumbelMixture g;
            g.weights = Eigen::Map<Eigen::VectorXd>(w.data(), m);
            g.mu.resize(m, J);
            for (int k = 0; k < m; ++k)
                for (int j = 0; j < J; ++j) g.mu(k, j) = mu[k * J + j];
            g.comp_scale = Eigen::Map<Eigen::VectorXd>(sg.data(), m);
            g.scale = 1.0;
            c.dgp_mix = g;
        }
    }
    r.get("dgp.N", c.N);
    r.get("dgp.n", c.n);
    r.get("dgp.seed", c.data_seed);

    auto& pr = c.prior;
    r.get("prior.a_bar", pr.a_bar);
    r.get("prior.A_m", pr.A_m);
    r.get("prior.tau", pr.tau);
    r.get("prior.m_max", pr.m_max);
    read_normal_mixture(r, "prior.mu", pr.mu_prior);
    read_normal_mixture(r, "prior.log_comp_scale", pr.log_comp_scale_prior);
    read_normal_mixture(r, "prior.log_scale", pr.log_scale_prior);
    r.get_int_list("prior.free", c.free_idx);
    r.get_int_list("prior.logit_free", c.logit_free);
    {
        std::vector<double> tm, ts;
        r.get_list("prior.theta_means", tm);
        r.get_list("prior.theta_sds", ts);
        if (tm.size() != ts.size()) throw ConfigError("prior.theta_means and theta_sds differ in length");
        if (!tm.empty()) {
            pr.theta_prior.clear();
            for (std::size_t i = 0; i < tm.size(); ++i) pr.theta_prior.push_back(NormalMixture1D::normal(tm[i], ts[i]));
        }
    }

    auto& s = c.chain.schedule;
    r.get("mcmc.iterations", s.iterations);
    r.get("mcmc.burn_in", s.burn_in);
    r.get("mcmc.thin", s.thin);
    r.get("mcmc.hmc_per_jump", s.hmc_per_jump);
    r.get("mcmc.fixed_m", s.fixed_m);
    r.get("mcmc.checkpoint_every", s.checkpoint_every);
    r.get("mcmc.seed", c.chain.seed);
    r.get("mcmc.step", c.chain.hmc.step);
    r.get("mcmc.leapfrog", c.chain.hmc.leapfrog);
    r.get("mcmc.target_accept", c.chain.hmc.target_accept);
    r.get("mcmc.adapt", c.chain.hmc.adapt);
    r.get("mcmc.jitter", c.chain.hmc.jitter);
    r.get("mcmc.m_init", c.m_init);
    bool lik = !c.likelihood_off;
    r.get("mcmc.likelihood", lik);
    c.likelihood_off = !lik;
    r.get("mcmc.solver_tol", c.solver.tol);

    double x = 0.0;
    if (r.raw("counterfactual.PC")) r.get("counterfactual.PC", x), c.counterfactual.PC = x;
    if (r.raw("counterfactual.L")) r.get("counterfactual.L", x), c.counterfactual.L = x;
    if (r.raw("counterfactual.Y")) r.get("counterfactual.Y", x), c.counterfactual.Y = x;
    r.get("report.alpha", c.alpha);
    r.get("report.burn_in", c.report_burn_in);
    r.get("report.thin", c.report_thin);

    r.check_all_used();
    c.validate();
    return c;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

DDCModel build_model(const RunConfig& cfg) {
    try {
        if (cfg.model_kind == "rust") return build_rust_model(cfg.rust);
        if (cfg.model_kind == "gilleskie") return build_gilleskie_model(cfg.gilleskie, cfg.gilleskie_beta);
        std::ifstream in(cfg.custom_file);
        if (!in) throw ConfigError("cannot read model file " + cfg.custom_file);
        const nlohmann::json j = nlohmann::json::parse(in);
        const int K = j.at("K"), J = j.at("J");
        std::vector<Eigen::MatrixXd> G, Z;
        for (const auto& g : j.at("G")) {
            Eigen::MatrixXd m(K, K);
            for (int x = 0; x < K; ++x)
                for (int y = 0; y < K; ++y) m(x, y) = g.at(x).at(y);
            G.push_back(m);
        }
        const std::vector<double> th = j.at("theta");
        for (const auto& z : j.at("Z")) {
            Eigen::MatrixXd m(K, static_cast<Eigen::Index>(th.size()));
            for (int x = 0; x < K; ++x)
                for (std::size_t p = 0; p < th.size(); ++p) m(x, static_cast<Eigen::Index>(p)) = z.at(x).at(p);
            Z.push_back(m);
        }
        return build_custom_model(K, J, j.at("beta"), G, Z, Eigen::Map<const Eigen::VectorXd>(th.data(), th.size()));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model file: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

Truth compute_truth(const RunConfig& cfg, const DDCModel& model) {
    Truth t;
    auto solve = [&](const DDCModel& m) {
        const EmaxSolution s = cfg.shocks == "logit" ? solve_logit(m, cfg.solver) : solve_emax(m, cfg.dgp_mix, cfg.solver);
        if (!s.converged) throw NumericalError("DGP dynamic program did not converge");
        return s;
    };
    if (cfg.shocks == "mixture" && cfg.dgp_mix.dim() != model.J)
        throw ConfigError("dgp mixture dimension differs from the number of actions");
    const EmaxSolution s = solve(model);
    t.ccp = s.ccp;
    t.Q = s.Q;
    if (model.kind == "gilleskie") {
        t.visits = expected_visits(model, s.ccp);
        CounterfactualOverrides ov = cfg.counterfactual;
        const DDCModel cf = counterfactual_model(model, ov);
        t.visits_cf = expected_visits(cf, solve(cf).ccp);
    }
    return t;
}

Dataset simulate_data(const RunConfig& cfg, const DDCModel& model, const CCPMatrix& ccp) {
    Dataset d;
    if (model.kind != "gilleskie") {
        d.counts = ccps_to_counts(ccp, cfg.N);
        return d;
    }
    Rng rng = make_stream(cfg.data_seed, 0);
    SimulationDesign des;
    des.n = cfg.n;
    des.T = model.gilleskie->T;
    des.initial = Eigen::VectorXd::Zero(model.K);
    des.initial(gilleskie_index(model, 1, 0, 0)) = 1.0;
    des.stop_state = 0;
    Panel p = simulate_panel(model, ccp, des, rng);
    d.counts = p.counts;
    d.records = std::move(p.records);
    return d;
}

EstimationSetup prepare_estimation(const RunConfig& cfg, const PanelCounts& counts) {
    EstimationSetup s;
    DDCModel model = build_model(cfg);
    if (counts.n.rows() != model.K || counts.n.cols() != model.J + 1)
        throw ConfigError("data shape differs from the model state and action counts");
    for (int i : cfg.free_idx)
        if (i < 0 || i >= model.n_theta()) throw ConfigError("prior.free index out of range");
    for (int i : cfg.logit_free)
        if (i < 0 || i >= model.n_theta()) throw ConfigError("prior.logit_free index out of range");
    LogitMleConfig lc;
    lc.seed = cfg.data_seed;
    lc.solver = cfg.solver;
    if (!cfg.logit_free.empty()) {
        s.logit = logit_mle(counts, model, cfg.logit_free, lc);
        model.theta = s.logit.theta_full;
    } else {
        s.logit.theta_full = model.theta;
    }
    s.problem.model = model;
    s.problem.counts = counts;
    s.problem.free_idx = cfg.free_idx;
    s.problem.prior = cfg.prior;
    s.problem.solver = cfg.solver;
    s.problem.likelihood_off = cfg.likelihood_off;

    GumbelMixture mix;
    const int m = cfg.m_init;
    mix.weights = Eigen::VectorXd::Constant(m, 1.0 / m);
    mix.mu = Eigen::MatrixXd::Zero(m, model.J);
    mix.comp_scale = Eigen::VectorXd::Ones(m);
    Eigen::VectorXd th(static_cast<Eigen::Index>(cfg.free_idx.size()));
    for (std::size_t i = 0; i < cfg.free_idx.size(); ++i) th(static_cast<Eigen::Index>(i)) = model.theta(cfg.free_idx[i]);
    s.init = {m, transform(th, mix)};
    if (model.kind != "custom") s.renorm = RenormSpec::for_model(model);
    s.ccp_states = occupied_states(counts);
    return s;
}

DerivedSpec derived_quantities(const EstimationSetup& setup) {
    const Problem& p = setup.problem;
    DerivedSpec d;
    const bool renorm = !setup.renorm.intercept_index.empty();
    if (renorm) {
        for (int i = 0; i < p.model.n_theta(); ++i) d.names.push_back("theta_renorm_" + std::to_string(i + 1));
        d.names.push_back("s");
    }
    for (int j = 0; j < p.J(); ++j) d.names.push_back("mix_mean_" + std::to_string(j + 1));
    const int nccp = static_cast<int>(setup.ccp_states.size()) * p.J();
    for (int i = 0; i < nccp; ++i) d.names.push_back("ccp_" + std::to_string(i + 1));
    const bool gill = p.model.kind == "gilleskie";
    if (gill) d.names.push_back("functional_Ev");

    const EstimationSetup* sp = &setup;
    d.compute = [sp, renorm, gill](const ChainState& s, const PosteriorValue& v) {
        const Problem& p = sp->problem;
        const GumbelMixture mix = untransform(s.chi, p.layout(s.m));
        Eigen::VectorXd theta = p.model.theta;
        for (int i = 0; i < p.F(); ++i) theta(p.free_idx[i]) = s.chi(i);
        std::vector<double> out;
        if (renorm) {
            const RenormalizedDraw r = renormalize_draw(theta, mix, sp->renorm);
            out.insert(out.end(), r.theta.data(), r.theta.data() + r.theta.size());
            out.push_back(r.s);
        }
        const Eigen::VectorXd mm = mixture_mean(mix);
        out.insert(out.end(), mm.data(), mm.data() + mm.size());
        CCPMatrix ccp = v.sol.ccp;
        if (ccp.rows() != p.model.K) {
            DDCModel m = p.model;
            m.theta = theta;
            ccp = solve_emax(m, mix, p.solver).ccp;
        }
        const Eigen::VectorXd st = stack_ccp(ccp, sp->ccp_states);
        out.insert(out.end(), st.data(), st.data() + st.size());
        if (gill) out.push_back(expected_visits(p.model, ccp));
        return out;
    };
    return d;
}

ChainConfig chain_config(const RunConfig& cfg, int chain, const std::string& dir) {
    ChainConfig c = cfg.chain;
    c.stream = static_cast<std::uint64_t>(chain);
    if (!dir.empty()) {
        const std::filesystem::path d(dir);
        c.checkpoint_path = (d / ("checkpoint_chain" + std::to_string(chain) + ".json")).string();
        c.draws_path = (d / ("draws_chain" + std::to_string(chain) + ".csv")).string();
    }
    return c;
}

nlohmann::json CounterfactualReport::to_json() const {
    auto iv = [](const Interval& i) { return nlohmann::json::array({i.lo, i.hi}); };
    auto ci = [&](const FunctionalCI& c) {
        return nlohmann::json{{"value", c.value}, {"se", c.se}, {"ci", iv(c.ci)}, {"ci_length", c.ci.length()}};
    };
    return {{"draws", visits.size()},
            {"ccp_dim", ccp_dim},
            {"ridge", ridge},
            {"credible_set_members", members},
            {"Ev", {{"posterior_mean", mean}, {"hpd", iv(hpd)}, {"hpd_length", hpd.length()}, {"bhat", iv(bhat)},
                    {"bhat_length", bhat.length()}, {"logit_mle", ci(logit)}}},
            {"cf_Ev", {{"posterior_mean", mean_cf}, {"hpd", iv(hpd_cf)}, {"hpd_length", hpd_cf.length()},
                       {"bhat", iv(bhat_cf)}, {"bhat_length", bhat_cf.length()}, {"logit_mle", ci(logit_cf)}}}};
}

CounterfactualReport run_counterfactual(const RunConfig& cfg, const EstimationSetup& setup, const DrawStore& store) {
    const Problem& p = setup.problem;
    if (p.model.kind != "gilleskie") throw ConfigError("counterfactuals need a Gilleskie model");
    const long burn = cfg.report_burn_in >= 0 ? cfg.report_burn_in : cfg.chain.schedule.burn_in;
    const DrawStore sel = select_draws(store, burn, cfg.report_thin);
    if (sel.draws.empty()) throw ConfigError("no draws after burn-in");

    CounterfactualReport r;
    const int nccp = static_cast<int>(setup.ccp_states.size()) * p.J();
    r.ccp_dim = nccp;
    std::vector<Eigen::VectorXd> ccp_draws;
    std::vector<std::vector<double>> cols;
    for (int i = 0; i < nccp; ++i) cols.push_back(sel.column("ccp_" + std::to_string(i + 1)));
    Eigen::VectorXd warm, warm_cf;
    for (std::size_t l = 0; l < sel.draws.size(); ++l) {
        const DrawRecord& d = sel.draws[l];
        Eigen::VectorXd c(nccp);
        for (int i = 0; i < nccp; ++i) c(i) = cols[i][l];
        ccp_draws.push_back(c);
        const GumbelMixture mix = untransform(d.chi, p.layout(d.m));
        DDCModel m = p.model;
        for (int i = 0; i < p.F(); ++i) m.theta(p.free_idx[i]) = d.chi(i);
        const EmaxSolution s = solve_emax(m, mix, p.solver, warm.size() ? &warm : nullptr);
        const DDCModel cf = counterfactual_model(m, cfg.counterfactual);
        const EmaxSolution sc = solve_emax(cf, mix, p.solver, warm_cf.size() ? &warm_cf : nullptr);
        if (!s.converged || !sc.converged) throw NumericalError("counterfactual solve did not converge");
        warm = s.Q;
        warm_cf = sc.Q;
        r.visits.push_back(expected_visits(m, s.ccp));
        r.visits_cf.push_back(expected_visits(cf, sc.ccp));
    }
    auto mean = [](const std::vector<double>& x) {
        double s = 0.0;
        for (double v : x) s += v;
        return s / static_cast<double>(x.size());
    };
    r.mean = mean(r.visits);
    r.mean_cf = mean(r.visits_cf);
    r.hpd = hpd_interval_unsorted(r.visits, 1.0 - cfg.alpha);
    r.hpd_cf = hpd_interval_unsorted(r.visits_cf, 1.0 - cfg.alpha);
    const CCPCredibleSet set = ccp_credible_set(ccp_draws, cfg.alpha);
    r.ridge = set.ridge;
    for (const auto& c : ccp_draws) r.members += set.contains(c);
    r.bhat = identified_set_interval(ccp_draws, r.visits, set);
    r.bhat_cf = identified_set_interval(ccp_draws, r.visits_cf, set);

    if (!cfg.logit_free.empty()) {
        auto logit_visits = [&](const Eigen::VectorXd& theta, bool counterfactual) {
            DDCModel m = p.model;
            m.theta = theta;
            if (counterfactual) m = counterfactual_model(m, cfg.counterfactual);
            const EmaxSolution s = solve_logit(m, p.solver);
            if (!s.converged) throw NumericalError("logit solve did not converge");
            return expected_visits(m, s.ccp);
        };
        r.logit = delta_method([&](const Eigen::VectorXd& t) { return logit_visits(t, false); }, setup.logit,
                               cfg.logit_free, 1.0 - cfg.alpha);
        r.logit_cf = delta_method([&](const Eigen::VectorXd& t) { return logit_visits(t, true); }, setup.logit,
                                  cfg.logit_free, 1.0 - cfg.alpha);
    }
    return r;
}

}  // namespace ddc
