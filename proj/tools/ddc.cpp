#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <optional>
#include <sstream>
#include <thread>

#include "ddc/dp_solver.hpp"
#include "ddc/experiment.hpp"

namespace fs = std::filesystem;
using namespace ddc;

namespace {

struct Options {
    std::string config;
    std::string preset;
    std::string data;
    std::string out;
    std::optional<std::uint64_t> seed;
    int chains = 1;
    bool resume = false;
};

std::string hex(std::uint64_t h) {
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << h;
    return s.str();
}

RunConfig load(const Options& o) {
    if (o.config.empty() == o.preset.empty()) throw ConfigError("give exactly one of --config and --preset");
    RunConfig cfg = o.config.empty() ? preset(o.preset) : load_config(o.config);
    if (!o.out.empty()) cfg.out = o.out;
    cfg.validate();
    return cfg;
}

fs::path out_dir(const RunConfig& cfg) {
    fs::path d(cfg.out);
    fs::create_directories(d);
    return d;
}

fs::path data_dir(const Options& o, const RunConfig& cfg) {
    const fs::path d = o.data.empty() ? fs::path(cfg.out) : fs::path(o.data);
    if (!fs::exists(d / "counts.csv")) throw ConfigError("no counts.csv in data directory " + d.string());
    return d;
}

void write_json(const fs::path& p, const nlohmann::json& j) {
    std::ofstream f(p);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    f << std::setw(2) << j << '\n';
}

nlohmann::json read_json(const fs::path& p) {
    std::ifstream f(p);
    if (!f) throw ConfigError("cannot read " + p.string());
    return nlohmann::json::parse(f);
}

void write_manifest(const fs::path& dir, const std::string& command, const RunConfig& cfg,
                    const std::vector<std::string>& files, nlohmann::json extra = nlohmann::json::object()) {
    extra["command"] = command;
    extra["config_hash"] = hex(cfg.hash());
    extra["config"] = cfg.to_json();
    extra["files"] = files;
    write_json(dir / (command + "_manifest.json"), extra);
}

PanelCounts load_counts(const fs::path& ddir, const DDCModel& model) {
    const fs::path man = ddir / "simulate_manifest.json";
    if (fs::exists(man)) {
        const nlohmann::json t = read_json(man).at("truth");
        if (t.at("K").get<int>() != model.K || t.at("J").get<int>() != model.J)
            throw ConfigError("data were simulated with K=" + t.at("K").dump() + ", J=" + t.at("J").dump() +
                              " but the model has K=" + std::to_string(model.K) + ", J=" + std::to_string(model.J));
    }
    try {
        return read_counts_csv((ddir / "counts.csv").string(), model.K, model.J);
    } catch (const std::runtime_error& e) {
        throw ConfigError(std::string("data do not match the model: ") + e.what());
    }
}

std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

void write_ccp_csv(const fs::path& p, const CCPMatrix& ccp) {
    std::ofstream f(p);
    f << "x";
    for (int d = 0; d < ccp.cols(); ++d) f << ",p" << d;
    f << '\n' << std::setprecision(17);
    for (int x = 0; x < ccp.rows(); ++x) {
        f << x;
        for (int d = 0; d < ccp.cols(); ++d) f << ',' << ccp(x, d);
        f << '\n';
    }
}

int cmd_simulate(const Options& o) {
    RunConfig cfg = load(o);
    if (o.seed) cfg.data_seed = *o.seed;
    const fs::path dir = out_dir(cfg);
    const DDCModel model = build_model(cfg);
    const Truth truth = compute_truth(cfg, model);
    const Dataset data = simulate_data(cfg, model, truth.ccp);

    std::vector<std::string> files = {"counts.csv", "true_ccp.csv"};
    write_counts_csv((dir / "counts.csv").string(), data.counts);
    write_ccp_csv(dir / "true_ccp.csv", truth.ccp);
    if (!data.records.empty()) {
        write_panel_csv((dir / "panel.csv").string(), data.records);
        files.push_back("panel.csv");
    }
    nlohmann::json t = {{"seed", cfg.data_seed}, {"K", model.K}, {"J", model.J}, {"total_count", data.counts.total()}};
    if (truth.visits) t["Ev"] = *truth.visits;
    if (truth.visits_cf) t["cf_Ev"] = *truth.visits_cf;
    write_manifest(dir, "simulate", cfg, files, {{"truth", t}});
    std::cout << "simulate: wrote " << files.size() << " files to " << dir.string() << '\n';
    return 0;
}

int cmd_estimate(const Options& o) {
    RunConfig cfg = load(o);
    if (o.seed) cfg.chain.seed = *o.seed;
    if (o.chains < 1) throw ConfigError("--chains must be positive");
    const fs::path ddir = data_dir(o, cfg);
    const fs::path dir = out_dir(cfg);
    const PanelCounts counts = load_counts(ddir, build_model(cfg));
    const EstimationSetup setup = prepare_estimation(cfg, counts);
    const DerivedSpec derived = derived_quantities(setup);

    std::vector<ChainResult> results(static_cast<std::size_t>(o.chains));
    std::vector<std::exception_ptr> errors(results.size());
    std::vector<std::thread> pool;
    for (int c = 0; c < o.chains; ++c)
        pool.emplace_back([&, c] {
            try {
                results[c] = run_chain(setup.problem, setup.init, chain_config(cfg, c, dir.string()), derived, o.resume);
            } catch (...) {
                errors[c] = std::current_exception();
            }
        });
    for (auto& t : pool) t.join();
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    std::vector<std::string> files;
    nlohmann::json chains = nlohmann::json::array();
    for (int c = 0; c < o.chains; ++c) {
        files.push_back("draws_chain" + std::to_string(c) + ".csv");
        files.push_back("checkpoint_chain" + std::to_string(c) + ".json");
        chains.push_back(results[c].store.meta);
        std::cout << "chain " << c << ": " << results[c].store.draws.size() << " draws, hmc acceptance "
                  << results[c].hmc.rate() << ", divergent " << results[c].divergent << '\n';
    }
    nlohmann::json logit = {{"theta", to_vec(setup.logit.theta_full)}, {"log_lik", setup.logit.log_lik},
                            {"free", cfg.logit_free}};
    write_manifest(dir, "estimate", cfg, files,
                   {{"data", ddir.string()}, {"resume", o.resume}, {"chains", chains}, {"logit_mle", logit}});
    return 0;
}

std::vector<DrawStore> read_chains(const fs::path& dir) {
    std::vector<DrawStore> out;
    for (int c = 0;; ++c) {
        const fs::path p = dir / ("draws_chain" + std::to_string(c) + ".csv");
        if (!fs::exists(p)) break;
        out.push_back(DrawStore::read_csv(p.string()));
    }
    if (out.empty()) throw ConfigError("no draws_chain*.csv in " + dir.string());
    return out;
}

long report_burn_in(const RunConfig& cfg) {
    return cfg.report_burn_in >= 0 ? cfg.report_burn_in : cfg.chain.schedule.burn_in;
}

// Gaussian kernel density on a 200-point grid, Silverman bandwidth
void write_density(const fs::path& p, const std::vector<double>& x) {
    const double n = static_cast<double>(x.size());
    double mean = 0.0;
    for (double v : x) mean += v / n;
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean) / std::max(n - 1.0, 1.0);
    const auto [lo_it, hi_it] = std::minmax_element(x.begin(), x.end());
    const double h = 1.06 * std::sqrt(var) * std::pow(n, -0.2);
    std::ofstream f(p);
    f << "value,density\n" << std::setprecision(10);
    if (!(h > 0.0)) {
        f << *lo_it << ",inf\n";
        return;
    }
    const double lo = *lo_it - 3 * h, hi = *hi_it + 3 * h;
    for (int i = 0; i < 200; ++i) {
        const double g = lo + (hi - lo) * i / 199.0;
        double d = 0.0;
        for (double v : x) d += std::exp(-0.5 * (g - v) * (g - v) / (h * h));
        f << g << ',' << d / (n * h * std::sqrt(2.0 * std::numbers::pi)) << '\n';
    }
}

int cmd_summarize(const Options& o) {
    const RunConfig cfg = load(o);
    const fs::path dir = out_dir(cfg);
    const std::vector<DrawStore> chains = read_chains(dir);
    const long burn = report_burn_in(cfg);
    const PosteriorSummary s = summarize(chains, burn, cfg.report_thin, 1.0 - cfg.alpha, cfg.alpha);

    std::vector<std::string> files = {"summary.json", "m_pmf.csv"};
    nlohmann::json j = s.to_json();
    j["burn_in"] = burn;
    j["thin"] = cfg.report_thin;
    j["alpha"] = cfg.alpha;
    write_json(dir / "summary.json", j);
    {
        std::ofstream f(dir / "m_pmf.csv");
        f << "m,probability\n" << std::setprecision(17);
        for (const auto& [m, p] : s.m_pmf) f << m << ',' << p << '\n';
    }

    std::vector<DrawStore> sel;
    for (const auto& c : chains) sel.push_back(select_draws(c, burn, cfg.report_thin));
    const DrawStore all = merge_stores(sel);
    fs::create_directories(dir / "trace");
    for (const auto& f : s.functionals) {
        if (f.name.rfind("ccp_", 0) == 0) continue;
        const std::string name = "trace/" + f.name + ".csv";
        std::ofstream t(dir / name);
        t << "chain,iter," << f.name << '\n' << std::setprecision(17);
        for (std::size_t c = 0; c < sel.size(); ++c) {
            const auto col = sel[c].column(f.name);
            for (std::size_t l = 0; l < col.size(); ++l) t << c << ',' << sel[c].draws[l].iter << ',' << col[l] << '\n';
        }
        files.push_back(name);
        if (f.name.rfind("theta_renorm_", 0) == 0 || f.name.rfind("functional_", 0) == 0) {
            const std::string dn = "density_" + f.name + ".csv";
            write_density(dir / dn, all.column(f.name));
            files.push_back(dn);
        }
    }

    std::vector<std::string> theta_cols;
    for (const auto& n : all.derived_names)
        if (n.rfind("theta_renorm_", 0) == 0) theta_cols.push_back(n);
    if (!theta_cols.empty()) {
        std::ofstream f(dir / "theta_scatter.csv");
        f << "chain,iter";
        for (const auto& n : theta_cols) f << ',' << n;
        f << '\n' << std::setprecision(17);
        for (std::size_t c = 0; c < sel.size(); ++c) {
            std::vector<std::vector<double>> cols;
            for (const auto& n : theta_cols) cols.push_back(sel[c].column(n));
            for (std::size_t l = 0; l < sel[c].draws.size(); ++l) {
                f << c << ',' << sel[c].draws[l].iter;
                for (const auto& col : cols) f << ',' << col[l];
                f << '\n';
            }
        }
        files.push_back("theta_scatter.csv");
    }
    write_manifest(dir, "summarize", cfg, files);
    std::cout << "summarize: " << s.draws << " draws from " << s.chains << " chain(s)\n";
    return 0;
}

int cmd_counterfactual(const Options& o) {
    const RunConfig cfg = load(o);
    if (cfg.model_kind != "gilleskie") throw ConfigError("counterfactuals need a Gilleskie model");
    const fs::path ddir = data_dir(o, cfg);
    const fs::path dir = out_dir(cfg);
    const PanelCounts counts = load_counts(ddir, build_model(cfg));
    const EstimationSetup setup = prepare_estimation(cfg, counts);
    const DrawStore store = merge_stores(read_chains(dir));
    const CounterfactualReport r = run_counterfactual(cfg, setup, store);

    nlohmann::json j = r.to_json();
    std::optional<double> true_ev, true_cf;
    if (fs::exists(ddir / "simulate_manifest.json")) {
        const nlohmann::json m = read_json(ddir / "simulate_manifest.json");
        if (m["truth"].contains("Ev")) true_ev = m["truth"]["Ev"].get<double>();
        // the counterfactual truth is only meaningful if the data were simulated under the same overrides
        auto overrides = [](nlohmann::json r) {
            for (const char* k : {"alpha", "burn_in", "thin"}) r.erase(k);
            return r;
        };
        if (m["truth"].contains("cf_Ev") && overrides(m["config"]["report"]) == overrides(cfg.to_json()["report"]))
            true_cf = m["truth"]["cf_Ev"].get<double>();
    }
    if (true_ev) j["Ev"]["true"] = *true_ev;
    if (true_cf) j["cf_Ev"]["true"] = *true_cf;
    write_json(dir / "counterfactual.json", j);

    std::ofstream f(dir / "table.csv");
    f << "row,true,posterior_mean,hpd_lo,hpd_hi,hpd_length,bhat_lo,bhat_hi,bhat_length,logit_mle,logit_lo,logit_hi,"
         "logit_length\n"
      << std::setprecision(10);
    auto row = [&](const char* name, std::optional<double> t, double mean, const Interval& hpd, const Interval& bhat,
                   const FunctionalCI& lg) {
        f << name << ',';
        if (t) f << *t;
        f << ',' << mean << ',' << hpd.lo << ',' << hpd.hi << ',' << hpd.length() << ',' << bhat.lo << ',' << bhat.hi
          << ',' << bhat.length() << ',' << lg.value << ',' << lg.ci.lo << ',' << lg.ci.hi << ',' << lg.ci.length()
          << '\n';
    };
    row("E(v)", true_ev, r.mean, r.hpd, r.bhat, r.logit);
    row("c.f.E(v)", true_cf, r.mean_cf, r.hpd_cf, r.bhat_cf, r.logit_cf);
    write_manifest(dir, "counterfactual", cfg, {"counterfactual.json", "table.csv"}, {{"data", ddir.string()}});
    std::cout << "counterfactual: " << r.visits.size() << " draws, c.f. E(v) credible-set interval [" << r.bhat_cf.lo
              << ", " << r.bhat_cf.hi << "]\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Semiparametric dynamic discrete choice estimation"};
    app.require_subcommand(1);
    Options o;
    auto add_common = [&](CLI::App* s) {
        s->add_option("--config", o.config, "run configuration file");
        s->add_option("--preset", o.preset, "built-in configuration")
            ->check(CLI::IsMember(preset_names()));
        s->add_option("--data", o.data, "directory written by simulate (default: output directory)");
        s->add_option("--out", o.out, "output directory (overrides the config)");
    };
    auto* sim = app.add_subcommand("simulate", "simulate data and record the DGP truth");
    add_common(sim);
    sim->add_option("--seed", o.seed, "data seed (overrides the config)");
    auto* est = app.add_subcommand("estimate", "run posterior chains");
    add_common(est);
    est->add_option("--seed", o.seed, "chain seed (overrides the config)");
    est->add_option("--chains", o.chains, "independent chains run concurrently")->check(CLI::PositiveNumber);
    est->add_flag("--resume", o.resume, "continue from the last checkpoints");
    auto* sum = app.add_subcommand("summarize", "summaries and plot-ready CSVs from stored draws");
    add_common(sum);
    auto* cf = app.add_subcommand("counterfactual", "counterfactual expected visits from stored draws");
    add_common(cf);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    try {
        if (*sim) return cmd_simulate(o);
        if (*est) return cmd_estimate(o);
        if (*sum) return cmd_summarize(o);
        return cmd_counterfactual(o);
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
