#include "contflow/experiments.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "contflow/csv.hpp"
#include "contflow/errors.hpp"
#include "contflow/flow_models.hpp"
#include "contflow/generalization.hpp"
#include "contflow/meanfield_spectral.hpp"
#include "contflow/particle_flows.hpp"
#include "contflow/targets.hpp"

#ifndef CONTFLOW_VERSION
#define CONTFLOW_VERSION "unknown"
#endif

namespace contflow::exp {

using json = nlohmann::json;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using fourier::DensityField;
using fourier::FourierField;

namespace {

ParamSpec paper(std::string key, json value, std::string anchor, std::string help) {
    return {std::move(key), std::move(value), Source::paper, std::move(anchor), std::move(help)};
}

ParamSpec artifact(std::string key, json value, std::string help) {
    return {std::move(key), std::move(value), Source::artifact, "", std::move(help)};
}

std::vector<ExperimentInfo> build_registry() {
    const json fig3_target = json::array({json::array({1, 0.2}), json::array({3, 0.8})});
    const json fig7_target = json::array({json::array({1, 0.5}), json::array({5, 0.5})});
    const json snapshot_times = json::array({0.0, 10.0, 100.0, 1000.0});
    return {
        {"fig2_u_particle",
         "u-particle training on online sphere samples for an in-RKHS and an out-of-RKHS target",
         "Fig. 2",
         {paper("d", 10, "Sec. 5.3", "input dimension"),
          paper("m", 1000, "Sec. 5.3", "number of particles"),
          paper("batch", 100, "Sec. 5.3", "online samples per step"),
          paper("step_size", 0.1, "Sec. 5.3", "forward Euler step"),
          paper("target_terms", 10, "Sec. 5.3", "terms in each random target"),
          artifact("steps", 10000, "training steps"),
          artifact("eval_batch", 10000, "fresh samples per test-error estimate"),
          artifact("eval_log_points", 40, "log-spaced test-error evaluations"),
          artifact("rkhs_design", 10000, "sphere directions approximating the RKHS kernel")}},
        {"fig3_meanfield",
         "pseudo-spectral mean-field flow on the circle from the uniform density",
         "Fig. 3",
         {paper("h", 1.0, "Sec. 7.3", "feature width"),
          paper("rho_star", fig3_target, "Sec. 7.3", "target density modulation as [k, amplitude] sine terms"),
          paper("cutoff", 50, "Fig. 3 caption", "highest Fourier mode (2M+1 components)"),
          paper("dt", 0.01, "Fig. 3 caption", "time step"),
          paper("integrator", "rk4", "Fig. 3 caption", "rk4 or euler"),
          paper("horizon", 10000.0, "Sec. 7.3", "final time"),
          artifact("record_every", 1000, "uniform record spacing in steps"),
          artifact("log_records", 200, "additional log-spaced records"),
          artifact("compute_w2", true, "record the circle W2 distance to the target")}},
        {"fig4_empirical_kernel",
         "mean-field flow driven by the empirical kernel of n data samples",
         "Fig. 4",
         {paper("n", 100, "Sec. 7.3", "data samples in the empirical kernel"),
          paper("h", 1.0, "Sec. 7.3", "feature width"),
          paper("rho_star", fig3_target, "Sec. 7.3", "target density modulation"),
          paper("cutoff", 50, "Fig. 3 caption", "highest Fourier mode"),
          paper("dt", 0.01, "Fig. 3 caption", "time step"),
          artifact("horizon", 1000.0, "final time"),
          artifact("record_every", 100, "uniform record spacing in steps"),
          artifact("log_records", 100, "additional log-spaced records")}},
        {"fig5_snapshots",
         "function snapshots and mode decay showing low frequencies converging first",
         "Fig. 5",
         {paper("h", 1.0, "Sec. 7.3", "feature width"),
          paper("rho_star", fig3_target, "Sec. 7.3", "target density modulation"),
          paper("snapshot_times", snapshot_times, "Fig. 5 caption", "times of the f_t snapshots"),
          paper("horizon", 1000.0, "Fig. 5 caption", "final time"),
          paper("cutoff", 50, "Fig. 3 caption", "highest Fourier mode"),
          paper("dt", 0.01, "Fig. 3 caption", "time step"),
          artifact("record_every", 100, "uniform record spacing in steps"),
          artifact("snapshot_points", 256, "grid points per snapshot")}},
        {"fig7_freq_exception",
         "narrow-kernel case where the k = 5 component converges before k = 1",
         "Fig. 7",
         {paper("h", 0.2, "Sec. 7.4", "feature width"),
          paper("rho_star", fig7_target, "Sec. 7.4", "target density modulation"),
          paper("snapshot_times", snapshot_times, "Fig. 7 caption", "times of the f_t snapshots"),
          paper("horizon", 1000.0, "Fig. 7 caption", "final time"),
          artifact("cutoff", 50, "highest Fourier mode"),
          artifact("dt", 0.01, "time step"),
          artifact("record_every", 100, "uniform record spacing in steps"),
          artifact("snapshot_points", 256, "grid points per snapshot")}},
        {"gen_bounds",
         "bound ledger of empirical gradient descent for random-feature regression",
         "Sec. 6.1",
         {artifact("feature", "periodic_gaussian", "periodic_gaussian or cos_ridge"),
          artifact("h", 1.0, "periodic feature width"),
          artifact("d", 5, "input dimension of cos_ridge features"),
          artifact("amplitude", "mix", "target amplitude a*: zero, one, sin, mix or cos_sign"),
          artifact("n", 100, "training samples"),
          artifact("m_values", json::array({50, 1000}), "feature counts"),
          artifact("instances", 20, "seeded instances per feature count"),
          artifact("step_fraction", 0.5, "GD step as a fraction of 1 / lambda_max"),
          artifact("horizon_rescaled", 10.0, "final GD time divided by m^2"),
          artifact("checkpoints", 20, "geometric checkpoints per run"),
          artifact("delta", 0.1, "confidence parameter of the bounds"),
          artifact("pop_samples", 100000, "fresh samples per population-risk estimate"),
          artifact("label_noise", 0.0, "standard deviation of label noise")}},
        {"double_descent",
         "population risk of the near-interpolating random-feature fit across widths",
         "Sec. 6",
         {artifact("feature", "cos_ridge", "periodic_gaussian or cos_ridge"),
          artifact("h", 1.0, "periodic feature width"),
          artifact("d", 5, "input dimension of cos_ridge features"),
          artifact("amplitude", "cos_sign", "target amplitude a*"),
          artifact("n", 100, "training samples"),
          artifact("label_noise", 0.1, "standard deviation of label noise"),
          artifact("width_points", 13, "geometric widths from n/8 to 8n"),
          artifact("t_rescaled", 1e14, "gradient-flow time divided by m^2"),
          artifact("pop_samples", 20000, "fresh samples for the population risk"),
          artifact("target_design", 20000, "Monte Carlo design of the cos_ridge target")}},
        {"smoothed_vs_relu",
         "smoothed particle method against its Monte Carlo form and plain ReLU training",
         "Fig. 1",
         {artifact("h", 0.4, "smoothing width"),
          artifact("d", 5, "input dimension"),
          artifact("check_width", 3, "particles in the velocity check"),
          artifact("check_batch", 6, "sphere samples in the velocity check"),
          artifact("mc_samples", 1000000, "Monte Carlo draws of the smoothing noise"),
          artifact("sup_widths", json::array({0.05, 0.2, 1.0}), "widths of the sup-distance check"),
          artifact("sup_grid_points", 200001, "grid points on [-10, 10]"),
          artifact("m", 100, "training particles"),
          artifact("target_terms", 5, "ReLU ridges in the target"),
          artifact("batch", 100, "online samples per step"),
          artifact("step_size", 0.1, "forward Euler step"),
          artifact("steps", 2000, "training steps"),
          artifact("eval_batch", 10000, "fresh samples per test-error estimate"),
          artifact("eval_log_points", 20, "log-spaced test-error evaluations")}},
        {"flow_rf_demo",
         "flow-based random feature model trained on a realizable target",
         "Sec. 4.3",
         {artifact("D", 2, "state dimension"),
          artifact("L", 2, "Euler steps in tau"),
          artifact("m", 20, "features per layer"),
          artifact("n", 200, "training samples"),
          artifact("input_scale", 10.0, "standard deviation of the scalar inputs"),
          artifact("teacher_scale", 0.3, "teacher amplitude along the Gram eigenvectors"),
          artifact("step_size", 1.0, "GD step"),
          artifact("steps", 10000, "GD steps"),
          artifact("eval_log_points", 30, "log-spaced risk evaluations")}},
        {"flow_net_demo",
         "flow-based network trained on the output of a random teacher network",
         "Sec. 4.4",
         {artifact("d", 1, "input dimension"),
          artifact("D", 2, "state dimension"),
          artifact("L", 2, "Euler steps in tau"),
          artifact("m", 8, "particles per layer"),
          artifact("n", 50, "training samples"),
          artifact("step_size", 0.5, "GD step"),
          artifact("steps", 5000, "GD steps"),
          artifact("eval_log_points", 30, "log-spaced risk evaluations"),
          artifact("pmp_kappa", 0.1, "perturbation size of the PMP residual")}},
    };
}

std::string type_name(const json& v) {
    if (v.is_number_integer() || v.is_number_unsigned()) return "integer";
    if (v.is_number()) return "number";
    if (v.is_boolean()) return "boolean";
    if (v.is_string()) return "string";
    if (v.is_array()) return "array";
    if (v.is_object()) return "object";
    return "null";
}

bool type_matches(const json& value, const json& def) {
    if (def.is_number_integer() || def.is_number_unsigned()) {
        return value.is_number_integer() || value.is_number_unsigned();
    }
    if (def.is_number_float()) return value.is_number();
    if (def.is_boolean()) return value.is_boolean();
    if (def.is_string()) return value.is_string();
    if (def.is_array()) return value.is_array();
    return false;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// ---------------------------------------------------------------------------
// Parameter access inside a runner
// ---------------------------------------------------------------------------

class Params {
public:
    explicit Params(const json& p) : p_(p) {}

    double number(const std::string& key) const { return p_.at(key).get<double>(); }
    double positive(const std::string& key) const {
        const double v = number(key);
        if (!(v > 0.0) || !std::isfinite(v)) throw InvalidConfig("parameter '" + key + "' must be positive");
        return v;
    }
    long integer(const std::string& key, long min_value = 1) const {
        const long v = p_.at(key).get<long>();
        if (v < min_value) {
            throw InvalidConfig("parameter '" + key + "' must be at least " + std::to_string(min_value));
        }
        return v;
    }
    int small(const std::string& key, int min_value = 1) const {
        const long v = integer(key, min_value);
        if (v > 100000000L) throw InvalidConfig("parameter '" + key + "' is too large");
        return static_cast<int>(v);
    }
    std::string text(const std::string& key) const { return p_.at(key).get<std::string>(); }
    bool flag(const std::string& key) const { return p_.at(key).get<bool>(); }
    std::vector<double> numbers(const std::string& key) const {
        std::vector<double> out;
        for (const json& v : p_.at(key)) {
            if (!v.is_number()) throw InvalidConfig("parameter '" + key + "' must be an array of numbers");
            out.push_back(v.get<double>());
        }
        return out;
    }
    std::vector<int> integers(const std::string& key) const {
        std::vector<int> out;
        for (const json& v : p_.at(key)) {
            if (!v.is_number_integer() || v.get<long>() < 1 || v.get<long>() > 100000000L) {
                throw InvalidConfig("parameter '" + key + "' must be an array of positive integers");
            }
            out.push_back(v.get<int>());
        }
        if (out.empty()) throw InvalidConfig("parameter '" + key + "' must not be empty");
        return out;
    }
    std::vector<std::pair<int, double>> sine_terms(const std::string& key, int cutoff) const {
        std::vector<std::pair<int, double>> out;
        for (const json& term : p_.at(key)) {
            if (!term.is_array() || term.size() != 2 || !term[0].is_number_integer() || !term[1].is_number()) {
                throw InvalidConfig("parameter '" + key + "' must hold [k, amplitude] pairs");
            }
            const int k = term[0].get<int>();
            if (k < 1 || k > cutoff) {
                throw InvalidConfig("parameter '" + key + "' has a mode outside 1..cutoff");
            }
            out.emplace_back(k, term[1].get<double>());
        }
        return out;
    }

private:
    const json& p_;
};

// ---------------------------------------------------------------------------
// Table builders
// ---------------------------------------------------------------------------

csv::Table risk_table(const particles::RiskSeries& s) {
    csv::Table t({"step", "t", "risk", "risk_stderr", "path_norm", "l2_a", "l2_b"});
    for (std::size_t i = 0; i < s.size(); ++i) {
        t.add_row({static_cast<long long>(s.step[i]), s.t[i], s.risk[i], s.risk_stderr[i], s.path_norm[i], s.l2_a[i],
                   s.l2_b[i]});
    }
    return t;
}

csv::Table flow_risk_table(const flow::FlowRiskSeries& s, int depth) {
    std::vector<std::string> cols{"step", "t", "risk", "risk_stderr", "path_norm", "l2_a", "l2_b", "amplitude_norm_sq"};
    for (int l = 0; l < depth; ++l) cols.push_back("amplitude_norm_sq_layer" + std::to_string(l));
    cols.push_back("dissipation");
    csv::Table t(cols);
    const auto& r = s.risk;
    for (std::size_t i = 0; i < s.size(); ++i) {
        std::vector<csv::Cell> row{static_cast<long long>(r.step[i]), r.t[i], r.risk[i], r.risk_stderr[i],
                                   r.path_norm[i], r.l2_a[i], r.l2_b[i], s.amplitude_norm_sq[i]};
        for (int l = 0; l < depth; ++l) row.emplace_back(s.layer_amplitude_norm_sq[i][l]);
        row.emplace_back(s.dissipation[i]);
        t.add_row(std::move(row));
    }
    return t;
}

csv::Table run_record_table(const meanfield::RunRecord& rec) {
    std::vector<std::string> cols{"t", "l2_error", "rel_entropy", "w2", "rho_min", "free_energy"};
    if (rec.empirical) {
        cols.push_back("emp_risk");
        cols.push_back("rho_l2");
    }
    const auto modes = rec.mode_error.cols();
    for (Eigen::Index k = 0; k < modes; ++k) cols.push_back("mode_" + std::to_string(k));
    csv::Table t(cols);
    for (std::size_t i = 0; i < rec.size(); ++i) {
        std::vector<csv::Cell> row{rec.t[i], rec.l2_error[i], rec.rel_entropy[i], rec.w2[i], rec.rho_min[i],
                                   rec.free_energy[i]};
        if (rec.empirical) {
            row.emplace_back(rec.emp_risk[i]);
            row.emplace_back(rec.rho_l2[i]);
        }
        for (Eigen::Index k = 0; k < modes; ++k) row.emplace_back(rec.mode_error(static_cast<Eigen::Index>(i), k));
        t.add_row(std::move(row));
    }
    return t;
}

csv::Table snapshot_table(const meanfield::Snapshot& s) {
    csv::Table t({"x", "f_t", "f_star"});
    for (Eigen::Index i = 0; i < s.x.size(); ++i) t.add_row({s.x(i), s.f_t(i), s.f_star(i)});
    return t;
}

std::string snapshot_name(double t) {
    std::string label = csv::format_double(t);
    for (char& c : label) {
        if (c == '.') c = 'p';
    }
    return "snapshot_t" + label + ".csv";
}

std::string coefficients_text(const FourierField& f) {
    std::ostringstream out;
    fourier::write_coefficients_csv(out, f);
    return out.str();
}

csv::Table spectrum_table(const meanfield::LinearizedSpectrum& s) {
    csv::Table t({"k", "c", "b", "eigenvalue"});
    for (Eigen::Index k = 0; k < s.c.size(); ++k) {
        t.add_row({static_cast<long long>(k), s.c(k), s.b(k), s.eigenvalues(k)});
    }
    return t;
}

// ---------------------------------------------------------------------------
// Runners
// ---------------------------------------------------------------------------

class RunContext {
public:
    RunContext(const Config& cfg, RunResult& out) : cfg_(cfg), out_(out), p(cfg.params) {}

    std::uint64_t seed_for(const std::string& component) {
        const std::uint64_t s = component_seed(cfg_.seed, component);
        out_.seeds[component] = s;
        return s;
    }
    core::SeededRng rng_for(const std::string& component) { return core::SeededRng(seed_for(component)); }

    void emit(const std::string& name, const csv::Table& table) { out_.artifacts.push_back({name, table.str()}); }
    void emit_text(const std::string& name, std::string text) { out_.artifacts.push_back({name, std::move(text)}); }
    json& summary() { return out_.summary; }

private:
    const Config& cfg_;
    RunResult& out_;

public:
    Params p;
};

particles::TrainConfig train_config(const Params& p, std::uint64_t seed) {
    particles::TrainConfig c;
    c.step_size = p.positive("step_size");
    c.steps = p.integer("steps");
    c.seed = seed;
    c.eval_every = 0;
    c.eval_log_points = p.small("eval_log_points");
    return c;
}

void run_fig2(RunContext& ctx) {
    const Params& p = ctx.p;
    const int d = p.small("d");
    const int m = p.small("m");
    const int terms = p.small("target_terms");
    particles::TrainConfig cfg = train_config(p, 0);
    cfg.batch = p.integer("batch");
    cfg.eval_batch = p.integer("eval_batch", 2);

    core::SeededRng rkhs_rng = ctx.rng_for("fig2.target.rkhs");
    core::SeededRng ridge_rng = ctx.rng_for("fig2.target.ridge");
    const core::TargetSpec targets[2] = {
        core::TargetSpec::random_rkhs_combination(terms, d, rkhs_rng, p.small("rkhs_design")),
        core::TargetSpec::random_ridge_sum(terms, d, ridge_rng)};
    const core::RidgeFeature feature{core::Activation::make_relu(), d, false};

    const char* labels[2] = {"f1", "f2"};
    for (int i = 0; i < 2; ++i) {
        const std::string tag = labels[i];
        core::SeededRng init_rng = ctx.rng_for("fig2." + tag + ".init");
        const particles::Ensemble e0 = particles::init_ensemble(m, d, particles::InitScheme::zero_a_gauss_b, init_rng);
        cfg.seed = ctx.seed_for("fig2." + tag + ".train");
        const particles::RiskSeries s =
            particles::train(particles::Flavor::u_particle, e0, particles::LabeledSource::from_target(targets[i]),
                             feature, cfg);
        ctx.emit("risk_" + tag + ".csv", risk_table(s));
        const double t_end = s.t.back();
        ctx.summary()["slope_" + tag] = core::loglog_slope(s.t, s.risk, t_end / 10.0, t_end);
    }
}

meanfield::Integrator parse_integrator(const std::string& name) {
    if (name == "rk4") return meanfield::Integrator::rk4;
    if (name == "euler") return meanfield::Integrator::euler;
    throw InvalidConfig("integrator must be rk4 or euler");
}

DensityField target_density(const Params& p, int cutoff) {
    return DensityField::sine_modulated(cutoff, meanfield::dealias_grid_size(cutoff),
                                        p.sine_terms("rho_star", cutoff));
}

void run_fig3(RunContext& ctx) {
    const Params& p = ctx.p;
    const int cutoff = p.small("cutoff");
    const DensityField target = target_density(p, cutoff);
    const auto problem = meanfield::MeanFieldProblem::closed_form(
        p.positive("h"), target, p.positive("dt"), parse_integrator(p.text("integrator")), p.positive("horizon"));
    meanfield::EvolveOptions opt;
    opt.record_every = p.integer("record_every", 0);
    opt.log_records = p.small("log_records", 0);
    opt.compute_w2 = p.flag("compute_w2");
    opt.snapshot_times = {0.0};
    const DensityField uniform = DensityField::uniform(cutoff, target.grid_size());
    const meanfield::RunRecord rec = meanfield::evolve(problem, uniform, opt);

    ctx.emit("run_record.csv", run_record_table(rec));
    ctx.emit(snapshot_name(0.0), snapshot_table(rec.snapshots.front()));
    ctx.emit_text("target_coefficients.csv", coefficients_text(target.field()));
    ctx.emit_text("final_coefficients.csv", coefficients_text(rec.final_density->field()));
    ctx.summary()["max_mass_drift"] = rec.max_mass_drift;
    ctx.summary()["max_free_energy_increase"] = rec.max_free_energy_increase;
    ctx.summary()["error_reduction"] = rec.l2_error.back() / rec.l2_error.front();
}

void run_fig4(RunContext& ctx) {
    const Params& p = ctx.p;
    const int cutoff = p.small("cutoff");
    const DensityField target = target_density(p, cutoff);
    core::SeededRng data_rng = ctx.rng_for("fig4.data");
    const auto ek = meanfield::EmpiricalKernel::sample(p.small("n"), p.positive("h"), data_rng);
    const auto problem = meanfield::MeanFieldProblem::empirical(ek, target, p.positive("dt"),
                                                                meanfield::Integrator::rk4, p.positive("horizon"));
    meanfield::EvolveOptions opt;
    opt.record_every = p.integer("record_every", 0);
    opt.log_records = p.small("log_records", 0);
    opt.compute_w2 = false;
    const meanfield::RunRecord rec =
        meanfield::evolve(problem, DensityField::uniform(cutoff, target.grid_size()), opt);

    csv::Table samples({"x"});
    for (Eigen::Index i = 0; i < ek.samples.size(); ++i) samples.add_row({ek.samples(i)});
    ctx.emit("run_record.csv", run_record_table(rec));
    ctx.emit("samples.csv", samples);
    ctx.summary()["max_mass_drift"] = rec.max_mass_drift;
    ctx.summary()["emp_risk_reduction"] = rec.emp_risk.back() / rec.emp_risk.front();
}

void run_snapshots(RunContext& ctx) {
    const Params& p = ctx.p;
    const int cutoff = p.small("cutoff");
    const DensityField target = target_density(p, cutoff);
    const auto problem = meanfield::MeanFieldProblem::closed_form(p.positive("h"), target, p.positive("dt"),
                                                                  meanfield::Integrator::rk4, p.positive("horizon"));
    meanfield::EvolveOptions opt;
    opt.record_every = p.integer("record_every");
    opt.compute_w2 = false;
    opt.snapshot_times = p.numbers("snapshot_times");
    opt.snapshot_points = p.small("snapshot_points", 2);
    for (double t : opt.snapshot_times) {
        if (!(t >= 0.0 && t <= problem.horizon())) throw InvalidConfig("snapshot times must lie in [0, horizon]");
    }
    const DensityField uniform = DensityField::uniform(cutoff, target.grid_size());
    const meanfield::RunRecord rec = meanfield::evolve(problem, uniform, opt);

    ctx.emit("run_record.csv", run_record_table(rec));
    for (const auto& s : rec.snapshots) ctx.emit(snapshot_name(s.t), snapshot_table(s));
    ctx.emit("spectrum.csv", spectrum_table(meanfield::linearized_spectrum(problem, uniform)));
    json half = json::object();
    for (int k = 1; k <= std::min(cutoff, 8); ++k) {
        const double hl = meanfield::half_life(rec, k);
        half[std::to_string(k)] = std::isfinite(hl) ? json(hl) : json(nullptr);
    }
    ctx.summary()["half_life"] = half;
}

gen::FeatureFamily make_feature(const Params& p) {
    const std::string kind = p.text("feature");
    if (kind == "periodic_gaussian") return gen::FeatureFamily::periodic_gaussian(p.positive("h"));
    if (kind == "cos_ridge") return gen::FeatureFamily::cos_ridge(p.small("d"));
    throw InvalidConfig("feature must be periodic_gaussian or cos_ridge");
}

gen::Amplitude make_amplitude(const Params& p) {
    try {
        return gen::named_amplitude(p.text("amplitude"));
    } catch (const InvalidParameter& e) {
        throw InvalidConfig(e.what());
    }
}

void run_gen_bounds(RunContext& ctx) {
    const Params& p = ctx.p;
    const gen::FeatureFamily feature = make_feature(p);
    const gen::Amplitude amp = make_amplitude(p);
    const double fraction = p.positive("step_fraction");
    if (fraction >= 2.0) throw InvalidConfig("step_fraction must be below 2");
    const double horizon = p.positive("horizon_rescaled");
    const int instances = p.small("instances");
    const long pop = p.integer("pop_samples", 0);

    csv::Table ledger({"instance", "seed", "m", "n", "step_size", "step", "t", "t_rescaled", "emp_risk", "pop_risk",
                       "pop_risk_stderr", "norm_a_sq", "J", "bound_train", "bound_norm", "epsilon", "aposteriori",
                       "delta", "initial_risk"});
    csv::Table envelope({"m", "instances", "C_aposteriori", "C_apriori", "width_condition", "norm_bound_failures"});
    for (int m : p.integers("m_values")) {
        std::vector<double> measured, post, prior;
        int norm_failures = 0;
        bool width_ok = false;
        for (int i = 0; i < instances; ++i) {
            gen::ProblemConfig pc;
            pc.m = m;
            pc.n = p.small("n");
            pc.label_noise = p.number("label_noise");
            pc.seed = ctx.seed_for("gen_bounds.m" + std::to_string(m) + ".instance" + std::to_string(i));
            const gen::RandomFeatureProblem prob = gen::setup_problem(feature, amp, pc);
            const double step = fraction / prob.lambda_max;
            const double steps_real = std::ceil(horizon * m * static_cast<double>(m) / step);
            if (steps_real > 1e9) throw InvalidConfig("gen_bounds run would exceed 1e9 GD steps");
            gen::GdOptions opt;
            opt.checkpoints = p.small("checkpoints");
            opt.delta = p.number("delta");
            opt.pop_samples = pop;
            opt.seed = pc.seed;
            const gen::BoundLedger l = gen::gd_empirical(prob, step, static_cast<long>(steps_real), opt);
            for (const gen::BoundRow& r : l.rows) {
                ledger.add_row({static_cast<long long>(i), std::to_string(pc.seed), static_cast<long long>(m),
                                static_cast<long long>(pc.n), step, static_cast<long long>(r.step), r.t,
                                r.t_rescaled, r.emp_risk, r.pop_risk, r.pop_risk_stderr, r.norm_a_sq, r.J,
                                r.bound_train, r.bound_norm, r.epsilon, r.aposteriori, r.delta, l.initial_risk});
                const gen::BoundReport rep =
                    gen::eval_bounds(r, m, pc.n, prob.target_h_norm, prob.target_amp_sup, opt.delta);
                width_ok = rep.width_condition;
                measured.push_back(r.pop_risk);
                post.push_back(rep.aposteriori);
                prior.push_back(rep.apriori);
            }
            if (l.final_a.squaredNorm() / m >
                gen::norm_bound_value(prob.target_h_norm, prob.target_amp_sup, m, opt.delta)) {
                ++norm_failures;
            }
        }
        envelope.add_row({static_cast<long long>(m), static_cast<long long>(instances),
                          gen::fit_envelope_constant(measured, post), gen::fit_envelope_constant(measured, prior),
                          static_cast<long long>(width_ok), static_cast<long long>(norm_failures)});
    }
    ctx.emit("bound_ledger.csv", ledger);
    ctx.emit("envelope.csv", envelope);
}

void run_double_descent(RunContext& ctx) {
    const Params& p = ctx.p;
    const gen::FeatureFamily feature = make_feature(p);
    gen::ProblemConfig pc;
    pc.n = p.small("n");
    pc.label_noise = p.number("label_noise");
    pc.target_design = p.integer("target_design");
    pc.seed = ctx.seed_for("double_descent.problem");
    const auto widths = gen::double_descent_widths(pc.n, p.small("width_points"));
    const auto rows = gen::double_descent_probe(feature, make_amplitude(p), pc, widths, p.positive("t_rescaled"),
                                                p.integer("pop_samples", 2));
    csv::Table t({"m", "n", "emp_risk", "pop_risk", "pop_risk_stderr", "norm_a_sq"});
    for (const auto& r : rows) {
        t.add_row({static_cast<long long>(r.m), static_cast<long long>(pc.n), r.emp_risk, r.pop_risk,
                   r.pop_risk_stderr, r.norm_a_sq});
    }
    ctx.emit("double_descent.csv", t);
}

void run_smoothed(RunContext& ctx) {
    const Params& p = ctx.p;
    const double h = p.positive("h");
    const int d = p.small("d");
    const core::RidgeFeature relu{core::Activation::make_relu(), d, false};
    core::RidgeFeature smooth = relu;
    smooth.activation = core::Activation::make_smoothed_relu(h);

    core::SeededRng check_rng = ctx.rng_for("smoothed.check");
    const particles::Ensemble e =
        particles::init_ensemble(p.small("check_width"), d, particles::InitScheme::gauss_all, check_rng, false);
    const MatrixXd xb = check_rng.sphere(p.small("check_batch"), d);
    const VectorXd yb = check_rng.gaussian(xb.rows(), 1).col(0);
    const auto exact = particles::velocity(particles::Flavor::smoothed, e, smooth, xb, yb);
    core::SeededRng mc_rng = ctx.rng_for("smoothed.mc");
    const auto mc = particles::smoothed_velocity_monte_carlo(e, relu, xb, yb, h, p.integer("mc_samples", 2), mc_rng);

    csv::Table check({"component", "exact", "mc_mean", "mc_stderr", "z"});
    auto add = [&](const std::string& name, double ex, double mean, double se) {
        check.add_row({name, ex, mean, se, se > 0.0 ? (ex - mean) / se : (ex == mean ? 0.0 : HUGE_VAL)});
    };
    for (Eigen::Index k = 0; k < e.size(); ++k) {
        add("a" + std::to_string(k), exact.a(k), mc.mean.a(k), mc.std_error.a(k));
        for (Eigen::Index j = 0; j < e.param_dim(); ++j) {
            add("b" + std::to_string(k) + "_" + std::to_string(j), exact.b(k, j), mc.mean.b(k, j),
                mc.std_error.b(k, j));
        }
    }
    ctx.emit("velocity_check.csv", check);

    csv::Table sup({"h", "sup_gap", "bound", "argmax_t"});
    std::vector<double> widths = p.numbers("sup_widths");
    widths.push_back(h);
    const int points = p.small("sup_grid_points", 3);
    for (double w : widths) {
        if (!(w > 0.0)) throw InvalidConfig("sup_widths must be positive");
        double best = -1.0, arg = 0.0;
        for (int i = 0; i < points; ++i) {
            const double t = -10.0 + 20.0 * i / (points - 1);
            const double gap = std::abs(core::smoothed_relu(t, w) - core::relu(t));
            if (gap > best) {
                best = gap;
                arg = t;
            }
        }
        sup.add_row({w, best, w / std::sqrt(2.0 * std::numbers::pi), arg});
    }
    ctx.emit("sup_gap.csv", sup);

    core::SeededRng target_rng = ctx.rng_for("smoothed.target");
    const auto source =
        particles::LabeledSource::from_target(core::TargetSpec::random_ridge_sum(p.small("target_terms"), d, target_rng));
    core::SeededRng init_rng = ctx.rng_for("smoothed.init");
    const particles::Ensemble e0 = particles::init_ensemble(p.small("m"), d, particles::InitScheme::zero_a_gauss_b,
                                                            init_rng, false);
    particles::TrainConfig cfg = train_config(p, ctx.seed_for("smoothed.train"));
    cfg.batch = p.integer("batch");
    cfg.eval_batch = p.integer("eval_batch", 2);
    cfg.smoothing_width = h;
    ctx.emit("risk_relu.csv", risk_table(particles::train(particles::Flavor::two_layer, e0, source, relu, cfg)));
    ctx.emit("risk_smoothed.csv", risk_table(particles::train(particles::Flavor::smoothed, e0, source, relu, cfg)));
}

void run_flow_rf(RunContext& ctx) {
    const Params& p = ctx.p;
    const int D = p.small("D");
    const int L = p.small("L");
    const int m = p.small("m");
    const int n = p.small("n");
    core::SeededRng rng = ctx.rng_for("flow_rf.model");
    flow::FlowModel student = flow::FlowModel::random_feature(1, D, L, m, rng);
    core::SeededRng data_rng = ctx.rng_for("flow_rf.data");
    const MatrixXd x = p.positive("input_scale") * data_rng.gaussian(n, 1);

    // Teacher: equal weight on every eigenvector of the feature Gram matrix.
    const flow::AdjointTrajectory start = flow::forward(student, x);
    MatrixXd features(n, L * m);
    for (int l = 0; l < L; ++l) {
        features.middleCols(l * m, m) = student.activation().apply(start.pre[l].array()).matrix();
    }
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(features.transpose() * features / n);
    const VectorXd alpha = p.number("teacher_scale") * L * m * eig.eigenvectors().rowwise().sum();
    flow::FlowModel teacher = student;
    for (int l = 0; l < L; ++l) teacher.layers()[l].a = alpha.segment(l * m, m).replicate(1, D) / D;
    const VectorXd y = flow::forward(teacher, x).output;

    particles::TrainConfig cfg = train_config(p, ctx.seed_for("flow_rf.train"));
    cfg.eval_batch = 2;
    const flow::FlowRiskSeries s = flow::train_flow_rf(student, particles::LabeledSource::fixed(x, y), cfg);
    ctx.emit("risk.csv", flow_risk_table(s, L));
    const double t_end = s.risk.t.back();
    ctx.summary()["final_decade_slope"] = core::loglog_slope(s.risk.t, s.risk.risk, t_end / 10.0, t_end);
}

void run_flow_net(RunContext& ctx) {
    const Params& p = ctx.p;
    const int d = p.small("d");
    const int D = p.small("D");
    const int L = p.small("L");
    const int m = p.small("m");
    const int n = p.small("n");
    const double kappa = p.positive("pmp_kappa");
    core::SeededRng teacher_rng = ctx.rng_for("flow_net.teacher");
    flow::FlowModel teacher = flow::FlowModel::random_feature(d, D, L, m, teacher_rng);
    for (auto& layer : teacher.layers()) layer.a = teacher_rng.gaussian(m, D);
    core::SeededRng student_rng = ctx.rng_for("flow_net.student");
    flow::FlowModel student = flow::FlowModel::random_feature(d, D, L, m, student_rng);
    core::SeededRng data_rng = ctx.rng_for("flow_net.data");
    const MatrixXd x = data_rng.gaussian(n, d);
    const VectorXd y = flow::forward(teacher, x).output;

    csv::Table pmp({"stage", "layer", "residual"});
    auto record_pmp = [&](const std::string& stage) {
        const auto r = flow::pmp_residual(student, x, y, kappa, true);
        for (std::size_t l = 0; l < r.size(); ++l) pmp.add_row({stage, static_cast<long long>(l), r[l]});
    };
    record_pmp("initial");
    particles::TrainConfig cfg = train_config(p, ctx.seed_for("flow_net.train"));
    cfg.eval_batch = 2;
    const flow::FlowRiskSeries s = flow::train_flow_net(student, particles::LabeledSource::fixed(x, y), cfg);
    record_pmp("final");
    ctx.emit("risk.csv", flow_risk_table(s, L));
    ctx.emit("pmp.csv", pmp);
}

using Runner = void (*)(RunContext&);

Runner runner_for(const std::string& name) {
    if (name == "fig2_u_particle") return run_fig2;
    if (name == "fig3_meanfield") return run_fig3;
    if (name == "fig4_empirical_kernel") return run_fig4;
    if (name == "fig5_snapshots" || name == "fig7_freq_exception") return run_snapshots;
    if (name == "gen_bounds") return run_gen_bounds;
    if (name == "double_descent") return run_double_descent;
    if (name == "smoothed_vs_relu") return run_smoothed;
    if (name == "flow_rf_demo") return run_flow_rf;
    if (name == "flow_net_demo") return run_flow_net;
    throw InvalidConfig("unknown experiment '" + name + "'");
}

}  // namespace

const ParamSpec* ExperimentInfo::param(const std::string& key) const {
    for (const ParamSpec& s : params) {
        if (s.key == key) return &s;
    }
    return nullptr;
}

const std::vector<ExperimentInfo>& registry() {
    static const std::vector<ExperimentInfo> reg = build_registry();
    return reg;
}

const ExperimentInfo* find_experiment(const std::string& name) {
    for (const ExperimentInfo& e : registry()) {
        if (e.name == name) return &e;
    }
    return nullptr;
}

std::string list_text() {
    std::string out;
    for (const ExperimentInfo& e : registry()) out += e.name + "\t" + e.anchor + "\t" + e.description + "\n";
    return out;
}

std::string version() { return CONTFLOW_VERSION; }

std::uint64_t component_seed(std::uint64_t seed, std::string_view component) {
    return splitmix64(seed ^ core::SeededRng::stream_for(component));
}

Config parse_config(const json& doc) {
    if (!doc.is_object()) throw InvalidConfig("configuration must be a JSON object");
    for (const auto& [key, value] : doc.items()) {
        if (key != "experiment" && key != "params" && key != "seed" && key != "out_dir") {
            throw InvalidConfig("unknown configuration key '" + key + "'");
        }
    }
    if (!doc.contains("experiment") || !doc["experiment"].is_string()) {
        throw InvalidConfig("configuration needs a string 'experiment'");
    }
    Config cfg;
    cfg.experiment = doc["experiment"].get<std::string>();
    const ExperimentInfo* info = find_experiment(cfg.experiment);
    if (!info) throw InvalidConfig("unknown experiment '" + cfg.experiment + "'");
    if (!doc.contains("out_dir") || !doc["out_dir"].is_string() || doc["out_dir"].get<std::string>().empty()) {
        throw InvalidConfig("configuration needs a non-empty string 'out_dir'");
    }
    cfg.out_dir = doc["out_dir"].get<std::string>();
    if (doc.contains("seed")) {
        const json& s = doc["seed"];
        if (!(s.is_number_unsigned() || (s.is_number_integer() && s.get<long long>() >= 0))) {
            throw InvalidConfig("'seed' must be a non-negative integer");
        }
        cfg.seed = s.get<std::uint64_t>();
    }
    cfg.overrides = json::object();
    if (doc.contains("params")) {
        if (!doc["params"].is_object()) throw InvalidConfig("'params' must be an object");
        cfg.overrides = doc["params"];
    }
    cfg.params = json::object();
    for (const ParamSpec& s : info->params) cfg.params[s.key] = s.default_value;
    for (const auto& [key, value] : cfg.overrides.items()) {
        const ParamSpec* spec = info->param(key);
        if (!spec) throw InvalidConfig("unknown parameter '" + key + "' for " + cfg.experiment);
        if (!type_matches(value, spec->default_value)) {
            throw InvalidConfig("parameter '" + key + "' must be of type " + type_name(spec->default_value) +
                                ", got " + type_name(value));
        }
        cfg.params[key] = value;
    }
    cfg.echo = doc;
    return cfg;
}

Config load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read configuration " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw InvalidConfig(std::string("configuration is not valid JSON: ") + e.what());
    }
    return parse_config(doc);
}

RunResult execute(const Config& cfg) {
    const Runner runner = runner_for(cfg.experiment);
    RunResult result;
    RunContext ctx(cfg, result);
    try {
        runner(ctx);
    } catch (const json::exception& e) {
        throw InvalidConfig(std::string("bad parameter value: ") + e.what());
    }
    return result;
}

std::string sha256_hex(const std::string& bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw Error("SHA-256 computation failed");
    }
    std::ostringstream out;
    for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return out.str();
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace

json write_run(const Config& cfg, const RunResult& result, double wall_seconds) {
    std::error_code ec;
    std::filesystem::create_directories(cfg.out_dir, ec);
    if (ec) throw IoError("cannot create output directory " + cfg.out_dir.string() + ": " + ec.message());

    const ExperimentInfo* info = find_experiment(cfg.experiment);
    json params = json::object();
    for (const ParamSpec& s : info->params) {
        const bool overridden = cfg.overrides.contains(s.key);
        json entry{{"value", cfg.params.at(s.key)},
                   {"default", s.default_value},
                   {"paper_default", s.source == Source::paper},
                   {"overridden", overridden}};
        if (s.source == Source::paper) entry["anchor"] = s.anchor;
        params[s.key] = entry;
    }
    json files = json::array();
    for (const Artifact& a : result.artifacts) {
        write_file(cfg.out_dir / a.name, a.content);
        files.push_back({{"name", a.name}, {"sha256", sha256_hex(a.content)}, {"bytes", a.content.size()}});
    }
    json manifest{{"tool", "contflow"},
                  {"version", version()},
                  {"experiment", cfg.experiment},
                  {"anchor", info->anchor},
                  {"config", cfg.echo},
                  {"params", params},
                  {"seed", cfg.seed},
                  {"seed_rule", "splitmix64(seed ^ fnv1a64(component))"},
                  {"seeds", result.seeds},
                  {"wall_time_seconds", wall_seconds},
                  {"files", files},
                  {"summary", result.summary}};
    write_file(cfg.out_dir / "manifest.json", manifest.dump(2) + "\n");
    return manifest;
}

json run(const Config& cfg) {
    const auto start = std::chrono::steady_clock::now();
    const RunResult result = execute(cfg);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return write_run(cfg, result, wall);
}

ExitCode exit_code_for(const std::exception& e) {
    if (dynamic_cast<const InvalidConfig*>(&e) || dynamic_cast<const InvalidParameter*>(&e) ||
        dynamic_cast<const DimensionMismatch*>(&e) || dynamic_cast<const StepTooLarge*>(&e) ||
        dynamic_cast<const CutoffMismatch*>(&e) || dynamic_cast<const Undersampled*>(&e) ||
        dynamic_cast<const NonPositiveDensity*>(&e)) {
        return ExitCode::invalid_config;
    }
    if (dynamic_cast<const Divergence*>(&e) || dynamic_cast<const BlowUp*>(&e)) return ExitCode::divergence;
    if (dynamic_cast<const IoError*>(&e)) return ExitCode::io_error;
    return ExitCode::failure;
}

json error_json(const std::exception& e) {
    const ExitCode code = exit_code_for(e);
    const char* kind = "internal-error";
    switch (code) {
        case ExitCode::invalid_config: kind = "invalid-config"; break;
        case ExitCode::divergence: kind = "divergence"; break;
        case ExitCode::io_error: kind = "io-error"; break;
        default: break;
    }
    json out{{"error", kind}, {"message", e.what()}, {"exit_code", static_cast<int>(code)}};
    if (const auto* d = dynamic_cast<const Divergence*>(&e)) out["step"] = d->step();
    if (const auto* b = dynamic_cast<const BlowUp*>(&e)) out["time"] = b->time();
    return out;
}

}  // namespace contflow::exp
