#include "contflow/generalization.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <memory>
#include <numbers>
#include <set>

namespace contflow::gen {

using Eigen::MatrixXd;
using Eigen::VectorXd;

FeatureFamily FeatureFamily::periodic_gaussian(double h) {
    core::require_positive_width(h);
    FeatureFamily f;
    f.kind_ = Kind::periodic_gaussian;
    f.dim_ = 1;
    f.h_ = h;
    f.scale_ = core::periodic_feature(0.0, 0.0, h);
    return f;
}

FeatureFamily FeatureFamily::cos_ridge(int d) {
    if (d < 1) throw InvalidParameter("cos ridge features need d >= 1");
    FeatureFamily f;
    f.kind_ = Kind::cos_ridge;
    f.dim_ = d;
    return f;
}

std::string FeatureFamily::name() const {
    return kind_ == Kind::periodic_gaussian ? "periodic_gaussian" : "cos_ridge";
}

core::DataDistribution FeatureFamily::data() const {
    return kind_ == Kind::periodic_gaussian ? core::DataDistribution::uniform_circle()
                                            : core::DataDistribution::unit_sphere(dim_);
}

MatrixXd FeatureFamily::sample_params(Eigen::Index m, core::SeededRng& rng) const {
    if (kind_ == Kind::periodic_gaussian) return rng.angles(m);
    MatrixXd p(m, dim_ + 1);
    for (Eigen::Index j = 0; j < m; ++j) {
        for (int i = 0; i < dim_; ++i) p(j, i) = rng.normal();
        p(j, dim_) = rng.uniform_angle();
    }
    return p;
}

MatrixXd FeatureFamily::evaluate(const MatrixXd& x, const MatrixXd& params) const {
    if (x.cols() != dim_) throw DimensionMismatch("feature input has wrong dimension");
    if (params.cols() != param_dim()) throw DimensionMismatch("feature parameters have wrong dimension");
    if (kind_ == Kind::periodic_gaussian) {
        MatrixXd out(x.rows(), params.rows());
        for (Eigen::Index j = 0; j < params.rows(); ++j) {
            for (Eigen::Index i = 0; i < x.rows(); ++i) {
                out(i, j) = core::periodic_feature(x(i, 0), params(j, 0), h_) / scale_;
            }
        }
        return out;
    }
    MatrixXd arg = x * params.leftCols(dim_).transpose();
    arg.rowwise() += params.col(dim_).transpose();
    return arg.array().cos().matrix();
}

VectorXd FeatureFamily::combine(const MatrixXd& x, const MatrixXd& params, const VectorXd& weights) const {
    if (params.rows() != weights.size()) throw DimensionMismatch("one weight per feature parameter required");
    const int modes = static_cast<int>(std::ceil(13.0 / h_));
    if (kind_ != Kind::periodic_gaussian || params.rows() <= 2 * modes) return evaluate(x, params) * weights;
    if (x.cols() != 1 || params.cols() != 1) throw DimensionMismatch("periodic features are one-dimensional");

    std::vector<std::complex<double>> amp(modes + 1);
    for (int k = 0; k <= modes; ++k) {
        std::complex<double> acc = 0.0;
        for (Eigen::Index j = 0; j < params.rows(); ++j) acc += weights(j) * std::polar(1.0, -k * params(j, 0));
        amp[k] = acc * (h_ * std::sqrt(std::numbers::pi) * std::exp(-0.25 * h_ * h_ * k * k) / core::two_pi<double>);
    }
    VectorXd out(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        double acc = 0.0;
        for (int k = modes; k >= 1; --k) acc += (amp[k] * std::polar(1.0, k * x(i, 0))).real();
        out(i) = (amp[0].real() + 2.0 * acc) / scale_;
    }
    return out;
}

Amplitude named_amplitude(const std::string& name) {
    if (name == "zero") return [](const VectorXd&) { return 0.0; };
    if (name == "one") return [](const VectorXd&) { return 1.0; };
    if (name == "sin") return [](const VectorXd& b) { return std::sin(b(0)); };
    if (name == "mix") return [](const VectorXd& b) { return std::sin(b(0)) + 0.5 * std::cos(3.0 * b(0)); };
    if (name == "cos_sign") {
        return [](const VectorXd& b) {
            const double s = b(0) > 0.0 ? 1.0 : (b(0) < 0.0 ? -1.0 : 0.0);
            return std::cos(b(b.size() - 1)) * s;
        };
    }
    throw InvalidParameter("unknown amplitude '" + name + "'");
}

void ProblemConfig::validate() const {
    if (m < 1 || n < 1) throw InvalidParameter("random-feature problem needs m >= 1 and n >= 1");
    if (!(label_noise >= 0.0) || !std::isfinite(label_noise)) throw InvalidParameter("label_noise must be >= 0");
    if (quadrature_nodes < 1 || target_design < 1) throw InvalidParameter("target recipe needs at least one node");
}

VectorXd RandomFeatureProblem::target_values(const MatrixXd& xs) const {
    return feature.combine(xs, target_nodes, target_weights);
}

VectorXd RandomFeatureProblem::predict(const VectorXd& a, const MatrixXd& xs) const {
    return feature.combine(xs, params, a / static_cast<double>(m));
}

double RandomFeatureProblem::empirical_risk(const VectorXd& a) const {
    return 0.5 * (design * a / static_cast<double>(m) - y).squaredNorm() / static_cast<double>(n);
}

VectorXd RandomFeatureProblem::empirical_gradient(const VectorXd& a) const {
    const VectorXd r = design * a / static_cast<double>(m) - y;
    return design.transpose() * r / (static_cast<double>(n) * m);
}

RandomFeatureProblem setup_problem(const FeatureFamily& feature, const Amplitude& a_star, const ProblemConfig& cfg) {
    cfg.validate();
    const core::SeededRng base(cfg.seed);
    RandomFeatureProblem p;
    p.feature = feature;
    p.m = cfg.m;
    p.n = cfg.n;

    core::SeededRng feature_rng = base.derive("gen.features");
    p.params = feature.sample_params(cfg.m, feature_rng);
    core::SeededRng data_rng = base.derive("gen.data");
    p.x = feature.data().sample(cfg.n, data_rng);

    if (feature.kind() == FeatureFamily::Kind::periodic_gaussian) {
        const int q = cfg.quadrature_nodes;
        p.target_nodes.resize(q, 1);
        for (int k = 0; k < q; ++k) p.target_nodes(k, 0) = core::two_pi<double> * k / q;
        p.target_recipe = "trapezoid(nodes=" + std::to_string(q) + ")";
    } else {
        core::SeededRng design_rng = base.derive("gen.target_design");
        p.target_nodes = feature.sample_params(cfg.target_design, design_rng);
        p.target_recipe = "monte_carlo(design=" + std::to_string(cfg.target_design) + ")";
    }
    const Eigen::Index nodes = p.target_nodes.rows();
    VectorXd amp(nodes);
    for (Eigen::Index k = 0; k < nodes; ++k) amp(k) = a_star(p.target_nodes.row(k).transpose());
    if (!amp.allFinite()) throw InvalidParameter("target amplitude must be finite");
    p.target_weights = amp / static_cast<double>(nodes);
    p.target_h_norm = std::sqrt(amp.squaredNorm() / static_cast<double>(nodes));
    p.target_amp_sup = amp.cwiseAbs().maxCoeff();

    p.y_clean = p.target_values(p.x);
    p.y = p.y_clean;
    if (cfg.label_noise > 0.0) {
        core::SeededRng noise_rng = base.derive("gen.noise");
        for (int i = 0; i < cfg.n; ++i) p.y(i) += cfg.label_noise * noise_rng.normal();
    }

    p.design = feature.evaluate(p.x, p.params);
    p.a_bar.resize(cfg.m);
    for (int j = 0; j < cfg.m; ++j) p.a_bar(j) = a_star(p.params.row(j).transpose());
    if (!p.a_bar.allFinite()) throw InvalidParameter("target amplitude must be finite");

    const double scale = 1.0 / (static_cast<double>(cfg.n) * cfg.m * cfg.m);
    const MatrixXd gram = cfg.n <= cfg.m ? MatrixXd(p.design * p.design.transpose() * scale)
                                         : MatrixXd(p.design.transpose() * p.design * scale);
    p.lambda_max = Eigen::SelfAdjointEigenSolver<MatrixXd>(gram, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();
    return p;
}

double lyapunov_J(const RandomFeatureProblem& problem, const VectorXd& a_t, double t, const VectorXd& a_bar) {
    if (a_t.size() != problem.m || a_bar.size() != problem.m) {
        throw DimensionMismatch("amplitude vectors must have m entries");
    }
    return t * (problem.empirical_risk(a_t) - problem.empirical_risk(a_bar)) + 0.5 * (a_t - a_bar).squaredNorm();
}

VectorXd gd_closed_form(const RandomFeatureProblem& problem, double t) {
    if (!(t >= 0.0)) throw InvalidParameter("time must be nonnegative");
    const double m = problem.m;
    const double n = problem.n;
    const MatrixXd scaled = problem.design / (m * std::sqrt(n));
    Eigen::BDCSVD<MatrixXd> svd(scaled, Eigen::ComputeThinV);
    const VectorXd g = problem.design.transpose() * problem.y / (n * m);
    const VectorXd proj = svd.matrixV().transpose() * g;
    VectorXd coef(proj.size());
    for (Eigen::Index j = 0; j < proj.size(); ++j) {
        const double s2 = svd.singularValues()(j) * svd.singularValues()(j);
        coef(j) = s2 > 0.0 ? -std::expm1(-s2 * t) / s2 : t;
    }
    return svd.matrixV() * coef.cwiseProduct(proj);
}

double epsilon_bound(double n, double m, double t, double delta, double f_sup) {
    if (!(delta > 0.0 && delta < 1.0)) throw InvalidParameter("delta must lie in (0, 1)");
    if (!(n >= 1.0) || !(m >= 1.0) || !(t > 0.0) || !(f_sup > 0.0)) {
        throw InvalidParameter("epsilon needs n, m >= 1 and t, |f*|_inf > 0");
    }
    const double log_n = std::log(n / delta);
    const double log_t = std::max(0.0, std::log(t * f_sup / delta));
    return 1.0 / (m * t) + (1.0 + t * log_n) * (1.0 + std::sqrt(log_n) + std::sqrt(log_t)) / std::sqrt(n);
}

double aposteriori_rhs(double emp_risk, double norm_a_sq, double m, double n, double h_norm, double delta) {
    if (!(delta > 0.0 && delta < 1.0)) throw InvalidParameter("delta must lie in (0, 1)");
    const double c = std::sqrt(norm_a_sq / m) + 1.0;
    return emp_risk + (norm_a_sq / m + h_norm * h_norm) / std::sqrt(n) * (1.0 + std::sqrt(std::log(c * c / delta)));
}

double norm_bound_value(double h_norm, double f_sup, double m, double delta) {
    if (!(delta > 0.0 && delta < 1.0)) throw InvalidParameter("delta must lie in (0, 1)");
    return h_norm * h_norm + std::sqrt(std::log(2.0 / delta) / (2.0 * m)) * f_sup * f_sup;
}

double BoundLedger::max_J_increase() const {
    double worst = -std::numeric_limits<double>::infinity();
    double prev = J0;
    for (const BoundRow& r : rows) {
        worst = std::max(worst, r.J - prev);
        prev = r.J;
    }
    return worst;
}

double BoundLedger::max_train_excess() const {
    double worst = -std::numeric_limits<double>::infinity();
    for (const BoundRow& r : rows) worst = std::max(worst, r.emp_risk - r.bound_train);
    return worst;
}

double BoundLedger::max_norm_excess() const {
    double worst = -std::numeric_limits<double>::infinity();
    for (const BoundRow& r : rows) worst = std::max(worst, r.norm_a_sq - r.bound_norm);
    return worst;
}

namespace {

// A fixed evaluation sample with cached target values. The target only
// depends on the amplitude and the target recipe, so one sample serves every
// problem sharing them.
class EvalSet {
public:
    EvalSet(const RandomFeatureProblem& problem, long samples, core::SeededRng& rng)
        : x_(problem.feature.data().sample(samples, rng)) {
        fstar_.resize(x_.rows());
        for_chunks([&](Eigen::Index begin, Eigen::Index len) {
            fstar_.segment(begin, len) = problem.target_values(x_.middleRows(begin, len));
        });
    }

    core::Estimate risk(const RandomFeatureProblem& problem, const VectorXd& a) const {
        VectorXd loss(x_.rows());
        for_chunks([&](Eigen::Index begin, Eigen::Index len) {
            const VectorXd r = problem.predict(a, x_.middleRows(begin, len)) - fstar_.segment(begin, len);
            loss.segment(begin, len) = 0.5 * r.array().square();
        });
        return core::mean_and_stderr(loss);
    }

private:
    static constexpr Eigen::Index chunk = 2048;

    template <typename F>
    void for_chunks(F&& f) const {
        const Eigen::Index total = x_.rows();
        const auto count = static_cast<std::size_t>((total + chunk - 1) / chunk);
        core::parallel_for(count, [&](std::size_t c) {
            const Eigen::Index begin = static_cast<Eigen::Index>(c) * chunk;
            f(begin, std::min(chunk, total - begin));
        });
    }

    MatrixXd x_;
    VectorXd fstar_;
};

}  // namespace

core::Estimate population_risk(const RandomFeatureProblem& problem, const VectorXd& a, long samples,
                               core::SeededRng& rng) {
    if (samples < 2) throw InvalidParameter("population risk needs at least two samples");
    return EvalSet(problem, samples, rng).risk(problem, a);
}

BoundLedger gd_empirical(const RandomFeatureProblem& problem, double step, long steps, const GdOptions& opts) {
    if (!(step > 0.0) || !std::isfinite(step)) throw InvalidParameter("step must be positive");
    if (step >= problem.max_step()) {
        throw StepTooLarge("step " + std::to_string(step) + " is not below 2/lambda_max = " +
                           std::to_string(problem.max_step()));
    }
    if (steps < 1) throw InvalidParameter("steps must be at least 1");
    if (opts.checkpoints < 1) throw InvalidParameter("need at least one checkpoint");
    if (!(opts.delta > 0.0 && opts.delta < 1.0)) throw InvalidParameter("delta must lie in (0, 1)");
    if (opts.pop_samples == 1 || opts.pop_samples < 0) throw InvalidParameter("pop_samples must be 0 or >= 2");

    std::set<long> schedule{steps};
    for (int i = 0; i < opts.checkpoints; ++i) {
        const double frac = opts.checkpoints == 1 ? 1.0 : static_cast<double>(i) / (opts.checkpoints - 1);
        schedule.insert(std::clamp(std::lround(std::pow(static_cast<double>(steps), frac)), 1L, steps));
    }

    BoundLedger ledger;
    ledger.m = problem.m;
    ledger.n = problem.n;
    ledger.step = step;
    ledger.steps = steps;
    ledger.delta = opts.delta;
    ledger.initial_risk = problem.empirical_risk(VectorXd::Zero(problem.m));
    ledger.comparator_risk = problem.empirical_risk(problem.a_bar);
    ledger.comparator_norm_sq = problem.a_bar.squaredNorm();
    ledger.J0 = 0.5 * ledger.comparator_norm_sq;

    std::unique_ptr<EvalSet> eval;
    if (opts.pop_samples > 0) {
        core::SeededRng eval_rng = core::SeededRng(opts.seed).derive("gen.eval");
        eval = std::make_unique<EvalSet>(problem, opts.pop_samples, eval_rng);
    }

    const double m = problem.m;
    const double m2 = m * m;
    VectorXd a = VectorXd::Zero(problem.m);
    for (long k = 1; k <= steps; ++k) {
        a -= step * problem.empirical_gradient(a);
        if (!a.allFinite()) throw Divergence("random-feature amplitudes became non-finite", k);
        if (!schedule.count(k)) continue;
        BoundRow row;
        row.step = k;
        row.t = static_cast<double>(k) * step;
        row.t_rescaled = row.t / m2;
        row.emp_risk = problem.empirical_risk(a);
        row.norm_a_sq = a.squaredNorm();
        row.J = lyapunov_J(problem, a, row.t, problem.a_bar);
        row.bound_train = ledger.comparator_norm_sq / (2.0 * row.t);
        row.bound_norm = 2.0 * ledger.comparator_norm_sq + 2.0 * row.t * ledger.comparator_risk;
        row.epsilon = epsilon_bound(problem.n, m, row.t_rescaled, opts.delta, problem.target_amp_sup);
        row.aposteriori = aposteriori_rhs(row.emp_risk, row.norm_a_sq, m, problem.n, problem.target_h_norm,
                                          opts.delta);
        row.delta = opts.delta;
        if (eval) {
            const core::Estimate pop = eval->risk(problem, a);
            row.pop_risk = pop.mean;
            row.pop_risk_stderr = pop.std_error;
        }
        ledger.rows.push_back(row);
    }
    ledger.final_a = a;
    return ledger;
}

BoundReport eval_bounds(const BoundRow& row, int m, int n, double h_norm, double f_sup, double delta) {
    BoundReport rep;
    rep.epsilon = epsilon_bound(n, m, row.t_rescaled, delta, f_sup);
    rep.aposteriori = aposteriori_rhs(row.emp_risk, row.norm_a_sq, m, n, h_norm, delta);
    rep.apriori = (h_norm * h_norm + std::sqrt(std::log(2.0 / delta) / m) * f_sup * f_sup) * rep.epsilon;
    const double l = std::log(n / delta);
    rep.width_condition = m >= l * l;
    rep.caveat = "constant-free: both estimates hold up to an unspecified absolute constant";
    return rep;
}

double fit_envelope_constant(const std::vector<double>& measured, const std::vector<double>& bound) {
    if (measured.size() != bound.size()) throw DimensionMismatch("measured and bound series differ in length");
    double c = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t i = 0; i < measured.size(); ++i) {
        if (!(bound[i] > 0.0) || !std::isfinite(measured[i])) continue;
        const double ratio = measured[i] / bound[i];
        c = std::isnan(c) ? ratio : std::max(c, ratio);
    }
    return c;
}

std::vector<int> double_descent_widths(int n, int points) {
    if (n < 8 || points < 3) throw InvalidParameter("double descent grid needs n >= 8 and at least 3 points");
    std::set<int> widths{n};
    for (int i = 0; i < points; ++i) {
        const double e = -3.0 + 6.0 * i / (points - 1);
        widths.insert(static_cast<int>(std::lround(n * std::exp2(e))));
    }
    return {widths.begin(), widths.end()};
}

std::vector<DoubleDescentRow> double_descent_probe(const FeatureFamily& feature, const Amplitude& a_star,
                                                   ProblemConfig cfg, const std::vector<int>& widths,
                                                   double t_rescaled, long pop_samples) {
    if (!(t_rescaled > 0.0)) throw InvalidParameter("t_rescaled must be positive");
    if (pop_samples < 2) throw InvalidParameter("population risk needs at least two samples");
    std::vector<DoubleDescentRow> rows;
    std::unique_ptr<EvalSet> eval;
    for (int m : widths) {
        cfg.m = m;
        const RandomFeatureProblem p = setup_problem(feature, a_star, cfg);
        const VectorXd a = gd_closed_form(p, t_rescaled * m * m);
        if (!eval) {
            core::SeededRng eval_rng = core::SeededRng(cfg.seed).derive("gen.eval");
            eval = std::make_unique<EvalSet>(p, pop_samples, eval_rng);
        }
        const core::Estimate pop = eval->risk(p, a);
        rows.push_back({m, p.empirical_risk(a), pop.mean, pop.std_error, a.squaredNorm()});
    }
    return rows;
}

}  // namespace contflow::gen
