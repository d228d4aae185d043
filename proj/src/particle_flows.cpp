#include "contflow/particle_flows.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace contflow::particles {

Ensemble init_ensemble(int m, int param_dim, InitScheme scheme, core::SeededRng& rng, bool with_u) {
    if (m < 1 || param_dim < 1) throw InvalidParameter("ensemble needs m >= 1 and dimension >= 1");
    Ensemble e;
    e.a = Eigen::VectorXd::Zero(m);
    e.b = Eigen::MatrixXd::Zero(m, param_dim);
    if (with_u) e.u = Eigen::MatrixXd::Zero(m, param_dim);
    switch (scheme) {
        case InitScheme::zero_a_gauss_b:
            e.b = rng.gaussian(m, param_dim);
            break;
        case InitScheme::gauss_all:
            e.b = rng.gaussian(m, param_dim);
            e.a = rng.gaussian(m, 1).col(0);
            break;
        case InitScheme::custom:
            break;
    }
    return e;
}

const char* flavor_name(Flavor flavor) {
    switch (flavor) {
        case Flavor::two_layer: return "two_layer";
        case Flavor::random_feature: return "random_feature";
        case Flavor::smoothed: return "smoothed";
        case Flavor::u_particle: return "u_particle";
    }
    return "unknown";
}

LabeledSource LabeledSource::from_target(core::TargetSpec target) {
    LabeledSource s;
    s.dim_ = target.input_dim();
    s.data_ = target.data();
    s.label_ = [target = std::move(target)](const Eigen::MatrixXd& x) { return target.evaluate_batch(x); };
    return s;
}

LabeledSource LabeledSource::from_function(core::DataDistribution data,
                                           std::function<Eigen::VectorXd(const Eigen::MatrixXd&)> label) {
    LabeledSource s;
    s.dim_ = data.dim;
    s.data_ = data;
    s.label_ = std::move(label);
    return s;
}

LabeledSource LabeledSource::fixed(Eigen::MatrixXd x, Eigen::VectorXd y) {
    if (x.rows() != y.size() || x.rows() == 0) {
        throw DimensionMismatch("fixed dataset needs one label per input row");
    }
    LabeledSource s;
    s.dim_ = static_cast<int>(x.cols());
    s.fixed_x_ = std::move(x);
    s.fixed_y_ = std::move(y);
    return s;
}

void LabeledSource::batch(Eigen::Index n, core::SeededRng& rng, Eigen::MatrixXd& x,
                          Eigen::VectorXd& y) const {
    if (fixed_x_) {
        x = *fixed_x_;
        y = *fixed_y_;
        return;
    }
    x = data_.sample(n, rng);
    y = label_(x);
}

Eigen::VectorXd LabeledSource::label(const Eigen::MatrixXd& x) const {
    if (label_) return label_(x);
    throw InvalidParameter("a fixed dataset has no labeling function");
}

void TrainConfig::validate() const {
    if (!(step_size > 0.0) || !std::isfinite(step_size)) throw InvalidParameter("step_size must be positive");
    if (batch < 1) throw InvalidParameter("batch must be at least 1");
    if (steps < 0) throw InvalidParameter("steps must be nonnegative");
    if (eval_batch < 2) throw InvalidParameter("eval_batch must be at least 2");
    if (eval_every < 0 || eval_log_points < 0) throw InvalidParameter("evaluation schedule must be nonnegative");
    if (!(smoothing_width > 0.0)) throw InvalidParameter("smoothing_width must be positive");
}

core::RidgeFeature effective_feature(Flavor flavor, const core::RidgeFeature& feature, const TrainConfig& cfg) {
    if (flavor != Flavor::smoothed) return feature;
    core::RidgeFeature smoothed = feature;
    smoothed.activation = core::Activation::make_smoothed_relu(cfg.smoothing_width);
    return smoothed;
}

namespace {

Ensemble step_on_batch(Flavor flavor, const Ensemble& e, const core::RidgeFeature& feature,
                       const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double step) {
    return apply_velocity(e, velocity(flavor, e, feature, x, y), step);
}

}  // namespace

Ensemble gd_step(Flavor flavor, const Ensemble& e, const LabeledSource& source,
                 const core::RidgeFeature& feature, const TrainConfig& cfg, core::SeededRng& rng) {
    Eigen::MatrixXd x;
    Eigen::VectorXd y;
    source.batch(cfg.batch, rng, x, y);
    return step_on_batch(flavor, e, effective_feature(flavor, feature, cfg), x, y, cfg.step_size);
}

Ensemble gd_step_two_layer(const Ensemble& e, const LabeledSource& source, const core::RidgeFeature& feature,
                           const TrainConfig& cfg, core::SeededRng& rng) {
    return gd_step(Flavor::two_layer, e, source, feature, cfg, rng);
}

Ensemble gd_step_random_feature(const Ensemble& e, const LabeledSource& source,
                                const core::RidgeFeature& feature, const TrainConfig& cfg,
                                core::SeededRng& rng) {
    return gd_step(Flavor::random_feature, e, source, feature, cfg, rng);
}

Ensemble gd_step_smoothed(const Ensemble& e, const LabeledSource& source, const core::RidgeFeature& feature,
                          const TrainConfig& cfg, double h, core::SeededRng& rng, bool* reduction_exact) {
    Eigen::MatrixXd x;
    Eigen::VectorXd y;
    source.batch(cfg.batch, rng, x, y);
    core::RidgeFeature smoothed = feature;
    smoothed.activation = core::Activation::make_smoothed_relu(h);
    if (reduction_exact) *reduction_exact = smoothed_reduction_exact(feature, x);
    return step_on_batch(Flavor::smoothed, e, smoothed, x, y, cfg.step_size);
}

Ensemble gd_step_u_particle(const Ensemble& e, const LabeledSource& source, const core::RidgeFeature& feature,
                            const TrainConfig& cfg, core::SeededRng& rng) {
    return gd_step(Flavor::u_particle, e, source, feature, cfg, rng);
}

core::Estimate population_risk(const Ensemble& e, const core::RidgeFeature& feature,
                               const LabeledSource& source, long samples, core::SeededRng& rng) {
    Eigen::MatrixXd x;
    Eigen::VectorXd y;
    source.batch(samples, rng, x, y);
    const Eigen::VectorXd r = eval_network(e, feature, x) - y;
    const Eigen::VectorXd loss = 0.5 * r.array().square();
    return core::mean_and_stderr(loss);
}

RiskSeries train(Flavor flavor, const Ensemble& e0, const LabeledSource& source,
                 const core::RidgeFeature& feature, const TrainConfig& cfg, Ensemble* final_ensemble) {
    cfg.validate();
    const core::RidgeFeature active = effective_feature(flavor, feature, cfg);
    core::SeededRng batch_rng = core::SeededRng(cfg.seed).derive("train.batch");
    core::SeededRng eval_rng = core::SeededRng(cfg.seed).derive("train.eval");

    std::set<long> schedule{0, cfg.steps};
    if (cfg.eval_every > 0) {
        for (long s = cfg.eval_every; s < cfg.steps; s += cfg.eval_every) schedule.insert(s);
    }
    if (cfg.eval_log_points > 0 && cfg.steps > 0) {
        const double top = std::log(static_cast<double>(cfg.steps));
        for (int i = 0; i < cfg.eval_log_points; ++i) {
            const double frac = cfg.eval_log_points == 1 ? 1.0 : static_cast<double>(i) / (cfg.eval_log_points - 1);
            schedule.insert(std::clamp(std::lround(std::exp(frac * top)), 1L, cfg.steps));
        }
    }

    RiskSeries series;
    Ensemble e = e0;
    auto record = [&](long step) {
        const core::Estimate risk = population_risk(e, active, source, cfg.eval_batch, eval_rng);
        series.step.push_back(step);
        series.t.push_back(static_cast<double>(step) * cfg.step_size);
        series.risk.push_back(risk.mean);
        series.risk_stderr.push_back(risk.std_error);
        series.path_norm.push_back(e.path_norm());
        series.l2_a.push_back(e.l2_a());
        series.l2_b.push_back(e.l2_b());
    };

    record(0);
    Eigen::MatrixXd x;
    Eigen::VectorXd y;
    for (long step = 1; step <= cfg.steps; ++step) {
        source.batch(cfg.batch, batch_rng, x, y);
        if (flavor == Flavor::smoothed && !smoothed_reduction_exact(feature, x)) {
            series.smoothed_reduction_exact = false;
        }
        e = step_on_batch(flavor, e, active, x, y, cfg.step_size);
        if (!e.all_finite()) {
            throw Divergence("particle parameters became non-finite", step);
        }
        if (schedule.count(step)) record(step);
    }
    if (final_ensemble) *final_ensemble = e;
    return series;
}

SmoothedVelocityEstimate smoothed_velocity_monte_carlo(const Ensemble& e, const core::RidgeFeature& relu_feature,
                                                       const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                                       double h, long samples, core::SeededRng& rng) {
    if (samples < 2) throw InvalidParameter("need at least two Monte Carlo samples");
    core::RidgeFeature smoothed = relu_feature;
    smoothed.activation = core::Activation::make_smoothed_relu(h);

    const Eigen::MatrixXd xt = relu_feature.lift(x);
    const Eigen::VectorXd r = eval_network(e, smoothed, x) - y;
    const Eigen::Index n = x.rows();
    const Eigen::Index m = e.size();
    const Eigen::Index p = e.param_dim();

    // Welford accumulators for every particle component: column 0 is da,
    // columns 1..p are db.
    Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(m, p + 1);
    Eigen::MatrixXd m2 = Eigen::MatrixXd::Zero(m, p + 1);
    Eigen::VectorXd draw(p + 1);
    Eigen::VectorXd b(p);
    for (long s = 0; s < samples; ++s) {
        for (Eigen::Index k = 0; k < m; ++k) {
            const double xi1 = rng.normal();
            for (Eigen::Index j = 0; j < p; ++j) b(j) = e.b(k, j) + h * rng.normal();
            const double amp = e.a(k) + h * xi1;
            draw.setZero();
            for (Eigen::Index i = 0; i < n; ++i) {
                const double z = xt.row(i).dot(b);
                if (z > 0.0) {
                    draw(0) -= r(i) * z;
                    draw.tail(p) -= r(i) * amp * xt.row(i).transpose();
                }
            }
            draw /= static_cast<double>(n);
            const double count = static_cast<double>(s + 1);
            const Eigen::RowVectorXd delta = draw.transpose() - mean.row(k);
            mean.row(k) += delta / count;
            m2.row(k) += delta.cwiseProduct(draw.transpose() - mean.row(k));
        }
    }
    const Eigen::MatrixXd se = (m2 / static_cast<double>(samples - 1) / static_cast<double>(samples)).cwiseSqrt();

    SmoothedVelocityEstimate out;
    out.mean.a = mean.col(0);
    out.mean.b = mean.rightCols(p);
    out.mean.u = Eigen::MatrixXd::Zero(e.u.rows(), e.u.cols());
    out.std_error.a = se.col(0);
    out.std_error.b = se.rightCols(p);
    out.std_error.u = out.mean.u;
    return out;
}

}  // namespace contflow::particles
