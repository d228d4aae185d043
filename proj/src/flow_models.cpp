#include "contflow/flow_models.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

namespace contflow::flow {

using Eigen::MatrixXd;
using Eigen::VectorXd;

FlowModel::FlowModel(MatrixXd lift, std::vector<FlowLayer> layers, core::Activation activation)
    : lift_(std::move(lift)), layers_(std::move(layers)), activation_(activation) {
    validate();
}

void FlowModel::validate() const {
    if (layers_.empty()) throw InvalidParameter("flow model needs at least one layer");
    if (lift_.cols() < 2 || lift_.rows() < 1) throw InvalidParameter("lift must be D x (d + 1) with d >= 1");
    const auto D = lift_.rows();
    const auto m = layers_.front().a.rows();
    if (m < 1) throw InvalidParameter("flow layers need at least one particle");
    for (const auto& layer : layers_) {
        if (layer.a.rows() != m || layer.b.rows() != m || layer.c.size() != m) {
            throw DimensionMismatch("every layer must carry the same number of particles");
        }
        if (layer.a.cols() != D || layer.b.cols() != D) {
            throw DimensionMismatch("layer parameters must match the state dimension");
        }
    }
}

FlowModel FlowModel::random_feature(int d, int D, int L, int m, core::SeededRng& rng, bool shared_features) {
    if (d < 1 || D < d + 1 || L < 1 || m < 1) {
        throw InvalidParameter("random-feature flow needs d >= 1, D >= d + 1, L >= 1, m >= 1");
    }
    MatrixXd lift = MatrixXd::Zero(D, d + 1);
    lift.topRows(d + 1).setIdentity();
    std::vector<FlowLayer> layers(L);
    for (int l = 0; l < L; ++l) {
        FlowLayer& layer = layers[l];
        layer.a = MatrixXd::Zero(m, D);
        if (shared_features && l > 0) {
            layer.b = layers[0].b;
            layer.c = layers[0].c;
            continue;
        }
        const MatrixXd w = rng.sphere(m, D + 1);
        layer.b = w.leftCols(D);
        layer.c = w.col(D);
    }
    FlowModel model(std::move(lift), std::move(layers), core::Activation::make_tanh());
    if (!model.lift_has_full_rank()) throw InvalidParameter("lift matrix must have rank d + 1");
    return model;
}

bool FlowModel::lift_has_full_rank() const {
    Eigen::FullPivLU<MatrixXd> lu(lift_);
    return lu.rank() == lift_.cols();
}

bool FlowModel::all_finite() const {
    return std::all_of(layers_.begin(), layers_.end(), [](const FlowLayer& layer) {
        return layer.a.allFinite() && layer.b.allFinite() && layer.c.allFinite();
    });
}

double FlowModel::layer_amplitude_norm_sq(int layer) const {
    const auto& a = layers_.at(static_cast<std::size_t>(layer)).a;
    return a.squaredNorm() / static_cast<double>(a.rows());
}

double FlowModel::amplitude_norm_sq() const {
    double total = 0.0;
    for (int l = 0; l < depth(); ++l) total += layer_amplitude_norm_sq(l);
    return total / depth();
}

double gradient_weight(const FlowModel& model) { return 1.0 / (double(model.depth()) * model.width()); }

AdjointTrajectory forward(const FlowModel& model, const MatrixXd& x) {
    if (x.cols() != model.input_dim()) throw DimensionMismatch("flow input has wrong dimension");
    const double w = gradient_weight(model);
    AdjointTrajectory traj;
    MatrixXd xt(x.rows(), x.cols() + 1);
    xt << x, VectorXd::Ones(x.rows());
    traj.z.push_back(xt * model.lift().transpose());
    for (const FlowLayer& layer : model.layers()) {
        const MatrixXd& z = traj.z.back();
        MatrixXd pre = z * layer.b.transpose();
        pre.rowwise() += layer.c.transpose();
        const MatrixXd s = model.activation().apply(pre.array()).matrix();
        MatrixXd next = z + w * (s * layer.a);
        traj.pre.push_back(std::move(pre));
        if (!next.allFinite()) throw Divergence("flow state became non-finite", 0);
        traj.z.push_back(std::move(next));
    }
    traj.output = traj.z.back().rowwise().sum();
    return traj;
}

void backward(const FlowModel& model, AdjointTrajectory& traj, const VectorXd& y) {
    if (traj.z.empty()) throw InvalidParameter("backward needs a forward trajectory");
    if (y.size() != traj.output.size()) throw DimensionMismatch("labels and batch differ in length");
    const double w = gradient_weight(model);
    const int L = model.depth();
    const auto D = model.state_dim();
    traj.residual = traj.output - y;
    traj.p.assign(L + 1, MatrixXd());
    traj.p[L] = traj.residual * Eigen::RowVectorXd::Ones(D);
    for (int l = L - 1; l >= 0; --l) {
        const FlowLayer& layer = model.layers()[l];
        const MatrixXd& next = traj.p[l + 1];
        const MatrixXd ds = model.activation().apply_derivative(traj.pre[l].array()).matrix();
        const MatrixXd coupling = ((next * layer.a.transpose()).array() * ds.array()).matrix();
        traj.p[l] = next + w * (coupling * layer.b);
    }
}

double batch_risk(const FlowModel& model, const MatrixXd& x, const VectorXd& y) {
    const AdjointTrajectory traj = forward(model, x);
    return 0.5 * (traj.output - y).squaredNorm() / static_cast<double>(y.size());
}

namespace {

void require_costate(const AdjointTrajectory& traj) {
    if (!traj.has_costate()) throw InvalidParameter("gradients need a backward pass");
}

}  // namespace

FlowGradient grad_amplitudes(const FlowModel& model, const AdjointTrajectory& traj) {
    require_costate(traj);
    const double n = static_cast<double>(traj.output.size());
    FlowGradient g;
    for (int l = 0; l < model.depth(); ++l) {
        const MatrixXd s = model.activation().apply(traj.pre[l].array()).matrix();
        g.a.push_back(s.transpose() * traj.p[l + 1] / n);
    }
    return g;
}

FlowGradient grad_particles(const FlowModel& model, const AdjointTrajectory& traj) {
    FlowGradient g = grad_amplitudes(model, traj);
    const double n = static_cast<double>(traj.output.size());
    for (int l = 0; l < model.depth(); ++l) {
        const FlowLayer& layer = model.layers()[l];
        const MatrixXd ds = model.activation().apply_derivative(traj.pre[l].array()).matrix();
        const MatrixXd coupling = ((traj.p[l + 1] * layer.a.transpose()).array() * ds.array()).matrix();
        g.b.push_back(coupling.transpose() * traj.z[l] / n);
        g.c.push_back(coupling.colwise().sum().transpose() / n);
    }
    return g;
}

double FlowGradient::dissipation(bool particles) const {
    double total = 0.0;
    const double L = static_cast<double>(a.size());
    for (std::size_t l = 0; l < a.size(); ++l) {
        double sq = a[l].squaredNorm();
        if (particles && l < b.size()) sq += b[l].squaredNorm() + c[l].squaredNorm();
        total += sq / static_cast<double>(a[l].rows()) / L;
    }
    return total;
}

std::vector<double> costate_bound(const FlowModel& model) {
    const int L = model.depth();
    const double w = gradient_weight(model);
    std::vector<double> bound(L + 1, 1.0);
    for (int l = L - 1; l >= 0; --l) {
        const FlowLayer& layer = model.layers()[l];
        const double lip = (layer.a.rowwise().norm().array() * layer.b.rowwise().norm().array()).sum();
        bound[l] = bound[l + 1] * (1.0 + w * lip);
    }
    return bound;
}

Eigen::VectorXd hamiltonian(const FlowModel& model, const AdjointTrajectory& traj, int layer,
                            const MatrixXd& costate) {
    const FlowLayer& lay = model.layers().at(static_cast<std::size_t>(layer));
    const MatrixXd s = model.activation().apply(traj.pre[layer].array()).matrix();
    const MatrixXd g = s * lay.a / static_cast<double>(model.width());
    return (costate.array() * g.array()).rowwise().sum();
}

Eigen::VectorXd hamiltonian(const FlowModel& model, const AdjointTrajectory& traj, int layer) {
    require_costate(traj);
    return hamiltonian(model, traj, layer, traj.p[layer + 1]);
}

namespace {

// mean_x H for layer l with trial parameters, states and co-states frozen.
double mean_hamiltonian(const core::Activation& act, const MatrixXd& z, const MatrixXd& p, const FlowLayer& layer) {
    MatrixXd pre = z * layer.b.transpose();
    pre.rowwise() += layer.c.transpose();
    const MatrixXd s = act.apply(pre.array()).matrix();
    const MatrixXd g = s * layer.a / static_cast<double>(layer.a.rows());
    return (p.array() * g.array()).sum() / static_cast<double>(z.rows());
}

}  // namespace

std::vector<double> pmp_residual(const FlowModel& model, const MatrixXd& x, const VectorXd& y, double kappa,
                                 bool particles) {
    if (!(kappa > 0.0)) throw InvalidParameter("perturbation size must be positive");
    AdjointTrajectory traj = forward(model, x);
    backward(model, traj, y);
    const FlowGradient grad = particles ? grad_particles(model, traj) : grad_amplitudes(model, traj);
    std::vector<double> residual;
    for (int l = 0; l < model.depth(); ++l) {
        const FlowLayer& layer = model.layers()[l];
        const MatrixXd& z = traj.z[l];
        const MatrixXd& p = traj.p[l + 1];
        const double base = mean_hamiltonian(model.activation(), z, p, layer);
        double best = base;
        for (double scale : {1.0 - kappa, 1.0 + kappa}) {
            FlowLayer trial = layer;
            trial.a *= scale;
            best = std::min(best, mean_hamiltonian(model.activation(), z, p, trial));
        }
        if (const double norm = grad.a[l].norm(); norm > 0.0) {
            FlowLayer trial = layer;
            trial.a -= kappa * grad.a[l] / norm;
            best = std::min(best, mean_hamiltonian(model.activation(), z, p, trial));
        }
        if (particles) {
            const double norm = std::sqrt(grad.b[l].squaredNorm() + grad.c[l].squaredNorm());
            if (norm > 0.0) {
                FlowLayer trial = layer;
                trial.b -= kappa * grad.b[l] / norm;
                trial.c -= kappa * grad.c[l] / norm;
                best = std::min(best, mean_hamiltonian(model.activation(), z, p, trial));
            }
        }
        residual.push_back(base - best);
    }
    return residual;
}

FlowGradient descent_step(FlowModel& model, const MatrixXd& x, const VectorXd& y, double step, bool particles) {
    AdjointTrajectory traj = forward(model, x);
    backward(model, traj, y);
    FlowGradient g = particles ? grad_particles(model, traj) : grad_amplitudes(model, traj);
    for (int l = 0; l < model.depth(); ++l) {
        FlowLayer& layer = model.layers()[l];
        layer.a -= step * g.a[l];
        if (particles) {
            layer.b -= step * g.b[l];
            layer.c -= step * g.c[l];
        }
    }
    return g;
}

namespace {

core::Estimate flow_population_risk(const FlowModel& model, const particles::LabeledSource& source, long samples,
                                    core::SeededRng& rng) {
    MatrixXd x;
    VectorXd y;
    source.batch(samples, rng, x, y);
    const AdjointTrajectory traj = forward(model, x);
    const VectorXd loss = 0.5 * (traj.output - y).array().square();
    return core::mean_and_stderr(loss);
}

FlowRiskSeries train_flow(FlowModel& model, const particles::LabeledSource& source,
                          const particles::TrainConfig& cfg, bool particles) {
    cfg.validate();
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

    FlowRiskSeries series;
    double last_dissipation = std::numeric_limits<double>::quiet_NaN();
    auto record = [&](long step) {
        const core::Estimate risk = flow_population_risk(model, source, cfg.eval_batch, eval_rng);
        auto& r = series.risk;
        r.step.push_back(step);
        r.t.push_back(static_cast<double>(step) * cfg.step_size);
        r.risk.push_back(risk.mean);
        r.risk_stderr.push_back(risk.std_error);
        double path = 0.0, la = 0.0, lb = 0.0;
        for (const FlowLayer& layer : model.layers()) {
            path += (layer.a.rowwise().norm().array() * layer.b.rowwise().norm().array()).mean();
            la += layer.a.squaredNorm() / static_cast<double>(layer.a.rows());
            lb += layer.b.squaredNorm() / static_cast<double>(layer.b.rows());
        }
        r.path_norm.push_back(path / model.depth());
        r.l2_a.push_back(std::sqrt(la / model.depth()));
        r.l2_b.push_back(std::sqrt(lb / model.depth()));
        series.amplitude_norm_sq.push_back(model.amplitude_norm_sq());
        std::vector<double> per_layer;
        for (int l = 0; l < model.depth(); ++l) per_layer.push_back(model.layer_amplitude_norm_sq(l));
        series.layer_amplitude_norm_sq.push_back(std::move(per_layer));
        series.dissipation.push_back(last_dissipation);
    };

    record(0);
    MatrixXd x;
    VectorXd y;
    for (long step = 1; step <= cfg.steps; ++step) {
        source.batch(cfg.batch, batch_rng, x, y);
        try {
            last_dissipation = descent_step(model, x, y, cfg.step_size, particles).dissipation(particles);
        } catch (const Divergence&) {
            throw Divergence("flow state became non-finite", step);
        }
        if (!model.all_finite()) throw Divergence("flow parameters became non-finite", step);
        if (schedule.count(step)) record(step);
    }
    return series;
}

}  // namespace

FlowRiskSeries train_flow_rf(FlowModel& model, const particles::LabeledSource& source,
                             const particles::TrainConfig& cfg) {
    return train_flow(model, source, cfg, false);
}

FlowRiskSeries train_flow_net(FlowModel& model, const particles::LabeledSource& source,
                              const particles::TrainConfig& cfg) {
    return train_flow(model, source, cfg, true);
}

}  // namespace contflow::flow
