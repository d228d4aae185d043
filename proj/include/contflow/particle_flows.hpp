#ifndef CONTFLOW_PARTICLE_FLOWS_HPP
#define CONTFLOW_PARTICLE_FLOWS_HPP

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "contflow/core_math.hpp"
#include "contflow/errors.hpp"
#include "contflow/targets.hpp"

namespace contflow::particles {

/// m weighted particles w_k = (a_k, b_k) representing the scaled two-layer
/// network f(x) = (1/m) sum_k a_k sigma(b_k . x~). The u-particle scheme also
/// carries u_k, the gradient of the amplitude function at b_k.
template <typename Scalar>
struct ParticleEnsemble {
    using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

    Vector a;  // m
    Matrix b;  // m x p, row k is b_k
    Matrix u;  // m x p, or empty

    Eigen::Index size() const { return a.size(); }
    Eigen::Index param_dim() const { return b.cols(); }
    bool has_u() const { return u.size() > 0; }

    bool all_finite() const {
        return a.allFinite() && b.allFinite() && (!has_u() || u.allFinite());
    }

    /// Particle k of the result is particle perm[k] of this ensemble.
    ParticleEnsemble permuted(const std::vector<Eigen::Index>& perm) const {
        ParticleEnsemble out = *this;
        for (std::size_t k = 0; k < perm.size(); ++k) {
            const auto src = perm[k];
            out.a(k) = a(src);
            out.b.row(k) = b.row(src);
            if (has_u()) out.u.row(k) = u.row(src);
        }
        return out;
    }

    /// (1/m) sum_k |a_k| ||b_k||.
    Scalar path_norm() const { return (a.array().abs() * b.rowwise().norm().array()).mean(); }
    /// sqrt((1/m) sum_k a_k^2).
    Scalar l2_a() const { return std::sqrt(a.squaredNorm() / Scalar(size())); }
    /// sqrt((1/m) sum_k ||b_k||^2).
    Scalar l2_b() const { return std::sqrt(b.squaredNorm() / Scalar(size())); }
};

using Ensemble = ParticleEnsemble<double>;

enum class InitScheme { zero_a_gauss_b, gauss_all, custom };

/// zero_a_gauss_b: a = u = 0, b ~ N(0, I). gauss_all: a, b ~ N(0, I), u = 0.
/// custom: all zeros, shaped for the caller to fill in. Draws are taken row
/// by row, b before a.
Ensemble init_ensemble(int m, int param_dim, InitScheme scheme, core::SeededRng& rng,
                       bool with_u = true);

/// Preactivations Z(i, k) = b_k . x~_i for a batch x (n x d).
template <typename Scalar, typename Derived>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> preactivations(
    const ParticleEnsemble<Scalar>& e, const core::RidgeFeature& feature,
    const Eigen::MatrixBase<Derived>& x) {
    if (e.param_dim() != feature.param_dim()) {
        throw DimensionMismatch("ensemble parameter dimension does not match the feature");
    }
    return feature.lift(x.template cast<Scalar>()) * e.b.transpose();
}

/// f(x_i) = (1/m) sum_k a_k sigma(b_k . x~_i) for each row of x.
template <typename Scalar, typename Derived>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> eval_network(const ParticleEnsemble<Scalar>& e,
                                                      const core::RidgeFeature& feature,
                                                      const Eigen::MatrixBase<Derived>& x) {
    const auto z = preactivations(e, feature, x);
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> s = feature.activation.apply(z.array()).matrix();
    return s * e.a / Scalar(e.size());
}

/// Network value at a single point.
template <typename Scalar>
Scalar eval_network_at(const ParticleEnsemble<Scalar>& e, const core::RidgeFeature& feature,
                       const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& x) {
    if (x.size() != feature.input_dim) throw DimensionMismatch("network input has wrong dimension");
    return eval_network(e, feature, x.transpose())(0);
}

enum class Flavor { two_layer, random_feature, smoothed, u_particle };

const char* flavor_name(Flavor flavor);

/// Time derivatives (da/dt, db/dt, du/dt) of the particle flow, with the data
/// expectation replaced by the mean over an explicit batch (x, y). Entries
/// that a flavor does not move are zero. The smoothed flavor is the two-layer
/// flow of a feature whose activation is the smoothed ReLU.
template <typename Scalar>
struct Velocity {
    typename ParticleEnsemble<Scalar>::Vector a;
    typename ParticleEnsemble<Scalar>::Matrix b;
    typename ParticleEnsemble<Scalar>::Matrix u;
};

template <typename Scalar, typename DerivedX, typename DerivedY>
Velocity<Scalar> velocity(Flavor flavor, const ParticleEnsemble<Scalar>& e,
                          const core::RidgeFeature& feature, const Eigen::MatrixBase<DerivedX>& x,
                          const Eigen::MatrixBase<DerivedY>& y) {
    using Matrix = typename ParticleEnsemble<Scalar>::Matrix;
    using Vector = typename ParticleEnsemble<Scalar>::Vector;
    const Eigen::Index n = x.rows();
    const Eigen::Index m = e.size();
    if (y.size() != n) throw DimensionMismatch("labels and inputs differ in length");
    if (e.param_dim() != feature.param_dim()) {
        throw DimensionMismatch("ensemble parameter dimension does not match the feature");
    }
    if (flavor == Flavor::u_particle && !e.has_u()) {
        throw InvalidParameter("u-particle flow needs an ensemble carrying u");
    }

    const Matrix xt = feature.lift(x.template cast<Scalar>());
    const Matrix z = xt * e.b.transpose();
    const Matrix s = feature.activation.apply(z.array()).matrix();
    const Vector r = s * e.a / Scalar(m) - y.template cast<Scalar>();

    Velocity<Scalar> v;
    v.a = -(s.transpose() * r) / Scalar(n);
    v.b = Matrix::Zero(m, e.param_dim());
    v.u = Matrix::Zero(e.u.rows(), e.u.cols());
    if (flavor == Flavor::random_feature) return v;

    // G(k, :) = mean_i r_i sigma'(z_ik) x~_i
    const Matrix weighted = (feature.activation.apply_derivative(z.array()).colwise() * r.array()).matrix();
    const Matrix g = weighted.transpose() * xt / Scalar(n);
    if (flavor == Flavor::u_particle) {
        v.u = -g;
        v.b = (e.u.array().colwise() * v.a.array()).matrix() - (g.array().colwise() * e.a.array()).matrix();
    } else {
        v.b = -(g.array().colwise() * e.a.array()).matrix();
    }
    return v;
}

/// Forward Euler update e + step * v.
template <typename Scalar>
ParticleEnsemble<Scalar> apply_velocity(const ParticleEnsemble<Scalar>& e, const Velocity<Scalar>& v,
                                        Scalar step) {
    ParticleEnsemble<Scalar> out = e;
    out.a += step * v.a;
    out.b += step * v.b;
    if (out.has_u()) out.u += step * v.u;
    return out;
}

/// Whether every lifted input has unit norm, the condition under which the
/// Gaussian-smoothed particle flow reduces exactly to the smoothed-ReLU
/// network.
template <typename Derived>
bool smoothed_reduction_exact(const core::RidgeFeature& feature, const Eigen::MatrixBase<Derived>& x,
                              double tol = 1e-12) {
    const Eigen::MatrixXd xt = feature.lift(x.template cast<double>());
    return ((xt.rowwise().norm().array() - 1.0).abs() <= tol).all();
}

/// Supervised data source: a sampler and a labeling function, or a fixed
/// finite dataset whose every batch is the full set.
class LabeledSource {
public:
    static LabeledSource from_target(core::TargetSpec target);
    static LabeledSource from_function(core::DataDistribution data,
                                       std::function<Eigen::VectorXd(const Eigen::MatrixXd&)> label);
    static LabeledSource fixed(Eigen::MatrixXd x, Eigen::VectorXd y);

    int input_dim() const { return dim_; }
    bool is_fixed() const { return fixed_x_.has_value(); }

    /// Draws a batch and labels it. Fixed sources ignore n and rng.
    void batch(Eigen::Index n, core::SeededRng& rng, Eigen::MatrixXd& x, Eigen::VectorXd& y) const;
    Eigen::VectorXd label(const Eigen::MatrixXd& x) const;

private:
    int dim_ = 1;
    core::DataDistribution data_;
    std::function<Eigen::VectorXd(const Eigen::MatrixXd&)> label_;
    std::optional<Eigen::MatrixXd> fixed_x_;
    std::optional<Eigen::VectorXd> fixed_y_;
};

struct TrainConfig {
    double step_size = 0.1;
    long batch = 100;
    long steps = 10000;
    std::uint64_t seed = 0;
    long eval_batch = 10000;
    /// Evaluate every this many steps (0 disables the uniform schedule).
    long eval_every = 1000;
    /// Additional evaluations at this many log-spaced steps in [1, steps].
    int eval_log_points = 0;
    /// Width of the smoothed ReLU for the smoothed flavor.
    double smoothing_width = 0.1;

    void validate() const;
};

/// One forward Euler step on a fresh batch drawn from `source`.
Ensemble gd_step(Flavor flavor, const Ensemble& e, const LabeledSource& source,
                 const core::RidgeFeature& feature, const TrainConfig& cfg, core::SeededRng& rng);

Ensemble gd_step_two_layer(const Ensemble& e, const LabeledSource& source,
                           const core::RidgeFeature& feature, const TrainConfig& cfg,
                           core::SeededRng& rng);
Ensemble gd_step_random_feature(const Ensemble& e, const LabeledSource& source,
                                const core::RidgeFeature& feature, const TrainConfig& cfg,
                                core::SeededRng& rng);
/// Two-layer step with the ReLU replaced by its smoothing of width h. When
/// `reduction_exact` is given it is set to whether the batch lay on the unit
/// sphere.
Ensemble gd_step_smoothed(const Ensemble& e, const LabeledSource& source,
                          const core::RidgeFeature& feature, const TrainConfig& cfg, double h,
                          core::SeededRng& rng, bool* reduction_exact = nullptr);
Ensemble gd_step_u_particle(const Ensemble& e, const LabeledSource& source,
                            const core::RidgeFeature& feature, const TrainConfig& cfg,
                            core::SeededRng& rng);

/// Feature with the activation a flavor actually uses.
core::RidgeFeature effective_feature(Flavor flavor, const core::RidgeFeature& feature,
                                     const TrainConfig& cfg);

/// Population risk (1/2) E (f - f*)^2 estimated on fresh samples.
struct RiskSeries {
    std::vector<long> step;
    std::vector<double> t;
    std::vector<double> risk;
    std::vector<double> risk_stderr;
    std::vector<double> path_norm;
    std::vector<double> l2_a;
    std::vector<double> l2_b;
    /// Smoothed flavor only: every training batch lay on the unit sphere.
    bool smoothed_reduction_exact = true;

    std::size_t size() const { return step.size(); }
};

core::Estimate population_risk(const Ensemble& e, const core::RidgeFeature& feature,
                               const LabeledSource& source, long samples, core::SeededRng& rng);

/// Runs cfg.steps forward Euler steps from e0. Training batches come from the
/// stream "train.batch" of cfg.seed and evaluation batches from
/// "train.eval", so the series is a pure function of its arguments. Throws
/// Divergence with the step index on non-finite parameters.
RiskSeries train(Flavor flavor, const Ensemble& e0, const LabeledSource& source,
                 const core::RidgeFeature& feature, const TrainConfig& cfg,
                 Ensemble* final_ensemble = nullptr);

/// Monte Carlo estimate of the smoothed particle velocity
/// E_xi[v(pi_h, w_k + h xi)], xi ~ N(0, I), for a batch, using ReLU on the
/// perturbed parameters and the smoothed-ReLU network for the residual.
struct SmoothedVelocityEstimate {
    Velocity<double> mean;
    Velocity<double> std_error;
};

SmoothedVelocityEstimate smoothed_velocity_monte_carlo(const Ensemble& e, const core::RidgeFeature& relu_feature,
                                                       const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                                       double h, long samples, core::SeededRng& rng);

}  // namespace contflow::particles

#endif  // CONTFLOW_PARTICLE_FLOWS_HPP
