#ifndef CONTFLOW_GENERALIZATION_HPP
#define CONTFLOW_GENERALIZATION_HPP

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "contflow/core_math.hpp"

namespace contflow::gen {

/// Bounded feature families, |phi(x; b)| <= 1.
///
/// periodic_gaussian: x on the circle, b uniform on [0, 2pi),
///   phi(x; b) = periodic_feature(x, b, h) / periodic_feature(0, 0, h).
/// cos_ridge: x on the unit sphere S^{d-1}, b = (w, c) with w ~ N(0, I_d)
///   and c uniform on [0, 2pi), phi(x; b) = cos(w . x + c).
class FeatureFamily {
public:
    enum class Kind { periodic_gaussian, cos_ridge };

    static FeatureFamily periodic_gaussian(double h);
    static FeatureFamily cos_ridge(int d);

    Kind kind() const { return kind_; }
    int input_dim() const { return dim_; }
    int param_dim() const { return kind_ == Kind::periodic_gaussian ? 1 : dim_ + 1; }
    double width() const { return h_; }
    std::string name() const;

    core::DataDistribution data() const;
    /// m draws from pi, one per row.
    Eigen::MatrixXd sample_params(Eigen::Index m, core::SeededRng& rng) const;
    /// n x m matrix phi(x_i; b_j).
    Eigen::MatrixXd evaluate(const Eigen::MatrixXd& x, const Eigen::MatrixXd& params) const;
    /// evaluate(x, params) * weights. Periodic features with many parameters
    /// go through the Fourier series of the feature, truncated where the
    /// coefficients fall below 1e-18 of the leading one.
    Eigen::VectorXd combine(const Eigen::MatrixXd& x, const Eigen::MatrixXd& params,
                            const Eigen::VectorXd& weights) const;

private:
    Kind kind_ = Kind::periodic_gaussian;
    int dim_ = 1;
    double h_ = 1.0;
    double scale_ = 1.0;
};

/// Target amplitude a*(b); f*(x) = E_{b ~ pi}[a*(b) phi(x; b)].
using Amplitude = std::function<double(const Eigen::VectorXd&)>;

/// Named amplitudes for configuration files: "zero", "one", "sin"
/// (sin of the first parameter), "mix" (sin b + cos(3b) / 2 of the first
/// parameter) and "cos_sign" (cos of the last parameter times the sign of the
/// first). Throws InvalidParameter for anything else.
Amplitude named_amplitude(const std::string& name);

struct ProblemConfig {
    int m = 100;
    int n = 100;
    double label_noise = 0.0;
    int quadrature_nodes = 256;    // periodic features: trapezoid nodes for f*
    long target_design = 20000;    // cos ridge features: Monte Carlo design for f*
    std::uint64_t seed = 0;

    void validate() const;
};

/// Random-feature regression problem f_m(x; a) = (1/m) sum_j a_j phi(x; b_j)
/// with frozen features, a training set and the comparator a_bar = a*(B).
struct RandomFeatureProblem {
    FeatureFamily feature = FeatureFamily::periodic_gaussian(1.0);
    int m = 0;
    int n = 0;
    Eigen::MatrixXd params;    // B, m x param_dim
    Eigen::MatrixXd x;         // n x d
    Eigen::VectorXd y;         // labels, f*(x_i) plus optional noise
    Eigen::VectorXd y_clean;   // f*(x_i)
    Eigen::MatrixXd design;    // phi(x_i; b_j), n x m
    Eigen::VectorXd a_bar;     // a*(b_j)

    // f*(x) = evaluate(x, target_nodes) * target_weights.
    Eigen::MatrixXd target_nodes;
    Eigen::VectorXd target_weights;
    std::string target_recipe;
    double target_h_norm = 0.0;    // sqrt(E |a*|^2) on the target nodes
    double target_amp_sup = 0.0;   // max |a*| on the target nodes
    double lambda_max = 0.0;       // top eigenvalue of the empirical risk Hessian

    Eigen::VectorXd target_values(const Eigen::MatrixXd& xs) const;
    Eigen::VectorXd predict(const Eigen::VectorXd& a, const Eigen::MatrixXd& xs) const;
    /// (1/n) sum_i (1/2)(f_m(x_i; a) - y_i)^2.
    double empirical_risk(const Eigen::VectorXd& a) const;
    Eigen::VectorXd empirical_gradient(const Eigen::VectorXd& a) const;
    /// Gradient descent is stable for step < 2 / lambda_max.
    double max_step() const { return 2.0 / lambda_max; }
};

RandomFeatureProblem setup_problem(const FeatureFamily& feature, const Amplitude& a_star,
                                   const ProblemConfig& cfg);

/// J(t) = t (R_n(a_t) - R_n(a_bar)) + |a_t - a_bar|^2 / 2.
double lyapunov_J(const RandomFeatureProblem& problem, const Eigen::VectorXd& a_t, double t,
                  const Eigen::VectorXd& a_bar);

/// Exact solution of da/dt = -grad R_n(a), a(0) = 0, at time t.
Eigen::VectorXd gd_closed_form(const RandomFeatureProblem& problem, double t);

/// epsilon(n, m, t, delta) of the a priori estimate, t in rescaled time
/// (the GD time is m^2 t). log(t |f*|_inf / delta) is clamped below at 0.
double epsilon_bound(double n, double m, double t, double delta, double f_sup);

/// Constant-free right-hand side of the a posteriori estimate:
///   R_n(a) + (|a|^2/m + |f*|_H^2) / sqrt(n) * (1 + sqrt(log((|a|/sqrt(m) + 1)^2 / delta))).
double aposteriori_rhs(double emp_risk, double norm_a_sq, double m, double n, double h_norm, double delta);

/// |a*(B)|^2 / m <= |f*|_H^2 + sqrt(log(2/delta) / (2m)) |f*|_inf^2, holding
/// with probability 1 - delta over B.
double norm_bound_value(double h_norm, double f_sup, double m, double delta);

struct BoundRow {
    long step = 0;
    double t = 0.0;
    double t_rescaled = 0.0;  // t / m^2
    double emp_risk = 0.0;
    double pop_risk = std::numeric_limits<double>::quiet_NaN();
    double pop_risk_stderr = std::numeric_limits<double>::quiet_NaN();
    double norm_a_sq = 0.0;
    double J = 0.0;
    double bound_train = 0.0;  // |a_bar|^2 / (2t)
    double bound_norm = 0.0;   // 2 |a_bar|^2 + 2 t R_n(a_bar)
    double epsilon = 0.0;
    double aposteriori = 0.0;
    double delta = 0.0;
};

struct BoundLedger {
    int m = 0;
    int n = 0;
    double step = 0.0;
    long steps = 0;
    double delta = 0.0;
    double initial_risk = 0.0;     // R_n(0)
    double comparator_risk = 0.0;  // R_n(a_bar)
    double comparator_norm_sq = 0.0;
    double J0 = 0.0;               // J(0) = |a_bar|^2 / 2
    std::vector<BoundRow> rows;    // one per checkpoint, t > 0
    Eigen::VectorXd final_a;

    /// Largest discrepancy of each checked property over the checkpoints,
    /// positive when violated.
    double max_J_increase() const;
    double max_train_excess() const;
    double max_norm_excess() const;
};

struct GdOptions {
    int checkpoints = 20;
    double delta = 0.1;
    long pop_samples = 0;  // 0 skips population risk
    std::uint64_t seed = 0;
};

/// Gradient descent a <- a - step grad R_n(a) from a = 0 with the bound
/// ledger at geometrically spaced steps. Throws StepTooLarge when
/// step >= 2 / lambda_max.
BoundLedger gd_empirical(const RandomFeatureProblem& problem, double step, long steps, const GdOptions& opts);

/// Population risk (1/2) E (f_m(x; a) - f*(x))^2 on `samples` draws from
/// the data distribution.
core::Estimate population_risk(const RandomFeatureProblem& problem, const Eigen::VectorXd& a, long samples,
                               core::SeededRng& rng);

struct BoundReport {
    double epsilon = 0.0;
    double aposteriori = 0.0;
    double apriori = 0.0;  // (|f*|_H^2 + sqrt(log(2/delta)/m) |f*|_inf^2) epsilon
    bool width_condition = false;  // m >= log^2(n / delta)
    std::string caveat;
};

BoundReport eval_bounds(const BoundRow& row, int m, int n, double h_norm, double f_sup, double delta);

/// Smallest C with measured <= C * bound over all pairs; NaN if no bound is
/// positive.
double fit_envelope_constant(const std::vector<double>& measured, const std::vector<double>& bound);

struct DoubleDescentRow {
    int m = 0;
    double emp_risk = 0.0;
    double pop_risk = 0.0;
    double pop_risk_stderr = 0.0;
    double norm_a_sq = 0.0;
};

/// Geometric grid of `points` widths from n/8 to 8n, always containing n.
std::vector<int> double_descent_widths(int n, int points);

/// Population risk of the gradient-flow solution at time m^2 t_rescaled for
/// each width. Every width uses cfg.seed, so the training inputs and labels
/// are the same along the sweep.
std::vector<DoubleDescentRow> double_descent_probe(const FeatureFamily& feature, const Amplitude& a_star,
                                                   ProblemConfig cfg, const std::vector<int>& widths,
                                                   double t_rescaled, long pop_samples);

}  // namespace contflow::gen

#endif  // CONTFLOW_GENERALIZATION_HPP
