#ifndef CONTFLOW_MEANFIELD_SPECTRAL_HPP
#define CONTFLOW_MEANFIELD_SPECTRAL_HPP

#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "contflow/core_math.hpp"
#include "contflow/fourier_field.hpp"

namespace contflow::meanfield {

using fourier::Complex;
using fourier::DensityField;
using fourier::FourierField;

enum class Integrator { rk4, euler };

/// Fourier coefficient of w -> K(w, 0) for the closed-form kernel of the
/// periodic Gaussian feature: (h^2 / 4 pi) exp(-h^2 k^2 / 2).
double kernel_coefficient(int k, double h);

/// Kernel K_n(w, w') = (1/n) sum_i phi(x_i, w) phi(x_i, w') built from data
/// samples x_i on [0, 2pi).
struct EmpiricalKernel {
    Eigen::VectorXd samples;
    double h = 1.0;

    static EmpiricalKernel sample(int n, double h, core::SeededRng& rng);
    int size() const { return static_cast<int>(samples.size()); }
};

/// Coefficient matrix K_hat_n(k, l) = (2pi)^-2 int int K_n(w, w') e^{-ikw + ilw'},
/// rows and columns indexed by k + cutoff. Equal to (1/n) sum_i Phi_i Phi_i^H
/// with Phi_i(k) the coefficients of phi(x_i, .).
Eigen::MatrixXcd empirical_kernel_field(const EmpiricalKernel& ek, int cutoff);

/// Conservative mean-field flow d rho/dt = div(rho grad K*(rho - rho*)) on
/// the circle, discretized by a truncated Fourier series.
class MeanFieldProblem {
public:
    /// Translation-invariant kernel of the periodic Gaussian feature of width h.
    /// The kernel coefficients are obtained by analyzing closed_form_kernel
    /// samples on the dealiased grid.
    static MeanFieldProblem closed_form(double h, DensityField rho_star, double dt = 0.01,
                                        Integrator integrator = Integrator::rk4,
                                        double horizon = 1e4);
    /// Any translation-invariant kernel given by its coefficients. `h` is the
    /// feature width used for the function-space diagnostics.
    static MeanFieldProblem with_kernel(FourierField kernel, DensityField rho_star, double h,
                                        double dt = 0.01, Integrator integrator = Integrator::rk4,
                                        double horizon = 1e4);
    static MeanFieldProblem empirical(const EmpiricalKernel& ek, DensityField rho_star,
                                      double dt = 0.01, Integrator integrator = Integrator::rk4,
                                      double horizon = 1e4);

    const FourierField& kernel() const { return kernel_; }
    const std::optional<Eigen::MatrixXcd>& kernel_matrix() const { return kernel_matrix_; }
    bool is_empirical() const { return kernel_matrix_.has_value(); }
    const DensityField& rho_star() const { return rho_star_; }
    double h() const { return h_; }
    double dt() const { return dt_; }
    Integrator integrator() const { return integrator_; }
    double horizon() const { return horizon_; }
    int cutoff() const { return rho_star_.cutoff(); }
    /// Collocation grid for the quadratic product: the smallest power of two
    /// that is at least 3M + 2.
    int dealias_grid() const { return dealias_grid_; }

    void set_dt(double dt);
    void set_horizon(double horizon);
    void set_integrator(Integrator integrator) { integrator_ = integrator; }

private:
    MeanFieldProblem() = default;
    void validate() const;

    FourierField kernel_;
    std::optional<Eigen::MatrixXcd> kernel_matrix_;
    DensityField rho_star_;
    double h_ = 1.0;
    double dt_ = 0.01;
    Integrator integrator_ = Integrator::rk4;
    double horizon_ = 1e4;
    int dealias_grid_ = 0;
};

int dealias_grid_size(int cutoff);

/// Spectral coefficients of div(rho grad K*(rho - rho*)). The k = 0 entry is
/// exactly zero.
FourierField rhs(const MeanFieldProblem& problem, const DensityField& rho);

/// One classical RK4 (or forward Euler) step of size dt; negative dt steps
/// backward. `t` only labels a BlowUp raised on non-finite coefficients.
DensityField step_rk4(const MeanFieldProblem& problem, const DensityField& rho, double dt, double t = 0.0);
DensityField step_euler(const MeanFieldProblem& problem, const DensityField& rho, double dt, double t = 0.0);

/// Quadratic energy 1/2 int int K(w - w')(rho - rho*)(w)(rho - rho*)(w').
/// For the closed-form kernel it equals half the function-space error.
double free_energy(const MeanFieldProblem& problem, const DensityField& rho);
/// E_x |f_rho - f*|^2 with x uniform on the circle, f_rho = int phi(., w) rho(w) dw.
double function_error(const MeanFieldProblem& problem, const DensityField& rho);

struct Snapshot {
    double t = 0.0;
    Eigen::VectorXd x;
    Eigen::VectorXd f_t;
    Eigen::VectorXd f_star;
};

struct EvolveOptions {
    /// Record every this many steps (0 disables the uniform schedule).
    long record_every = 100;
    /// Additional records at this many log-spaced steps in [1, total].
    int log_records = 0;
    bool compute_w2 = true;
    /// Cut points for circle W2; 0 means the density grid size.
    int w2_cuts = 0;
    /// Track the relative entropy after every step, not just at records.
    bool entropy_every_step = false;
    std::vector<double> snapshot_times;
    int snapshot_points = 256;
};

/// Diagnostics along a mean-field run. Row r of `mode_error` holds
/// |rho_hat_t(k) - rho_hat*(k)| for k = 0..M at time t[r].
struct RunRecord {
    std::vector<double> t;
    std::vector<double> l2_error;
    std::vector<double> rel_entropy;  // NaN when a density is not positive
    std::vector<double> w2;           // NaN when not computed
    std::vector<double> rho_min;
    std::vector<double> free_energy;
    std::vector<double> emp_risk;     // empirical kernel runs only
    std::vector<double> rho_l2;       // empirical kernel runs only
    Eigen::MatrixXd mode_error;
    std::vector<Snapshot> snapshots;

    bool empirical = false;
    long steps = 0;
    double dt = 0.0;
    /// Largest |rho_hat_t(0) - 1/2pi| over every step.
    double max_mass_drift = 0.0;
    /// Largest single-step increase of the free energy (0 if never increasing).
    double max_free_energy_increase = 0.0;
    /// Largest single-step increase of the relative entropy; NaN when not tracked.
    double max_entropy_increase = 0.0;
    std::optional<DensityField> final_density;

    std::size_t size() const { return t.size(); }
};

/// Integrates from rho0 for round(horizon / dt) steps. Throws BlowUp on
/// non-finite coefficients or when the density drops below -1e-3.
RunRecord evolve(const MeanFieldProblem& problem, const DensityField& rho0,
                 const EvolveOptions& options = {});

// ---------------------------------------------------------------------------
// Local convergence envelope
// ---------------------------------------------------------------------------

struct ConvergenceEnvelope {
    double C = 1.0;
    double t0 = 1.0;
};

/// Kernel and target constants entering the local-convergence theorem,
/// measured over the resolved modes 1..M:
///   C0 = min_k |k| K_hat(k), C1 = max_k |k| K_hat(k), C* = max_k k^2 |rho_hat*(k)|,
///   cond_local = C0 t0 / (2 pi C) - 32 C1 (C* t0 + C).
struct EnvelopeConstants {
    double C0 = 0.0;
    double C1 = 0.0;
    double C_star = 0.0;
    double cond_local = 0.0;
    bool cond_K_holds = false;
    bool cond_local_holds = false;
};

EnvelopeConstants envelope_constants(const MeanFieldProblem& problem, const ConvergenceEnvelope& env);

struct EnvelopeReport {
    /// mode_ok[k] for k = 0..M; k = 0 is always true.
    std::vector<bool> mode_ok;
    bool initial_condition_holds = false;
    bool all_ok = true;
    double first_violation_time = 0.0;  // NaN when no violation
    int first_violation_mode = -1;
    EnvelopeConstants constants;
};

/// Checks |rho_hat_t(k) - rho_hat*(k)| <= C / (k^2 (t + t0)) for every record
/// and mode k >= 1, and the strict t = 0 condition C / (k^2 t0).
EnvelopeReport check_envelope(const RunRecord& record, const ConvergenceEnvelope& env,
                              const EnvelopeConstants& constants = {});

/// Smallest C meeting the t = 0 condition, multiplied by `slack`.
ConvergenceEnvelope fit_envelope(const RunRecord& record, double t0, double slack = 2.0);

// ---------------------------------------------------------------------------
// Linearized kernel and frequency principle
// ---------------------------------------------------------------------------

/// Fourier decomposition K~(s) = c_0 + sum_k b_k sin(ks) + c_k cos(ks) of the
/// linearized kernel K~(x, x') = int d_w phi(x, w) d_w phi(x', w) rho0(w) dw,
/// translation-averaged when rho0 is not uniform. `eigenvalues[k]` is the
/// modulus of (c_k +- i b_k) / 2, the eigenvalue of f -> E_x'[K~(., x') f(x')]
/// for x' uniform on the circle, i.e. the linear decay rate of mode k.
struct LinearizedSpectrum {
    Eigen::VectorXd c;
    Eigen::VectorXd b;
    Eigen::VectorXd eigenvalues;
};

LinearizedSpectrum linearized_spectrum(const MeanFieldProblem& problem, const DensityField& rho0,
                                       int quadrature_points = 0);

/// First time at which mode k's error falls to half its initial value,
/// linearly interpolated between records; NaN if it never does.
double half_life(const RunRecord& record, int k);

/// Least-squares exponential decay rate of mode k's error over records with
/// t in [t_begin, t_end].
double decay_rate(const RunRecord& record, int k, double t_begin, double t_end);

}  // namespace contflow::meanfield

#endif  // CONTFLOW_MEANFIELD_SPECTRAL_HPP
