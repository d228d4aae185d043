#include "contflow/meanfield_spectral.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include <unsupported/Eigen/FFT>

#include "contflow/targets.hpp"

namespace contflow::meanfield {

namespace {

constexpr double kTwoPi = core::two_pi<double>;
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr double kNegativityAbort = -1e-3;

int wrap_index(int k, int n) {
    const int r = k % n;
    return r < 0 ? r + n : r;
}

/// Buffers and FFT plans for repeated right-hand-side evaluations.
class Workspace {
public:
    explicit Workspace(const MeanFieldProblem& problem)
        : problem_(problem),
          m_(problem.cutoff()),
          n_(problem.dealias_grid()),
          star_(problem.rho_star().field().coeffs()),
          spectrum_(static_cast<std::size_t>(n_)),
          values_(static_cast<std::size_t>(n_)),
          product_(static_cast<std::size_t>(n_)),
          product_hat_(static_cast<std::size_t>(n_)),
          potential_(2 * m_ + 1) {}

    /// out = spectral coefficients of div(rho grad K*(rho - rho*)).
    void rhs(const Eigen::VectorXcd& rho, Eigen::VectorXcd& out) {
        const Eigen::VectorXcd u = rho - star_;
        if (problem_.kernel_matrix()) {
            potential_.noalias() = kTwoPi * (*problem_.kernel_matrix() * u);
        } else {
            potential_ = kTwoPi * problem_.kernel().coeffs().cwiseProduct(u);
        }
        // Both real fields go through one complex transform: rho + i d_w V.
        std::fill(spectrum_.begin(), spectrum_.end(), Complex(0.0, 0.0));
        const double scale = static_cast<double>(n_);
        for (int k = -m_; k <= m_; ++k) {
            const Complex dv = Complex(0.0, static_cast<double>(k)) * potential_(k + m_);
            spectrum_[static_cast<std::size_t>(wrap_index(k, n_))] =
                scale * (rho(k + m_) + Complex(0.0, 1.0) * dv);
        }
        fft_.inv(values_, spectrum_);
        for (int j = 0; j < n_; ++j) {
            const Complex z = values_[static_cast<std::size_t>(j)];
            product_[static_cast<std::size_t>(j)] = Complex(z.real() * z.imag(), 0.0);
        }
        fft_.fwd(product_hat_, product_);
        out.resize(2 * m_ + 1);
        for (int k = -m_; k <= m_; ++k) {
            const Complex flux = product_hat_[static_cast<std::size_t>(wrap_index(k, n_))] / scale;
            out(k + m_) = Complex(0.0, static_cast<double>(k)) * flux;
        }
        out(m_) = Complex(0.0, 0.0);
    }

    void step(const Eigen::VectorXcd& rho, double dt, Eigen::VectorXcd& out) {
        if (problem_.integrator() == Integrator::euler) {
            rhs(rho, k1_);
            out = rho + dt * k1_;
            return;
        }
        rhs(rho, k1_);
        stage_ = rho + (0.5 * dt) * k1_;
        rhs(stage_, k2_);
        stage_ = rho + (0.5 * dt) * k2_;
        rhs(stage_, k3_);
        stage_ = rho + dt * k3_;
        rhs(stage_, k4_);
        out = rho + (dt / 6.0) * (k1_ + 2.0 * k2_ + 2.0 * k3_ + k4_);
    }

    void step_rk4(const Eigen::VectorXcd& rho, double dt, Eigen::VectorXcd& out) {
        rhs(rho, k1_);
        stage_ = rho + (0.5 * dt) * k1_;
        rhs(stage_, k2_);
        stage_ = rho + (0.5 * dt) * k2_;
        rhs(stage_, k3_);
        stage_ = rho + dt * k3_;
        rhs(stage_, k4_);
        out = rho + (dt / 6.0) * (k1_ + 2.0 * k2_ + 2.0 * k3_ + k4_);
    }

private:
    const MeanFieldProblem& problem_;
    int m_;
    int n_;
    Eigen::VectorXcd star_;
    Eigen::FFT<double> fft_;
    std::vector<Complex> spectrum_;
    std::vector<Complex> values_;
    std::vector<Complex> product_;
    std::vector<Complex> product_hat_;
    Eigen::VectorXcd potential_;
    Eigen::VectorXcd k1_, k2_, k3_, k4_, stage_;
};

void require_finite(const Eigen::VectorXcd& c, double t) {
    if (!c.allFinite()) throw BlowUp("non-finite Fourier coefficient at t = " + std::to_string(t), t);
}

DensityField as_density(const MeanFieldProblem& problem, Eigen::VectorXcd coeffs) {
    return DensityField(FourierField(std::move(coeffs), problem.rho_star().grid_size()));
}

double energy_of(const MeanFieldProblem& problem, const Eigen::VectorXcd& u) {
    double quad = 0.0;
    if (problem.kernel_matrix()) {
        quad = u.dot(*problem.kernel_matrix() * u).real();  // dot conjugates the first argument
    } else {
        quad = problem.kernel().coeffs().real().dot(u.cwiseAbs2());
    }
    return 0.5 * kTwoPi * kTwoPi * quad;
}

Eigen::VectorXd feature_coefficients(int cutoff, double h) {
    Eigen::VectorXd g(2 * cutoff + 1);
    for (int k = -cutoff; k <= cutoff; ++k) g(k + cutoff) = core::periodic_feature_coefficient(k, h);
    return g;
}

double l2_error_of(const Eigen::VectorXd& feature_hat, const Eigen::VectorXcd& u) {
    return (kTwoPi * kTwoPi) * feature_hat.cwiseAbs2().dot(u.cwiseAbs2());
}

}  // namespace

double kernel_coefficient(int k, double h) {
    core::require_positive_width(h);
    return h * h / (2.0 * kTwoPi) * std::exp(-0.5 * h * h * k * k);
}

int dealias_grid_size(int cutoff) {
    int n = 1;
    while (n < 3 * cutoff + 2) n *= 2;
    return n;
}

// ---------------------------------------------------------------------------

EmpiricalKernel EmpiricalKernel::sample(int n, double h, core::SeededRng& rng) {
    if (n < 1) throw InvalidParameter("empirical kernel needs at least one sample");
    core::require_positive_width(h);
    return {rng.angles(n).col(0), h};
}

Eigen::MatrixXcd empirical_kernel_field(const EmpiricalKernel& ek, int cutoff) {
    if (ek.size() < 1) throw InvalidParameter("empirical kernel needs at least one sample");
    const int size = 2 * cutoff + 1;
    Eigen::MatrixXcd phi(size, ek.size());
    for (int i = 0; i < ek.size(); ++i) {
        for (int k = -cutoff; k <= cutoff; ++k) {
            phi(k + cutoff, i) = core::periodic_feature_coefficient(k, ek.h) * std::polar(1.0, -k * ek.samples(i));
        }
    }
    return phi * phi.adjoint() / static_cast<double>(ek.size());
}

// ---------------------------------------------------------------------------

MeanFieldProblem MeanFieldProblem::closed_form(double h, DensityField rho_star, double dt,
                                               Integrator integrator, double horizon) {
    core::require_positive_width(h);
    const int m = rho_star.cutoff();
    const int n = dealias_grid_size(m);
    const Eigen::VectorXd w = fourier::uniform_grid(n);
    Eigen::VectorXd samples(n);
    for (int j = 0; j < n; ++j) samples(j) = core::closed_form_kernel(w(j), 0.0, h);
    FourierField kernel = fourier::analyze(samples, m);
    // The kernel is positive definite; analysis noise below roundoff is clipped.
    for (int k = -m; k <= m; ++k) kernel[k] = Complex(std::max(kernel[k].real(), 0.0), 0.0);
    return with_kernel(std::move(kernel), std::move(rho_star), h, dt, integrator, horizon);
}

MeanFieldProblem MeanFieldProblem::with_kernel(FourierField kernel, DensityField rho_star, double h,
                                               double dt, Integrator integrator, double horizon) {
    MeanFieldProblem p;
    p.kernel_ = std::move(kernel);
    p.rho_star_ = std::move(rho_star);
    p.h_ = h;
    p.dt_ = dt;
    p.integrator_ = integrator;
    p.horizon_ = horizon;
    p.dealias_grid_ = dealias_grid_size(p.rho_star_.cutoff());
    p.validate();
    return p;
}

MeanFieldProblem MeanFieldProblem::empirical(const EmpiricalKernel& ek, DensityField rho_star, double dt,
                                             Integrator integrator, double horizon) {
    const int m = rho_star.cutoff();
    FourierField diag = FourierField::zero(m, rho_star.grid_size());
    for (int k = -m; k <= m; ++k) diag[k] = kernel_coefficient(k, ek.h);
    MeanFieldProblem p = with_kernel(std::move(diag), std::move(rho_star), ek.h, dt, integrator, horizon);
    p.kernel_matrix_ = empirical_kernel_field(ek, m);
    return p;
}

void MeanFieldProblem::validate() const {
    core::require_positive_width(h_);
    if (!(dt_ > 0.0) || !std::isfinite(dt_)) throw InvalidParameter("time step must be positive");
    if (!(horizon_ >= 0.0) || !std::isfinite(horizon_)) throw InvalidParameter("horizon must be nonnegative");
    if (kernel_.cutoff() != rho_star_.cutoff()) throw CutoffMismatch("kernel and target have different cutoffs");
}

void MeanFieldProblem::set_dt(double dt) {
    dt_ = dt;
    validate();
}

void MeanFieldProblem::set_horizon(double horizon) {
    horizon_ = horizon;
    validate();
}

// ---------------------------------------------------------------------------

FourierField rhs(const MeanFieldProblem& problem, const DensityField& rho) {
    if (rho.cutoff() != problem.cutoff()) throw CutoffMismatch("density and problem have different cutoffs");
    Workspace ws(problem);
    Eigen::VectorXcd out;
    ws.rhs(rho.field().coeffs(), out);
    return FourierField(std::move(out), rho.grid_size());
}

DensityField step_rk4(const MeanFieldProblem& problem, const DensityField& rho, double dt, double t) {
    if (rho.cutoff() != problem.cutoff()) throw CutoffMismatch("density and problem have different cutoffs");
    if (dt == 0.0 || !std::isfinite(dt)) throw InvalidParameter("time step must be finite and nonzero");
    Workspace ws(problem);
    Eigen::VectorXcd out;
    ws.step_rk4(rho.field().coeffs(), dt, out);
    require_finite(out, t + dt);
    return as_density(problem, std::move(out));
}

DensityField step_euler(const MeanFieldProblem& problem, const DensityField& rho, double dt, double t) {
    if (rho.cutoff() != problem.cutoff()) throw CutoffMismatch("density and problem have different cutoffs");
    if (dt == 0.0 || !std::isfinite(dt)) throw InvalidParameter("time step must be finite and nonzero");
    Workspace ws(problem);
    Eigen::VectorXcd k1;
    ws.rhs(rho.field().coeffs(), k1);
    Eigen::VectorXcd out = rho.field().coeffs() + dt * k1;
    require_finite(out, t + dt);
    return as_density(problem, std::move(out));
}

double free_energy(const MeanFieldProblem& problem, const DensityField& rho) {
    return energy_of(problem, rho.field().coeffs() - problem.rho_star().field().coeffs());
}

double function_error(const MeanFieldProblem& problem, const DensityField& rho) {
    return l2_error_of(feature_coefficients(problem.cutoff(), problem.h()),
                       rho.field().coeffs() - problem.rho_star().field().coeffs());
}

// ---------------------------------------------------------------------------

RunRecord evolve(const MeanFieldProblem& problem, const DensityField& rho0, const EvolveOptions& options) {
    if (rho0.cutoff() != problem.cutoff()) throw CutoffMismatch("initial density has the wrong cutoff");
    if (options.record_every < 0 || options.log_records < 0) throw InvalidParameter("record schedule must be nonnegative");
    const int m = problem.cutoff();
    const double dt = problem.dt();
    const long total = std::lround(problem.horizon() / dt);

    std::vector<long> log_steps;
    if (options.log_records > 0 && total > 0) {
        for (int i = 0; i < options.log_records; ++i) {
            const double frac = options.log_records == 1 ? 1.0 : static_cast<double>(i) / (options.log_records - 1);
            log_steps.push_back(std::lround(std::pow(static_cast<double>(total), frac)));
        }
        std::sort(log_steps.begin(), log_steps.end());
        log_steps.erase(std::unique(log_steps.begin(), log_steps.end()), log_steps.end());
    }
    std::vector<std::pair<long, double>> snapshot_steps;
    for (double ts : options.snapshot_times) {
        if (!(ts >= 0.0)) throw InvalidParameter("snapshot times must be nonnegative");
        const long s = std::lround(ts / dt);
        if (s <= total) snapshot_steps.emplace_back(s, ts);
    }

    RunRecord rec;
    rec.empirical = problem.is_empirical();
    rec.steps = total;
    rec.dt = dt;
    rec.max_entropy_increase = options.entropy_every_step ? 0.0 : kNaN;

    const DensityField& star = problem.rho_star();
    const Eigen::VectorXcd& star_c = star.field().coeffs();
    const Eigen::VectorXd feature_hat = feature_coefficients(m, problem.h());
    const int cuts = options.w2_cuts > 0 ? options.w2_cuts : star.grid_size();
    const int grid = star.grid_size();
    const Eigen::VectorXd snap_x = fourier::uniform_grid(std::max(options.snapshot_points, 1));

    auto function_field = [&](const Eigen::VectorXcd& rho) {
        FourierField f = FourierField::zero(m, grid);
        f.coeffs() = kTwoPi * feature_hat.cast<Complex>().cwiseProduct(rho);
        return f;
    };
    const Eigen::VectorXd f_star = fourier::synthesize(function_field(star_c), snap_x);

    auto entropy_of = [&](const DensityField& rho) {
        try {
            return fourier::relative_entropy(rho, star);
        } catch (const NonPositiveDensity&) {
            return kNaN;
        }
    };

    std::vector<Eigen::VectorXd> modes;
    auto record = [&](long step, const Eigen::VectorXcd& rho) {
        const double t = step * dt;
        const DensityField density = as_density(problem, rho);
        const Eigen::VectorXcd u = rho - star_c;
        const double rho_min = density.min_on_grid();
        if (rho_min < kNegativityAbort) {
            throw BlowUp("density minimum " + std::to_string(rho_min) + " at t = " + std::to_string(t), t);
        }
        rec.t.push_back(t);
        rec.l2_error.push_back(l2_error_of(feature_hat, u));
        rec.rel_entropy.push_back(entropy_of(density));
        double w2 = kNaN;
        if (options.compute_w2 && rho_min >= -DensityField::negativity_tolerance &&
            star.min_on_grid() >= -DensityField::negativity_tolerance) {
            w2 = fourier::circle_w2(density, star, cuts);
        }
        rec.w2.push_back(w2);
        rec.rho_min.push_back(rho_min);
        const double energy = energy_of(problem, u);
        rec.free_energy.push_back(energy);
        if (rec.empirical) {
            rec.emp_risk.push_back(energy);
            rec.rho_l2.push_back(std::sqrt(kTwoPi * rho.squaredNorm()));
        }
        Eigen::VectorXd row(m + 1);
        for (int k = 0; k <= m; ++k) row(k) = std::abs(u(k + m));
        modes.push_back(row);
    };

    Workspace ws(problem);
    Eigen::VectorXcd rho = rho0.field().coeffs();
    Eigen::VectorXcd next;
    const Complex mass0(1.0 / kTwoPi, 0.0);
    double energy_prev = energy_of(problem, rho - star_c);
    double entropy_prev = options.entropy_every_step ? entropy_of(rho0) : kNaN;
    std::size_t log_pos = 0;
    std::size_t snap_pos = 0;
    std::sort(snapshot_steps.begin(), snapshot_steps.end());

    auto take_snapshots = [&](long step) {
        while (snap_pos < snapshot_steps.size() && snapshot_steps[snap_pos].first == step) {
            Snapshot s;
            s.t = snapshot_steps[snap_pos].second;
            s.x = snap_x;
            s.f_t = fourier::synthesize(function_field(rho), snap_x);
            s.f_star = f_star;
            rec.snapshots.push_back(std::move(s));
            ++snap_pos;
        }
    };

    record(0, rho);
    take_snapshots(0);
    while (log_pos < log_steps.size() && log_steps[log_pos] <= 0) ++log_pos;

    for (long step = 1; step <= total; ++step) {
        ws.step(rho, dt, next);
        rho.swap(next);
        const double t = step * dt;
        require_finite(rho, t);
        rec.max_mass_drift = std::max(rec.max_mass_drift, std::abs(rho(m) - mass0));

        const double energy = energy_of(problem, rho - star_c);
        rec.max_free_energy_increase = std::max(rec.max_free_energy_increase, energy - energy_prev);
        energy_prev = energy;
        if (options.entropy_every_step) {
            const double entropy = entropy_of(as_density(problem, rho));
            if (std::isnan(entropy) || std::isnan(entropy_prev)) {
                rec.max_entropy_increase = kNaN;
            } else if (!std::isnan(rec.max_entropy_increase)) {
                rec.max_entropy_increase = std::max(rec.max_entropy_increase, entropy - entropy_prev);
            }
            entropy_prev = entropy;
        }

        bool due = step == total || (options.record_every > 0 && step % options.record_every == 0);
        while (log_pos < log_steps.size() && log_steps[log_pos] <= step) {
            if (log_steps[log_pos] == step) due = true;
            ++log_pos;
        }
        if (due) record(step, rho);
        take_snapshots(step);
    }

    rec.mode_error.resize(static_cast<Eigen::Index>(modes.size()), m + 1);
    for (std::size_t r = 0; r < modes.size(); ++r) rec.mode_error.row(static_cast<Eigen::Index>(r)) = modes[r].transpose();
    rec.final_density = as_density(problem, rho);
    return rec;
}

// ---------------------------------------------------------------------------

EnvelopeConstants envelope_constants(const MeanFieldProblem& problem, const ConvergenceEnvelope& env) {
    EnvelopeConstants c;
    const int m = problem.cutoff();
    c.C0 = std::numeric_limits<double>::infinity();
    for (int k = 1; k <= m; ++k) {
        double khat = problem.kernel()[k].real();
        if (problem.kernel_matrix()) khat = (*problem.kernel_matrix())(k + m, k + m).real();
        c.C0 = std::min(c.C0, k * khat);
        c.C1 = std::max(c.C1, k * khat);
        c.C_star = std::max(c.C_star, static_cast<double>(k) * k * std::abs(problem.rho_star().field()[k]));
    }
    if (m == 0) c.C0 = 0.0;
    c.cond_K_holds = c.C0 > 0.0;
    c.cond_local = c.C0 * env.t0 / (kTwoPi * env.C) - 32.0 * c.C1 * (c.C_star * env.t0 + env.C);
    c.cond_local_holds = c.cond_K_holds && c.cond_local > 1.0;
    return c;
}

EnvelopeReport check_envelope(const RunRecord& record, const ConvergenceEnvelope& env,
                              const EnvelopeConstants& constants) {
    if (!(env.C > 0.0) || !(env.t0 > 0.0)) throw InvalidParameter("envelope constants must be positive");
    EnvelopeReport report;
    report.constants = constants;
    report.first_violation_time = kNaN;
    const int m = static_cast<int>(record.mode_error.cols()) - 1;
    report.mode_ok.assign(static_cast<std::size_t>(std::max(m + 1, 0)), true);
    report.initial_condition_holds = true;
    if (record.size() > 0 && record.t.front() == 0.0) {
        for (int k = 1; k <= m; ++k) {
            if (!(record.mode_error(0, k) < env.C / (static_cast<double>(k) * k * env.t0))) {
                report.initial_condition_holds = false;
            }
        }
    }
    for (std::size_t r = 0; r < record.size(); ++r) {
        const double t = record.t[r];
        for (int k = 1; k <= m; ++k) {
            const double bound = env.C / (static_cast<double>(k) * k * (t + env.t0));
            if (record.mode_error(static_cast<Eigen::Index>(r), k) > bound) {
                if (report.all_ok) {
                    report.first_violation_time = t;
                    report.first_violation_mode = k;
                }
                report.all_ok = false;
                report.mode_ok[static_cast<std::size_t>(k)] = false;
            }
        }
    }
    return report;
}

ConvergenceEnvelope fit_envelope(const RunRecord& record, double t0, double slack) {
    if (record.size() == 0) throw InvalidParameter("empty run record");
    if (!(t0 > 0.0) || !(slack > 0.0)) throw InvalidParameter("t0 and slack must be positive");
    double c = 0.0;
    for (Eigen::Index k = 1; k < record.mode_error.cols(); ++k) {
        c = std::max(c, static_cast<double>(k * k) * t0 * record.mode_error(0, k));
    }
    if (c == 0.0) c = std::numeric_limits<double>::min();
    return {slack * c, t0};
}

// ---------------------------------------------------------------------------

LinearizedSpectrum linearized_spectrum(const MeanFieldProblem& problem, const DensityField& rho0,
                                       int quadrature_points) {
    const int m = problem.cutoff();
    const double h = problem.h();
    const int n = quadrature_points > 0 ? quadrature_points : std::max(512, 2 * problem.dealias_grid());
    if (n < 2 * m + 1) throw Undersampled("quadrature grid too coarse for the cutoff");
    const Eigen::VectorXd grid = fourier::uniform_grid(n);
    const Eigen::VectorXd weight = rho0.field().grid_values(n) * (kTwoPi / n);

    // G(i, l) = d_w phi(x_i, w_l)
    Eigen::MatrixXd g(n, n);
    for (int i = 0; i < n; ++i)
        for (int l = 0; l < n; ++l) g(i, l) = core::periodic_feature_dw(grid(i), grid(l), h);
    const Eigen::MatrixXd ktilde = g * weight.asDiagonal() * g.transpose();

    Eigen::VectorXd profile = Eigen::VectorXd::Zero(n);  // translation average of K~(x + s, x)
    for (int s = 0; s < n; ++s) {
        double acc = 0.0;
        for (int i = 0; i < n; ++i) acc += ktilde((i + s) % n, i);
        profile(s) = acc / n;
    }

    LinearizedSpectrum spec;
    spec.c.resize(m + 1);
    spec.b.resize(m + 1);
    spec.eigenvalues.resize(m + 1);
    for (int k = 0; k <= m; ++k) {
        double cs = 0.0;
        double sn = 0.0;
        for (int s = 0; s < n; ++s) {
            cs += profile(s) * std::cos(k * grid(s));
            sn += profile(s) * std::sin(k * grid(s));
        }
        spec.c(k) = (k == 0 ? 1.0 : 2.0) * cs / n;
        spec.b(k) = k == 0 ? 0.0 : 2.0 * sn / n;
        spec.eigenvalues(k) = (k == 0 ? spec.c(0) : 0.5 * std::hypot(spec.c(k), spec.b(k)));
    }
    return spec;
}

double half_life(const RunRecord& record, int k) {
    if (k < 0 || k >= record.mode_error.cols()) throw InvalidParameter("mode index out of range");
    if (record.size() == 0) return kNaN;
    const double target = 0.5 * record.mode_error(0, k);
    for (std::size_t r = 1; r < record.size(); ++r) {
        const double e = record.mode_error(static_cast<Eigen::Index>(r), k);
        if (e <= target) {
            const double e_prev = record.mode_error(static_cast<Eigen::Index>(r - 1), k);
            const double t_prev = record.t[r - 1];
            if (e_prev == e) return record.t[r];
            return t_prev + (record.t[r] - t_prev) * (e_prev - target) / (e_prev - e);
        }
    }
    return kNaN;
}

double decay_rate(const RunRecord& record, int k, double t_begin, double t_end) {
    if (k < 0 || k >= record.mode_error.cols()) throw InvalidParameter("mode index out of range");
    double st = 0.0, sy = 0.0, stt = 0.0, sty = 0.0;
    int count = 0;
    for (std::size_t r = 0; r < record.size(); ++r) {
        const double t = record.t[r];
        const double e = record.mode_error(static_cast<Eigen::Index>(r), k);
        if (t < t_begin || t > t_end || !(e > 0.0)) continue;
        const double y = std::log(e);
        st += t;
        sy += y;
        stt += t * t;
        sty += t * y;
        ++count;
    }
    if (count < 2) throw InvalidParameter("decay rate window holds fewer than two records");
    const double slope = (count * sty - st * sy) / (count * stt - st * st);
    return -slope;
}

}  // namespace contflow::meanfield
