#include "contflow/fourier_field.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>

#include <unsupported/Eigen/FFT>

#include "contflow/core_math.hpp"

namespace contflow::fourier {

namespace {

constexpr double kTwoPi = core::two_pi<double>;

Eigen::FFT<double>& fft_engine() {
    thread_local Eigen::FFT<double> engine;
    return engine;
}

void require_same_cutoff(const FourierField& a, const FourierField& b) {
    if (a.size() != b.size()) throw CutoffMismatch("Fourier fields have different cutoffs");
}

int wrap_index(int k, int n) {
    const int r = k % n;
    return r < 0 ? r + n : r;
}

}  // namespace

FourierField::FourierField(Eigen::VectorXcd coeffs, int grid_size)
    : coeffs_(std::move(coeffs)), grid_size_(grid_size) {
    if (coeffs_.size() % 2 != 1) {
        throw InvalidParameter("Fourier coefficient vector must have odd length 2M+1");
    }
    if (grid_size_ < coeffs_.size()) {
        throw Undersampled("grid size " + std::to_string(grid_size_) +
                           " cannot resolve cutoff " + std::to_string(cutoff()));
    }
}

FourierField FourierField::zero(int cutoff, int grid_size) {
    if (cutoff < 0) throw InvalidParameter("cutoff must be nonnegative");
    return FourierField(Eigen::VectorXcd::Zero(2 * cutoff + 1), grid_size);
}

FourierField FourierField::mode(int cutoff, int grid_size, int k, Complex amplitude) {
    if (std::abs(k) > cutoff) throw InvalidParameter("mode index exceeds cutoff");
    FourierField f = zero(cutoff, grid_size);
    f[k] = amplitude;
    return f;
}

double FourierField::hermitian_defect() const {
    double defect = 0.0;
    for (int k = 0; k <= cutoff(); ++k) {
        defect = std::max(defect, std::abs((*this)[-k] - std::conj((*this)[k])));
    }
    return defect;
}

Eigen::VectorXd FourierField::grid_values(int n) const {
    if (n < size()) {
        throw Undersampled("grid of " + std::to_string(n) + " points cannot resolve cutoff " +
                           std::to_string(cutoff()));
    }
    std::vector<Complex> spectrum(static_cast<std::size_t>(n), Complex(0.0, 0.0));
    for (int k = -cutoff(); k <= cutoff(); ++k) {
        spectrum[static_cast<std::size_t>(wrap_index(k, n))] = (*this)[k] * static_cast<double>(n);
    }
    std::vector<Complex> values;
    fft_engine().inv(values, spectrum);
    Eigen::VectorXd out(n);
    for (int j = 0; j < n; ++j) out(j) = values[static_cast<std::size_t>(j)].real();
    return out;
}

FourierField FourierField::resized(int new_cutoff) const {
    FourierField out = zero(new_cutoff, std::max(grid_size_, 2 * new_cutoff + 1));
    const int common = std::min(new_cutoff, cutoff());
    for (int k = -common; k <= common; ++k) out[k] = (*this)[k];
    return out;
}

FourierField& FourierField::operator+=(const FourierField& other) {
    require_same_cutoff(*this, other);
    coeffs_ += other.coeffs_;
    return *this;
}

FourierField& FourierField::operator-=(const FourierField& other) {
    require_same_cutoff(*this, other);
    coeffs_ -= other.coeffs_;
    return *this;
}

FourierField& FourierField::operator*=(Complex s) {
    coeffs_ *= s;
    return *this;
}

FourierField operator+(FourierField a, const FourierField& b) { return a += b; }
FourierField operator-(FourierField a, const FourierField& b) { return a -= b; }
FourierField operator*(Complex s, FourierField a) { return a *= s; }

Eigen::VectorXd uniform_grid(int n) {
    if (n < 1) throw InvalidParameter("grid must have at least one point");
    Eigen::VectorXd w(n);
    for (int j = 0; j < n; ++j) w(j) = kTwoPi * j / n;
    return w;
}

FourierField analyze(const Eigen::Ref<const Eigen::VectorXd>& samples, int cutoff) {
    const int n = static_cast<int>(samples.size());
    if (cutoff < 0) throw InvalidParameter("cutoff must be nonnegative");
    if (n < 2 * cutoff + 1) {
        throw Undersampled(std::to_string(n) + " samples cannot resolve cutoff " +
                           std::to_string(cutoff));
    }
    std::vector<Complex> in(static_cast<std::size_t>(n));
    for (int j = 0; j < n; ++j) in[static_cast<std::size_t>(j)] = Complex(samples(j), 0.0);
    std::vector<Complex> spectrum;
    fft_engine().fwd(spectrum, in);
    FourierField out = FourierField::zero(cutoff, n);
    for (int k = -cutoff; k <= cutoff; ++k) {
        out[k] = spectrum[static_cast<std::size_t>(wrap_index(k, n))] / static_cast<double>(n);
    }
    return out;
}

Eigen::VectorXd synthesize(const FourierField& field, const Eigen::Ref<const Eigen::VectorXd>& points) {
    Eigen::VectorXd out(points.size());
    const int m = field.cutoff();
    for (Eigen::Index i = 0; i < points.size(); ++i) {
        const Complex step = std::polar(1.0, points(i));
        Complex phase(1.0, 0.0);
        double value = field[0].real();
        for (int k = 1; k <= m; ++k) {
            phase *= step;
            if (k % 32 == 0) phase = std::polar(1.0, k * points(i));
            value += (field[k] * phase + field[-k] * std::conj(phase)).real();
        }
        out(i) = value;
    }
    return out;
}

FourierField spectral_derivative(const FourierField& field, int order) {
    if (order != 1 && order != 2) throw InvalidParameter("derivative order must be 1 or 2");
    FourierField out = field;
    for (int k = -field.cutoff(); k <= field.cutoff(); ++k) {
        const Complex ik(0.0, static_cast<double>(k));
        for (int r = 0; r < order; ++r) out[k] *= ik;
    }
    return out;
}

FourierField convolve(const FourierField& kernel, const FourierField& u) {
    require_same_cutoff(kernel, u);
    FourierField out = u;
    out.coeffs() = kTwoPi * kernel.coeffs().cwiseProduct(u.coeffs());
    return out;
}

double grid_l2_norm_sq(const FourierField& field, int n) {
    const Eigen::VectorXd v = field.grid_values(n);
    return kTwoPi / n * v.squaredNorm();
}

double spectral_l2_norm_sq(const FourierField& field) { return kTwoPi * field.coeffs().squaredNorm(); }

// ---------------------------------------------------------------------------

DensityField::DensityField(FourierField field) : field_(std::move(field)) {
    if (std::abs(field_[0] - Complex(1.0 / kTwoPi, 0.0)) > 1e-10) {
        throw InvalidParameter("density zero mode must equal 1/(2 pi)");
    }
    if (!field_.is_hermitian(1e-10)) throw InvalidParameter("density coefficients must be Hermitian");
}

DensityField DensityField::normalized(FourierField field) {
    const Complex c0 = field[0];
    if (!(std::abs(c0.real()) > 0.0)) throw InvalidParameter("cannot normalize a field with zero mass");
    field *= Complex(1.0 / (kTwoPi * c0.real()), 0.0);
    field[0] = Complex(1.0 / kTwoPi, 0.0);
    return DensityField(std::move(field));
}

DensityField DensityField::uniform(int cutoff, int grid_size) {
    return DensityField(FourierField::mode(cutoff, grid_size, 0, Complex(1.0 / kTwoPi, 0.0)));
}

DensityField DensityField::sine_modulated(int cutoff, int grid_size,
                                          const std::vector<std::pair<int, double>>& terms) {
    FourierField f = FourierField::mode(cutoff, grid_size, 0, Complex(1.0 / kTwoPi, 0.0));
    for (const auto& [k, amp] : terms) {
        if (k <= 0 || k > cutoff) throw InvalidParameter("sine mode index out of range");
        // sin(kw) = (e^{ikw} - e^{-ikw}) / (2i)
        const Complex c(0.0, -amp / (2.0 * kTwoPi));
        f[k] += c;
        f[-k] += std::conj(c);
    }
    return DensityField(std::move(f));
}

double DensityField::min_on_grid(int n) const { return field_.grid_values(n).minCoeff(); }

// ---------------------------------------------------------------------------

double relative_entropy(const DensityField& rho, const DensityField& rho_ref, int quad_points) {
    int n = quad_points > 0 ? quad_points : std::max({1024, rho.grid_size(), rho_ref.grid_size()});
    const Eigen::VectorXd p = rho.field().grid_values(n);
    const Eigen::VectorXd q = rho_ref.field().grid_values(n);
    if (p.minCoeff() <= 0.0 || q.minCoeff() <= 0.0) {
        throw NonPositiveDensity("relative entropy needs strictly positive densities");
    }
    double sum = 0.0;
    for (int j = 0; j < n; ++j) sum += p(j) * std::log(p(j) / q(j));
    return kTwoPi / n * sum;
}

namespace {

struct Cell {
    double start;
    double width;
    double mass;
};

/// Cell masses of a density on n equal cells [j d, (j+1) d), using the value
/// at each cell midpoint, normalized to total mass one.
Eigen::VectorXd cell_masses(const DensityField& rho, int n) {
    Eigen::VectorXd mid(n);
    for (int j = 0; j < n; ++j) mid(j) = kTwoPi * (j + 0.5) / n;
    Eigen::VectorXd mass = synthesize(rho.field(), mid);
    if (mass.minCoeff() < -DensityField::negativity_tolerance) {
        throw NonPositiveDensity("circle W2 needs nonnegative densities");
    }
    mass = mass.cwiseMax(0.0);
    const double total = mass.sum();
    if (!(total > 0.0)) throw NonPositiveDensity("density has no mass");
    return mass / total;
}

/// Cells of the density unrolled onto [c, c + 2 pi).
std::vector<Cell> unroll(const Eigen::VectorXd& mass, double c) {
    const int n = static_cast<int>(mass.size());
    const double d = kTwoPi / n;
    const double shifted = c - kTwoPi * std::floor(c / kTwoPi);  // in [0, 2pi)
    int j0 = std::min(n - 1, static_cast<int>(std::floor(shifted / d)));
    const double offset = shifted - j0 * d;  // position of the cut inside cell j0
    std::vector<Cell> cells;
    cells.reserve(static_cast<std::size_t>(n) + 1);
    double x = c;
    const double tail = d - offset;
    if (tail > 0.0) {
        cells.push_back({x, tail, mass(j0) * tail / d});
        x += tail;
    }
    for (int s = 1; s < n; ++s) {
        const int j = (j0 + s) % n;
        cells.push_back({x, d, mass(j)});
        x += d;
    }
    if (offset > 0.0) cells.push_back({x, offset, mass(j0) * offset / d});
    return cells;
}

/// Exact int_0^1 |Q_F(u) - Q_G(u)|^2 du for piecewise-linear quantiles.
double quantile_cost(const std::vector<Cell>& f, const std::vector<Cell>& g) {
    std::size_t i = 0;
    std::size_t j = 0;
    double pf = 0.0;  // cumulative mass before cell i
    double pg = 0.0;
    double u = 0.0;
    double cost = 0.0;
    auto q = [](const Cell& cell, double p, double v) {
        return cell.start + (v - p) / cell.mass * cell.width;
    };
    while (i < f.size() && j < g.size()) {
        if (f[i].mass <= 0.0) { ++i; continue; }
        if (g[j].mass <= 0.0) { ++j; continue; }
        const double ef = pf + f[i].mass;
        const double eg = pg + g[j].mass;
        const double next = std::min(ef, eg);
        if (next > u) {
            const double d0 = q(f[i], pf, u) - q(g[j], pg, u);
            const double d1 = q(f[i], pf, next) - q(g[j], pg, next);
            cost += (next - u) * (d0 * d0 + d0 * d1 + d1 * d1) / 3.0;
            u = next;
        }
        if (ef <= eg) { pf = ef; ++i; }
        if (eg <= ef) { pg = eg; ++j; }
    }
    return cost;
}

}  // namespace

double circle_w2(const DensityField& rho, const DensityField& rho_ref, int cuts) {
    if (cuts < 1) throw InvalidParameter("circle W2 needs at least one cut");
    const int n = std::max(rho.grid_size(), rho_ref.grid_size());
    const std::vector<Cell> f = unroll(cell_masses(rho, n), 0.0);
    const Eigen::VectorXd g_mass = cell_masses(rho_ref, n);
    double best = std::numeric_limits<double>::infinity();
    for (int s = 0; s < cuts; ++s) {
        const double c = -std::numbers::pi + kTwoPi * s / cuts;
        best = std::min(best, quantile_cost(f, unroll(g_mass, c)));
    }
    return std::sqrt(best);
}

void write_coefficients_csv(std::ostream& out, const FourierField& field) {
    out << "k,re,im\n";
    char buf[96];
    for (int k = -field.cutoff(); k <= field.cutoff(); ++k) {
        std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g\n", k, field[k].real(), field[k].imag());
        out << buf;
    }
}

FourierField read_coefficients_csv(std::istream& in, int grid_size) {
    std::string line;
    if (!std::getline(in, line) || line.rfind("k,re,im", 0) != 0) {
        throw InvalidParameter("Fourier CSV must start with header k,re,im");
    }
    std::vector<std::pair<int, Complex>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        int k = 0;
        double re = 0.0;
        double im = 0.0;
        char c1 = 0;
        char c2 = 0;
        if (!(row >> k >> c1 >> re >> c2 >> im) || c1 != ',' || c2 != ',') {
            throw InvalidParameter("malformed Fourier CSV row: " + line);
        }
        rows.emplace_back(k, Complex(re, im));
    }
    if (rows.empty() || rows.size() % 2 != 1) throw InvalidParameter("Fourier CSV needs 2M+1 rows");
    const int m = static_cast<int>(rows.size() / 2);
    FourierField out = FourierField::zero(m, std::max(grid_size, 2 * m + 1));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const int k = rows[r].first;
        if (k != static_cast<int>(r) - m) throw InvalidParameter("Fourier CSV rows must run k = -M..M");
        out[k] = rows[r].second;
    }
    return out;
}

}  // namespace contflow::fourier
