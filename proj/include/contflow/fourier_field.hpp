#ifndef CONTFLOW_FOURIER_FIELD_HPP
#define CONTFLOW_FOURIER_FIELD_HPP

#include <complex>
#include <iosfwd>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "contflow/errors.hpp"

namespace contflow::fourier {

using Complex = std::complex<double>;

/// Truncated Fourier series of a 2pi-periodic function on [0, 2pi).
///
/// Convention: f_hat(k) = (1/2pi) int_0^{2pi} f(w) e^{-ikw} dw and
/// f(w) = sum_{|k| <= M} f_hat(k) e^{ikw}. Coefficients are stored for
/// k = -M..M at index k + M. `grid_size` is the number of collocation points
/// used when the field is moved to real space.
class FourierField {
public:
    FourierField() = default;
    FourierField(Eigen::VectorXcd coeffs, int grid_size);

    static FourierField zero(int cutoff, int grid_size);
    /// Single Fourier mode `amplitude * e^{ikw}`.
    static FourierField mode(int cutoff, int grid_size, int k, Complex amplitude);

    int cutoff() const { return static_cast<int>(coeffs_.size() / 2); }
    int grid_size() const { return grid_size_; }
    Eigen::Index size() const { return coeffs_.size(); }

    Complex operator[](int k) const { return coeffs_(k + cutoff()); }
    Complex& operator[](int k) { return coeffs_(k + cutoff()); }

    const Eigen::VectorXcd& coeffs() const { return coeffs_; }
    Eigen::VectorXcd& coeffs() { return coeffs_; }

    /// max_k |f_hat(-k) - conj(f_hat(k))|.
    double hermitian_defect() const;
    bool is_hermitian(double tol = 1e-12) const { return hermitian_defect() <= tol; }

    /// Real-space values on the uniform grid w_j = 2 pi j / n (n >= 2M+1).
    Eigen::VectorXd grid_values(int n) const;
    Eigen::VectorXd grid_values() const { return grid_values(grid_size_); }

    /// Same coefficients with a new cutoff (zero-padded or truncated).
    FourierField resized(int new_cutoff) const;

    FourierField& operator+=(const FourierField& other);
    FourierField& operator-=(const FourierField& other);
    FourierField& operator*=(Complex s);

private:
    Eigen::VectorXcd coeffs_;
    int grid_size_ = 0;
};

FourierField operator+(FourierField a, const FourierField& b);
FourierField operator-(FourierField a, const FourierField& b);
FourierField operator*(Complex s, FourierField a);

/// Uniform grid w_j = 2 pi j / n.
Eigen::VectorXd uniform_grid(int n);

/// Trigonometric interpolation coefficients for |k| <= cutoff of samples on the
/// uniform grid. Throws Undersampled when samples.size() < 2 cutoff + 1.
FourierField analyze(const Eigen::Ref<const Eigen::VectorXd>& samples, int cutoff);

/// Real part of sum_k f_hat(k) e^{ikw} at arbitrary points.
Eigen::VectorXd synthesize(const FourierField& field, const Eigen::Ref<const Eigen::VectorXd>& points);

/// Coefficients multiplied by (ik)^order, order in {1, 2}.
FourierField spectral_derivative(const FourierField& field, int order);

/// Coefficients of (K * u)(w) = int_0^{2pi} K(w - w') u(w') dw', which under
/// the convention above is 2 pi K_hat(k) u_hat(k).
FourierField convolve(const FourierField& kernel, const FourierField& u);

/// Grid L2 norm (2pi/n) sum_j |f(w_j)|^2 and its spectral counterpart
/// 2 pi sum_k |f_hat(k)|^2.
double grid_l2_norm_sq(const FourierField& field, int n);
double spectral_l2_norm_sq(const FourierField& field);

/// Probability density on the circle; the k = 0 coefficient is 1/(2pi).
class DensityField {
public:
    /// Threshold for the nonnegativity watchdog.
    static constexpr double negativity_tolerance = 1e-8;

    DensityField() = default;
    /// Throws InvalidParameter unless field[0] == 1/(2pi) to 1e-10 and the
    /// field is Hermitian.
    explicit DensityField(FourierField field);

    /// Rescales the field so that its k = 0 coefficient is 1/(2pi).
    static DensityField normalized(FourierField field);
    static DensityField uniform(int cutoff, int grid_size);
    /// (1/2pi)(1 + sum_j amp_j sin(k_j w)).
    static DensityField sine_modulated(int cutoff, int grid_size,
                                       const std::vector<std::pair<int, double>>& terms);

    const FourierField& field() const { return field_; }
    int cutoff() const { return field_.cutoff(); }
    int grid_size() const { return field_.grid_size(); }

    /// Minimum of the reconstruction on an n-point grid.
    double min_on_grid(int n) const;
    double min_on_grid() const { return min_on_grid(field_.grid_size()); }
    bool negativity_violated() const { return min_on_grid() < -negativity_tolerance; }

private:
    FourierField field_;
};

/// H(rho | rho_ref) = int rho log(rho / rho_ref) dw by trapezoid quadrature on
/// `quad_points` uniform points (default: max(1024, both grid sizes)).
/// Throws NonPositiveDensity if either density is not positive on the grid.
double relative_entropy(const DensityField& rho, const DensityField& rho_ref, int quad_points = 0);

/// Approximate 2-Wasserstein distance on the circle. Both densities are
/// discretized into piecewise-constant cells on a grid of
/// max(grid sizes) points. The first density is unrolled at 0, the second
/// at each of `cuts` candidate cut points c in [-pi, pi); for each cut the
/// monotone (quantile) coupling cost on the line is integrated exactly and
/// the minimum over cuts is returned. Throws NonPositiveDensity when either
/// density is negative on the grid.
double circle_w2(const DensityField& rho, const DensityField& rho_ref, int cuts);

/// CSV with header "k,re,im" and one row per k = -M..M.
void write_coefficients_csv(std::ostream& out, const FourierField& field);
FourierField read_coefficients_csv(std::istream& in, int grid_size);

}  // namespace contflow::fourier

#endif  // CONTFLOW_FOURIER_FIELD_HPP
