#include <cmath>
#include <numbers>
#include <sstream>

#include "contflow/core_math.hpp"
#include "contflow/fourier_field.hpp"
#include "doctest.h"

using namespace contflow;
using namespace contflow::fourier;

namespace {

constexpr double kPi = std::numbers::pi;
const Complex kI(0.0, 1.0);

/// Real field with `modes` random Fourier modes of decaying amplitude.
FourierField random_real_field(int cutoff, int modes, core::SeededRng& rng, int grid = 0) {
    FourierField f = FourierField::zero(cutoff, grid > 0 ? grid : 4 * cutoff + 2);
    f[0] = Complex(rng.normal(), 0.0);
    for (int k = 1; k <= modes; ++k) {
        const Complex c(rng.normal() / k, rng.normal() / k);
        f[k] = c;
        f[-k] = std::conj(c);
    }
    return f;
}

/// Positive density (1/2pi)(1 + sum_k small terms) with total modulation <= 0.9.
DensityField random_density(int cutoff, int modes, core::SeededRng& rng) {
    FourierField f = FourierField::zero(cutoff, 4 * cutoff + 2);
    f[0] = Complex(1.0 / (2 * kPi), 0.0);
    for (int k = 1; k <= modes; ++k) {
        const Complex c = std::polar(0.45 / modes * rng.uniform(), 2 * kPi * rng.uniform()) / (2 * kPi);
        f[k] = c;
        f[-k] = std::conj(c);
    }
    return DensityField(f);
}

/// Mixture of two von Mises bumps with concentration 5.
DensityField von_mises_pair(double mu1, double mu2, int cutoff, int grid) {
    const double kappa = 5.0;
    FourierField f = FourierField::zero(cutoff, grid);
    const double i0 = std::cyl_bessel_i(0.0, kappa);
    for (int k = -cutoff; k <= cutoff; ++k) {
        const double ratio = std::cyl_bessel_i(static_cast<double>(std::abs(k)), kappa) / i0;
        f[k] = ratio / (2 * kPi) * 0.5 * (std::polar(1.0, -k * mu1) + std::polar(1.0, -k * mu2));
    }
    return DensityField::normalized(f);
}

DensityField rotated(const DensityField& rho, double s) {
    FourierField f = rho.field();
    for (int k = -f.cutoff(); k <= f.cutoff(); ++k) f[k] *= std::polar(1.0, -k * s);
    return DensityField(f);
}

}  // namespace

TEST_CASE("analyze") {
    const int n = 64;
    const Eigen::VectorXd w = uniform_grid(n);
    const FourierField uniform = analyze(Eigen::VectorXd::Constant(n, 1.0 / (2 * kPi)), 20);
    CHECK(std::abs(uniform[0] - 1.0 / (2 * kPi)) <= 1e-14);
    for (int k = 1; k <= 20; ++k) {
        CHECK(std::abs(uniform[k]) <= 1e-14);
        CHECK(std::abs(uniform[-k]) <= 1e-14);
    }

    const FourierField cos3 = analyze((3 * w.array()).cos().matrix() / kPi, 20);
    for (int k = -20; k <= 20; ++k) {
        const double expected = std::abs(k) == 3 ? 1.0 / (2 * kPi) : 0.0;
        CHECK(std::abs(cos3[k] - expected) <= 1e-14);
    }
    CHECK(cos3.is_hermitian());

    CHECK_THROWS_AS(analyze(Eigen::VectorXd::Zero(40), 20), Undersampled);
    CHECK_NOTHROW(analyze(Eigen::VectorXd::Zero(41), 20));
}

TEST_CASE("synthesis and analysis round trip") {
    core::SeededRng rng(1);
    const FourierField f = random_real_field(50, 50, rng, 256);
    const FourierField back = analyze(f.grid_values(), 50);
    CHECK((back.coeffs() - f.coeffs()).cwiseAbs().maxCoeff() <= 1e-12);

    const Eigen::VectorXd w = uniform_grid(256);
    const Eigen::VectorXd direct = synthesize(f, w);
    CHECK((direct - f.grid_values()).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((analyze(direct, 50).coeffs() - f.coeffs()).cwiseAbs().maxCoeff() <= 1e-12);

    const FourierField constant = FourierField::mode(5, 11, 0, 0.25);
    CHECK((synthesize(constant, w).array() - 0.25).abs().maxCoeff() <= 1e-15);

    // e^{2iw} + e^{-2iw} = 2 cos 2w
    FourierField two = FourierField::zero(5, 16);
    two[2] = 1.0;
    two[-2] = 1.0;
    const Eigen::VectorXd pts = Eigen::VectorXd::LinSpaced(37, -1.0, 8.0);
    CHECK((synthesize(two, pts).array() - 2 * (2 * pts.array()).cos()).abs().maxCoeff() <= 1e-14);

    CHECK_THROWS_AS(f.grid_values(100), Undersampled);
}

TEST_CASE("spectral derivative") {
    // sin w has coefficients -i/2 at k=1 and i/2 at k=-1
    FourierField sinw = FourierField::zero(4, 16);
    sinw[1] = -kI / 2.0;
    sinw[-1] = kI / 2.0;
    const FourierField d = spectral_derivative(sinw, 1);
    CHECK(std::abs(d[1] - 0.5) <= 1e-12);
    CHECK(std::abs(d[-1] - 0.5) <= 1e-12);

    const FourierField e2 = FourierField::mode(4, 16, 2, 1.0);
    CHECK(spectral_derivative(e2, 2)[2] == Complex(-4.0, 0.0));

    core::SeededRng rng(2);
    const FourierField f = random_real_field(31, 31, rng, 4096);
    const FourierField twice = spectral_derivative(spectral_derivative(f, 1), 1);
    CHECK(twice.coeffs() == spectral_derivative(f, 2).coeffs());

    const int n = 4096;
    const double h = 2 * kPi / n;
    const Eigen::VectorXd v = f.grid_values(n);
    const Eigen::VectorXd dv = spectral_derivative(f, 1).grid_values(n);
    const double c[4] = {4.0 / 5.0, -1.0 / 5.0, 4.0 / 105.0, -1.0 / 280.0};
    double worst = 0.0;
    for (int j = 0; j < n; ++j) {
        double fd = 0.0;
        for (int s = 1; s <= 4; ++s) fd += c[s - 1] * (v((j + s) % n) - v((j - s + n) % n));
        fd /= h;
        worst = std::max(worst, std::abs(fd - dv(j)));
    }
    CHECK(worst <= 1e-6);

    CHECK_THROWS_AS(spectral_derivative(f, 3), InvalidParameter);
}

TEST_CASE("convolution") {
    core::SeededRng rng(3);
    const FourierField kernel = random_real_field(10, 10, rng);
    const FourierField uniform = FourierField::mode(10, 42, 0, 1.0 / (2 * kPi));
    const FourierField kc = convolve(kernel, uniform);
    // int K(w - w') dw' / 2pi is the mean of K
    CHECK(std::abs(kc[0] - kernel[0]) <= 1e-15);
    for (int k = 1; k <= 10; ++k) CHECK(std::abs(kc[k]) == 0.0);

    const FourierField single = FourierField::mode(10, 42, 4, 1.0);
    CHECK(std::abs(convolve(kernel, single)[4] - 2 * kPi * kernel[4]) <= 1e-15);

    const FourierField u = random_real_field(10, 10, rng);
    const FourierField ku = convolve(kernel, u);
    CHECK(ku.is_hermitian(1e-14));

    const int n = 4096;
    const Eigen::VectorXd grid = uniform_grid(n);
    const Eigen::VectorXd uv = u.grid_values(n);
    const Eigen::VectorXd kuv = ku.grid_values(n);
    double worst = 0.0;
    for (int i = 0; i < n; i += 97) {
        Eigen::VectorXd shifted(n);
        for (int j = 0; j < n; ++j) shifted(j) = grid(i) - grid(j);
        const double quad = 2 * kPi / n * synthesize(kernel, shifted).dot(uv);
        worst = std::max(worst, std::abs(quad - kuv(i)));
    }
    CHECK(worst <= 1e-9);

    CHECK_THROWS_AS(convolve(kernel, FourierField::zero(9, 42)), CutoffMismatch);
}

TEST_CASE("parseval") {
    core::SeededRng rng(4);
    for (int trial = 0; trial < 5; ++trial) {
        const FourierField f = random_real_field(20, 20, rng);
        CHECK(std::abs(grid_l2_norm_sq(f, 64) - spectral_l2_norm_sq(f)) <= 1e-10);
    }
}

TEST_CASE("density field invariants") {
    const DensityField u = DensityField::uniform(8, 32);
    CHECK(u.min_on_grid() == doctest::Approx(1.0 / (2 * kPi)));
    CHECK_FALSE(u.negativity_violated());
    CHECK_THROWS_AS(DensityField(FourierField::mode(8, 32, 0, 1.0)), InvalidParameter);
    CHECK_THROWS_AS(DensityField(FourierField::mode(8, 32, 0, 1.0 / (2 * kPi)) + FourierField::mode(8, 32, 1, 0.1)),
                    InvalidParameter);

    const DensityField neg = DensityField::sine_modulated(8, 32, {{2, 1.5}});
    CHECK(neg.negativity_violated());
    CHECK(neg.min_on_grid() < -0.05);

    const DensityField n = DensityField::normalized(FourierField::mode(8, 32, 0, 3.0));
    CHECK(n.field()[0] == Complex(1.0 / (2 * kPi), 0.0));
}

TEST_CASE("relative entropy") {
    const DensityField star = DensityField::sine_modulated(50, 256, {{1, 0.2}, {3, 0.8}});
    CHECK(std::abs(relative_entropy(star, star)) <= 1e-12);

    const DensityField rho = DensityField::sine_modulated(8, 32, {{1, 0.5}});
    const DensityField uniform = DensityField::uniform(8, 32);
    double quad = 0.0;
    const int n = 100000;
    for (int j = 0; j < n; ++j) {
        const double p = (1 + 0.5 * std::sin(2 * kPi * j / n)) / (2 * kPi);
        quad += p * std::log(p * 2 * kPi);
    }
    quad *= 2 * kPi / n;
    CHECK(std::abs(relative_entropy(rho, uniform) - quad) <= 1e-8);

    core::SeededRng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const DensityField a = random_density(12, 6, rng);
        const DensityField b = random_density(12, 6, rng);
        CHECK(relative_entropy(a, b) >= -1e-10);
        const double s = 2 * kPi * 17 / 1024;
        CHECK(std::abs(relative_entropy(rotated(a, s), rotated(b, s)) - relative_entropy(a, b)) <= 1e-10);
    }

    const DensityField neg = DensityField::sine_modulated(8, 32, {{2, 1.5}});
    CHECK_THROWS_AS(relative_entropy(neg, uniform), NonPositiveDensity);
    CHECK_THROWS_AS(relative_entropy(uniform, neg), NonPositiveDensity);
}

TEST_CASE("circle W2") {
    const DensityField rho = DensityField::sine_modulated(10, 256, {{1, 0.6}, {2, 0.3}});
    CHECK(circle_w2(rho, rho, 256) <= 1e-8);
    CHECK(circle_w2(rho, rotated(rho, 0.1), 256) <= 0.1);
    CHECK(circle_w2(rho, rotated(rho, 0.1), 256) > 0.05);

    // Discrete LP optimal transport on 256 bins (tests/oracles/circle_ot_lp.py).
    const double lp_w2 = 0.955092990368;
    const DensityField p = von_mises_pair(0.8, 3.0, 50, 256);
    const DensityField q = von_mises_pair(2.0, 4.5, 50, 256);
    const double w2 = circle_w2(p, q, 256);
    CHECK(std::abs(w2 - lp_w2) <= 0.02 * lp_w2);
    CHECK(std::abs(circle_w2(q, p, 256) - w2) <= 0.02 * lp_w2);

    const DensityField neg = DensityField::sine_modulated(8, 32, {{2, 1.5}});
    CHECK_THROWS_AS(circle_w2(neg, DensityField::uniform(8, 32), 32), NonPositiveDensity);
    CHECK_THROWS_AS(circle_w2(rho, rho, 0), InvalidParameter);
}

TEST_CASE("coefficient csv round trip") {
    core::SeededRng rng(6);
    const FourierField f = random_real_field(7, 7, rng);
    std::stringstream ss;
    write_coefficients_csv(ss, f);
    CHECK(ss.str().rfind("k,re,im\n-7,", 0) == 0);
    const FourierField g = read_coefficients_csv(ss, f.grid_size());
    CHECK(g.coeffs() == f.coeffs());

    std::stringstream bad("k,re,im\n0,1,0\n2,0,0\n-1,0,0\n");
    CHECK_THROWS_AS(read_coefficients_csv(bad, 8), InvalidParameter);
}
