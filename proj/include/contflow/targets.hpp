#ifndef CONTFLOW_TARGETS_HPP
#define CONTFLOW_TARGETS_HPP

#include <complex>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "contflow/core_math.hpp"

namespace contflow::core {

/// Synthetic target function together with its data distribution.
///
/// * rkhs_combination: f(x) = sum_i c_i K(x, x_i) with
///   K(x, x') = E_{w ~ Unif(S^{d-1})}[relu(w.x) relu(w.x')]. The expectation
///   is replaced by a frozen fixed-seed design of sphere directions, so
///   f(x) = (1/N) sum_s g_s relu(w_s . x) with g_s = sum_i c_i relu(w_s . x_i).
/// * ridge_sum: f(x) = sum_i relu(w_i . x).
/// * fourier_density: f(x) = int phi(x, w) rho(w) dw on the circle, with phi
///   the periodic Gaussian feature of width h and rho given by its Fourier
///   coefficients rho_hat(k), k = -M..M.
class TargetSpec {
public:
    enum class Kind { rkhs_combination, ridge_sum, fourier_density };

    static TargetSpec rkhs_combination(Eigen::VectorXd c, Eigen::MatrixXd centers,
                                       DataDistribution data, int design_size,
                                       std::uint64_t design_seed);
    /// Random instance: c_i ~ N(0,1), x_i ~ N(0, I) normalized to the sphere.
    static TargetSpec random_rkhs_combination(int terms, int d, SeededRng& rng,
                                              int design_size = 10000);
    static TargetSpec ridge_sum(Eigen::MatrixXd directions, DataDistribution data);
    /// Random instance: w_i uniform on S^{d-1}.
    static TargetSpec random_ridge_sum(int terms, int d, SeededRng& rng);
    static TargetSpec fourier_density(Eigen::VectorXcd rho_hat, double h);

    Kind kind() const { return kind_; }
    int input_dim() const { return data_.dim; }
    const DataDistribution& data() const { return data_; }

    double evaluate(const Eigen::Ref<const Eigen::VectorXd>& x) const;
    /// Values at each row of x.
    Eigen::VectorXd evaluate_batch(const Eigen::Ref<const Eigen::MatrixXd>& x) const;

    Eigen::MatrixXd sample(Eigen::Index n, SeededRng& rng) const { return data_.sample(n, rng); }

    // Accessors used for manifests and tests.
    const Eigen::VectorXd& coefficients() const { return coeffs_; }
    const Eigen::MatrixXd& centers() const { return centers_; }
    const Eigen::MatrixXd& design() const { return design_; }
    const Eigen::VectorXcd& rho_hat() const { return rho_hat_; }
    double width() const { return h_; }

private:
    Kind kind_ = Kind::ridge_sum;
    DataDistribution data_;
    Eigen::VectorXd coeffs_;       // c_i (rkhs)
    Eigen::MatrixXd centers_;      // x_i (rkhs) or w_i (ridge), one per row
    Eigen::MatrixXd design_;       // frozen sphere design (rkhs)
    Eigen::VectorXd design_amp_;   // g_s / N (rkhs)
    Eigen::VectorXcd rho_hat_;     // (fourier)
    Eigen::VectorXcd f_hat_;       // coefficients of f (fourier)
    double h_ = 0.0;
};

/// Fourier coefficient (1/2pi) int phi(x, 0) e^{-ikx} dx of the periodic
/// Gaussian feature: h sqrt(pi) exp(-h^2 k^2 / 4) / (2 pi).
double periodic_feature_coefficient(int k, double h);

}  // namespace contflow::core

#endif  // CONTFLOW_TARGETS_HPP
