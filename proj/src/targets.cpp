#include "contflow/targets.hpp"

#include <cmath>

namespace contflow::core {

double periodic_feature_coefficient(int k, double h) {
    const double kk = static_cast<double>(k);
    return h * std::sqrt(std::numbers::pi) * std::exp(-h * h * kk * kk / 4.0) / two_pi<double>;
}

TargetSpec TargetSpec::rkhs_combination(Eigen::VectorXd c, Eigen::MatrixXd centers,
                                        DataDistribution data, int design_size,
                                        std::uint64_t design_seed) {
    if (c.size() != centers.rows()) throw DimensionMismatch("rkhs target: |c| != #centers");
    if (centers.cols() != data.dim) throw DimensionMismatch("rkhs target: center dimension");
    if (design_size < 1) throw InvalidParameter("rkhs target: empty design");
    TargetSpec t;
    t.kind_ = Kind::rkhs_combination;
    t.data_ = data;
    t.coeffs_ = std::move(c);
    t.centers_ = std::move(centers);
    SeededRng design_rng(design_seed, SeededRng::stream_for("rkhs-design"));
    t.design_ = design_rng.sphere(design_size, data.dim);
    const Eigen::MatrixXd act = (t.design_ * t.centers_.transpose()).array().max(0.0).matrix();
    t.design_amp_ = act * t.coeffs_ / static_cast<double>(design_size);
    return t;
}

TargetSpec TargetSpec::random_rkhs_combination(int terms, int d, SeededRng& rng,
                                               int design_size) {
    Eigen::VectorXd c(terms);
    for (int i = 0; i < terms; ++i) c(i) = rng.normal();
    Eigen::MatrixXd centers = rng.sphere(terms, d);
    const std::uint64_t design_seed = rng.engine()();
    return rkhs_combination(std::move(c), std::move(centers), DataDistribution::unit_sphere(d),
                            design_size, design_seed);
}

TargetSpec TargetSpec::ridge_sum(Eigen::MatrixXd directions, DataDistribution data) {
    if (directions.cols() != data.dim) throw DimensionMismatch("ridge target: direction dimension");
    TargetSpec t;
    t.kind_ = Kind::ridge_sum;
    t.data_ = data;
    t.centers_ = std::move(directions);
    return t;
}

TargetSpec TargetSpec::random_ridge_sum(int terms, int d, SeededRng& rng) {
    return ridge_sum(rng.sphere(terms, d), DataDistribution::unit_sphere(d));
}

TargetSpec TargetSpec::fourier_density(Eigen::VectorXcd rho_hat, double h) {
    require_positive_width(h);
    if (rho_hat.size() % 2 != 1) throw InvalidParameter("fourier target: need 2M+1 coefficients");
    TargetSpec t;
    t.kind_ = Kind::fourier_density;
    t.data_ = DataDistribution::uniform_circle();
    t.h_ = h;
    const int cutoff = static_cast<int>(rho_hat.size() / 2);
    t.f_hat_.resize(rho_hat.size());
    for (int k = -cutoff; k <= cutoff; ++k) {
        t.f_hat_(k + cutoff) = two_pi<double> * periodic_feature_coefficient(k, h) * rho_hat(k + cutoff);
    }
    t.rho_hat_ = std::move(rho_hat);
    return t;
}

double TargetSpec::evaluate(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    if (x.size() != input_dim()) throw DimensionMismatch("target evaluated at wrong dimension");
    switch (kind_) {
        case Kind::rkhs_combination: {
            const Eigen::VectorXd act = (design_ * x).array().max(0.0).matrix();
            return act.dot(design_amp_);
        }
        case Kind::ridge_sum: return (centers_ * x).array().max(0.0).sum();
        case Kind::fourier_density: {
            const int cutoff = static_cast<int>(f_hat_.size() / 2);
            std::complex<double> sum = f_hat_(cutoff);
            for (int k = 1; k <= cutoff; ++k) {
                const std::complex<double> e = std::polar(1.0, k * x(0));
                sum += f_hat_(cutoff + k) * e + f_hat_(cutoff - k) * std::conj(e);
            }
            return sum.real();
        }
    }
    return 0.0;
}

Eigen::VectorXd TargetSpec::evaluate_batch(const Eigen::Ref<const Eigen::MatrixXd>& x) const {
    if (x.cols() != input_dim()) throw DimensionMismatch("target evaluated at wrong dimension");
    switch (kind_) {
        case Kind::rkhs_combination:
            return (x * design_.transpose()).array().max(0.0).matrix() * design_amp_;
        case Kind::ridge_sum:
            return (x * centers_.transpose()).array().max(0.0).rowwise().sum().matrix();
        case Kind::fourier_density: {
            Eigen::VectorXd out(x.rows());
            for (Eigen::Index i = 0; i < x.rows(); ++i) out(i) = evaluate(x.row(i).transpose());
            return out;
        }
    }
    return Eigen::VectorXd::Zero(x.rows());
}

}  // namespace contflow::core
