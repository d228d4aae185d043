#ifndef CONTFLOW_CORE_MATH_HPP
#define CONTFLOW_CORE_MATH_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "contflow/errors.hpp"

namespace contflow::core {

template <typename Scalar>
inline constexpr Scalar two_pi = Scalar(2) * std::numbers::pi_v<Scalar>;

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename Scalar>
Scalar relu(Scalar t) {
    return t > Scalar(0) ? t : Scalar(0);
}

/// Subgradient of ReLU with the convention relu'(0) = 0.
template <typename Scalar>
Scalar relu_derivative(Scalar t) {
    return t > Scalar(0) ? Scalar(1) : Scalar(0);
}

template <typename Scalar>
Scalar normal_pdf(Scalar t) {
    using std::exp;
    using std::sqrt;
    return exp(Scalar(-0.5) * t * t) / sqrt(two_pi<Scalar>);
}

/// Standard normal CDF through the complementary error function, which keeps
/// full relative accuracy in the lower tail.
template <typename Scalar>
Scalar normal_cdf(Scalar t) {
    using std::erfc;
    return Scalar(0.5) * erfc(-t / std::numbers::sqrt2_v<Scalar>);
}

inline void require_positive_width(double h) {
    if (!(h > 0.0) || !std::isfinite(h)) {
        throw InvalidParameter("smoothing width h must be positive and finite");
    }
}

/// Gaussian-smoothed ReLU: E[relu(t + h xi)] = t Phi(t/h) + h phi(t/h).
template <typename Scalar>
Scalar smoothed_relu(Scalar t, Scalar h) {
    require_positive_width(static_cast<double>(h));
    const Scalar s = t / h;
    return t * normal_cdf(s) + h * normal_pdf(s);
}

template <typename Scalar>
Scalar smoothed_relu_derivative(Scalar t, Scalar h) {
    require_positive_width(static_cast<double>(h));
    return normal_cdf(t / h);
}

/// Scalar activation with its derivative. `h` is only read for the smoothed
/// ReLU.
struct Activation {
    enum class Kind { relu, smoothed_relu, tanh };

    Kind kind = Kind::relu;
    double h = 0.0;

    static Activation make_relu() { return {Kind::relu, 0.0}; }
    static Activation make_tanh() { return {Kind::tanh, 0.0}; }
    static Activation make_smoothed_relu(double width) {
        require_positive_width(width);
        return {Kind::smoothed_relu, width};
    }

    template <typename Scalar>
    Scalar value(Scalar t) const {
        switch (kind) {
            case Kind::relu: return relu(t);
            case Kind::smoothed_relu: return smoothed_relu(t, Scalar(h));
            case Kind::tanh: return std::tanh(t);
        }
        return Scalar(0);
    }

    template <typename Scalar>
    Scalar derivative(Scalar t) const {
        switch (kind) {
            case Kind::relu: return relu_derivative(t);
            case Kind::smoothed_relu: return smoothed_relu_derivative(t, Scalar(h));
            case Kind::tanh: {
                const Scalar th = std::tanh(t);
                return Scalar(1) - th * th;
            }
        }
        return Scalar(0);
    }

    /// Elementwise application to a dense array expression.
    template <typename Derived>
    auto apply(const Eigen::ArrayBase<Derived>& t) const {
        using Scalar = typename Derived::Scalar;
        return t.unaryExpr([this](Scalar v) { return value(v); });
    }

    template <typename Derived>
    auto apply_derivative(const Eigen::ArrayBase<Derived>& t) const {
        using Scalar = typename Derived::Scalar;
        return t.unaryExpr([this](Scalar v) { return derivative(v); });
    }
};

// ---------------------------------------------------------------------------
// Ridge feature sigma(b^T x~) with an explicit bias convention.
// ---------------------------------------------------------------------------

/// When `bias_included` is set, inputs are lifted to x~ = (x^T, 1)^T before
/// the inner product and parameters b live in R^{d+1}; otherwise b is in R^d.
struct RidgeFeature {
    Activation activation;
    int input_dim = 1;
    bool bias_included = true;

    int param_dim() const { return bias_included ? input_dim + 1 : input_dim; }

    /// Row-wise lift of a batch (n x d) to (n x param_dim).
    template <typename Derived>
    Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> lift(
        const Eigen::MatrixBase<Derived>& x) const {
        using Scalar = typename Derived::Scalar;
        if (x.cols() != input_dim) {
            throw DimensionMismatch("ridge feature input has wrong dimension");
        }
        Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> out(x.rows(), param_dim());
        out.leftCols(input_dim) = x;
        if (bias_included) out.col(input_dim).setOnes();
        return out;
    }

    template <typename DerivedX, typename DerivedB>
    typename DerivedX::Scalar evaluate(const Eigen::MatrixBase<DerivedX>& x,
                                       const Eigen::MatrixBase<DerivedB>& b) const {
        using Scalar = typename DerivedX::Scalar;
        if (x.size() != input_dim || b.size() != param_dim()) {
            throw DimensionMismatch("ridge feature argument has wrong dimension");
        }
        Scalar z = x.dot(b.head(input_dim));
        if (bias_included) z += b(input_dim);
        return activation.value(z);
    }
};

// ---------------------------------------------------------------------------
// Periodic Gaussian feature and its closed-form kernel on [0, 2pi).
// ---------------------------------------------------------------------------

namespace detail {

/// Sum of term(d + 2 pi k) over the images with |d + 2 pi k| <= reach; the
/// zero-offset image nearest to the origin is always included.
template <typename Scalar, typename Term>
Scalar wrapped_sum(Scalar d, Scalar reach, Term term) {
    const Scalar period = two_pi<Scalar>;
    const Scalar d0 = d - period * std::round(d / period);
    Scalar sum = term(d0);
    for (int k = 1;; ++k) {
        const Scalar plus = d0 + Scalar(k) * period;
        const Scalar minus = d0 - Scalar(k) * period;
        const bool use_plus = std::abs(plus) <= reach;
        const bool use_minus = std::abs(minus) <= reach;
        if (!use_plus && !use_minus) break;
        if (use_plus) sum += term(plus);
        if (use_minus) sum += term(minus);
    }
    return sum;
}

}  // namespace detail

/// phi(x, w) = sum_k exp(-(x - w - 2 k pi)^2 / h^2). Images farther than 10h
/// are dropped, so the truncation error is below exp(-100).
template <typename Scalar>
Scalar periodic_feature(Scalar x, Scalar w, Scalar h) {
    require_positive_width(static_cast<double>(h));
    const Scalar inv_h2 = Scalar(1) / (h * h);
    return detail::wrapped_sum<Scalar>(x - w, Scalar(10) * h,
                                       [inv_h2](Scalar d) { return std::exp(-d * d * inv_h2); });
}

/// d/dw of periodic_feature.
template <typename Scalar>
Scalar periodic_feature_dw(Scalar x, Scalar w, Scalar h) {
    require_positive_width(static_cast<double>(h));
    const Scalar inv_h2 = Scalar(1) / (h * h);
    return detail::wrapped_sum<Scalar>(x - w, Scalar(10) * h, [inv_h2](Scalar d) {
        return Scalar(2) * d * inv_h2 * std::exp(-d * d * inv_h2);
    });
}

/// K(w, w') = (1/2pi) int phi(x,w) phi(x,w') dx
///          = h / sqrt(8 pi) sum_k exp(-(w - w' + 2 k pi)^2 / (2 h^2)).
/// Images are cut at |.| <= 10h, i.e. exponent 50.
template <typename Scalar>
Scalar closed_form_kernel(Scalar w, Scalar w_prime, Scalar h) {
    require_positive_width(static_cast<double>(h));
    using std::sqrt;
    const Scalar inv_2h2 = Scalar(1) / (Scalar(2) * h * h);
    const Scalar sum = detail::wrapped_sum<Scalar>(
        w - w_prime, Scalar(10) * h, [inv_2h2](Scalar d) { return std::exp(-d * d * inv_2h2); });
    return h / sqrt(Scalar(8) * std::numbers::pi_v<Scalar>) * sum;
}

// ---------------------------------------------------------------------------
// Seeded randomness
// ---------------------------------------------------------------------------

/// 64-bit FNV-1a; used to turn component names into stream ids.
constexpr std::uint64_t fnv1a(std::string_view text) {
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    for (char c : text) {
        hash ^= static_cast<std::uint8_t>(c);
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

/// Reproducible random source keyed by (seed, stream). Streams are derived by
/// SplitMix64-mixing the pair, so distinct streams give unrelated sequences.
class SeededRng {
public:
    SeededRng(std::uint64_t seed, std::uint64_t stream = 0);

    /// Stream id for a named component: fnv1a(name).
    static std::uint64_t stream_for(std::string_view component) { return fnv1a(component); }

    SeededRng derive(std::string_view component) const {
        return SeededRng(seed_, stream_ ^ stream_for(component));
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }

    double normal();
    double uniform();  // [0, 1)
    double uniform_angle() { return two_pi<double> * uniform(); }

    /// rows x cols i.i.d. N(0, 1), filled row by row.
    Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols);
    /// n points uniform on the unit sphere S^{d-1}, one per row.
    Eigen::MatrixXd sphere(Eigen::Index n, Eigen::Index d);
    /// n angles uniform on [0, 2 pi), as an n x 1 matrix.
    Eigen::MatrixXd angles(Eigen::Index n);

    std::mt19937_64& engine() { return engine_; }

private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

// ---------------------------------------------------------------------------
// Data distributions and Monte Carlo expectations
// ---------------------------------------------------------------------------

struct DataDistribution {
    enum class Kind { sphere, circle, gaussian };

    Kind kind = Kind::sphere;
    int dim = 1;

    static DataDistribution unit_sphere(int d) { return {Kind::sphere, d}; }
    static DataDistribution uniform_circle() { return {Kind::circle, 1}; }
    static DataDistribution standard_gaussian(int d) { return {Kind::gaussian, d}; }

    /// n samples, one per row.
    Eigen::MatrixXd sample(Eigen::Index n, SeededRng& rng) const;
};

struct Estimate {
    double mean = 0.0;
    double std_error = 0.0;
};

/// Mean and standard error of f(x) over `batch` i.i.d. draws. Samples are
/// drawn and summed in index order so the result is bit-reproducible. A batch
/// of one has an infinite standard error.
Estimate expect_over_data(const std::function<double(const Eigen::VectorXd&)>& f,
                          const DataDistribution& dist, long batch, SeededRng& rng);

/// Mean and standard error of a vector of samples, reduced in index order.
Estimate mean_and_stderr(const Eigen::Ref<const Eigen::VectorXd>& values);

/// Least-squares slope of log(y) against log(t) over the points with
/// t in [t_begin, t_end], t > 0 and y > 0. NaN when fewer than two points
/// qualify.
double loglog_slope(const std::vector<double>& t, const std::vector<double>& y, double t_begin,
                    double t_end);

// ---------------------------------------------------------------------------
// Parallel execution of independent tasks
// ---------------------------------------------------------------------------

/// Worker count from CONTFLOW_THREADS (default: hardware concurrency, at
/// least 1). Invalid values fall back to 1.
int worker_count();

/// Runs task(i) for i in [0, n) on up to worker_count() threads. Each task
/// must write only to its own output slot, so results never depend on the
/// thread count. The first exception thrown by a task is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& task);

}  // namespace contflow::core

#endif  // CONTFLOW_CORE_MATH_HPP
