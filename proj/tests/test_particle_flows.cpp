#include <cmath>
#include <cstdlib>
#include <numeric>

#include <doctest.h>
#include <unsupported/Eigen/MatrixFunctions>

#include "contflow/particle_flows.hpp"

using namespace contflow;
using namespace contflow::particles;
using core::Activation;
using core::RidgeFeature;
using core::SeededRng;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

RidgeFeature relu_feature(int d, bool bias = true) { return {Activation::make_relu(), d, bias}; }

double rel_diff(const MatrixXd& a, const MatrixXd& b) {
    const double scale = std::max(a.norm(), b.norm());
    return scale == 0.0 ? 0.0 : (a - b).norm() / scale;
}

double kahan_network(const Ensemble& e, const RidgeFeature& f, const VectorXd& x) {
    double sum = 0.0, comp = 0.0;
    for (Eigen::Index k = 0; k < e.size(); ++k) {
        double z = 0.0, zc = 0.0;
        for (int j = 0; j < f.param_dim(); ++j) {
            const double xj = j < f.input_dim ? x(j) : 1.0;
            const double term = e.b(k, j) * xj - zc;
            const double next = z + term;
            zc = (next - z) - term;
            z = next;
        }
        const double term = e.a(k) * f.activation.value(z) - comp;
        const double next = sum + term;
        comp = (next - sum) - term;
        sum = next;
    }
    return sum / static_cast<double>(e.size());
}

// Batch risk (1/2) mean_i (f(x_i) - y_i)^2 written with explicit loops.
double batch_risk(const Ensemble& e, const RidgeFeature& f, const MatrixXd& x, const VectorXd& y) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double r = kahan_network(e, f, x.row(i).transpose()) - y(i);
        total += 0.5 * r * r;
    }
    return total / static_cast<double>(x.rows());
}

// Analytic gradient of batch_risk with respect to (a_k, b_k), by loops.
void analytic_gradient(const Ensemble& e, const RidgeFeature& f, const MatrixXd& x, const VectorXd& y,
                       VectorXd& ga, MatrixXd& gb) {
    const auto m = static_cast<double>(e.size());
    const auto n = static_cast<double>(x.rows());
    ga = VectorXd::Zero(e.size());
    gb = MatrixXd::Zero(e.size(), e.param_dim());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        VectorXd xt(f.param_dim());
        xt.head(f.input_dim) = x.row(i).transpose();
        if (f.bias_included) xt(f.input_dim) = 1.0;
        const double r = kahan_network(e, f, x.row(i).transpose()) - y(i);
        for (Eigen::Index k = 0; k < e.size(); ++k) {
            const double z = e.b.row(k).dot(xt);
            ga(k) += r * f.activation.value(z) / (m * n);
            gb.row(k) += (r * e.a(k) * f.activation.derivative(z) / (m * n)) * xt.transpose();
        }
    }
}

Ensemble random_ensemble(int m, int p, SeededRng& rng) {
    Ensemble e = init_ensemble(m, p, InitScheme::gauss_all, rng);
    e.u = rng.gaussian(m, p);
    return e;
}

}  // namespace

TEST_CASE("init_ensemble") {
    SeededRng rng(11);
    const Ensemble e = init_ensemble(3, 4, InitScheme::zero_a_gauss_b, rng);
    CHECK(e.a.isZero(0.0));
    CHECK(e.u.isZero(0.0));
    const MatrixXd x = SeededRng(2).gaussian(5, 3);
    CHECK(eval_network(e, relu_feature(3), x).isZero(0.0));

    SeededRng r1(99), r2(99);
    const Ensemble e1 = init_ensemble(50, 7, InitScheme::gauss_all, r1);
    const Ensemble e2 = init_ensemble(50, 7, InitScheme::gauss_all, r2);
    CHECK(e1.a == e2.a);
    CHECK(e1.b == e2.b);

    SeededRng big(5);
    const int m = 2000, d = 11;
    const Ensemble g = init_ensemble(m, d, InitScheme::zero_a_gauss_b, big);
    CHECK(std::abs(g.b.mean()) < 4.0 / std::sqrt(double(m) * d));
    CHECK(std::abs(g.b.array().square().mean() - 1.0) < 0.05);

    const Ensemble c = init_ensemble(2, 3, InitScheme::custom, big, false);
    CHECK(c.b.isZero(0.0));
    CHECK_FALSE(c.has_u());
    CHECK_THROWS_AS(init_ensemble(0, 3, InitScheme::custom, big), InvalidParameter);
}

TEST_CASE("eval_network") {
    const RidgeFeature f = relu_feature(2);
    SeededRng rng0(1);
    Ensemble one = init_ensemble(1, 3, InitScheme::custom, rng0);
    one.a(0) = 2.0;
    one.b.row(0) << 1.0, 0.5, 0.5;
    VectorXd x(2);
    x << 2.0, 1.0;  // b . x~ = 2 + 0.5 + 0.5 = 3
    CHECK(eval_network_at(one, f, x) == doctest::Approx(6.0).epsilon(1e-15));

    SeededRng rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        const Ensemble e = random_ensemble(300, 6, rng);
        const RidgeFeature g = trial % 2 ? relu_feature(5) : RidgeFeature{Activation::make_tanh(), 5, true};
        const MatrixXd xs = rng.gaussian(20, 5);
        const VectorXd fx = eval_network(e, g, xs);
        for (Eigen::Index i = 0; i < xs.rows(); ++i) {
            const double oracle = kahan_network(e, g, xs.row(i).transpose());
            CHECK(std::abs(fx(i) - oracle) <= 1e-12 * std::max(1.0, std::abs(oracle)));
        }
    }
    CHECK_THROWS_AS(eval_network(one, relu_feature(3), MatrixXd::Ones(2, 3)), DimensionMismatch);
}

TEST_CASE("two-layer step equals scaled-network gradient descent") {
    SeededRng rng(21);
    for (int trial = 0; trial < 10; ++trial) {
        const int m = 1 + trial % 8, d = 1 + trial % 4, n = 4 + trial;
        const RidgeFeature f = relu_feature(d);
        const Ensemble e = random_ensemble(m, d + 1, rng);
        const MatrixXd x = rng.gaussian(n, d);
        const VectorXd y = rng.gaussian(n, 1).col(0);
        VectorXd ga;
        MatrixXd gb;
        analytic_gradient(e, f, x, y, ga, gb);
        const auto v = velocity(Flavor::two_layer, e, f, x, y);
        CHECK(rel_diff(v.a, -double(m) * ga) < 1e-10);
        CHECK(rel_diff(v.b, -double(m) * gb) < 1e-10);
    }
}

TEST_CASE("two-layer step: hand case and zero residual") {
    const RidgeFeature f = relu_feature(1);
    SeededRng rng(0);
    Ensemble e = init_ensemble(1, 2, InitScheme::custom, rng);
    e.a(0) = 1.5;
    e.b.row(0) << 0.7, -0.2;
    MatrixXd x(1, 1);
    x << 2.0;
    VectorXd y(1);
    y << 0.4;
    const double z = 0.7 * 2.0 - 0.2;
    const double r = 1.5 * z - 0.4;
    const auto v = velocity(Flavor::two_layer, e, f, x, y);
    CHECK(std::abs(v.a(0) + r * z) < 1e-12);
    CHECK(std::abs(v.b(0, 0) + r * 1.5 * 2.0) < 1e-12);
    CHECK(std::abs(v.b(0, 1) + r * 1.5) < 1e-12);

    const Ensemble zero = init_ensemble(4, 3, InitScheme::zero_a_gauss_b, rng);
    const MatrixXd xs = rng.gaussian(6, 2);
    for (Flavor flavor : {Flavor::two_layer, Flavor::random_feature, Flavor::smoothed, Flavor::u_particle}) {
        const auto w = velocity(flavor, zero, relu_feature(2), xs, VectorXd::Zero(6));
        CHECK(w.a.isZero(0.0));
        CHECK(w.b.isZero(0.0));
        CHECK(w.u.isZero(0.0));
    }
}

TEST_CASE("two-layer step matches finite differences of the batch risk") {
    SeededRng rng(8);
    const RidgeFeature f{Activation::make_tanh(), 3, true};
    for (int trial = 0; trial < 5; ++trial) {
        const int m = 3 + trial;
        const Ensemble e = random_ensemble(m, 4, rng);
        const MatrixXd x = rng.gaussian(7, 3);
        const VectorXd y = rng.gaussian(7, 1).col(0);
        const auto v = velocity(Flavor::two_layer, e, f, x, y);
        const double eps = 1e-6;
        for (Eigen::Index k = 0; k < m; ++k) {
            Ensemble plus = e, minus = e;
            plus.a(k) += eps;
            minus.a(k) -= eps;
            const double fd = (batch_risk(plus, f, x, y) - batch_risk(minus, f, x, y)) / (2 * eps);
            CHECK(std::abs(-m * fd - v.a(k)) <= 1e-6 * std::max(1e-3, std::abs(v.a(k))));
            for (int j = 0; j < 4; ++j) {
                Ensemble bp = e, bm = e;
                bp.b(k, j) += eps;
                bm.b(k, j) -= eps;
                const double fdb = (batch_risk(bp, f, x, y) - batch_risk(bm, f, x, y)) / (2 * eps);
                CHECK(std::abs(-m * fdb - v.b(k, j)) <= 1e-6 * std::max(1e-3, std::abs(v.b(k, j))));
            }
        }
    }
}

TEST_CASE("random-feature step") {
    SeededRng rng(31);
    const RidgeFeature f = relu_feature(3);
    const Ensemble e = random_ensemble(6, 4, rng);
    const MatrixXd x = rng.gaussian(9, 3);
    const VectorXd y = rng.gaussian(9, 1).col(0);
    const auto rf = velocity(Flavor::random_feature, e, f, x, y);
    const auto tl = velocity(Flavor::two_layer, e, f, x, y);
    CHECK(rf.a == tl.a);
    CHECK(rf.b.isZero(0.0));
    // With u = 0 the u-particle amplitude update is the random-feature one.
    Ensemble u0 = e;
    u0.u.setZero();
    CHECK(velocity(Flavor::u_particle, u0, f, x, y).a == rf.a);

    // On a fixed batch the amplitudes follow da/dt = -(S^T S a / m - S^T y) / n.
    Ensemble tiny = random_ensemble(2, 4, rng);
    const MatrixXd x2 = rng.gaussian(2, 3);
    const VectorXd y2 = rng.gaussian(2, 1).col(0);
    const MatrixXd s = f.activation.apply(preactivations(tiny, f, x2).array()).matrix();
    const MatrixXd A = s.transpose() * s / (2.0 * 2.0);
    const VectorXd c = s.transpose() * y2 / 2.0;
    const double horizon = 2.0;
    MatrixXd aug = MatrixXd::Zero(3, 3);
    aug.topLeftCorner(2, 2) = -A;
    aug.topRightCorner(2, 1) = c;
    MatrixXd state(3, 1);
    state << tiny.a, 1.0;
    const VectorXd exact = ((aug * horizon).exp() * state).topRows(2);
    auto euler_error = [&](double step) {
        Ensemble iter = tiny;
        const int steps = static_cast<int>(std::lround(horizon / step));
        for (int i = 0; i < steps; ++i) {
            iter = apply_velocity(iter, velocity(Flavor::random_feature, iter, f, x2, y2), step);
        }
        return (iter.a - exact).norm();
    };
    const double coarse = euler_error(0.02);
    const double fine = euler_error(0.01);
    const double rate = A.norm() * (A.norm() * tiny.a.norm() + c.norm());
    CHECK(coarse <= 0.02 * horizon * rate);
    CHECK(coarse / fine == doctest::Approx(2.0).epsilon(0.1));
}

TEST_CASE("smoothed step") {
    SeededRng rng(41);
    const int d = 4;
    const RidgeFeature f = relu_feature(d, false);
    const Ensemble e = random_ensemble(5, d, rng);
    const MatrixXd x = rng.sphere(12, d);
    const VectorXd y = rng.gaussian(12, 1).col(0);
    CHECK(smoothed_reduction_exact(f, x));
    CHECK_FALSE(smoothed_reduction_exact(relu_feature(d, true), x));

    RidgeFeature tiny = f;
    tiny.activation = Activation::make_smoothed_relu(1e-6);
    const MatrixXd z = preactivations(e, f, x);
    REQUIRE(z.array().abs().minCoeff() > 1e-3);
    const auto vs = velocity(Flavor::smoothed, e, tiny, x, y);
    const auto vr = velocity(Flavor::two_layer, e, f, x, y);
    CHECK((vs.a - vr.a).cwiseAbs().maxCoeff() < 1e-4);
    CHECK((vs.b - vr.b).cwiseAbs().maxCoeff() < 1e-4);

    Ensemble zero_b = e;
    zero_b.b.setZero();
    RidgeFeature smooth = f;
    smooth.activation = Activation::make_smoothed_relu(0.3);
    const VectorXd f0 = eval_network(zero_b, smooth, x);
    CHECK(f0(0) == doctest::Approx(e.a.mean() * 0.3 / std::sqrt(2 * M_PI)).epsilon(1e-14));

    for (double h : {0.05, 0.3, 1.0}) {
        smooth.activation = Activation::make_smoothed_relu(h);
        const MatrixXd xs = rng.sphere(40, d);
        const VectorXd gap = (eval_network(e, smooth, xs) - eval_network(e, f, xs)).cwiseAbs();
        CHECK(gap.maxCoeff() <= h / std::sqrt(2 * M_PI) * e.a.cwiseAbs().mean() + 1e-15);
    }

    // E_xi[relu(b.x + h xi_2 . x)] = sigma_h(b.x) for unit-norm x.
    const VectorXd xu = rng.sphere(1, d).row(0).transpose();
    const VectorXd b = rng.gaussian(d, 1).col(0) * 0.3;
    const double h = 0.4;
    const long samples = 1000000;
    VectorXd draws(samples);
    for (long s = 0; s < samples; ++s) {
        VectorXd xi(d);
        for (int j = 0; j < d; ++j) xi(j) = rng.normal();
        draws(s) = core::relu(b.dot(xu) + h * xi.dot(xu));
    }
    const core::Estimate est = core::mean_and_stderr(draws);
    CHECK(std::abs(est.mean - core::smoothed_relu(b.dot(xu), h)) < 3.0 * est.std_error);

    // Smoothed particle velocity by Monte Carlo over perturbed particles.
    const Ensemble small = random_ensemble(3, d, rng);
    const MatrixXd xb = rng.sphere(6, d);
    const VectorXd yb = rng.gaussian(6, 1).col(0);
    RidgeFeature sh = f;
    sh.activation = Activation::make_smoothed_relu(h);
    const auto exact = velocity(Flavor::smoothed, small, sh, xb, yb);
    const auto mc = smoothed_velocity_monte_carlo(small, f, xb, yb, h, 100000, rng);
    CHECK(((exact.a - mc.mean.a).array().abs() <= 3.5 * mc.std_error.a.array()).all());
    CHECK(((exact.b - mc.mean.b).array().abs() <= 3.5 * mc.std_error.b.array() + 1e-15).all());
}

TEST_CASE("u-particle step") {
    SeededRng rng(51);
    const int d = 3;
    const RidgeFeature f = relu_feature(d, false);
    Ensemble e0 = init_ensemble(4, d, InitScheme::zero_a_gauss_b, rng);
    const MatrixXd x = rng.sphere(10, d);
    const VectorXd y = rng.gaussian(10, 1).col(0);
    const Ensemble e1 = apply_velocity(e0, velocity(Flavor::u_particle, e0, f, x, y), 0.1);
    CHECK(e1.b == e0.b);
    CHECK_FALSE(e1.a.isZero(0.0));
    CHECK_FALSE(e1.u.isZero(0.0));

    Ensemble e = random_ensemble(2, d, rng);
    const auto v = velocity(Flavor::u_particle, e, f, x, y);
    const VectorXd r = eval_network(e, f, x) - y;
    const double eps = 1e-6;
    auto mean_r_sigma = [&](const VectorXd& b) {
        double s = 0.0;
        for (Eigen::Index i = 0; i < x.rows(); ++i) s += r(i) * core::relu(x.row(i).dot(b));
        return s / static_cast<double>(x.rows());
    };
    for (Eigen::Index j = 0; j < e.size(); ++j) {
        const VectorXd bj = e.b.row(j).transpose();
        const VectorXd uj = e.u.row(j).transpose();
        // delta R / delta a at b_j, and the chemical potential with the
        // amplitude field linearized around the particle.
        auto potential = [&](const VectorXd& b) { return (e.a(j) + uj.dot(b - bj)) * mean_r_sigma(b); };
        CHECK(std::abs(-mean_r_sigma(bj) - v.a(j)) < 1e-14);
        for (int c = 0; c < d; ++c) {
            VectorXd bp = bj, bm = bj;
            bp(c) += eps;
            bm(c) -= eps;
            const double grad_a = (mean_r_sigma(bp) - mean_r_sigma(bm)) / (2 * eps);
            const double grad_v = (potential(bp) - potential(bm)) / (2 * eps);
            CHECK(std::abs(-grad_a - v.u(j, c)) <= 1e-6 * std::max(1e-3, std::abs(v.u(j, c))));
            CHECK(std::abs(-grad_v - v.b(j, c)) <= 1e-6 * std::max(1e-3, std::abs(v.b(j, c))));
        }
    }
    Ensemble no_u = e;
    no_u.u.resize(0, 0);
    CHECK_THROWS_AS(velocity(Flavor::u_particle, no_u, f, x, y), InvalidParameter);
}

TEST_CASE("permutation equivariance") {
    SeededRng rng(61);
    const RidgeFeature f = relu_feature(3);
    const Ensemble e = random_ensemble(7, 4, rng);
    const MatrixXd x = rng.gaussian(11, 3);
    const VectorXd y = rng.gaussian(11, 1).col(0);
    std::vector<Eigen::Index> perm{3, 0, 6, 1, 5, 2, 4};
    for (Flavor flavor : {Flavor::two_layer, Flavor::random_feature, Flavor::u_particle}) {
        const Ensemble a = apply_velocity(e.permuted(perm), velocity(flavor, e.permuted(perm), f, x, y), 0.1);
        const Ensemble b = apply_velocity(e, velocity(flavor, e, f, x, y), 0.1).permuted(perm);
        CHECK(rel_diff(a.a, b.a) < 1e-14);
        CHECK(rel_diff(a.b, b.b) < 1e-14);
        CHECK(rel_diff(a.u, b.u) < 1e-14);
    }
}

TEST_CASE("train") {
    SeededRng rng(71);
    const int d = 5;
    const RidgeFeature f = relu_feature(d, false);
    const auto target = core::TargetSpec::random_ridge_sum(3, d, rng);
    const LabeledSource source = LabeledSource::from_target(target);
    const Ensemble e0 = init_ensemble(40, d, InitScheme::zero_a_gauss_b, rng);

    TrainConfig cfg;
    cfg.steps = 0;
    cfg.eval_batch = 500;
    cfg.batch = 20;
    const RiskSeries empty = train(Flavor::u_particle, e0, source, f, cfg);
    REQUIRE(empty.size() == 1);
    CHECK(empty.step[0] == 0);
    CHECK(empty.risk[0] > 0.0);

    cfg.steps = 200;
    cfg.eval_every = 50;
    cfg.eval_log_points = 5;
    Ensemble final_a, final_b;
    const RiskSeries s1 = train(Flavor::u_particle, e0, source, f, cfg, &final_a);
    setenv("CONTFLOW_THREADS", "3", 1);
    const RiskSeries s2 = train(Flavor::u_particle, e0, source, f, cfg, &final_b);
    unsetenv("CONTFLOW_THREADS");
    CHECK(s1.risk == s2.risk);
    CHECK(final_a.b == final_b.b);
    CHECK(s1.step.front() == 0);
    CHECK(s1.step.back() == 200);
    CHECK(s1.t.back() == doctest::Approx(20.0));
    CHECK(s1.risk.back() < s1.risk.front());
    for (std::size_t i = 1; i < s1.size(); ++i) CHECK(s1.step[i] > s1.step[i - 1]);

    const RiskSeries sm = train(Flavor::smoothed, e0, source, f, cfg);
    CHECK(sm.smoothed_reduction_exact);
    const RiskSeries sm_bias = train(Flavor::smoothed, init_ensemble(40, d + 1, InitScheme::gauss_all, rng), source,
                                     relu_feature(d, true), cfg);
    CHECK_FALSE(sm_bias.smoothed_reduction_exact);

    TrainConfig wild = cfg;
    wild.step_size = 1e150;
    Ensemble big = init_ensemble(40, d, InitScheme::gauss_all, rng);
    big.a *= 1e100;
    CHECK_THROWS_AS(train(Flavor::two_layer, big, source, f, wild), Divergence);
    try {
        train(Flavor::two_layer, big, source, f, wild);
    } catch (const Divergence& err) {
        CHECK(err.step() >= 1);
    }
}

TEST_CASE("random-feature training on a realizable target") {
    SeededRng rng(81);
    const int d = 4, m = 30;
    const RidgeFeature f = relu_feature(d, false);
    const Ensemble teacher = init_ensemble(m, d, InitScheme::gauss_all, rng, false);
    const LabeledSource source = LabeledSource::from_function(
        core::DataDistribution::unit_sphere(d), [teacher, f](const MatrixXd& x) { return eval_network(teacher, f, x); });
    Ensemble student = teacher;
    student.a.setZero();

    TrainConfig cfg;
    cfg.step_size = 0.2;
    cfg.batch = 50;
    cfg.steps = 2000;
    cfg.eval_every = 100;
    cfg.eval_batch = 4000;
    const RiskSeries s = train(Flavor::random_feature, student, source, f, cfg);
    const double abar = teacher.a.squaredNorm();
    for (std::size_t i = 1; i < s.size(); ++i) {
        CHECK(s.risk[i] <= abar / (2.0 * s.t[i]) + 3.0 * s.risk_stderr[i]);
    }
    CHECK(s.risk.back() < 0.1 * s.risk.front());
}
