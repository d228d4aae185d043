#include <cmath>
#include <cstdint>

#include <doctest.h>

#include "contflow/flow_models.hpp"

using namespace contflow;
using namespace contflow::flow;
using core::Activation;
using core::SeededRng;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

FlowModel random_model(int d, int D, int L, int m, SeededRng& rng, double amp = 1.0, bool shared = false) {
    FlowModel model = FlowModel::random_feature(d, D, L, m, rng, shared);
    for (auto& layer : model.layers()) layer.a = amp * rng.gaussian(m, D);
    return model;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

// Scaled ResNet written with explicit loops: forward, loss and backprop.
struct LoopResNet {
    MatrixXd V;
    std::vector<MatrixXd> A, B;
    std::vector<VectorXd> C;
    Activation act;

    int L() const { return static_cast<int>(A.size()); }
    int m() const { return static_cast<int>(A[0].rows()); }
    int D() const { return static_cast<int>(V.rows()); }

    std::vector<VectorXd> states(const VectorXd& x) const {
        VectorXd xt(x.size() + 1);
        xt << x, 1.0;
        std::vector<VectorXd> z{V * xt};
        for (int l = 0; l < L(); ++l) {
            VectorXd next = z.back();
            for (int k = 0; k < m(); ++k) {
                double pre = C[l](k);
                for (int j = 0; j < D(); ++j) pre += B[l](k, j) * z.back()(j);
                for (int j = 0; j < D(); ++j) next(j) += A[l](k, j) * act.value(pre) / (L() * m());
            }
            z.push_back(next);
        }
        return z;
    }

    void gd_step(const MatrixXd& x, const VectorXd& y, double step) {
        std::vector<MatrixXd> gA(L()), gB(L());
        std::vector<VectorXd> gC(L());
        for (int l = 0; l < L(); ++l) {
            gA[l] = MatrixXd::Zero(m(), D());
            gB[l] = MatrixXd::Zero(m(), D());
            gC[l] = VectorXd::Zero(m());
        }
        const double n = static_cast<double>(x.rows());
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            const auto z = states(x.row(i).transpose());
            VectorXd p = VectorXd::Constant(D(), z.back().sum() - y(i));
            for (int l = L() - 1; l >= 0; --l) {
                VectorXd prev = p;
                for (int k = 0; k < m(); ++k) {
                    double pre = C[l](k);
                    for (int j = 0; j < D(); ++j) pre += B[l](k, j) * z[l](j);
                    const double ap = A[l].row(k).dot(p);
                    const double scale = 1.0 / (L() * m() * n);
                    gA[l].row(k) += scale * act.value(pre) * p.transpose();
                    gB[l].row(k) += scale * ap * act.derivative(pre) * z[l].transpose();
                    gC[l](k) += scale * ap * act.derivative(pre);
                    prev += (ap * act.derivative(pre) / (L() * m())) * B[l].row(k).transpose();
                }
                p = prev;
            }
        }
        for (int l = 0; l < L(); ++l) {
            A[l] -= step * L() * m() * gA[l];
            B[l] -= step * L() * m() * gB[l];
            C[l] -= step * L() * m() * gC[l];
        }
    }
};

}  // namespace

TEST_CASE("forward pass") {
    SeededRng rng(1);
    FlowModel zero = FlowModel::random_feature(2, 4, 3, 5, rng);
    const MatrixXd x = rng.gaussian(6, 2);
    AdjointTrajectory traj = forward(zero, x);
    REQUIRE(traj.z.size() == 4);
    CHECK(traj.z.back() == traj.z.front());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        CHECK(traj.output(i) == doctest::Approx(x(i, 0) + x(i, 1) + 1.0).epsilon(1e-15));
    }
    const VectorXd y = rng.gaussian(6, 1).col(0);
    backward(zero, traj, y);
    for (int l = 0; l <= 3; ++l) CHECK(traj.p[l] == traj.p[3]);

    MatrixXd lift(1, 2);
    lift << 0.5, -0.25;
    FlowLayer layer{MatrixXd::Constant(1, 1, 1.5), MatrixXd::Constant(1, 1, 0.8), VectorXd::Constant(1, 0.1)};
    const FlowModel hand(lift, {layer}, Activation::make_tanh());
    MatrixXd x1(1, 1);
    x1 << 2.0;
    const double z0 = 0.5 * 2.0 - 0.25;
    CHECK(forward(hand, x1).output(0) == doctest::Approx(z0 + 1.5 * std::tanh(0.8 * z0 + 0.1)).epsilon(1e-15));
    CHECK_FALSE(hand.lift_has_full_rank());
    CHECK_THROWS_AS(FlowModel::random_feature(3, 3, 2, 2, rng), InvalidParameter);
    CHECK(FlowModel::random_feature(3, 6, 2, 2, rng).lift_has_full_rank());
}

TEST_CASE("tau refinement converges at first order") {
    SeededRng rng(2);
    const int d = 2, D = 3, m = 6;
    const FlowModel base = FlowModel::random_feature(d, D, 1, m, rng);
    const MatrixXd alpha = rng.gaussian(m, D), beta = rng.gaussian(m, D);
    const MatrixXd x = rng.gaussian(4, d);
    auto output = [&](int L) {
        std::vector<FlowLayer> layers;
        for (int l = 0; l < L; ++l) {
            const double tau = static_cast<double>(l) / L;
            layers.push_back({alpha + std::sin(2 * M_PI * tau) * beta, base.layers()[0].b, base.layers()[0].c});
        }
        return forward(FlowModel(base.lift(), layers, base.activation()), x).output;
    };
    std::vector<double> diffs;
    for (int L : {8, 16, 32, 64}) diffs.push_back((output(L) - output(2 * L)).cwiseAbs().maxCoeff());
    for (std::size_t i = 1; i < diffs.size(); ++i) CHECK(std::log2(diffs[i - 1] / diffs[i]) >= 0.9);
}

TEST_CASE("discrete adjoint") {
    SeededRng rng(3);
    const int d = 2, D = 3, L = 4, m = 3;
    const FlowModel model = random_model(d, D, L, m, rng, 1.5);
    const MatrixXd x = rng.gaussian(1, d);
    const VectorXd y = rng.gaussian(1, 1).col(0);
    AdjointTrajectory traj = forward(model, x);
    backward(model, traj, y);
    CHECK(traj.p[L] == traj.residual(0) * MatrixXd::Ones(1, D));

    // z^0 = (x, 1), so dloss/dx equals the first d entries of p^0.
    const double eps = 1e-6;
    for (int j = 0; j < d; ++j) {
        MatrixXd xp = x, xm = x;
        xp(0, j) += eps;
        xm(0, j) -= eps;
        const double fd = (batch_risk(model, xp, y) - batch_risk(model, xm, y)) / (2 * eps);
        CHECK(rel_err(fd, traj.p[0](0, j)) < 1e-6);
    }

    const MatrixXd xs = rng.gaussian(20, d);
    const VectorXd ys = rng.gaussian(20, 1).col(0);
    AdjointTrajectory batch = forward(model, xs);
    backward(model, batch, ys);
    const std::vector<double> bound = costate_bound(model);
    for (int l = 0; l <= L; ++l) {
        for (Eigen::Index i = 0; i < xs.rows(); ++i) {
            CHECK(batch.p[l].row(i).norm() <= batch.p[L].row(i).norm() * bound[l] * (1 + 1e-14));
        }
    }
    CHECK(bound[0] > 1.0);
}

TEST_CASE("amplitude and particle gradients match finite differences") {
    SeededRng rng(4);
    for (int trial = 0; trial < 3; ++trial) {
        const int d = 1, D = 2, L = 3, m = 2;
        FlowModel model = random_model(d, D, L, m, rng, 2.0);
        const MatrixXd x = rng.gaussian(5, d);
        const VectorXd y = rng.gaussian(5, 1).col(0);
        AdjointTrajectory traj = forward(model, x);
        backward(model, traj, y);
        const FlowGradient g = grad_particles(model, traj);
        const double w = gradient_weight(model);
        const double eps = 1e-6;
        auto check_entry = [&](double& param, double analytic) {
            const double saved = param;
            param = saved + eps;
            const double rp = batch_risk(model, x, y);
            param = saved - eps;
            const double rm = batch_risk(model, x, y);
            param = saved;
            CHECK(rel_err((rp - rm) / (2 * eps), w * analytic) < 1e-6);
        };
        for (int l = 0; l < L; ++l) {
            auto& layer = model.layers()[l];
            for (int k = 0; k < m; ++k) {
                for (int j = 0; j < D; ++j) {
                    check_entry(layer.a(k, j), g.a[l](k, j));
                    check_entry(layer.b(k, j), g.b[l](k, j));
                }
                check_entry(layer.c(k), g.c[l](k));
            }
        }
        const FlowGradient ga = grad_amplitudes(model, traj);
        for (int l = 0; l < L; ++l) CHECK(ga.a[l] == g.a[l]);
        CHECK(ga.b.empty());
    }
}

TEST_CASE("stationary points") {
    SeededRng rng(5);
    const FlowModel zero = FlowModel::random_feature(2, 3, 3, 4, rng);
    const MatrixXd x = rng.gaussian(7, 2);
    const VectorXd y = x.rowwise().sum().array() + 1.0;  // 1 . V x~
    AdjointTrajectory traj = forward(zero, x);
    backward(zero, traj, y);
    const FlowGradient g = grad_particles(zero, traj);
    for (int l = 0; l < 3; ++l) {
        CHECK(g.a[l].isZero(0.0));
        CHECK(g.b[l].isZero(0.0));
        CHECK(g.c[l].isZero(0.0));
    }
    for (double r : pmp_residual(zero, x, y, 0.1, true)) CHECK(r == 0.0);
}

TEST_CASE("layer order matters") {
    SeededRng rng(6);
    const FlowModel model = random_model(2, 3, 2, 4, rng, 3.0);
    std::vector<FlowLayer> swapped{model.layers()[1], model.layers()[0]};
    const FlowModel other(model.lift(), swapped, model.activation());
    const MatrixXd x = rng.gaussian(5, 2);
    CHECK((forward(model, x).output - forward(other, x).output).cwiseAbs().maxCoeff() > 1e-3);
}

TEST_CASE("Hamiltonian") {
    SeededRng rng(7);
    const FlowModel model = random_model(2, 3, 3, 4, rng);
    const MatrixXd x = rng.gaussian(6, 2);
    const VectorXd y = rng.gaussian(6, 1).col(0);
    AdjointTrajectory traj = forward(model, x);
    backward(model, traj, y);
    for (int l = 0; l < 3; ++l) {
        const VectorXd h = hamiltonian(model, traj, l);
        CHECK(hamiltonian(model, traj, l, 2.0 * traj.p[l + 1]) == 2.0 * h);
        CHECK((hamiltonian(model, traj, l, 3.0 * traj.p[l + 1]) - 3.0 * h).cwiseAbs().maxCoeff() <=
              1e-15 * h.cwiseAbs().maxCoeff() * 3.0);
        // dH/dz along the flow is the co-state increment.
        FlowModel scaled = model;
        scaled.layers()[l].a *= 2.0;
        AdjointTrajectory t2 = forward(scaled, x);
        t2.p = traj.p;
        CHECK((hamiltonian(scaled, t2, l, traj.p[l + 1]) - 2.0 * h).cwiseAbs().maxCoeff() <= 1e-14);
    }
    for (double r : pmp_residual(model, x, y)) CHECK(r > 0.0);
    for (double r : pmp_residual(model, x, y, 0.1, true)) CHECK(r > 0.0);
}

TEST_CASE("PMP residual vanishes at a converged realizable solution") {
    SeededRng rng(8);
    const int d = 1, D = 2, L = 2, m = 8, n = 6;
    const FlowModel teacher = random_model(d, D, L, m, rng, 1.0);
    FlowModel student = teacher;
    for (auto& layer : student.layers()) layer.a.setZero();
    const MatrixXd x = rng.gaussian(n, d);
    const VectorXd y = forward(teacher, x).output;
    const double initial = batch_risk(student, x, y);
    for (double r : pmp_residual(student, x, y)) CHECK(r > 1e-4);
    for (int it = 0; it < 20000; ++it) descent_step(student, x, y, 0.5, false);
    CHECK(batch_risk(student, x, y) < 1e-4 * initial);
    for (double r : pmp_residual(student, x, y)) CHECK(r < 1e-4);
}

TEST_CASE("dissipation identity along training") {
    SeededRng rng(9);
    for (bool particles : {false, true}) {
        FlowModel model = random_model(2, 3, 3, 5, rng, 0.5);
        const MatrixXd x = rng.gaussian(12, 2);
        const VectorXd y = rng.gaussian(12, 1).col(0);
        auto discrepancy = [&](double step) {
            FlowModel copy = model;
            double worst = 0.0;
            for (int it = 0; it < 20; ++it) {
                const double before = batch_risk(copy, x, y);
                const double rate = descent_step(copy, x, y, step, particles).dissipation(particles);
                const double measured = (batch_risk(copy, x, y) - before) / step;
                worst = std::max(worst, std::abs(measured + rate) / rate);
            }
            return worst;
        };
        const double coarse = discrepancy(0.02);
        const double fine = discrepancy(0.01);
        CHECK(coarse < 0.1);
        CHECK(fine < 0.6 * coarse);
    }
}

TEST_CASE("train_flow_rf") {
    SeededRng rng(10);
    const int d = 1, D = 2, L = 2, m = 6;
    const FlowModel teacher = random_model(d, D, L, m, rng, 1.0);
    FlowModel student = teacher;
    for (auto& layer : student.layers()) layer.a.setZero();
    const MatrixXd x = rng.gaussian(40, d);
    const VectorXd y = forward(teacher, x).output;
    particles::TrainConfig cfg;
    cfg.step_size = 0.05;
    cfg.steps = 2000;
    cfg.eval_every = 20;
    cfg.eval_batch = 2;
    const auto source = particles::LabeledSource::fixed(x, y);
    const FlowRiskSeries s = train_flow_rf(student, source, cfg);
    for (std::size_t i = 1; i < s.size(); ++i) CHECK(s.risk.risk[i] <= s.risk.risk[i - 1]);
    CHECK(s.amplitude_norm_sq.back() > 0.0);
    CHECK(s.layer_amplitude_norm_sq.back().size() == L);
    CHECK(std::isnan(s.dissipation.front()));
    CHECK(s.dissipation.back() > 0.0);

}

TEST_CASE("flow random-feature risk decays like 1/t on a realizable target") {
    // The teacher puts equal weight on every eigenvector of the amplitude
    // Gram matrix at a = 0. Inputs are Gaussian with standard deviation 10 so that the
    // tanh kernel spectrum is dense enough for a power law to show.
    for (std::uint64_t seed : {1, 2, 3}) {
        SeededRng rng(seed);
        const int D = 2, L = 2, m = 20, n = 200;
        FlowModel student = FlowModel::random_feature(1, D, L, m, rng);
        const MatrixXd x = 10.0 * rng.gaussian(n, 1);
        const AdjointTrajectory start = forward(student, x);
        MatrixXd features(n, L * m);
        for (int l = 0; l < L; ++l) {
            features.middleCols(l * m, m) = student.activation().apply(start.pre[l].array()).matrix();
        }
        Eigen::SelfAdjointEigenSolver<MatrixXd> eig(features.transpose() * features / n);
        const VectorXd alpha = 0.3 * L * m * eig.eigenvectors().rowwise().sum();
        FlowModel teacher = student;
        for (int l = 0; l < L; ++l) teacher.layers()[l].a = alpha.segment(l * m, m).replicate(1, D) / D;
        const VectorXd y = forward(teacher, x).output;

        particles::TrainConfig cfg;
        cfg.step_size = 1.0;
        cfg.steps = 10000;
        cfg.eval_every = 0;
        cfg.eval_log_points = 30;
        cfg.eval_batch = 2;
        const FlowRiskSeries s = train_flow_rf(student, particles::LabeledSource::fixed(x, y), cfg);
        const double t_end = s.risk.t.back();
        const double slope = core::loglog_slope(s.risk.t, s.risk.risk, t_end / 10.0, t_end);
        MESSAGE("seed " << seed << " final-decade slope " << slope);
        CHECK(slope <= -0.7);
    }
}

TEST_CASE("single-layer reductions to particle flows") {
    SeededRng rng(11);
    // Random-feature flow with L = 1 is random-feature training of the
    // amplitudes 1 . a_k on the lifted inputs with labels y - 1 . V x~; all
    // D components move together, so the particle step is D times larger.
    const int d = 2, D = 4, m = 5, n = 9;
    FlowModel model = FlowModel::random_feature(d, D, 1, m, rng);
    const MatrixXd x = rng.gaussian(n, d);
    const VectorXd y = rng.gaussian(n, 1).col(0);
    const MatrixXd z0 = forward(model, x).z[0];
    const VectorXd shifted = y - z0.rowwise().sum();

    particles::Ensemble e;
    e.a = VectorXd::Zero(m);
    e.b.resize(m, D + 1);
    e.b << model.layers()[0].b, model.layers()[0].c;
    const core::RidgeFeature feature{Activation::make_tanh(), D, true};

    particles::TrainConfig cfg;
    cfg.step_size = 0.3;
    cfg.steps = 50;
    cfg.eval_every = 5;
    cfg.eval_batch = 2;
    particles::Ensemble e_final;
    const auto ps = particles::train(particles::Flavor::random_feature, e, particles::LabeledSource::fixed(z0, shifted),
                                     feature, [&] {
                                         auto c = cfg;
                                         c.step_size = cfg.step_size * D;
                                         return c;
                                     }(),
                                     &e_final);
    const FlowRiskSeries fs = train_flow_rf(model, particles::LabeledSource::fixed(x, y), cfg);
    REQUIRE(ps.size() == fs.size());
    for (std::size_t i = 0; i < ps.size(); ++i) CHECK(rel_err(ps.risk[i], fs.risk.risk[i]) < 1e-10);
    CHECK((model.layers()[0].a.rowwise().sum() - e_final.a).cwiseAbs().maxCoeff() < 1e-10);

    // Flow network with L = 1 and D = 1 is the two-layer particle method on
    // the lifted scalar input, with (b_k, c_k) as the bias-extended weights.
    MatrixXd lift(1, d + 1);
    lift << 0.7, -0.4, 0.2;
    FlowLayer layer{rng.gaussian(m, 1), rng.gaussian(m, 1), rng.gaussian(m, 1).col(0)};
    FlowModel net(lift, {layer}, Activation::make_tanh());
    const MatrixXd s0 = forward(net, x).z[0];
    particles::Ensemble pe;
    pe.a = layer.a.col(0);
    pe.b.resize(m, 2);
    pe.b << layer.b, layer.c;
    const core::RidgeFeature scalar_feature{Activation::make_tanh(), 1, true};
    for (int it = 0; it < 30; ++it) {
        descent_step(net, x, y, 0.2, true);
        pe = particles::apply_velocity(pe, particles::velocity(particles::Flavor::two_layer, pe, scalar_feature, s0,
                                                               VectorXd(y - s0.col(0))),
                                       0.2);
    }
    CHECK((net.layers()[0].a.col(0) - pe.a).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((net.layers()[0].b.col(0) - pe.b.col(0)).cwiseAbs().maxCoeff() < 1e-10);
    CHECK((net.layers()[0].c - pe.b.col(1)).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("flow network training equals scaled ResNet gradient descent") {
    SeededRng rng(12);
    const int d = 2, D = 3, L = 4, m = 3, n = 8;
    FlowModel model = random_model(d, D, L, m, rng, 1.0);
    for (auto& layer : model.layers()) layer.b *= 1.5;
    LoopResNet loop{model.lift(), {}, {}, {}, Activation::make_tanh()};
    for (const auto& layer : model.layers()) {
        loop.A.push_back(layer.a);
        loop.B.push_back(layer.b);
        loop.C.push_back(layer.c);
    }
    const MatrixXd x = rng.gaussian(n, d);
    const VectorXd y = rng.gaussian(n, 1).col(0);
    for (int it = 0; it < 10; ++it) {
        descent_step(model, x, y, 0.1, true);
        loop.gd_step(x, y, 0.1);
    }
    for (int l = 0; l < L; ++l) {
        CHECK((model.layers()[l].a - loop.A[l]).cwiseAbs().maxCoeff() < 1e-12);
        CHECK((model.layers()[l].b - loop.B[l]).cwiseAbs().maxCoeff() < 1e-12);
        CHECK((model.layers()[l].c - loop.C[l]).cwiseAbs().maxCoeff() < 1e-12);
    }

    particles::TrainConfig cfg;
    cfg.steps = 0;
    cfg.eval_batch = 2;
    const FlowRiskSeries s = train_flow_net(model, particles::LabeledSource::fixed(x, y), cfg);
    CHECK(s.size() == 1);

    particles::TrainConfig wild;
    wild.step_size = 1e200;
    wild.steps = 5;
    wild.eval_batch = 2;
    CHECK_THROWS_AS(train_flow_net(model, particles::LabeledSource::fixed(x, y), wild), Divergence);
}
