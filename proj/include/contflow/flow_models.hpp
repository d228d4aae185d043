#ifndef CONTFLOW_FLOW_MODELS_HPP
#define CONTFLOW_FLOW_MODELS_HPP

#include <vector>

#include <Eigen/Dense>

#include "contflow/core_math.hpp"
#include "contflow/particle_flows.hpp"

namespace contflow::flow {

/// One tau-slice of a flow-based model: m particles, each with an amplitude
/// a_k in R^D and a ridge feature sigma(b_k . z + c_k).
struct FlowLayer {
    Eigen::MatrixXd a;  // m x D
    Eigen::MatrixXd b;  // m x D
    Eigen::VectorXd c;  // m
};

/// Continuous ResNet discretized by forward Euler on a uniform tau grid:
///   z^0 = V x~,  z^{l+1} = z^l + (1/L)(1/m) sum_k a_k^l sigma(b_k^l . z^l + c_k^l),
///   f(x) = 1 . z^L.
/// The flow-based random feature model freezes (b, c) and trains a; the
/// flow-based network trains every particle.
class FlowModel {
public:
    FlowModel(Eigen::MatrixXd lift, std::vector<FlowLayer> layers, core::Activation activation);

    /// Random-feature model with tanh features: (b_k, c_k) uniform on S^D,
    /// amplitudes zero, V = [I; 0] with D >= d + 1. With `shared_features`
    /// every layer reuses the first layer's features; otherwise each layer
    /// draws its own m features.
    static FlowModel random_feature(int d, int D, int L, int m, core::SeededRng& rng,
                                    bool shared_features = false);

    int input_dim() const { return static_cast<int>(lift_.cols()) - 1; }
    int state_dim() const { return static_cast<int>(lift_.rows()); }
    int depth() const { return static_cast<int>(layers_.size()); }
    int width() const { return layers_.empty() ? 0 : static_cast<int>(layers_.front().a.rows()); }

    const Eigen::MatrixXd& lift() const { return lift_; }
    const core::Activation& activation() const { return activation_; }
    const std::vector<FlowLayer>& layers() const { return layers_; }
    std::vector<FlowLayer>& layers() { return layers_; }

    /// rank(V) = d + 1.
    bool lift_has_full_rank() const;
    bool all_finite() const;
    /// Discretized int int ||a_tau(w)||^2 d pi_tau d tau = (1/L) sum_l (1/m) sum_k ||a_k^l||^2.
    double amplitude_norm_sq() const;
    double layer_amplitude_norm_sq(int layer) const;

private:
    void validate() const;

    Eigen::MatrixXd lift_;
    std::vector<FlowLayer> layers_;
    core::Activation activation_;
};

/// States and co-states for a batch: z[l] and p[l] are n x D for l = 0..L,
/// pre[l] (n x m) holds the feature arguments of layer l.
struct AdjointTrajectory {
    std::vector<Eigen::MatrixXd> z;
    std::vector<Eigen::MatrixXd> p;
    std::vector<Eigen::MatrixXd> pre;
    Eigen::VectorXd output;    // 1 . z^L
    Eigen::VectorXd residual;  // output - y, set by backward

    bool has_costate() const { return !p.empty(); }
};

/// Forward Euler pass for a batch x (n x d). Throws Divergence (step 0) on a
/// non-finite state.
AdjointTrajectory forward(const FlowModel& model, const Eigen::MatrixXd& x);

/// Discrete adjoint of the forward recursion for the loss (1/2)(f - y)^2,
/// seeded with p^L = (1 . z^L - y) 1:
///   p^l = p^{l+1} + (1/(Lm)) sum_k (a_k . p^{l+1}) sigma'(b_k . z^l + c_k) b_k.
void backward(const FlowModel& model, AdjointTrajectory& traj, const Eigen::VectorXd& y);

/// Batch risk (1/2) mean (f - y)^2.
double batch_risk(const FlowModel& model, const Eigen::MatrixXd& x, const Eigen::VectorXd& y);

/// Per-layer gradients of the batch risk in the functional scaling: every
/// entry equals L m times the partial derivative of the discretized batch
/// risk, so g_k^l = mean_x p^{l+1} sigma(b_k^l . z^l + c_k^l) for the
/// amplitudes.
struct FlowGradient {
    std::vector<Eigen::MatrixXd> a;  // per layer, m x D
    std::vector<Eigen::MatrixXd> b;  // per layer, m x D
    std::vector<Eigen::VectorXd> c;  // per layer, m

    /// sum_l (1/L) mean_k ||g_k^l||^2 over the selected blocks: the
    /// dissipation rate -dR/dt of the gradient flow.
    double dissipation(bool particles) const;
};

/// Amplitude gradients only (b and c entries left empty).
FlowGradient grad_amplitudes(const FlowModel& model, const AdjointTrajectory& traj);
/// Gradients with respect to every particle parameter.
FlowGradient grad_particles(const FlowModel& model, const AdjointTrajectory& traj);

/// The weight that converts FlowGradient entries into partial derivatives of
/// the discretized risk: 1 / (L m).
double gradient_weight(const FlowModel& model);

/// Growth factors of the co-state, returned for l = 0..L:
///   ||p_i^l|| <= ||p_i^L|| prod_{j >= l} (1 + (1/(Lm)) sum_k ||a_k^j|| ||b_k^j||),
/// using sup |sigma'| <= 1, which holds for every supported activation.
std::vector<double> costate_bound(const FlowModel& model);

/// Hamiltonian of layer l per input: H_i = p_i^{l+1} . (1/m) sum_k a_k sigma(b_k . z_i^l + c_k).
Eigen::VectorXd hamiltonian(const FlowModel& model, const AdjointTrajectory& traj, int layer);
/// Same Hamiltonian with an explicit co-state matrix in place of p^{l+1}.
Eigen::VectorXd hamiltonian(const FlowModel& model, const AdjointTrajectory& traj, int layer,
                            const Eigen::MatrixXd& costate);

/// Per layer: mean_x H(theta_l) minus the minimum of mean_x H over a
/// perturbation family of size kappa: amplitude rescalings by 1 +- kappa,
/// an amplitude shift of norm kappa along the negative amplitude gradient,
/// and (when `particles`) a feature shift of norm kappa along the negative
/// feature gradient. Zero at a stationary point for the amplitude family.
std::vector<double> pmp_residual(const FlowModel& model, const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                 double kappa = 0.1, bool particles = false);

/// Series from flow training: the particle RiskSeries schema plus per-layer
/// amplitude norms and the discretized amplitude L2 norm.
struct FlowRiskSeries {
    particles::RiskSeries risk;
    std::vector<double> amplitude_norm_sq;
    std::vector<std::vector<double>> layer_amplitude_norm_sq;
    std::vector<double> dissipation;  // gradient dissipation on the last training batch

    std::size_t size() const { return risk.size(); }
};

/// Gradient descent on the amplitudes, a <- a - step * g (model frozen
/// features). Batches and evaluation samples follow the particle training
/// streams of cfg.seed. Throws Divergence on non-finite parameters.
FlowRiskSeries train_flow_rf(FlowModel& model, const particles::LabeledSource& source,
                             const particles::TrainConfig& cfg);

/// Gradient descent on every particle parameter (a, b, c) of every layer.
FlowRiskSeries train_flow_net(FlowModel& model, const particles::LabeledSource& source,
                              const particles::TrainConfig& cfg);

/// One descent step on a fixed batch; returns the batch gradient used.
FlowGradient descent_step(FlowModel& model, const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double step,
                          bool particles);

}  // namespace contflow::flow

#endif  // CONTFLOW_FLOW_MODELS_HPP
