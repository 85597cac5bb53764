#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "vbd/metrics.hpp"
#include "vbd/vba.hpp"

namespace vbd {

double softplus(double x);
double softplus_inverse(double y);  // ln(e^y - 1), y > 0
double sigmoid(double x);

/// Wavelet-based noise level estimator: median absolute first-level Haar
/// diagonal detail coefficient (orthonormal normalization) divided by 0.6745.
/// Odd trailing rows/columns are cropped.
double noise_std_estimate(const ImagePlane& y);

/// Learnable per-layer scalars: xi^k = Softplus(theta_xi) and
/// sigma^k = Softplus(rho) sigma_hat + Softplus(tau), beta^k = sigma^k -2.
struct LayerParams {
  double theta_xi = 0.0;
  double rho = 0.0;
  double tau = 0.0;
};

/// Optional feature-affine xi map for studying kernel dependence:
/// xi = Softplus(theta_xi + w . [l2 norm, entropy, max]). Disabled (and all
/// weights zero) by default; the analytic gradient path requires it off.
struct XiFeatureMap {
  bool enabled = false;
  double w_norm = 0.0, w_entropy = 0.0, w_max = 0.0;
};

double xi_map(const LayerParams& layer, const Vec& h_current,
              const XiFeatureMap& features = {});
double beta_map(const LayerParams& layer, double sigma_hat);

struct UnrolledNet {
  std::vector<LayerParams> layers;
  VbaConfig config;  // template; the xi/beta fields are ignored by the net
  bool learn_xi = true;
  bool learn_noise = true;
  XiFeatureMap xi_features;
};

struct LayerContext {
  double sigma_hat = 0.0;
  std::optional<double> fixed_beta;  // known-sigma mode: beta = sigma^-2
};

/// One unrolled layer: evaluate the hyperparameter maps on the current
/// state, then perform exactly one sweep of the four updates.
SweepInfo layer_forward(VbaState& state, const LayerParams& layer,
                        const VbaConfig& config, const ImagePlane& y,
                        const LayerContext& ctx, const XiFeatureMap& features = {});

struct ForwardTrace {
  std::vector<Vec> kernels;  // h after each layer, length K
  std::vector<double> xi, beta;
  double sigma_hat = 0.0;
};

struct NetOutput {
  ImagePlane x;
  Vec z;
  Vec h;
  Mat cov_z;
  ForwardTrace trace;
};

NetOutput net_forward(const UnrolledNet& net, const ImagePlane& y,
                      std::optional<double> known_sigma = std::nullopt);

// ---- gradients -----------------------------------------------------------

enum class LossKind { KernelMse, SsimLoss };

struct LossTarget {
  Vec h_true;          // kernel loss
  ImagePlane x_true;   // image loss
};

double evaluate_loss(LossKind kind, const VbaState& final_state, const VbaConfig& config,
                     const LossTarget& target);

/// Parameters packed layer-major: [theta_0, rho_0, tau_0, theta_1, ...].
Vec pack_params(const UnrolledNet& net);
void set_params(UnrolledNet& net, const Vec& params);

/// Forward loss as a function of packed parameters (used by fd_gradient and
/// the optimizers). `layer_count` <= K truncates the net (greedy stages).
double net_loss(const UnrolledNet& net, const ImagePlane& y, LossKind kind,
                const LossTarget& target, std::optional<double> known_sigma,
                int layer_count = -1);

/// Central differences, per coordinate, step eps * max(1, |p_i|).
Vec fd_gradient(const std::function<double(const Vec&)>& loss_fn, const Vec& params,
                double epsilon = 1e-4);

struct GradOptions {
  int adjoint_iterations = 60;       // CG budget for the adjoint solves
  double adjoint_tolerance = 1e-10;
  double fallback_threshold = 1e-3;  // adjoint residual above this -> FD fallback
  double fd_epsilon = 1e-4;
  int backprop_depth = -1;  // how many trailing layers to differentiate (-1 = all)
};

struct GradResult {
  Vec grad;  // 3K entries, layer-major
  double loss = 0.0;
  bool fd_fallback = false;
};

/// Reverse-mode gradient through the unrolled layers using the explicit
/// update Jacobians; every CG solve is differentiated implicitly at its
/// returned iterate by an adjoint solve with the same operator. Layers whose
/// adjoint solve fails to converge fall back to central differences.
GradResult analytic_gradient(const UnrolledNet& net, const ImagePlane& y, LossKind kind,
                             const LossTarget& target,
                             std::optional<double> known_sigma = std::nullopt,
                             int layer_count = -1, const GradOptions& options = {});

}  // namespace vbd
