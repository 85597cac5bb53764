#include "vbd/unrolled.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

namespace vbd {

double softplus(double x) {
  // overflow-safe: ln(1+e^x) = max(x,0) + ln(1+e^-|x|)
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double softplus_inverse(double y) {
  if (y <= 0.0) throw std::invalid_argument("softplus_inverse: argument must be positive");
  if (y > 30.0) return y;  // e^y - 1 ~ e^y beyond double resolution
  return std::log(std::expm1(y));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double noise_std_estimate(const ImagePlane& y) {
  const int H = y.height & ~1, W = y.width & ~1;  // crop odd trailing row/column
  if (H < 2 || W < 2)
    throw std::invalid_argument("noise_std_estimate: image must be at least 2x2");

  std::vector<double> coeffs;
  coeffs.reserve(static_cast<size_t>(H / 2) * (W / 2));
  for (int i = 0; i < H; i += 2)
    for (int j = 0; j < W; j += 2) {
      const double hh = 0.5 * (y.at(i, j) - y.at(i, j + 1) - y.at(i + 1, j) +
                               y.at(i + 1, j + 1));
      coeffs.push_back(std::abs(hh));
    }

  const size_t n = coeffs.size();
  auto mid = coeffs.begin() + n / 2;
  std::nth_element(coeffs.begin(), mid, coeffs.end());
  double median = *mid;
  if (n % 2 == 0) {
    median = 0.5 * (median + *std::max_element(coeffs.begin(), mid));
  }
  return median / 0.6745;
}

double xi_map(const LayerParams& layer, const Vec& h_current, const XiFeatureMap& features) {
  double arg = layer.theta_xi;
  if (features.enabled) {
    const double l2 = h_current.norm();
    const double hmax = h_current.size() > 0 ? h_current.maxCoeff() : 0.0;
    const Vec abs_h = h_current.cwiseAbs();
    const double mass = abs_h.sum();
    double entropy = 0.0;
    if (mass > 0.0)
      for (Eigen::Index i = 0; i < abs_h.size(); ++i)
        if (abs_h[i] > 0.0) {
          const double p = abs_h[i] / mass;
          entropy -= p * std::log(p);
        }
    arg += features.w_norm * l2 + features.w_entropy * entropy + features.w_max * hmax;
  }
  return softplus(arg);
}

double beta_map(const LayerParams& layer, double sigma_hat) {
  if (sigma_hat < 0.0) throw std::invalid_argument("beta_map: sigma_hat must be >= 0");
  const double sigma = softplus(layer.rho) * sigma_hat + softplus(layer.tau);
  return 1.0 / (sigma * sigma);
}

SweepInfo layer_forward(VbaState& state, const LayerParams& layer, const VbaConfig& config,
                        const ImagePlane& y, const LayerContext& ctx,
                        const XiFeatureMap& features) {
  const Vec h = kernel_from_z(config.model, state.kernel.mean);
  const double xi = xi_map(layer, h, features);
  const double beta = ctx.fixed_beta ? *ctx.fixed_beta : beta_map(layer, ctx.sigma_hat);
  return vba_sweep(state, config, xi, beta, y);
}

NetOutput net_forward(const UnrolledNet& net, const ImagePlane& y,
                      std::optional<double> known_sigma) {
  if (net.layers.empty()) throw std::invalid_argument("net_forward: net has no layers");

  LayerContext ctx;
  if (known_sigma) {
    ctx.fixed_beta = 1.0 / (*known_sigma * *known_sigma);
  } else {
    ctx.sigma_hat = noise_std_estimate(y);
  }

  VbaState state = vba_init(y, net.config);
  NetOutput out;
  out.trace.sigma_hat = ctx.sigma_hat;
  for (const LayerParams& layer : net.layers) {
    const Vec h_in = kernel_from_z(net.config.model, state.kernel.mean);
    const double xi = xi_map(layer, h_in, net.xi_features);
    const double beta = ctx.fixed_beta ? *ctx.fixed_beta : beta_map(layer, ctx.sigma_hat);
    vba_sweep(state, net.config, xi, beta, y);
    out.trace.kernels.push_back(kernel_from_z(net.config.model, state.kernel.mean));
    out.trace.xi.push_back(xi);
    out.trace.beta.push_back(beta);
  }

  out.x = state.image.mean;
  out.z = state.kernel.mean;
  out.h = out.trace.kernels.back();
  out.cov_z = state.kernel.cov;
  return out;
}

double evaluate_loss(LossKind kind, const VbaState& final_state, const VbaConfig& config,
                     const LossTarget& target) {
  switch (kind) {
    case LossKind::KernelMse:
      return kernel_mse(kernel_from_z(config.model, final_state.kernel.mean), target.h_true);
    case LossKind::SsimLoss:
      return 1.0 - ssim(final_state.image.mean, target.x_true);
  }
  throw std::invalid_argument("evaluate_loss: unknown loss");
}

Vec pack_params(const UnrolledNet& net) {
  Vec params(3 * net.layers.size());
  for (size_t k = 0; k < net.layers.size(); ++k) {
    params[3 * k + 0] = net.layers[k].theta_xi;
    params[3 * k + 1] = net.layers[k].rho;
    params[3 * k + 2] = net.layers[k].tau;
  }
  return params;
}

void set_params(UnrolledNet& net, const Vec& params) {
  if (params.size() != static_cast<Eigen::Index>(3 * net.layers.size()))
    throw std::invalid_argument("set_params: wrong parameter count");
  for (size_t k = 0; k < net.layers.size(); ++k) {
    net.layers[k].theta_xi = params[3 * k + 0];
    net.layers[k].rho = params[3 * k + 1];
    net.layers[k].tau = params[3 * k + 2];
  }
}

double net_loss(const UnrolledNet& net, const ImagePlane& y, LossKind kind,
                const LossTarget& target, std::optional<double> known_sigma,
                int layer_count) {
  const int K = layer_count < 0 ? static_cast<int>(net.layers.size()) : layer_count;
  if (K < 1 || K > static_cast<int>(net.layers.size()))
    throw std::invalid_argument("net_loss: bad layer count");

  LayerContext ctx;
  if (known_sigma)
    ctx.fixed_beta = 1.0 / (*known_sigma * *known_sigma);
  else
    ctx.sigma_hat = noise_std_estimate(y);

  VbaState state = vba_init(y, net.config);
  for (int k = 0; k < K; ++k)
    layer_forward(state, net.layers[k], net.config, y, ctx, net.xi_features);
  return evaluate_loss(kind, state, net.config, target);
}

Vec fd_gradient(const std::function<double(const Vec&)>& loss_fn, const Vec& params,
                double epsilon) {
  Vec grad(params.size());
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double step = epsilon * std::max(1.0, std::abs(params[i]));
    Vec p = params;
    p[i] = params[i] + step;
    const double up = loss_fn(p);
    p[i] = params[i] - step;
    const double down = loss_fn(p);
    if (!std::isfinite(up) || !std::isfinite(down))
      throw numerical_error("fd_gradient: non-finite loss");
    grad[i] = (up - down) / (2.0 * step);
  }
  return grad;
}

// ---- reverse mode through the unrolled layers ------------------------------

namespace {

struct LayerTape {
  VbaState in;
  VbaState out;
  double xi = 0.0, beta = 0.0;
};

struct StateAdjoint {
  Arr x, delta, lambda;  // N each
  Vec z;                 // P
  Mat Cz;                // P x P
  double b = 0.0;        // gamma rate

  StateAdjoint(int pixels, int P)
      : x(Arr::Zero(pixels)),
        delta(Arr::Zero(pixels)),
        lambda(Arr::Zero(pixels)),
        z(Vec::Zero(P)),
        Cz(Mat::Zero(P, P)) {}
};

// Columns p = 1..P of K_p x, as an N x P matrix.
Mat kp_matrix(const KernelModel& model, const ImagePlane& x) {
  Mat out(x.pixels(), model.P);
  for (int p = 1; p <= model.P; ++p) out.col(p - 1) = apply_Kp(model, p, x).data.matrix();
  return out;
}

// Backward pass of one sweep. Consumes the adjoint of the out-state and
// replaces it with the adjoint of the in-state; accumulates (xi, beta) grads.
void backward_layer(const LayerTape& tape, const VbaConfig& cfg, const ImagePlane& y,
                    const GradOptions& opt, StateAdjoint& adj, double& xi_grad,
                    double& beta_grad, bool& adjoint_converged) {
  const KernelModel& model = cfg.model;
  const int P = model.P;
  const int H = y.height, W = y.width;
  const double kappa = cfg.prior.kappa;
  const double beta = tape.beta;

  const ImagePlane& x1 = tape.out.image.mean;
  const Arr& delta1 = tape.out.image.cov_diag;
  const Vec& z1 = tape.out.kernel.mean;
  const Mat& Cz1 = tape.out.kernel.cov;
  const Arr& lambda1 = tape.out.lambda;

  double xi_a = 0.0, beta_a = 0.0;

  // gamma update: b1 = sum lambda1^kappa + eta
  Arr lambda1_a = adj.lambda + adj.b * kappa * lambda1.pow(kappa - 1.0);

  // lambda update: lambda1 = |D x1|^2 blocks + trace term, floored
  lambda1_a *= (lambda1 > cfg.lambda_floor).cast<double>();
  Arr x1_a = adj.x;
  Arr delta1_a = adj.delta;
  {
    ImageGradients g = apply_D(x1);
    g.dh *= 2.0 * lambda1_a;
    g.dv *= 2.0 * lambda1_a;
    x1_a += apply_D_adjoint(g, H, W).data;
    delta1_a += dtwd_diag(lambda1_a, H, W);  // adjoint of the trace stencil
  }

  // kernel posterior: Cz1 = (beta B + xi L)^{-1}, z1 = Cz1 (beta a + xi L mu)
  Mat V_all(x1.pixels(), P + 1);  // columns K_p x1, p = 0..P
  for (int p = 0; p <= P; ++p) V_all.col(p) = apply_Kp(model, p, x1).data.matrix();
  if (P > 0) {
    const KernelStats stats = compute_kernel_stats(tape.out.image, model, y);

    const Vec s_r = Cz1 * adj.z;
    Mat M_a = -s_r * z1.transpose() - Cz1 * adj.Cz * Cz1;
    const Vec r_a = s_r;

    beta_a += (M_a.array() * stats.B.array()).sum() + r_a.dot(stats.a);
    xi_a += (M_a.array() * cfg.prior.L.array()).sum() + r_a.dot(cfg.prior.L * cfg.prior.mu);
    const Mat B_a = beta * M_a;
    const Vec a_a = beta * r_a;

    // stats: B = sum(delta) T^T T + Vp^T Vp, B_{p,0} = sum(delta) T^T t + Vp^T v0,
    // a = Vp^T y - B_{.,0}
    const Vec bp0_a = -a_a;
    double sum_delta_a = (B_a.array() * model.TtT.array()).sum() + bp0_a.dot(model.Tt_t);
    delta1_a += sum_delta_a;

    const auto Vp = V_all.rightCols(P);
    Mat V_a = Mat::Zero(x1.pixels(), P + 1);
    V_a.rightCols(P) = Vp * (B_a + B_a.transpose());
    V_a.rightCols(P).noalias() += y.data.matrix() * a_a.transpose();
    V_a.rightCols(P).noalias() += V_all.col(0) * bp0_a.transpose();
    V_a.col(0) = Vp * bp0_a;

    ImagePlane col(H, W);
    for (int p = 0; p <= P; ++p) {
      col.data = V_a.col(p).array();
      x1_a += apply_Kp_adjoint(model, p, col).data;
    }
  }

  // image update, mean: x1 = CG(P, beta H0^T y); implicit differentiation
  const Vec h0 = kernel_from_z(model, tape.in.kernel.mean);
  const Vec h0_flip = flip_kernel(h0, model.side);
  const Arr& lambda0 = tape.in.lambda;
  const Arr w0 = majorant_weights(lambda0, kappa);
  const double gamma0 = tape.in.gamma.mean();

  ImagePrecision precision(tape.in, cfg, beta);
  Arr s = Arr::Zero(x1.pixels());
  const CgResult adj_cg = cg_solve([&](const Arr& v) { return precision.apply(v); }, x1_a, s,
                                   opt.adjoint_iterations, opt.adjoint_tolerance);
  adjoint_converged = adj_cg.rel_residual <= opt.fallback_threshold;

  const ImagePlane s_img(H, W, s);
  const ImagePlane Hty = circ_conv(y, h0_flip, model.side);
  const ImagePlane Hx1 = circ_conv(x1, h0, model.side);
  const ImagePlane Hs = circ_conv(s_img, h0, model.side);

  // d b = d(beta H0^T y)
  beta_a += (s * Hty.data).sum();

  // -s^T dPrec x1, likelihood block
  {
    ImagePlane like = circ_conv(Hx1, h0_flip, model.side);  // H^T H x1
    if (P > 0) {
      const auto Kx1 = V_all.rightCols(P);
      const Mat W_cov = Kx1 * tape.in.kernel.cov;
      ImagePlane col(H, W);
      for (int p = 1; p <= P; ++p) {
        col.data = W_cov.col(p - 1).array();
        like.data += apply_Kp_adjoint(model, p, col).data;
      }
      const Mat Ks = kp_matrix(model, s_img);
      adj.z = Vec::Zero(P);
      adj.z.noalias() += beta * (Ks.transpose() * y.data.matrix());
      adj.z.noalias() -= beta * (Ks.transpose() * Hx1.data.matrix());
      adj.z.noalias() -= beta * (Kx1.transpose() * Hs.data.matrix());
      adj.Cz = -beta * (Ks.transpose() * Kx1);
    }
    beta_a -= (s * like.data).sum();
  }

  // -s^T dPrec x1, TV block: 2 gamma D^T Lambda D
  double gamma0_a = 0.0;
  Arr w0_a = Arr::Zero(x1.pixels());
  {
    const ImageGradients gs = apply_D(s_img);
    const ImageGradients gx = apply_D(x1);
    const Arr pair = gs.dh * gx.dh + gs.dv * gx.dv;
    gamma0_a -= 2.0 * (w0 * pair).sum();
    w0_a -= 2.0 * gamma0 * pair;
  }

  // image update, covariance: delta1 = 1 / diag(Prec)
  {
    const Arr diag_a = -delta1_a * delta1.square();
    const double diag_sum = diag_a.sum();
    const double cz_gram =
        P > 0 ? (tape.in.kernel.cov.array() * model.TtT.array()).sum() : 0.0;
    beta_a += diag_sum * (h0.squaredNorm() + cz_gram);
    if (P > 0) {
      adj.z.noalias() += (2.0 * beta * diag_sum) * (model.T.transpose() * h0);
      adj.Cz += (beta * diag_sum) * model.TtT;
    }
    gamma0_a += 2.0 * (diag_a * dtwd_diag(w0, H, W)).sum();
    w0_a += 2.0 * gamma0 * lambda_trace_term(diag_a, H, W);
  }

  // map (w0, gamma0) adjoints onto the in-state
  adj.lambda = (kappa == 1.0)
                   ? Arr::Zero(x1.pixels()).eval()
                   : (w0_a * kappa * (kappa - 1.0) * lambda0.pow(kappa - 2.0)).eval();
  adj.b = gamma0_a * (-tape.in.gamma.shape / (tape.in.gamma.rate * tape.in.gamma.rate));

  // warm start and in-state covariance do not reach the converged CG iterate
  adj.x.setZero();
  adj.delta.setZero();

  xi_grad += xi_a;
  beta_grad += beta_a;
}

}  // namespace

GradResult analytic_gradient(const UnrolledNet& net, const ImagePlane& y, LossKind kind,
                             const LossTarget& target, std::optional<double> known_sigma,
                             int layer_count, const GradOptions& options) {
  const int K = layer_count < 0 ? static_cast<int>(net.layers.size()) : layer_count;
  if (K < 1 || K > static_cast<int>(net.layers.size()))
    throw std::invalid_argument("analytic_gradient: bad layer count");

  GradResult result;
  result.grad = Vec::Zero(3 * net.layers.size());

  if (net.xi_features.enabled) {
    // the feature-affine xi map is forward-only; differentiate numerically
    UnrolledNet probe = net;
    result.grad = fd_gradient(
        [&](const Vec& p) {
          set_params(probe, p);
          return net_loss(probe, y, kind, target, known_sigma, K);
        },
        pack_params(net), options.fd_epsilon);
    result.loss = net_loss(net, y, kind, target, known_sigma, K);
    result.fd_fallback = true;
    return result;
  }

  LayerContext ctx;
  double sigma_hat = 0.0;
  if (known_sigma)
    ctx.fixed_beta = 1.0 / (*known_sigma * *known_sigma);
  else
    ctx.sigma_hat = sigma_hat = noise_std_estimate(y);

  // forward with tape
  std::vector<LayerTape> tapes(K);
  VbaState state = vba_init(y, net.config);
  for (int k = 0; k < K; ++k) {
    tapes[k].in = state;
    const Vec h_in = kernel_from_z(net.config.model, state.kernel.mean);
    tapes[k].xi = xi_map(net.layers[k], h_in);
    tapes[k].beta = ctx.fixed_beta ? *ctx.fixed_beta : beta_map(net.layers[k], sigma_hat);
    vba_sweep(state, net.config, tapes[k].xi, tapes[k].beta, y);
    tapes[k].out = state;
  }
  result.loss = evaluate_loss(kind, state, net.config, target);

  // seed the adjoint from the loss
  StateAdjoint adj(y.pixels(), net.config.model.P);
  switch (kind) {
    case LossKind::KernelMse: {
      const Vec h = kernel_from_z(net.config.model, state.kernel.mean);
      adj.z = 2.0 * (net.config.model.T.transpose() * (h - target.h_true));
      break;
    }
    case LossKind::SsimLoss: {
      adj.x = -ssim_with_gradient(state.image.mean, target.x_true).grad;
      break;
    }
  }

  const int stop_layer =
      options.backprop_depth < 0 ? 0 : std::max(0, K - options.backprop_depth);
  for (int k = K - 1; k >= stop_layer; --k) {
    double xi_a = 0.0, beta_a = 0.0;
    bool converged = true;
    backward_layer(tapes[k], net.config, y, options, adj, xi_a, beta_a, converged);

    if (!converged) {
      std::cerr << "warning: adjoint CG did not converge at layer " << k
                << "; falling back to finite differences for its parameters\n";
      result.fd_fallback = true;
      UnrolledNet probe = net;
      const Vec base = pack_params(net);
      for (int j = 0; j < 3; ++j) {
        const Eigen::Index idx = 3 * k + j;
        const double step = options.fd_epsilon * std::max(1.0, std::abs(base[idx]));
        Vec p = base;
        p[idx] = base[idx] + step;
        set_params(probe, p);
        const double up = net_loss(probe, y, kind, target, known_sigma, K);
        p[idx] = base[idx] - step;
        set_params(probe, p);
        const double down = net_loss(probe, y, kind, target, known_sigma, K);
        result.grad[idx] = (up - down) / (2.0 * step);
      }
      continue;
    }

    result.grad[3 * k + 0] = net.learn_xi ? xi_a * sigmoid(net.layers[k].theta_xi) : 0.0;
    if (!ctx.fixed_beta && net.learn_noise) {
      const double sigma_k =
          softplus(net.layers[k].rho) * sigma_hat + softplus(net.layers[k].tau);
      const double sigma_a = beta_a * (-2.0 / (sigma_k * sigma_k * sigma_k));
      result.grad[3 * k + 1] = sigma_a * sigma_hat * sigmoid(net.layers[k].rho);
      result.grad[3 * k + 2] = sigma_a * sigmoid(net.layers[k].tau);
    }
  }
  return result;
}

}  // namespace vbd
