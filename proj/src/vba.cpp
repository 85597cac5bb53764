#include "vbd/vba.hpp"

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

namespace vbd {

bool VbaState::all_finite() const {
  return image.mean.all_finite() && image.cov_diag.isFinite().all() &&
         kernel.mean.allFinite() && kernel.cov.allFinite() &&
         lambda.isFinite().all() && std::isfinite(gamma.shape) &&
         std::isfinite(gamma.rate);
}

ImagePrecision::ImagePrecision(const VbaState& state, const VbaConfig& config, double beta)
    : model_(&config.model),
      height_(state.image.mean.height),
      width_(state.image.mean.width),
      beta_(beta),
      two_gamma_(2.0 * state.gamma.mean()),
      h_(kernel_from_z(config.model, state.kernel.mean)),
      h_flip_(flip_kernel(h_, config.model.side)),
      cov_z_(state.kernel.cov),
      weights_(majorant_weights(state.lambda, config.prior.kappa)),
      eig_route_(config.covz_eig_route) {
  const double cz_gram = model_->P > 0 ? (cov_z_.array() * model_->TtT.array()).sum() : 0.0;
  diag_const_ = beta_ * (h_.squaredNorm() + cz_gram);

  if (eig_route_ && model_->P > 0) {
    Eigen::SelfAdjointEigenSolver<Mat> eig(cov_z_);
    if (eig.info() != Eigen::Success)
      throw numerical_error("ImagePrecision: eigendecomposition of C_z failed");
    for (int r = 0; r < model_->P; ++r) {
      const double s = eig.eigenvalues()[r];
      if (s <= 0.0) continue;  // PSD roundoff
      Vec w = model_->T * eig.eigenvectors().col(r);
      eig_kernels_flip_.push_back(flip_kernel(w, model_->side));
      eig_kernels_.push_back(std::move(w));
      eig_values_.push_back(s);
    }
  }
}

ImagePlane ImagePrecision::apply(const ImagePlane& v) const {
  const int P = model_->P;
  // beta H^T H v
  ImagePlane hv = circ_conv(v, h_, model_->side);
  ImagePlane out = circ_conv(hv, h_flip_, model_->side);
  out.data *= beta_;

  // beta sum_{p,q} (C_z)_{p,q} K_p^T K_q v
  if (P > 0) {
    if (eig_route_) {
      for (size_t r = 0; r < eig_values_.size(); ++r) {
        ImagePlane g = circ_conv(v, eig_kernels_[r], model_->side);
        ImagePlane gt = circ_conv(g, eig_kernels_flip_[r], model_->side);
        out.data += (beta_ * eig_values_[r]) * gt.data;
      }
    } else {
      Mat U(v.pixels(), P);
      for (int q = 1; q <= P; ++q) U.col(q - 1) = apply_Kp(*model_, q, v).data.matrix();
      Mat W = U * cov_z_;  // column p-1 = sum_q (C_z)_{p,q} K_q v
      ImagePlane wp(height_, width_);
      for (int p = 1; p <= P; ++p) {
        wp.data = W.col(p - 1).array();
        out.data += beta_ * apply_Kp_adjoint(*model_, p, wp).data;
      }
    }
  }

  // 2 gamma D^T Lambda D v
  out.data += two_gamma_ * apply_DtWD(v, weights_).data;
  return out;
}

Arr ImagePrecision::apply(const Arr& v) const {
  return apply(ImagePlane(height_, width_, v)).data;
}

Arr ImagePrecision::diag() const {
  Arr d = diag_const_ + two_gamma_ * dtwd_diag(weights_, height_, width_);
  if ((d <= 0.0).any())
    throw numerical_error("ImagePrecision: nonpositive precision diagonal");
  return d;
}

ImagePlane apply_image_precision(const VbaState& state, const VbaConfig& config,
                                 const ImagePlane& v) {
  return ImagePrecision(state, config, config.beta).apply(v);
}

Arr precision_diag(const VbaState& state, const VbaConfig& config) {
  return ImagePrecision(state, config, config.beta).diag().inverse();
}

ImageUpdateResult update_image(const VbaState& state, const VbaConfig& config,
                               const ImagePlane& y, double beta) {
  ImagePrecision precision(state, config, beta);

  Arr delta = precision.diag().inverse();

  ImagePlane b = circ_conv(y, flip_kernel(precision.kernel(), config.model.side),
                           config.model.side);
  b.data *= beta;

  Arr x = state.image.mean.data;  // warm start at the current mean
  CgResult cg = cg_solve([&](const Arr& v) { return precision.apply(v); }, b.data, x,
                         config.cg_iterations, config.cg_tolerance);

  return {GaussianImageFactor{ImagePlane(y.height, y.width, std::move(x)), std::move(delta)},
          cg};
}

KernelStats compute_kernel_stats(const GaussianImageFactor& image,
                                 const KernelModel& model, const ImagePlane& y) {
  const int P = model.P;
  const double sum_delta = image.cov_diag.sum();

  Mat V(image.mean.pixels(), P + 1);
  for (int p = 0; p <= P; ++p) V.col(p) = apply_Kp(model, p, image.mean).data.matrix();
  const Mat gram = V.transpose() * V;

  KernelStats stats;
  stats.B = gram.bottomRightCorner(P, P);
  if (P > 0) stats.B += sum_delta * model.TtT;

  Vec b_p0 = gram.col(0).tail(P) + sum_delta * model.Tt_t;
  stats.a = V.rightCols(P).transpose() * y.data.matrix() - b_p0;
  return stats;
}

GaussianKernelFactor update_kernel_posterior(const KernelStats& stats,
                                             const PriorSpec& prior, double xi,
                                             double beta) {
  const int P = static_cast<int>(stats.a.size());
  if (P == 0) return {Vec(0), Mat(0, 0)};

  Mat precision = beta * stats.B + xi * prior.L;
  Eigen::LLT<Mat> llt(precision);
  if (llt.info() != Eigen::Success)
    throw numerical_error("update_kernel_posterior: singular posterior precision");

  GaussianKernelFactor factor;
  factor.cov = llt.solve(Mat::Identity(P, P));
  factor.cov = 0.5 * (factor.cov + factor.cov.transpose()).eval();
  factor.mean = llt.solve(beta * stats.a + xi * (prior.L * prior.mu));
  if (!factor.mean.allFinite()) throw numerical_error("update_kernel_posterior: non-finite mean");
  return factor;
}

Arr update_lambda(const GaussianImageFactor& image, double lambda_floor) {
  ImageGradients g = apply_D(image.mean);
  Arr lambda = g.dh.square() + g.dv.square() +
               lambda_trace_term(image.cov_diag, image.mean.height, image.mean.width);
  return lambda.max(lambda_floor);
}

GammaFactor update_gamma(const Arr& lambda, const PriorSpec& prior, int pixels) {
  GammaFactor factor;
  factor.shape = pixels / (2.0 * prior.kappa) + prior.alpha;
  factor.rate = lambda.pow(prior.kappa).sum() + prior.eta;
  return factor;
}

double digamma(double x) {
  // recurrence into the asymptotic regime, then the standard expansion
  double value = 0.0;
  while (x < 6.0) {
    value -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x, inv2 = inv * inv;
  value += std::log(x) - 0.5 * inv -
           inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 / 252.0));
  return value;
}

double surrogate_objective(const VbaState& state, const VbaConfig& config,
                           const ImagePlane& y, double xi, double beta) {
  const KernelModel& model = config.model;
  const PriorSpec& prior = config.prior;
  const int N = y.pixels();
  const int P = model.P;
  const double kappa = prior.kappa;
  const double gamma_mean = state.gamma.mean();
  const double sum_delta = state.image.cov_diag.sum();

  // data term: E |y - H(z) x|^2 over both Gaussian factors
  const Vec h = kernel_from_z(model, state.kernel.mean);
  const ImagePlane hx = circ_conv(state.image.mean, h, model.side);
  double data = y.data.square().sum() - 2.0 * (y.data * hx.data).sum() +
                hx.data.square().sum() + h.squaredNorm() * sum_delta;
  if (P > 0) {
    Mat V(N, P);
    for (int p = 1; p <= P; ++p)
      V.col(p - 1) = apply_Kp(model, p, state.image.mean).data.matrix();
    const Mat psi = sum_delta * model.TtT + V.transpose() * V;
    data += (state.kernel.cov.array() * psi.array()).sum();
  }

  double objective = 0.5 * beta * data - 0.5 * N * std::log(beta);

  // MM-bounded image prior: gamma E[ (kappa |D_j x|^2 + (1-kappa) lambda_j)
  // / lambda_j^{1-kappa} ] with the expectation of |D_j x|^2 in closed form
  ImageGradients g = apply_D(state.image.mean);
  const Arr expected_sq =
      g.dh.square() + g.dv.square() +
      lambda_trace_term(state.image.cov_diag, y.height, y.width);
  objective += gamma_mean * ((kappa * expected_sq + (1.0 - kappa) * state.lambda) *
                             state.lambda.pow(kappa - 1.0))
                   .sum();

  // gamma-dependent normalizations and hyper-prior
  const double d = state.gamma.shape, b = state.gamma.rate;
  const double log_gamma_expect = digamma(d) - std::log(b);
  objective -= (N / (2.0 * kappa) + prior.alpha - 1.0) * log_gamma_expect;
  objective += prior.eta * gamma_mean;

  // kernel prior
  if (P > 0) {
    const Vec dz = state.kernel.mean - prior.mu;
    objective += 0.5 * xi * (dz.dot(prior.L * dz) +
                             (prior.L.array() * state.kernel.cov.array()).sum());
    objective -= 0.5 * P * std::log(xi);
  }

  // negative entropies of the three factors
  objective -= 0.5 * state.image.cov_diag.log().sum();
  if (P > 0) {
    Eigen::LLT<Mat> llt(state.kernel.cov);
    if (llt.info() != Eigen::Success)
      throw numerical_error("surrogate_objective: C_z not positive definite");
    objective -= Mat(llt.matrixL()).diagonal().array().log().sum();
  }
  objective += -d + std::log(b) - std::lgamma(d) - (1.0 - d) * digamma(d);

  return objective;
}

double surrogate_objective(const VbaState& state, const VbaConfig& config,
                           const ImagePlane& y) {
  return surrogate_objective(state, config, y, config.xi, config.beta);
}

VbaState vba_init(const ImagePlane& y, const VbaConfig& config) {
  if (y.height < config.model.side || y.width < config.model.side)
    throw std::invalid_argument("vba_init: image smaller than kernel");
  if (!y.all_finite()) throw std::invalid_argument("vba_init: non-finite observation");

  VbaState state;
  state.image.mean = y;
  state.image.cov_diag = Arr::Ones(y.pixels());

  int width = std::min(config.init_kernel_width, config.model.side);
  if (width % 2 == 0) --width;
  state.kernel.mean = z_from_kernel(config.model, uniform_kernel(config.model.side, width));
  state.kernel.cov = config.cz0_scale * Mat::Identity(config.model.P, config.model.P);

  if (config.lambda0_uses_cov) {
    state.lambda = update_lambda(state.image, config.lambda_floor);
  } else {
    const GaussianImageFactor point{y, Arr::Zero(y.pixels())};
    state.lambda = update_lambda(point, config.lambda_floor);
  }
  state.gamma = update_gamma(state.lambda, config.prior, y.pixels());
  state.iteration = 0;
  return state;
}

SweepInfo vba_sweep(VbaState& state, const VbaConfig& config, double xi, double beta,
                    const ImagePlane& y) {
  ImageUpdateResult image = update_image(state, config, y, beta);
  state.image = std::move(image.factor);

  KernelStats stats = compute_kernel_stats(state.image, config.model, y);
  state.kernel = update_kernel_posterior(stats, config.prior, xi, beta);

  state.lambda = update_lambda(state.image, config.lambda_floor);
  state.gamma = update_gamma(state.lambda, config.prior, y.pixels());
  ++state.iteration;
  return {image.cg};
}

VbaState vba_run(const ImagePlane& y, const VbaConfig& config, const TraceCallback& trace) {
  VbaState state = vba_init(y, config);
  Vec h_prev = kernel_from_z(config.model, state.kernel.mean);

  for (int k = 0; k < config.max_iterations; ++k) {
    const Arr x_prev = state.image.mean.data;
    SweepInfo info = vba_sweep(state, config, config.xi, config.beta, y);

    if (trace) {
      const Vec h = kernel_from_z(config.model, state.kernel.mean);
      trace(TraceRow{state.iteration,
                     surrogate_objective(state, config, y),
                     state.gamma.mean(),
                     info.cg.rel_residual,
                     (h - h_prev).norm()});
      h_prev = h;
    }
    if (!state.all_finite()) throw numerical_error("vba_run: non-finite state");

    if (config.stop_tol > 0.0) {
      const double denom = x_prev.square().sum();
      const double change = (state.image.mean.data - x_prev).square().sum();
      if (denom > 0.0 && change / denom < config.stop_tol) break;
    }
  }
  return state;
}

}  // namespace vbd
