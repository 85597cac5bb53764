#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vbd/unrolled.hpp"

namespace vbd {

enum class TrainMode { Greedy, EndToEnd };
enum class GradMethod { Analytic, FiniteDifference };

struct TrainRun {
  TrainMode mode = TrainMode::Greedy;
  LossKind loss = LossKind::KernelMse;
  double learning_rate = 5e-3;
  double weight_decay = 0.0;
  int epochs = 10;
  int batch_size = 10;
  std::uint64_t seed = 0;
  GradMethod grad_method = GradMethod::Analytic;
  GradOptions grad;
  int workers = 1;
};

struct TrainSample {
  ImagePlane observed;
  ImagePlane clean;
  Vec kernel_true;
  double sigma = 0.0;
  bool sigma_known = false;
};

struct EpochLog {
  int stage = 0;  // greedy layer index; 0 for end-to-end
  int epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
  double wall_seconds = 0.0;
};

struct TrainCurves {
  std::vector<EpochLog> epochs;
};

/// First/second-moment adaptive steps with bias correction; weight decay is
/// added to the gradient.
struct AdamOptimizer {
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.0;
  Vec m, v;
  int t = 0;

  explicit AdamOptimizer(int n, double lr_in, double wd)
      : lr(lr_in), weight_decay(wd), m(Vec::Zero(n)), v(Vec::Zero(n)) {}

  void step(Vec& params, const Vec& grad);
};

/// Mean loss over a whole split, evaluated with `layer_count` layers.
double dataset_loss(const UnrolledNet& net, std::span<const TrainSample> samples,
                    LossKind kind, int layer_count = -1, int workers = 1);

double dataset_mean_ssim(const UnrolledNet& net, std::span<const TrainSample> samples,
                         int workers = 1);

/// Layer-by-layer training against the kernel reconstruction error: stage k
/// optimizes layer k's parameters on the loss after layer k+1 with all
/// earlier layers frozen (forward passes recomputed with current values).
TrainCurves greedy_train(UnrolledNet& net, std::span<const TrainSample> train,
                         std::span<const TrainSample> validation, const TrainRun& run);

/// Joint optimization of all layer parameters, by default against 1 - SSIM,
/// intended to warm-start from a greedy checkpoint.
TrainCurves end_to_end_train(UnrolledNet& net, std::span<const TrainSample> train,
                             std::span<const TrainSample> validation, const TrainRun& run);

/// Network checkpoint JSON: K, per-layer parameters, config hash, metadata.
void save_checkpoint(const std::string& path, const UnrolledNet& net,
                     const std::string& metadata);
UnrolledNet load_checkpoint(const std::string& path, const VbaConfig& config);

/// FNV-1a over the canonical serialization of the template config.
std::string config_hash(const VbaConfig& config);

void write_training_log(const std::string& path, const TrainCurves& curves);

}  // namespace vbd
