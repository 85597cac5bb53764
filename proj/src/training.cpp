#include "vbd/training.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <future>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "vbd/datagen.hpp"

namespace vbd {
namespace {

std::optional<double> sample_sigma(const TrainSample& s) {
  return s.sigma_known ? std::optional<double>(s.sigma) : std::nullopt;
}

LossTarget sample_target(const TrainSample& s) { return LossTarget{s.kernel_true, s.clean}; }

// Index-ordered parallel map; the reduction order is fixed so results do not
// depend on the worker count.
template <typename Fn>
std::vector<double> map_indexed(int n, int workers, Fn&& fn) {
  std::vector<double> out(n);
  if (workers <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) out[i] = fn(i);
    return out;
  }
  std::atomic<int> next{0};
  auto worker = [&] {
    for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) out[i] = fn(i);
  };
  std::vector<std::future<void>> futures;
  for (int w = 0; w < std::min(workers, n); ++w)
    futures.push_back(std::async(std::launch::async, worker));
  for (auto& f : futures) f.get();
  return out;
}

struct BatchGrad {
  Vec grad;
  double loss = 0.0;
};

BatchGrad batch_gradient(const UnrolledNet& net, std::span<const TrainSample> samples,
                         std::span<const int> indices, LossKind kind, int layer_count,
                         const TrainRun& run) {
  const int n = static_cast<int>(indices.size());
  std::vector<Vec> grads(n);
  std::vector<double> losses = map_indexed(n, run.workers, [&](int i) {
    const TrainSample& s = samples[indices[i]];
    if (run.grad_method == GradMethod::Analytic) {
      GradResult r = analytic_gradient(net, s.observed, kind, sample_target(s),
                                       sample_sigma(s), layer_count, run.grad);
      grads[i] = std::move(r.grad);
      return r.loss;
    }
    UnrolledNet probe = net;
    grads[i] = fd_gradient(
        [&](const Vec& p) {
          set_params(probe, p);
          return net_loss(probe, s.observed, kind, sample_target(s), sample_sigma(s),
                          layer_count);
        },
        pack_params(net), run.grad.fd_epsilon);
    return net_loss(net, s.observed, kind, sample_target(s), sample_sigma(s), layer_count);
  });

  BatchGrad result{Vec::Zero(3 * static_cast<int>(net.layers.size())), 0.0};
  for (int i = 0; i < n; ++i) {  // fixed order
    result.grad += grads[i];
    result.loss += losses[i];
  }
  result.grad /= n;
  result.loss /= n;
  if (!result.grad.allFinite() || !std::isfinite(result.loss))
    throw numerical_error("batch_gradient: training loss diverged");
  return result;
}

Vec param_mask(const UnrolledNet& net, std::span<const TrainSample> samples) {
  const bool any_unknown_sigma =
      std::any_of(samples.begin(), samples.end(), [](const auto& s) { return !s.sigma_known; });
  Vec mask = Vec::Zero(3 * static_cast<int>(net.layers.size()));
  for (size_t k = 0; k < net.layers.size(); ++k) {
    mask[3 * k + 0] = net.learn_xi ? 1.0 : 0.0;
    const double noise = (net.learn_noise && any_unknown_sigma) ? 1.0 : 0.0;
    mask[3 * k + 1] = noise;
    mask[3 * k + 2] = noise;
  }
  return mask;
}

}  // namespace

void AdamOptimizer::step(Vec& params, const Vec& grad) {
  ++t;
  const Vec g = grad + weight_decay * params;
  m = beta1 * m + (1.0 - beta1) * g;
  v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
  const double bc1 = 1.0 - std::pow(beta1, t);
  const double bc2 = 1.0 - std::pow(beta2, t);
  params -= (lr / bc1) * m.cwiseQuotient(((v / bc2).cwiseSqrt().array() + eps).matrix());
}

double dataset_loss(const UnrolledNet& net, std::span<const TrainSample> samples,
                    LossKind kind, int layer_count, int workers) {
  if (samples.empty()) throw std::invalid_argument("dataset_loss: empty sample set");
  const std::vector<double> losses =
      map_indexed(static_cast<int>(samples.size()), workers, [&](int i) {
        return net_loss(net, samples[i].observed, kind, sample_target(samples[i]),
                        sample_sigma(samples[i]), layer_count);
      });
  return std::accumulate(losses.begin(), losses.end(), 0.0) / losses.size();
}

double dataset_mean_ssim(const UnrolledNet& net, std::span<const TrainSample> samples,
                         int workers) {
  return 1.0 - dataset_loss(net, samples, LossKind::SsimLoss, -1, workers);
}

namespace {

TrainCurves optimize(UnrolledNet& net, std::span<const TrainSample> train,
                     std::span<const TrainSample> validation, const TrainRun& run,
                     LossKind kind, int stage, int layer_count, const Vec& stage_mask) {
  TrainCurves curves;
  if (train.empty()) throw std::invalid_argument("training: empty train split");

  const Vec mask = stage_mask.cwiseProduct(param_mask(net, train));
  AdamOptimizer adam(static_cast<int>(mask.size()), run.learning_rate, 0.0);
  Vec params = pack_params(net);

  std::vector<int> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < run.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 shuffle_rng(mix_seed(run.seed, 1000003ULL * stage + epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_loss = 0.0;
    int batches = 0;
    for (size_t start = 0; start < order.size(); start += run.batch_size) {
      const size_t end = std::min(order.size(), start + run.batch_size);
      std::span<const int> batch(order.data() + start, end - start);
      BatchGrad bg = batch_gradient(net, train, batch, kind, layer_count, run);
      // decay is masked together with the gradient so frozen entries stay put
      const Vec grad = (bg.grad + run.weight_decay * params).cwiseProduct(mask);
      adam.step(params, grad);
      set_params(net, params);
      epoch_loss += bg.loss;
      ++batches;
    }

    EpochLog log;
    log.stage = stage;
    log.epoch = epoch;
    log.train_loss = epoch_loss / std::max(1, batches);
    log.validation_loss =
        validation.empty() ? 0.0 : dataset_loss(net, validation, kind, layer_count, run.workers);
    log.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    curves.epochs.push_back(log);
  }
  return curves;
}

}  // namespace

TrainCurves greedy_train(UnrolledNet& net, std::span<const TrainSample> train,
                         std::span<const TrainSample> validation, const TrainRun& run) {
  if (run.loss != LossKind::KernelMse)
    std::cerr << "warning: greedy training normally pairs with the kernel MSE loss\n";
  TrainCurves curves;
  const int K = static_cast<int>(net.layers.size());
  TrainRun stage_run = run;
  stage_run.grad.backprop_depth = 1;  // earlier layers are frozen anyway
  for (int k = 0; k < K; ++k) {
    // each stage starts from the previous trained layer; a fresh layer's
    // default noise map would wreck the state the earlier stages built up
    if (k > 0 && run.epochs > 0) net.layers[k] = net.layers[k - 1];
    Vec stage_mask = Vec::Zero(3 * K);
    stage_mask.segment(3 * k, 3).setOnes();  // only layer k's parameters move
    TrainCurves stage =
        optimize(net, train, validation, stage_run, run.loss, k, k + 1, stage_mask);
    curves.epochs.insert(curves.epochs.end(), stage.epochs.begin(), stage.epochs.end());
  }
  return curves;
}

TrainCurves end_to_end_train(UnrolledNet& net, std::span<const TrainSample> train,
                             std::span<const TrainSample> validation, const TrainRun& run) {
  if (run.loss != LossKind::SsimLoss)
    std::cerr << "warning: end-to-end training normally pairs with the SSIM loss\n";
  const Vec all = Vec::Ones(3 * static_cast<int>(net.layers.size()));
  return optimize(net, train, validation, run, run.loss, 0, -1, all);
}

std::string config_hash(const VbaConfig& config) {
  std::ostringstream ss;
  ss << config.model.side << '|' << config.prior.kappa << '|' << config.prior.alpha << '|'
     << config.prior.eta << '|' << config.cg_iterations << '|' << config.cg_tolerance << '|'
     << config.cz0_scale << '|' << config.lambda_floor << '|' << config.init_kernel_width;
  const std::string s = ss.str();
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    hash ^= c;
    hash *= 0x100000001b3ULL;
  }
  std::ostringstream hex;
  hex << std::hex << hash;
  return hex.str();
}

void save_checkpoint(const std::string& path, const UnrolledNet& net,
                     const std::string& metadata) {
  nlohmann::json j;
  j["k_layers"] = net.layers.size();
  j["layers"] = nlohmann::json::array();
  for (const auto& layer : net.layers)
    j["layers"].push_back(
        {{"theta_xi", layer.theta_xi}, {"rho", layer.rho}, {"tau", layer.tau}});
  j["config_hash"] = config_hash(net.config);
  j["learn_xi"] = net.learn_xi;
  j["learn_noise"] = net.learn_noise;
  j["metadata"] = metadata;
  std::ofstream out(path);
  if (!out) throw io_error("cannot write checkpoint: " + path);
  out << j.dump(2) << '\n';
}

UnrolledNet load_checkpoint(const std::string& path, const VbaConfig& config) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot read checkpoint: " + path);
  nlohmann::json j;
  in >> j;

  UnrolledNet net;
  net.config = config;
  net.learn_xi = j.value("learn_xi", true);
  net.learn_noise = j.value("learn_noise", true);
  for (const auto& layer : j.at("layers"))
    net.layers.push_back(LayerParams{layer.at("theta_xi").get<double>(),
                                     layer.at("rho").get<double>(),
                                     layer.at("tau").get<double>()});
  if (net.layers.size() != j.at("k_layers").get<size_t>())
    throw io_error("checkpoint layer count mismatch: " + path);
  if (j.value("config_hash", "") != config_hash(config))
    std::cerr << "warning: checkpoint " << path
              << " was trained under a different template config\n";
  return net;
}

void write_training_log(const std::string& path, const TrainCurves& curves) {
  std::ofstream out(path);
  if (!out) throw io_error("cannot write training log: " + path);
  out << "stage,epoch,train_loss,validation_loss,wall_seconds\n";
  out.precision(12);
  for (const auto& e : curves.epochs)
    out << e.stage << ',' << e.epoch << ',' << e.train_loss << ',' << e.validation_loss << ','
        << e.wall_seconds << '\n';
}

}  // namespace vbd
