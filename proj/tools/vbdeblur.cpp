// Command-line front end: synthesize | deblur | train | evaluate.
// Exit codes: 0 success, 2 invalid config, 3 I/O failure, 4 numerical failure.

#include <CLI11.hpp>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <mutex>
#include <optional>

#include <nlohmann/json.hpp>

#include "vbd/color.hpp"
#include "vbd/datagen.hpp"
#include "vbd/io.hpp"
#include "vbd/metrics.hpp"
#include "vbd/training.hpp"
#include "vbd/unrolled.hpp"
#include "vbd/vba.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int g_log_level = 1;  // 0 quiet, 1 info, 2 debug

void log_info(const std::string& msg) {
  if (g_log_level >= 1) std::cerr << msg << '\n';
}

json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw vbd::io_error("cannot open config file: " + path);
  json j;
  in >> j;
  return j;
}

// Every solver hyperparameter is a named key; defaults follow the reference
// settings (kappa 1/2, Jeffrey hyper-prior, 10 CG iterations, uniform 5x5
// initialization, K = 6 layers).
vbd::VbaConfig config_from_json(const json& j) {
  vbd::VbaConfig config;
  const int side = j.value("kernel_side", 9);
  config.model = vbd::build_symmetric_constraint(side);
  config.prior = vbd::make_default_prior(config.model, j.value("kappa", 0.5));
  config.prior.alpha = j.value("alpha", 0.0);
  config.prior.eta = j.value("eta", 0.0);
  config.xi = j.value("xi", 1.0);
  config.beta = j.value("beta", 1e4);
  config.cg_iterations = j.value("cg_iterations", 10);
  config.cg_tolerance = j.value("cg_tolerance", 1e-6);
  config.max_iterations = j.value("max_iterations", 30);
  config.cz0_scale = j.value("cz0_scale", 1e-4);
  config.lambda_floor = j.value("lambda_floor", 1e-10);
  config.init_kernel_width = j.value("init_kernel_width", 5);
  config.covz_eig_route = j.value("covz_eig_route", false);
  config.stop_tol = j.value("stop_tol", 1e-5);
  config.lambda0_uses_cov = j.value("lambda0_uses_cov", false);
  return config;
}

struct DeblurOutputs {
  vbd::ImagePlane restored;
  vbd::Vec kernel;
  json summary;
};

DeblurOutputs run_plain_vba(const vbd::ImagePlane& y, vbd::VbaConfig config,
                            std::optional<double> sigma, const std::string& trace_path) {
  if (sigma) {
    config.beta = 1.0 / (*sigma * *sigma);
  } else {
    const double sigma_hat = vbd::noise_std_estimate(y);
    if (sigma_hat <= 0.0)
      throw vbd::numerical_error("estimated noise level is zero; pass --sigma");
    config.beta = 1.0 / (sigma_hat * sigma_hat);
  }

  std::ofstream trace_file;
  vbd::TraceCallback trace;
  if (!trace_path.empty()) {
    trace_file.open(trace_path);
    trace_file << "iteration,surrogate_objective,gamma,cg_residual,kernel_change_l2\n";
    trace_file.precision(12);
    trace = [&trace_file](const vbd::TraceRow& row) {
      trace_file << row.iteration << ',' << row.objective << ',' << row.gamma << ','
                 << row.cg_residual << ',' << row.kernel_change_l2 << '\n';
    };
  }

  vbd::VbaState state = vbd::vba_run(y, config, trace);

  DeblurOutputs out;
  out.restored = state.image.mean;
  out.kernel = vbd::kernel_from_z(config.model, state.kernel.mean);
  out.summary = {{"mode", "vba"},
                 {"xi", config.xi},
                 {"beta", config.beta},
                 {"iterations", state.iteration},
                 {"gamma", state.gamma.mean()},
                 {"gamma_shape_d", state.gamma.shape},
                 {"gamma_rate_b", state.gamma.rate}};
  out.summary["z"] = std::vector<double>(state.kernel.mean.begin(), state.kernel.mean.end());
  const vbd::Vec cz_diag = state.kernel.cov.diagonal();
  out.summary["cz_diag"] = std::vector<double>(cz_diag.begin(), cz_diag.end());
  return out;
}

DeblurOutputs run_unrolled(const vbd::ImagePlane& y, const vbd::UnrolledNet& net,
                           std::optional<double> sigma) {
  vbd::NetOutput result = vbd::net_forward(net, y, sigma);
  DeblurOutputs out;
  out.restored = result.x;
  out.kernel = result.h;
  out.summary = {{"mode", "unrolled"},
                 {"k_layers", net.layers.size()},
                 {"sigma_hat", result.trace.sigma_hat},
                 {"xi_per_layer", result.trace.xi},
                 {"beta_per_layer", result.trace.beta}};
  out.summary["z"] = std::vector<double>(result.z.begin(), result.z.end());
  const vbd::Vec cz_diag = result.cov_z.diagonal();
  out.summary["cz_diag"] = std::vector<double>(cz_diag.begin(), cz_diag.end());
  return out;
}

void write_outputs(const fs::path& out_dir, const std::string& stem, const DeblurOutputs& out,
                   int side, const std::string& post_process_cmd) {
  fs::create_directories(out_dir);
  const fs::path image_path = out_dir / (stem + "_restored.png");
  vbd::write_png_gray(image_path.string(), out.restored);
  vbd::write_kernel_csv((out_dir / (stem + "_kernel.csv")).string(), out.kernel, side);

  const auto z = out.summary.at("z").get<std::vector<double>>();
  const auto cz = out.summary.at("cz_diag").get<std::vector<double>>();
  vbd::write_vector_csv((out_dir / (stem + "_z.csv")).string(),
                        Eigen::Map<const vbd::Vec>(z.data(), z.size()));
  vbd::write_vector_csv((out_dir / (stem + "_cz_diag.csv")).string(),
                        Eigen::Map<const vbd::Vec>(cz.data(), cz.size()));

  json summary = out.summary;
  if (!post_process_cmd.empty()) {
    const std::string cmd = post_process_cmd + " " + image_path.string();
    log_info("running post-process hook: " + cmd);
    const int rc = std::system(cmd.c_str());
    summary["post_process_cmd"] = post_process_cmd;
    summary["post_process_exit"] = rc;
    if (rc != 0) throw vbd::io_error("post-process hook failed: " + cmd);
  }
  std::ofstream json_out(out_dir / (stem + "_summary.json"));
  json_out << summary.dump(2) << '\n';
}

std::vector<vbd::TrainSample> load_samples(const std::vector<vbd::ManifestEntry>& entries,
                                           const std::string& split, bool sigma_known) {
  std::vector<vbd::TrainSample> samples;
  for (const auto& e : entries) {
    if (!split.empty() && e.split != split) continue;
    vbd::TrainSample s;
    s.observed = vbd::read_png_gray(e.observed_path);
    s.clean = vbd::read_png_gray(e.clean_path);
    auto [kernel, side] = vbd::read_kernel_csv(e.kernel_path);
    s.kernel_true = kernel;
    s.sigma = e.sigma;
    s.sigma_known = sigma_known;
    samples.push_back(std::move(s));
  }
  return samples;
}

int cmd_synthesize(const std::string& recipe_path, const std::string& image_dir,
                   const std::string& out_dir, int synth_count, int synth_size,
                   std::uint64_t seed_override, bool has_seed) {
  json recipe_json = load_json(recipe_path);
  if (has_seed) recipe_json["seed"] = seed_override;
  vbd::DatasetRecipe recipe = vbd::recipe_from_json(recipe_json);

  std::string source_dir = image_dir;
  if (synth_count > 0) {
    source_dir = (fs::path(out_dir) / "base").string();
    fs::create_directories(source_dir);
    for (int i = 0; i < synth_count; ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "synth_%03d.png", i);
      vbd::write_png_gray((fs::path(source_dir) / name).string(),
                          vbd::synth_image(synth_size, synth_size, vbd::mix_seed(recipe.seed, 7000 + i)));
    }
  }
  if (source_dir.empty())
    throw std::invalid_argument("synthesize: pass --images DIR or --synth N");

  const auto manifest = vbd::build_dataset(source_dir, recipe, out_dir);
  log_info("wrote " + std::to_string(manifest.size()) + " samples to " + out_dir);
  return 0;
}

int cmd_deblur(const std::string& input, const std::string& manifest_path,
               const std::string& split, const std::string& out_dir, const json& config_json,
               std::optional<double> sigma, bool sigma_from_manifest, bool color,
               const std::string& checkpoint, const std::vector<double>& xi_grid,
               const std::string& post_cmd, bool trace, int workers) {
  vbd::VbaConfig config = config_from_json(config_json);

  std::optional<vbd::UnrolledNet> net;
  if (!checkpoint.empty()) net = vbd::load_checkpoint(checkpoint, config);

  auto deblur_gray = [&](const vbd::ImagePlane& y, const std::string& stem,
                         std::optional<double> sample_sigma,
                         const vbd::VbaConfig& cfg) -> DeblurOutputs {
    const std::string trace_path =
        trace ? (fs::path(out_dir) / (stem + "_trace.csv")).string() : std::string();
    if (net) return run_unrolled(y, *net, sample_sigma);
    return run_plain_vba(y, cfg, sample_sigma, trace_path);
  };

  if (!input.empty()) {
    const std::string stem = fs::path(input).stem().string();
    fs::create_directories(out_dir);
    if (color) {
      const vbd::RgbImage rgb = vbd::read_png_rgb(input);
      const vbd::YuvImage yuv = vbd::rgb_to_yuv(rgb);
      DeblurOutputs out = deblur_gray(yuv.y, stem, sigma, config);
      vbd::YuvImage restored{out.restored, vbd::median_filter3(yuv.u),
                             vbd::median_filter3(yuv.v)};
      const vbd::RgbImage rgb_restored = vbd::yuv_to_rgb(restored);
      vbd::write_png_rgb((fs::path(out_dir) / (stem + "_restored.png")).string(), rgb_restored);
      out.summary["color"] = true;
      vbd::write_kernel_csv((fs::path(out_dir) / (stem + "_kernel.csv")).string(), out.kernel,
                            config.model.side);
      std::ofstream json_out(fs::path(out_dir) / (stem + "_summary.json"));
      json_out << out.summary.dump(2) << '\n';
      return 0;
    }
    const vbd::ImagePlane y = vbd::read_png_gray(input);
    DeblurOutputs out = deblur_gray(y, stem, sigma, config);
    write_outputs(out_dir, stem, out, config.model.side, post_cmd);
    return 0;
  }

  if (manifest_path.empty())
    throw std::invalid_argument("deblur: pass an input image or --manifest");

  const auto entries = vbd::read_manifest(manifest_path);
  std::vector<vbd::ManifestEntry> selected;
  for (const auto& e : entries)
    if (split.empty() || e.split == split) selected.push_back(e);
  if (selected.empty()) throw vbd::io_error("deblur: no manifest entries match the split");

  // Empirical xi selection on this split: pick the grid value with the best
  // mean PSNR against the manifest's clean images.
  if (!xi_grid.empty() && !net) {
    double best_xi = xi_grid.front(), best_psnr = -1e300;
    for (double xi : xi_grid) {
      vbd::VbaConfig cfg = config;
      cfg.xi = xi;
      double mean_psnr = 0.0;
      for (const auto& e : selected) {
        const vbd::ImagePlane y = vbd::read_png_gray(e.observed_path);
        const vbd::ImagePlane clean = vbd::read_png_gray(e.clean_path);
        std::optional<double> s =
            sigma_from_manifest ? std::optional<double>(e.sigma) : sigma;
        DeblurOutputs out = run_plain_vba(y, cfg, s, "");
        mean_psnr += vbd::psnr(out.restored, clean);
      }
      mean_psnr /= static_cast<double>(selected.size());
      log_info("xi = " + std::to_string(xi) + ": mean PSNR " + std::to_string(mean_psnr));
      if (mean_psnr > best_psnr) {
        best_psnr = mean_psnr;
        best_xi = xi;
      }
    }
    config.xi = best_xi;
    log_info("selected xi = " + std::to_string(best_xi));
    fs::create_directories(out_dir);
    std::ofstream grid_out(fs::path(out_dir) / "xi_grid.json");
    grid_out << json{{"selected_xi", best_xi}, {"mean_psnr", best_psnr}}.dump(2) << '\n';
  }

  fs::create_directories(out_dir);
  std::atomic<int> next{0};
  std::atomic<bool> failed{false};
  std::string failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (int i = next.fetch_add(1); i < static_cast<int>(selected.size());
         i = next.fetch_add(1)) {
      if (failed.load()) return;
      try {
        const auto& e = selected[i];
        const vbd::ImagePlane y = vbd::read_png_gray(e.observed_path);
        const std::string stem = fs::path(e.observed_path).stem().string();
        std::optional<double> s = sigma_from_manifest ? std::optional<double>(e.sigma) : sigma;
        DeblurOutputs out = deblur_gray(y, stem, s, config);
        write_outputs(out_dir, stem, out, config.model.side, post_cmd);
      } catch (const std::exception& ex) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        failed = true;
        failure = ex.what();
      }
    }
  };
  std::vector<std::future<void>> futures;
  for (int w = 0; w < std::max(1, workers); ++w)
    futures.push_back(std::async(std::launch::async, worker));
  for (auto& f : futures) f.get();
  if (failed) throw vbd::numerical_error("deblur batch failed: " + failure);
  log_info("deblurred " + std::to_string(selected.size()) + " samples into " + out_dir);
  return 0;
}

int cmd_train(const std::string& manifest_path, const std::string& mode,
              const std::string& out_checkpoint, const std::string& init_checkpoint,
              const json& config_json, const std::string& loss_name, int k_layers, int epochs,
              double lr, double wd, int batch, std::uint64_t seed, bool sigma_known,
              int workers, const std::string& grad_method) {
  vbd::VbaConfig config = config_from_json(config_json);

  const auto entries = vbd::read_manifest(manifest_path);
  const auto train = load_samples(entries, "train", sigma_known);
  const auto validation = load_samples(entries, "validation", sigma_known);
  if (train.empty()) throw vbd::io_error("train: manifest has no train split");

  vbd::UnrolledNet net;
  if (!init_checkpoint.empty()) {
    net = vbd::load_checkpoint(init_checkpoint, config);
  } else {
    net.config = config;
    net.layers.assign(k_layers, vbd::LayerParams{});
  }

  vbd::TrainRun run;
  run.mode = mode == "greedy" ? vbd::TrainMode::Greedy : vbd::TrainMode::EndToEnd;
  run.loss = loss_name == "ssim" ? vbd::LossKind::SsimLoss : vbd::LossKind::KernelMse;
  run.learning_rate = lr;
  run.weight_decay = wd;
  run.epochs = epochs;
  run.batch_size = batch;
  run.seed = seed;
  run.workers = workers;
  run.grad_method = grad_method == "fd" ? vbd::GradMethod::FiniteDifference
                                        : vbd::GradMethod::Analytic;

  vbd::TrainCurves curves;
  if (run.mode == vbd::TrainMode::Greedy)
    curves = vbd::greedy_train(net, train, validation, run);
  else
    curves = vbd::end_to_end_train(net, train, validation, run);

  vbd::save_checkpoint(out_checkpoint, net,
                       "mode=" + mode + " epochs=" + std::to_string(epochs));
  vbd::write_training_log(out_checkpoint + ".curves.csv", curves);
  log_info("saved checkpoint " + out_checkpoint);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variational Bayesian blind deconvolution"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand name

  std::uint64_t seed = 0;
  bool has_seed = false;
  std::string config_path;
  int workers = 1;
  int log_level = 1;
  std::string post_cmd;
  app.add_option("--seed", seed, "global RNG seed")->each([&](const std::string&) {
    has_seed = true;
  });
  app.add_option("--config", config_path, "run config JSON file");
  app.add_option("--workers", workers, "worker count for batch commands");
  app.add_option("--log-level", log_level, "0 quiet, 1 info, 2 debug");
  app.add_option("--post-process-cmd", post_cmd,
                 "external executable invoked on each restored image path");

  auto* synth = app.add_subcommand("synthesize", "build a degraded dataset from images");
  std::string recipe_path, image_dir, out_dir;
  int synth_count = 0, synth_size = 64;
  synth->add_option("--recipe", recipe_path, "recipe JSON")->required();
  synth->add_option("--images", image_dir, "directory of source PNG images");
  synth->add_option("--out", out_dir, "output dataset directory")->required();
  synth->add_option("--synth", synth_count, "generate this many synthetic base images");
  synth->add_option("--synth-size", synth_size, "synthetic base image size");

  auto* deblur = app.add_subcommand("deblur", "restore an image (or a manifest split)");
  std::string input, manifest_path, split, ckpt;
  double sigma = -1.0;
  bool color = false, trace = false, sigma_from_manifest = false;
  std::vector<double> xi_grid;
  deblur->add_option("input", input, "degraded PNG image");
  deblur->add_option("--manifest", manifest_path, "dataset manifest (batch mode)");
  deblur->add_option("--split", split, "manifest split filter");
  deblur->add_option("--out-dir", out_dir, "output directory")->required();
  deblur->add_option("--sigma", sigma, "known noise std; bypasses estimation");
  deblur->add_flag("--sigma-from-manifest", sigma_from_manifest,
                   "use each manifest entry's noise level");
  deblur->add_flag("--color", color, "YUV pipeline for RGB input");
  deblur->add_option("--checkpoint", ckpt, "unrolled-net checkpoint JSON");
  deblur->add_option("--xi-grid", xi_grid, "grid of xi values tuned on the split");
  deblur->add_flag("--trace", trace, "write per-iteration solver trace CSV");

  auto* train = app.add_subcommand("train", "train the unrolled network");
  std::string mode = "greedy", out_ckpt, init_ckpt, loss_name = "kernel-mse";
  std::string grad_method = "analytic";
  int k_layers = 6, epochs = 10, batch = 10;
  double lr = 5e-3, wd = 0.0;
  bool sigma_known = false;
  train->add_option("--manifest", manifest_path, "dataset manifest")->required();
  train->add_option("--mode", mode, "greedy | end2end")->required();
  train->add_option("--out", out_ckpt, "output checkpoint path")->required();
  train->add_option("--init-checkpoint", init_ckpt, "warm-start checkpoint");
  train->add_option("--loss", loss_name, "kernel-mse | ssim");
  train->add_option("--k", k_layers, "layer count for fresh nets");
  train->add_option("--epochs", epochs, "epoch count");
  train->add_option("--lr", lr, "learning rate");
  train->add_option("--wd", wd, "weight decay");
  train->add_option("--batch", batch, "mini-batch size");
  train->add_flag("--sigma-known", sigma_known, "use manifest noise levels instead of rho/tau");
  train->add_option("--grad", grad_method, "analytic | fd");

  auto* evaluate = app.add_subcommand("evaluate", "score results against a manifest");
  std::string results_dir;
  evaluate->add_option("--manifest", manifest_path, "dataset manifest")->required();
  evaluate->add_option("--results", results_dir, "directory of deblur outputs")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  g_log_level = log_level;

  try {
    json config_json = json::object();
    if (!config_path.empty()) config_json = load_json(config_path);
    if (has_seed && !config_json.contains("seed")) config_json["seed"] = seed;

    if (*synth) {
      if (has_seed) return cmd_synthesize(recipe_path, image_dir, out_dir, synth_count,
                                          synth_size, seed, true);
      return cmd_synthesize(recipe_path, image_dir, out_dir, synth_count, synth_size, 0, false);
    }
    if (*deblur) {
      std::optional<double> sigma_opt =
          sigma >= 0.0 ? std::optional<double>(sigma) : std::nullopt;
      return cmd_deblur(input, manifest_path, split, out_dir, config_json, sigma_opt,
                        sigma_from_manifest, color, ckpt, xi_grid, post_cmd, trace, workers);
    }
    if (*train) {
      const std::uint64_t run_seed = config_json.value("seed", seed);
      return cmd_train(manifest_path, mode, out_ckpt, init_ckpt, config_json, loss_name,
                       k_layers, epochs, lr, wd, batch, run_seed, sigma_known, workers,
                       grad_method);
    }
    if (*evaluate) {
      vbd::evaluate(manifest_path, results_dir);
      log_info("wrote report.csv and report.json to " + results_dir);
      return 0;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid config: " << e.what() << '\n';
    return 2;
  } catch (const vbd::io_error& e) {
    std::cerr << "i/o failure: " << e.what() << '\n';
    return 3;
  } catch (const vbd::numerical_error& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  }
  return 0;
}
