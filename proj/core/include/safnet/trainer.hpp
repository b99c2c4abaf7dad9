#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "safnet/datakit.hpp"
#include "safnet/losses.hpp"
#include "safnet/model.hpp"

namespace safnet {

struct TrainConfig {
  ModelConfig model = ModelConfig::for_variant(Variant::SafNet);
  int s1_crop = 512;    // stage-1 crop (flow, masks, merge)
  int s2_window = 128;  // refiner tile
  int batch = 4;
  int epochs = 200;
  // When > 0 replaces epochs * steps_per_epoch as the schedule length.
  long steps = 0;
  double lr_max = 2e-4;
  double lr_min = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  LossWeights loss;
  CensusOptions census;
  std::uint64_t perceptual_seed = 7;
  // Stop refiner gradients at the stage-1 outputs.
  bool detach = false;
  int checkpoint_every = 0;  // steps; 0 = only at the end
  int eval_every = 0;        // steps; 0 = only at the end

  // Throws ConfigError naming the offending field.
  void validate() const;
  std::string to_json() const;
  // Accepts a partial object; unknown keys are rejected.
  static TrainConfig from_json(std::string_view text);
};

// lr_min + (lr_max - lr_min) * (1 + cos(pi * step / (total - 1))) / 2.
double cosine_lr(double lr_max, double lr_min, long step, long total_steps);

// One draw of the training augmentation.
struct AugmentDraw {
  int top = 0;
  int left = 0;
  bool flip_h = false;
  bool flip_v = false;
  int rot90 = 0;  // counter-clockwise quarter turns
  bool reverse_channels = false;

  static AugmentDraw sample(std::mt19937_64& rng, int height, int width, int crop);
};

// Crop, then horizontal flip, vertical flip, rotation and channel reversal.
// x: 1 x C x H x W with H, W >= crop.
TensorD apply_augment(const TensorD& x, const AugmentDraw& draw, int crop);

struct TrainSample {
  std::array<TensorD, 3> ldr;     // 1 x 3 x crop x crop
  std::array<double, 3> exposure;  // linear exposure times
  TensorD gt;
};

// Scenes smaller than the crop are reflect-padded first. Requires gt.
TrainSample augment_sample(const Scene& scene, const AugmentDraw& draw, int crop);

template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(double beta1, double beta2, double eps) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // One update of every parameter that has a gradient.
  void step(Weights<T>& weights, double lr);

  long t() const { return t_; }
  // Moments as "optim.m.<name>" / "optim.v.<name>" arrays.
  std::vector<std::pair<std::string, TensorD>> state() const;
  void load_state(const std::vector<std::pair<std::string, TensorD>>& arrays, long t);

 private:
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
  std::vector<std::pair<std::string, Tensor<T>>> m_, v_;
};

struct StepRecord {
  long step = 0;
  double lr = 0;
  LossReport loss;
  std::optional<double> eval_psnr_mu;
};

// Writes step,lr,l1_r,perc_r,l1_m,census_m,total,eval_psnr_mu.
void write_metrics_csv(const std::filesystem::path& path, const std::vector<StepRecord>& rows);

// Training state: weights, optimiser moments, RNG, step counter and history.
// Networks train in T; checkpoints store float64.
template <typename T>
class Trainer {
 public:
  Trainer(TrainConfig cfg, Weights<T> weights);
  // Fresh He-initialised weights from cfg.seed.
  explicit Trainer(TrainConfig cfg);

  // Restores everything saved by save(); training continues bit-identically.
  static Trainer resume(const std::filesystem::path& checkpoint);

  const TrainConfig& config() const { return cfg_; }
  const SafNet<T>& net() const { return net_; }
  long step_count() const { return step_; }
  const std::vector<StepRecord>& history() const { return history_; }

  long total_steps(std::size_t dataset_size) const;
  double lr_at(long step, long total) const;

  // Augmented batch drawn from the trainer RNG; consumes the shuffled epoch
  // order of `scenes`.
  std::vector<TrainSample> next_batch(const std::vector<Scene>& scenes);

  // Forward on window-partitioned tiles, loss, backward and one Adam update.
  // Throws DivergenceError (before touching the weights) if the loss is not
  // finite.
  LossReport train_step(const std::vector<TrainSample>& batch, long total_steps);

  // Loss of the training path without an update.
  LossReport probe_loss(const std::vector<TrainSample>& batch) const;

  // Mean PSNR-mu of the refined output over scenes with ground truth, using
  // the whole-frame inference path.
  double evaluate(const std::vector<Scene>& scenes) const;

  // Attaches an evaluation score to the latest history entry.
  void record_eval(double psnr_mu);

  void save(const std::filesystem::path& checkpoint) const;

 private:
  TrainConfig cfg_;
  SafNet<T> net_;
  Adam<T> adam_;
  RandomConvFeatures<T> features_;
  std::mt19937_64 rng_;
  long step_ = 0;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::vector<StepRecord> history_;

  NetworkOutput<T> run(const std::vector<TrainSample>& batch) const;
  LossTerms<T> losses(const NetworkOutput<T>& out, const std::vector<TrainSample>& batch) const;
};

struct FitOptions {
  std::filesystem::path out_dir;  // checkpoints and metrics.csv; empty = none
  std::function<void(const StepRecord&)> on_step;
};

struct FitResult {
  std::vector<StepRecord> history;
  std::filesystem::path checkpoint;  // final checkpoint, if written
};

// Runs until the schedule ends. Writes <out_dir>/last.ckpt periodically and
// at the end, and <out_dir>/metrics.csv. On a non-finite loss the current
// (still finite) state is saved and DivergenceError is rethrown.
template <typename T>
FitResult fit(Trainer<T>& trainer, const std::vector<Scene>& train,
              const std::vector<Scene>& eval, const FitOptions& options);

}  // namespace safnet
