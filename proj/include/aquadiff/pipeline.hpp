#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "aquadiff/checkpoint.hpp"
#include "aquadiff/compensation.hpp"
#include "aquadiff/config_text.hpp"
#include "aquadiff/denoiser.hpp"
#include "aquadiff/loss.hpp"
#include "aquadiff/metrics.hpp"
#include "aquadiff/schedule.hpp"

namespace aquadiff {

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LossMode { kEpsMse, kCdc, kBoth };
std::string to_string(LossMode mode);
LossMode parse_loss_mode(const std::string& text);

struct ScheduleConfig {
  int steps = 50;
  double beta_start = 1e-4;
  double beta_end = 0.2;

  NoiseSchedule build() const { return linear_schedule(steps, beta_start, beta_end); }
  std::string to_text() const;
  static ScheduleConfig from_map(const KeyValues& kv);
  friend bool operator==(const ScheduleConfig&, const ScheduleConfig&) = default;
};

struct TrainConfig {
  int iterations = 2000;
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 4;
  int patch_size = 32;
  std::uint64_t seed = 0;
  LossMode loss_mode = LossMode::kBoth;
  double eps_weight = 1.0;
  // CDC terms are scaled by min(gamma_t / (1 - gamma_t), cap); 0 leaves them unscaled.
  double cdc_snr_cap = 1.0;
  // Decay of the weight average used for validation and inference; 0 keeps
  // the latest weights.
  double ema_decay = 0.99;
  // Window of the running-mean loss column.
  int loss_window = 50;
  int checkpoint_every = 0;
  int validate_every = 0;
  std::uint64_t validation_seed = 7;
  // Empty: nothing is written.
  std::string output_dir;

  void validate() const;
  std::string to_text() const;
  static TrainConfig from_map(const KeyValues& kv);
};

/// Everything a `train --config FILE` run reads.
struct RunConfig {
  TrainConfig train;
  DenoiserConfig denoiser;
  ScheduleConfig schedule;
  LossConfig loss;
  CompensationParams compensation;
  // Data: a directory of clean_NNNN.png / degraded_NNNN.png pairs (as written
  // by `synth`), or synthetic pairs generated in memory when empty.
  std::string data_dir;
  int synth_count = 4;
  int synth_size = 32;
  std::uint64_t synth_seed = 0;
  int validation_pairs = 3;

  /// Text stored in checkpoints: denoiser, schedule and compensation settings.
  std::string model_text() const;
  std::string to_text() const;
  /// Unknown keys are rejected.
  static RunConfig from_map(const KeyValues& kv);
};

struct TrainPair {
  std::string name;
  Image clean;
  Image degraded;
  Image condition;  // compensated degraded image, [0,1]
};

struct Dataset {
  std::vector<TrainPair> train;
  std::vector<TrainPair> validation;
};

TrainPair make_pair(std::string name, Image clean, Image degraded, const CompensationParams& comp);
/// Synthetic pairs, or directory pairs when data_dir is set. Validation pairs
/// are synthetic with a separate seed, or the last validation_pairs files of
/// the directory.
Dataset load_dataset(const RunConfig& config);

Image to_model_space(const Image& img);
Image from_model_space(const Image& img);

/// One Adam update of w in place. step counts from 1.
void adam_update(std::span<double> w, std::span<const double> g, std::span<double> m,
                 std::span<double> v, std::uint64_t step, const TrainConfig& config);

struct TrainState {
  Denoiser model;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  // Exponential moving average of the weights, same layout as m and v.
  std::vector<std::vector<double>> ema;
  std::uint64_t step = 0;
  std::mt19937_64 rng;

  TrainState(const DenoiserConfig& config, std::uint64_t seed);
};

// CDC columns hold each term's weighted contribution to total.
struct StepLosses {
  std::uint64_t step = 0;
  int t = 0;
  double total = 0.0;
  double eps_mse = 0.0;
  double pixel = 0.0;
  double multiscale = 0.0;
  double perceptual = 0.0;
  double ssim = 0.0;
  double fft = 0.0;
  double running_mean = 0.0;
};

/// Shared, immutable pieces of a training run.
struct TrainContext {
  NoiseSchedule schedule;
  LossConfig loss;
  FeatureExtractor extractor;
  TrainConfig train;
};
TrainContext make_context(const RunConfig& config);

/// Averaging rate after `step` updates: min(decay, step / (step + 9)).
double ema_rate(double decay, std::uint64_t step);
/// A denoiser holding the averaged weights.
Denoiser averaged_model(const TrainState& state);

/// Draws the batch, corrupts, predicts, applies the loss and one Adam update.
StepLosses train_step(TrainState& state, const std::vector<TrainPair>& data, const TrainContext& ctx);

/// Loss of one pair at a fixed t and noise without touching the state.
StepLosses evaluate_loss(const Denoiser& model, const TrainPair& pair, int t, const Image& eps,
                         const TrainContext& ctx);

struct TrainResult {
  std::vector<StepLosses> log;
  std::optional<double> best_validation_psnr;
  std::uint64_t best_step = 0;
};

/// Runs until state.step reaches config.train.iterations. Writes
/// train_log.csv, checkpoint.ckpt and best.ckpt under output_dir when set.
TrainResult train_loop(TrainState& state, const Dataset& data, const RunConfig& config);

void write_log_header(std::ostream& os);
void write_log_row(std::ostream& os, const StepLosses& s);

Checkpoint make_checkpoint(const TrainState& state, const RunConfig& config);
/// Restores weights, Adam moments, the weight average, the step counter and the RNG.
TrainState restore_state(const Checkpoint& ckpt);

/// Inference bundle rebuilt from a checkpoint; the denoiser holds the averaged weights.
struct Model {
  Denoiser denoiser;
  ScheduleConfig schedule_config;
  NoiseSchedule schedule;
  CompensationParams compensation;
  std::uint64_t digest = 0;
};
Model model_from_checkpoint(const Checkpoint& ckpt);
Model load_model(const std::filesystem::path& path);

struct EnhanceOptions {
  // When set, must match the schedule the checkpoint was trained with.
  std::optional<ScheduleConfig> expected_schedule;
  // Called before each reverse step with the conditioning tensor.
  std::function<void(int t, const ad::Var& y)> on_step;
};

Image enhance(const Denoiser& denoiser, const NoiseSchedule& schedule,
              const CompensationParams& compensation, const Image& degraded, std::uint64_t seed,
              const EnhanceOptions& options = {});
Image enhance(const Model& model, const Image& degraded, std::uint64_t seed,
              const EnhanceOptions& options = {});

/// PNG files in a directory, sorted by name.
std::vector<std::filesystem::path> list_pngs(const std::filesystem::path& dir);

/// Scores every PNG in enhanced_dir; PSNR / SSIM need a reference directory
/// holding the same file names.
MetricReport evaluate(const std::filesystem::path& enhanced_dir,
                      const std::optional<std::filesystem::path>& reference_dir);

struct AblationVariant {
  std::string name;
  bool enhanced_backbone = true;
  LossMode loss_mode = LossMode::kBoth;
};
/// baseline, +cdc, +backbone, full.
std::vector<AblationVariant> ablation_variants(LossMode full_mode = LossMode::kBoth);

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  double final_loss = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
  double uiqm = 0.0;
  double uciqe = 0.0;
};

/// Mean metrics of enhance() over the pairs; pair i is sampled with seed_base + i.
AblationRow score_pairs(const Model& model, const std::vector<TrainPair>& pairs, std::uint64_t seed_base);

RunConfig variant_config(const RunConfig& base, const AblationVariant& variant);
/// Trains one variant and scores enhance() on the training pairs.
AblationRow run_variant(const Dataset& data, const RunConfig& base, const AblationVariant& variant);
void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows);

}  // namespace aquadiff
