#include "aquadiff/pipeline.hpp"


#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <set>
#include <sstream>

#include "aquadiff/degradation.hpp"
#include "aquadiff/ops.hpp"

namespace aquadiff {

using ad::Var;

std::string to_string(LossMode mode) {
  switch (mode) {
    case LossMode::kEpsMse:
      return "eps";
    case LossMode::kCdc:
      return "cdc";
    case LossMode::kBoth:
      return "both";
  }
  return "both";
}

LossMode parse_loss_mode(const std::string& text) {
  if (text == "eps") return LossMode::kEpsMse;
  if (text == "cdc") return LossMode::kCdc;
  if (text == "both") return LossMode::kBoth;
  throw ParameterError("loss_mode must be eps, cdc or both, got '" + text + "'");
}

// ---------------------------------------------------------------------------
// Configuration text

std::string ScheduleConfig::to_text() const {
  return "T=" + std::to_string(steps) + "\nbeta_start=" + format_double(beta_start) +
         "\nbeta_end=" + format_double(beta_end) + "\n";
}

ScheduleConfig ScheduleConfig::from_map(const KeyValues& kv) {
  ScheduleConfig c;
  read_value(kv, "T", c.steps);
  read_value(kv, "beta_start", c.beta_start);
  read_value(kv, "beta_end", c.beta_end);
  return c;
}

void TrainConfig::validate() const {
  if (iterations < 0) throw ParameterError("train: iterations must be >= 0");
  if (!(learning_rate > 0.0)) throw ParameterError("train: learning_rate must be > 0");
  if (batch_size < 1) throw ParameterError("train: batch_size must be >= 1");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ParameterError("train: Adam betas must lie in [0,1)");
  }
  if (!(cdc_snr_cap >= 0.0)) throw ParameterError("train: cdc_snr_cap must be >= 0");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ParameterError("train: ema_decay must lie in [0,1)");
  if (!(adam_eps > 0.0)) throw ParameterError("train: adam_eps must be > 0");
  if (patch_size < 1 || loss_window < 1) throw ParameterError("train: patch_size, loss_window >= 1");
}

std::string TrainConfig::to_text() const {
  std::ostringstream os;
  os << "iterations=" << iterations << "\n"
     << "learning_rate=" << format_double(learning_rate) << "\n"
     << "adam_beta1=" << format_double(adam_beta1) << "\n"
     << "adam_beta2=" << format_double(adam_beta2) << "\n"
     << "adam_eps=" << format_double(adam_eps) << "\n"
     << "batch_size=" << batch_size << "\n"
     << "patch_size=" << patch_size << "\n"
     << "seed=" << seed << "\n"
     << "loss_mode=" << to_string(loss_mode) << "\n"
     << "eps_weight=" << format_double(eps_weight) << "\n"
     << "cdc_snr_cap=" << format_double(cdc_snr_cap) << "\n"
     << "ema_decay=" << format_double(ema_decay) << "\n"
     << "loss_window=" << loss_window << "\n"
     << "checkpoint_every=" << checkpoint_every << "\n"
     << "validate_every=" << validate_every << "\n"
     << "validation_seed=" << validation_seed << "\n"
     << "output_dir=" << output_dir << "\n";
  return os.str();
}

TrainConfig TrainConfig::from_map(const KeyValues& kv) {
  TrainConfig c;
  read_value(kv, "iterations", c.iterations);
  read_value(kv, "learning_rate", c.learning_rate);
  read_value(kv, "adam_beta1", c.adam_beta1);
  read_value(kv, "adam_beta2", c.adam_beta2);
  read_value(kv, "adam_eps", c.adam_eps);
  read_value(kv, "batch_size", c.batch_size);
  read_value(kv, "patch_size", c.patch_size);
  read_value(kv, "seed", c.seed);
  if (auto it = kv.find("loss_mode"); it != kv.end()) c.loss_mode = parse_loss_mode(it->second);
  read_value(kv, "eps_weight", c.eps_weight);
  read_value(kv, "cdc_snr_cap", c.cdc_snr_cap);
  read_value(kv, "ema_decay", c.ema_decay);
  read_value(kv, "loss_window", c.loss_window);
  read_value(kv, "checkpoint_every", c.checkpoint_every);
  read_value(kv, "validate_every", c.validate_every);
  read_value(kv, "validation_seed", c.validation_seed);
  read_value(kv, "output_dir", c.output_dir);
  return c;
}

namespace {

std::string compensation_text(const CompensationParams& p) {
  return "kappa=" + format_double(p.kappa) + "\nlambda_b=" + format_double(p.lambda_b) +
         "\nmask_threshold=" + format_double(p.mask_threshold) +
         "\nblur_sigma_channels=" + format_double(p.blur_sigma_channels) +
         "\nmask_smooth_sigma=" + format_double(p.mask_smooth_sigma) + "\n";
}

CompensationParams compensation_from_map(const KeyValues& kv) {
  CompensationParams p;
  read_value(kv, "kappa", p.kappa);
  read_value(kv, "lambda_b", p.lambda_b);
  read_value(kv, "mask_threshold", p.mask_threshold);
  read_value(kv, "blur_sigma_channels", p.blur_sigma_channels);
  read_value(kv, "mask_smooth_sigma", p.mask_smooth_sigma);
  return p;
}

}  // namespace

std::string RunConfig::model_text() const {
  return denoiser.to_text() + schedule.to_text() + compensation_text(compensation);
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os << train.to_text() << model_text() << loss.to_text() << "data_dir=" << data_dir << "\n"
     << "synth_count=" << synth_count << "\n"
     << "synth_size=" << synth_size << "\n"
     << "synth_seed=" << synth_seed << "\n"
     << "validation_pairs=" << validation_pairs << "\n";
  return os.str();
}

RunConfig RunConfig::from_map(const KeyValues& kv) {
  const KeyValues known = parse_key_values(RunConfig{}.to_text());
  std::string unknown;
  for (const auto& [k, v] : kv) {
    if (!known.count(k)) unknown += (unknown.empty() ? "" : ", ") + k;
  }
  if (!unknown.empty()) throw ParameterError("config: unknown keys: " + unknown);
  RunConfig c;
  c.train = TrainConfig::from_map(kv);
  c.denoiser = DenoiserConfig::from_map(kv);
  c.schedule = ScheduleConfig::from_map(kv);
  c.loss = LossConfig::from_map(kv);
  c.compensation = compensation_from_map(kv);
  read_value(kv, "data_dir", c.data_dir);
  read_value(kv, "synth_count", c.synth_count);
  read_value(kv, "synth_size", c.synth_size);
  read_value(kv, "synth_seed", c.synth_seed);
  read_value(kv, "validation_pairs", c.validation_pairs);
  return c;
}

// ---------------------------------------------------------------------------
// Data

TrainPair make_pair(std::string name, Image clean, Image degraded, const CompensationParams& comp) {
  require_channels(clean, 3, "training pair");
  require_same_shape(clean, degraded, "training pair");
  TrainPair p;
  p.name = std::move(name);
  p.condition = preprocess(degraded, comp);
  p.clean = std::move(clean);
  p.degraded = std::move(degraded);
  return p;
}

std::vector<std::filesystem::path> list_pngs(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

Dataset load_dataset(const RunConfig& config) {
  Dataset d;
  if (config.data_dir.empty()) {
    int i = 0;
    for (SamplePair& s : make_dataset(config.synth_count, config.synth_size, config.synth_seed)) {
      d.train.push_back(make_pair("pair_" + std::to_string(i++), std::move(s.clean),
                                  std::move(s.degraded), config.compensation));
    }
    if (config.validation_pairs > 0) {
      i = 0;
      for (SamplePair& s : make_dataset(config.validation_pairs, config.synth_size,
                                        config.synth_seed + 1000003)) {
        d.validation.push_back(make_pair("val_" + std::to_string(i++), std::move(s.clean),
                                         std::move(s.degraded), config.compensation));
      }
    }
    return d;
  }
  const std::filesystem::path dir = config.data_dir;
  std::vector<TrainPair> all;
  std::string missing;
  for (const auto& path : list_pngs(dir)) {
    const std::string name = path.filename().string();
    if (name.rfind("clean_", 0) != 0) continue;
    const std::filesystem::path deg = dir / ("degraded_" + name.substr(6));
    if (!std::filesystem::exists(deg)) {
      missing += " " + deg.filename().string();
      continue;
    }
    all.push_back(make_pair(name.substr(6, name.size() - 10), read_png(path), read_png(deg),
                            config.compensation));
  }
  if (!missing.empty()) throw IoError("dataset " + dir.string() + ": missing degraded files:" + missing);
  if (all.empty()) throw IoError("dataset " + dir.string() + ": no clean_*.png files");
  const std::size_t nval = static_cast<std::size_t>(std::max(0, config.validation_pairs));
  if (all.size() > nval && nval > 0) {
    d.validation.assign(std::make_move_iterator(all.end() - static_cast<std::ptrdiff_t>(nval)),
                        std::make_move_iterator(all.end()));
    all.resize(all.size() - nval);
  }
  d.train = std::move(all);
  return d;
}

Image to_model_space(const Image& img) {
  Image out = img;
  for (double& v : out.values()) v = 2.0 * v - 1.0;
  return out;
}

Image from_model_space(const Image& img) {
  Image out = img;
  for (double& v : out.values()) v = std::clamp(0.5 * (v + 1.0), 0.0, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Training

void adam_update(std::span<double> w, std::span<const double> g, std::span<double> m,
                 std::span<double> v, std::uint64_t step, const TrainConfig& c) {
  if (g.size() != w.size() || m.size() != w.size() || v.size() != w.size()) {
    throw DimensionError("adam_update: moment and gradient sizes must match the weights");
  }
  if (step < 1) throw ParameterError("adam_update: step counts from 1");
  const double b1 = c.adam_beta1, b2 = c.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
  for (std::size_t i = 0; i < w.size(); ++i) {
    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
    w[i] -= c.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + c.adam_eps);
  }
}

TrainState::TrainState(const DenoiserConfig& config, std::uint64_t seed) : model(config), rng(seed) {
  for (const auto& e : model.weights().entries()) {
    m.emplace_back(e.second.size(), 0.0);
    v.emplace_back(e.second.size(), 0.0);
    ema.emplace_back(e.second.value().begin(), e.second.value().end());
  }
}

double ema_rate(double decay, std::uint64_t step) {
  return std::min(decay, static_cast<double>(step) / static_cast<double>(step + 9));
}

Denoiser averaged_model(const TrainState& state) {
  Denoiser d(state.model.config());
  auto& entries = d.weights().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    std::copy(state.ema[i].begin(), state.ema[i].end(), entries[i].second.mutable_value().begin());
  }
  return d;
}

TrainContext make_context(const RunConfig& config) {
  config.train.validate();
  config.loss.validate();
  config.compensation.validate();
  return TrainContext{config.schedule.build(), config.loss,
                      FeatureExtractor::default_stack(config.loss.extractor_seed), config.train};
}

namespace {

Image crop(const Image& img, int oy, int ox, int h, int w) {
  if (oy == 0 && ox == 0 && h == img.height() && w == img.width()) return img;
  Image out(h, w, img.channels());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < img.channels(); ++c) out.at(y, x, c) = img.at(oy + y, ox + x, c);
  return out;
}

Image normal_image(int h, int w, int c, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Image out(h, w, c);
  for (double& v : out.values()) v = n(rng);
  return out;
}

// Loss of one sample. clean / condition are image-space crops.
StepLosses sample_loss(const Denoiser& model, const Image& clean, const Image& condition, int t,
                       const Image& eps, const TrainContext& ctx, Var* total_out) {
  const NoiseSchedule& s = ctx.schedule;
  const Image x_t = q_sample(to_model_space(clean), t, eps, s);
  const Var X = ad::from_image(x_t);
  const Var eps_hat = model.forward(X, ad::from_image(to_model_space(condition)), t);

  StepLosses out;
  out.t = t;
  Var total = Var::scalar(0.0);
  const LossMode mode = ctx.train.loss_mode;
  if (mode != LossMode::kCdc) {
    const Var mse = ad::mean(ad::square(ad::sub(eps_hat, ad::from_image(eps))));
    out.eps_mse = mse.item();
    total = ad::add(total, ad::scale(mse, ctx.train.eps_weight));
  }
  if (mode != LossMode::kEpsMse) {
    const double g = s.gamma(t);
    const Var x0_hat = ad::scale(ad::sub(X, ad::scale(eps_hat, std::sqrt(1.0 - g))), 1.0 / std::sqrt(g));
    const Var image = ad::add_scalar(ad::scale(x0_hat, 0.5), 0.5);
    const CdcBreakdown cdc = cdc_total(image, ad::from_image(clean), ctx.extractor, ctx.loss);
    const double cap = ctx.train.cdc_snr_cap;
    const double wcdc = cap > 0.0 ? std::min(g / (1.0 - g), cap) : 1.0;
    out.pixel = wcdc * cdc.pixel;
    out.multiscale = wcdc * cdc.multiscale;
    out.perceptual = wcdc * cdc.perceptual;
    out.ssim = wcdc * cdc.ssim;
    out.fft = wcdc * cdc.fft;
    total = ad::add(total, ad::scale(cdc.total, wcdc));
  }
  out.total = total.item();
  if (total_out) *total_out = total;
  return out;
}

}  // namespace

StepLosses train_step(TrainState& state, const std::vector<TrainPair>& data, const TrainContext& ctx) {
  if (data.empty()) throw ParameterError("train_step: empty dataset");
  const TrainConfig& tc = ctx.train;
  DenoiserWeights& weights = state.model.weights();
  weights.zero_grad();

  StepLosses acc;
  const double inv_b = 1.0 / tc.batch_size;
  for (int b = 0; b < tc.batch_size; ++b) {
    const TrainPair& pair =
        data[std::uniform_int_distribution<std::size_t>(0, data.size() - 1)(state.rng)];
    const int h = std::min(tc.patch_size, pair.clean.height());
    const int w = std::min(tc.patch_size, pair.clean.width());
    const int oy = std::uniform_int_distribution<int>(0, pair.clean.height() - h)(state.rng);
    const int ox = std::uniform_int_distribution<int>(0, pair.clean.width() - w)(state.rng);
    const int t = std::uniform_int_distribution<int>(1, ctx.schedule.steps())(state.rng);
    const Image eps = normal_image(h, w, 3, state.rng);

    Var total;
    const StepLosses one = sample_loss(state.model, crop(pair.clean, oy, ox, h, w),
                                       crop(pair.condition, oy, ox, h, w), t, eps, ctx, &total);
    ad::backward(ad::scale(total, inv_b));
    acc.t = one.t;
    acc.total += inv_b * one.total;
    acc.eps_mse += inv_b * one.eps_mse;
    acc.pixel += inv_b * one.pixel;
    acc.multiscale += inv_b * one.multiscale;
    acc.perceptual += inv_b * one.perceptual;
    acc.ssim += inv_b * one.ssim;
    acc.fft += inv_b * one.fft;
  }
  if (!std::isfinite(acc.total)) {
    throw NonFiniteLoss("train_step: non-finite loss at step " + std::to_string(state.step + 1));
  }

  ++state.step;
  auto& entries = weights.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Var& p = entries[i].second;
    adam_update(p.mutable_value(), p.grad(), state.m[i], state.v[i], state.step, tc);
  }
  const double d = ema_rate(tc.ema_decay, state.step);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto w = entries[i].second.value();
    std::vector<double>& e = state.ema[i];
    for (std::size_t j = 0; j < e.size(); ++j) e[j] = d * e[j] + (1.0 - d) * w[j];
  }
  acc.step = state.step;
  acc.running_mean = acc.total;
  return acc;
}

StepLosses evaluate_loss(const Denoiser& model, const TrainPair& pair, int t, const Image& eps,
                         const TrainContext& ctx) {
  const ad::NoGradGuard no_grad;
  return sample_loss(model, pair.clean, pair.condition, t, eps, ctx, nullptr);
}

void write_log_header(std::ostream& os) {
  os << "step,t,total,eps_mse,pixel,multiscale,perceptual,ssim,fft,running_mean\n";
}

void write_log_row(std::ostream& os, const StepLosses& s) {
  os << s.step << "," << s.t << "," << format_double(s.total) << "," << format_double(s.eps_mse)
     << "," << format_double(s.pixel) << "," << format_double(s.multiscale) << ","
     << format_double(s.perceptual) << "," << format_double(s.ssim) << "," << format_double(s.fft)
     << "," << format_double(s.running_mean) << "\n";
}

namespace {

double validation_psnr(const Denoiser& model, const TrainContext& ctx, const RunConfig& config,
                       const std::vector<TrainPair>& pairs) {
  double sum = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const Image out = enhance(model, ctx.schedule, config.compensation, pairs[i].degraded,
                              config.train.validation_seed + i);
    sum += psnr(out, pairs[i].clean);
  }
  return sum / static_cast<double>(pairs.size());
}

}  // namespace

TrainResult train_loop(TrainState& state, const Dataset& data, const RunConfig& config) {
  if (data.train.empty()) throw ParameterError("train_loop: empty dataset");
  const TrainContext ctx = make_context(config);
  const TrainConfig& tc = config.train;
  if (!ctx.schedule.terminal_is_noise()) {
    throw ParameterError("train_loop: schedule leaves 1 - gamma_T <= 0.99; x_T would not be noise");
  }

  const bool write = !tc.output_dir.empty();
  const std::filesystem::path out_dir = tc.output_dir;
  std::ofstream log;
  if (write) {
    std::filesystem::create_directories(out_dir);
    const auto log_path = out_dir / "train_log.csv";
    const bool append = state.step > 0 && std::filesystem::exists(log_path);
    log.open(log_path, append ? std::ios::app : std::ios::trunc);
    if (!log) throw IoError("cannot write " + log_path.string());
    if (!append) write_log_header(log);
  }

  TrainResult result;
  std::deque<double> window;
  double window_sum = 0.0;
  while (state.step < static_cast<std::uint64_t>(tc.iterations)) {
    StepLosses s = train_step(state, data.train, ctx);
    window.push_back(s.total);
    window_sum += s.total;
    if (window.size() > static_cast<std::size_t>(tc.loss_window)) {
      window_sum -= window.front();
      window.pop_front();
    }
    s.running_mean = window_sum / static_cast<double>(window.size());
    if (write) write_log_row(log, s);
    result.log.push_back(s);

    const bool last = state.step == static_cast<std::uint64_t>(tc.iterations);
    if (tc.validate_every > 0 && !data.validation.empty() &&
        (state.step % static_cast<std::uint64_t>(tc.validate_every) == 0 || last)) {
      const double v = validation_psnr(averaged_model(state), ctx, config, data.validation);
      if (!result.best_validation_psnr || v > *result.best_validation_psnr) {
        result.best_validation_psnr = v;
        result.best_step = state.step;
        if (write) save_checkpoint(out_dir / "best.ckpt", make_checkpoint(state, config));
      }
    }
    if (write && ((tc.checkpoint_every > 0 &&
                   state.step % static_cast<std::uint64_t>(tc.checkpoint_every) == 0) ||
                  last)) {
      save_checkpoint(out_dir / "checkpoint.ckpt", make_checkpoint(state, config));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

Checkpoint make_checkpoint(const TrainState& state, const RunConfig& config) {
  Checkpoint c;
  c.config_text = config.model_text();
  c.step = state.step;
  std::ostringstream rng;
  rng << state.rng;
  c.rng_state = rng.str();
  const auto& entries = state.model.weights().entries();
  for (const auto& [name, var] : entries) {
    c.tensors.push_back({name, var.shape(), std::vector<double>(var.value().begin(), var.value().end())});
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    c.tensors.push_back({"adam.m/" + entries[i].first, entries[i].second.shape(), state.m[i]});
    c.tensors.push_back({"adam.v/" + entries[i].first, entries[i].second.shape(), state.v[i]});
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    c.tensors.push_back({"ema/" + entries[i].first, entries[i].second.shape(), state.ema[i]});
  }
  return c;
}

namespace {

void copy_tensor(const Checkpoint& ckpt, const std::string& name, const ad::Shape& shape,
                 std::span<double> dst) {
  const NamedTensor* t = ckpt.find(name);
  if (!t) throw IoError("checkpoint: missing tensor " + name);
  if (t->shape != shape) {
    throw DimensionError("checkpoint: tensor " + name + " has shape " + ad::shape_string(t->shape) +
                         ", expected " + ad::shape_string(shape));
  }
  std::copy(t->values.begin(), t->values.end(), dst.begin());
}

void load_weights(Denoiser& model, const Checkpoint& ckpt) {
  for (auto& [name, var] : model.weights().entries()) {
    copy_tensor(ckpt, name, var.shape(), var.mutable_value());
  }
}

}  // namespace

TrainState restore_state(const Checkpoint& ckpt) {
  const KeyValues kv = parse_key_values(ckpt.config_text);
  TrainState state(DenoiserConfig::from_map(kv), 0);
  load_weights(state.model, ckpt);
  const auto& entries = state.model.weights().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    copy_tensor(ckpt, "adam.m/" + entries[i].first, entries[i].second.shape(), state.m[i]);
    copy_tensor(ckpt, "adam.v/" + entries[i].first, entries[i].second.shape(), state.v[i]);
    copy_tensor(ckpt, "ema/" + entries[i].first, entries[i].second.shape(), state.ema[i]);
  }
  state.step = ckpt.step;
  std::istringstream rng(ckpt.rng_state);
  rng >> state.rng;
  if (!rng) throw IoError("checkpoint: unreadable RNG state");
  return state;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  const KeyValues kv = parse_key_values(ckpt.config_text);
  const ScheduleConfig sc = ScheduleConfig::from_map(kv);
  Model m{Denoiser(DenoiserConfig::from_map(kv)), sc, sc.build(), compensation_from_map(kv),
          fnv1a64(ckpt.config_text)};
  for (auto& [name, var] : m.denoiser.weights().entries()) {
    copy_tensor(ckpt, "ema/" + name, var.shape(), var.mutable_value());
  }
  return m;
}

Model load_model(const std::filesystem::path& path) { return model_from_checkpoint(load_checkpoint(path)); }

// ---------------------------------------------------------------------------
// Inference

Image enhance(const Denoiser& denoiser, const NoiseSchedule& schedule,
              const CompensationParams& compensation, const Image& degraded, std::uint64_t seed,
              const EnhanceOptions& options) {
  require_channels(degraded, 3, "enhance");
  const int div = 1 << (denoiser.config().levels() - 1);
  if (degraded.height() % div != 0 || degraded.width() % div != 0) {
    throw DimensionError("enhance: image " + std::to_string(degraded.height()) + "x" +
                         std::to_string(degraded.width()) + " not divisible by " + std::to_string(div));
  }
  const ad::NoGradGuard no_grad;
  const Var y = ad::from_image(to_model_space(preprocess(degraded, compensation)));
  std::mt19937_64 rng(seed);
  const int h = degraded.height(), w = degraded.width();
  Image x = normal_image(h, w, 3, rng);
  for (int t = schedule.steps(); t >= 1; --t) {
    if (options.on_step) options.on_step(t, y);
    const Image eps = ad::to_image(denoiser.forward(ad::from_image(x), y, t));
    if (t > 1) {
      const Image z = normal_image(h, w, 3, rng);
      x = reverse_step_clamped(x, eps, t, &z, schedule);
    } else {
      x = reverse_step_clamped(x, eps, t, nullptr, schedule);
    }
  }
  return from_model_space(x);
}

Image enhance(const Model& model, const Image& degraded, std::uint64_t seed,
              const EnhanceOptions& options) {
  if (options.expected_schedule && !(*options.expected_schedule == model.schedule_config)) {
    auto one_line = [](std::string text) {
      std::replace(text.begin(), text.end(), '\n', ' ');
      return text;
    };
    throw ParameterError("enhance: schedule " + one_line(options.expected_schedule->to_text()) +
                         "does not match the checkpoint's " + one_line(model.schedule_config.to_text()));
  }
  return enhance(model.denoiser, model.schedule, model.compensation, degraded, seed, options);
}

// ---------------------------------------------------------------------------
// Evaluation

MetricReport evaluate(const std::filesystem::path& enhanced_dir,
                      const std::optional<std::filesystem::path>& reference_dir) {
  const auto files = list_pngs(enhanced_dir);
  if (files.empty()) throw IoError("evaluate: no PNG files in " + enhanced_dir.string());
  if (reference_dir) {
    std::set<std::string> ours, theirs;
    for (const auto& f : files) ours.insert(f.filename().string());
    for (const auto& f : list_pngs(*reference_dir)) theirs.insert(f.filename().string());
    std::string unpaired;
    for (const auto& n : ours)
      if (!theirs.count(n)) unpaired += " " + n + " (no reference)";
    for (const auto& n : theirs)
      if (!ours.count(n)) unpaired += " " + n + " (no enhanced image)";
    if (!unpaired.empty()) throw IoError("evaluate: unpaired files:" + unpaired);
  }
  MetricReport report;
  for (const auto& f : files) {
    const Image img = read_png(f);
    if (reference_dir) {
      const Image ref = read_png(*reference_dir / f.filename());
      report.add(score_image(f.filename().string(), img, &ref));
    } else {
      report.add(score_image(f.filename().string(), img, nullptr));
    }
  }
  report.finalize();
  return report;
}

// ---------------------------------------------------------------------------
// Ablation

std::vector<AblationVariant> ablation_variants(LossMode full_mode) {
  return {{"baseline", false, LossMode::kEpsMse},
          {"+cdc", false, full_mode},
          {"+backbone", true, LossMode::kEpsMse},
          {"full", true, full_mode}};
}

RunConfig variant_config(const RunConfig& base, const AblationVariant& variant) {
  RunConfig c = base;
  if (!variant.enhanced_backbone) c.denoiser = DenoiserConfig::standard_unet(base.denoiser);
  c.train.loss_mode = variant.loss_mode;
  return c;
}

AblationRow score_pairs(const Model& model, const std::vector<TrainPair>& pairs, std::uint64_t seed_base) {
  AblationRow row;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const Image out = enhance(model, pairs[i].degraded, seed_base + i);
    row.psnr += psnr(out, pairs[i].clean);
    row.ssim += ssim_metric(out, pairs[i].clean);
    row.uiqm += uiqm(out);
    row.uciqe += uciqe(out);
  }
  const double n = static_cast<double>(pairs.size());
  row.psnr /= n;
  row.ssim /= n;
  row.uiqm /= n;
  row.uciqe /= n;
  return row;
}

AblationRow run_variant(const Dataset& data, const RunConfig& base, const AblationVariant& variant) {
  const RunConfig config = variant_config(base, variant);
  TrainState state(config.denoiser, config.train.seed);
  const TrainResult result = train_loop(state, data, config);
  const Model model = model_from_checkpoint(make_checkpoint(state, config));

  AblationRow row = score_pairs(model, data.train, config.train.validation_seed);
  row.variant = variant.name;
  row.seed = config.train.seed;
  row.final_loss = result.log.empty() ? 0.0 : result.log.back().running_mean;
  return row;
}

void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << "variant,seed,final_loss,uiqm,uciqe,psnr,ssim\n";
  for (const AblationRow& r : rows) {
    os << r.variant << "," << r.seed << "," << format_double(r.final_loss) << ","
       << format_double(r.uiqm) << "," << format_double(r.uciqe) << "," << format_double(r.psnr)
       << "," << format_double(r.ssim) << "\n";
  }
}

}  // namespace aquadiff
