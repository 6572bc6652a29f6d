#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "aquadiff/degradation.hpp"
#include "aquadiff/pipeline.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace aquadiff;
using aquadiff::testing::random_image;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_run() {
  RunConfig c;
  c.denoiser.image_size = 8;
  c.denoiser.base_channels = 8;
  c.denoiser.channel_multipliers = {1, 2};
  c.denoiser.num_res_blocks = 1;
  c.denoiser.attention_resolutions = {4};
  c.denoiser.rdb_growth = 4;
  c.denoiser.rdb_layers = 2;
  c.denoiser.time_embed_dim = 16;
  c.denoiser.norm_groups = 4;
  c.schedule = {20, 1e-3, 0.5};
  c.loss.ssim_window = 7;
  c.synth_count = 2;
  c.synth_size = 8;
  c.validation_pairs = 1;
  c.train.patch_size = 8;
  c.train.iterations = 6;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "aquadiff_test_pipeline" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<double> flat_weights(const Denoiser& d) {
  std::vector<double> out;
  for (const auto& [name, v] : d.weights().entries()) out.insert(out.end(), v.value().begin(), v.value().end());
  return out;
}

}  // namespace

TEST_CASE("adam step by hand") {
  TrainConfig c;
  c.learning_rate = 0.1;
  std::vector<double> w{1.0, -2.0}, g{0.5, -4.0}, m(2, 0.0), v(2, 0.0);
  adam_update(w, g, m, v, 1, c);
  CHECK(m[0] == doctest::Approx(0.05));
  CHECK(v[0] == doctest::Approx(0.00025));
  CHECK(w[0] == doctest::Approx(0.9).epsilon(1e-7));
  CHECK(w[1] == doctest::Approx(-1.9).epsilon(1e-7));
  adam_update(w, g, m, v, 2, c);
  CHECK(w[0] == doctest::Approx(0.8).epsilon(1e-7));
  std::vector<double> short_g{1.0};
  CHECK_THROWS_AS(adam_update(w, short_g, m, v, 3, c), DimensionError);
  CHECK_THROWS_AS(adam_update(w, g, m, v, 0, c), ParameterError);
}

TEST_CASE("model space mapping") {
  const Image img = random_image(4, 4, 3, 1);
  CHECK(aquadiff::testing::max_abs_diff(from_model_space(to_model_space(img)), img) < 1e-15);
  const Image high = from_model_space(Image(2, 2, 3, 3.0));
  for (double v : high.data()) CHECK(v == 1.0);
  const Image low = from_model_space(Image(2, 2, 3, -3.0));
  for (double v : low.data()) CHECK(v == 0.0);
}

TEST_CASE("training is deterministic and finite") {
  const RunConfig config = tiny_run();
  const Dataset data = load_dataset(config);
  REQUIRE(data.train.size() == 2);
  REQUIRE(data.validation.size() == 1);
  const TrainContext ctx = make_context(config);
  TrainState a(config.denoiser, 3), b(config.denoiser, 3);
  for (int i = 0; i < 10; ++i) {
    const StepLosses la = train_step(a, data.train, ctx);
    const StepLosses lb = train_step(b, data.train, ctx);
    CHECK(std::isfinite(la.total));
    CHECK(la.total == lb.total);
    CHECK(la.t == lb.t);
    CHECK(la.total == doctest::Approx(la.eps_mse + la.pixel + la.multiscale + la.perceptual + la.ssim + la.fft));
  }
  CHECK(a.step == 10u);
  CHECK(flat_weights(a.model) == flat_weights(b.model));
  TrainState c(config.denoiser, 4);
  train_step(c, data.train, ctx);
  CHECK(flat_weights(c.model) != flat_weights(a.model));
  CHECK_THROWS_AS(train_step(c, {}, ctx), ParameterError);
}

TEST_CASE("weight average") {
  CHECK(ema_rate(0.99, 1) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(ema_rate(0.99, 11) == doctest::Approx(0.55).epsilon(1e-15));
  CHECK(ema_rate(0.99, 5000) == 0.99);
  CHECK(ema_rate(0.0, 7) == 0.0);

  RunConfig config = tiny_run();
  const Dataset data = load_dataset(config);
  TrainState state(config.denoiser, 2);
  const std::vector<double> w0 = flat_weights(state.model);
  auto flat_ema = [](const TrainState& s) {
    std::vector<double> out;
    for (const auto& e : s.ema) out.insert(out.end(), e.begin(), e.end());
    return out;
  };
  CHECK(flat_ema(state) == w0);
  train_step(state, data.train, make_context(config));
  const std::vector<double> w1 = flat_weights(state.model), e1 = flat_ema(state);
  REQUIRE(e1.size() == w1.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < w1.size(); ++i) worst = std::max(worst, std::abs(e1[i] - (0.1 * w0[i] + 0.9 * w1[i])));
  CHECK(worst < 1e-15);
  CHECK(flat_weights(averaged_model(state)) == e1);

  // Inference loads the average.
  const std::vector<double> loaded = flat_weights(model_from_checkpoint(make_checkpoint(state, config)).denoiser);
  CHECK(loaded == e1);
  CHECK(loaded != w1);

  config.train.ema_decay = 0.0;
  TrainState plain(config.denoiser, 2);
  const TrainContext ctx = make_context(config);
  for (int i = 0; i < 3; ++i) train_step(plain, data.train, ctx);
  CHECK(flat_ema(plain) == flat_weights(plain.model));
  config.train.ema_decay = 1.0;
  CHECK_THROWS_AS(config.train.validate(), ParameterError);
}

TEST_CASE("loss modes") {
  RunConfig config = tiny_run();
  const Dataset data = load_dataset(config);
  const TrainState state(config.denoiser, 0);
  const Image eps = aquadiff::testing::normal_image(8, 8, 3, 5);
  config.train.loss_mode = LossMode::kEpsMse;
  const StepLosses e = evaluate_loss(state.model, data.train[0], 7, eps, make_context(config));
  CHECK(e.total == e.eps_mse);
  CHECK(e.pixel == 0.0);
  config.train.loss_mode = LossMode::kCdc;
  config.train.cdc_snr_cap = 0.0;
  const StepLosses c = evaluate_loss(state.model, data.train[0], 7, eps, make_context(config));
  CHECK(c.eps_mse == 0.0);
  CHECK(c.total == doctest::Approx(c.pixel + c.multiscale + c.perceptual + c.ssim + c.fft));

  const NoiseSchedule sched = config.schedule.build();
  const double snr7 = sched.gamma(7) / (1.0 - sched.gamma(7));
  for (double cap : {0.05, 1e6}) {
    config.train.cdc_snr_cap = cap;
    const StepLosses w = evaluate_loss(state.model, data.train[0], 7, eps, make_context(config));
    CHECK(w.pixel == doctest::Approx(std::min(snr7, cap) * c.pixel).epsilon(1e-12));
    CHECK(w.total == doctest::Approx(std::min(snr7, cap) * c.total).epsilon(1e-12));
  }
  config.train.cdc_snr_cap = -1.0;
  CHECK_THROWS_AS(config.train.validate(), ParameterError);
  config.train.cdc_snr_cap = 0.0;
  config.train.loss_mode = LossMode::kBoth;
  const StepLosses both = evaluate_loss(state.model, data.train[0], 7, eps, make_context(config));
  CHECK(both.total == doctest::Approx(e.total + c.total));
  CHECK(parse_loss_mode("both") == LossMode::kBoth);
  CHECK(to_string(LossMode::kCdc) == "cdc");
  CHECK_THROWS_AS(parse_loss_mode("l2"), ParameterError);
}

TEST_CASE("train loop outputs and resume") {
  RunConfig config = tiny_run();
  config.train.output_dir = scratch("loop").string();
  config.train.validate_every = 3;
  config.train.seed = 9;
  const Dataset data = load_dataset(config);

  TrainState full(config.denoiser, config.train.seed);
  const TrainResult result = train_loop(full, data, config);
  CHECK(result.log.size() == 6);
  CHECK(result.best_validation_psnr.has_value());
  CHECK(fs::exists(fs::path(config.train.output_dir) / "checkpoint.ckpt"));
  CHECK(fs::exists(fs::path(config.train.output_dir) / "best.ckpt"));
  std::ifstream log(fs::path(config.train.output_dir) / "train_log.csv");
  std::string header;
  std::getline(log, header);
  CHECK(header == "step,t,total,eps_mse,pixel,multiscale,perceptual,ssim,fft,running_mean");
  int rows = 0;
  for (std::string line; std::getline(log, line);) ++rows;
  CHECK(rows == 6);
  CHECK(result.log[1].running_mean == doctest::Approx((result.log[0].total + result.log[1].total) / 2));

  RunConfig half = config;
  half.train.iterations = 3;
  half.train.output_dir = scratch("half").string();
  half.train.validate_every = 0;
  TrainState first(half.denoiser, half.train.seed);
  train_loop(first, data, half);
  const fs::path ckpt = fs::path(half.train.output_dir) / "checkpoint.ckpt";
  TrainState resumed = restore_state(load_checkpoint(ckpt));
  CHECK(resumed.step == 3u);
  TrainState again = restore_state(load_checkpoint(ckpt));
  half.train.iterations = 6;
  const TrainResult r1 = train_loop(resumed, data, half);
  half.train.output_dir.clear();
  const TrainResult r2 = train_loop(again, data, half);
  REQUIRE(r1.log.size() == 3);
  CHECK(r1.log[0].step == 4u);
  CHECK(flat_weights(resumed.model) == flat_weights(again.model));
  for (int i = 0; i < 3; ++i) {
    CHECK(r1.log[i].t == result.log[3 + i].t);
    CHECK(r1.log[i].total == doctest::Approx(result.log[3 + i].total).epsilon(1e-3));
  }

  RunConfig flat = config;
  flat.schedule = {50, 1e-4, 5e-2};
  TrainState s(flat.denoiser, 0);
  CHECK_THROWS_AS(train_loop(s, data, flat), ParameterError);
  CHECK_THROWS_AS(train_loop(s, Dataset{}, config), ParameterError);
}

TEST_CASE("enhance") {
  RunConfig config = tiny_run();
  config.train.iterations = 2;
  const Dataset data = load_dataset(config);
  TrainState state(config.denoiser, 1);
  train_loop(state, data, config);
  const Model model = model_from_checkpoint(make_checkpoint(state, config));

  const Image& input = data.train[0].degraded;
  std::vector<std::vector<double>> seen;
  EnhanceOptions opts;
  opts.on_step = [&](int, const ad::Var& y) { seen.emplace_back(y.value().begin(), y.value().end()); };
  const Image a = enhance(model, input, 11, opts);
  CHECK(seen.size() == 20);
  for (const auto& y : seen) CHECK(y == seen.front());
  CHECK(a == enhance(model, input, 11));
  CHECK_FALSE(a == enhance(model, input, 12));
  for (double v : a.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK(a.same_shape(input));

  EnhanceOptions wrong;
  wrong.expected_schedule = ScheduleConfig{50, 1e-4, 0.2};
  CHECK_THROWS_AS(enhance(model, input, 1, wrong), ParameterError);
  wrong.expected_schedule = config.schedule;
  CHECK_NOTHROW(enhance(model, input, 1, wrong));
  CHECK_THROWS_AS(enhance(model, Image(7, 7, 3), 1), DimensionError);
}

TEST_CASE("evaluate directories") {
  const fs::path enhanced = scratch("enhanced"), reference = scratch("reference");
  const Image a = random_image(16, 16, 3, 1), b = random_image(16, 16, 3, 2);
  write_png(enhanced / "one.png", a);
  write_png(enhanced / "two.png", b);
  write_png(reference / "one.png", a);
  write_png(reference / "two.png", a);
  const MetricReport r = evaluate(enhanced, reference);
  REQUIRE(r.rows.size() == 2);
  CHECK(r.rows[0].name == "one.png");
  CHECK(*r.rows[0].psnr == kPsnrCap);
  CHECK(*r.rows[1].psnr < 30.0);
  CHECK(evaluate(enhanced, std::nullopt).rows[0].psnr == std::nullopt);

  write_png(enhanced / "three.png", a);
  CHECK_THROWS_AS(evaluate(enhanced, reference), IoError);
  CHECK_THROWS_AS(evaluate(scratch("empty"), std::nullopt), IoError);
}

TEST_CASE("directory datasets") {
  const fs::path dir = scratch("pairs");
  const auto pairs = make_dataset(3, 8, 2);
  for (int i = 0; i < 3; ++i) {
    write_png(dir / ("clean_000" + std::to_string(i) + ".png"), pairs[i].clean);
    write_png(dir / ("degraded_000" + std::to_string(i) + ".png"), pairs[i].degraded);
  }
  RunConfig config = tiny_run();
  config.data_dir = dir.string();
  const Dataset d = load_dataset(config);
  CHECK(d.train.size() == 2);
  CHECK(d.validation.size() == 1);
  CHECK(d.train[0].name == "0000");
  write_png(dir / "clean_0009.png", pairs[0].clean);
  CHECK_THROWS_AS(load_dataset(config), IoError);
}

TEST_CASE("run config text") {
  RunConfig c = tiny_run();
  c.train.learning_rate = 2.5e-4;
  c.train.loss_mode = LossMode::kCdc;
  c.compensation.kappa = 0.6;
  const RunConfig back = RunConfig::from_map(parse_key_values(c.to_text()));
  CHECK(back.to_text() == c.to_text());
  CHECK(back.schedule == c.schedule);

  KeyValues kv = parse_key_values("learning_rate=0.01\nT=30\n");
  const RunConfig partial = RunConfig::from_map(kv);
  CHECK(partial.train.learning_rate == 0.01);
  CHECK(partial.schedule.steps == 30);
  CHECK(partial.train.iterations == RunConfig{}.train.iterations);

  kv["learning_rat"] = "1";
  CHECK_THROWS_AS(RunConfig::from_map(kv), ParameterError);
  CHECK_THROWS_AS(RunConfig::from_map(parse_key_values("T=abc\n")), ParameterError);
  CHECK_THROWS_AS(RunConfig::from_map(parse_key_values("loss_mode=l2\n")), ParameterError);
  CHECK(fnv1a64(c.model_text()) != fnv1a64(RunConfig{}.model_text()));
}

TEST_CASE("ablation variants") {
  const auto v = ablation_variants();
  REQUIRE(v.size() == 4);
  CHECK(v[0].name == "baseline");
  CHECK(v[3].name == "full");
  const RunConfig base = tiny_run();
  const RunConfig b = variant_config(base, v[0]);
  CHECK_FALSE(b.denoiser.residual_dense);
  CHECK(b.train.loss_mode == LossMode::kEpsMse);
  const RunConfig f = variant_config(base, v[3]);
  CHECK(f.denoiser.to_text() == base.denoiser.to_text());
  CHECK(f.train.loss_mode == LossMode::kBoth);
  std::ostringstream os;
  write_ablation_csv(os, {AblationRow{"full", 1, 0.5, 20.0, 0.8, 2.0, 0.4}});
  CHECK(os.str().rfind("variant,seed,final_loss,uiqm,uciqe,psnr,ssim\nfull,1,", 0) == 0);
}
