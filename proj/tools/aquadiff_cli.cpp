// Command-line front end: train, enhance, eval, compensate, synth, schedule-dump, ablate.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "aquadiff/compensation.hpp"
#include "aquadiff/config_text.hpp"
#include "aquadiff/degradation.hpp"
#include "aquadiff/pipeline.hpp"
#include "aquadiff/schedule.hpp"

namespace fs = std::filesystem;
using namespace aquadiff;

namespace {

char name_buf[64];

std::string numbered(const char* prefix, int i) {
  std::snprintf(name_buf, sizeof name_buf, "%s_%04d.png", prefix, i);
  return name_buf;
}

int cmd_train(const std::string& config_path, bool resume) {
  const RunConfig config = RunConfig::from_map(read_key_values(config_path));
  const Dataset data = load_dataset(config);
  std::optional<TrainState> state;
  const fs::path ckpt = fs::path(config.train.output_dir) / "checkpoint.ckpt";
  if (resume && !config.train.output_dir.empty() && fs::exists(ckpt)) {
    const Checkpoint c = load_checkpoint(ckpt);
    if (c.config_text != config.model_text()) {
      throw ParameterError("train: " + ckpt.string() + " was written with a different model config");
    }
    state.emplace(restore_state(c));
    std::cerr << "resuming from step " << state->step << "\n";
  } else {
    state.emplace(config.denoiser, config.train.seed);
  }
  std::cerr << "training on " << data.train.size() << " pairs, " << data.validation.size()
            << " validation pairs, " << state->model.weights().scalar_count() << " parameters\n";
  const TrainResult result = train_loop(*state, data, config);
  if (!result.log.empty()) {
    const StepLosses& first = result.log.front();
    const StepLosses& last = result.log.back();
    std::cout << "steps " << last.step << " first_loss " << format_double(first.total)
              << " final_running_mean " << format_double(last.running_mean) << "\n";
  }
  if (result.best_validation_psnr) {
    std::cout << "best_validation_psnr " << format_double(*result.best_validation_psnr) << " at step "
              << result.best_step << "\n";
  }
  return 0;
}

int cmd_enhance(const std::string& ckpt, const std::string& in, const std::string& out,
                std::uint64_t seed, const std::optional<ScheduleConfig>& expected) {
  const Model model = load_model(ckpt);
  EnhanceOptions options;
  options.expected_schedule = expected;
  fs::create_directories(out);
  const auto files = list_pngs(in);
  if (files.empty()) throw IoError("enhance: no PNG files in " + in);
  for (std::size_t i = 0; i < files.size(); ++i) {
    const Image result = enhance(model, read_png(files[i]), seed + i, options);
    write_png(fs::path(out) / files[i].filename(), result);
    std::cerr << files[i].filename().string() << "\n";
  }
  return 0;
}

int cmd_eval(const std::string& enhanced, const std::string& reference, const std::string& out) {
  std::optional<fs::path> ref;
  if (!reference.empty()) ref = reference;
  const MetricReport report = evaluate(enhanced, ref);
  if (out.empty()) {
    report.write_csv(std::cout);
  } else {
    std::ofstream os(out);
    if (!os) throw IoError("cannot write " + out);
    report.write_csv(os);
  }
  return 0;
}

int cmd_compensate(const std::string& in, const std::string& out, const CompensationParams& params) {
  params.validate();
  fs::create_directories(out);
  const auto files = list_pngs(in);
  if (files.empty()) throw IoError("compensate: no PNG files in " + in);
  for (const auto& f : files) write_png(fs::path(out) / f.filename(), preprocess(read_png(f), params));
  return 0;
}

int cmd_synth(int n, int size, std::uint64_t seed, const std::string& out) {
  fs::create_directories(out);
  const auto pairs = make_dataset(n, size, seed);
  std::ofstream csv(fs::path(out) / "params.csv");
  if (!csv) throw IoError("cannot write params.csv in " + out);
  csv << "index,seed,eta_r,eta_g,eta_b,ambient_r,ambient_g,ambient_b,depth_min,depth_max\n";
  for (int i = 0; i < n; ++i) {
    const SamplePair& p = pairs[i];
    write_png(fs::path(out) / numbered("clean", i), p.clean);
    write_png(fs::path(out) / numbered("degraded", i), p.degraded);
    const auto depth = p.params.depth_map.data();
    const auto [lo, hi] = std::minmax_element(depth.begin(), depth.end());
    csv << i << "," << p.params.seed;
    for (double e : p.params.eta) csv << "," << format_double(e);
    for (double b : p.params.background) csv << "," << format_double(b);
    csv << "," << format_double(*lo) << "," << format_double(*hi) << "\n";
  }
  return 0;
}

int cmd_schedule_dump(int steps, double beta_start, double beta_end) {
  const NoiseSchedule s = linear_schedule(steps, beta_start, beta_end);
  std::cout << "t,beta,alpha,gamma,posterior_var\n";
  for (int t = 1; t <= steps; ++t) {
    std::cout << t << "," << format_double(s.beta(t)) << "," << format_double(s.alpha(t)) << ","
              << format_double(s.gamma(t)) << "," << format_double(s.posterior_var(t)) << "\n";
  }
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::vector<std::uint64_t>& seeds,
               const std::string& out) {
  const RunConfig base = RunConfig::from_map(read_key_values(config_path));
  const Dataset data = load_dataset(base);
  std::vector<AblationRow> rows;
  for (std::uint64_t seed : seeds) {
    RunConfig config = base;
    config.train.seed = seed;
    config.train.output_dir.clear();
    for (const AblationVariant& v : ablation_variants(base.train.loss_mode)) {
      rows.push_back(run_variant(data, config, v));
      std::cerr << v.name << " seed " << seed << " psnr " << format_double(rows.back().psnr) << "\n";
    }
  }
  if (out.empty()) {
    write_ablation_csv(std::cout, rows);
  } else {
    std::ofstream os(out);
    if (!os) throw IoError("cannot write " + out);
    write_ablation_csv(os, rows);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Underwater image enhancement with a conditional diffusion model"};
  app.require_subcommand(1);

  std::string config_path;
  bool resume = false;
  auto* train = app.add_subcommand("train", "Train a denoiser from a key=value config file");
  train->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);
  train->add_flag("--resume", resume, "Continue from output_dir/checkpoint.ckpt when present");

  std::string ckpt, in_dir, out_dir;
  std::uint64_t seed = 0;
  std::optional<int> expect_t;
  std::optional<double> expect_start, expect_end;
  auto* enh = app.add_subcommand("enhance", "Enhance every PNG in a directory");
  enh->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  enh->add_option("--in", in_dir, "Input directory")->required()->check(CLI::ExistingDirectory);
  enh->add_option("--out", out_dir, "Output directory")->required();
  enh->add_option("--seed", seed, "Sampling seed; image i uses seed + i");
  enh->add_option("--T", expect_t, "Expected step count (checked against the checkpoint)");
  enh->add_option("--beta-start", expect_start, "Expected first beta");
  enh->add_option("--beta-end", expect_end, "Expected last beta");

  std::string enhanced, reference, csv_out;
  auto* ev = app.add_subcommand("eval", "Score enhanced images");
  ev->add_option("--enhanced", enhanced, "Directory of enhanced PNGs")->required();
  ev->add_option("--reference", reference, "Directory of reference PNGs with matching names");
  ev->add_option("--out", csv_out, "CSV path (default stdout)");

  CompensationParams comp;
  auto* cmp = app.add_subcommand("compensate", "Apply colour compensation to every PNG");
  cmp->add_option("--in", in_dir, "Input directory")->required()->check(CLI::ExistingDirectory);
  cmp->add_option("--out", out_dir, "Output directory")->required();
  cmp->add_option("--kappa", comp.kappa, "a* strength");
  cmp->add_option("--lambda-b", comp.lambda_b, "b* strength");

  int n = 4, size = 32;
  auto* syn = app.add_subcommand("synth", "Write synthetic clean/degraded pairs");
  syn->add_option("--n", n, "Pair count")->check(CLI::PositiveNumber);
  syn->add_option("--size", size, "Image side")->check(CLI::PositiveNumber);
  syn->add_option("--seed", seed, "Seed");
  syn->add_option("--out", out_dir, "Output directory")->required();

  int steps = 50;
  double beta_start = 1e-4, beta_end = 0.2;
  auto* dump = app.add_subcommand("schedule-dump", "Print the noise schedule as CSV");
  dump->add_option("--T", steps, "Step count");
  dump->add_option("--beta-start", beta_start, "First beta");
  dump->add_option("--beta-end", beta_end, "Last beta");

  std::vector<std::uint64_t> seeds{0, 1, 2};
  auto* abl = app.add_subcommand("ablate", "Train the four ablation variants and report metrics");
  abl->add_option("--config", config_path, "Config file")->required()->check(CLI::ExistingFile);
  abl->add_option("--seeds", seeds, "Training seeds")->delimiter(',');
  abl->add_option("--out", csv_out, "CSV path (default stdout)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(config_path, resume);
    if (*enh) {
      std::optional<ScheduleConfig> expected;
      if (expect_t || expect_start || expect_end) {
        if (!(expect_t && expect_start && expect_end)) {
          throw ParameterError("enhance: --T, --beta-start and --beta-end go together");
        }
        expected = ScheduleConfig{*expect_t, *expect_start, *expect_end};
      }
      return cmd_enhance(ckpt, in_dir, out_dir, seed, expected);
    }
    if (*ev) return cmd_eval(enhanced, reference, csv_out);
    if (*cmp) return cmd_compensate(in_dir, out_dir, comp);
    if (*syn) return cmd_synth(n, size, seed, out_dir);
    if (*dump) return cmd_schedule_dump(steps, beta_start, beta_end);
    if (*abl) return cmd_ablate(config_path, seeds, csv_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
