#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mssm/bench.hpp"
#include "mssm/checks.hpp"
#include "mssm/config.hpp"
#include "mssm/train.hpp"

#include <CLI11.hpp>

// Operator surface. One command per process:
//   gen-data  dataset TNSR files plus a manifest
//   train     checkpoint plus a training log CSV
//   sample    generated latent TNSR plus region-control metrics JSON
//   bench     aggregation-scaling CSV
//   check     the invariant/gradient suite; exit 0 iff everything passes
// Exit codes: 0 success, 1 validation error, 2 check-suite failure, 3 I/O.
namespace mssm {

namespace cli_detail {

struct CommonFlags {
  std::string config_path;
  std::optional<std::int64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> gates;
  std::optional<double> guidance;
};

inline void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "JSON config file (defaults apply when absent)");
  cmd->add_option("--seed", f.seed, "override training.seed");
  cmd->add_option("--out", f.out, "override paths.out_dir");
  cmd->add_option("--gates", f.gates, "override sampling.gates, e.g. 1,0");
  cmd->add_option("--guidance", f.guidance, "override sampling.guidance");
}

// Flag overrides win over the file; the merged config is re-validated.
inline RunConfig resolve(const CommonFlags& f) {
  RunConfig cfg;
  if (!f.config_path.empty()) cfg = load_run_config(f.config_path);
  if (f.seed) cfg.training.seed = static_cast<std::uint64_t>(*f.seed);
  if (f.out) cfg.paths.out_dir = *f.out;
  if (f.gates) cfg.sampling.gates = parse_gates(*f.gates);
  if (f.guidance) cfg.sampling.guidance = *f.guidance;
  validate_run_config(cfg);
  return cfg;
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline int cmd_gen_data(const RunConfig& cfg) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::path(cfg.paths.out_dir) / "data";
  const MaskSet masks = cfg.masks();
  Rng rng(cfg.training.seed);
  const auto items = gen_synthetic(cfg.data.count, cfg.layout, masks, rng);

  nlohmann::json manifest;
  manifest["count"] = cfg.data.count;
  manifest["layout"] = {{"frames", cfg.layout.frames},
                        {"height", cfg.layout.height},
                        {"width", cfg.layout.width},
                        {"channels", cfg.layout.channels}};
  manifest["masks"] = {{"audio", "mask_audio.tnsr"},
                       {"motion", "mask_motion.tnsr"},
                       {"face", "mask_face.tnsr"}};
  write_mask(dir / "mask_audio.tnsr", masks.audio, masks.mouth_rect);
  write_mask(dir / "mask_motion.tnsr", masks.motion, masks.face_rect);
  write_mask(dir / "mask_face.tnsr", masks.face, masks.face_rect);

  auto series_tensor = [](const std::vector<double>& s) {
    return Tensor({static_cast<std::int64_t>(s.size())}, s);
  };
  nlohmann::json samples = nlohmann::json::array();
  for (std::size_t i = 0; i < items.size(); ++i) {
    char tag[32];
    std::snprintf(tag, sizeof(tag), "sample_%03zu", i);
    const std::string base(tag);
    write_tnsr(dir / (base + ".x0.tnsr"), items[i].sample.x0);
    write_tnsr(dir / (base + ".reference.tnsr"), items[i].cond.reference);
    write_tnsr(dir / (base + ".audio.tnsr"), series_tensor(items[i].sample.audio_signal));
    write_tnsr(dir / (base + ".motion.tnsr"), series_tensor(items[i].sample.motion_signal));
    nlohmann::json entry;
    entry["x0"] = base + ".x0.tnsr";
    entry["reference"] = base + ".reference.tnsr";
    entry["audio_signal"] = base + ".audio.tnsr";
    entry["motion_signal"] = base + ".motion.tnsr";
    entry["identity_seed"] = items[i].sample.identity_seed;
    samples.push_back(entry);
  }
  manifest["samples"] = samples;
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
  std::printf("wrote %lld samples to %s\n", static_cast<long long>(cfg.data.count),
              dir.string().c_str());
  return 0;
}

inline int cmd_train(const RunConfig& cfg) {
  namespace fs = std::filesystem;
  const fs::path out_dir(cfg.paths.out_dir);
  const MaskSet masks = cfg.masks();
  const DiffusionSchedule sched = cfg.diffusion_schedule();
  const ModelConfig model_cfg = cfg.model_config();

  std::ostringstream csv;
  csv << "step,loss,gate_config,wall_ms\n";
  DenoiserParams params =
      train_model(model_cfg, sched, masks, cfg.training, [&](const TrainLogRow& r) {
        csv << r.step << ',' << format_double(r.loss) << ',' << gate_config_name(r.gates) << ','
            << format_double(r.wall_ms) << '\n';
        if (r.step == 1 || r.step % 200 == 0 || r.step == cfg.training.steps) {
          std::printf("step %6lld  loss %.5f  gates %s\n", static_cast<long long>(r.step), r.loss,
                      gate_config_name(r.gates));
        }
      });
  save_checkpoint(out_dir / "checkpoint", params);
  write_file_atomic(out_dir / "train_log.csv", csv.str());
  write_file_atomic(out_dir / "config.json", dump_run_config(cfg));
  std::printf("checkpoint written to %s\n", (out_dir / "checkpoint").string().c_str());
  return 0;
}

inline int cmd_sample(const RunConfig& cfg) {
  namespace fs = std::filesystem;
  const fs::path out_dir(cfg.paths.out_dir);
  const MaskSet masks = cfg.masks();
  const DiffusionSchedule sched = cfg.diffusion_schedule();
  const ModelConfig model_cfg = cfg.model_config();
  DenoiserParams params = load_checkpoint(out_dir / "checkpoint", model_cfg);

  Rng data_rng(cfg.training.seed ^ 0x0ddba11ULL);
  const SyntheticItem item = gen_synthetic_one(cfg.layout, masks, data_rng);
  SampleOptions opt;
  opt.gates = cfg.sampling.gates;
  opt.guidance = cfg.sampling.guidance;
  opt.ddim_steps = cfg.sampling.ddim_steps;
  opt.seed = cfg.training.seed ^ 0x5eedULL;
  const Tensor generated = sample_volume(params, model_cfg, sched, item.cond, opt);
  write_tnsr(out_dir / "sample_latent.tnsr", generated);

  const RegionMetrics metrics = region_control_metrics(generated, item.sample.audio_signal,
                                                       item.sample.motion_signal, masks);
  nlohmann::json mj;
  mj["corr_mouth_audio"] = metrics.corr_mouth_audio;
  mj["corr_face_motion"] = metrics.corr_face_motion;
  mj["cross_corr"] = metrics.cross_corr;
  mj["gates"] = gate_config_name(opt.gates);
  mj["guidance"] = opt.guidance;
  write_file_atomic(out_dir / "sample_metrics.json", mj.dump(2) + "\n");
  std::printf("corr_mouth_audio %.3f  corr_face_motion %.3f  cross_corr %.3f\n",
              metrics.corr_mouth_audio, metrics.corr_face_motion, metrics.cross_corr);
  return 0;
}

inline int cmd_bench(const RunConfig& cfg) {
  std::vector<std::int64_t> lengths;
  for (std::int64_t len = 1 << 10; len <= 1 << 15; len <<= 1) lengths.push_back(len);
  const auto points = bench_scaling(lengths, 16, 5, cfg.training.seed);
  write_file_atomic(std::filesystem::path(cfg.paths.out_dir) / "bench.csv", bench_csv(points));
  const SlopeFit scan_fit = fit_loglog_slope(points_for_method(points, "scan_chunked"));
  const SlopeFit attn_fit = fit_loglog_slope(points_for_method(points, "cross_attention"));
  std::printf("scan_chunked     slope %.3f +/- %.3f\n", scan_fit.slope, scan_fit.stderr_slope);
  std::printf("cross_attention  slope %.3f +/- %.3f\n", attn_fit.slope, attn_fit.stderr_slope);
  return 0;
}

inline int cmd_check(const RunConfig& cfg) {
  const auto results = run_check_suite(cfg.training.seed);
  bool all_pass = true;
  for (const CheckResult& r : results) {
    std::printf("[%s] %s (%s)\n", r.pass ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
    all_pass = all_pass && r.pass;
  }
  return all_pass ? 0 : 2;
}

}  // namespace cli_detail

inline int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"masked selective-state-space control layers with a toy diffusion trainer"};
  app.require_subcommand(1);

  cli_detail::CommonFlags flags;
  int which = 0;
  const auto make = [&](const char* name, const char* desc, int id) {
    CLI::App* cmd = app.add_subcommand(name, desc);
    cli_detail::add_common(cmd, flags);
    cmd->callback([&which, id] { which = id; });
    return cmd;
  };
  make("gen-data", "generate a synthetic dataset", 1);
  make("train", "train the denoiser on streamed synthetic data", 2);
  make("sample", "generate a latent from a trained checkpoint", 3);
  make("bench", "aggregation scaling benchmark", 4);
  make("check", "run the invariant and gradient suite", 5);

  std::vector<const char*> argv;
  argv.push_back("mssm");
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    std::puts(app.help().c_str());
    return 0;
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }

  try {
    const RunConfig cfg = cli_detail::resolve(flags);
    switch (which) {
      case 1: return cli_detail::cmd_gen_data(cfg);
      case 2: return cli_detail::cmd_train(cfg);
      case 3: return cli_detail::cmd_sample(cfg);
      case 4: return cli_detail::cmd_bench(cfg);
      case 5: return cli_detail::cmd_check(cfg);
      default: return 1;
    }
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 3;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

inline int run_cli(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(args);
}

}  // namespace mssm
