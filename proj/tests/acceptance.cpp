// Acceptance suite. Each criterion prints one PASS/FAIL line; the process
// exits nonzero if any requested criterion fails.
//
//   1  chunked scan matches the sequential scan
//   2  gradient suite (ops and full denoiser vs finite differences)
//   3  region isolation under control perturbations
//   4  gate semantics and gradient routing
//   5  mask-drop ablation direction on the synthetic task
//   6  multi-signal control matches or beats single-signal control
//   7  guidance sanity (s=1 exact; s=2 does not hurt mouth control)
//   8  aggregation scaling (scan linear, attention quadratic)
//   9  bit-exact round trips
//  10  the `check` command end to end
//
// Criteria 5-7 share one training study: per seed, a full model and a
// no-mask-drop variant are trained with the same budget and then sampled
// under several gate/guidance settings.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <future>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "mssm/bench.hpp"
#include "mssm/checks.hpp"
#include "mssm/cli.hpp"
#include "mssm/train.hpp"

namespace {

using namespace mssm;

struct CriterionResult {
  int id = 0;
  bool pass = false;
  std::string detail;
};

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 3) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}

CriterionResult from_check(int id, const CheckResult& r, double elapsed, double budget) {
  CriterionResult out;
  out.id = id;
  out.pass = r.pass && elapsed < budget;
  out.detail = r.detail + ", " + fmt(elapsed, 1) + "s";
  if (elapsed >= budget) out.detail += " (over budget)";
  return out;
}

// ---------------------------------------------------------------- criteria 1-4, 9, 10

CriterionResult criterion_1() {
  const auto t0 = std::chrono::steady_clock::now();
  const CheckResult r = check_scan_equivalence(1001, 100, 4096);
  return from_check(1, r, seconds_since(t0), 30.0);
}

CriterionResult criterion_2() {
  const auto t0 = std::chrono::steady_clock::now();
  const CheckResult r = check_gradients(2002, 10);
  return from_check(2, r, seconds_since(t0), 300.0);
}

CriterionResult criterion_3() {
  const auto t0 = std::chrono::steady_clock::now();
  const CheckResult r = check_region_isolation(3003, 1000);
  return from_check(3, r, seconds_since(t0), 600.0);
}

CriterionResult criterion_4() {
  const auto t0 = std::chrono::steady_clock::now();
  const CheckResult r = check_gate_semantics(4004, 100);
  return from_check(4, r, seconds_since(t0), 600.0);
}

CriterionResult criterion_9() {
  const auto t0 = std::chrono::steady_clock::now();
  const CheckResult r = check_round_trips(9009, 40);
  return from_check(9, r, seconds_since(t0), 300.0);
}

CriterionResult criterion_10() {
  const auto t0 = std::chrono::steady_clock::now();
  const int code = run_cli({"check"});
  const double elapsed = seconds_since(t0);
  CriterionResult out;
  out.id = 10;
  out.pass = code == 0 && elapsed < 600.0;
  out.detail = "check exited " + std::to_string(code) + " in " + fmt(elapsed, 1) + "s";
  return out;
}

// ---------------------------------------------------------------- training study (5-7)

struct StudySetup {
  ModelConfig model;
  DiffusionSchedule sched;
  MaskSet masks;
  TrainConfig train;
  std::int64_t n_eval = 12;
  std::int64_t ddim_steps = 20;
  double guidance = 2.0;
};

StudySetup desk_setup() {
  StudySetup s;
  s.model.layout = {8, 8, 8, 2};
  s.model.c_model = 16;
  s.model.d_state = 8;
  s.model.blocks = 2;
  const auto [mouth, face] = default_face_rects(s.model.layout);
  s.masks = make_masks(mouth, face, s.model.layout);
  s.sched = make_schedule(100, 1e-3, 0.2);
  s.train.steps = 2000;
  s.train.batch = 4;
  s.train.lr = 1e-3;
  s.train.momentum = 0.9;
  s.train.p_uncond = 0.1;
  return s;
}

struct SeedOutcome {
  std::uint64_t seed = 0;
  double full_cross = 0.0;        // |mouth vs m|, full model, gates 11
  double nomd_cross = 0.0;        // same for the no-mask-drop variant
  double full_mouth = 0.0;        // corr(mouth, a), gates 11, s=2
  double full_face_motion = 0.0;  // corr(motion region, m), gates 11, s=2
  double single_mouth = 0.0;      // corr(mouth, a), gates 10, s=2
  double mouth_s1 = 0.0;
  double mouth_s4 = 0.0;
  double train_full_sec = 0.0;
  double train_nomd_sec = 0.0;
  double final_loss_full = 0.0;
};

SeedOutcome run_seed(const StudySetup& setup, std::uint64_t seed) {
  SeedOutcome out;
  out.seed = seed;

  TrainConfig tc = setup.train;
  tc.seed = seed;

  auto t0 = std::chrono::steady_clock::now();
  double last_loss = 0.0;
  DenoiserParams full = train_model(setup.model, setup.sched, setup.masks, tc,
                                    [&](const TrainLogRow& r) { last_loss = r.loss; });
  out.train_full_sec = seconds_since(t0);
  out.final_loss_full = last_loss;

  ModelConfig nomd_cfg = setup.model;
  nomd_cfg.use_mask_drop = false;
  t0 = std::chrono::steady_clock::now();
  DenoiserParams nomd = train_model(nomd_cfg, setup.sched, setup.masks, tc, {});
  out.train_nomd_sec = seconds_since(t0);

  const auto eval = [&](DenoiserParams& params, const ModelConfig& cfg, GateConfig gates,
                        double guidance) {
    SampleOptions opt;
    opt.gates = gates;
    opt.guidance = guidance;
    opt.ddim_steps = setup.ddim_steps;
    opt.seed = seed * 1000 + 17;
    return evaluate_pooled(params, cfg, setup.sched, setup.masks, setup.n_eval, opt,
                           seed * 7777 + 3);
  };

  const PooledEval full_dual = eval(full, setup.model, {true, true}, setup.guidance);
  out.full_cross = full_dual.cross_corr;
  out.full_mouth = full_dual.corr_mouth_audio;
  out.full_face_motion = full_dual.corr_face_motion;

  const PooledEval nomd_dual = eval(nomd, nomd_cfg, {true, true}, setup.guidance);
  out.nomd_cross = nomd_dual.cross_corr;

  const PooledEval single = eval(full, setup.model, {true, false}, setup.guidance);
  out.single_mouth = single.corr_mouth_audio;

  out.mouth_s1 = eval(full, setup.model, {true, true}, 1.0).corr_mouth_audio;
  out.mouth_s4 = eval(full, setup.model, {true, true}, 4.0).corr_mouth_audio;
  return out;
}

std::vector<SeedOutcome> run_training_study(const StudySetup& setup,
                                            const std::vector<std::uint64_t>& seeds) {
  std::vector<SeedOutcome> results(seeds.size());
  const std::size_t workers =
      std::max<std::size_t>(1, std::min<std::size_t>(std::thread::hardware_concurrency(),
                                                     seeds.size()));
  std::size_t next = 0;
  while (next < seeds.size()) {
    std::vector<std::pair<std::size_t, std::future<SeedOutcome>>> wave;
    for (std::size_t k = 0; k < workers && next < seeds.size(); ++k, ++next) {
      const std::size_t idx = next;
      wave.emplace_back(idx, std::async(std::launch::async,
                                        [&setup, &seeds, idx] { return run_seed(setup, seeds[idx]); }));
    }
    for (auto& [idx, fut] : wave) results[idx] = fut.get();
  }
  return results;
}

CriterionResult criterion_5(const std::vector<SeedOutcome>& study) {
  int hits = 0;
  double worst_train = 0.0;
  std::string per_seed;
  for (const SeedOutcome& s : study) {
    const bool ok = std::abs(s.full_cross) < 0.2 &&
                    std::abs(s.nomd_cross) >= std::abs(s.full_cross) + 0.15;
    hits += ok ? 1 : 0;
    worst_train = std::max(worst_train, std::max(s.train_full_sec, s.train_nomd_sec));
    per_seed += " [s" + std::to_string(s.seed) + " full " + fmt(std::abs(s.full_cross)) +
                " nomd " + fmt(std::abs(s.nomd_cross)) + (ok ? " ok" : " miss") + "]";
  }
  CriterionResult out;
  out.id = 5;
  out.pass = hits >= 4 && worst_train < 900.0;
  out.detail = std::to_string(hits) + "/5 seeds, max train " + fmt(worst_train, 0) + "s;" +
               per_seed;
  return out;
}

CriterionResult criterion_6(const std::vector<SeedOutcome>& study) {
  int hits = 0;
  std::string per_seed;
  for (const SeedOutcome& s : study) {
    const bool ok = s.full_mouth >= s.single_mouth - 0.05 && s.full_face_motion >= 0.5;
    hits += ok ? 1 : 0;
    per_seed += " [s" + std::to_string(s.seed) + " dual " + fmt(s.full_mouth) + " single " +
                fmt(s.single_mouth) + " face " + fmt(s.full_face_motion) + (ok ? " ok" : " miss") +
                "]";
  }
  CriterionResult out;
  out.id = 6;
  out.pass = hits >= 4;
  out.detail = std::to_string(hits) + "/5 seeds;" + per_seed;
  return out;
}

CriterionResult criterion_7(const std::vector<SeedOutcome>& study) {
  // s = 1 must reproduce the conditional prediction exactly
  Rng rng(71717);
  bool exact = true;
  for (int i = 0; i < 20; ++i) {
    const Tensor ec = rng.normal_tensor({4, 5});
    const Tensor eu = rng.normal_tensor({4, 5});
    exact = exact && cfg_combine(ec, eu, 1.0).bit_equal(ec);
  }
  int hits = 0;
  std::string per_seed;
  for (const SeedOutcome& s : study) {
    const bool ok = s.full_mouth >= s.mouth_s1;  // s=2 vs s=1, non-decreasing
    hits += ok ? 1 : 0;
    per_seed += " [s" + std::to_string(s.seed) + " s1 " + fmt(s.mouth_s1) + " s2 " +
                fmt(s.full_mouth) + " s4 " + fmt(s.mouth_s4) + (ok ? " ok" : " miss") + "]";
  }
  CriterionResult out;
  out.id = 7;
  out.pass = exact && hits >= 3;
  out.detail = std::string(exact ? "s=1 exact" : "s=1 NOT exact") + ", " + std::to_string(hits) +
               "/5 seeds non-decreasing;" + per_seed;
  return out;
}

// ---------------------------------------------------------------- criterion 8

CriterionResult criterion_8() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::int64_t> lengths;
  for (std::int64_t len = 1 << 10; len <= 1 << 15; len <<= 1) lengths.push_back(len);
  const auto points = bench_scaling(lengths, 16, 5, 8008);
  const SlopeFit scan_fit = fit_loglog_slope(points_for_method(points, "scan_chunked"));
  const SlopeFit attn_fit = fit_loglog_slope(points_for_method(points, "cross_attention"));
  const double elapsed = seconds_since(t0);
  const bool scan_ok = scan_fit.slope >= 0.8 && scan_fit.slope <= 1.2;
  const bool attn_ok = attn_fit.slope >= 1.7 && attn_fit.slope <= 2.3;
  const bool gap_ok = attn_fit.slope - scan_fit.slope >= 0.5;
  CriterionResult out;
  out.id = 8;
  out.pass = scan_ok && attn_ok && gap_ok && elapsed < 600.0;
  out.detail = "scan slope " + fmt(scan_fit.slope) + ", attention slope " + fmt(attn_fit.slope) +
               ", gap " + fmt(attn_fit.slope - scan_fit.slope) + ", " + fmt(elapsed, 1) + "s";
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  if (wanted.empty()) {
    for (int id = 1; id <= 10; ++id) wanted.insert(id);
  }

  std::vector<CriterionResult> results;
  const auto run = [&](int id, auto&& fn) {
    if (wanted.count(id)) results.push_back(fn());
  };

  run(1, criterion_1);
  run(2, criterion_2);
  run(3, criterion_3);
  run(4, criterion_4);

  if (wanted.count(5) || wanted.count(6) || wanted.count(7)) {
    const StudySetup setup = desk_setup();
    std::printf("# training study: 5 seeds x (full + no-mask-drop), %lld steps each\n",
                static_cast<long long>(setup.train.steps));
    std::fflush(stdout);
    const auto study = run_training_study(setup, {1, 2, 3, 4, 5});
    for (const SeedOutcome& s : study) {
      std::printf("# seed %llu: loss %.4f, train %.0fs/%.0fs\n",
                  static_cast<unsigned long long>(s.seed), s.final_loss_full, s.train_full_sec,
                  s.train_nomd_sec);
    }
    run(5, [&] { return criterion_5(study); });
    run(6, [&] { return criterion_6(study); });
    run(7, [&] { return criterion_7(study); });
  }

  run(8, criterion_8);
  run(9, criterion_9);
  run(10, criterion_10);

  bool all_pass = true;
  for (const CriterionResult& r : results) {
    std::printf("criterion %2d: %s  (%s)\n", r.id, r.pass ? "PASS" : "FAIL", r.detail.c_str());
    all_pass = all_pass && r.pass;
  }
  return all_pass ? 0 : 1;
}
