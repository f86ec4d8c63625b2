#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "mssm/denoiser.hpp"
#include "mssm/diffusion.hpp"
#include "mssm/mask.hpp"
#include "mssm/train.hpp"

#include <nlohmann/json.hpp>

namespace mssm {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Everything a run needs, validated before any work starts. Strict JSON:
// unknown keys are rejected so typos cannot silently fall back to defaults.
struct RunConfig {
  TokenLayout layout{8, 8, 8, 2};

  struct Model {
    std::int64_t c_model = 16;
    std::int64_t d_state = 8;
    std::int64_t blocks = 2;
  } model;

  // The 100-step default compresses the classic 1000-step ramp tenfold, so
  // alpha_bar still decays to ~2e-5 and the last step is essentially pure
  // noise. A slowly-decaying short schedule would leave a train/sample gap at
  // the initial sampling step.
  struct Schedule {
    std::int64_t steps = 100;
    double beta_min = 1e-3;
    double beta_max = 0.2;
  } schedule;

  TrainConfig training;  // steps=2000 batch=4 lr=1e-3 p_uncond=0.1 seed=1

  struct Sampling {
    std::int64_t ddim_steps = 20;
    double guidance = 2.0;
    GateConfig gates{true, true};
  } sampling;

  struct Paths {
    std::string out_dir = "out";
  } paths;

  struct Data {
    std::int64_t count = 16;
  } data;

  ModelConfig model_config() const {
    ModelConfig cfg;
    cfg.layout = layout;
    cfg.c_model = model.c_model;
    cfg.d_state = model.d_state;
    cfg.blocks = model.blocks;
    return cfg;
  }

  DiffusionSchedule diffusion_schedule() const {
    return make_schedule(schedule.steps, schedule.beta_min, schedule.beta_max);
  }

  MaskSet masks() const {
    const auto [mouth, face] = default_face_rects(layout);
    return make_masks(mouth, face, layout);
  }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj, const std::set<std::string>& allowed,
                                const std::string& where) {
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) {
      throw ConfigError("config: unknown key '" + where + key + "'");
    }
  }
}

inline std::int64_t get_int(const nlohmann::json& obj, const char* key, std::int64_t fallback,
                            const std::string& where) {
  if (!obj.contains(key)) return fallback;
  const auto& v = obj.at(key);
  if (!v.is_number_integer()) {
    throw ConfigError("config: '" + where + key + "' must be an integer");
  }
  return v.get<std::int64_t>();
}

inline double get_num(const nlohmann::json& obj, const char* key, double fallback,
                      const std::string& where) {
  if (!obj.contains(key)) return fallback;
  const auto& v = obj.at(key);
  if (!v.is_number()) throw ConfigError("config: '" + where + key + "' must be a number");
  return v.get<double>();
}

inline std::string line_anchor(const std::string& text, std::size_t byte) {
  std::size_t line = 1;
  std::size_t col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return std::to_string(line) + ":" + std::to_string(col);
}

}  // namespace detail

inline GateConfig parse_gates(const std::string& spec) {
  if (spec.size() != 3 || spec[1] != ',' || (spec[0] != '0' && spec[0] != '1') ||
      (spec[2] != '0' && spec[2] != '1')) {
    throw ConfigError("gates: expected A,M with binary values, got '" + spec + "'");
  }
  const GateConfig g{spec[0] == '1', spec[2] == '1'};
  if (!g.audio && !g.motion) throw ConfigError("gates: 0,0 is not a valid configuration");
  return g;
}

inline void validate_run_config(const RunConfig& c) {
  if (c.layout.frames < 1 || c.layout.height < 2 || c.layout.width < 1 || c.layout.channels < 1) {
    throw ConfigError("config: layout extents must be positive (height at least 2)");
  }
  if (c.model.c_model < 2 || c.model.d_state < 1 || c.model.blocks < 1) {
    throw ConfigError("config: model needs c_model >= 2, d_state >= 1, blocks >= 1");
  }
  if (c.schedule.steps < 1 || !(0.0 < c.schedule.beta_min) ||
      !(c.schedule.beta_min < c.schedule.beta_max) || !(c.schedule.beta_max < 1.0)) {
    throw ConfigError("config: schedule needs steps >= 1 and 0 < beta_min < beta_max < 1");
  }
  if (c.training.steps < 1 || c.training.batch < 1 || !(c.training.lr > 0.0) ||
      c.training.p_uncond < 0.0 || c.training.p_uncond > 1.0) {
    throw ConfigError("config: training needs steps/batch >= 1, lr > 0, p_uncond in [0,1]");
  }
  if (c.sampling.ddim_steps < 1 || c.sampling.ddim_steps > c.schedule.steps) {
    throw ConfigError("config: sampling.ddim_steps must lie in [1, schedule.steps]");
  }
  if (!(c.sampling.guidance >= 0.0)) {
    throw ConfigError("config: sampling.guidance must be non-negative");
  }
  if (!c.sampling.gates.audio && !c.sampling.gates.motion) {
    throw ConfigError("config: sampling.gates may not be 0,0");
  }
  if (c.paths.out_dir.empty()) throw ConfigError("config: paths.out_dir must not be empty");
  if (c.data.count < 1) throw ConfigError("config: data.count must be positive");
  c.masks();  // geometry must be constructible
}

inline RunConfig parse_run_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config:" + detail::line_anchor(text, e.byte) + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  detail::reject_unknown_keys(
      j, {"layout", "model", "schedule", "training", "sampling", "paths", "data"}, "");

  RunConfig c;
  if (j.contains("layout")) {
    const auto& o = j.at("layout");
    detail::reject_unknown_keys(o, {"frames", "height", "width", "channels"}, "layout.");
    c.layout.frames = detail::get_int(o, "frames", c.layout.frames, "layout.");
    c.layout.height = detail::get_int(o, "height", c.layout.height, "layout.");
    c.layout.width = detail::get_int(o, "width", c.layout.width, "layout.");
    c.layout.channels = detail::get_int(o, "channels", c.layout.channels, "layout.");
  }
  if (j.contains("model")) {
    const auto& o = j.at("model");
    detail::reject_unknown_keys(o, {"c_model", "d_state", "blocks"}, "model.");
    c.model.c_model = detail::get_int(o, "c_model", c.model.c_model, "model.");
    c.model.d_state = detail::get_int(o, "d_state", c.model.d_state, "model.");
    c.model.blocks = detail::get_int(o, "blocks", c.model.blocks, "model.");
  }
  if (j.contains("schedule")) {
    const auto& o = j.at("schedule");
    detail::reject_unknown_keys(o, {"steps", "beta_min", "beta_max"}, "schedule.");
    c.schedule.steps = detail::get_int(o, "steps", c.schedule.steps, "schedule.");
    c.schedule.beta_min = detail::get_num(o, "beta_min", c.schedule.beta_min, "schedule.");
    c.schedule.beta_max = detail::get_num(o, "beta_max", c.schedule.beta_max, "schedule.");
  }
  if (j.contains("training")) {
    const auto& o = j.at("training");
    detail::reject_unknown_keys(o, {"steps", "batch", "lr", "p_uncond", "seed"}, "training.");
    c.training.steps = detail::get_int(o, "steps", c.training.steps, "training.");
    c.training.batch = detail::get_int(o, "batch", c.training.batch, "training.");
    c.training.lr = detail::get_num(o, "lr", c.training.lr, "training.");
    c.training.p_uncond = detail::get_num(o, "p_uncond", c.training.p_uncond, "training.");
    c.training.seed = static_cast<std::uint64_t>(
        detail::get_int(o, "seed", static_cast<std::int64_t>(c.training.seed), "training."));
  }
  if (j.contains("sampling")) {
    const auto& o = j.at("sampling");
    detail::reject_unknown_keys(o, {"ddim_steps", "guidance", "gates"}, "sampling.");
    c.sampling.ddim_steps = detail::get_int(o, "ddim_steps", c.sampling.ddim_steps, "sampling.");
    c.sampling.guidance = detail::get_num(o, "guidance", c.sampling.guidance, "sampling.");
    if (o.contains("gates")) {
      const auto& g = o.at("gates");
      if (!g.is_array() || g.size() != 2 || !g[0].is_number_integer() ||
          !g[1].is_number_integer()) {
        throw ConfigError("config: sampling.gates must be an array of two binary integers");
      }
      const std::int64_t a = g[0].get<std::int64_t>();
      const std::int64_t m = g[1].get<std::int64_t>();
      if ((a != 0 && a != 1) || (m != 0 && m != 1)) {
        throw ConfigError("config: sampling.gates entries must be 0 or 1");
      }
      c.sampling.gates = {a == 1, m == 1};
    }
  }
  if (j.contains("paths")) {
    const auto& o = j.at("paths");
    detail::reject_unknown_keys(o, {"out_dir"}, "paths.");
    if (o.contains("out_dir")) {
      if (!o.at("out_dir").is_string()) throw ConfigError("config: paths.out_dir must be a string");
      c.paths.out_dir = o.at("out_dir").get<std::string>();
    }
  }
  if (j.contains("data")) {
    const auto& o = j.at("data");
    detail::reject_unknown_keys(o, {"count"}, "data.");
    c.data.count = detail::get_int(o, "count", c.data.count, "data.");
  }
  validate_run_config(c);
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return parse_run_config(std::string(bytes.begin(), bytes.end()));
}

inline std::string dump_run_config(const RunConfig& c) {
  nlohmann::json j;
  j["layout"] = {{"frames", c.layout.frames},
                 {"height", c.layout.height},
                 {"width", c.layout.width},
                 {"channels", c.layout.channels}};
  j["model"] = {{"c_model", c.model.c_model},
                {"d_state", c.model.d_state},
                {"blocks", c.model.blocks}};
  j["schedule"] = {{"steps", c.schedule.steps},
                   {"beta_min", c.schedule.beta_min},
                   {"beta_max", c.schedule.beta_max}};
  j["training"] = {{"steps", c.training.steps},
                   {"batch", c.training.batch},
                   {"lr", c.training.lr},
                   {"p_uncond", c.training.p_uncond},
                   {"seed", static_cast<std::int64_t>(c.training.seed)}};
  j["sampling"] = {{"ddim_steps", c.sampling.ddim_steps},
                   {"guidance", c.sampling.guidance},
                   {"gates", {c.sampling.gates.audio ? 1 : 0, c.sampling.gates.motion ? 1 : 0}}};
  j["paths"] = {{"out_dir", c.paths.out_dir}};
  j["data"] = {{"count", c.data.count}};
  return j.dump(2) + "\n";
}

}  // namespace mssm
