#include "hwm/grid_env.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace hwm {

const char* noise_name(Noise n) {
  switch (n) {
    case Noise::none: return "none";
    case Noise::stripes: return "stripes";
    case Noise::random_walk: return "random_walk";
  }
  return "?";
}

Noise noise_from_name(const std::string& s) {
  if (s == "none") return Noise::none;
  if (s == "stripes") return Noise::stripes;
  if (s == "random_walk") return Noise::random_walk;
  throw std::invalid_argument("unknown noise mode '" + s + "' (none|stripes|random_walk)");
}

void GridEnvConfig::validate() const {
  if (grid < 2) throw std::invalid_argument("env.grid must be >= 2");
  if (image < 2 || image % 2 != 0) throw std::invalid_argument("env.image must be even and >= 2");
  if (image % grid != 0 || (image / 2) % grid != 0)
    throw std::invalid_argument("env.grid must tile both the frame height and the left half width (image=" +
                                std::to_string(image) + ", grid=" + std::to_string(grid) + ")");
  if (time_limit < 1) throw std::invalid_argument("env.time_limit must be >= 1");
  if (noise_amplitude < 0.0) throw std::invalid_argument("env.noise_amplitude must be >= 0");
}

GridEnv::GridEnv(const GridEnvConfig& cfg, std::uint64_t seed) : cfg_(cfg), env_rng_(seed), exo_rng_(seed ^ 0x9e3779b97f4a7c15ull) {
  cfg_.validate();
  st_.need_reset = true;
}

std::vector<double> GridEnv::make_exo_field(const GridEnvConfig& cfg, Rng& exo_rng) {
  std::vector<double> field(static_cast<std::size_t>(cfg.exo_size()), 0.0);
  switch (cfg.noise) {
    case Noise::none:
      break;
    case Noise::stripes: {
      const int half = cfg.image / 2;
      for (int r = 0; r < cfg.image; ++r)
        for (int c = 0; c < half; ++c)
          field[static_cast<std::size_t>(r) * half + c] =
              0.5 * (1.0 + std::sin(2.0 * std::numbers::pi * r / 8.0));
      break;
    }
    case Noise::random_walk:
      for (auto& v : field) v = exo_rng.uniform();
      break;
  }
  return field;
}

void GridEnv::exo_step(const GridEnvConfig& cfg, std::vector<double>& field, int next_step, Rng& exo_rng) {
  const int half = cfg.image / 2;
  switch (cfg.noise) {
    case Noise::none:
      break;
    case Noise::stripes:
      // scrolls one row per step, a pure function of the step index
      for (int r = 0; r < cfg.image; ++r)
        for (int c = 0; c < half; ++c)
          field[static_cast<std::size_t>(r) * half + c] =
              0.5 * (1.0 + std::sin(2.0 * std::numbers::pi * (r - next_step) / 8.0));
      break;
    case Noise::random_walk:
      // fixed draw count per step, so the stream never depends on actions
      for (auto& v : field) {
        v += (exo_rng.uniform() < 0.5 ? -0.15 : 0.15);
        v = std::clamp(v, 0.0, 1.0);
      }
      break;
  }
}

std::vector<float> GridEnv::render_frame(const GridEnvConfig& cfg, int agent_r, int agent_c,
                                         int target_r, int target_c,
                                         const std::vector<double>& exo_field) {
  const int half = cfg.image / 2;
  std::vector<float> obs(static_cast<std::size_t>(cfg.obs_dim()), 0.0f);
  auto paint = [&](int gr, int gc, float v) {
    for (int r = gr * cfg.cell_h(); r < (gr + 1) * cfg.cell_h(); ++r)
      for (int c = gc * cfg.cell_w(); c < (gc + 1) * cfg.cell_w(); ++c)
        obs[static_cast<std::size_t>(r) * cfg.image + c] = v;
  };
  paint(target_r, target_c, 0.5f);
  paint(agent_r, agent_c, 1.0f);  // agent drawn last, covers the goal
  for (int r = 0; r < cfg.image; ++r)
    for (int c = 0; c < half; ++c) {
      const double v = cfg.noise_amplitude * exo_field[static_cast<std::size_t>(r) * half + c];
      obs[static_cast<std::size_t>(r) * cfg.image + half + c] =
          static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  return obs;
}

std::vector<float> GridEnv::render() const {
  return render_frame(cfg_, st_.agent_r, st_.agent_c, st_.target_r, st_.target_c, st_.exo);
}

std::vector<float> GridEnv::reset() {
  st_.step_count = 0;
  st_.need_reset = false;
  st_.target_r = env_rng_.uniform_int(cfg_.grid);
  st_.target_c = env_rng_.uniform_int(cfg_.grid);
  do {
    st_.agent_r = env_rng_.uniform_int(cfg_.grid);
    st_.agent_c = env_rng_.uniform_int(cfg_.grid);
  } while (st_.agent_r == st_.target_r && st_.agent_c == st_.target_c);
  st_.exo = make_exo_field(cfg_, exo_rng_);
  return render();
}

void GridEnv::move(int dr, int dc) {
  st_.agent_r = std::clamp(st_.agent_r + dr, 0, cfg_.grid - 1);
  st_.agent_c = std::clamp(st_.agent_c + dc, 0, cfg_.grid - 1);
}

EnvStep GridEnv::step_discrete(int action) {
  if (cfg_.continuous_actions)
    throw std::logic_error("step_discrete called on a continuous-action environment");
  if (action < 0 || action >= 5) throw std::invalid_argument("action must be in [0, 5)");
  static const int drs[5] = {-1, 1, 0, 0, 0};
  static const int dcs[5] = {0, 0, -1, 1, 0};
  return step_moved(drs[action], dcs[action]);
}

EnvStep GridEnv::step(std::span<const double> action) {
  if (static_cast<int>(action.size()) != cfg_.action_dim())
    throw std::invalid_argument("action length " + std::to_string(action.size()) + ", expected " +
                                std::to_string(cfg_.action_dim()));
  if (cfg_.continuous_actions) {
    auto axis = [](double a) { return a >= 0.5 ? 1 : (a <= -0.5 ? -1 : 0); };
    return step_moved(axis(action[1]), axis(action[0]));
  }
  int best = 0;
  for (int i = 1; i < 5; ++i)
    if (action[static_cast<std::size_t>(i)] > action[static_cast<std::size_t>(best)]) best = i;
  static const int drs[5] = {-1, 1, 0, 0, 0};
  static const int dcs[5] = {0, 0, -1, 1, 0};
  return step_moved(drs[best], dcs[best]);
}

EnvStep GridEnv::step_moved(int dr, int dc) {
  if (st_.need_reset) throw std::logic_error("step after episode end; call reset()");
  move(dr, dc);
  st_.step_count += 1;
  exo_step(cfg_, st_.exo, st_.step_count, exo_rng_);
  EnvStep out;
  const bool at_goal = st_.agent_r == st_.target_r && st_.agent_c == st_.target_c;
  out.reward = (at_goal ? 1.0 : 0.0) - cfg_.step_cost;
  out.truncated = st_.step_count >= cfg_.time_limit;
  out.cont = out.truncated ? 0.0 : 1.0;
  out.obs = render();
  if (out.truncated) st_.need_reset = true;
  return out;
}

GridEnvState GridEnv::save_state() const {
  GridEnvState s = st_;
  s.env_rng = env_rng_.save_state();
  s.exo_rng = exo_rng_.save_state();
  return s;
}

void GridEnv::load_state(const GridEnvState& s) {
  if (s.exo.size() != static_cast<std::size_t>(cfg_.exo_size()) && !s.need_reset)
    throw std::invalid_argument("environment state has wrong distractor field size");
  st_ = s;
  env_rng_.load_state(s.env_rng);
  exo_rng_.load_state(s.exo_rng);
}

}  // namespace hwm
