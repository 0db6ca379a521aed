#pragma once

// Small fully-observed navigation environment rendered as a square grayscale
// image. The left half of the frame is the playfield (agent = 1.0, goal =
// 0.5, background = 0); the right half is a distractor block whose pixels
// evolve on their own stream and never react to actions. Episodes end only
// by time limit; the continue flag is 0 exactly on the truncating step.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hwm/rng.hpp"

namespace hwm {

enum class Noise { none, stripes, random_walk };

const char* noise_name(Noise n);
Noise noise_from_name(const std::string& s);

struct GridEnvConfig {
  int grid = 8;    // playfield cells per side
  int image = 16;  // frame is image x image pixels; playfield = left half
  Noise noise = Noise::random_walk;
  double noise_amplitude = 1.0;
  int time_limit = 64;
  bool continuous_actions = false;  // 2-d vector in [-1,1]^2 instead of 5 keys
  double step_cost = 0.01;

  void validate() const;
  int obs_dim() const { return image * image; }
  int action_dim() const { return continuous_actions ? 2 : 5; }
  int cell_h() const { return image / grid; }
  int cell_w() const { return (image / 2) / grid; }
  int exo_size() const { return image * (image / 2); }
};

struct EnvStep {
  std::vector<float> obs;
  double reward = 0.0;
  double cont = 1.0;
  bool truncated = false;
};

// Everything needed to resume the environment bit-exactly.
struct GridEnvState {
  int agent_r = 0, agent_c = 0;
  int target_r = 0, target_c = 0;
  int step_count = 0;
  bool need_reset = true;
  std::vector<double> exo;
  std::string env_rng;  // reset draws
  std::string exo_rng;  // distractor draws
};

class GridEnv {
 public:
  GridEnv(const GridEnvConfig& cfg, std::uint64_t seed);

  std::vector<float> reset();
  EnvStep step(std::span<const double> action);  // length = action_dim()
  EnvStep step_discrete(int action);             // 0 up, 1 down, 2 left, 3 right, 4 stay

  std::vector<float> render() const;
  const GridEnvConfig& config() const { return cfg_; }
  int steps_in_episode() const { return st_.step_count; }
  bool needs_reset() const { return st_.need_reset; }
  int agent_row() const { return st_.agent_r; }
  int agent_col() const { return st_.agent_c; }

  GridEnvState save_state() const;
  void load_state(const GridEnvState& s);

  // Distractor block primitives, exposed so probes can build observation
  // pairs that differ only in the distractor (or only in the agent).
  static std::vector<double> make_exo_field(const GridEnvConfig& cfg, Rng& exo_rng);
  static void exo_step(const GridEnvConfig& cfg, std::vector<double>& field, int next_step,
                       Rng& exo_rng);
  static std::vector<float> render_frame(const GridEnvConfig& cfg, int agent_r, int agent_c,
                                         int target_r, int target_c,
                                         const std::vector<double>& exo_field);

 private:
  void move(int dr, int dc);
  EnvStep step_moved(int dr, int dc);

  GridEnvConfig cfg_;
  GridEnvState st_;
  Rng env_rng_;
  Rng exo_rng_;
};

}  // namespace hwm
