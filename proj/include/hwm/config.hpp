#pragma once
// Run configuration: one struct covering every tunable in the stack, a
// keyed registry with defaults and documentation, an INI-style file
// parser, dotted-path overrides, and a canonical dump whose hash stamps
// checkpoint manifests. Unknown keys are rejected everywhere.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <istream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hwm/agent.hpp"
#include "hwm/grid_env.hpp"
#include "hwm/masking.hpp"
#include "hwm/world_model.hpp"

namespace hwm {

struct RunConfig {
  GridEnvConfig env;

  // masking
  double mask_ratio = 0.5;
  CuboidSpec cube;  // depth 2, 4x4 spatial
  double mask_fill = 0.0;

  WorldModelConfig wm;  // obs/action dims derived from env in finalize()
  AgentConfig agent;
  std::string action_mode = "auto";  // auto follows env.continuous_actions

  // trainer
  std::size_t batch_size = 8;
  std::size_t batch_length = 16;
  std::size_t updates_per_collect = 4;
  std::size_t env_steps_per_collect = 16;
  std::size_t prefill = 500;
  std::size_t total_env_steps = 20000;
  std::size_t replay_capacity = 100000;
  std::size_t action_repeat = 1;
  std::size_t checkpoint_every = 1000;  // train steps; 0 keeps only the final one
  bool collector_thread = false;
  double model_lr = 1e-4;
  double model_eps = 1e-8;
  double model_clip = 1000.0;
  double ac_lr = 3e-5;
  double ac_eps = 1e-5;
  double ac_clip = 100.0;
  std::uint64_t seed = 0;

  // Resolves derived fields and validates the whole bundle. Call after
  // the last override and before building any component.
  void finalize() {
    env.validate();
    wm.obs_dim = static_cast<std::size_t>(env.obs_dim());
    wm.action_dim = static_cast<std::size_t>(env.action_dim());
    agent.action_dim = wm.action_dim;
    agent.bins = wm.bins;
    if (action_mode == "auto") {
      agent.action_mode = env.continuous_actions ? ActionMode::continuous : ActionMode::discrete;
    } else if (action_mode == "discrete") {
      if (env.continuous_actions)
        throw std::invalid_argument(
            "agent.action_mode: discrete conflicts with env.continuous_actions = true");
      agent.action_mode = ActionMode::discrete;
    } else if (action_mode == "continuous") {
      if (!env.continuous_actions)
        throw std::invalid_argument(
            "agent.action_mode: continuous conflicts with env.continuous_actions = false");
      agent.action_mode = ActionMode::continuous;
    } else {
      throw std::invalid_argument("agent.action_mode: '" + action_mode +
                                  "' is not one of auto, discrete, continuous");
    }
    wm.validate();
    agent.validate();
    if (mask_ratio < 0.0 || mask_ratio >= 1.0)
      throw std::invalid_argument("masking.mask_ratio must lie in [0, 1)");
    if (cube.pk == 0 || cube.ph == 0 || cube.pw == 0)
      throw std::invalid_argument("masking: cuboid extents must be positive");
    if (batch_length % cube.pk != 0)
      throw std::invalid_argument("trainer.batch_length must be divisible by masking.cube_depth");
    if (static_cast<std::size_t>(env.image) % cube.ph != 0 ||
        static_cast<std::size_t>(env.image) % cube.pw != 0)
      throw std::invalid_argument("env.image must be divisible by the cuboid spatial extents");
    if (batch_size == 0 || batch_length == 0)
      throw std::invalid_argument("trainer.batch_size and batch_length must be positive");
    if (updates_per_collect == 0 || env_steps_per_collect == 0)
      throw std::invalid_argument("trainer: updates_per_collect and env_steps_per_collect must be positive");
    if (action_repeat == 0) throw std::invalid_argument("trainer.action_repeat must be positive");
    if (replay_capacity < batch_length)
      throw std::invalid_argument("trainer.replay_capacity must hold at least one window");
    if (model_lr <= 0.0 || ac_lr <= 0.0) throw std::invalid_argument("trainer: learning rates must be positive");
    if (model_eps <= 0.0 || ac_eps <= 0.0) throw std::invalid_argument("trainer: adam eps must be positive");
  }
};

namespace detail_config {

inline std::string fmt_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s, const std::string& key) {
  double v = 0.0;
  const char* end = s.data() + s.size();
  const auto res = std::from_chars(s.data(), end, v);
  if (res.ec != std::errc{} || res.ptr != end)
    throw std::invalid_argument(key + ": '" + s + "' is not a number");
  return v;
}

inline std::uint64_t parse_u64(const std::string& s, const std::string& key) {
  std::uint64_t v = 0;
  const char* end = s.data() + s.size();
  const auto res = std::from_chars(s.data(), end, v);
  if (res.ec != std::errc{} || res.ptr != end)
    throw std::invalid_argument(key + ": '" + s + "' is not a non-negative integer");
  return v;
}

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw std::invalid_argument(key + ": '" + s + "' is not a boolean (true/false)");
}

}  // namespace detail_config

struct ConfigKey {
  std::string key;  // dotted: section.name
  std::string doc;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

// Registry in canonical (dump) order: sections grouped, keys in declaration
// order. The table drives parsing, overrides, --help, and the hash.
inline const std::vector<ConfigKey>& config_keys() {
  using detail_config::fmt_double;
  using detail_config::parse_bool;
  using detail_config::parse_double;
  using detail_config::parse_u64;
  auto u64 = [](std::string key, std::string doc, auto ref) {
    return ConfigKey{
        key, std::move(doc),
        [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); },
        [ref, key](RunConfig& c, const std::string& s) {
          ref(c) = static_cast<std::remove_reference_t<decltype(ref(c))>>(parse_u64(s, key));
        }};
  };
  auto ival = [](std::string key, std::string doc, auto ref) {
    return ConfigKey{
        key, std::move(doc),
        [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); },
        [ref, key](RunConfig& c, const std::string& s) {
          const std::uint64_t v = parse_u64(s, key);
          if (v > 1000000000ULL) throw std::invalid_argument(key + ": implausibly large");
          ref(c) = static_cast<int>(v);
        }};
  };
  auto dbl = [](std::string key, std::string doc, auto ref) {
    return ConfigKey{
        key, std::move(doc),
        [ref](const RunConfig& c) { return fmt_double(ref(const_cast<RunConfig&>(c))); },
        [ref, key](RunConfig& c, const std::string& s) { ref(c) = parse_double(s, key); }};
  };
  auto flag = [](std::string key, std::string doc, auto ref) {
    return ConfigKey{
        key, std::move(doc),
        [ref](const RunConfig& c) { return ref(const_cast<RunConfig&>(c)) ? "true" : "false"; },
        [ref, key](RunConfig& c, const std::string& s) { ref(c) = parse_bool(s, key); }};
  };

  static const std::vector<ConfigKey> keys = [&] {
    std::vector<ConfigKey> t;
    // env
    t.push_back(ival("env.grid", "playfield cells per side", [](RunConfig& c) -> int& { return c.env.grid; }));
    t.push_back(ival("env.image", "square frame edge in pixels; playfield fills the left half",
                     [](RunConfig& c) -> int& { return c.env.image; }));
    t.push_back(ConfigKey{"env.noise", "distractor rule: none, stripes, or random_walk",
                          [](const RunConfig& c) { return std::string(noise_name(c.env.noise)); },
                          [](RunConfig& c, const std::string& s) { c.env.noise = noise_from_name(s); }});
    t.push_back(dbl("env.noise_amplitude", "scale of the distractor pixels",
                    [](RunConfig& c) -> double& { return c.env.noise_amplitude; }));
    t.push_back(ival("env.time_limit", "steps before an episode truncates",
                     [](RunConfig& c) -> int& { return c.env.time_limit; }));
    t.push_back(flag("env.continuous_actions", "drive the agent with a 2-d vector instead of 5 keys",
                     [](RunConfig& c) -> bool& { return c.env.continuous_actions; }));
    t.push_back(dbl("env.step_cost", "constant reward penalty per step",
                    [](RunConfig& c) -> double& { return c.env.step_cost; }));
    // masking
    t.push_back(dbl("masking.mask_ratio", "fraction of cuboid cells blanked per training window",
                    [](RunConfig& c) -> double& { return c.mask_ratio; }));
    t.push_back(u64("masking.cube_depth", "cuboid extent along time (frames)",
                    [](RunConfig& c) -> std::size_t& { return c.cube.pk; }));
    t.push_back(u64("masking.cube_h", "cuboid extent down the image",
                    [](RunConfig& c) -> std::size_t& { return c.cube.ph; }));
    t.push_back(u64("masking.cube_w", "cuboid extent across the image",
                    [](RunConfig& c) -> std::size_t& { return c.cube.pw; }));
    t.push_back(dbl("masking.mask_fill", "value written into blanked pixels",
                    [](RunConfig& c) -> double& { return c.mask_fill; }));
    // world model
    t.push_back(u64("world_model.embed", "encoder output width",
                    [](RunConfig& c) -> std::size_t& { return c.wm.embed; }));
    t.push_back(u64("world_model.hidden", "hidden width of every model MLP",
                    [](RunConfig& c) -> std::size_t& { return c.wm.hidden; }));
    t.push_back(u64("world_model.units", "recurrent state width",
                    [](RunConfig& c) -> std::size_t& { return c.wm.units; }));
    t.push_back(u64("world_model.groups", "categorical latent groups",
                    [](RunConfig& c) -> std::size_t& { return c.wm.groups; }));
    t.push_back(u64("world_model.classes", "classes per latent group",
                    [](RunConfig& c) -> std::size_t& { return c.wm.classes; }));
    t.push_back(u64("world_model.proj_dim", "shared projection width for the latent reconstruction loss",
                    [](RunConfig& c) -> std::size_t& { return c.wm.proj_dim; }));
    t.push_back(dbl("world_model.unimix", "uniform mixing weight on categorical probabilities",
                    [](RunConfig& c) -> double& { return c.wm.unimix; }));
    t.push_back(dbl("world_model.free_nats", "per-step KL floor, applied after the group sum",
                    [](RunConfig& c) -> double& { return c.wm.free_nats; }));
    t.push_back(dbl("world_model.beta_dyn", "weight of KL[sg(post) || prior]",
                    [](RunConfig& c) -> double& { return c.wm.beta_dyn; }));
    t.push_back(dbl("world_model.beta_rep", "weight of KL[post || sg(prior)]",
                    [](RunConfig& c) -> double& { return c.wm.beta_rep; }));
    t.push_back(dbl("world_model.sim_gamma", "discount inside the similarity target",
                    [](RunConfig& c) -> double& { return c.wm.sim_gamma; }));
    t.push_back(dbl("world_model.ema_momentum", "weight of the online value in each twin update",
                    [](RunConfig& c) -> double& { return c.wm.ema_momentum; }));
    t.push_back(ConfigKey{
        "world_model.sim_pairing", "similarity pairing: cross_branch or masked_pair",
        [](const RunConfig& c) {
          return std::string(c.wm.sim_pairing == SimPairing::cross_branch ? "cross_branch"
                                                                          : "masked_pair");
        },
        [](RunConfig& c, const std::string& s) {
          if (s == "cross_branch") c.wm.sim_pairing = SimPairing::cross_branch;
          else if (s == "masked_pair") c.wm.sim_pairing = SimPairing::masked_pair;
          else
            throw std::invalid_argument(
                "world_model.sim_pairing: '" + s + "' is not cross_branch or masked_pair");
        }});
    t.push_back(flag("world_model.pred_normalized", "l2-normalize states before the reward/continue heads",
                     [](RunConfig& c) -> bool& { return c.wm.pred_normalized; }));
    t.push_back(dbl("world_model.bins_low", "lowest two-hot bin center (symlog space)",
                    [](RunConfig& c) -> double& { return c.wm.bins.low; }));
    t.push_back(dbl("world_model.bins_high", "highest two-hot bin center (symlog space)",
                    [](RunConfig& c) -> double& { return c.wm.bins.high; }));
    t.push_back(ival("world_model.bins_count", "number of two-hot bins",
                     [](RunConfig& c) -> int& { return c.wm.bins.n; }));
    // agent
    t.push_back(u64("agent.hidden", "hidden width of actor and critic",
                    [](RunConfig& c) -> std::size_t& { return c.agent.hidden; }));
    t.push_back(u64("agent.n_hidden", "hidden layers in actor and critic",
                    [](RunConfig& c) -> std::size_t& { return c.agent.n_hidden; }));
    t.push_back(u64("agent.horizon", "imagination rollout length",
                    [](RunConfig& c) -> std::size_t& { return c.agent.horizon; }));
    t.push_back(dbl("agent.discount", "reward discount in imagined returns",
                    [](RunConfig& c) -> double& { return c.agent.discount; }));
    t.push_back(dbl("agent.lambda", "lambda-return mixing weight",
                    [](RunConfig& c) -> double& { return c.agent.lam; }));
    t.push_back(dbl("agent.entropy_scale", "policy entropy bonus weight",
                    [](RunConfig& c) -> double& { return c.agent.entropy_scale; }));
    t.push_back(dbl("agent.critic_ema_decay", "decay of the critic's slow copy",
                    [](RunConfig& c) -> double& { return c.agent.critic_ema_decay; }));
    t.push_back(dbl("agent.critic_reg_weight", "pull toward the slow critic's distribution",
                    [](RunConfig& c) -> double& { return c.agent.critic_reg_weight; }));
    t.push_back(dbl("agent.norm_decay", "return-normalizer percentile decay",
                    [](RunConfig& c) -> double& { return c.agent.norm_decay; }));
    t.push_back(dbl("agent.norm_limit", "lower bound of the advantage scale",
                    [](RunConfig& c) -> double& { return c.agent.norm_limit; }));
    t.push_back(dbl("agent.unimix", "uniform mixing weight on the discrete policy",
                    [](RunConfig& c) -> double& { return c.agent.unimix; }));
    t.push_back(dbl("agent.logstd_min", "continuous head: lower log-stddev bound",
                    [](RunConfig& c) -> double& { return c.agent.logstd_min; }));
    t.push_back(dbl("agent.logstd_max", "continuous head: upper log-stddev bound",
                    [](RunConfig& c) -> double& { return c.agent.logstd_max; }));
    t.push_back(ConfigKey{"agent.action_mode", "auto, discrete, or continuous; auto follows the env",
                          [](const RunConfig& c) { return c.action_mode; },
                          [](RunConfig& c, const std::string& s) {
                            if (s != "auto" && s != "discrete" && s != "continuous")
                              throw std::invalid_argument(
                                  "agent.action_mode: '" + s +
                                  "' is not one of auto, discrete, continuous");
                            c.action_mode = s;
                          }});
    // trainer
    t.push_back(u64("trainer.batch_size", "training windows per update",
                    [](RunConfig& c) -> std::size_t& { return c.batch_size; }));
    t.push_back(u64("trainer.batch_length", "steps per training window",
                    [](RunConfig& c) -> std::size_t& { return c.batch_length; }));
    t.push_back(u64("trainer.updates_per_collect", "gradient updates per collection burst",
                    [](RunConfig& c) -> std::size_t& { return c.updates_per_collect; }));
    t.push_back(u64("trainer.env_steps_per_collect", "env steps per collection burst",
                    [](RunConfig& c) -> std::size_t& { return c.env_steps_per_collect; }));
    t.push_back(u64("trainer.prefill", "random env steps before the first update",
                    [](RunConfig& c) -> std::size_t& { return c.prefill; }));
    t.push_back(u64("trainer.total_env_steps", "env steps after which the run stops",
                    [](RunConfig& c) -> std::size_t& { return c.total_env_steps; }));
    t.push_back(u64("trainer.replay_capacity", "replay rows kept before FIFO eviction",
                    [](RunConfig& c) -> std::size_t& { return c.replay_capacity; }));
    t.push_back(u64("trainer.action_repeat", "env steps each chosen action is held for",
                    [](RunConfig& c) -> std::size_t& { return c.action_repeat; }));
    t.push_back(u64("trainer.checkpoint_every", "train steps between checkpoints; 0 keeps only the final",
                    [](RunConfig& c) -> std::size_t& { return c.checkpoint_every; }));
    t.push_back(flag("trainer.collector_thread", "collect on a second thread (forfeits determinism)",
                     [](RunConfig& c) -> bool& { return c.collector_thread; }));
    t.push_back(dbl("trainer.model_lr", "world-model Adam learning rate",
                    [](RunConfig& c) -> double& { return c.model_lr; }));
    t.push_back(dbl("trainer.model_eps", "world-model Adam epsilon",
                    [](RunConfig& c) -> double& { return c.model_eps; }));
    t.push_back(dbl("trainer.model_clip", "world-model global gradient-norm clip",
                    [](RunConfig& c) -> double& { return c.model_clip; }));
    t.push_back(dbl("trainer.ac_lr", "actor/critic Adam learning rate",
                    [](RunConfig& c) -> double& { return c.ac_lr; }));
    t.push_back(dbl("trainer.ac_eps", "actor/critic Adam epsilon",
                    [](RunConfig& c) -> double& { return c.ac_eps; }));
    t.push_back(dbl("trainer.ac_clip", "actor/critic global gradient-norm clip",
                    [](RunConfig& c) -> double& { return c.ac_clip; }));
    t.push_back(u64("trainer.seed", "master seed for every stream in the run",
                    [](RunConfig& c) -> std::uint64_t& { return c.seed; }));
    return t;
  }();
  return keys;
}

inline const ConfigKey* find_config_key(const std::string& key) {
  for (const auto& k : config_keys())
    if (k.key == key) return &k;
  return nullptr;
}

// Applies one dotted override; unknown keys and malformed values throw
// with the key named.
inline void apply_kv(RunConfig& cfg, const std::string& key, const std::string& value) {
  const ConfigKey* k = find_config_key(key);
  if (!k) throw std::invalid_argument("unknown config key '" + key + "'");
  k->set(cfg, value);
}

namespace detail_config {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace detail_config

// Parses `[section]` / `key = value` text. Blank lines and lines starting
// with '#' or ';' are ignored. Keys repeated within one file, keys outside
// any section, and unknown keys are errors, reported with line numbers.
inline void load_config(RunConfig& cfg, std::istream& is, const std::string& origin) {
  using detail_config::trim;
  std::string line, section;
  std::vector<std::string> seen;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw std::invalid_argument(where + "unterminated section header");
      section = trim(t.substr(1, t.size() - 2));
      if (section.empty()) throw std::invalid_argument(where + "empty section name");
      continue;
    }
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(where + "expected 'key = value', got '" + t + "'");
    const std::string name = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (name.empty()) throw std::invalid_argument(where + "missing key before '='");
    if (section.empty())
      throw std::invalid_argument(where + "key '" + name + "' appears before any [section]");
    const std::string dotted = section + "." + name;
    for (const auto& s : seen)
      if (s == dotted) throw std::invalid_argument(where + "duplicate key '" + dotted + "'");
    seen.push_back(dotted);
    try {
      apply_kv(cfg, dotted, value);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(where + e.what());
    }
  }
}

inline void load_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("cannot open config file '" + path + "'");
  load_config(cfg, f, path);
}

// Canonical text: registry order, one section header per group. Reparsing
// the dump reproduces the config exactly.
inline std::string dump_config(const RunConfig& cfg) {
  std::ostringstream os;
  std::string section;
  for (const auto& k : config_keys()) {
    const std::string sec = k.key.substr(0, k.key.find('.'));
    if (sec != section) {
      if (!section.empty()) os << "\n";
      os << "[" << sec << "]\n";
      section = sec;
    }
    os << k.key.substr(sec.size() + 1) << " = " << k.get(cfg) << "\n";
  }
  return os.str();
}

// FNV-1a over the canonical dump; stamped into checkpoint manifests.
inline std::uint64_t config_hash(const RunConfig& cfg) {
  const std::string s = dump_config(cfg);
  std::uint64_t h = 1469598103934665603ULL;
  for (const unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string config_hash_hex(const RunConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(config_hash(cfg)));
  return std::string(buf);
}

// One line per key for --help: key, default, description.
inline std::string config_help() {
  RunConfig defaults;
  std::ostringstream os;
  for (const auto& k : config_keys())
    os << "  " << k.key << " = " << k.get(defaults) << "\n      " << k.doc << "\n";
  return os.str();
}

}  // namespace hwm
