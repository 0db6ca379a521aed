#pragma once
// Training-loop plumbing: the seeded stream plan, data collection through
// a latent policy filter, the per-update step (model losses -> Adam ->
// twin EMA -> imagination -> behavior updates), whole-run checkpoints
// that resume bit-exactly, and an optional collector thread.
//
// Sequential mode is bit-deterministic under a fixed seed: every random
// draw comes from one of the named streams below, in a fixed order. The
// threaded mode trades that determinism for overlap and is off by
// default.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <fstream>
#include <istream>
#include <limits>
#include <mutex>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "hwm/agent.hpp"
#include "hwm/config.hpp"
#include "hwm/grid_env.hpp"
#include "hwm/masking.hpp"
#include "hwm/metrics.hpp"
#include "hwm/nn.hpp"
#include "hwm/replay.hpp"
#include "hwm/rng.hpp"
#include "hwm/serial.hpp"
#include "hwm/world_model.hpp"
#include "json.hpp"

namespace hwm {

// Every rng stream a run consumes, forked from the master seed in a fixed
// order the checkpoint format relies on.
struct SeedPlan {
  std::uint64_t env, init, act, sample, mask, roll_mask, roll_raw, pair, imagine;
  explicit SeedPlan(std::uint64_t seed) {
    Rng m(seed);
    env = m.fork_seed();
    init = m.fork_seed();
    act = m.fork_seed();
    sample = m.fork_seed();
    mask = m.fork_seed();
    roll_mask = m.fork_seed();
    roll_raw = m.fork_seed();
    pair = m.fork_seed();
    imagine = m.fork_seed();
  }
};

struct StepReport {
  LossBreakdown model;
  double model_grad_norm = 0, actor_grad_norm = 0, critic_grad_norm = 0;
  double critic_nll = 0, critic_reg = 0, actor_obj = 0, entropy = 0, adv_scale = 1;
  double imag_return_mean = 0, value_mean = 0, ema_drift_norm = 0;
  bool skipped = false;           // model update dropped (non-finite loss)
  bool behavior_skipped = false;  // behavior update dropped
  MetricsRecord record;
};

template <typename T>
class Trainer {
 public:
  explicit Trainer(const RunConfig& cfg) : Trainer(cfg, SeedPlan(cfg.seed)) {}

  const RunConfig& config() const { return cfg_; }
  long long env_steps() const { return env_steps_; }
  long long train_steps() const { return train_steps_; }
  long long episodes() const { return episodes_done_; }
  long long skipped_updates() const { return skipped_steps_; }
  double last_episode_return() const { return last_episode_return_; }
  bool done() const { return env_steps_ >= static_cast<long long>(cfg_.total_env_steps); }

  ReplayBuffer& replay() { return replay_; }
  WorldModel<T>& world_model() { return wm_; }
  ActorCritic<T>& agent() { return ac_; }
  GridEnv& env() { return env_; }

  // Pushes exactly `steps` rows: regular rows hold (obs after the action,
  // the action, summed reward, continue); right after a truncation one
  // slot holds the reset row (reset obs, zero action, reward 0).
  // Uniform-random actions until the prefill budget is spent, policy
  // samples through the latent filter afterwards.
  void collect(std::size_t steps) {
    for (std::size_t i = 0; i < steps; ++i) {
      if (!episode_open_) {
        open_episode();
        ++env_steps_;
        continue;
      }
      const std::vector<double> a = choose_action();
      auto [reward, cont] = apply_action(a);
      replay_.push(obs_, a, reward, cont);
      ++env_steps_;
      episode_return_ += reward;
      ++episode_len_;
      prev_action_ = a;
      if (cont == 0.0)
        close_episode();
      else
        step_belief(a);
    }
  }

  void prefill() {
    if (env_steps_ < static_cast<long long>(cfg_.prefill))
      collect(cfg_.prefill - static_cast<std::size_t>(env_steps_));
  }

  void collect_burst() { collect(cfg_.env_steps_per_collect); }

  // One update: sample -> cuboid-mask -> model losses -> backward -> Adam
  // -> twin EMA -> imagine -> critic/actor updates -> critic EMA. A
  // non-finite model loss skips everything but still logs a record.
  StepReport train_step() {
    StepReport rep;
    const EpisodeBatch eb = replay_.sample(cfg_.batch_size, cfg_.batch_length, sample_rng_);
    SequenceBatch<T> seq = to_sequence(eb);
    WmLoss<T> wl =
        wm_.total_loss(seq, RolloutRngs{roll_mask_rng_, roll_raw_rng_}, pair_rng_, SampleMode::hard);
    rep.model = wl.breakdown;
    if (!std::isfinite(wl.breakdown.total)) {
      ++skipped_steps_;
      rep.skipped = true;
      rep.behavior_skipped = true;
      std::fprintf(stderr, "[trainer] step %lld: non-finite model loss, update skipped\n",
                   train_steps_);
    } else {
      wl.value.backward();
      rep.model_grad_norm = adam_step(model_opt_);
      wm_.ema_step();
      update_behavior(wl, rep);
    }
    rep.ema_drift_norm = ema_drift(wm_.twin_params(), wm_.ema_params());
    ++train_steps_;
    fill_record(rep);
    return rep;
  }

  // Greedy episode on a caller-owned environment; returns the undiscounted
  // return. The belief filter draws from `rng`.
  double eval_episode(GridEnv& env, Rng& rng) {
    NoGradGuard ng;
    std::vector<float> obs = env.reset();
    Tensor<T> h = Tensor<T>::zeros({1, cfg_.wm.units});
    auto post = wm_.observe_first(h, row_tensor(obs), rng, SampleMode::hard);
    Tensor<T> z = post.z;
    h = post.h;
    double ret = 0.0;
    while (true) {
      Tensor<T> a = ac_.greedy_actions(concat_cols(h, z));
      const std::vector<double> av(a.value().begin(), a.value().end());
      double cont = 1.0;
      for (std::size_t k = 0; k < cfg_.action_repeat; ++k) {
        const EnvStep st = env.step(av);
        ret += st.reward;
        obs = st.obs;
        if (st.cont == 0.0) {
          cont = 0.0;
          break;
        }
      }
      if (cont == 0.0) break;
      auto next = wm_.observe_step(h, z, a, row_tensor(obs), rng, SampleMode::hard);
      h = next.h;
      z = next.z;
    }
    return ret;
  }

  // ---- checkpointing -------------------------------------------------

  void save_checkpoint(std::ostream& os) {
    os.write(kMagic, 8);
    serial::write_str(os, manifest().dump());
    for (Parameter<T>* p : all_params()) {
      serial::write_vec(os, p->value.value());
      serial::write_vec(os, p->m);
      serial::write_vec(os, p->v);
      serial::write_pod<long long>(os, p->steps);
    }
    serial::write_pod<long long>(os, model_opt_.skipped);
    serial::write_pod<long long>(os, actor_opt_.skipped);
    serial::write_pod<long long>(os, critic_opt_.skipped);
    serial::write_pod<double>(os, ac_.normalizer.ema_p95);
    serial::write_pod<double>(os, ac_.normalizer.ema_p5);
    serial::write_pod<std::uint8_t>(os, ac_.normalizer.primed ? 1 : 0);
    for (const Rng* r : {&act_rng_, &sample_rng_, &mask_rng_, &roll_mask_rng_, &roll_raw_rng_,
                         &pair_rng_, &imagine_rng_})
      serial::write_str(os, r->save_state());
    const GridEnvState es = env_.save_state();
    serial::write_pod<std::int32_t>(os, es.agent_r);
    serial::write_pod<std::int32_t>(os, es.agent_c);
    serial::write_pod<std::int32_t>(os, es.target_r);
    serial::write_pod<std::int32_t>(os, es.target_c);
    serial::write_pod<std::int32_t>(os, es.step_count);
    serial::write_pod<std::uint8_t>(os, es.need_reset ? 1 : 0);
    serial::write_vec(os, es.exo);
    serial::write_str(os, es.env_rng);
    serial::write_str(os, es.exo_rng);
    serial::write_pod<std::uint8_t>(os, episode_open_ ? 1 : 0);
    serial::write_vec(os, obs_);
    serial::write_vec(os, prev_action_);
    serial::write_vec(os, episode_open_ ? belief_h_.value() : std::vector<T>{});
    serial::write_vec(os, episode_open_ ? belief_z_.value() : std::vector<T>{});
    serial::write_pod<double>(os, episode_return_);
    serial::write_pod<long long>(os, episode_len_);
    serial::write_pod<long long>(os, env_steps_);
    serial::write_pod<long long>(os, train_steps_);
    serial::write_pod<long long>(os, skipped_steps_);
    serial::write_pod<long long>(os, episodes_done_);
    serial::write_pod<double>(os, last_episode_return_);
    serial::write_pod<double>(os, return_sum_);
    replay_.save(os);
  }

  void save_checkpoint(const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint file '" + path + "' for writing");
    save_checkpoint(f);
    f.flush();
    if (!f) throw std::runtime_error("failed writing checkpoint '" + path + "'");
  }

  void load_checkpoint(std::istream& is) {
    char magic[8] = {};
    is.read(magic, 8);
    if (!is || std::string(magic, 8) != std::string(kMagic, 8))
      throw std::runtime_error("checkpoint: bad magic (not a checkpoint file)");
    nlohmann::json man = nlohmann::json::parse(serial::read_str(is), nullptr, false);
    if (man.is_discarded()) throw std::runtime_error("checkpoint: unreadable manifest");
    check_manifest(man);
    for (Parameter<T>* p : all_params()) {
      std::vector<T> val = serial::read_vec<T>(is);
      if (val.size() != p->value.value().size())
        throw std::runtime_error("checkpoint: payload size mismatch at " + p->name);
      p->value.raw_value() = std::move(val);
      p->m = serial::read_vec<T>(is);
      p->v = serial::read_vec<T>(is);
      if (!p->m.empty() && p->m.size() != p->value.value().size())
        throw std::runtime_error("checkpoint: moment size mismatch at " + p->name);
      if (p->v.size() != p->m.size())
        throw std::runtime_error("checkpoint: moment size mismatch at " + p->name);
      p->steps = serial::read_pod<long long>(is);
    }
    model_opt_.skipped = serial::read_pod<long long>(is);
    actor_opt_.skipped = serial::read_pod<long long>(is);
    critic_opt_.skipped = serial::read_pod<long long>(is);
    ac_.normalizer.ema_p95 = serial::read_pod<double>(is);
    ac_.normalizer.ema_p5 = serial::read_pod<double>(is);
    ac_.normalizer.primed = serial::read_pod<std::uint8_t>(is) != 0;
    for (Rng* r : {&act_rng_, &sample_rng_, &mask_rng_, &roll_mask_rng_, &roll_raw_rng_,
                   &pair_rng_, &imagine_rng_})
      r->load_state(serial::read_str(is));
    GridEnvState es;
    es.agent_r = serial::read_pod<std::int32_t>(is);
    es.agent_c = serial::read_pod<std::int32_t>(is);
    es.target_r = serial::read_pod<std::int32_t>(is);
    es.target_c = serial::read_pod<std::int32_t>(is);
    es.step_count = serial::read_pod<std::int32_t>(is);
    es.need_reset = serial::read_pod<std::uint8_t>(is) != 0;
    es.exo = serial::read_vec<double>(is);
    es.env_rng = serial::read_str(is);
    es.exo_rng = serial::read_str(is);
    env_.load_state(es);
    episode_open_ = serial::read_pod<std::uint8_t>(is) != 0;
    obs_ = serial::read_vec<float>(is);
    prev_action_ = serial::read_vec<double>(is);
    std::vector<T> bh = serial::read_vec<T>(is);
    std::vector<T> bz = serial::read_vec<T>(is);
    if (episode_open_) {
      if (bh.size() != cfg_.wm.units || bz.size() != cfg_.wm.latent_dim())
        throw std::runtime_error("checkpoint: belief state size mismatch");
      belief_h_ = Tensor<T>::from_vec({1, cfg_.wm.units}, std::move(bh));
      belief_z_ = Tensor<T>::from_vec({1, cfg_.wm.latent_dim()}, std::move(bz));
    }
    episode_return_ = serial::read_pod<double>(is);
    episode_len_ = serial::read_pod<long long>(is);
    env_steps_ = serial::read_pod<long long>(is);
    train_steps_ = serial::read_pod<long long>(is);
    skipped_steps_ = serial::read_pod<long long>(is);
    episodes_done_ = serial::read_pod<long long>(is);
    last_episode_return_ = serial::read_pod<double>(is);
    return_sum_ = serial::read_pod<double>(is);
    replay_.load(is);
  }

  void load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint file '" + path + "'");
    load_checkpoint(f);
  }

  // ---- optional collector thread ------------------------------------
  //
  // The collector interacts with the environment through a parameter
  // snapshot refreshed between bursts and hands finished transitions over
  // a bounded queue; only the trainer thread touches the replay buffer.
  // Not deterministic. `on_step` sees every StepReport.
  template <typename StepFn>
  void run_threaded(StepFn on_step) {
    prefill();
    struct Row {
      std::vector<float> obs;
      std::vector<double> action;
      double reward, cont;
    };
    std::deque<Row> queue;
    std::mutex qmu, pmu;
    std::condition_variable room, data;
    const std::size_t cap = 4 * cfg_.env_steps_per_collect;
    std::atomic<bool> stop{false};
    std::atomic<long long> collected{env_steps_};

    Rng snap_init(0);
    WorldModel<T> wm_snap(cfg_.wm, snap_init);
    ActorCritic<T> ac_snap(cfg_.agent, cfg_.wm.state_dim(), snap_init);
    auto refresh = [&] {
      std::lock_guard<std::mutex> lk(pmu);
      ema_init_from(wm_.online_params(), wm_snap.online_params());
      ema_init_from(wm_.ema_params(), wm_snap.ema_params());
      ema_init_from(ac_.actor_params(), ac_snap.actor_params());
    };
    refresh();

    std::thread collector([&] {
      while (!stop && collected < static_cast<long long>(cfg_.total_env_steps)) {
        for (std::size_t i = 0;
             i < cfg_.env_steps_per_collect && !stop &&
             collected < static_cast<long long>(cfg_.total_env_steps);
             ++i) {
          Row row;
          if (!episode_open_) {
            begin_episode(wm_snap);
            row.obs = obs_;
            row.action = prev_action_;  // zeros
            row.reward = 0.0;
            row.cont = 1.0;
          } else {
            row.action = choose_action_with(ac_snap, false);
            auto [reward, cont] = apply_action(row.action);
            row.obs = obs_;
            row.reward = reward;
            row.cont = cont;
            episode_return_ += reward;
            ++episode_len_;
            prev_action_ = row.action;
            if (cont == 0.0)
              close_episode();
            else
              step_belief_with(wm_snap, row.action);
          }
          {
            std::unique_lock<std::mutex> lk(qmu);
            room.wait(lk, [&] { return queue.size() < cap || stop; });
            queue.push_back(std::move(row));
          }
          ++collected;
          data.notify_one();
        }
        refresh();
      }
      data.notify_all();
    });

    auto drain = [&](bool wait_for_one) {
      std::unique_lock<std::mutex> lk(qmu);
      if (wait_for_one)
        data.wait(lk, [&] { return !queue.empty() || collected >= static_cast<long long>(cfg_.total_env_steps); });
      while (!queue.empty()) {
        const Row& r = queue.front();
        replay_.push(r.obs, r.action, r.reward, r.cont);
        ++env_steps_;
        queue.pop_front();
      }
      room.notify_all();
    };

    while (env_steps_ < static_cast<long long>(cfg_.total_env_steps)) {
      drain(true);
      for (std::size_t c = 0; c < cfg_.updates_per_collect; ++c) {
        StepReport rep;
        {
          std::lock_guard<std::mutex> lk(pmu);
          rep = train_step();
        }
        on_step(rep);
        drain(false);
      }
    }
    stop = true;
    room.notify_all();
    collector.join();
    drain(false);
  }

 private:
  static constexpr const char kMagic[9] = "HWMCKPT1";

  static RunConfig finalized(RunConfig c) {
    c.finalize();
    return c;
  }

  Trainer(const RunConfig& cfg, SeedPlan p)
      : cfg_(finalized(cfg)),
        env_(cfg_.env, p.env),
        replay_(cfg_.replay_capacity, cfg_.wm.obs_dim, cfg_.wm.action_dim),
        act_rng_(p.act),
        sample_rng_(p.sample),
        mask_rng_(p.mask),
        roll_mask_rng_(p.roll_mask),
        roll_raw_rng_(p.roll_raw),
        pair_rng_(p.pair),
        imagine_rng_(p.imagine),
        init_rng_(p.init),
        wm_(cfg_.wm, init_rng_),
        ac_(cfg_.agent, cfg_.wm.state_dim(), init_rng_) {
    model_opt_ = {"model", wm_.online_params(), cfg_.model_lr, 0.9, 0.999, cfg_.model_eps,
                  cfg_.model_clip};
    actor_opt_ = {"actor", ac_.actor_params(), cfg_.ac_lr, 0.9, 0.999, cfg_.ac_eps, cfg_.ac_clip};
    critic_opt_ = {"critic", ac_.critic_params(), cfg_.ac_lr, 0.9, 0.999, cfg_.ac_eps,
                   cfg_.ac_clip};
    prev_action_.assign(cfg_.wm.action_dim, 0.0);
  }

  // ---- collection internals -----------------------------------------

  void open_episode() {
    begin_episode(wm_);
    replay_.push(obs_, prev_action_, 0.0, 1.0);
  }

  // Resets the environment and belief but does not record the reset row;
  // callers push it themselves (directly or through the collector queue).
  void begin_episode(const WorldModel<T>& wm) {
    obs_ = env_.reset();
    prev_action_.assign(cfg_.wm.action_dim, 0.0);
    episode_open_ = true;
    episode_return_ = 0.0;
    episode_len_ = 0;
    NoGradGuard ng;
    Tensor<T> h0 = Tensor<T>::zeros({1, cfg_.wm.units});
    auto post = wm.observe_first(h0, row_tensor(obs_), act_rng_, SampleMode::hard);
    belief_h_ = post.h;
    belief_z_ = post.z;
  }

  void close_episode() {
    ++episodes_done_;
    last_episode_return_ = episode_return_;
    return_sum_ += episode_return_;
    episode_open_ = false;
  }

  std::vector<double> choose_action() {
    return choose_action_with(ac_, env_steps_ < static_cast<long long>(cfg_.prefill));
  }

  std::vector<double> choose_action_with(ActorCritic<T>& ac, bool random_phase) {
    std::vector<double> a(cfg_.wm.action_dim, 0.0);
    if (random_phase) {
      if (cfg_.agent.action_mode == ActionMode::discrete)
        a[static_cast<std::size_t>(act_rng_.uniform_int(static_cast<int>(a.size())))] = 1.0;
      else
        for (auto& v : a) v = act_rng_.uniform(-1.0, 1.0);
      return a;
    }
    NoGradGuard ng;
    Tensor<T> row = ac.sample_actions(concat_cols(belief_h_, belief_z_), act_rng_);
    a.assign(row.value().begin(), row.value().end());
    return a;
  }

  // Steps the env `action_repeat` times (stopping at truncation), summing
  // rewards; updates obs_.
  std::pair<double, double> apply_action(const std::vector<double>& a) {
    double reward = 0.0, cont = 1.0;
    for (std::size_t k = 0; k < cfg_.action_repeat; ++k) {
      EnvStep st = env_.step(a);
      reward += st.reward;
      obs_ = std::move(st.obs);
      if (st.cont == 0.0) {
        cont = 0.0;
        break;
      }
    }
    return {reward, cont};
  }

  void step_belief(const std::vector<double>& a) { step_belief_with(wm_, a); }

  void step_belief_with(const WorldModel<T>& wm, const std::vector<double>& a) {
    NoGradGuard ng;
    std::vector<T> av(a.begin(), a.end());
    Tensor<T> at = Tensor<T>::from_vec({1, a.size()}, std::move(av));
    auto post = wm.observe_step(belief_h_, belief_z_, at, row_tensor(obs_), act_rng_,
                                SampleMode::hard);
    belief_h_ = post.h;
    belief_z_ = post.z;
  }

  Tensor<T> row_tensor(const std::vector<float>& obs) const {
    std::vector<T> v(obs.begin(), obs.end());
    const std::size_t n = v.size();
    return Tensor<T>::from_vec({1, n}, std::move(v));
  }

  // ---- update internals ---------------------------------------------

 public:
  // Time-major window batch with per-window cuboid masks; draws from the
  // trainer's mask stream.
  SequenceBatch<T> to_sequence(const EpisodeBatch& eb) {
    SequenceBatch<T> seq;
    seq.batch = eb.batch;
    seq.time = eb.time;
    const std::size_t n = eb.batch * eb.time, D = eb.obs_dim, A = eb.action_dim;
    std::vector<T> obs(eb.obs.begin(), eb.obs.end());
    std::vector<T> masked = obs;
    const SeqDims dims{eb.time, static_cast<std::size_t>(cfg_.env.image),
                       static_cast<std::size_t>(cfg_.env.image), 1};
    const CuboidGrid grid = partition_grid(dims, cfg_.cube);
    std::vector<T> win(eb.time * D);
    for (std::size_t b = 0; b < eb.batch; ++b) {
      for (std::size_t t = 0; t < eb.time; ++t)
        std::copy_n(masked.begin() + static_cast<std::ptrdiff_t>((t * eb.batch + b) * D), D,
                    win.begin() + static_cast<std::ptrdiff_t>(t * D));
      const std::vector<std::uint8_t> mask = sample_mask(grid, cfg_.mask_ratio, mask_rng_);
      apply_mask<T>(dims, cfg_.cube, mask, std::span<T>(win), static_cast<T>(cfg_.mask_fill));
      for (std::size_t t = 0; t < eb.time; ++t)
        std::copy_n(win.begin() + static_cast<std::ptrdiff_t>(t * D), D,
                    masked.begin() + static_cast<std::ptrdiff_t>((t * eb.batch + b) * D));
    }
    seq.obs = Tensor<T>::from_vec({n, D}, std::move(obs));
    seq.masked_obs = Tensor<T>::from_vec({n, D}, std::move(masked));
    std::vector<T> act(eb.actions.begin(), eb.actions.end());
    seq.prev_actions = Tensor<T>::from_vec({n, A}, std::move(act));
    seq.rewards = eb.rewards;
    seq.continues = eb.continues;
    return seq;
  }

 private:
  void update_behavior(const WmLoss<T>& wl, StepReport& rep) {
    Tensor<T> h0, z0;
    {
      NoGradGuard ng;
      h0 = wl.roll.h.detach();
      z0 = slice_cols(wl.roll.state, cfg_.wm.units, cfg_.wm.latent_dim()).detach();
    }
    ImaginedTrajectory<T> traj = ac_.imagine(wm_, h0, z0, imagine_rng_);
    const std::vector<double> returns = ac_.imagined_returns(traj);
    const std::size_t live = traj.horizon * traj.n;
    double rsum = 0.0, vsum = 0.0;
    for (std::size_t k = 0; k < live; ++k) {
      rsum += returns[k];
      vsum += traj.values[k];
    }
    rep.imag_return_mean = live ? rsum / static_cast<double>(live) : 0.0;
    rep.value_mean = live ? vsum / static_cast<double>(live) : 0.0;

    CriticLossOut<T> cl = ac_.critic_loss(traj, returns);
    rep.critic_nll = cl.nll;
    rep.critic_reg = cl.reg;
    if (cfg_.agent.action_mode == ActionMode::discrete) {
      ActorLossOut<T> al = ac_.actor_loss(traj, returns);
      rep.actor_obj = static_cast<double>(al.value.item());
      rep.entropy = al.entropy;
      rep.adv_scale = al.adv_scale;
      const double both = static_cast<double>(cl.value.item()) + rep.actor_obj;
      if (!std::isfinite(both)) {
        rep.behavior_skipped = true;
        std::fprintf(stderr, "[trainer] step %lld: non-finite behavior loss, update skipped\n",
                     train_steps_);
        return;
      }
      Tensor<T> behavior = add(cl.value, al.value);
      behavior.backward();
      rep.actor_grad_norm = adam_step(actor_opt_);
      rep.critic_grad_norm = adam_step(critic_opt_);
    } else {
      if (!std::isfinite(static_cast<double>(cl.value.item()))) {
        rep.behavior_skipped = true;
        std::fprintf(stderr, "[trainer] step %lld: non-finite critic loss, update skipped\n",
                     train_steps_);
        return;
      }
      cl.value.backward();
      rep.critic_grad_norm = adam_step(critic_opt_);
      {
        ActorLossOut<T> al = ac_.actor_loss_continuous(wm_, h0, z0, imagine_rng_);
        rep.actor_obj = static_cast<double>(al.value.item());
        rep.entropy = al.entropy;
        rep.adv_scale = al.adv_scale;
        if (!std::isfinite(rep.actor_obj)) {
          rep.behavior_skipped = true;
          std::fprintf(stderr, "[trainer] step %lld: non-finite actor loss, update skipped\n",
                       train_steps_);
        } else {
          al.value.backward();
          rep.actor_grad_norm = adam_step(actor_opt_);
        }
      }
    }
    ac_.ema_critic_step();
  }

  void fill_record(StepReport& rep) const {
    const LossBreakdown& b = rep.model;
    rep.record = {{"loss_total", b.total},
                  {"loss_dyn", b.dyn},
                  {"loss_rec", b.rec},
                  {"loss_sim", b.sim},
                  {"loss_pred", b.pred},
                  {"kl", b.kl},
                  {"reward_nll", b.reward_nll},
                  {"cont_bce", b.cont_bce},
                  {"reward_clamped", static_cast<double>(b.reward_clamped)},
                  {"critic_nll", rep.critic_nll},
                  {"critic_reg", rep.critic_reg},
                  {"actor_obj", rep.actor_obj},
                  {"entropy", rep.entropy},
                  {"adv_scale", rep.adv_scale},
                  {"imag_return_mean", rep.imag_return_mean},
                  {"value_mean", rep.value_mean},
                  {"grad_norm_model", rep.model_grad_norm},
                  {"grad_norm_actor", rep.actor_grad_norm},
                  {"grad_norm_critic", rep.critic_grad_norm},
                  {"ema_drift", rep.ema_drift_norm},
                  {"env_steps", static_cast<double>(env_steps_)},
                  {"episodes", static_cast<double>(episodes_done_)},
                  {"episode_return", last_episode_return_},
                  {"skipped", rep.skipped ? 1.0 : 0.0}};
  }

  // ---- checkpoint internals -----------------------------------------

  std::vector<Parameter<T>*> all_params() {
    std::vector<Parameter<T>*> out;
    for (auto* p : wm_.online_params()) out.push_back(p);
    for (auto* p : wm_.ema_params()) out.push_back(p);
    for (auto* p : ac_.actor_params()) out.push_back(p);
    for (auto* p : ac_.critic_params()) out.push_back(p);
    for (auto* p : ac_.ema_critic_params()) out.push_back(p);
    return out;
  }

  static const char* dtype_name() { return sizeof(T) == 8 ? "f64" : "f32"; }

  nlohmann::ordered_json manifest() {
    nlohmann::ordered_json man;
    man["version"] = 1;
    man["dtype"] = dtype_name();
    man["config_hash"] = config_hash_hex(cfg_);
    nlohmann::ordered_json params = nlohmann::ordered_json::array();
    for (Parameter<T>* p : all_params()) {
      nlohmann::ordered_json e;
      e["name"] = p->name;
      e["shape"] = p->value.shape();
      params.push_back(std::move(e));
    }
    man["params"] = std::move(params);
    return man;
  }

  // Collects every disagreement between the stored manifest and this
  // trainer, so a rejected load names all offending entries at once.
  void check_manifest(const nlohmann::json& man) {
    std::vector<std::string> diffs;
    if (!man.contains("version") || man["version"] != 1)
      diffs.push_back("version: checkpoint " + (man.contains("version") ? man["version"].dump() : "?") +
                      " vs supported 1");
    if (!man.contains("dtype") || man["dtype"] != dtype_name())
      diffs.push_back("dtype: checkpoint " + (man.contains("dtype") ? man["dtype"].dump() : "?") +
                      " vs this build " + dtype_name());
    const std::string want_hash = config_hash_hex(cfg_);
    if (!man.contains("config_hash") || man["config_hash"] != want_hash)
      diffs.push_back("config_hash: checkpoint " +
                      (man.contains("config_hash") ? man["config_hash"].dump() : "?") + " vs current " +
                      want_hash);
    const auto params = all_params();
    if (!man.contains("params") || !man["params"].is_array() ||
        man["params"].size() != params.size()) {
      diffs.push_back("params: checkpoint holds " +
                      (man.contains("params") ? std::to_string(man["params"].size()) : "?") +
                      " tensors vs current " + std::to_string(params.size()));
    } else {
      for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& e = man["params"][i];
        const std::vector<std::size_t> theirs = e.value("shape", std::vector<std::size_t>{});
        if (theirs != params[i]->value.shape())
          diffs.push_back(params[i]->name + ": checkpoint shape " +
                          (e.contains("shape") ? e["shape"].dump() : "?") + " vs current " +
                          shape_str(params[i]->value.shape()));
      }
    }
    if (!diffs.empty()) {
      std::string msg = "checkpoint rejected; manifest differences:";
      for (const auto& d : diffs) msg += "\n  " + d;
      throw std::runtime_error(msg);
    }
  }

  RunConfig cfg_;
  GridEnv env_;
  ReplayBuffer replay_;
  Rng act_rng_, sample_rng_, mask_rng_, roll_mask_rng_, roll_raw_rng_, pair_rng_, imagine_rng_;
  Rng init_rng_;  // consumed during construction only
  WorldModel<T> wm_;
  ActorCritic<T> ac_;
  OptimGroup<T> model_opt_, actor_opt_, critic_opt_;

  std::vector<float> obs_;
  std::vector<double> prev_action_;
  Tensor<T> belief_h_, belief_z_;
  bool episode_open_ = false;
  double episode_return_ = 0.0;
  long long episode_len_ = 0;

  long long env_steps_ = 0;
  long long train_steps_ = 0;
  long long skipped_steps_ = 0;
  // Written by the collector (a separate thread in threaded mode), read
  // by train_step metrics.
  std::atomic<long long> episodes_done_{0};
  std::atomic<double> last_episode_return_{std::numeric_limits<double>::quiet_NaN()};
  double return_sum_ = 0.0;
};

}  // namespace hwm
