#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hwm/dist.hpp"
#include "hwm/nn.hpp"
#include "hwm/rng.hpp"
#include "hwm/tensor.hpp"
#include "hwm/world_model.hpp"

// Actor-critic trained purely on imagined latent trajectories. The world
// model is frozen throughout: imagination roots are detached, the discrete
// path rolls out tape-free, and the continuous path freezes model weights
// for the duration of its on-tape rollout.

namespace hwm {

enum class ActionMode { discrete, continuous };

struct AgentConfig {
  std::size_t action_dim = 5;
  std::size_t hidden = 128;
  std::size_t n_hidden = 2;
  std::size_t horizon = 15;
  double discount = 0.95;
  double lam = 0.95;
  double entropy_scale = 3e-4;
  double critic_ema_decay = 0.98;
  double critic_reg_weight = 1.0;
  double norm_decay = 0.99;
  double norm_limit = 1.0;
  double unimix = 0.01;
  double logstd_min = -5.0;  // continuous head, smooth-clamped log stddev
  double logstd_max = 2.0;
  ActionMode action_mode = ActionMode::discrete;
  TwoHotBins bins;  // critic return bins

  void validate() const {
    if (action_dim == 0 || hidden == 0) throw std::invalid_argument("AgentConfig: zero width");
    if (discount < 0.0 || discount >= 1.0) throw std::invalid_argument("AgentConfig: discount");
    if (lam < 0.0 || lam > 1.0) throw std::invalid_argument("AgentConfig: lambda");
    if (critic_ema_decay < 0.0 || critic_ema_decay > 1.0)
      throw std::invalid_argument("AgentConfig: critic_ema_decay");
    if (norm_limit <= 0.0) throw std::invalid_argument("AgentConfig: norm_limit");
    if (logstd_min > logstd_max) throw std::invalid_argument("AgentConfig: logstd bounds");
    bins.validate();
  }
};

// R_t = r_t + g * c_t * ((1 - lambda) * v_{t+1} + lambda * R_{t+1}), with
// R_H = v_H at the bootstrap index. rewards/continues have length H, values
// length H + 1; the result has length H + 1 and carries the bootstrap last.
inline std::vector<double> lambda_returns(std::span<const double> rewards,
                                          std::span<const double> continues,
                                          std::span<const double> values, double gamma,
                                          double lam) {
  const std::size_t H = rewards.size();
  if (continues.size() != H || values.size() != H + 1)
    throw std::invalid_argument("lambda_returns: length mismatch");
  std::vector<double> out(H + 1);
  out[H] = values[H];
  for (std::size_t t = H; t-- > 0;)
    out[t] = rewards[t] + gamma * continues[t] * ((1.0 - lam) * values[t + 1] + lam * out[t + 1]);
  return out;
}

// Linear-interpolated percentile of unsorted data, q in [0, 100].
inline double percentile(std::vector<double> data, double q) {
  if (data.empty()) throw std::invalid_argument("percentile: empty data");
  std::sort(data.begin(), data.end());
  const double rank = q / 100.0 * static_cast<double>(data.size() - 1);
  const auto lo = static_cast<std::size_t>(rank);
  if (lo + 1 >= data.size()) return data.back();
  const double frac = rank - static_cast<double>(lo);
  return data[lo] + frac * (data[lo + 1] - data[lo]);
}

// Tracks smoothed 5th/95th return percentiles; the advantage divisor is
// max(limit, p95 - p5) and never drops below the limit.
struct ReturnNormalizer {
  double decay = 0.99;
  double limit = 1.0;
  double ema_p95 = 0.0;
  double ema_p5 = 0.0;
  bool primed = false;

  void update(const std::vector<double>& returns) {
    if (returns.empty()) return;
    const double p95 = percentile(returns, 95.0);
    const double p5 = percentile(returns, 5.0);
    if (!primed) {
      ema_p95 = p95;
      ema_p5 = p5;
      primed = true;
      return;
    }
    ema_p95 = decay * ema_p95 + (1.0 - decay) * p95;
    ema_p5 = decay * ema_p5 + (1.0 - decay) * p5;
  }

  double scale() const { return std::max(limit, ema_p95 - ema_p5); }
};

// Flattened imagined rollout; row (t, i) lives at t * n + i. states has
// horizon + 1 blocks (the root first), actions only horizon blocks.
// rewards/continues/values align with states rows; the entries of the root
// block are predictions at the roots and the recursion consumes arrival
// rows t >= 1.
template <typename T>
struct ImaginedTrajectory {
  std::size_t n = 0;
  std::size_t horizon = 0;
  bool truncated = false;
  Tensor<T> states;
  Tensor<T> actions;
  std::vector<double> rewards;
  std::vector<double> continues;
  std::vector<double> values;
};

// Clears requires_grad on a parameter set for the current scope.
template <typename T>
class ParamFreeze {
 public:
  explicit ParamFreeze(std::vector<Parameter<T>*> params) : params_(std::move(params)) {
    saved_.reserve(params_.size());
    for (auto* p : params_) {
      saved_.push_back(p->value.requires_grad());
      p->value.set_requires_grad(false);
    }
  }
  ~ParamFreeze() {
    for (std::size_t i = 0; i < params_.size(); ++i)
      params_[i]->value.set_requires_grad(saved_[i]);
  }
  ParamFreeze(const ParamFreeze&) = delete;
  ParamFreeze& operator=(const ParamFreeze&) = delete;

 private:
  std::vector<Parameter<T>*> params_;
  std::vector<bool> saved_;
};

template <typename T>
struct CriticLossOut {
  Tensor<T> value;
  double nll = 0.0;
  double reg = 0.0;
  long long clamped = 0;
};

template <typename T>
struct ActorLossOut {
  Tensor<T> value;
  double entropy = 0.0;
  double adv_scale = 1.0;
  // The backward pass consults requires_grad at walk time, so the pathwise
  // loss pins its parameter freezes here; keep this alive until after
  // value.backward().
  std::shared_ptr<void> hold;
};

template <typename T>
class ActorCritic {
 public:
  AgentConfig cfg;
  Mlp<T> actor;
  Mlp<T> critic;
  Mlp<T> ema_critic;
  ReturnNormalizer normalizer;

  ActorCritic(const AgentConfig& c, std::size_t state_dim, Rng& rng)
      : cfg(c),
        actor("ac.actor", state_dim, c.hidden, actor_out_dim(c), c.n_hidden, rng),
        critic("ac.critic", state_dim, c.hidden, static_cast<std::size_t>(c.bins.n), c.n_hidden,
               rng, Init::zeros),
        ema_critic("ac.ema_critic", state_dim, c.hidden, static_cast<std::size_t>(c.bins.n),
                   c.n_hidden, rng, Init::zeros) {
    cfg.validate();
    normalizer.decay = cfg.norm_decay;
    normalizer.limit = cfg.norm_limit;
    ema_init_from(critic_params(), ema_critic_params());
  }

  static std::size_t actor_out_dim(const AgentConfig& c) {
    return c.action_mode == ActionMode::continuous ? 2 * c.action_dim : c.action_dim;
  }

  std::vector<Parameter<T>*> actor_params() {
    std::vector<Parameter<T>*> ps;
    actor.collect(ps);
    return ps;
  }
  std::vector<Parameter<T>*> critic_params() {
    std::vector<Parameter<T>*> ps;
    critic.collect(ps);
    return ps;
  }
  std::vector<Parameter<T>*> ema_critic_params() {
    std::vector<Parameter<T>*> ps;
    ema_critic.collect(ps);
    return ps;
  }

  // ema <- decay * ema + (1 - decay) * online
  void ema_critic_step() {
    ema_update(critic_params(), ema_critic_params(), static_cast<T>(1.0 - cfg.critic_ema_decay));
  }

  Tensor<T> policy_probs(const Tensor<T>& states) {
    return unimix_probs(actor.forward(states), static_cast<T>(cfg.unimix));
  }

  // Values-only action draws: one-hot categorical samples in discrete
  // mode, tanh-Gaussian samples in continuous mode.
  Tensor<T> sample_actions(const Tensor<T>& states, Rng& rng) {
    NoGradGuard ng;
    const std::size_t A = cfg.action_dim;
    if (cfg.action_mode == ActionMode::continuous) {
      auto [mu, logstd] = policy_gaussian(states);
      const std::size_t n = mu.dim(0);
      std::vector<T> out(n * A);
      for (std::size_t k = 0; k < n * A; ++k)
        out[k] = std::tanh(mu.value()[k] +
                           std::exp(logstd.value()[k]) * static_cast<T>(rng.normal()));
      return Tensor<T>::from_vec({n, A}, std::move(out));
    }
    Tensor<T> probs = policy_probs(states);
    const std::size_t n = probs.dim(0);
    std::vector<T> out(n * A, T(0));
    for (std::size_t r = 0; r < n; ++r) {
      const int k = rng.categorical(std::span<const T>{probs.value().data() + r * A, A});
      out[r * A + static_cast<std::size_t>(k)] = T(1);
    }
    return Tensor<T>::from_vec({n, A}, std::move(out));
  }

  // Mode of the policy: argmax one-hot in discrete mode, tanh(mu) in
  // continuous mode. Values only; used for greedy evaluation rollouts.
  Tensor<T> greedy_actions(const Tensor<T>& states) {
    NoGradGuard ng;
    const std::size_t A = cfg.action_dim;
    if (cfg.action_mode == ActionMode::continuous) {
      auto [mu, logstd] = policy_gaussian(states);
      (void)logstd;
      return tanh_t(mu);
    }
    Tensor<T> probs = policy_probs(states);
    const std::size_t n = probs.dim(0);
    std::vector<T> out(n * A, T(0));
    for (std::size_t r = 0; r < n; ++r) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < A; ++k)
        if (probs.value()[r * A + k] > probs.value()[r * A + best]) best = k;
      out[r * A + best] = T(1);
    }
    return Tensor<T>::from_vec({n, A}, std::move(out));
  }

  // Pre-squash Gaussian head with the smooth logstd clamp; on-tape when
  // the caller does not hold a NoGradGuard.
  std::pair<Tensor<T>, Tensor<T>> policy_gaussian(const Tensor<T>& states) {
    const std::size_t A = cfg.action_dim;
    const T mid = static_cast<T>(0.5 * (cfg.logstd_max + cfg.logstd_min));
    const T half_span = static_cast<T>(0.5 * (cfg.logstd_max - cfg.logstd_min));
    Tensor<T> head = actor.forward(states);
    Tensor<T> mu = slice_cols(head, 0, A);
    Tensor<T> logstd = add_const(scale(tanh_t(slice_cols(head, A, A)), half_span), mid);
    return {mu, logstd};
  }

  std::vector<double> state_values(const Tensor<T>& states) {
    NoGradGuard ng;
    return cfg.bins.decode(critic.forward(states));
  }

  // Tape-free imagined rollout from detached posterior roots. Truncates with
  // a diagnostic if the latent goes non-finite.
  ImaginedTrajectory<T> imagine(WorldModel<T>& wm, const Tensor<T>& h0, const Tensor<T>& z0,
                                Rng& rng) {
    NoGradGuard ng;
    ImaginedTrajectory<T> traj;
    traj.n = h0.dim(0);
    if (z0.dim(0) != traj.n) throw std::invalid_argument("imagine: root shape mismatch");
    Tensor<T> h = h0.detach(), z = z0.detach();
    std::vector<Tensor<T>> states, actions;
    for (std::size_t t = 0;; ++t) {
      Tensor<T> s = concat_cols(h, z);
      bool finite = true;
      for (const T v : s.value())
        if (!std::isfinite(static_cast<double>(v))) {
          finite = false;
          break;
        }
      if (!finite) {
        if (states.empty()) throw std::invalid_argument("imagine: non-finite root states");
        traj.truncated = true;
        std::fprintf(stderr, "[agent] : non-finite imagined state at step %zu, truncating\n", t);
        if (!actions.empty()) actions.pop_back();
        break;
      }
      states.push_back(s);
      if (t == cfg.horizon) break;
      Tensor<T> a = sample_actions(s, rng);
      actions.push_back(a);
      auto step = wm.imagine_step(h, z, a, rng, SampleMode::hard);
      h = step.h;
      z = step.z;
    }
    traj.horizon = states.size() - 1;
    traj.states = concat_rows(states);
    traj.actions = actions.empty()
                       ? Tensor<T>::zeros({0, actor_out_dim(cfg)})
                       : concat_rows(actions);
    traj.rewards = wm.cfg.bins.decode(wm.reward_logits(traj.states));
    {
      Tensor<T> c = sigmoid(wm.cont_logits(traj.states));
      traj.continues.assign(c.value().begin(), c.value().end());
    }
    traj.values = cfg.bins.decode(critic.forward(traj.states));
    return traj;
  }

  // Per-row lambda returns aligned with trajectory states rows; the last
  // block is the bootstrap (= values there).
  std::vector<double> imagined_returns(const ImaginedTrajectory<T>& traj) const {
    const std::size_t n = traj.n, H = traj.horizon;
    std::vector<double> out((H + 1) * n);
    for (std::size_t i = 0; i < n; ++i) out[H * n + i] = traj.values[H * n + i];
    for (std::size_t t = H; t-- > 0;)
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t arrival = (t + 1) * n + i;
        out[t * n + i] =
            traj.rewards[arrival] +
            cfg.discount * traj.continues[arrival] *
                ((1.0 - cfg.lam) * traj.values[arrival] + cfg.lam * out[arrival]);
      }
    return out;
  }

  // Two-hot return regression plus cross-entropy toward the frozen EMA
  // critic's bin distribution (weight cfg.critic_reg_weight). Returns must
  // already be detached scalars.
  CriticLossOut<T> critic_loss(const ImaginedTrajectory<T>& traj,
                               const std::vector<double>& returns) {
    CriticLossOut<T> out;
    const std::size_t rows = traj.horizon * traj.n;
    if (returns.size() < rows) throw std::invalid_argument("critic_loss: returns too short");
    if (rows == 0) {
      out.value = Tensor<T>::scalar(T(0));
      return out;
    }
    Tensor<T> states = slice_rows(traj.states, 0, rows);
    Tensor<T> logits = critic.forward(states);
    std::vector<double> target_vals(returns.begin(), returns.begin() + static_cast<long>(rows));
    Tensor<T> targets = cfg.bins.template encode_batch<T>(target_vals, out.clamped);
    Tensor<T> nll = cfg.bins.nll(logits, targets);
    out.nll = static_cast<double>(nll.item());
    if (cfg.critic_reg_weight == 0.0) {
      out.value = nll;
      return out;
    }
    Tensor<T> ema_probs;
    {
      NoGradGuard ng;
      ema_probs = softmax_last(ema_critic.forward(states));
    }
    Tensor<T> reg = cfg.bins.nll(logits, ema_probs);
    out.reg = static_cast<double>(reg.item());
    out.value = add(nll, scale(reg, static_cast<T>(cfg.critic_reg_weight)));
    return out;
  }

  // REINFORCE with percentile-normalized advantages and an entropy bonus.
  // Updates the return normalizer from this batch before computing
  // advantages.
  ActorLossOut<T> actor_loss(const ImaginedTrajectory<T>& traj,
                             const std::vector<double>& returns) {
    ActorLossOut<T> out;
    const std::size_t rows = traj.horizon * traj.n;
    if (returns.size() < rows || traj.values.size() < rows)
      throw std::invalid_argument("actor_loss: returns too short");
    if (rows == 0) {
      out.value = Tensor<T>::scalar(T(0));
      return out;
    }
    normalizer.update(std::vector<double>(returns.begin(), returns.begin() + static_cast<long>(rows)));
    const double S = normalizer.scale();
    out.adv_scale = S;
    std::vector<T> adv(rows);
    for (std::size_t k = 0; k < rows; ++k)
      adv[k] = static_cast<T>((returns[k] - traj.values[k]) / S);
    Tensor<T> adv_t = Tensor<T>::from_vec({rows}, std::move(adv));
    Tensor<T> states = slice_rows(traj.states, 0, rows);
    Tensor<T> probs = policy_probs(states);
    Tensor<T> logp_all = log_t(probs);
    Tensor<T> logp = sum_last(mul(traj.actions, logp_all));
    Tensor<T> ent = neg(sum_last(mul(probs, logp_all)));
    out.entropy = static_cast<double>(mean_all(ent).item());
    out.value = add(neg(mean_all(mul(logp, adv_t))),
                    scale(mean_all(ent), static_cast<T>(-cfg.entropy_scale)));
    return out;
  }

  // Pathwise actor objective for continuous actions: reparameterized
  // tanh-Gaussian actions, returns built on tape through the frozen
  // dynamics/reward/value networks, scaled by the return normalizer. The
  // entropy bonus uses the pre-squash Gaussian entropy.
  ActorLossOut<T> actor_loss_continuous(WorldModel<T>& wm, const Tensor<T>& h0,
                                        const Tensor<T>& z0, Rng& rng) {
    if (cfg.action_mode != ActionMode::continuous)
      throw std::logic_error("actor_loss_continuous: agent is in discrete mode");
    const std::size_t n = h0.dim(0), H = cfg.horizon, A = cfg.action_dim;
    ActorLossOut<T> out;
    if (n == 0 || H == 0) {
      out.value = Tensor<T>::scalar(T(0));
      return out;
    }
    auto freeze = std::make_shared<PathwiseFreeze>(wm.online_params(), critic_params());
    out.hold = freeze;

    Tensor<T> h = h0.detach(), z = z0.detach();
    std::vector<Tensor<T>> states;
    std::vector<Tensor<T>> ent_terms;
    for (std::size_t t = 0; t < H; ++t) {
      Tensor<T> s = concat_cols(h, z);
      states.push_back(s);
      auto [mu, logstd] = policy_gaussian(s);
      std::vector<T> ev(n * A);
      for (auto& e : ev) e = static_cast<T>(rng.normal());
      Tensor<T> eps = Tensor<T>::from_vec({n, A}, std::move(ev));
      Tensor<T> action = tanh_t(add(mu, mul(exp_t(logstd), eps)));
      ent_terms.push_back(mean_all(logstd));
      auto step = wm.imagine_step(h, z, action, rng, SampleMode::hard);
      h = step.h;
      z = step.z;
    }
    states.push_back(concat_cols(h, z));

    // arrival-state predictions, each [n, 1]
    Tensor<T> wm_centers = bin_centers(wm.cfg.bins);
    Tensor<T> ac_centers = bin_centers(cfg.bins);
    std::vector<Tensor<T>> rew(H + 1), con(H + 1), val(H + 1);
    for (std::size_t k = 1; k <= H; ++k) {
      const Tensor<T>& s = states[k];
      rew[k] = symexp_t(matmul(softmax_last(wm.reward_logits(s)), wm_centers));
      con[k] = sigmoid(wm.cont_logits(s));
      val[k] = symexp_t(matmul(softmax_last(critic.forward(s)), ac_centers));
    }
    std::vector<Tensor<T>> ret(H + 1);
    ret[H] = val[H];
    for (std::size_t t = H; t-- > 0;) {
      Tensor<T> boot = add(scale(val[t + 1], static_cast<T>(1.0 - cfg.lam)),
                           scale(ret[t + 1], static_cast<T>(cfg.lam)));
      ret[t] = add(rew[t + 1], scale(mul(con[t + 1], boot), static_cast<T>(cfg.discount)));
    }
    std::vector<Tensor<T>> ret_stack(ret.begin(), ret.begin() + static_cast<long>(H));
    Tensor<T> all_returns = concat_rows(ret_stack);
    {
      std::vector<double> rv(all_returns.value().begin(), all_returns.value().end());
      normalizer.update(rv);
    }
    const double S = normalizer.scale();
    out.adv_scale = S;
    Tensor<T> ent_mean = scale(sum_of(ent_terms), static_cast<T>(1.0 / static_cast<double>(H)));
    // Gaussian entropy = mean logstd + 0.5 log(2 pi e) per dimension; the
    // constant does not affect gradients but keeps the diagnostic honest.
    out.entropy = static_cast<double>(ent_mean.item()) +
                  0.5 * (std::log(2.0 * std::numbers::pi_v<double>) + 1.0);
    out.value = add(scale(mean_all(all_returns), static_cast<T>(-1.0 / S)),
                    scale(ent_mean, static_cast<T>(-cfg.entropy_scale)));
    return out;
  }

 private:
  struct PathwiseFreeze {
    ParamFreeze<T> model;
    ParamFreeze<T> value_net;
    PathwiseFreeze(std::vector<Parameter<T>*> m, std::vector<Parameter<T>*> v)
        : model(std::move(m)), value_net(std::move(v)) {}
  };

  static Tensor<T> bin_centers(const TwoHotBins& bins) {
    std::vector<T> c(static_cast<std::size_t>(bins.n));
    for (int i = 0; i < bins.n; ++i) c[static_cast<std::size_t>(i)] = static_cast<T>(bins.center(i));
    return Tensor<T>::from_vec({static_cast<std::size_t>(bins.n), 1}, std::move(c));
  }

  static Tensor<T> sum_of(const std::vector<Tensor<T>>& parts) {
    Tensor<T> acc = parts.front();
    for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i]);
    return acc;
  }
};

}  // namespace hwm
