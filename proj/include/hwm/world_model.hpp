#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hwm/dist.hpp"
#include "hwm/nn.hpp"
#include "hwm/rng.hpp"
#include "hwm/tensor.hpp"

// Two-branch recurrent state-space world model.
//
// The trained branch reads masked observations; a frozen EMA twin of its
// encoder, posterior, recurrent cell and transition prior reads the original
// observations. Both branches share the trained branch's recurrent state:
//
//   trained:  h_t = f(h_{t-1}, z_{t-1}, a_{t-1});   z_t ~ q(. | h_t, enc(masked o_t))
//   twin:     g_t = f'(h_{t-1}, z'_{t-1}, a_{t-1}); z'_t ~ q'(. | h_t, enc'(o_t))
//
// with h_0 = g_0 = 0. States are s_t = [h_t; z_t] on the trained side and
// s'_t = [h_t; z'_t] on the twin side; prior states pair each branch's
// transition sample with its own recurrent output, [h_t; z^_t] and
// [g_t; z'^_t]. Reward and continue heads read the trained state only.
//
// Gradient rules, enforced structurally rather than by convention:
//   - the twin runs entirely under NoGradGuard: its outputs are constants
//     and its parameters move only through ema_step();
//   - the reconstruction target (projected, normalized twin state) and the
//     similarity target (reward gap + discounted next-pair distance) are
//     computed off-tape;
//   - everything else backpropagates through the trained branch, including
//     through time.
//
// All per-step quantities are stacked time-major: row (t, b) of an [N, .]
// stack lives at index t * batch + b, and probability stacks [N * G, C] put
// group g of that row at (t * batch + b) * G + g. Sampling is explicit: the
// caller passes the streams, so a fixed seed reproduces a step bit-for-bit.

namespace hwm {

enum class SampleMode {
  hard,  // straight-through one-hot draw per latent group
  soft   // probabilities pass through as the sample (smooth; used by audits)
};

// Which states form the current pair of the similarity loss. The target pair
// is the twin prior next-states either way (cross_branch swaps the j side
// for the trained prior).
enum class SimPairing {
  cross_branch,  // d(twin_i, trained_j) vs |dr| + gamma * d(twin^_i+1, trained^_j+1)
  masked_pair    // d(trained_i, trained_j) vs |dr| + gamma * d(twin^_i+1, twin^_j+1)
};

struct WorldModelConfig {
  std::size_t obs_dim = 256;  // flattened frame
  std::size_t action_dim = 5;
  std::size_t embed = 256;
  std::size_t hidden = 128;
  std::size_t units = 64;  // recurrent width
  std::size_t groups = 8;  // categorical latent groups
  std::size_t classes = 8;
  std::size_t proj_dim = 64;  // shared projection width for the reconstruction loss

  double unimix = 0.01;
  double free_nats = 1.0;   // per-(b, t) KL floor, applied after the group sum
  double beta_dyn = 0.5;    // weight of KL[sg(post) || prior]
  double beta_rep = 0.1;    // weight of KL[post || sg(prior)]
  double sim_gamma = 0.95;  // discount inside the similarity target
  double ema_momentum = 0.01;  // weight of the online value in each EMA update

  SimPairing sim_pairing = SimPairing::cross_branch;
  bool pred_normalized = false;  // ablation: l2-normalize states before the heads
  TwoHotBins bins{};             // reward regression bins

  std::size_t latent_dim() const { return groups * classes; }
  std::size_t state_dim() const { return units + latent_dim(); }

  void validate() const {
    if (!obs_dim || !action_dim || !embed || !hidden || !units || !groups || !classes || !proj_dim)
      throw std::invalid_argument("WorldModelConfig: every width must be positive");
    if (unimix < 0.0 || unimix >= 1.0)
      throw std::invalid_argument("WorldModelConfig: unimix must lie in [0, 1)");
    if (free_nats < 0.0) throw std::invalid_argument("WorldModelConfig: free_nats must be >= 0");
    if (sim_gamma < 0.0 || sim_gamma >= 1.0)
      throw std::invalid_argument("WorldModelConfig: sim_gamma must lie in [0, 1)");
    if (ema_momentum < 0.0 || ema_momentum > 1.0)
      throw std::invalid_argument("WorldModelConfig: ema_momentum must lie in [0, 1]");
    bins.validate();
  }
};

// Time-major training window. prev_actions row (t, b) holds the action that
// led into observation t: all-zero at t = 0 when the window starts an
// episode, the true previous action otherwise. rewards arrive with the
// observation; continues is 0 exactly where the observation is terminal.
template <typename T>
struct SequenceBatch {
  std::size_t batch = 0, time = 0;
  Tensor<T> obs;           // [T*B, obs_dim], constant
  Tensor<T> masked_obs;    // [T*B, obs_dim], constant
  Tensor<T> prev_actions;  // [T*B, action_dim], constant
  std::vector<double> rewards;
  std::vector<double> continues;

  void validate(const WorldModelConfig& cfg) const {
    const std::size_t n = batch * time;
    if (n == 0) return;
    auto need = [&](const Tensor<T>& x, std::size_t cols, const char* name) {
      if (x.ndim() != 2 || x.dim(0) != n || x.dim(1) != cols)
        throw std::invalid_argument("SequenceBatch: " + std::string(name) + " must be [" +
                                    std::to_string(n) + "," + std::to_string(cols) + "], got " +
                                    shape_str(x.shape()));
    };
    need(obs, cfg.obs_dim, "obs");
    need(masked_obs, cfg.obs_dim, "masked_obs");
    need(prev_actions, cfg.action_dim, "prev_actions");
    if (rewards.size() != n || continues.size() != n)
      throw std::invalid_argument("SequenceBatch: rewards/continues must hold " + std::to_string(n) +
                                  " entries");
  }
};

// Separate streams for the two branches so the branch-collapse property is
// testable: seed both identically and the draws line up step for step.
struct RolloutRngs {
  Rng& mask;
  Rng& raw;
};

template <typename T>
struct Rollout {
  std::size_t batch = 0, time = 0;
  // trained branch, on tape
  Tensor<T> post_probs;   // [N*G, C]
  Tensor<T> prior_probs;  // [N*G, C]
  Tensor<T> h;            // [N, units]
  Tensor<T> state;        // [N, units + G*C], [h; z]
  Tensor<T> prior_state;  // [N, units + G*C], [h; z^]
  // twin branch, constants
  Tensor<T> raw_post_probs;   // [N*G, C]
  Tensor<T> raw_state;        // [N, units + G*C], [h; z']
  Tensor<T> raw_prior_state;  // [N, units + G*C], [g; z'^]
};

struct LossBreakdown {
  double dyn = 0, rec = 0, sim = 0, pred = 0, total = 0;
  double kl = 0;  // mean grouped KL before the floor
  double reward_nll = 0, cont_bce = 0;
  long long reward_clamped = 0;  // rewards outside the bin range, clamped to the edge
};

template <typename T>
struct DynLoss {
  Tensor<T> value;
  double kl = 0;
};

template <typename T>
struct PredLoss {
  Tensor<T> value;
  double reward_nll = 0, cont_bce = 0;
  long long reward_clamped = 0;
};

template <typename T>
struct WmLoss {
  Tensor<T> value;
  LossBreakdown breakdown;
  Rollout<T> roll;
};

// One latent step: recurrent state, flat latent sample and the [B*G, C]
// probabilities it was drawn from.
template <typename T>
struct LatentStep {
  Tensor<T> h, z, probs;
};

// Row-wise cosine distance 1 - <a/|a|, b/|b|> in [0, 2]; norms floored at
// eps, matching the tabular metric's convention.
template <typename T>
Tensor<T> cosine_distance_rows(const Tensor<T>& a, const Tensor<T>& b, T eps = T(1e-8)) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("cosine_distance_rows: shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  return add_const(neg(sum_last(mul(l2_normalize_last(a, eps), l2_normalize_last(b, eps)))), T(1));
}

namespace detail {
template <typename T>
Tensor<T> sample_latent(const Tensor<T>& probs, Rng& rng, SampleMode mode) {
  return mode == SampleMode::hard ? straight_through_onehot(probs, rng) : probs;
}
}  // namespace detail

template <typename T>
struct WorldModel {
  WorldModelConfig cfg;

  // trained branch + heads
  Mlp<T> encoder;       // obs -> embed
  Mlp<T> post_net;      // [h, embed] -> G*C logits
  DenseBlock<T> seq_in; // [z, a] -> hidden, feeds the recurrent cell
  GruCell<T> gru;
  Mlp<T> prior_net;     // h -> G*C logits
  Mlp<T> reward_head;   // state -> bins (zero-init head: flat start)
  Mlp<T> cont_head;     // state -> 1 logit
  Linear<T> proj;       // state -> proj_dim, bias-free, shared by both branches

  // EMA twins of the five nets the twin branch runs
  Mlp<T> ema_encoder;
  Mlp<T> ema_post_net;
  DenseBlock<T> ema_seq_in;
  GruCell<T> ema_gru;
  Mlp<T> ema_prior_net;

  WorldModel(const WorldModelConfig& c, Rng& rng) : cfg(c) {
    cfg.validate();
    const std::size_t L = cfg.latent_dim();
    const std::size_t S = cfg.state_dim();
    const auto nbins = static_cast<std::size_t>(cfg.bins.n);
    encoder = Mlp<T>("wm.enc", cfg.obs_dim, cfg.embed, cfg.embed, 2, rng);
    post_net = Mlp<T>("wm.post", cfg.units + cfg.embed, cfg.hidden, L, 1, rng);
    seq_in = DenseBlock<T>("wm.seq", L + cfg.action_dim, cfg.hidden, rng);
    gru = GruCell<T>("wm.gru", cfg.hidden, cfg.units, rng);
    prior_net = Mlp<T>("wm.prior", cfg.units, cfg.hidden, L, 1, rng);
    reward_head = Mlp<T>("wm.rew", S, cfg.hidden, nbins, 2, rng, Init::zeros);
    cont_head = Mlp<T>("wm.cont", S, cfg.hidden, 1, 2, rng, Init::xavier_uniform);
    proj = Linear<T>("wm.proj", S, cfg.proj_dim, rng, Init::xavier_normal, false);
    ema_encoder = Mlp<T>("wm.ema_enc", cfg.obs_dim, cfg.embed, cfg.embed, 2, rng);
    ema_post_net = Mlp<T>("wm.ema_post", cfg.units + cfg.embed, cfg.hidden, L, 1, rng);
    ema_seq_in = DenseBlock<T>("wm.ema_seq", L + cfg.action_dim, cfg.hidden, rng);
    ema_gru = GruCell<T>("wm.ema_gru", cfg.hidden, cfg.units, rng);
    ema_prior_net = Mlp<T>("wm.ema_prior", cfg.units, cfg.hidden, L, 1, rng);
    ema_sync();
  }

  // Stable parameter orders; these are the optimizer/EMA/checkpoint contract.
  std::vector<Parameter<T>*> online_params() {
    std::vector<Parameter<T>*> ps;
    encoder.collect(ps);
    post_net.collect(ps);
    seq_in.collect(ps);
    gru.collect(ps);
    prior_net.collect(ps);
    reward_head.collect(ps);
    cont_head.collect(ps);
    proj.collect(ps);
    return ps;
  }

  // The online subset mirrored by EMA twins, aligned index-for-index with
  // ema_params().
  std::vector<Parameter<T>*> twin_params() {
    std::vector<Parameter<T>*> ps;
    encoder.collect(ps);
    post_net.collect(ps);
    seq_in.collect(ps);
    gru.collect(ps);
    prior_net.collect(ps);
    return ps;
  }

  std::vector<Parameter<T>*> ema_params() {
    std::vector<Parameter<T>*> ps;
    ema_encoder.collect(ps);
    ema_post_net.collect(ps);
    ema_seq_in.collect(ps);
    ema_gru.collect(ps);
    ema_prior_net.collect(ps);
    return ps;
  }

  void ema_sync() { ema_init_from(twin_params(), ema_params()); }
  void ema_step() { ema_update(twin_params(), ema_params(), cfg.ema_momentum); }

  Rollout<T> rollout(const SequenceBatch<T>& seq, RolloutRngs rngs, SampleMode mode) const {
    seq.validate(cfg);
    const std::size_t B = seq.batch, Tn = seq.time;
    const std::size_t G = cfg.groups, C = cfg.classes, L = cfg.latent_dim();
    Rollout<T> out;
    out.batch = B;
    out.time = Tn;
    if (B * Tn == 0) {
      out.post_probs = out.prior_probs = out.raw_post_probs = Tensor<T>::zeros({0, C});
      out.h = Tensor<T>::zeros({0, cfg.units});
      out.state = out.prior_state = Tensor<T>::zeros({0, cfg.state_dim()});
      out.raw_state = out.raw_prior_state = Tensor<T>::zeros({0, cfg.state_dim()});
      return out;
    }
    std::vector<Tensor<T>> post_ps, prior_ps, hs, states, prior_states;
    std::vector<Tensor<T>> r_post_ps, r_states, r_prior_states;
    Tensor<T> h = Tensor<T>::zeros({B, cfg.units});
    Tensor<T> z_prev, raw_z_prev;  // [B, L]
    for (std::size_t t = 0; t < Tn; ++t) {
      Tensor<T> raw_h;
      if (t == 0) {
        raw_h = Tensor<T>::zeros({B, cfg.units});
      } else {
        const Tensor<T> a = slice_rows(seq.prev_actions, t * B, B);
        const Tensor<T> h_prev = h;
        h = gru.forward(h_prev, seq_in.forward(concat_cols(z_prev, a)));
        NoGradGuard ng;  // twin recurrence reads h_prev as a value
        raw_h = ema_gru.forward(h_prev, ema_seq_in.forward(concat_cols(raw_z_prev, a)));
      }
      Tensor<T> e = encoder.forward(slice_rows(seq.masked_obs, t * B, B));
      Tensor<T> post_p =
          unimix_probs(reshape(post_net.forward(concat_cols(h, e)), {B * G, C}), T(cfg.unimix));
      Tensor<T> z = reshape(detail::sample_latent(post_p, rngs.mask, mode), {B, L});
      Tensor<T> prior_p = unimix_probs(reshape(prior_net.forward(h), {B * G, C}), T(cfg.unimix));
      Tensor<T> zhat = reshape(detail::sample_latent(prior_p, rngs.mask, mode), {B, L});
      {
        NoGradGuard ng;  // twin branch: same recipe over the original frames
        Tensor<T> re = ema_encoder.forward(slice_rows(seq.obs, t * B, B));
        Tensor<T> r_post_p =
            unimix_probs(reshape(ema_post_net.forward(concat_cols(h, re)), {B * G, C}), T(cfg.unimix));
        Tensor<T> r_z = reshape(detail::sample_latent(r_post_p, rngs.raw, mode), {B, L});
        Tensor<T> r_prior_p =
            unimix_probs(reshape(ema_prior_net.forward(raw_h), {B * G, C}), T(cfg.unimix));
        Tensor<T> r_zhat = reshape(detail::sample_latent(r_prior_p, rngs.raw, mode), {B, L});
        r_post_ps.push_back(r_post_p);
        r_states.push_back(concat_cols(h, r_z));
        r_prior_states.push_back(concat_cols(raw_h, r_zhat));
        raw_z_prev = r_z;
      }
      post_ps.push_back(post_p);
      prior_ps.push_back(prior_p);
      hs.push_back(h);
      states.push_back(concat_cols(h, z));
      prior_states.push_back(concat_cols(h, zhat));
      z_prev = z;
    }
    out.post_probs = concat_rows(post_ps);
    out.prior_probs = concat_rows(prior_ps);
    out.h = concat_rows(hs);
    out.state = concat_rows(states);
    out.prior_state = concat_rows(prior_states);
    {
      NoGradGuard ng;
      out.raw_post_probs = concat_rows(r_post_ps);
      out.raw_state = concat_rows(r_states);
      out.raw_prior_state = concat_rows(r_prior_states);
    }
    return out;
  }

  // Two-sided KL with asymmetric stop-gradients: beta_dyn trains the prior
  // toward the (frozen) posterior, beta_rep nudges the posterior toward the
  // (frozen) prior. KL is summed over latent groups per (b, t) entry, floored
  // at free_nats, then averaged — so the value never drops below
  // beta_dyn + beta_rep.
  DynLoss<T> dyn_loss(const Tensor<T>& post_probs, const Tensor<T>& prior_probs) const {
    const std::size_t rows = post_probs.dim(0);
    const std::size_t G = cfg.groups;
    DynLoss<T> out;
    if (rows == 0) {
      out.value = Tensor<T>::scalar(T(0));
      return out;
    }
    if (rows % G != 0)
      throw std::invalid_argument("dyn_loss: " + std::to_string(rows) +
                                  " probability rows do not split into groups of " + std::to_string(G));
    const std::size_t n = rows / G;
    Tensor<T> to_prior = sum_last(reshape(kl_rows(post_probs.detach(), prior_probs), {n, G}));
    Tensor<T> to_post = sum_last(reshape(kl_rows(post_probs, prior_probs.detach()), {n, G}));
    Tensor<T> floored_1 = mean_all(max_const(to_prior, T(cfg.free_nats)));
    Tensor<T> floored_2 = mean_all(max_const(to_post, T(cfg.free_nats)));
    out.value = add(scale(floored_1, T(cfg.beta_dyn)), scale(floored_2, T(cfg.beta_rep)));
    double acc = 0;
    for (T v : to_prior.value()) acc += static_cast<double>(v);
    out.kl = acc / static_cast<double>(n);
    return out;
  }

  // Mean squared error between the projected, l2-normalized states of the
  // two branches; the twin side is a fixed target. Invariant to positive
  // rescaling of either input; /dim convention: a unit vector against its
  // negation scores 4 / proj_dim.
  Tensor<T> rec_loss(const Tensor<T>& mask_state, const Tensor<T>& raw_state) const {
    if (mask_state.shape() != raw_state.shape())
      throw std::invalid_argument("rec_loss: state shapes differ, " + shape_str(mask_state.shape()) +
                                  " vs " + shape_str(raw_state.shape()));
    if (mask_state.dim(0) == 0) return Tensor<T>::scalar(T(0));
    Tensor<T> pm = l2_normalize_last(proj.forward(mask_state), T(1e-8));
    Tensor<T> pr;
    {
      NoGradGuard ng;
      pr = l2_normalize_last(proj.forward(raw_state), T(1e-8));
    }
    return mean_all(square(sub(pm, pr)));
  }

  // Squared behavioral residual over a fresh derangement of the batch rows
  // at each timestep t in [0, T-2]: the current-pair distance chases
  // |r_i - r_j| + gamma * next-pair distance, target frozen. Pairs reuse the
  // same row permutation at t and t+1.
  Tensor<T> sim_loss(const Rollout<T>& roll, const std::vector<double>& rewards,
                     Rng& pair_rng) const {
    const std::size_t B = roll.batch, Tn = roll.time;
    if (rewards.size() != B * Tn)
      throw std::invalid_argument("sim_loss: " + std::to_string(rewards.size()) + " rewards for " +
                                  std::to_string(B * Tn) + " states");
    if (B < 2 || Tn < 2) return Tensor<T>::scalar(T(0));  // needs a partner and a next step
    const std::size_t M = (Tn - 1) * B;
    std::vector<int> cur_i, cur_j, nxt_i, nxt_j;
    cur_i.reserve(M), cur_j.reserve(M), nxt_i.reserve(M), nxt_j.reserve(M);
    std::vector<T> gap(M);
    for (std::size_t t = 0; t + 1 < Tn; ++t) {
      const std::vector<int> perm = pair_rng.derangement(static_cast<int>(B));
      for (std::size_t b = 0; b < B; ++b) {
        const auto j = static_cast<std::size_t>(perm[b]);
        cur_i.push_back(static_cast<int>(t * B + b));
        cur_j.push_back(static_cast<int>(t * B + j));
        nxt_i.push_back(static_cast<int>((t + 1) * B + b));
        nxt_j.push_back(static_cast<int>((t + 1) * B + j));
        gap[t * B + b] = static_cast<T>(std::abs(rewards[t * B + b] - rewards[t * B + j]));
      }
    }
    const bool cross = cfg.sim_pairing == SimPairing::cross_branch;
    Tensor<T> d_cur = cross ? cosine_distance_rows(gather_rows(roll.raw_state, cur_i),
                                                   gather_rows(roll.state, cur_j))
                            : cosine_distance_rows(gather_rows(roll.state, cur_i),
                                                   gather_rows(roll.state, cur_j));
    Tensor<T> target;
    {
      NoGradGuard ng;  // the behavioral target is chased, never trained
      Tensor<T> d_next = cross ? cosine_distance_rows(gather_rows(roll.raw_prior_state, nxt_i),
                                                      gather_rows(roll.prior_state, nxt_j))
                               : cosine_distance_rows(gather_rows(roll.raw_prior_state, nxt_i),
                                                      gather_rows(roll.raw_prior_state, nxt_j));
      target = add(Tensor<T>::from_vec({M}, std::move(gap)), scale(d_next, T(cfg.sim_gamma)));
    }
    return mean_all(square(sub(d_cur, target)));
  }

  Tensor<T> pred_features(const Tensor<T>& state) const {
    return cfg.pred_normalized ? l2_normalize_last(state, T(1e-8)) : state;
  }

  Tensor<T> reward_logits(const Tensor<T>& state) const {
    return reward_head.forward(pred_features(state));
  }

  Tensor<T> cont_logits(const Tensor<T>& state) const {
    return cont_head.forward(pred_features(state));
  }

  // Symlog two-hot reward regression plus continue-flag cross-entropy, both
  // over the (by default un-normalized) trained state.
  PredLoss<T> pred_loss(const Tensor<T>& state, const std::vector<double>& rewards,
                        const std::vector<double>& continues) const {
    const std::size_t n = state.dim(0);
    if (rewards.size() != n || continues.size() != n)
      throw std::invalid_argument("pred_loss: need one reward and one continue per state row");
    PredLoss<T> out;
    if (n == 0) {
      out.value = Tensor<T>::scalar(T(0));
      return out;
    }
    Tensor<T> feat = pred_features(state);
    Tensor<T> targets = cfg.bins.template encode_batch<T>(rewards, out.reward_clamped);
    Tensor<T> nll = cfg.bins.nll(reward_head.forward(feat), targets);
    std::vector<T> cvec(n);
    for (std::size_t i = 0; i < n; ++i) cvec[i] = static_cast<T>(continues[i]);
    Tensor<T> bce = bce_with_logits_mean(cont_head.forward(feat), Tensor<T>::from_vec({n, 1}, std::move(cvec)));
    out.value = add(nll, bce);
    out.reward_nll = static_cast<double>(nll.item());
    out.cont_bce = static_cast<double>(bce.item());
    return out;
  }

  // One rollout, all four losses, unit weights.
  WmLoss<T> total_loss(const SequenceBatch<T>& seq, RolloutRngs rngs, Rng& pair_rng,
                       SampleMode mode) const {
    if (seq.batch * seq.time == 0) throw std::invalid_argument("total_loss: empty sequence");
    WmLoss<T> out;
    out.roll = rollout(seq, rngs, mode);
    DynLoss<T> dyn = dyn_loss(out.roll.post_probs, out.roll.prior_probs);
    Tensor<T> rec = rec_loss(out.roll.state, out.roll.raw_state);
    Tensor<T> sim = sim_loss(out.roll, seq.rewards, pair_rng);
    PredLoss<T> pred = pred_loss(out.roll.state, seq.rewards, seq.continues);
    out.value = add(add(dyn.value, rec), add(sim, pred.value));
    out.breakdown.dyn = static_cast<double>(dyn.value.item());
    out.breakdown.rec = static_cast<double>(rec.item());
    out.breakdown.sim = static_cast<double>(sim.item());
    out.breakdown.pred = static_cast<double>(pred.value.item());
    out.breakdown.total = static_cast<double>(out.value.item());
    out.breakdown.kl = dyn.kl;
    out.breakdown.reward_nll = pred.reward_nll;
    out.breakdown.cont_bce = pred.cont_bce;
    out.breakdown.reward_clamped = pred.reward_clamped;
    return out;
  }

  // Advance the trained branch with an action and sample its transition
  // prior; the imagination step. Tape-neutral: wrap in NoGradGuard to run it
  // as a constant.
  LatentStep<T> imagine_step(const Tensor<T>& h, const Tensor<T>& z, const Tensor<T>& action,
                             Rng& rng, SampleMode mode) const {
    const std::size_t B = h.dim(0);
    Tensor<T> h2 = gru.forward(h, seq_in.forward(concat_cols(z, action)));
    Tensor<T> p = unimix_probs(reshape(prior_net.forward(h2), {B * cfg.groups, cfg.classes}),
                               T(cfg.unimix));
    Tensor<T> z2 = reshape(detail::sample_latent(p, rng, mode), {B, cfg.latent_dim()});
    return {h2, z2, p};
  }

  // Posterior sample at a given recurrent state; episode starts pass zeros.
  LatentStep<T> observe_first(const Tensor<T>& h, const Tensor<T>& obs_rows, Rng& rng,
                              SampleMode mode) const {
    const std::size_t B = h.dim(0);
    Tensor<T> e = encoder.forward(obs_rows);
    Tensor<T> p = unimix_probs(reshape(post_net.forward(concat_cols(h, e)), {B * cfg.groups, cfg.classes}),
                               T(cfg.unimix));
    Tensor<T> z = reshape(detail::sample_latent(p, rng, mode), {B, cfg.latent_dim()});
    return {h, z, p};
  }

  // Recurrent advance plus posterior: one filtering step during interaction.
  LatentStep<T> observe_step(const Tensor<T>& h, const Tensor<T>& z, const Tensor<T>& action,
                             const Tensor<T>& obs_rows, Rng& rng, SampleMode mode) const {
    Tensor<T> h2 = gru.forward(h, seq_in.forward(concat_cols(z, action)));
    return observe_first(h2, obs_rows, rng, mode);
  }
};

}  // namespace hwm
