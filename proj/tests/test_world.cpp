#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include <doctest.h>

#include "hwm/bisim.hpp"
#include "hwm/grad_audit.hpp"
#include "hwm/world_model.hpp"
#include "testutil.hpp"

using hwm::CosineMode;
using hwm::Rng;
using hwm::SampleMode;
using hwm::SequenceBatch;
using hwm::SimPairing;
using hwm::Tensor;
using hwm::WorldModel;
using hwm::WorldModelConfig;

using Td = Tensor<double>;

namespace {

WorldModelConfig tiny_cfg() {
  WorldModelConfig cfg;
  cfg.obs_dim = 6;
  cfg.action_dim = 3;
  cfg.embed = 6;
  cfg.hidden = 6;
  cfg.units = 5;
  cfg.groups = 2;
  cfg.classes = 3;
  cfg.proj_dim = 4;
  cfg.bins.n = 5;  // few reward bins keep the finite-difference sweep cheap
  return cfg;
}

// Random window with half of each frame zeroed as the "masked" view, one-hot
// previous actions (all-zero at t=0) and a terminal flag on the last row.
SequenceBatch<double> make_batch(const WorldModelConfig& cfg, std::size_t B, std::size_t T,
                                 Rng& rng) {
  SequenceBatch<double> seq;
  seq.batch = B;
  seq.time = T;
  const std::size_t n = B * T;
  std::vector<double> obs(n * cfg.obs_dim);
  for (auto& v : obs) v = rng.uniform(-1.0, 1.0);
  std::vector<double> mobs = obs;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < cfg.obs_dim / 2; ++c) mobs[r * cfg.obs_dim + c] = 0.0;
  std::vector<double> act(n * cfg.action_dim, 0.0);
  for (std::size_t r = B; r < n; ++r)
    act[r * cfg.action_dim + static_cast<std::size_t>(rng.uniform_int(static_cast<int>(cfg.action_dim)))] =
        1.0;
  seq.obs = Td::from_vec({n, cfg.obs_dim}, std::move(obs));
  seq.masked_obs = Td::from_vec({n, cfg.obs_dim}, std::move(mobs));
  seq.prev_actions = Td::from_vec({n, cfg.action_dim}, std::move(act));
  seq.rewards.resize(n);
  for (auto& r : seq.rewards) r = rng.uniform(-1.0, 1.0);
  seq.continues.assign(n, 1.0);
  seq.continues[n - 1] = 0.0;
  return seq;
}

// Hand-made rollout for loss-level tests: trained-branch stacks are leaves,
// twin stacks are constants (the rollout contract).
hwm::Rollout<double> fake_rollout(std::size_t B, std::size_t T, std::size_t S, Rng& rng) {
  hwm::Rollout<double> roll;
  roll.batch = B;
  roll.time = T;
  const std::size_t n = B * T;
  auto fill = [&](bool leaf) {
    std::vector<double> v(n * S);
    for (auto& x : v) x = rng.uniform(-1.5, 1.5);
    auto t = Td::from_vec({n, S}, std::move(v));
    if (leaf) t.set_requires_grad(true);
    return t;
  };
  roll.state = fill(true);
  roll.prior_state = fill(true);  // tape-capable on purpose: the target must still be dead
  roll.raw_state = fill(false);
  roll.raw_prior_state = fill(false);
  return roll;
}

// Scalar replication of the similarity loss with the tabular module's cosine.
double sim_oracle(const hwm::Rollout<double>& roll, const std::vector<double>& rewards,
                  std::uint64_t pair_seed, double gamma, bool cross) {
  const std::size_t B = roll.batch, T = roll.time;
  const std::size_t S = roll.state.dim(1);
  const auto& sv = roll.state.value();
  const auto& pv = roll.prior_state.value();
  const auto& rv = roll.raw_state.value();
  const auto& rpv = roll.raw_prior_state.value();
  auto row = [S](const std::vector<double>& flat, std::size_t r) {
    return std::span<const double>{flat.data() + r * S, S};
  };
  Rng pr(pair_seed);
  double acc = 0;
  std::size_t m = 0;
  for (std::size_t t = 0; t + 1 < T; ++t) {
    const std::vector<int> perm = pr.derangement(static_cast<int>(B));
    for (std::size_t b = 0; b < B; ++b) {
      const auto j = static_cast<std::size_t>(perm[b]);
      const std::size_t ic = t * B + b, jc = t * B + j;
      const std::size_t in = (t + 1) * B + b, jn = (t + 1) * B + j;
      const double d_cur = cross ? hwm::cosine(row(rv, ic), row(sv, jc), CosineMode::distance)
                                 : hwm::cosine(row(sv, ic), row(sv, jc), CosineMode::distance);
      const double d_next = cross
                                ? hwm::cosine(row(rpv, in), row(pv, jn), CosineMode::distance)
                                : hwm::cosine(row(rpv, in), row(rpv, jn), CosineMode::distance);
      const double resid = d_cur - (std::abs(rewards[ic] - rewards[jc]) + gamma * d_next);
      acc += resid * resid;
      ++m;
    }
  }
  return acc / static_cast<double>(m);
}

}  // namespace

TEST_CASE("dynamics loss: floors, per-entry clamp, group sum") {
  Rng rng(901);
  WorldModel<double> wm(tiny_cfg(), rng);

  // both KL directions at zero clamp to the floor: 0.5 * 1 + 0.1 * 1
  {
    std::vector<double> u(2 * 3, 1.0 / 3.0);
    auto q = Td::from_vec({2, 3}, u), p = Td::from_vec({2, 3}, u);
    auto dyn = wm.dyn_loss(q, p);
    CHECK(std::abs(dyn.value.item() - 0.6) < 1e-15);
    CHECK(dyn.kl == 0.0);
  }
  // rows pair up into groups of two; entry totals {2, 2} give
  // 0.5 * 2 + 0.1 * 2 = 1.2
  {
    const double e2 = std::exp(-2.0);
    auto q = Td::from_vec({4, 2}, {1.0, 0.0, 0.5, 0.5, 1.0, 0.0, 0.5, 0.5});
    auto p = Td::from_vec({4, 2}, {e2, 1.0 - e2, 0.5, 0.5, e2, 1.0 - e2, 0.5, 0.5});
    auto dyn = wm.dyn_loss(q, p);
    CHECK(std::abs(dyn.value.item() - 1.2) < 1e-12);
    CHECK(std::abs(dyn.kl - 2.0) < 1e-12);
  }
  // the floor applies per (b, t) entry before averaging: entry totals {0, 3}
  // give mean(max(1,0), max(1,3)) = 2, not max(1, mean) = 1.5
  {
    const double e3 = std::exp(-3.0);
    auto q = Td::from_vec({4, 2}, {0.5, 0.5, 0.5, 0.5, 1.0, 0.0, 0.5, 0.5});
    auto p = Td::from_vec({4, 2}, {0.5, 0.5, 0.5, 0.5, e3, 1.0 - e3, 0.5, 0.5});
    auto dyn = wm.dyn_loss(q, p);
    CHECK(std::abs(dyn.value.item() - 1.2) < 1e-12);
  }
  // groups sum before the clamp: two groups at KL 0.6 make 1.2 > floor,
  // so the loss reads 0.6 * 1.2 = 0.72 rather than staying floored
  {
    const double e06 = std::exp(-0.6);
    auto q = Td::from_vec({2, 2}, {1.0, 0.0, 1.0, 0.0});
    auto p = Td::from_vec({2, 2}, {e06, 1.0 - e06, e06, 1.0 - e06});
    auto dyn = wm.dyn_loss(q, p);  // one (b, t) entry, groups = 2
    CHECK(std::abs(dyn.value.item() - 0.72) < 1e-12);
  }
}

TEST_CASE("dynamics loss: asymmetric stop-gradients") {
  Rng rng(902);
  WorldModel<double> wm(tiny_cfg(), rng);
  auto mk = [&] {
    auto ql = testutil::rand_leaf({2, 3}, rng, -4.0, 4.0);
    auto pl = testutil::rand_leaf({2, 3}, rng, -4.0, 4.0);
    return std::pair(ql, pl);
  };

  // above the floor, each beta gates exactly one side
  {
    auto [ql, pl] = mk();
    auto dyn = wm.dyn_loss(hwm::softmax_last(ql), hwm::softmax_last(pl));
    REQUIRE(dyn.kl > 1.0);  // premise: out of the clamp region
    wm.cfg.beta_rep = 0.0;
    auto only_dyn = wm.dyn_loss(hwm::softmax_last(ql), hwm::softmax_last(pl));
    only_dyn.value.backward();
    REQUIRE(pl.has_grad());
    double posterior_leak = 0, prior_norm = 0;
    if (ql.has_grad())
      for (double g : ql.grad()) posterior_leak += std::abs(g);
    for (double g : pl.grad()) prior_norm += std::abs(g);
    CHECK(posterior_leak == 0.0);  // sg(post) side: posterior untouched
    CHECK(prior_norm > 0.0);
    ql.clear_grad();
    pl.clear_grad();
    wm.cfg.beta_rep = 0.1;
    wm.cfg.beta_dyn = 0.0;
    auto only_rep = wm.dyn_loss(hwm::softmax_last(ql), hwm::softmax_last(pl));
    only_rep.value.backward();
    double prior_leak = 0, posterior_norm = 0;
    if (pl.has_grad())
      for (double g : pl.grad()) prior_leak += std::abs(g);
    for (double g : ql.grad()) posterior_norm += std::abs(g);
    CHECK(prior_leak == 0.0);  // sg(prior) side: prior untouched
    CHECK(posterior_norm > 0.0);
    wm.cfg.beta_dyn = 0.5;
  }
  // below the floor the clamp flattens both directions: gradients vanish
  {
    auto ql = testutil::rand_leaf({2, 3}, rng);
    auto pl = Td::from_vec(ql.shape(), ql.value());
    pl.set_requires_grad(true);
    auto dyn = wm.dyn_loss(hwm::softmax_last(ql), hwm::softmax_last(pl));
    REQUIRE(dyn.kl == 0.0);
    dyn.value.backward();
    double leak = 0;
    if (ql.has_grad())
      for (double g : ql.grad()) leak += std::abs(g);
    if (pl.has_grad())
      for (double g : pl.grad()) leak += std::abs(g);
    CHECK(leak == 0.0);
    CHECK(std::abs(dyn.value.item() - 0.6) < 1e-15);
  }
}

TEST_CASE("reconstruction loss: closed form, scaling, frozen target") {
  Rng rng(903);
  WorldModelConfig cfg = tiny_cfg();
  cfg.proj_dim = cfg.state_dim();  // square projection so it can be the identity
  WorldModel<double> wm(cfg, rng);
  const std::size_t S = cfg.state_dim();
  {
    auto& w = wm.proj.w.value.raw_value();
    std::fill(w.begin(), w.end(), 0.0);
    for (std::size_t i = 0; i < S; ++i) w[i * S + i] = 1.0;
  }
  std::vector<double> v(S);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  std::vector<double> nv(S);
  for (std::size_t i = 0; i < S; ++i) nv[i] = -v[i];
  auto s = Td::from_vec({1, S}, v), sm = Td::from_vec({1, S}, nv);

  // antipodal unit vectors: per-coordinate mean of |u - (-u)|^2 = 4 / dim
  CHECK(std::abs(wm.rec_loss(sm, s).item() - 4.0 / static_cast<double>(S)) < 1e-12);
  CHECK(wm.rec_loss(s, s).item() == 0.0);

  // l2 normalization makes the loss invariant to positive rescaling
  auto s_big = Td::from_vec({1, S}, [&] {
    std::vector<double> t(v);
    for (auto& x : t) x *= 37.5;
    return t;
  }());
  auto sm_small = Td::from_vec({1, S}, [&] {
    std::vector<double> t(nv);
    for (auto& x : t) x *= 0.003;
    return t;
  }());
  CHECK(std::abs(wm.rec_loss(sm_small, s_big).item() - wm.rec_loss(sm, s).item()) < 1e-12);

  // the unmasked side is a frozen target even when handed a tape leaf
  auto mask_leaf = testutil::rand_leaf({3, S}, rng);
  auto raw_leaf = testutil::rand_leaf({3, S}, rng);
  auto loss = wm.rec_loss(mask_leaf, raw_leaf);
  loss.backward();
  CHECK(mask_leaf.has_grad());
  CHECK(!raw_leaf.has_grad());
  CHECK(wm.proj.w.value.has_grad());
  wm.proj.w.value.clear_grad();

  // zero rows hit the epsilon guard, not a division by zero
  auto zrow = Td::from_vec({1, S}, std::vector<double>(S, 0.0));
  CHECK(std::isfinite(wm.rec_loss(s, zrow).item()));

  // finite differences through the projection's live side
  testutil::check_gradients([&] { return wm.rec_loss(mask_leaf, raw_leaf); }, {&mask_leaf});
}

TEST_CASE("similarity loss: scalar replication, both pairings") {
  Rng rng(904);
  WorldModel<double> wm(tiny_cfg(), rng);
  const std::size_t S = wm.cfg.state_dim();
  auto roll = fake_rollout(4, 3, S, rng);
  std::vector<double> rewards(12);
  for (auto& r : rewards) r = rng.uniform(-1.0, 1.0);

  for (bool cross : {true, false}) {
    wm.cfg.sim_pairing = cross ? SimPairing::cross_branch : SimPairing::masked_pair;
    Rng pr(77);
    auto loss = wm.sim_loss(roll, rewards, pr);
    const double want = sim_oracle(roll, rewards, 77, wm.cfg.sim_gamma, cross);
    CHECK(std::abs(loss.item() - want) < 1e-12);
  }

  // the behavioral target is dead: prior stacks get no gradient even though
  // the trained prior stack could carry one
  wm.cfg.sim_pairing = SimPairing::cross_branch;
  {
    Rng pr(77);
    auto loss = wm.sim_loss(roll, rewards, pr);
    loss.backward();
    CHECK(roll.state.has_grad());
    CHECK(!roll.prior_state.has_grad());
    CHECK(!roll.raw_state.has_grad());
    CHECK(!roll.raw_prior_state.has_grad());
    roll.state.clear_grad();
  }
  // masked pairing backpropagates through both gathered sides
  wm.cfg.sim_pairing = SimPairing::masked_pair;
  {
    Rng pr(78);
    wm.sim_loss(roll, rewards, pr).backward();
    REQUIRE(roll.state.has_grad());
    double norm = 0;
    for (double g : roll.state.grad()) norm += std::abs(g);
    CHECK(norm > 0.0);
    roll.state.clear_grad();
  }

  // finite differences on the live side, fresh pairing stream per call
  wm.cfg.sim_pairing = SimPairing::cross_branch;
  testutil::check_gradients(
      [&] {
        Rng pr(79);
        return wm.sim_loss(roll, rewards, pr);
      },
      {&roll.state});

  // degenerate shapes carry no pairs
  auto single = fake_rollout(1, 3, S, rng);
  const std::vector<double> r3(3, 0.0);
  CHECK(wm.sim_loss(single, r3, rng).item() == 0.0);
  auto one_step = fake_rollout(4, 1, S, rng);
  const std::vector<double> r4(4, 0.0);
  CHECK(wm.sim_loss(one_step, r4, rng).item() == 0.0);

  // identical states with equal rewards sit at the fixed point
  {
    hwm::Rollout<double> fixed;
    fixed.batch = 3;
    fixed.time = 2;
    std::vector<double> one(6 * S);
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t c = 0; c < S; ++c) one[r * S + c] = 0.3 * static_cast<double>(c) + 0.5;
    fixed.state = Td::from_vec({6, S}, one);
    fixed.raw_state = Td::from_vec({6, S}, one);
    fixed.prior_state = Td::from_vec({6, S}, one);
    fixed.raw_prior_state = Td::from_vec({6, S}, one);
    Rng pr(80);
    const std::vector<double> r6(6, 0.25);
    CHECK(wm.sim_loss(fixed, r6, pr).item() < 1e-20);
  }
}

TEST_CASE("row cosine distance agrees with the tabular metric") {
  Rng rng(905);
  const std::size_t n = 6, d = 7;
  std::vector<double> av(n * d), bv(n * d);
  for (auto& x : av) x = rng.uniform(-2.0, 2.0);
  for (auto& x : bv) x = rng.uniform(-2.0, 2.0);
  auto a = Td::from_vec({n, d}, av), b = Td::from_vec({n, d}, bv);
  auto dist = hwm::cosine_distance_rows(a, b);
  for (std::size_t r = 0; r < n; ++r) {
    const double want = hwm::cosine({av.data() + r * d, d}, {bv.data() + r * d, d},
                                    CosineMode::distance);
    CHECK(std::abs(dist.value()[r] - want) < 1e-12);
  }
  CHECK(std::abs(hwm::cosine_distance_rows(a, a).value()[0]) < 1e-14);
}

TEST_CASE("prediction loss: flat start, additivity, clamp counter") {
  Rng rng(906);
  WorldModel<double> wm(tiny_cfg(), rng);
  const std::size_t S = wm.cfg.state_dim();
  auto state = testutil::rand_leaf({4, S}, rng);
  std::vector<double> rewards = {0.1, -0.4, 0.7, 0.0};
  std::vector<double> conts = {1.0, 1.0, 0.0, 1.0};

  // zero-initialized reward head emits uniform bin probabilities: the nll
  // starts exactly at log(#bins) regardless of targets
  auto pred = wm.pred_loss(state, rewards, conts);
  CHECK(std::abs(pred.reward_nll - std::log(static_cast<double>(wm.cfg.bins.n))) < 1e-12);
  CHECK(std::abs(pred.value.item() - (pred.reward_nll + pred.cont_bce)) < 1e-15);
  CHECK(pred.reward_clamped == 0);

  // out-of-range rewards are clamped to the edge bins and counted
  const std::vector<double> huge = {0.1, 1e9, -1e9, 0.0};
  auto clamped = wm.pred_loss(state, huge, conts);
  CHECK(clamped.reward_clamped == 2);

  // finite differences through both heads; randomized reward head so that
  // path carries signal
  for (auto* p : wm.online_params())
    if (p->name.rfind("wm.rew", 0) == 0)
      for (auto& v : p->value.raw_value()) v = rng.uniform(-0.3, 0.3);
  testutil::check_gradients([&] { return wm.pred_loss(state, rewards, conts).value; }, {&state});

  // with normalized features the heads become scale-invariant in the state
  wm.cfg.pred_normalized = true;
  auto scaled = Td::from_vec({4, S}, [&] {
    std::vector<double> t(state.value());
    for (auto& x : t) x *= 3.0;
    return t;
  }());
  CHECK(std::abs(wm.pred_loss(state, rewards, conts).value.item() -
                 wm.pred_loss(scaled, rewards, conts).value.item()) < 1e-12);
}

TEST_CASE("rollout: shapes, zero start, action sensitivity, determinism") {
  Rng rng(907);
  WorldModelConfig cfg = tiny_cfg();
  WorldModel<double> wm(cfg, rng);
  const std::size_t B = 3, T = 4;
  auto seq = make_batch(cfg, B, T, rng);

  Rng m1(21), r1(22);
  auto roll = wm.rollout(seq, {m1, r1}, SampleMode::hard);
  const std::size_t n = B * T;
  REQUIRE(roll.state.shape() == hwm::Shape{n, cfg.state_dim()});
  REQUIRE(roll.post_probs.shape() == hwm::Shape{n * cfg.groups, cfg.classes});
  REQUIRE(roll.h.shape() == hwm::Shape{n, cfg.units});

  // sampled latents are one-hot per group
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t g = 0; g < cfg.groups; ++g) {
      double sum = 0;
      for (std::size_t c = 0; c < cfg.classes; ++c) {
        const double v = roll.state.value()[r * cfg.state_dim() + cfg.units + g * cfg.classes + c];
        CHECK((v == 0.0 || v == 1.0));
        sum += v;
      }
      CHECK(sum == 1.0);
    }
  // the first step starts from a zero recurrent state on both branches
  for (std::size_t i = 0; i < B * cfg.units; ++i) {
    CHECK(roll.h.value()[i] == 0.0);
    CHECK(roll.raw_state.value()[i / cfg.units * cfg.state_dim() + i % cfg.units] == 0.0);
  }

  // twin stacks are constants
  CHECK(!roll.raw_state.requires_grad());
  CHECK(!roll.raw_prior_state.requires_grad());
  CHECK(!roll.raw_post_probs.requires_grad());

  // bitwise determinism under reseeded streams
  Rng m2(21), r2(22);
  auto again = wm.rollout(seq, {m2, r2}, SampleMode::hard);
  CHECK(again.state.value() == roll.state.value());
  CHECK(again.raw_prior_state.value() == roll.raw_prior_state.value());

  // perturbing the action into t=1 moves that row's recurrent state and
  // leaves the other batch rows alone
  auto seq2 = seq;
  {
    std::vector<double> acts = seq.prev_actions.value();
    const bool was_zero = acts[(B + 0) * cfg.action_dim + 0] == 1.0;
    for (std::size_t c = 0; c < cfg.action_dim; ++c) acts[(B + 0) * cfg.action_dim + c] = 0.0;
    acts[(B + 0) * cfg.action_dim + (was_zero ? 1 : 0)] = 1.0;
    REQUIRE(acts != seq.prev_actions.value());
    seq2.prev_actions = Td::from_vec({n, cfg.action_dim}, std::move(acts));
  }
  Rng m3(21), r3(22);
  auto moved = wm.rollout(seq2, {m3, r3}, SampleMode::hard);
  double delta_row0 = 0, delta_row1 = 0;
  for (std::size_t u = 0; u < cfg.units; ++u) {
    delta_row0 += std::abs(moved.h.value()[(B + 0) * cfg.units + u] -
                           roll.h.value()[(B + 0) * cfg.units + u]);
    delta_row1 += std::abs(moved.h.value()[(B + 1) * cfg.units + u] -
                           roll.h.value()[(B + 1) * cfg.units + u]);
  }
  CHECK(delta_row0 > 0.0);
  CHECK(delta_row1 == 0.0);

  // empty sequence rolls out to empty stacks
  SequenceBatch<double> empty;
  Rng m4(1), r4(2);
  auto none = wm.rollout(empty, {m4, r4}, SampleMode::hard);
  CHECK(none.time == 0);
  CHECK(none.state.dim(0) == 0);

  // shape mismatches are rejected
  SequenceBatch<double> bad = seq;
  bad.prev_actions = Td::zeros({n, cfg.action_dim + 1});
  Rng m5(1), r5(2);
  CHECK_THROWS_AS(wm.rollout(bad, {m5, r5}, SampleMode::hard), std::invalid_argument);
}

TEST_CASE("branch collapse: unmasked input + synced twin + shared seed") {
  Rng rng(908);
  WorldModelConfig cfg = tiny_cfg();
  WorldModel<double> wm(cfg, rng);
  auto seq = make_batch(cfg, 3, 4, rng);
  seq.masked_obs = Td::from_vec(seq.obs.shape(), seq.obs.value());  // mask ratio 0

  Rng m(42), r(42);  // identical streams
  auto roll = wm.rollout(seq, {m, r}, SampleMode::hard);
  CHECK(roll.post_probs.value() == roll.raw_post_probs.value());
  CHECK(roll.state.value() == roll.raw_state.value());
  CHECK(wm.rec_loss(roll.state, roll.raw_state).item() == 0.0);
}

TEST_CASE("full loss: breakdown bookkeeping and deterministic replay") {
  Rng rng(909);
  WorldModelConfig cfg = tiny_cfg();
  auto run = [&](std::uint64_t init_seed) {
    Rng init(init_seed);
    WorldModel<double> wm(cfg, init);
    Rng data(55);
    auto seq = make_batch(cfg, 3, 4, data);
    Rng m(31), r(32), p(33);
    return wm.total_loss(seq, {m, r}, p, SampleMode::hard).breakdown;
  };
  auto a = run(1234), b = run(1234);
  CHECK(a.total == b.total);
  CHECK(a.dyn == b.dyn);
  CHECK(a.rec == b.rec);
  CHECK(a.sim == b.sim);
  CHECK(a.pred == b.pred);
  CHECK(a.kl == b.kl);
  CHECK(std::abs(a.total - (a.dyn + a.rec + a.sim + a.pred)) < 1e-12);
  CHECK(a.dyn >= 0.6 - 1e-15);  // the free-bits floor is a hard lower bound
  auto c = run(4321);
  CHECK(c.total != a.total);  // different init actually changes the model
}

TEST_CASE("gradient firewall through the full loss") {
  Rng rng(910);
  WorldModelConfig cfg = tiny_cfg();
  WorldModel<double> wm(cfg, rng);
  auto seq = make_batch(cfg, 3, 4, rng);
  Rng m(61), r(62), p(63);
  auto step = wm.total_loss(seq, {m, r}, p, SampleMode::hard);
  step.value.backward();

  for (auto* prm : wm.online_params()) {
    INFO("parameter " << prm->name);
    CHECK(prm->value.has_grad());
  }
  for (auto* prm : wm.ema_params()) {
    INFO("parameter " << prm->name);
    CHECK(!prm->value.has_grad());
  }
  CHECK(!step.roll.raw_state.has_grad());
  CHECK(!step.roll.raw_prior_state.has_grad());
  CHECK(!step.roll.prior_state.has_grad());  // target-only stack stays dead
  for (auto* prm : wm.online_params()) prm->value.clear_grad();
}

TEST_CASE("twin updates: sync and momentum arithmetic") {
  Rng rng(911);
  WorldModel<double> wm(tiny_cfg(), rng);
  auto online = wm.twin_params();
  auto ema = wm.ema_params();
  REQUIRE(online.size() == ema.size());
  for (std::size_t i = 0; i < online.size(); ++i)
    CHECK(online[i]->value.value() == ema[i]->value.value());  // constructor syncs

  online[0]->value.raw_value()[0] = 2.0;
  ema[0]->value.raw_value()[0] = 1.0;
  wm.cfg.ema_momentum = 0.01;
  wm.ema_step();
  CHECK(std::abs(ema[0]->value.value()[0] - 1.01) < 1e-15);

  wm.cfg.ema_momentum = 0.0;  // frozen twin
  const double before = ema[0]->value.value()[0];
  wm.ema_step();
  CHECK(ema[0]->value.value()[0] == before);

  wm.cfg.ema_momentum = 1.0;  // full copy
  wm.ema_step();
  CHECK(ema[0]->value.value()[0] == 2.0);
}

TEST_CASE("interaction helpers: filtering and imagination steps") {
  Rng rng(912);
  WorldModelConfig cfg = tiny_cfg();
  WorldModel<double> wm(cfg, rng);
  const std::size_t B = 2;
  auto h0 = Td::zeros({B, cfg.units});
  auto obs = testutil::rand_leaf({B, cfg.obs_dim}, rng);
  obs.set_requires_grad(false);

  Rng s1(7);
  auto first = wm.observe_first(h0, obs, s1, SampleMode::hard);
  REQUIRE(first.z.shape() == hwm::Shape{B, cfg.latent_dim()});
  Rng s2(7);
  auto first_again = wm.observe_first(h0, obs, s2, SampleMode::hard);
  CHECK(first.z.value() == first_again.z.value());

  std::vector<double> av(B * cfg.action_dim, 0.0);
  av[0] = 1.0;
  av[cfg.action_dim + 2] = 1.0;
  auto act = Td::from_vec({B, cfg.action_dim}, std::move(av));
  Rng s3(8);
  auto imag = wm.imagine_step(first.h, first.z, act, s3, SampleMode::hard);
  REQUIRE(imag.h.shape() == hwm::Shape{B, cfg.units});
  double moved = 0;
  for (double v : imag.h.value()) moved += std::abs(v);
  CHECK(moved > 0.0);

  Rng s4(9);
  auto obs2 = wm.observe_step(first.h, first.z, act, obs, s4, SampleMode::hard);
  REQUIRE(obs2.probs.shape() == hwm::Shape{B * cfg.groups, cfg.classes});
}

TEST_CASE("float instantiation smoke") {
  Rng rng(913);
  WorldModelConfig cfg = tiny_cfg();
  Rng init(5);
  WorldModel<float> wm(cfg, init);
  SequenceBatch<float> seq;
  seq.batch = 2;
  seq.time = 3;
  const std::size_t n = 6;
  std::vector<float> obs(n * cfg.obs_dim);
  for (auto& v : obs) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  seq.obs = Tensor<float>::from_vec({n, cfg.obs_dim}, obs);
  seq.masked_obs = Tensor<float>::from_vec({n, cfg.obs_dim}, std::move(obs));
  seq.prev_actions = Tensor<float>::zeros({n, cfg.action_dim});
  seq.rewards.assign(n, 0.25);
  seq.continues.assign(n, 1.0);
  Rng m(1), r(2), p(3);
  auto step = wm.total_loss(seq, {m, r}, p, SampleMode::hard);
  CHECK(std::isfinite(step.breakdown.total));
  step.value.backward();
  for (auto* prm : wm.ema_params()) CHECK(!prm->value.has_grad());
  for (auto* prm : wm.online_params()) prm->value.clear_grad();
}

TEST_CASE("finite differences: primitive operation battery") {
  auto rows = hwm::audit_tensor_ops();
  REQUIRE(rows.size() > 25);
  for (const auto& row : rows) {
    INFO(row.name << " max rel err " << row.max_rel_err << " over " << row.checked);
    CHECK(row.passed);
  }
}

TEST_CASE("finite differences: every trained parameter through the full loss") {
  Rng rng(914);
  WorldModelConfig cfg = tiny_cfg();
  WorldModel<double> wm(cfg, rng);
  // randomize the reward head so its hidden layers carry gradient signal
  for (auto* p : wm.online_params())
    if (p->name.rfind("wm.rew", 0) == 0)
      for (auto& v : p->value.raw_value()) v = rng.uniform(-0.3, 0.3);
  auto seq = make_batch(cfg, 3, 3, rng);
  auto rep = hwm::audit_world_model(wm, seq);
  CHECK(rep.center_consistency < 1e-10);
  CHECK(rep.online_all_touched);
  CHECK(rep.ema_grad_free);
  CHECK(rep.targets_grad_free);
  for (const auto& row : rep.rows) {
    INFO(row.name << " max rel err " << row.max_rel_err << " over " << row.checked << " entries");
    CHECK(row.passed);
  }
  CHECK(rep.passed);

  // the audit also holds for the alternative similarity pairing
  wm.cfg.sim_pairing = SimPairing::masked_pair;
  auto rep2 = hwm::audit_world_model(wm, seq);
  CHECK(rep2.passed);
}
