#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include <doctest.h>

#include "hwm/rng.hpp"
#include "hwm/tabular.hpp"
#include "hwm/theory.hpp"

using hwm::FactoredMdp;
using hwm::FactoredSpec;
using hwm::FactorLayout;
using hwm::Mdp;
using hwm::Policy;
using hwm::Rng;

namespace {

FactoredSpec small_conforming() {
  FactoredSpec spec;
  spec.n_endo = 3;
  spec.n_actions = 2;
  spec.exo_cards = {2, 2, 2, 2};
  spec.relevant = {1, 0, 1, 0};  // dims 1 and 3 are maskable noise
  spec.gamma = 0.9;
  return spec;
}

std::vector<int> masked_of(const FactoredSpec& spec) {
  std::vector<int> m;
  for (int d = 0; d < static_cast<int>(spec.relevant.size()); ++d)
    if (!spec.relevant[d]) m.push_back(d);
  return m;
}

// expects reduce_mdp to refuse, with the named condition in the message
void expect_rejection(const Mdp& flat, const FactorLayout& layout, const std::vector<int>& masked,
                      const char* needle) {
  try {
    (void)hwm::reduce_mdp(flat, layout, masked);
    FAIL_CHECK("audit accepted a violator (wanted: " << needle << ")");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find(needle) != std::string::npos);
  }
}

}  // namespace

TEST_CASE("policy evaluation: hand chain and linear-solve oracle") {
  // deterministic 2-cycle, rewards (1, 0), gamma 0.5:
  // V0 = 1 + 0.5 V1, V1 = 0.5 V0  =>  V = (4/3, 2/3)
  Mdp m;
  m.n_states = 2;
  m.n_actions = 1;
  m.p = {0, 1, 1, 0};
  m.r = {1, 0};
  m.gamma = 0.5;
  m.validate();
  const Policy pi = Policy::deterministic({0, 0}, 1);
  const auto v = hwm::policy_evaluation_exact(m, pi);
  CHECK(std::abs(v[0] - 4.0 / 3.0) < 1e-12);
  CHECK(std::abs(v[1] - 2.0 / 3.0) < 1e-12);

  // iterative evaluation agrees within its advertised bound
  const auto vi = hwm::value_iteration(m, pi, 1e-10);
  CHECK(std::abs(vi[0] - v[0]) < 1e-10);
  CHECK(std::abs(vi[1] - v[1]) < 1e-10);

  // stochastic policy: self-loop state, rewards 0 / 1 mixed evenly
  Mdp s;
  s.n_states = 1;
  s.n_actions = 2;
  s.p = {1, 1};
  s.r = {0, 1};
  s.gamma = 0.9;
  s.validate();
  const auto vu = hwm::policy_evaluation_exact(s, Policy::uniform(1, 2));
  CHECK(std::abs(vu[0] - 0.5 / (1.0 - 0.9)) < 1e-12);
}

TEST_CASE("value iteration: degenerate cases and random agreement") {
  Rng rng(501);
  // zero rewards stay exactly zero
  Mdp z = hwm::make_random_mdp(4, 2, 0.9, rng);
  std::fill(z.r.begin(), z.r.end(), 0.0);
  z.r_min = z.r_max = 0.0;
  const auto v0 = hwm::value_iteration(z, Policy::uniform(4, 2), 1e-10);
  for (double x : v0) CHECK(x == 0.0);

  // absorbing state, reward 1 each step: geometric series
  Mdp one;
  one.n_states = 1;
  one.n_actions = 1;
  one.p = {1};
  one.r = {1};
  one.gamma = 0.9;
  one.validate();
  const auto v1 = hwm::value_iteration(one, Policy::deterministic({0}, 1), 1e-9);
  CHECK(std::abs(v1[0] - 10.0) < 1e-9);

  // random instances against the exact solve
  for (int trial = 0; trial < 6; ++trial) {
    Mdp m = hwm::make_random_mdp(5, 3, 0.9, rng);
    std::vector<int> acts(5);
    for (auto& a : acts) a = rng.uniform_int(3);
    const Policy pi = Policy::deterministic(acts, 3);
    const auto it = hwm::value_iteration(m, pi, 1e-10);
    const auto ex = hwm::policy_evaluation_exact(m, pi);
    for (int s = 0; s < 5; ++s) CHECK(std::abs(it[s] - ex[s]) < 1e-9);
  }
}

TEST_CASE("policy iteration: hand instance and Bellman optimality") {
  // state 0 can stay (nothing) or move to the absorbing reward state 1;
  // optimal: move, then V = (9, 10) at gamma 0.9. State 1's actions tie, so
  // the smallest index wins.
  Mdp m;
  m.n_states = 2;
  m.n_actions = 2;
  m.p = {/*a0*/ 1, 0, 0, 1, /*a1*/ 0, 1, 0, 1};
  m.r = {/*s0*/ 0, 0, /*s1*/ 1, 1};
  m.gamma = 0.9;
  m.validate();
  const auto sol = hwm::policy_iteration(m);
  CHECK(sol.actions == std::vector<int>{1, 0});
  CHECK(std::abs(sol.value[0] - 9.0) < 1e-12);
  CHECK(std::abs(sol.value[1] - 10.0) < 1e-12);

  // random MDPs: the returned value satisfies Bellman optimality
  Rng rng(502);
  for (int trial = 0; trial < 6; ++trial) {
    const int n = 3 + rng.uniform_int(5);
    const int na = 2 + rng.uniform_int(2);
    Mdp r = hwm::make_random_mdp(n, na, 0.9, rng);
    const auto opt = hwm::policy_iteration(r);
    for (int s = 0; s < n; ++s) {
      double best = -1e300;
      for (int a = 0; a < na; ++a) {
        double q = r.reward(s, a);
        for (int s2 = 0; s2 < n; ++s2) q += r.gamma * r.prob(a, s, s2) * opt.value[s2];
        best = std::max(best, q);
      }
      CHECK(std::abs(opt.value[s] - best) < 1e-9);
    }
  }
}

TEST_CASE("reduce: masking nothing or everything") {
  Rng rng(503);
  const FactoredMdp fm = hwm::make_factored_mdp(small_conforming(), rng);
  const Mdp flat = hwm::flatten_full(fm);
  const FactorLayout layout = hwm::layout_of(fm);

  // empty mask: the reduction is the identity
  const auto same = hwm::reduce_mdp(flat, layout, {});
  REQUIRE(same.reduced.n_states == flat.n_states);
  for (std::size_t i = 0; i < flat.p.size(); ++i) CHECK(same.reduced.p[i] == flat.p[i]);
  for (std::size_t i = 0; i < flat.r.size(); ++i) CHECK(same.reduced.r[i] == flat.r[i]);
  for (int z = 0; z < flat.n_states; ++z) CHECK(same.reduced_of_flat[z] == z);

  // all dims irrelevant: masking all of them leaves the endogenous chain
  FactoredSpec pure = small_conforming();
  pure.relevant = {0, 0, 0, 0};
  const FactoredMdp fp = hwm::make_factored_mdp(pure, rng);
  const Mdp flat2 = hwm::flatten_full(fp);
  const auto endo = hwm::reduce_mdp(flat2, hwm::layout_of(fp), {0, 1, 2, 3});
  REQUIRE(endo.reduced.n_states == pure.n_endo);
  for (int s = 0; s < pure.n_endo; ++s)
    for (int a = 0; a < pure.n_actions; ++a) {
      CHECK(std::abs(endo.reduced.reward(s, a) - fp.reward_at(s, 0, a)) < 1e-12);
      for (int s2 = 0; s2 < pure.n_endo; ++s2)
        CHECK(std::abs(endo.reduced.prob(a, s, s2) - fp.endo_prob(s, 0, a, s2)) < 1e-12);
    }
}

TEST_CASE("reduce: audit names the violated condition") {
  Rng rng(504);
  const FactoredSpec spec = small_conforming();
  const FactoredMdp fm = hwm::make_factored_mdp(spec, rng);
  const Mdp flat = hwm::flatten_full(fm);
  const FactorLayout layout = hwm::layout_of(fm);
  const std::vector<int> masked = masked_of(spec);  // {1, 3}

  // pick a flat state whose masked dim 1 sits at value 1
  int hot = -1;
  for (int z = 0; z < flat.n_states && hot < 0; ++z)
    if (layout.exo_unindex(layout.exo_code_of(z))[1] == 1) hot = z;
  REQUIRE(hot >= 0);

  // (1) reward contrast on a masked value
  {
    Mdp bad = flat;
    bad.reward(hot, 0) += 1.0;
    bad.r_max += 1.0;
    expect_rejection(bad, layout, masked, "condition (1)");
  }
  // (2) endogenous transition reads a masked value: swap the endo component
  // of the outgoing row at `hot` between endo targets 0 and 1
  {
    Mdp bad = flat;
    for (int code = 0; code < layout.exo_count(); ++code)
      std::swap(bad.prob(0, hot, layout.flat_index(0, code)),
                bad.prob(0, hot, layout.flat_index(1, code)));
    expect_rejection(bad, layout, masked, "condition (2)");
  }
  // (3) a masked chain that reads its context: transpose dim 1's next value
  // in the outgoing row of the last flat state
  {
    Mdp bad = flat;
    const int ctx = flat.n_states - 1;
    for (int z2 = 0; z2 < flat.n_states; ++z2) {
      auto vals = layout.exo_unindex(layout.exo_code_of(z2));
      if (vals[1] != 0) continue;
      auto flipped = vals;
      flipped[1] = 1;
      const int other = layout.flat_index(layout.endo_of(z2), layout.exo_index(flipped));
      std::swap(bad.prob(1, ctx, z2), bad.prob(1, ctx, other));
    }
    expect_rejection(bad, layout, masked, "condition (3)");
  }
  // (3) pairwise-correlated masked draws with clean marginals: next values of
  // the two masked dims always agree
  {
    Mdp corr;
    corr.n_states = 4;  // one endo state, two masked binary dims
    corr.n_actions = 1;
    corr.p.assign(16, 0.0);
    for (int z = 0; z < 4; ++z) {
      corr.p[static_cast<std::size_t>(z) * 4 + 0] = 0.5;  // (0,0)
      corr.p[static_cast<std::size_t>(z) * 4 + 3] = 0.5;  // (1,1)
    }
    corr.r.assign(4, 0.0);
    corr.r_min = corr.r_max = 0.0;
    corr.gamma = 0.9;
    corr.validate();
    FactorLayout lay;
    lay.n_endo = 1;
    lay.exo_cards = {2, 2};
    lay.relevant = {0, 0};
    expect_rejection(corr, lay, {0, 1}, "condition (3)");
  }
  // out-of-range and duplicate mask indices are caught
  CHECK_THROWS(hwm::reduce_mdp(flat, layout, {4}));
  CHECK_THROWS(hwm::reduce_mdp(flat, layout, {1, 1}));
  // masking a dim the dynamics read is itself a condition violation
  expect_rejection(flat, layout, {0}, "condition");
}

TEST_CASE("reduce without audit exposes the value distortion") {
  Rng rng(505);
  const FactoredSpec spec = small_conforming();
  const FactoredMdp fm = hwm::make_factored_mdp(spec, rng);
  Mdp flat = hwm::flatten_full(fm);
  const FactorLayout layout = hwm::layout_of(fm);
  const std::vector<int> masked = masked_of(spec);

  // reward reads masked dim 1 with contrast 1.0
  for (int z = 0; z < flat.n_states; ++z)
    if (layout.exo_unindex(layout.exo_code_of(z))[1] == 1)
      for (int a = 0; a < flat.n_actions; ++a) flat.reward(z, a) += 1.0;
  flat.r_max += 1.0;

  const auto red = hwm::reduce_mdp(flat, layout, masked, 1e-9, /*audit=*/false);
  const auto opt = hwm::policy_iteration(red.reduced);
  std::vector<int> lifted(flat.n_states);
  for (int z = 0; z < flat.n_states; ++z) lifted[z] = opt.actions[red.reduced_of_flat[z]];
  const auto v_full =
      hwm::policy_evaluation_exact(flat, Policy::deterministic(lifted, flat.n_actions));
  double gap = 0.0;
  for (int z = 0; z < flat.n_states; ++z)
    gap = std::max(gap, std::abs(v_full[z] - opt.value[red.reduced_of_flat[z]]));
  CHECK(gap > 0.1);  // the dropped reward term is worth ~1 per visit
}

TEST_CASE("value preservation on conforming instances") {
  Rng rng(506);
  const FactoredSpec spec = small_conforming();
  const FactoredMdp fm = hwm::make_factored_mdp(spec, rng);
  const Mdp flat = hwm::flatten_full(fm);
  const FactorLayout layout = hwm::layout_of(fm);
  const std::vector<int> masked = masked_of(spec);

  // default path: optimal reduced policy, optimality transfer included
  const auto rep = hwm::verify_theorem1(flat, layout, masked);
  CHECK(rep.n_flat == flat.n_states);
  CHECK(rep.n_reduced == flat.n_states / 4);  // two binary dims removed
  CHECK(rep.max_value_gap <= 1e-8);
  CHECK(rep.optimality_checked);
  CHECK(rep.optimality_gap <= 1e-8);
  CHECK(rep.passed);

  // a caller-chosen (non-optimal) reduced policy preserves value too
  Rng prng(507);
  const int n_red = rep.n_reduced;
  std::vector<int> arbitrary(n_red);
  for (auto& a : arbitrary) a = prng.uniform_int(spec.n_actions);
  const auto rep2 = hwm::verify_theorem1(flat, layout, masked, &arbitrary);
  CHECK(rep2.max_value_gap <= 1e-8);
  CHECK(!rep2.optimality_checked);
  CHECK(rep2.passed);

  // no exogenous dims at all: the reduction is trivial and exact
  FactoredSpec bare = spec;
  bare.exo_cards = {};
  bare.relevant = {};
  const FactoredMdp fb = hwm::make_factored_mdp(bare, rng);
  const auto rep3 = hwm::verify_theorem1(hwm::flatten_full(fb), hwm::layout_of(fb), {});
  CHECK(rep3.max_value_gap <= 1e-8);
  CHECK(rep3.passed);
}

TEST_CASE("relabeling masked values changes nothing") {
  Rng rng(508);
  const FactoredSpec spec = small_conforming();
  const FactoredMdp fm = hwm::make_factored_mdp(spec, rng);
  const Mdp flat = hwm::flatten_full(fm);
  const FactorLayout layout = hwm::layout_of(fm);
  const std::vector<int> masked = masked_of(spec);

  // permute flat states by flipping masked dim 3's value everywhere
  std::vector<int> sigma(flat.n_states);
  for (int z = 0; z < flat.n_states; ++z) {
    auto vals = layout.exo_unindex(layout.exo_code_of(z));
    vals[3] ^= 1;
    sigma[z] = layout.flat_index(layout.endo_of(z), layout.exo_index(vals));
  }
  Mdp perm = flat;
  for (int a = 0; a < flat.n_actions; ++a)
    for (int z = 0; z < flat.n_states; ++z) {
      perm.reward(sigma[z], a) = flat.reward(z, a);
      for (int z2 = 0; z2 < flat.n_states; ++z2)
        perm.prob(a, sigma[z], sigma[z2]) = flat.prob(a, z, z2);
    }

  const auto ra = hwm::reduce_mdp(flat, layout, masked);
  const auto rb = hwm::reduce_mdp(perm, layout, masked);
  REQUIRE(ra.reduced.n_states == rb.reduced.n_states);
  for (std::size_t i = 0; i < ra.reduced.p.size(); ++i)
    CHECK(std::abs(ra.reduced.p[i] - rb.reduced.p[i]) < 1e-12);
  for (std::size_t i = 0; i < ra.reduced.r.size(); ++i)
    CHECK(std::abs(ra.reduced.r[i] - rb.reduced.r[i]) < 1e-12);
  CHECK(hwm::verify_theorem1(perm, layout, masked).passed);
}

TEST_CASE("batch of random conforming instances") {
  const auto res = hwm::run_theorem1_batch(10, 2027);
  CHECK(res.instances == 10);
  CHECK(res.failures == 0);
  CHECK(res.worst_value_gap <= 1e-8);
  CHECK(res.worst_optimality_gap <= 1e-8);
  CHECK(static_cast<int>(res.reports.size()) == 10);
  CHECK(res.passed);
}
