#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hwm/rng.hpp"

// Tabular MDPs. Two representations:
//  - Mdp: flat states, used by value iteration and the bisimulation solver.
//  - FactoredMdp: endogenous states plus independently-evolving exogenous
//    dims, where reward and endogenous dynamics read only a declared
//    "relevant" subset of the exo dims. The factorisation is structural:
//    the arrays cannot express a dependency outside it.

namespace hwm {

struct Mdp {
  int n_states = 0;
  int n_actions = 0;
  std::vector<double> p;  // [a][s][s']
  std::vector<double> r;  // [s][a]
  double gamma = 0.9;
  double r_min = 0.0;
  double r_max = 1.0;

  double prob(int a, int s, int s2) const {
    return p[(static_cast<std::size_t>(a) * n_states + s) * n_states + s2];
  }
  double& prob(int a, int s, int s2) {
    return p[(static_cast<std::size_t>(a) * n_states + s) * n_states + s2];
  }
  double reward(int s, int a) const { return r[static_cast<std::size_t>(s) * n_actions + a]; }
  double& reward(int s, int a) { return r[static_cast<std::size_t>(s) * n_actions + a]; }

  // Row-stochasticity within 1e-9, rewards within [r_min, r_max], gamma in [0, 1).
  void validate() const;
};

// Uniformly random dense MDP (Dirichlet(1) rows, uniform rewards in
// [r_min, r_max]).
Mdp make_random_mdp(int n_states, int n_actions, double gamma, Rng& rng, double r_min = 0.0,
                    double r_max = 1.0);

struct FactoredMdp {
  int n_endo = 0;
  int n_actions = 0;
  std::vector<int> exo_cards;       // cardinality per exogenous dim
  std::vector<std::uint8_t> relevant;  // per dim: read by reward/endo dynamics?
  // p_endo[((s * rel_count + rel) * n_actions + a) * n_endo + s']
  std::vector<double> p_endo;
  // per dim d: p_exo[d][v * card + v'], an independent Markov chain
  std::vector<std::vector<double>> p_exo;
  // rew[(s * rel_count + rel) * n_actions + a]
  std::vector<double> rew;
  double gamma = 0.9;
  double r_min = 0.0;
  double r_max = 1.0;

  int n_exo_dims() const { return static_cast<int>(exo_cards.size()); }
  // product of cardinalities over relevant dims (1 when none)
  int rel_count() const;
  // product over all dims
  int exo_count() const;
  // mixed-radix index of the relevant coordinates of a full exo assignment
  int rel_index(const std::vector<int>& exo_vals) const;
  int exo_index(const std::vector<int>& exo_vals) const;
  std::vector<int> exo_unindex(int code) const;

  double endo_prob(int s, int rel, int a, int s2) const {
    return p_endo[((static_cast<std::size_t>(s) * rel_count() + rel) * n_actions + a) * n_endo + s2];
  }
  double reward_at(int s, int rel, int a) const {
    return rew[(static_cast<std::size_t>(s) * rel_count() + rel) * n_actions + a];
  }

  void validate() const;
};

// Row-stochastic policy over a tabular MDP. Deterministic policies are the
// common case; the matrix form keeps policy evaluation general.
struct Policy {
  int n_states = 0;
  int n_actions = 0;
  std::vector<double> probs;  // [s][a]

  static Policy deterministic(const std::vector<int>& actions, int n_actions);
  static Policy uniform(int n_states, int n_actions);

  double prob_at(int s, int a) const {
    return probs[static_cast<std::size_t>(s) * n_actions + a];
  }
  // Rows sum to 1 within 1e-9 and the shape matches the MDP.
  void validate(const Mdp& mdp) const;
};

// Markov chain induced by running a policy: p [s][s'], r [s].
struct InducedChain {
  int n_states = 0;
  std::vector<double> p;
  std::vector<double> r;

  double prob(int s, int s2) const { return p[static_cast<std::size_t>(s) * n_states + s2]; }
};

InducedChain induced_chain(const Mdp& mdp, const Policy& pi);

struct FactoredSpec {
  int n_endo = 4;
  int n_actions = 2;
  std::vector<int> exo_cards;          // e.g. {2, 2, 2, 2}
  std::vector<std::uint8_t> relevant;  // same length as exo_cards
  double gamma = 0.9;
  double r_min = 0.0;
  double r_max = 1.0;
};

// Random instance; conditions on reward/dynamics locality and exo chain
// independence hold by construction.
FactoredMdp make_factored_mdp(const FactoredSpec& spec, Rng& rng);

struct TabularState {
  int s = 0;
  std::vector<int> exo;
};

// One environment transition. Draw order: endogenous state first, then exo
// dims in ascending index order (fixed for reproducibility).
TabularState tabular_step(const FactoredMdp& mdp, const TabularState& st, int action, Rng& rng,
                          double* reward_out = nullptr);

// Flat MDP over the joint state (s, all exo dims); index = s + n_endo * exo_index.
Mdp flatten_full(const FactoredMdp& mdp);

// A claimed decomposition of a flat state space into (endo, exo dims) with a
// relevant subset of the dims. This is a view over someone else's Mdp: the
// claim is audited there, not enforced here. flat index = s + n_endo * exo_index.
struct FactorLayout {
  int n_endo = 0;
  std::vector<int> exo_cards;
  std::vector<std::uint8_t> relevant;

  int n_exo_dims() const { return static_cast<int>(exo_cards.size()); }
  int rel_count() const;
  int exo_count() const;
  int n_flat() const { return n_endo * exo_count(); }
  int rel_index(const std::vector<int>& exo_vals) const;
  int exo_index(const std::vector<int>& exo_vals) const;
  std::vector<int> exo_unindex(int code) const;
  int flat_index(int s, int exo_code) const { return s + n_endo * exo_code; }
  int endo_of(int flat) const { return flat % n_endo; }
  int exo_code_of(int flat) const { return flat / n_endo; }
  // index over (endo, relevant coords) pairs: the reduced state space
  int kept_index(int s, int rel) const { return s + n_endo * rel; }
  int n_kept() const { return n_endo * rel_count(); }

  void validate() const;
};

// The layout a FactoredMdp's flatten_full output is guaranteed to satisfy.
FactorLayout layout_of(const FactoredMdp& mdp);

}  // namespace hwm
