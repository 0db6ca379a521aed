#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hwm/tabular.hpp"

// Mask-reduction value preservation, made executable. The claim being
// verified: in an MDP whose state splits into an endogenous part and
// independently-evolving exogenous dims, removing a subset M of the dims
// changes nothing an agent can ever observe through rewards, provided
//   (1) the reward never reads a dim in M,
//   (2) the endogenous transition never reads a dim in M,
//   (3) the dims in M evolve as autonomous chains, independent of the
//       endogenous state, the action, the kept dims, and each other.
// Then every policy over the reduced state space keeps its value function
// exactly when lifted to the full space, and the reduced optimum is a full
// optimum. reduce_mdp audits (1)-(3) on the flat arrays before
// marginalizing, so conforming instances are checked, not assumed.

namespace hwm {

struct MaskReduction {
  Mdp source;
  Mdp reduced;
  std::vector<int> masked_dims;
  FactorLayout kept_layout;            // relevant == kept dims
  std::vector<int> reduced_of_flat;    // flat state -> reduced state
};

// Marginalizes the masked dims out of a flat MDP laid out per `layout`.
// Audits conditions (1)-(3) first and throws std::invalid_argument naming
// the violated condition; `audit` exists so tests can measure what goes
// wrong when a violator is reduced anyway.
MaskReduction reduce_mdp(const Mdp& flat, const FactorLayout& layout,
                         const std::vector<int>& masked_dims, double audit_tol = 1e-9,
                         bool audit = true);

// Iterative policy evaluation: V ← r_π + γ P_π V until the sup-norm update
// drops below tol·(1−γ)/γ, which bounds the sup-norm error by tol.
std::vector<double> value_iteration(const Mdp& mdp, const Policy& pi, double tol);

// Direct linear solve of (I − γ P_π) V = r_π by Gaussian elimination with
// partial pivoting. Exact up to floating point; the oracle for the iterative
// path and the evaluation step inside policy iteration.
std::vector<double> policy_evaluation_exact(const Mdp& mdp, const Policy& pi);

struct PolicyIterationResult {
  std::vector<int> actions;  // deterministic optimal policy
  std::vector<double> value;
  int improvement_rounds = 0;
};

// Exact policy iteration (greedy improvement, ties to the smallest action
// index). Terminates because each round strictly improves or repeats.
PolicyIterationResult policy_iteration(const Mdp& mdp);

struct ValuePreservationReport {
  int n_flat = 0, n_reduced = 0;
  double max_value_gap = 0.0;  // max over flat states of |V_reduced − V_full|
  int argmax_flat = 0;
  double optimality_gap = 0.0;  // max over flat states of |V*_full − V_lifted|
  bool optimality_checked = false;
  bool passed = false;
};

// Evaluates a reduced-space policy on both MDPs and compares the value
// functions state by state. With policy_on_reduced == nullptr the reduced
// optimum (policy iteration) is used, and the lifted policy is additionally
// checked against the full MDP's optimal value function.
ValuePreservationReport verify_theorem1(const Mdp& flat, const FactorLayout& layout,
                                        const std::vector<int>& masked_dims,
                                        const std::vector<int>* policy_on_reduced = nullptr,
                                        double tol = 1e-8);

struct Theorem1BatchResult {
  int instances = 0;
  int failures = 0;
  double worst_value_gap = 0.0;
  double worst_optimality_gap = 0.0;
  std::vector<ValuePreservationReport> reports;
  bool passed = false;
};

// Random conforming instances: ≤ max_endo endogenous states, ≤ max_actions
// actions, two masked and two kept binary exogenous dims, γ = 0.9. Dims are
// relevant or masked in a random arrangement per instance.
Theorem1BatchResult run_theorem1_batch(int instances, std::uint64_t seed, int max_endo = 5,
                                       int max_actions = 3, double tol = 1e-8);

}  // namespace hwm
