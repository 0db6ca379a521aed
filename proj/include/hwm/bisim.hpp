#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hwm/tabular.hpp"

// Behavioral distances. Cosine geometry between state vectors, the one-step
// behavioral update target |Δr| + γ·d(next), exact tabular fixed-point
// iteration of that operator with two transition couplings, and a canonical
// counterexample showing that closing the behavioral gap between two states
// does not force their noise coordinates to agree.

namespace hwm {

// Training losses use `distance` (1 − cos) so that d(x, x) = 0; the
// counterexample reproduction uses raw `similarity` because its frozen
// reference digits are similarities. Neither is ever coerced into the other.
enum class CosineMode { distance, similarity };

// a·b / (‖a‖‖b‖), with each norm floored at eps. A floored norm means the
// input was (numerically) the zero vector; those calls are counted.
double cosine(std::span<const double> a, std::span<const double> b, CosineMode mode,
              double eps = 1e-8);
std::uint64_t cosine_guard_hits();
void reset_cosine_guard_hits();

// |r_i − r_j| + gamma·next_d. gamma must lie in [0, 1).
double behavioral_target(double r_i, double r_j, double next_d, double gamma);

// Symmetric pairwise-distance table with a zero diagonal, plus the state of
// the iteration that produced it.
struct MetricTable {
  int n = 0;
  std::vector<double> d;  // dense [n][n]
  int iterations = 0;
  double residual = 0.0;
  bool converged = false;

  static MetricTable zeros(int n);
  // off-diagonal entries all c, diagonal zero
  static MetricTable constant(int n, double c);

  double at(int u, int v) const { return d[static_cast<std::size_t>(u) * n + v]; }
  double& at(int u, int v) { return d[static_cast<std::size_t>(u) * n + v]; }
  double diameter() const;
};

// Exact optimal transport between two distributions on {0..n−1} under the
// ground cost `d`, with the optimality certificate: `plan` meets both
// marginals, cost = Σ plan·d, and the dual potentials satisfy
// u_i + v_j ≤ d(i,j) with Σ p·u + Σ q·v = cost.
struct TransportPlan {
  double cost = 0.0;
  std::vector<double> plan;  // [n][n]
  std::vector<double> u, v;  // dual potentials
};

// Successive-shortest-path solver, exact on supports up to 64 states.
// Throws if either distribution is off normalization by more than 1e-9.
TransportPlan wasserstein1_full(const MetricTable& d, std::span<const double> p,
                                std::span<const double> q);
double wasserstein1(const MetricTable& d, std::span<const double> p, std::span<const double> q);

// Σ_ij p_i q_j d(i,j): transport cost of the independent coupling. Cheap, and
// an upper bound on wasserstein1; not zero for identical distributions.
double independent_cost(const MetricTable& d, std::span<const double> p,
                        std::span<const double> q);

enum class Coupling { wasserstein, independent };

// Jacobi iteration of d ← |Δr| + γ·coupling_cost(d) over all state pairs of
// the policy-induced chain, from d₀ = 0 (or `init`), until the sweep-to-sweep
// residual drops below tol. Non-convergence is reported, not thrown.
MetricTable tabular_bisim_fixed_point(const Mdp& mdp, const Policy& pi, double gamma, double tol,
                                      int max_iters, Coupling coupling,
                                      const MetricTable* init = nullptr);

struct DiameterReport {
  double diameter = 0.0;
  double bound = 0.0;
  int arg_u = 0, arg_v = 0;  // maximizing pair
  bool ok = false;
};

// max-entry check against (r_max − r_min)/(1 − gamma).
DiameterReport diameter_bound_check(const MetricTable& m, double r_min, double r_max, double gamma,
                                    double tol = 1e-9);

// Fixed instance: two 5-dim states that differ in their two noise
// coordinates, each within ε of its one-step behavioral target — i.e. the
// pair is behaviorally closed while the noise disagreement persists. The
// computed values are checked against frozen 4-digit reference values.
struct CounterexampleReport {
  double full_similarity = 0.0, full_next_similarity = 0.0;
  double full_target = 0.0, full_delta = 0.0;
  double endo_similarity = 0.0, endo_next_similarity = 0.0;
  double endo_target = 0.0, endo_delta = 0.0;
  double epsilon = 0.0;          // closure threshold on |value − target|
  double print_tolerance = 0.0;  // allowed deviation from the reference digits
  bool full_within_eps = false, endo_within_eps = false;
  bool matches_reference = false;
  bool passed = false;
};

CounterexampleReport reproduce_counterexample();

// Batch verification: random MDPs (≤ max_states states, every third instance
// carrying an exact duplicate of state 0), iterated to the fixed point with
// the Wasserstein coupling under a random deterministic policy.
struct BisimBatchResult {
  int instances = 0;
  int non_converged = 0;
  int bound_violations = 0;
  int duplicate_violations = 0;
  int max_iterations = 0;       // worst sweep count over the batch
  double worst_residual = 0.0;  // largest final residual
  double worst_bound_slack = 0.0;  // max over instances of diameter − bound
  double worst_duplicate_distance = 0.0;
  bool passed = false;
};

BisimBatchResult run_bisim_batch(int instances, std::uint64_t seed, int max_states = 10,
                                 double tol = 1e-9, int max_iters = 2000);

}  // namespace hwm
