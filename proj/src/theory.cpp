#include "hwm/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace hwm {

namespace {

[[noreturn]] void audit_fail(const std::string& what) {
  throw std::invalid_argument("mask audit failed, " + what);
}

// exo assignment for a reduced code: kept dims from `rel` (mixed radix,
// ascending), masked dims pinned to 0
std::vector<int> rep_vals(const FactorLayout& kept_layout, int rel) {
  std::vector<int> vals(kept_layout.exo_cards.size(), 0);
  for (std::size_t d = 0; d < kept_layout.exo_cards.size(); ++d) {
    if (!kept_layout.relevant[d]) continue;
    vals[d] = rel % kept_layout.exo_cards[d];
    rel /= kept_layout.exo_cards[d];
  }
  return vals;
}

}  // namespace

MaskReduction reduce_mdp(const Mdp& flat, const FactorLayout& layout,
                         const std::vector<int>& masked_dims, double audit_tol, bool audit) {
  layout.validate();
  flat.validate();
  if (layout.n_flat() != flat.n_states)
    throw std::invalid_argument("layout state count does not match the MDP");
  const int n_dims = layout.n_exo_dims();
  std::vector<std::uint8_t> is_masked(n_dims, 0);
  for (int d : masked_dims) {
    if (d < 0 || d >= n_dims) throw std::invalid_argument("masked dim index out of range");
    if (is_masked[d]) throw std::invalid_argument("masked dim listed twice");
    is_masked[d] = 1;
  }
  std::vector<std::uint8_t> kept(n_dims);
  for (int d = 0; d < n_dims; ++d) kept[d] = !is_masked[d];
  const FactorLayout kept_layout{layout.n_endo, layout.exo_cards, kept};

  const int n_flat = flat.n_states, n_act = flat.n_actions;
  const int n_endo = layout.n_endo, n_red = kept_layout.n_kept();

  std::vector<std::vector<int>> vals_of(n_flat);
  std::vector<int> red_of(n_flat);
  for (int z = 0; z < n_flat; ++z) {
    vals_of[z] = layout.exo_unindex(layout.exo_code_of(z));
    red_of[z] = kept_layout.kept_index(layout.endo_of(z), kept_layout.rel_index(vals_of[z]));
  }

  // kept-part marginal per context: T[(z*A + a)*n_red + rho']
  std::vector<double> T(static_cast<std::size_t>(n_flat) * n_act * n_red, 0.0);
  for (int a = 0; a < n_act; ++a)
    for (int z = 0; z < n_flat; ++z) {
      double* row = T.data() + (static_cast<std::size_t>(z) * n_act + a) * n_red;
      for (int z2 = 0; z2 < n_flat; ++z2) row[red_of[z2]] += flat.prob(a, z, z2);
    }

  if (audit) {
    // neighbor walk: compare each flat state against the same state with one
    // masked dim stepped by one; the chain of steps covers every value pair
    const auto for_each_neighbor = [&](auto&& fn) {
      for (int z = 0; z < n_flat; ++z)
        for (int d = 0; d < n_dims; ++d) {
          if (!is_masked[d] || vals_of[z][d] + 1 >= layout.exo_cards[d]) continue;
          auto up = vals_of[z];
          ++up[d];
          fn(z, layout.flat_index(layout.endo_of(z), layout.exo_index(up)), d);
        }
    };

    // (1) reward must not read masked values
    for_each_neighbor([&](int z, int z_up, int d) {
      for (int a = 0; a < n_act; ++a)
        if (std::abs(flat.reward(z, a) - flat.reward(z_up, a)) > audit_tol)
          audit_fail("condition (1): reward depends on masked dim " + std::to_string(d));
    });

    // (2) the endogenous transition must not read masked values
    std::vector<double> E(static_cast<std::size_t>(n_flat) * n_act * n_endo, 0.0);
    for (int a = 0; a < n_act; ++a)
      for (int z = 0; z < n_flat; ++z) {
        const double* trow = T.data() + (static_cast<std::size_t>(z) * n_act + a) * n_red;
        double* erow = E.data() + (static_cast<std::size_t>(z) * n_act + a) * n_endo;
        for (int rho = 0; rho < n_red; ++rho) erow[rho % n_endo] += trow[rho];
      }
    for_each_neighbor([&](int z, int z_up, int d) {
      for (int a = 0; a < n_act; ++a) {
        const double* ea = E.data() + (static_cast<std::size_t>(z) * n_act + a) * n_endo;
        const double* eb = E.data() + (static_cast<std::size_t>(z_up) * n_act + a) * n_endo;
        for (int s2 = 0; s2 < n_endo; ++s2)
          if (std::abs(ea[s2] - eb[s2]) > audit_tol)
            audit_fail("condition (2): endogenous transition depends on masked dim " +
                       std::to_string(d));
      }
    });

    // (3) kept dims' own transitions must not read masked values either
    for_each_neighbor([&](int z, int z_up, int d) {
      for (int a = 0; a < n_act; ++a) {
        const double* ta = T.data() + (static_cast<std::size_t>(z) * n_act + a) * n_red;
        const double* tb = T.data() + (static_cast<std::size_t>(z_up) * n_act + a) * n_red;
        for (int rho = 0; rho < n_red; ++rho)
          if (std::abs(ta[rho] - tb[rho]) > audit_tol)
            audit_fail("condition (3): kept dims' transition depends on masked dim " +
                       std::to_string(d));
      }
    });

    // (3) each masked dim must follow one context-free chain
    std::vector<std::vector<double>> chains(n_dims);
    for (int d = 0; d < n_dims; ++d) {
      if (!is_masked[d]) continue;
      const int card = layout.exo_cards[d];
      chains[d].assign(static_cast<std::size_t>(card) * card, -1.0);  // -1 = unfilled
      std::vector<double> row(card);
      for (int z = 0; z < n_flat; ++z) {
        const int v = vals_of[z][d];
        for (int a = 0; a < n_act; ++a) {
          std::fill(row.begin(), row.end(), 0.0);
          for (int z2 = 0; z2 < n_flat; ++z2) row[vals_of[z2][d]] += flat.prob(a, z, z2);
          double* ref = chains[d].data() + static_cast<std::size_t>(v) * card;
          if (ref[0] < 0.0) {
            std::copy(row.begin(), row.end(), ref);
          } else {
            for (int v2 = 0; v2 < card; ++v2)
              if (std::abs(row[v2] - ref[v2]) > audit_tol)
                audit_fail("condition (3): masked dim " + std::to_string(d) +
                           "'s chain depends on its context");
          }
        }
      }
    }

    // (3) the joint must equal kept-part marginal x masked chains
    for (int a = 0; a < n_act; ++a)
      for (int z = 0; z < n_flat; ++z) {
        const double* trow = T.data() + (static_cast<std::size_t>(z) * n_act + a) * n_red;
        for (int z2 = 0; z2 < n_flat; ++z2) {
          double pred = trow[red_of[z2]];
          for (int d = 0; d < n_dims; ++d)
            if (is_masked[d])
              pred *= chains[d][static_cast<std::size_t>(vals_of[z][d]) * layout.exo_cards[d] +
                                vals_of[z2][d]];
          if (std::abs(pred - flat.prob(a, z, z2)) > audit_tol)
            audit_fail("condition (3): transition does not factorise across the masked dims");
        }
      }
  }

  MaskReduction out;
  out.source = flat;
  out.masked_dims = masked_dims;
  std::sort(out.masked_dims.begin(), out.masked_dims.end());
  out.kept_layout = kept_layout;
  out.reduced_of_flat = std::move(red_of);

  Mdp& red = out.reduced;
  red.n_states = n_red;
  red.n_actions = n_act;
  red.p.assign(static_cast<std::size_t>(n_act) * n_red * n_red, 0.0);
  red.r.assign(static_cast<std::size_t>(n_red) * n_act, 0.0);
  red.gamma = flat.gamma;
  red.r_min = flat.r_min;
  red.r_max = flat.r_max;
  for (int rho = 0; rho < n_red; ++rho) {
    const auto vals = rep_vals(kept_layout, rho / n_endo);
    const int z_rep = layout.flat_index(rho % n_endo, layout.exo_index(vals));
    for (int a = 0; a < n_act; ++a) {
      red.reward(rho, a) = flat.reward(z_rep, a);
      const double* trow = T.data() + (static_cast<std::size_t>(z_rep) * n_act + a) * n_red;
      for (int rho2 = 0; rho2 < n_red; ++rho2) red.prob(a, rho, rho2) = trow[rho2];
    }
  }
  red.validate();
  return out;
}

std::vector<double> value_iteration(const Mdp& mdp, const Policy& pi, double tol) {
  if (tol <= 0.0) throw std::invalid_argument("value_iteration: tol must be positive");
  const InducedChain ch = induced_chain(mdp, pi);
  const int n = ch.n_states;
  const double g = mdp.gamma;
  const double stop = g > 0.0 ? tol * (1.0 - g) / g : tol;
  std::vector<double> v(n, 0.0), nv(n);
  for (;;) {
    double resid = 0.0;
    for (int s = 0; s < n; ++s) {
      double acc = ch.r[s];
      for (int s2 = 0; s2 < n; ++s2) acc += g * ch.prob(s, s2) * v[s2];
      resid = std::max(resid, std::abs(acc - v[s]));
      nv[s] = acc;
    }
    v.swap(nv);
    if (resid < stop) return v;
  }
}

std::vector<double> policy_evaluation_exact(const Mdp& mdp, const Policy& pi) {
  const InducedChain ch = induced_chain(mdp, pi);
  const int n = ch.n_states;
  // solve (I - gamma P) V = r by Gaussian elimination with partial pivoting
  std::vector<double> A(static_cast<std::size_t>(n) * n);
  std::vector<double> b(ch.r);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      A[static_cast<std::size_t>(i) * n + j] = (i == j ? 1.0 : 0.0) - mdp.gamma * ch.prob(i, j);
  for (int col = 0; col < n; ++col) {
    int piv = col;
    for (int i = col + 1; i < n; ++i)
      if (std::abs(A[static_cast<std::size_t>(i) * n + col]) >
          std::abs(A[static_cast<std::size_t>(piv) * n + col]))
        piv = i;
    if (std::abs(A[static_cast<std::size_t>(piv) * n + col]) < 1e-300)
      throw std::runtime_error("policy evaluation: singular system");
    if (piv != col) {
      for (int j = col; j < n; ++j)
        std::swap(A[static_cast<std::size_t>(piv) * n + j],
                  A[static_cast<std::size_t>(col) * n + j]);
      std::swap(b[piv], b[col]);
    }
    const double inv = 1.0 / A[static_cast<std::size_t>(col) * n + col];
    for (int i = col + 1; i < n; ++i) {
      const double f = A[static_cast<std::size_t>(i) * n + col] * inv;
      if (f == 0.0) continue;
      for (int j = col; j < n; ++j)
        A[static_cast<std::size_t>(i) * n + j] -= f * A[static_cast<std::size_t>(col) * n + j];
      b[i] -= f * b[col];
    }
  }
  std::vector<double> v(n);
  for (int i = n - 1; i >= 0; --i) {
    double acc = b[i];
    for (int j = i + 1; j < n; ++j) acc -= A[static_cast<std::size_t>(i) * n + j] * v[j];
    v[i] = acc / A[static_cast<std::size_t>(i) * n + i];
  }
  return v;
}

PolicyIterationResult policy_iteration(const Mdp& mdp) {
  const int n = mdp.n_states, na = mdp.n_actions;
  PolicyIterationResult res;
  res.actions.assign(n, 0);
  for (int round = 0; round < 1000; ++round) {
    res.value = policy_evaluation_exact(mdp, Policy::deterministic(res.actions, na));
    res.improvement_rounds = round + 1;
    bool changed = false;
    for (int s = 0; s < n; ++s) {
      int best = 0;
      double best_q = -std::numeric_limits<double>::infinity();
      for (int a = 0; a < na; ++a) {
        double q = mdp.reward(s, a);
        for (int s2 = 0; s2 < n; ++s2) q += mdp.gamma * mdp.prob(a, s, s2) * res.value[s2];
        if (q > best_q) {
          best_q = q;
          best = a;
        }
      }
      if (best != res.actions[s]) {
        // switch only on a strict improvement over the current action's Q,
        // so exact ties cannot oscillate between equal policies
        double cur_q = mdp.reward(s, res.actions[s]);
        for (int s2 = 0; s2 < n; ++s2)
          cur_q += mdp.gamma * mdp.prob(res.actions[s], s, s2) * res.value[s2];
        if (best_q > cur_q) {
          res.actions[s] = best;
          changed = true;
        }
      }
    }
    if (!changed) return res;
  }
  throw std::runtime_error("policy iteration failed to stabilize");
}

ValuePreservationReport verify_theorem1(const Mdp& flat, const FactorLayout& layout,
                                        const std::vector<int>& masked_dims,
                                        const std::vector<int>* policy_on_reduced, double tol) {
  const MaskReduction red = reduce_mdp(flat, layout, masked_dims);
  const int n_red = red.reduced.n_states;

  ValuePreservationReport rep;
  rep.n_flat = flat.n_states;
  rep.n_reduced = n_red;
  rep.optimality_checked = policy_on_reduced == nullptr;

  std::vector<int> actions;
  if (policy_on_reduced) {
    if (static_cast<int>(policy_on_reduced->size()) != n_red)
      throw std::invalid_argument("reduced policy has the wrong number of states");
    actions = *policy_on_reduced;
  } else {
    actions = policy_iteration(red.reduced).actions;
  }

  const double vi_tol = tol / 4.0;
  const auto v_red =
      value_iteration(red.reduced, Policy::deterministic(actions, flat.n_actions), vi_tol);
  std::vector<int> lifted(flat.n_states);
  for (int z = 0; z < flat.n_states; ++z) lifted[z] = actions[red.reduced_of_flat[z]];
  const auto v_full =
      value_iteration(flat, Policy::deterministic(lifted, flat.n_actions), vi_tol);

  for (int z = 0; z < flat.n_states; ++z) {
    const double gap = std::abs(v_red[red.reduced_of_flat[z]] - v_full[z]);
    if (gap > rep.max_value_gap) {
      rep.max_value_gap = gap;
      rep.argmax_flat = z;
    }
  }
  if (rep.optimality_checked) {
    const auto v_star = policy_iteration(flat).value;
    for (int z = 0; z < flat.n_states; ++z)
      rep.optimality_gap =
          std::max(rep.optimality_gap, std::abs(v_red[red.reduced_of_flat[z]] - v_star[z]));
  }
  rep.passed = rep.max_value_gap <= tol && (!rep.optimality_checked || rep.optimality_gap <= tol);
  return rep;
}

Theorem1BatchResult run_theorem1_batch(int instances, std::uint64_t seed, int max_endo,
                                       int max_actions, double tol) {
  Theorem1BatchResult res;
  res.instances = instances;
  Rng root(seed);
  for (int k = 0; k < instances; ++k) {
    Rng rng(root.fork_seed());
    FactoredSpec spec;
    spec.n_endo = 2 + rng.uniform_int(max_endo - 1);
    spec.n_actions = 1 + rng.uniform_int(max_actions);
    spec.exo_cards = {2, 2, 2, 2};
    spec.relevant.assign(4, 0);
    const auto perm = rng.permutation(4);
    spec.relevant[perm[0]] = spec.relevant[perm[1]] = 1;  // two kept, two masked
    spec.gamma = 0.9;
    const FactoredMdp fm = make_factored_mdp(spec, rng);

    std::vector<int> masked;
    for (int d = 0; d < 4; ++d)
      if (!spec.relevant[d]) masked.push_back(d);
    const auto rep =
        verify_theorem1(flatten_full(fm), layout_of(fm), masked, nullptr, tol);
    res.worst_value_gap = std::max(res.worst_value_gap, rep.max_value_gap);
    res.worst_optimality_gap = std::max(res.worst_optimality_gap, rep.optimality_gap);
    if (!rep.passed) ++res.failures;
    res.reports.push_back(rep);
  }
  res.passed = res.failures == 0;
  return res;
}

}  // namespace hwm
